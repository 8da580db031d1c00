#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mixquant/data.hpp"
#include "mixquant/quantize.hpp"
#include "mixquant/rng.hpp"
#include "mixquant/tensor.hpp"

namespace mixquant {

// Relu on hidden layers, linear output. Aggregate so tests can hand-build
// exact instances (a single layer with identity weights is a valid Mlp).
struct Mlp {
  std::vector<Tensor> weights;  // each [out, in]
  std::vector<Tensor> biases;   // each [out]
};

Tensor mlp_forward_plain(const Mlp& mlp, const Tensor& x);
Mlp mlp_init(const std::vector<std::size_t>& layer_dims, Rng& rng);

struct ModelConfig {
  std::size_t latent_dim = 16;
  std::size_t n_shared = 2;
  std::size_t n_text = 2;
  std::size_t n_vision = 2;
  std::size_t n_behavior = 6;
  std::size_t codebook_size = 32;
  double alpha = 10.0;          // alignment controller steepness
  double beta = 9.0;            // alignment controller offset
  double tau = 0.07;            // contrastive temperature
  double theta = 1.0 / 3.0;     // target sparsity scale
  double lambda_0 = 1e-2;       // initial sparsity penalty
  double update_factor = 1.02;  // multiplicative penalty schedule

  std::size_t sid_length() const { return n_shared + n_text + n_vision + n_behavior; }
  bool operator==(const ModelConfig&) const = default;
};

struct MixQuantModel {
  ModelConfig cfg;
  Dims input_dims;
  std::uint64_t init_seed = 0;

  Mlp proj_t, proj_v, proj_b;
  std::vector<Mlp> shared_experts;
  std::vector<Mlp> text_experts;
  std::vector<Mlp> vision_experts;
  std::vector<Mlp> behavior_experts;
  Mlp gate_t_mlp, gate_v_mlp;
  Tensor gate_t_bias, gate_v_bias;
  Mlp router_mlp;
  Tensor router_bias;
  Mlp decoder;
  std::vector<Codebook> codebooks;  // one per expert: shared, text, vision, behavior

  // Canonical parameter order; defines the checkpoint payload layout and the
  // optimizer slot order.
  void for_each_param(const std::function<void(Tensor&)>& fn);
  void for_each_param(const std::function<void(const Tensor&)>& fn) const;
};

MixQuantModel init_model(const ModelConfig& cfg, const Dims& input_dims,
                         std::uint64_t seed);

struct ProjectedItem {
  Tensor h_t, h_v, h_b;  // raw per-modality projections
  // Fused cross-modal input [h_t, h_v, w * h_b]: the behavior block enters
  // scaled by the alignment controller weight, so behavior only reaches the
  // shared experts for items whose interaction history earns trust.
  Tensor h;
};

struct LatentSet {
  std::vector<Tensor> shared, text, vision, behavior;
};

struct Gates {
  Tensor g_t, g_v;
};

struct FusedPair {
  Tensor z, z_q;
};

ProjectedItem project_modalities(const ItemRecord& item, const MixQuantModel& m,
                                 const NormStats& stats);
std::vector<Tensor> encode_shared(const Tensor& h, const MixQuantModel& m);
LatentSet encode_specific(const ItemRecord& item, const MixQuantModel& m);
Gates compute_gates(const ItemRecord& item, const MixQuantModel& m);

// Weighted sums of the pre-quantization latents and their matched codewords.
// Behavioral terms use the router weights in both sums.
FusedPair fuse_latents(const LatentSet& pre, const LatentSet& quantized,
                       const Tensor& g_t, const Tensor& g_v,
                       const Tensor& router_weights);

// Straight-through reconstruction: forward value follows z_q, gradients
// follow z. The plain path mirrors the tape expression z + (z_q - z).
Tensor decode(const Tensor& z, const Tensor& z_q, const MixQuantModel& m);

void save_model(const MixQuantModel& m, const std::string& path);
MixQuantModel load_model(const std::string& path);

}  // namespace mixquant
