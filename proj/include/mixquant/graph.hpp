#pragma once

#include <vector>

#include "mixquant/autodiff.hpp"
#include "mixquant/data.hpp"
#include "mixquant/model.hpp"
#include "mixquant/quantize.hpp"
#include "mixquant/router.hpp"

namespace mixquant {

// Tape twin of mlp_forward_plain: relu between layers, linear final layer.
// Layer tensors are registered as tape parameters, so repeated calls on the
// same tape share nodes and gradients accumulate.
ad::Var mlp_forward_tape(ad::Tape& tape, Mlp& mlp, ad::Var x);

// Reference-point snapshot of the quantization choices for one item. Pinning
// the stop-gradient branches (codeword selection, straight-through residual)
// to these values makes the objective differentiable in a neighborhood, which
// is what central-difference gradient checks need.
struct QuantFreeze {
  std::vector<std::size_t> codes;   // chosen codeword per SID position
  std::vector<Tensor> latents;      // pre-quantization latent per position
  std::vector<Tensor> codewords;    // chosen codeword values per position
  Tensor residual;                  // fused z_q - z
};

// One item's full differentiable forward pass. Values are bit-identical to
// the plain ops (project_modalities, encode_*, compute_gates, route_behavior,
// fuse_latents, decode); the SID position order is shared, text, vision,
// behavior, matching the codebook order.
struct ItemGraph {
  ad::Var h_t, h_v, h_b;                // projected modality features
  ad::Var gates_t, gates_v;             // softmax mixture weights
  ad::Var router_weights;               // nonnegative behavior weights
  RouterOutput routing;                 // plain routing, same values
  std::vector<ad::Var> latents;         // per SID position
  std::vector<Assignment> assignments;  // per SID position
  ad::Var z, z_q;                       // fused pre-quant / quantized
  ad::Var reconstruction;               // decoder output
  ad::Var recon_loss;                   // squared error vs [e_t, e_v, e_b]
  ad::Var vq_loss;                      // summed over positions
};

// freeze == nullptr runs live quantization with stop-gradient semantics.
// With a freeze, codeword choices come from the snapshot and every
// stop-gradient branch is replaced by the snapshot value as a constant leaf.
ItemGraph build_item_graph(ad::Tape& tape, const ItemRecord& item,
                           MixQuantModel& m, const NormStats& stats,
                           const QuantFreeze* freeze = nullptr);

QuantFreeze snapshot_quantization(const ItemGraph& g);

}  // namespace mixquant
