#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixquant/data.hpp"
#include "mixquant/graph.hpp"
#include "mixquant/model.hpp"
#include "mixquant/router.hpp"

namespace mixquant {

// Global gradient-norm ceiling; protects the contrastive terms early on.
inline constexpr double kGradClipNorm = 5.0;

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 7;

  // Composition weights of the total objective; unit by default.
  double w_recon = 1.0;
  double w_align_block = 1.0;
  double w_vq = 1.0;
  double w_reg = 1.0;

  double alpha = 10.0;          // alignment controller steepness
  double beta = 9.0;            // alignment controller offset
  double tau = 0.07;            // contrastive temperature
  double theta = 1.0 / 3.0;     // target sparsity scale
  double lambda_0 = 1e-2;       // initial sparsity penalty
  double update_factor = 1.02;  // multiplicative penalty schedule
  std::size_t warmup_epochs = 0;  // epochs with the behavior term disabled

  std::size_t codebook_size = 32;
  std::uint64_t reset_threshold = 1;  // usage below this resets; 0 disables
  bool kmeans_init = true;

  std::size_t latent_dim = 16;
  std::size_t n_shared = 2;
  std::size_t n_text = 2;
  std::size_t n_vision = 2;
  std::size_t n_behavior = 6;

  ModelConfig model_config() const;
  bool operator==(const TrainConfig&) const = default;
};

// JSON mirrors the field names exactly; unknown keys are rejected, missing
// keys keep their defaults.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
void save_train_config(const TrainConfig& cfg, const std::string& path);
TrainConfig load_train_config(const std::string& path);

// Adaptive moment estimates, one slot per canonical parameter; lazily sized
// on the first update.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step_count = 0;
  std::vector<Tensor> m1, m2;
};

void optimizer_update(const std::vector<Tensor*>& params,
                      const std::vector<Tensor>& grads, double lr,
                      AdamState& state);

struct StepReport {
  double l_recon = 0.0;
  double l_content = 0.0;
  double l_align = 0.0;  // weighted mean of the behavior entries
  double l_vq = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
  double mean_s_current = 0.0;
  double mean_w = 0.0;
  double lambda = 0.0;
};

struct TrainState {
  AdamState adam;
  SparsityState sparsity;
  NormStats stats{0.0, 1.0};
  std::size_t epoch = 0;
};

// The whole batch objective on one tape. Components are batch means;
// total = w_recon*recon + w_align_block*(content + behavior) + w_vq*vq
//       + w_reg*reg. Warm-up epochs drop the weighted behavior term.
struct BatchGraph {
  std::vector<ItemGraph> items;
  ad::Var l_recon, l_content, l_align, l_vq, l_reg, total;
  std::vector<double> controller_w;  // per-item alignment weights
  double s_target_mean = 0.0;
  double s_current_mean = 0.0;
  double f_lb = 0.0;
};

BatchGraph build_batch_graph(ad::Tape& tape, const std::vector<ItemRecord>& batch,
                             MixQuantModel& m, const TrainState& state,
                             const TrainConfig& cfg,
                             const std::vector<QuantFreeze>* freeze = nullptr);

// Forward, backward, clipped optimizer update, penalty-scale update, usage
// counting. Aborts with the failing component's name on a non-finite loss.
StepReport train_step(const std::vector<ItemRecord>& batch, MixQuantModel& m,
                      TrainState& state, const TrainConfig& cfg);

// Seeded shuffled batches (batch_size each, remainder dropped), dead-code
// reset at every epoch end from a fresh full-dataset assignment pass,
// optional checkpoint at the end. History holds per-epoch means of the step
// reports.
std::pair<MixQuantModel, std::vector<StepReport>> train(
    const Dataset& data, const TrainConfig& cfg,
    const std::string& checkpoint_path = "");

void save_history(const std::vector<StepReport>& history, const std::string& path);

}  // namespace mixquant
