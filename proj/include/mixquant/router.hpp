#pragma once

#include <vector>

#include "mixquant/autodiff.hpp"
#include "mixquant/data.hpp"
#include "mixquant/model.hpp"
#include "mixquant/tensor.hpp"

namespace mixquant {

// Per-item routing over the behavior experts. weights[j] is zero exactly
// where the pre-activation is <= 0; s_current = 1 - active/N_b.
struct RouterOutput {
  Tensor weights;
  std::vector<bool> active_mask;
  double s_current = 1.0;
};

// Adaptive sparsity penalty scale. lambda stays within
// [lambda_min, lambda_max]; update_factor is the multiplicative step base.
struct SparsityState {
  double lambda = 1e-2;
  double update_factor = 1.02;
  double theta = 1.0 / 3.0;
  double lambda_min = 1e-6;
  double lambda_max = 10.0;
};

// weights = sigmoid(n_norm(e_b)) * relu(router_mlp(e_b) + router_bias).
RouterOutput route_behavior(const Tensor& e_b, const MixQuantModel& m,
                            const NormStats& stats);

// Tape twin of route_behavior's weight vector. The sigmoid factor depends
// only on the input, so it enters as a constant scale. Values are
// bit-identical to route_behavior.
ad::Var route_weights_tape(ad::Tape& tape, const Tensor& e_b, MixQuantModel& m,
                           const NormStats& stats);

// theta * (1 - n_norm), clamped to [0, 1]: popular items (high behavioral
// norm) get dense routing targets, long-tail items sparse ones.
double target_sparsity(double n_norm, double theta);
double target_sparsity(const Tensor& e_b, double theta, const NormStats& stats);

// Mean active fraction over the batch divided by (1 - s_target_mean);
// equals 1 when realized density matches the target density.
double load_balance_factor(const std::vector<RouterOutput>& batch,
                           double s_target_mean);

// lambda * f_lb * (batch mean of the L1 norm of the router weights).
double sparsity_regularization(const std::vector<RouterOutput>& batch,
                               double f_lb, const SparsityState& state);
ad::Var sparsity_regularization_tape(ad::Tape& tape,
                                     const std::vector<ad::Var>& batch_weights,
                                     double f_lb, double lambda);

// Multiply lambda by update_factor when the batch routes denser than target,
// divide when sparser, hold on exact equality; clamp to the bounds.
SparsityState update_lambda(SparsityState state, double s_target_mean,
                            double s_current_mean);

}  // namespace mixquant
