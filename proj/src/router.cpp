#include "mixquant/router.hpp"

#include <algorithm>
#include <cstddef>

#include "mixquant/align.hpp"
#include "mixquant/errors.hpp"
#include "mixquant/graph.hpp"

namespace mixquant {

RouterOutput route_behavior(const Tensor& e_b, const MixQuantModel& m,
                            const NormStats& stats) {
  Tensor pre = mlp_forward_plain(m.router_mlp, e_b);
  if (!pre.same_shape(m.router_bias)) {
    throw ShapeError("router bias shape " + m.router_bias.shape_str() +
                     " does not match mlp output " + pre.shape_str());
  }
  const double sig = sigmoid(norm_normalize(e_b, stats));
  RouterOutput out;
  out.weights = Tensor::zeros({pre.size()});
  out.active_mask.assign(pre.size(), false);
  std::size_t active = 0;
  for (std::size_t j = 0; j < pre.size(); ++j) {
    double p = pre[j] + m.router_bias[j];
    if (p > 0.0) {
      out.weights[j] = sig * p;
      out.active_mask[j] = true;
      ++active;
    }
  }
  out.s_current = static_cast<double>(pre.size() - active) /
                  static_cast<double>(pre.size());
  return out;
}

ad::Var route_weights_tape(ad::Tape& tape, const Tensor& e_b, MixQuantModel& m,
                           const NormStats& stats) {
  ad::Var pre = ad::add(mlp_forward_tape(tape, m.router_mlp, tape.leaf(e_b)),
                        tape.param(m.router_bias));
  return ad::scale(ad::relu(pre), sigmoid(norm_normalize(e_b, stats)));
}

double target_sparsity(double n_norm, double theta) {
  if (theta < 0.0) throw PreconditionError("target_sparsity: theta must be >= 0");
  return std::clamp(theta * (1.0 - n_norm), 0.0, 1.0);
}

double target_sparsity(const Tensor& e_b, double theta, const NormStats& stats) {
  return target_sparsity(norm_normalize(e_b, stats), theta);
}

double load_balance_factor(const std::vector<RouterOutput>& batch,
                           double s_target_mean) {
  if (batch.empty()) throw PreconditionError("load_balance_factor: empty batch");
  if (s_target_mean >= 1.0 - 1e-9) {
    throw PreconditionError("load_balance_factor: degenerate sparsity target");
  }
  double mean_fraction = 0.0;
  for (const RouterOutput& r : batch) {
    if (r.active_mask.empty()) {
      throw PreconditionError("load_balance_factor: router output has no experts");
    }
    std::size_t active = 0;
    for (bool on : r.active_mask) active += on ? 1 : 0;
    mean_fraction += static_cast<double>(active) /
                     static_cast<double>(r.active_mask.size());
  }
  mean_fraction /= static_cast<double>(batch.size());
  return mean_fraction / (1.0 - s_target_mean);
}

double sparsity_regularization(const std::vector<RouterOutput>& batch,
                               double f_lb, const SparsityState& state) {
  if (batch.empty()) {
    throw PreconditionError("sparsity_regularization: empty batch");
  }
  double total = 0.0;
  for (const RouterOutput& r : batch) {
    double l1 = 0.0;
    for (double w : r.weights.values()) l1 += std::abs(w);
    total += l1;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  return (state.lambda * f_lb) * (total * inv_b);
}

ad::Var sparsity_regularization_tape(ad::Tape& tape,
                                     const std::vector<ad::Var>& batch_weights,
                                     double f_lb, double lambda) {
  if (batch_weights.empty()) {
    throw PreconditionError("sparsity_regularization: empty batch");
  }
  std::vector<ad::Var> l1s;
  l1s.reserve(batch_weights.size());
  for (const ad::Var& w : batch_weights) {
    if (w.tape() != &tape) {
      throw PreconditionError("sparsity_regularization: vars from a different tape");
    }
    l1s.push_back(ad::sum(w));
  }
  const double inv_b = 1.0 / static_cast<double>(batch_weights.size());
  return ad::scale(ad::scale(ad::add_n(l1s), inv_b), lambda * f_lb);
}

SparsityState update_lambda(SparsityState state, double s_target_mean,
                            double s_current_mean) {
  if (!(state.update_factor > 1.0)) {
    throw PreconditionError("update_lambda: update_factor must exceed 1");
  }
  if (s_target_mean > s_current_mean) {
    state.lambda *= state.update_factor;
  } else if (s_target_mean < s_current_mean) {
    state.lambda /= state.update_factor;
  }
  state.lambda = std::clamp(state.lambda, state.lambda_min, state.lambda_max);
  return state;
}

}  // namespace mixquant
