#pragma once

#include <vector>

#include "mixquant/autodiff.hpp"
#include "mixquant/data.hpp"
#include "mixquant/tensor.hpp"

namespace mixquant {

struct ControllerParams {
  double alpha = 10.0;
  double beta = 9.0;
  NormStats stats;
};

// Position of a behavioral norm inside the dataset's norm range, clamped to
// [0, 1]. A degenerate range (all norms equal) maps everything to 0.5.
double norm_normalize(double behavior_norm, const NormStats& stats);
double norm_normalize(const Tensor& e_b, const NormStats& stats);

// w = sigmoid(alpha * n_norm - beta) / sigmoid(alpha - beta); equals 1 at
// n_norm = 1 and decays toward 0 for norm-poor items.
double alignment_weight(double n_norm, const ControllerParams& p);

// Batch InfoNCE between text and vision hidden reps, both directions, with
// cosine similarity and the other B-1 items as negatives. Returns the batch
// mean of the per-item two-direction sums.
ad::Var content_contrastive_loss(ad::Tape& tape, const std::vector<ad::Var>& h_t,
                                 const std::vector<ad::Var>& h_v, double tau);

// One-directional InfoNCE of each behavioral rep against the content reps
// h_c = h_t + h_v. Unreduced so per-item controller weights can apply.
std::vector<ad::Var> behavior_content_contrastive_loss(
    ad::Tape& tape, const std::vector<ad::Var>& h_b,
    const std::vector<ad::Var>& h_c, double tau);

struct AlignBatch {
  std::vector<ad::Var> h_t, h_v, h_b;
  std::vector<double> weights;  // controller output per item
  double tau = 0.07;
};

struct AlignLosses {
  ad::Var content;
  ad::Var behavior_weighted;  // mean of w_i * per-item behavior loss
  ad::Var total;
};

AlignLosses total_alignment_loss(ad::Tape& tape, const AlignBatch& batch);

}  // namespace mixquant
