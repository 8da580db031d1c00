#include "mixquant/align.hpp"

#include <algorithm>
#include <cmath>

#include "mixquant/errors.hpp"

namespace mixquant {

namespace {

void check_batch(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw PreconditionError(std::string(op) + ": batch sizes differ (" +
                            std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
  if (a < 2) {
    throw PreconditionError(std::string(op) +
                            ": contrastive loss needs a batch of at least 2");
  }
}

// Row i of the similarity logits against every partner, scaled by 1/tau.
ad::Var logit_row(ad::Var anchor, const std::vector<ad::Var>& partners, double tau) {
  std::vector<ad::Var> sims;
  sims.reserve(partners.size());
  for (ad::Var p : partners) sims.push_back(ad::cosine_sim(anchor, p));
  return ad::scale(ad::stack(sims), 1.0 / tau);
}

void check_tape(ad::Tape& tape, const std::vector<ad::Var>& vars, const char* op) {
  for (ad::Var v : vars) {
    if (v.tape() != &tape) {
      throw PreconditionError(std::string(op) + ": vars from a different tape");
    }
  }
}

}  // namespace

double norm_normalize(double behavior_norm, const NormStats& stats) {
  double range = stats.n_max - stats.n_min;
  if (range <= 0.0) return 0.5;
  double n = (behavior_norm - stats.n_min) / range;
  return std::clamp(n, 0.0, 1.0);
}

double norm_normalize(const Tensor& e_b, const NormStats& stats) {
  return norm_normalize(l2_norm(e_b.span()), stats);
}

double alignment_weight(double n_norm, const ControllerParams& p) {
  if (!(p.alpha > 0.0)) {
    throw PreconditionError("alignment_weight: alpha must be positive");
  }
  if (!(n_norm >= 0.0 && n_norm <= 1.0)) {
    throw PreconditionError("alignment_weight: n_norm outside [0, 1]");
  }
  return sigmoid(p.alpha * n_norm - p.beta) / sigmoid(p.alpha - p.beta);
}

ad::Var content_contrastive_loss(ad::Tape& tape, const std::vector<ad::Var>& h_t,
                                 const std::vector<ad::Var>& h_v, double tau) {
  check_batch(h_t.size(), h_v.size(), "content_contrastive_loss");
  check_tape(tape, h_t, "content_contrastive_loss");
  check_tape(tape, h_v, "content_contrastive_loss");
  std::size_t b = h_t.size();

  // s[i][j] = sim(h_t[i], h_v[j]) / tau, shared by both directions.
  std::vector<std::vector<ad::Var>> s(b, std::vector<ad::Var>(b));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      s[i][j] = ad::cosine_sim(h_t[i], h_v[j]);
    }
  }

  std::vector<ad::Var> per_item;
  per_item.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<ad::Var> row, col;
    for (std::size_t j = 0; j < b; ++j) {
      row.push_back(s[i][j]);
      col.push_back(s[j][i]);
    }
    ad::Var row_logits = ad::scale(ad::stack(row), 1.0 / tau);
    ad::Var col_logits = ad::scale(ad::stack(col), 1.0 / tau);
    ad::Var t_to_v = ad::logsumexp(row_logits) - ad::at(row_logits, i);
    ad::Var v_to_t = ad::logsumexp(col_logits) - ad::at(col_logits, i);
    per_item.push_back(t_to_v + v_to_t);
  }
  return ad::scale(ad::add_n(per_item), 1.0 / static_cast<double>(b));
}

std::vector<ad::Var> behavior_content_contrastive_loss(
    ad::Tape& tape, const std::vector<ad::Var>& h_b,
    const std::vector<ad::Var>& h_c, double tau) {
  check_batch(h_b.size(), h_c.size(), "behavior_content_contrastive_loss");
  check_tape(tape, h_b, "behavior_content_contrastive_loss");
  check_tape(tape, h_c, "behavior_content_contrastive_loss");
  std::size_t b = h_b.size();
  std::vector<ad::Var> entries;
  entries.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    ad::Var logits = logit_row(h_b[i], h_c, tau);
    entries.push_back(ad::logsumexp(logits) - ad::at(logits, i));
  }
  return entries;
}

AlignLosses total_alignment_loss(ad::Tape& tape, const AlignBatch& batch) {
  check_batch(batch.h_t.size(), batch.h_v.size(), "total_alignment_loss");
  check_batch(batch.h_b.size(), batch.weights.size(), "total_alignment_loss");
  check_batch(batch.h_t.size(), batch.h_b.size(), "total_alignment_loss");
  std::size_t b = batch.h_t.size();

  AlignLosses losses;
  losses.content = content_contrastive_loss(tape, batch.h_t, batch.h_v, batch.tau);

  std::vector<ad::Var> h_c;
  h_c.reserve(b);
  for (std::size_t i = 0; i < b; ++i) h_c.push_back(batch.h_t[i] + batch.h_v[i]);
  std::vector<ad::Var> entries =
      behavior_content_contrastive_loss(tape, batch.h_b, h_c, batch.tau);

  std::vector<ad::Var> weighted;
  weighted.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    weighted.push_back(ad::scale(entries[i], batch.weights[i]));
  }
  losses.behavior_weighted = ad::scale(ad::add_n(weighted), 1.0 / static_cast<double>(b));
  losses.total = losses.content + losses.behavior_weighted;
  return losses;
}

}  // namespace mixquant
