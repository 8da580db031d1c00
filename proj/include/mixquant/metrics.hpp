#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixquant/data.hpp"
#include "mixquant/model.hpp"

namespace mixquant {

// Discrete item representation. codes has one entry per expert in the fixed
// order (shared, text, vision, behavior). Behavior positions whose router
// weight falls at or below the threshold carry PAD, encoded as K so each
// behavior position has a contiguous vocabulary of K + 1 symbols.
struct SemanticIds {
  std::string item_id;
  std::vector<std::size_t> codes;
  std::size_t active_behavior = 0;
};

// Thresholded SIDs plus the raw pre-threshold assignments. Entropy and
// utilization are computed from the raw codes so their invariants
// (entropy <= ln K) are independent of the PAD threshold.
struct ItemTokenization {
  SemanticIds sids;
  std::vector<std::size_t> raw_codes;
};

ItemTokenization tokenize_item_raw(const ItemRecord& item, const MixQuantModel& m,
                                   const NormStats& stats, double threshold = 0.0);
SemanticIds tokenize_item(const ItemRecord& item, const MixQuantModel& m,
                          const NormStats& stats, double threshold = 0.0);

// counts[j][k] is the number of items assigned to codeword k of codebook j.

// Mean over codebooks of the natural-log Shannon entropy of the assignment
// distribution. Every codebook needs at least one assignment.
double token_entropy(const std::vector<std::vector<std::uint64_t>>& counts);

// Mean over codebooks of the fraction of codewords used at least once.
double codebook_utilization(const std::vector<std::vector<std::uint64_t>>& counts);

// Mean squared straight-through reconstruction error over the dataset,
// forward only. Matches the training-graph reconstruction term bit for bit.
double reconstruction_metric(const Dataset& data, const MixQuantModel& m);

struct QuantReport {
  double recon_loss = 0.0;
  double entropy = 0.0;
  double utilization = 0.0;
};

// Full evaluation pass: tokenize the corpus, aggregate assignment counts,
// and compute the three quantization metrics.
QuantReport evaluate(const Dataset& data, const MixQuantModel& m,
                     double threshold = 0.0);

// JSONL, one object per item: item_id, codes (PAD as K), active_behavior.
void save_sids(const std::vector<SemanticIds>& sids, const std::string& path);

std::string quant_report_to_json(const QuantReport& report);
void save_quant_report(const QuantReport& report, const std::string& path);

}  // namespace mixquant
