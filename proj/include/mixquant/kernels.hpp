#pragma once

#include <cstdint>
#include <vector>

#include "mixquant/metrics.hpp"

namespace mixquant {

// Corpus-level tokenization result. sids follows dataset order; counts[j][k]
// holds raw pre-threshold assignment totals for codeword k of codebook j.
struct TokenizedCorpus {
  std::vector<SemanticIds> sids;
  std::vector<std::vector<std::uint64_t>> counts;
};

// Serial reference implementation: one tokenize_item_raw pass in dataset
// order.
TokenizedCorpus tokenize_corpus_serial(const Dataset& data, const MixQuantModel& m,
                                       double threshold = 0.0);

// OpenMP variant. Per-item work runs in parallel over a frozen model; the
// aggregation pass stays serial, so the result is bit-identical to the
// serial reference.
TokenizedCorpus tokenize_corpus_parallel(const Dataset& data, const MixQuantModel& m,
                                         double threshold = 0.0);

}  // namespace mixquant
