#include "mixquant/kernels.hpp"

#include <cstddef>

#include "mixquant/errors.hpp"

namespace mixquant {

namespace {

TokenizedCorpus aggregate(std::vector<ItemTokenization>&& per_item,
                          const MixQuantModel& m) {
  TokenizedCorpus out;
  out.counts.resize(m.codebooks.size());
  for (std::size_t j = 0; j < m.codebooks.size(); ++j) {
    out.counts[j].assign(m.codebooks[j].codewords.size(), 0);
  }
  out.sids.reserve(per_item.size());
  for (ItemTokenization& it : per_item) {
    for (std::size_t j = 0; j < it.raw_codes.size(); ++j) {
      ++out.counts[j][it.raw_codes[j]];
    }
    out.sids.push_back(std::move(it.sids));
  }
  return out;
}

}  // namespace

TokenizedCorpus tokenize_corpus_serial(const Dataset& data, const MixQuantModel& m,
                                       double threshold) {
  if (data.items.empty()) {
    throw PreconditionError("tokenize_corpus: empty dataset");
  }
  std::vector<ItemTokenization> per_item(data.items.size());
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    per_item[i] = tokenize_item_raw(data.items[i], m, data.norm_stats, threshold);
  }
  return aggregate(std::move(per_item), m);
}

TokenizedCorpus tokenize_corpus_parallel(const Dataset& data, const MixQuantModel& m,
                                         double threshold) {
  if (data.items.empty()) {
    throw PreconditionError("tokenize_corpus: empty dataset");
  }
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(data.items.size());
  std::vector<ItemTokenization> per_item(data.items.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    per_item[i] = tokenize_item_raw(data.items[static_cast<std::size_t>(i)], m,
                                    data.norm_stats, threshold);
  }
  return aggregate(std::move(per_item), m);
}

}  // namespace mixquant
