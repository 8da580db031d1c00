#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixquant/tensor.hpp"

namespace mixquant {

struct ItemRecord {
  std::string item_id;
  Tensor e_t;
  Tensor e_v;
  Tensor e_b;
};

struct Dims {
  std::size_t d_t = 0;
  std::size_t d_v = 0;
  std::size_t d_b = 0;
  bool operator==(const Dims&) const = default;
};

// Min/max of behavioral L2 norms over the whole dataset; fixed before
// training and reused at tokenization time.
struct NormStats {
  double n_min = 0.0;
  double n_max = 0.0;
};

struct Dataset {
  std::vector<ItemRecord> items;
  Dims dims;
  NormStats norm_stats;
};

enum class DataFormat { jsonl, packed };

// Synthetic generator geometry: unit-norm cluster centers, noise of exact
// radius 0.1 around them, behavioral norms scaled down from 3.0 by
// popularity rank.
inline constexpr double kSyntheticNoiseRadius = 0.1;
inline constexpr double kSyntheticNormCeiling = 3.0;

NormStats compute_norm_stats(const std::vector<ItemRecord>& items);

// Validates invariants (nonempty, unique ids, constant dims, finite values)
// and fills in dims and norm stats.
Dataset make_dataset(std::vector<ItemRecord> items);

Dataset load_dataset(const std::string& path, DataFormat format);
void save_dataset(const Dataset& ds, const std::string& path, DataFormat format);

// Items are emitted in popularity-rank order: index 0 has the largest
// behavioral norm. noise_behavior_fraction in [0, 1] makes that share of the
// least-popular items carry a cluster-free random e_b direction (norms keep
// the rank schedule).
Dataset generate_synthetic(std::size_t n_items, Dims dims, std::size_t n_clusters,
                           double zipf_s, std::uint64_t seed,
                           double noise_behavior_fraction = 0.0);

}  // namespace mixquant
