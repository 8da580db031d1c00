#include "mixquant/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mixquant/errors.hpp"

namespace mixquant {

namespace {

double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

Assignment nearest_codeword(const Tensor& z, const Codebook& cb) {
  if (cb.codewords.empty()) {
    throw PreconditionError("nearest_codeword: empty codebook " + cb.expert_tag);
  }
  Assignment best;
  best.code_index = 0;
  best.similarity = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.codewords.size(); ++k) {
    if (!z.same_shape(cb.codewords[k])) {
      throw ShapeError("nearest_codeword: latent " + z.shape_str() + " vs codeword " +
                       cb.codewords[k].shape_str());
    }
    double sim = cosine_similarity(z.span(), cb.codewords[k].span());
    if (sim > best.similarity) {
      best.similarity = sim;
      best.code_index = k;
    }
  }
  best.codeword = cb.codewords[best.code_index];
  return best;
}

QuantizeResult quantize_all(
    const std::vector<std::pair<std::string, Tensor>>& latents,
    std::vector<Codebook>& codebooks) {
  QuantizeResult result;
  for (const auto& [tag, z] : latents) {
    Codebook* cb = nullptr;
    for (Codebook& c : codebooks) {
      if (c.expert_tag == tag) {
        if (cb) throw PreconditionError("quantize_all: duplicate codebook tag " + tag);
        cb = &c;
      }
    }
    if (!cb) throw PreconditionError("quantize_all: no codebook tagged " + tag);
    Assignment a = nearest_codeword(z, *cb);
    ++cb->usage[a.code_index];
    double d2 = sq_dist(z, a.codeword);
    result.vq_loss += d2 + kCommitmentBeta * d2;
    result.assignments.push_back(std::move(a));
  }
  return result;
}

void kmeans_init(Codebook& cb, const std::vector<Tensor>& latents,
                 std::size_t iterations, Rng& rng) {
  if (latents.empty()) throw PreconditionError("kmeans_init: no latents");
  std::size_t k_count = cb.codewords.size();
  std::vector<Tensor> centers;
  centers.reserve(k_count);

  // kmeans++ seeding: next center drawn proportionally to squared distance
  // from the chosen set.
  centers.push_back(latents[rng.below(latents.size())]);
  std::vector<double> d2(latents.size());
  while (centers.size() < k_count) {
    double total = 0.0;
    for (std::size_t i = 0; i < latents.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const Tensor& c : centers) best = std::min(best, sq_dist(latents[i], c));
      d2[i] = best;
      total += best;
    }
    if (total <= 0.0) {
      centers.push_back(latents[rng.below(latents.size())]);
      continue;
    }
    double pick = rng.uniform() * total;
    std::size_t chosen = latents.size() - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < latents.size(); ++i) {
      acc += d2[i];
      if (pick < acc) {
        chosen = i;
        break;
      }
    }
    centers.push_back(latents[chosen]);
  }

  std::vector<std::size_t> owner(latents.size());
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < latents.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < centers.size(); ++c) {
        double d = sq_dist(latents[i], centers[c]);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      owner[i] = arg;
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      Tensor mean = Tensor::zeros(centers[c].shape());
      std::size_t count = 0;
      for (std::size_t i = 0; i < latents.size(); ++i) {
        if (owner[i] != c) continue;
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += latents[i][j];
        ++count;
      }
      if (count == 0) continue;
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] /= static_cast<double>(count);
      centers[c] = std::move(mean);
    }
  }

  cb.codewords = std::move(centers);
  cb.usage.assign(k_count, 0);
}

std::size_t reset_dead_codes(Codebook& cb, const std::vector<Tensor>& latents,
                             std::uint64_t threshold) {
  cb.usage.assign(cb.usage.size(), 0);
  if (threshold == 0) return 0;
  if (latents.empty()) {
    throw PreconditionError("reset_dead_codes: no latents to reseed from");
  }

  const std::size_t n_codes = cb.codewords.size();
  std::vector<std::uint64_t> counts(n_codes, 0);
  std::vector<std::size_t> owner(latents.size());
  std::vector<double> best(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    Assignment a = nearest_codeword(latents[i], cb);
    owner[i] = a.code_index;
    counts[owner[i]] += 1;
    best[i] = a.similarity;
  }
  std::vector<bool> dead(n_codes);
  for (std::size_t k = 0; k < n_codes; ++k) dead[k] = counts[k] < threshold;

  std::vector<std::size_t> order(latents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return best[a] != best[b] ? best[a] < best[b] : a < b;
  });

  // A reseeded codeword captures its seed latent, so seeding steals that
  // latent from its owner. Only steal from owners that are being reseeded
  // anyway or that stay at or above the threshold after losing one latent.
  std::size_t next = 0;
  std::size_t replaced = 0;
  for (std::size_t k = 0; k < n_codes; ++k) {
    if (!dead[k]) continue;
    while (next < order.size()) {
      std::size_t m = owner[order[next]];
      if (dead[m] || counts[m] > threshold) break;
      ++next;
    }
    if (next == order.size()) break;
    std::size_t i = order[next++];
    if (!dead[owner[i]]) counts[owner[i]] -= 1;
    cb.codewords[k] = latents[i];
    ++replaced;
  }
  return replaced;
}

}  // namespace mixquant
