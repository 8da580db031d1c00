#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixquant/rng.hpp"
#include "mixquant/tensor.hpp"

namespace mixquant {

// Commitment weight of the quantization objective.
inline constexpr double kCommitmentBeta = 0.25;

struct Codebook {
  std::vector<Tensor> codewords;       // K vectors of dim d
  std::vector<std::uint64_t> usage;    // assignments this epoch
  std::string expert_tag;
};

struct Assignment {
  std::size_t code_index = 0;
  Tensor codeword;
  double similarity = 0.0;
};

// Highest cosine similarity wins; ties break to the lowest index, so the
// result is invariant to positive rescaling of z.
Assignment nearest_codeword(const Tensor& z, const Codebook& cb);

struct QuantizeResult {
  std::vector<Assignment> assignments;  // in input (SID position) order
  double vq_loss = 0.0;
};

// Assigns every latent to its tagged codebook, counts usage, and sums the
// quantization objective |sg(z) - z_q|^2 + beta * |z - sg(z_q)|^2.
QuantizeResult quantize_all(
    const std::vector<std::pair<std::string, Tensor>>& latents,
    std::vector<Codebook>& codebooks);

// Lloyd iterations seeded kmeans++ style; empty clusters keep their center.
void kmeans_init(Codebook& cb, const std::vector<Tensor>& latents,
                 std::size_t iterations, Rng& rng);

// Zeroes the epoch usage counters, reassigns every latent to its nearest
// codeword, and moves codewords that attract fewer than `threshold` latents
// onto the worst-quantized latents (lowest best-similarity first, one
// distinct latent per reseeded codeword). Assignment counts accumulated
// during the epoch go stale as parameters move, so the decision is made from
// this fresh pass instead. Seed latents are never taken from owners that the
// theft itself would push below the threshold. threshold 0 disables
// reseeding. Deterministic; returns the number of codewords reseeded.
std::size_t reset_dead_codes(Codebook& cb, const std::vector<Tensor>& latents,
                             std::uint64_t threshold);

}  // namespace mixquant
