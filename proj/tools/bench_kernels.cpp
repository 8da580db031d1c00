// Times corpus tokenization: serial reference vs the OpenMP kernel. The two
// must produce identical output; the benchmark reports wall time and speedup.
#include <chrono>
#include <cstdio>
#include <string>

#include <CLI11.hpp>
#include <omp.h>

#include "mixquant/kernels.hpp"
#include "mixquant/train.hpp"

using namespace mixquant;

namespace {

double time_ms(const std::function<TokenizedCorpus()>& fn, TokenizedCorpus& out,
               int repeats) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    auto start = std::chrono::steady_clock::now();
    out = fn();
    auto stop = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(stop - start).count());
  }
  return best;
}

bool same(const TokenizedCorpus& a, const TokenizedCorpus& b) {
  if (a.sids.size() != b.sids.size() || a.counts != b.counts) return false;
  for (std::size_t i = 0; i < a.sids.size(); ++i) {
    if (a.sids[i].item_id != b.sids[i].item_id || a.sids[i].codes != b.sids[i].codes ||
        a.sids[i].active_behavior != b.sids[i].active_behavior) {
      return false;
    }
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corpus tokenization benchmark: serial reference vs OpenMP"};
  std::size_t items = 8192;
  std::size_t clusters = 16;
  std::uint64_t seed = 7;
  int repeats = 3;
  app.add_option("--items", items, "corpus size");
  app.add_option("--clusters", clusters, "synthetic cluster count");
  app.add_option("--seed", seed, "synthetic data seed");
  app.add_option("--repeats", repeats, "timing repeats (best of)");
  CLI11_PARSE(app, argc, argv);

  Dataset data = generate_synthetic(items, {64, 48, 32}, clusters, 1.1, seed);
  TrainConfig cfg;
  cfg.latent_dim = 16;
  cfg.codebook_size = 32;
  MixQuantModel m = init_model(cfg.model_config(), data.dims, seed);

  TokenizedCorpus serial, parallel;
  double t_serial = time_ms([&] { return tokenize_corpus_serial(data, m); }, serial, repeats);
  double t_parallel =
      time_ms([&] { return tokenize_corpus_parallel(data, m); }, parallel, repeats);

  if (!same(serial, parallel)) {
    std::fprintf(stderr, "FAIL: serial and parallel outputs differ\n");
    return 1;
  }
  std::printf("items: %zu  threads: %d\n", items, omp_get_max_threads());
  std::printf("serial:   %9.2f ms\n", t_serial);
  std::printf("parallel: %9.2f ms\n", t_parallel);
  std::printf("speedup:  %9.2fx (outputs identical)\n", t_serial / t_parallel);
  return 0;
}
