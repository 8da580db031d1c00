#include "mixquant/metrics.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mixquant/errors.hpp"
#include "mixquant/kernels.hpp"
#include "mixquant/quantize.hpp"
#include "mixquant/router.hpp"

namespace mixquant {

ItemTokenization tokenize_item_raw(const ItemRecord& item, const MixQuantModel& m,
                                   const NormStats& stats, double threshold) {
  ProjectedItem p = project_modalities(item, m, stats);
  std::vector<Tensor> latents = encode_shared(p.h, m);
  LatentSet ls = encode_specific(item, m);
  latents.insert(latents.end(), ls.text.begin(), ls.text.end());
  latents.insert(latents.end(), ls.vision.begin(), ls.vision.end());
  latents.insert(latents.end(), ls.behavior.begin(), ls.behavior.end());
  if (latents.size() != m.codebooks.size()) {
    throw ShapeError("tokenize_item: latent count does not match codebook count");
  }

  ItemTokenization out;
  out.sids.item_id = item.item_id;
  out.raw_codes.reserve(latents.size());
  for (std::size_t j = 0; j < latents.size(); ++j) {
    out.raw_codes.push_back(nearest_codeword(latents[j], m.codebooks[j]).code_index);
  }

  out.sids.codes = out.raw_codes;
  RouterOutput route = route_behavior(item.e_b, m, stats);
  const std::size_t pad = m.cfg.codebook_size;
  const std::size_t content = m.cfg.n_shared + m.cfg.n_text + m.cfg.n_vision;
  for (std::size_t b = 0; b < m.cfg.n_behavior; ++b) {
    if (route.weights[b] > threshold) {
      ++out.sids.active_behavior;
    } else {
      out.sids.codes[content + b] = pad;
    }
  }
  return out;
}

SemanticIds tokenize_item(const ItemRecord& item, const MixQuantModel& m,
                          const NormStats& stats, double threshold) {
  return tokenize_item_raw(item, m, stats, threshold).sids;
}

double token_entropy(const std::vector<std::vector<std::uint64_t>>& counts) {
  if (counts.empty()) throw PreconditionError("token_entropy: no codebooks");
  double sum = 0.0;
  for (const std::vector<std::uint64_t>& book : counts) {
    std::uint64_t total = 0;
    for (std::uint64_t c : book) total += c;
    if (total == 0) {
      throw PreconditionError("token_entropy: codebook with no assignments");
    }
    double h = 0.0;
    for (std::uint64_t c : book) {
      if (c == 0) continue;
      double p = static_cast<double>(c) / static_cast<double>(total);
      h -= p * std::log(p);
    }
    sum += h;
  }
  return sum / static_cast<double>(counts.size());
}

double codebook_utilization(const std::vector<std::vector<std::uint64_t>>& counts) {
  if (counts.empty()) throw PreconditionError("codebook_utilization: no codebooks");
  double sum = 0.0;
  for (const std::vector<std::uint64_t>& book : counts) {
    if (book.empty()) {
      throw PreconditionError("codebook_utilization: codebook with no codewords");
    }
    std::size_t used = 0;
    for (std::uint64_t c : book) used += c > 0 ? 1 : 0;
    sum += static_cast<double>(used) / static_cast<double>(book.size());
  }
  return sum / static_cast<double>(counts.size());
}

double reconstruction_metric(const Dataset& data, const MixQuantModel& m) {
  if (data.items.empty()) {
    throw PreconditionError("reconstruction_metric: empty dataset");
  }
  double total = 0.0;
  for (const ItemRecord& item : data.items) {
    ProjectedItem p = project_modalities(item, m, data.norm_stats);
    LatentSet pre;
    pre.shared = encode_shared(p.h, m);
    LatentSet ls = encode_specific(item, m);
    pre.text = ls.text;
    pre.vision = ls.vision;
    pre.behavior = ls.behavior;

    LatentSet quantized = pre;
    std::size_t pos = 0;
    auto assign = [&](std::vector<Tensor>& group) {
      for (Tensor& t : group) {
        t = nearest_codeword(t, m.codebooks[pos]).codeword;
        ++pos;
      }
    };
    assign(quantized.shared);
    assign(quantized.text);
    assign(quantized.vision);
    assign(quantized.behavior);

    Gates g = compute_gates(item, m);
    RouterOutput route = route_behavior(item.e_b, m, data.norm_stats);
    FusedPair f = fuse_latents(pre, quantized, g.g_t, g.g_v, route.weights);
    Tensor recon = decode(f.z, f.z_q, m);

    // Squared error against the concatenated raw embeddings, accumulated in
    // component order like the training graph.
    double err = 0.0;
    std::size_t at = 0;
    auto add_sq = [&](const Tensor& e) {
      for (std::size_t i = 0; i < e.size(); ++i, ++at) {
        double d = recon[at] - e[i];
        err += d * d;
      }
    };
    add_sq(item.e_t);
    add_sq(item.e_v);
    add_sq(item.e_b);
    total += err;
  }
  return total * (1.0 / static_cast<double>(data.items.size()));
}

QuantReport evaluate(const Dataset& data, const MixQuantModel& m,
                     double threshold) {
  TokenizedCorpus corpus = tokenize_corpus_parallel(data, m, threshold);
  QuantReport report;
  report.recon_loss = reconstruction_metric(data, m);
  report.entropy = token_entropy(corpus.counts);
  report.utilization = codebook_utilization(corpus.counts);
  return report;
}

void save_sids(const std::vector<SemanticIds>& sids, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(path + ": cannot open for writing");
  for (const SemanticIds& s : sids) {
    nlohmann::json o;
    o["item_id"] = s.item_id;
    o["codes"] = s.codes;
    o["active_behavior"] = s.active_behavior;
    out << o.dump() << '\n';
  }
  if (!out) throw ArtifactError(path + ": write failed");
}

std::string quant_report_to_json(const QuantReport& report) {
  nlohmann::json o;
  o["recon_loss"] = report.recon_loss;
  o["entropy"] = report.entropy;
  o["utilization"] = report.utilization;
  return o.dump(2) + "\n";
}

void save_quant_report(const QuantReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(path + ": cannot open for writing");
  out << quant_report_to_json(report);
  if (!out) throw ArtifactError(path + ": write failed");
}

}  // namespace mixquant
