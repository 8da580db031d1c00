#include "mixquant/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mixquant/align.hpp"
#include "mixquant/errors.hpp"

namespace mixquant {

namespace {

constexpr char kMagic[16] = {'M', 'I', 'X', 'Q', 'U', 'A', 'N', 'T',
                             '-', 'C', 'K', 'P', 'T', '\0', '\0', '\0'};

Tensor init_tensor(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

std::string tag_name(const char* kind, std::size_t i) {
  return std::string(kind) + "_" + std::to_string(i);
}

Codebook init_codebook(const std::string& tag, std::size_t k, std::size_t d, Rng& rng) {
  Codebook cb;
  cb.expert_tag = tag;
  cb.usage.assign(k, 0);
  for (std::size_t i = 0; i < k; ++i) cb.codewords.push_back(init_tensor({d}, d, rng));
  return cb;
}

template <typename ModelT, typename Fn>
void walk_params(ModelT& m, const Fn& fn) {
  auto walk_mlp = [&](auto& mlp) {
    for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
      fn(mlp.weights[i]);
      fn(mlp.biases[i]);
    }
  };
  walk_mlp(m.proj_t);
  walk_mlp(m.proj_v);
  walk_mlp(m.proj_b);
  for (auto& e : m.shared_experts) walk_mlp(e);
  for (auto& e : m.text_experts) walk_mlp(e);
  for (auto& e : m.vision_experts) walk_mlp(e);
  for (auto& e : m.behavior_experts) walk_mlp(e);
  walk_mlp(m.gate_t_mlp);
  fn(m.gate_t_bias);
  walk_mlp(m.gate_v_mlp);
  fn(m.gate_v_bias);
  walk_mlp(m.router_mlp);
  fn(m.router_bias);
  walk_mlp(m.decoder);
  for (auto& cb : m.codebooks) {
    for (auto& cw : cb.codewords) fn(cw);
  }
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {
      {"latent_dim", cfg.latent_dim},
      {"n_shared", cfg.n_shared},
      {"n_text", cfg.n_text},
      {"n_vision", cfg.n_vision},
      {"n_behavior", cfg.n_behavior},
      {"codebook_size", cfg.codebook_size},
      {"alpha", cfg.alpha},
      {"beta", cfg.beta},
      {"tau", cfg.tau},
      {"theta", cfg.theta},
      {"lambda_0", cfg.lambda_0},
      {"update_factor", cfg.update_factor},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
  cfg.n_shared = j.at("n_shared").get<std::size_t>();
  cfg.n_text = j.at("n_text").get<std::size_t>();
  cfg.n_vision = j.at("n_vision").get<std::size_t>();
  cfg.n_behavior = j.at("n_behavior").get<std::size_t>();
  cfg.codebook_size = j.at("codebook_size").get<std::size_t>();
  cfg.alpha = j.at("alpha").get<double>();
  cfg.beta = j.at("beta").get<double>();
  cfg.tau = j.at("tau").get<double>();
  cfg.theta = j.at("theta").get<double>();
  cfg.lambda_0 = j.at("lambda_0").get<double>();
  cfg.update_factor = j.at("update_factor").get<double>();
  return cfg;
}

}  // namespace

Tensor mlp_forward_plain(const Mlp& mlp, const Tensor& x) {
  if (mlp.weights.empty() || mlp.weights.size() != mlp.biases.size()) {
    throw PreconditionError("mlp: needs matched weight/bias layers");
  }
  Tensor y = x;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    Tensor next = matvec(mlp.weights[i], y);
    if (!next.same_shape(mlp.biases[i])) {
      throw ShapeError("mlp: bias " + mlp.biases[i].shape_str() + " vs layer output " +
                       next.shape_str());
    }
    for (std::size_t j = 0; j < next.size(); ++j) next[j] += mlp.biases[i][j];
    if (i + 1 < mlp.weights.size()) {
      for (double& v : next.values()) v = v > 0.0 ? v : 0.0;
    }
    y = std::move(next);
  }
  return y;
}

Mlp mlp_init(const std::vector<std::size_t>& layer_dims, Rng& rng) {
  if (layer_dims.size() < 2) throw PreconditionError("mlp_init: need at least 2 dims");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) {
    std::size_t in = layer_dims[i];
    std::size_t out = layer_dims[i + 1];
    mlp.weights.push_back(init_tensor({out, in}, in, rng));
    mlp.biases.push_back(init_tensor({out}, in, rng));
  }
  return mlp;
}

void MixQuantModel::for_each_param(const std::function<void(Tensor&)>& fn) {
  walk_params(*this, fn);
}

void MixQuantModel::for_each_param(const std::function<void(const Tensor&)>& fn) const {
  walk_params(*this, fn);
}

MixQuantModel init_model(const ModelConfig& cfg, const Dims& input_dims,
                         std::uint64_t seed) {
  if (cfg.latent_dim == 0 || cfg.codebook_size == 0 || cfg.sid_length() == 0) {
    throw PreconditionError("init_model: degenerate config");
  }
  if (input_dims.d_t == 0 || input_dims.d_v == 0 || input_dims.d_b == 0) {
    throw PreconditionError("init_model: zero input dims");
  }
  MixQuantModel m;
  m.cfg = cfg;
  m.input_dims = input_dims;
  m.init_seed = seed;
  Rng rng(seed);

  std::size_t d = cfg.latent_dim;
  std::size_t hidden = 2 * d;
  std::size_t out_dim = input_dims.d_t + input_dims.d_v + input_dims.d_b;

  m.proj_t = mlp_init({input_dims.d_t, hidden, d}, rng);
  m.proj_v = mlp_init({input_dims.d_v, hidden, d}, rng);
  m.proj_b = mlp_init({input_dims.d_b, hidden, d}, rng);
  for (std::size_t i = 0; i < cfg.n_shared; ++i) {
    m.shared_experts.push_back(mlp_init({3 * d, hidden, d}, rng));
  }
  for (std::size_t i = 0; i < cfg.n_text; ++i) {
    m.text_experts.push_back(mlp_init({input_dims.d_t, hidden, d}, rng));
  }
  for (std::size_t i = 0; i < cfg.n_vision; ++i) {
    m.vision_experts.push_back(mlp_init({input_dims.d_v, hidden, d}, rng));
  }
  for (std::size_t i = 0; i < cfg.n_behavior; ++i) {
    m.behavior_experts.push_back(mlp_init({input_dims.d_b, hidden, d}, rng));
  }
  m.gate_t_mlp = mlp_init({input_dims.d_t, hidden, cfg.n_text}, rng);
  m.gate_t_bias = init_tensor({cfg.n_text}, input_dims.d_t, rng);
  m.gate_v_mlp = mlp_init({input_dims.d_v, hidden, cfg.n_vision}, rng);
  m.gate_v_bias = init_tensor({cfg.n_vision}, input_dims.d_v, rng);
  // Hidden width tied to the router's own input so paired +/- projections of
  // every e_b coordinate fit exactly; see the warm start in train().
  m.router_mlp = mlp_init({input_dims.d_b, 2 * input_dims.d_b, cfg.n_behavior}, rng);
  m.router_bias = init_tensor({cfg.n_behavior}, input_dims.d_b, rng);
  m.decoder = mlp_init({d, 2 * out_dim, out_dim}, rng);

  for (std::size_t i = 0; i < cfg.n_shared; ++i) {
    m.codebooks.push_back(init_codebook(tag_name("shared", i), cfg.codebook_size, d, rng));
  }
  for (std::size_t i = 0; i < cfg.n_text; ++i) {
    m.codebooks.push_back(init_codebook(tag_name("text", i), cfg.codebook_size, d, rng));
  }
  for (std::size_t i = 0; i < cfg.n_vision; ++i) {
    m.codebooks.push_back(init_codebook(tag_name("vision", i), cfg.codebook_size, d, rng));
  }
  for (std::size_t i = 0; i < cfg.n_behavior; ++i) {
    m.codebooks.push_back(init_codebook(tag_name("behavior", i), cfg.codebook_size, d, rng));
  }
  return m;
}

ProjectedItem project_modalities(const ItemRecord& item, const MixQuantModel& m,
                                 const NormStats& stats) {
  ProjectedItem p;
  p.h_t = mlp_forward_plain(m.proj_t, item.e_t);
  p.h_v = mlp_forward_plain(m.proj_v, item.e_v);
  p.h_b = mlp_forward_plain(m.proj_b, item.e_b);
  ControllerParams controller{m.cfg.alpha, m.cfg.beta, stats};
  const double w = alignment_weight(norm_normalize(item.e_b, stats), controller);
  std::vector<double> h;
  h.insert(h.end(), p.h_t.values().begin(), p.h_t.values().end());
  h.insert(h.end(), p.h_v.values().begin(), p.h_v.values().end());
  for (double v : p.h_b.values()) h.push_back(w * v);
  p.h = Tensor::vec(std::move(h));
  return p;
}

std::vector<Tensor> encode_shared(const Tensor& h, const MixQuantModel& m) {
  std::vector<Tensor> out;
  out.reserve(m.shared_experts.size());
  for (const Mlp& e : m.shared_experts) out.push_back(mlp_forward_plain(e, h));
  return out;
}

LatentSet encode_specific(const ItemRecord& item, const MixQuantModel& m) {
  LatentSet ls;
  for (const Mlp& e : m.text_experts) ls.text.push_back(mlp_forward_plain(e, item.e_t));
  for (const Mlp& e : m.vision_experts) ls.vision.push_back(mlp_forward_plain(e, item.e_v));
  for (const Mlp& e : m.behavior_experts) ls.behavior.push_back(mlp_forward_plain(e, item.e_b));
  return ls;
}

Gates compute_gates(const ItemRecord& item, const MixQuantModel& m) {
  Gates g;
  Tensor lt = mlp_forward_plain(m.gate_t_mlp, item.e_t);
  for (std::size_t i = 0; i < lt.size(); ++i) lt[i] += m.gate_t_bias[i];
  g.g_t = Tensor::vec(softmax(lt.span()));
  Tensor lv = mlp_forward_plain(m.gate_v_mlp, item.e_v);
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] += m.gate_v_bias[i];
  g.g_v = Tensor::vec(softmax(lv.span()));
  return g;
}

FusedPair fuse_latents(const LatentSet& pre, const LatentSet& quantized,
                       const Tensor& g_t, const Tensor& g_v,
                       const Tensor& router_weights) {
  if (pre.shared.size() != quantized.shared.size() ||
      pre.text.size() != quantized.text.size() ||
      pre.vision.size() != quantized.vision.size() ||
      pre.behavior.size() != quantized.behavior.size()) {
    throw ShapeError("fuse_latents: pre/quantized latent counts differ");
  }
  if (g_t.size() != pre.text.size() || g_v.size() != pre.vision.size() ||
      router_weights.size() != pre.behavior.size()) {
    throw ShapeError("fuse_latents: weight vector sizes do not match latent counts");
  }
  if (pre.shared.empty()) {
    throw PreconditionError("fuse_latents: need at least one shared latent");
  }

  // Left-fold accumulation in SID order (shared, text, vision, behavior);
  // keeps the value bit-identical to the tape-built sum.
  auto fold = [&](const LatentSet& ls) {
    Tensor acc = ls.shared[0];
    auto add_scaled = [&](const Tensor& t, double w, bool weighted) {
      if (!t.same_shape(acc)) {
        throw ShapeError("fuse_latents: latent " + t.shape_str() + " vs " + acc.shape_str());
      }
      for (std::size_t j = 0; j < acc.size(); ++j) {
        acc[j] += weighted ? w * t[j] : t[j];
      }
    };
    for (std::size_t i = 1; i < ls.shared.size(); ++i) add_scaled(ls.shared[i], 1.0, false);
    for (std::size_t i = 0; i < ls.text.size(); ++i) add_scaled(ls.text[i], g_t[i], true);
    for (std::size_t i = 0; i < ls.vision.size(); ++i) add_scaled(ls.vision[i], g_v[i], true);
    for (std::size_t i = 0; i < ls.behavior.size(); ++i) {
      add_scaled(ls.behavior[i], router_weights[i], true);
    }
    return acc;
  };
  return {fold(pre), fold(quantized)};
}

Tensor decode(const Tensor& z, const Tensor& z_q, const MixQuantModel& m) {
  if (!z.same_shape(z_q)) {
    throw ShapeError("decode: z " + z.shape_str() + " vs z_q " + z_q.shape_str());
  }
  Tensor in = z;
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = z[i] + (z_q[i] - z[i]);
  return mlp_forward_plain(m.decoder, in);
}

void save_model(const MixQuantModel& m, const std::string& path) {
  nlohmann::json header;
  header["format"] = 1;
  header["seed"] = m.init_seed;
  header["dims"] = {{"d_t", m.input_dims.d_t},
                    {"d_v", m.input_dims.d_v},
                    {"d_b", m.input_dims.d_b}};
  header["hyperparams"] = config_to_json(m.cfg);
  nlohmann::json shapes = nlohmann::json::array();
  std::size_t total = 0;
  m.for_each_param([&](const Tensor& t) {
    shapes.push_back(t.shape());
    total += t.size();
  });
  header["shapes"] = std::move(shapes);
  header["param_count"] = total;

  std::string head = header.dump();
  std::string buf(kMagic, 16);
  for (int i = 0; i < 4; ++i) {
    buf.push_back(static_cast<char>((head.size() >> (8 * i)) & 0xff));
  }
  buf += head;
  m.for_each_param([&](const Tensor& t) {
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int i = 0; i < 8; ++i) {
        buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
      }
    }
  });

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(path + ": cannot open for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ArtifactError(path + ": write failed");
}

MixQuantModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string buf = ss.str();

  auto need = [&](std::size_t pos, std::size_t n) {
    if (pos + n > buf.size()) {
      throw ArtifactError(path + ": checkpoint truncated at byte " + std::to_string(pos));
    }
  };
  need(0, 20);
  if (std::memcmp(buf.data(), kMagic, 16) != 0) {
    throw ArtifactError(path + ": bad checkpoint magic");
  }
  std::uint32_t head_len = 0;
  for (int i = 0; i < 4; ++i) {
    head_len |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[16 + i])) << (8 * i);
  }
  need(20, head_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(20, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path + ": bad checkpoint header: " + e.what());
  }

  MixQuantModel m;
  try {
    ModelConfig cfg = config_from_json(header.at("hyperparams"));
    Dims dims{header.at("dims").at("d_t").get<std::size_t>(),
              header.at("dims").at("d_v").get<std::size_t>(),
              header.at("dims").at("d_b").get<std::size_t>()};
    m = init_model(cfg, dims, header.at("seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path + ": bad checkpoint header: " + e.what());
  } catch (const PreconditionError& e) {
    throw ArtifactError(path + ": bad checkpoint header: " + std::string(e.what()));
  }

  const auto& shapes = header.at("shapes");
  std::size_t param_idx = 0;
  std::size_t pos = 20 + head_len;
  m.for_each_param([&](Tensor& t) {
    if (param_idx >= shapes.size() ||
        shapes[param_idx].get<std::vector<std::size_t>>() != t.shape()) {
      throw ArtifactError(path + ": checkpoint shape list does not match model layout");
    }
    ++param_idx;
    need(pos, 8 * t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + b])) << (8 * b);
      }
      pos += 8;
      std::memcpy(&t[i], &bits, 8);
    }
  });
  if (param_idx != shapes.size()) {
    throw ArtifactError(path + ": checkpoint shape list does not match model layout");
  }
  if (pos != buf.size()) {
    throw ArtifactError(path + ": trailing bytes in checkpoint");
  }
  m.for_each_param([&](Tensor& t) {
    if (!t.finite()) throw ArtifactError(path + ": non-finite parameter in checkpoint");
  });
  return m;
}

}  // namespace mixquant
