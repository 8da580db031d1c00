#include "mixquant/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>

#include <json.hpp>

#include "mixquant/align.hpp"
#include "mixquant/errors.hpp"
#include "mixquant/quantize.hpp"

namespace mixquant {

namespace {

// Dead-code reset pool size per SID position.
constexpr std::size_t kKmeansIters = 10;

// Router warm-start fit: step count, learning rate, pre-activation units per
// norm-rank unit, rank threshold assigned to always-active gates, and the
// item cap for the fitting sample.
constexpr std::size_t kWarmStartSteps = 200;
constexpr double kWarmStartLr = 0.02;
constexpr double kWarmStartScale = 4.0;
constexpr double kWarmStartFloor = -0.25;
constexpr std::size_t kWarmStartSampleCap = 2048;

// One forward pass per item with the current parameters, latents grouped by
// SID position. Feeds the codebook kmeans seeding and the dead-code reset.
std::vector<std::vector<Tensor>> position_latents(const Dataset& data,
                                                  const MixQuantModel& m) {
  std::vector<std::vector<Tensor>> by_position(m.cfg.sid_length());
  for (const ItemRecord& item : data.items) {
    ProjectedItem p = project_modalities(item, m, data.norm_stats);
    LatentSet ls = encode_specific(item, m);
    std::size_t pos = 0;
    for (Tensor& t : encode_shared(p.h, m)) by_position[pos++].push_back(std::move(t));
    for (Tensor& t : ls.text) by_position[pos++].push_back(std::move(t));
    for (Tensor& t : ls.vision) by_position[pos++].push_back(std::move(t));
    for (Tensor& t : ls.behavior) by_position[pos++].push_back(std::move(t));
  }
  return by_position;
}

void check_component(const ad::Var& v, const char* name) {
  if (!std::isfinite(v.item())) {
    throw NumericError(std::string("train_step: non-finite ") + name);
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Fits the router so its pre-activations start as a staircase over the
// behavioral-norm ranks: a gate is initially active for the items above its
// rank threshold, and the thresholds are spread so the initial mean sparsity
// matches theta. A randomly initialized relu gate tends to freeze into a
// norm-agnostic pattern (a dead gate receives no per-item gradient that could
// revive it), which leaves nothing for the sparsity controller to shape; the
// warm start hands the run a topology the controller can prune tail-first.
// The hidden layer is seeded with paired +/- coordinate projections so
// magnitude information survives the relu; the fit tunes everything.
void warm_start_router(MixQuantModel& m, const Dataset& data, double theta) {
  const std::size_t nb = m.cfg.n_behavior;
  const std::size_t db = data.dims.d_b;
  const std::size_t n = data.items.size();
  if (nb == 0) return;

  // Evenly rank-spaced sample, capped so the fit cost stays bounded.
  std::vector<std::size_t> by_norm(n);
  std::iota(by_norm.begin(), by_norm.end(), std::size_t{0});
  std::sort(by_norm.begin(), by_norm.end(), [&](std::size_t a, std::size_t b) {
    double na = l2_norm(data.items[a].e_b.span());
    double nb2 = l2_norm(data.items[b].e_b.span());
    return na != nb2 ? na < nb2 : a < b;
  });
  const std::size_t stride = (n + kWarmStartSampleCap - 1) / kWarmStartSampleCap;
  std::vector<std::size_t> sample;
  std::vector<double> rank;
  for (std::size_t p = 0; p < n; p += stride) {
    sample.push_back(by_norm[p]);
    rank.push_back(static_cast<double>(p + 1) / static_cast<double>(n + 1));
  }

  // Gate thresholds: round(2 * theta * nb) gates spread over the rank range,
  // the remainder always active. Mean initial sparsity lands near theta.
  const double raw_q = std::round(2.0 * theta * static_cast<double>(nb));
  const std::size_t n_q = std::min<std::size_t>(nb, static_cast<std::size_t>(
      std::max(0.0, raw_q)));
  std::vector<double> thresholds(nb, kWarmStartFloor);
  for (std::size_t k = 0; k < n_q; ++k) {
    thresholds[nb - n_q + k] = static_cast<double>(k + 1) / static_cast<double>(n_q + 1);
  }

  for (std::size_t h = 0; h < 2 * db; ++h) {
    for (std::size_t c = 0; c < db; ++c) {
      m.router_mlp.weights[0].at(h, c) = (h / 2 == c) ? (h % 2 ? -1.0 : 1.0) : 0.0;
    }
    m.router_mlp.biases[0][h] = 0.0;
  }

  std::vector<Tensor*> params;
  for (Tensor& t : m.router_mlp.weights) params.push_back(&t);
  for (Tensor& t : m.router_mlp.biases) params.push_back(&t);
  params.push_back(&m.router_bias);

  AdamState adam;
  const double inv = 1.0 / static_cast<double>(sample.size() * nb);
  for (std::size_t step = 0; step < kWarmStartSteps; ++step) {
    ad::Tape tape;
    ad::Var loss = tape.scalar(0.0);
    for (std::size_t s = 0; s < sample.size(); ++s) {
      ad::Var pre = ad::add(
          mlp_forward_tape(tape, m.router_mlp, tape.leaf(data.items[sample[s]].e_b)),
          tape.param(m.router_bias));
      Tensor target = Tensor::zeros({nb});
      for (std::size_t j = 0; j < nb; ++j) {
        target[j] = kWarmStartScale * (rank[s] - thresholds[j]);
      }
      ad::Var err = ad::sub(pre, tape.leaf(target));
      loss = ad::add(loss, ad::sum(ad::mul(err, err)));
    }
    loss = ad::scale(loss, inv);
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor* p : params) grads.push_back(tape.grad_of(*p));
    optimizer_update(params, grads, kWarmStartLr, adam);
  }
}

}  // namespace

ModelConfig TrainConfig::model_config() const {
  ModelConfig mc;
  mc.latent_dim = latent_dim;
  mc.n_shared = n_shared;
  mc.n_text = n_text;
  mc.n_vision = n_vision;
  mc.n_behavior = n_behavior;
  mc.codebook_size = codebook_size;
  mc.alpha = alpha;
  mc.beta = beta;
  mc.tau = tau;
  mc.theta = theta;
  mc.lambda_0 = lambda_0;
  mc.update_factor = update_factor;
  return mc;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["seed"] = cfg.seed;
  j["w_recon"] = cfg.w_recon;
  j["w_align_block"] = cfg.w_align_block;
  j["w_vq"] = cfg.w_vq;
  j["w_reg"] = cfg.w_reg;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  j["tau"] = cfg.tau;
  j["theta"] = cfg.theta;
  j["lambda_0"] = cfg.lambda_0;
  j["update_factor"] = cfg.update_factor;
  j["warmup_epochs"] = cfg.warmup_epochs;
  j["codebook_size"] = cfg.codebook_size;
  j["reset_threshold"] = cfg.reset_threshold;
  j["kmeans_init"] = cfg.kmeans_init;
  j["latent_dim"] = cfg.latent_dim;
  j["n_shared"] = cfg.n_shared;
  j["n_text"] = cfg.n_text;
  j["n_vision"] = cfg.n_vision;
  j["n_behavior"] = cfg.n_behavior;
  return j.dump(2) + "\n";
}

TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("train config: expected a JSON object");

  static const std::unordered_set<std::string> known{
      "epochs",         "batch_size",    "learning_rate", "seed",
      "w_recon",        "w_align_block", "w_vq",          "w_reg",
      "alpha",          "beta",          "tau",           "theta",
      "lambda_0",       "update_factor", "warmup_epochs", "codebook_size",
      "reset_threshold", "kmeans_init",  "latent_dim",    "n_shared",
      "n_text",         "n_vision",      "n_behavior"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key)) {
      throw SchemaError("train config: unknown key: " + key);
    }
  }

  TrainConfig cfg;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("epochs", cfg.epochs);
    get("batch_size", cfg.batch_size);
    get("learning_rate", cfg.learning_rate);
    get("seed", cfg.seed);
    get("w_recon", cfg.w_recon);
    get("w_align_block", cfg.w_align_block);
    get("w_vq", cfg.w_vq);
    get("w_reg", cfg.w_reg);
    get("alpha", cfg.alpha);
    get("beta", cfg.beta);
    get("tau", cfg.tau);
    get("theta", cfg.theta);
    get("lambda_0", cfg.lambda_0);
    get("update_factor", cfg.update_factor);
    get("warmup_epochs", cfg.warmup_epochs);
    get("codebook_size", cfg.codebook_size);
    get("reset_threshold", cfg.reset_threshold);
    get("kmeans_init", cfg.kmeans_init);
    get("latent_dim", cfg.latent_dim);
    get("n_shared", cfg.n_shared);
    get("n_text", cfg.n_text);
    get("n_vision", cfg.n_vision);
    get("n_behavior", cfg.n_behavior);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("train config: ") + e.what());
  }
  if (cfg.batch_size < 2) {
    throw SchemaError("train config: batch_size must be at least 2");
  }
  return cfg;
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(path + ": cannot open for writing");
  out << train_config_to_json(cfg);
  if (!out) throw ArtifactError(path + ": write failed");
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return train_config_from_json(ss.str());
}

void optimizer_update(const std::vector<Tensor*>& params,
                      const std::vector<Tensor>& grads, double lr,
                      AdamState& state) {
  if (params.size() != grads.size()) {
    throw PreconditionError("optimizer_update: param/grad count mismatch");
  }
  if (state.m1.empty()) {
    for (const Tensor* p : params) {
      state.m1.push_back(Tensor::zeros(p->shape()));
      state.m2.push_back(Tensor::zeros(p->shape()));
    }
  }
  if (state.m1.size() != params.size()) {
    throw PreconditionError("optimizer_update: state sized for a different model");
  }

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (!p.same_shape(g) || !p.same_shape(state.m1[i])) {
      throw ShapeError("optimizer_update: grad " + g.shape_str() + " vs param " +
                       p.shape_str());
    }
    if (!g.finite()) throw NumericError("optimizer_update: non-finite gradient");
    for (std::size_t k = 0; k < p.size(); ++k) {
      double gv = g[k];
      double m1 = state.beta1 * state.m1[i][k] + (1.0 - state.beta1) * gv;
      double m2 = state.beta2 * state.m2[i][k] + (1.0 - state.beta2) * gv * gv;
      state.m1[i][k] = m1;
      state.m2[i][k] = m2;
      double update = lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + state.eps);
      double next = p[k] - update;
      if (!std::isfinite(next)) {
        throw NumericError("optimizer_update: non-finite parameter update");
      }
      p[k] = next;
    }
  }
}

BatchGraph build_batch_graph(ad::Tape& tape, const std::vector<ItemRecord>& batch,
                             MixQuantModel& m, const TrainState& state,
                             const TrainConfig& cfg,
                             const std::vector<QuantFreeze>* freeze) {
  if (batch.size() < 2) {
    throw PreconditionError("build_batch_graph: need at least 2 items");
  }
  if (freeze && freeze->size() != batch.size()) {
    throw PreconditionError("build_batch_graph: snapshot count does not match batch");
  }

  BatchGraph bg;
  std::vector<ad::Var> recon_terms, vq_terms, router_vars;
  std::vector<ad::Var> h_t, h_v, h_b;
  std::vector<RouterOutput> routing;
  try {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      bg.items.push_back(build_item_graph(tape, batch[i], m, state.stats,
                                          freeze ? &(*freeze)[i] : nullptr));
      ItemGraph& g = bg.items.back();
      recon_terms.push_back(g.recon_loss);
      vq_terms.push_back(g.vq_loss);
      router_vars.push_back(g.router_weights);
      h_t.push_back(g.h_t);
      h_v.push_back(g.h_v);
      h_b.push_back(g.h_b);
      routing.push_back(g.routing);
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string("L_recon/L_vq: ") + e.what());
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  bg.l_recon = ad::scale(ad::add_n(recon_terms), inv_b);
  bg.l_vq = ad::scale(ad::add_n(vq_terms), inv_b);

  ControllerParams controller{cfg.alpha, cfg.beta, state.stats};
  for (const ItemRecord& item : batch) {
    bg.controller_w.push_back(
        alignment_weight(norm_normalize(item.e_b, state.stats), controller));
  }

  ad::Var align_block;
  try {
    if (state.epoch < cfg.warmup_epochs) {
      bg.l_content = content_contrastive_loss(tape, h_t, h_v, cfg.tau);
      bg.l_align = tape.scalar(0.0);
      align_block = bg.l_content;
    } else {
      AlignBatch ab;
      ab.h_t = std::move(h_t);
      ab.h_v = std::move(h_v);
      ab.h_b = std::move(h_b);
      ab.weights = bg.controller_w;
      ab.tau = cfg.tau;
      AlignLosses al = total_alignment_loss(tape, ab);
      bg.l_content = al.content;
      bg.l_align = al.behavior_weighted;
      align_block = al.total;
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string("L_content/L_align: ") + e.what());
  }

  double s_target_sum = 0.0, s_current_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    s_target_sum += target_sparsity(batch[i].e_b, cfg.theta, state.stats);
    s_current_sum += routing[i].s_current;
  }
  bg.s_target_mean = s_target_sum * inv_b;
  bg.s_current_mean = s_current_sum * inv_b;
  bg.f_lb = load_balance_factor(routing, bg.s_target_mean);
  try {
    bg.l_reg = sparsity_regularization_tape(tape, router_vars, bg.f_lb,
                                            state.sparsity.lambda);
  } catch (const NumericError& e) {
    throw NumericError(std::string("L_reg: ") + e.what());
  }

  std::vector<ad::Var> weighted{
      ad::scale(bg.l_recon, cfg.w_recon),
      ad::scale(align_block, cfg.w_align_block),
      ad::scale(bg.l_vq, cfg.w_vq),
      ad::scale(bg.l_reg, cfg.w_reg),
  };
  bg.total = ad::add_n(weighted);
  return bg;
}

StepReport train_step(const std::vector<ItemRecord>& batch, MixQuantModel& m,
                      TrainState& state, const TrainConfig& cfg) {
  if (batch.size() != cfg.batch_size) {
    throw PreconditionError("train_step: batch has " + std::to_string(batch.size()) +
                            " items, config expects " + std::to_string(cfg.batch_size));
  }

  ad::Tape tape;
  BatchGraph bg = build_batch_graph(tape, batch, m, state, cfg);
  check_component(bg.l_recon, "L_recon");
  check_component(bg.l_content, "L_content");
  check_component(bg.l_align, "L_align");
  check_component(bg.l_vq, "L_vq");
  check_component(bg.l_reg, "L_reg");
  check_component(bg.total, "total");

  tape.backward(bg.total);

  std::vector<Tensor*> params;
  m.for_each_param([&](Tensor& t) { params.push_back(&t); });
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) {
    grads.push_back(tape.has_param(*p) ? tape.grad_of(*p) : Tensor::zeros(p->shape()));
    if (!grads.back().finite()) {
      throw NumericError("train_step: non-finite gradient");
    }
  }

  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  double gnorm = std::sqrt(sq);
  if (gnorm > kGradClipNorm) {
    double s = kGradClipNorm / gnorm;
    for (Tensor& g : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  optimizer_update(params, grads, cfg.learning_rate, state.adam);

  state.sparsity = update_lambda(state.sparsity, bg.s_target_mean, bg.s_current_mean);

  const std::size_t l = m.cfg.sid_length();
  for (const ItemGraph& g : bg.items) {
    for (std::size_t j = 0; j < l; ++j) {
      m.codebooks[j].usage[g.assignments[j].code_index] += 1;
    }
  }

  StepReport r;
  r.l_recon = bg.l_recon.item();
  r.l_content = bg.l_content.item();
  r.l_align = bg.l_align.item();
  r.l_vq = bg.l_vq.item();
  r.l_reg = bg.l_reg.item();
  r.total = bg.total.item();
  r.mean_s_current = bg.s_current_mean;
  r.mean_w = std::accumulate(bg.controller_w.begin(), bg.controller_w.end(), 0.0) /
             static_cast<double>(bg.controller_w.size());
  r.lambda = state.sparsity.lambda;
  return r;
}

std::pair<MixQuantModel, std::vector<StepReport>> train(
    const Dataset& data, const TrainConfig& cfg,
    const std::string& checkpoint_path) {
  if (data.items.empty()) throw PreconditionError("train: dataset is empty");
  if (cfg.batch_size < 2) {
    throw PreconditionError("train: batch_size must be at least 2");
  }

  MixQuantModel m = init_model(cfg.model_config(), data.dims, cfg.seed);
  std::vector<StepReport> history;

  if (cfg.epochs > 0) {
    const std::size_t n = data.items.size();
    if (n < cfg.batch_size) {
      throw PreconditionError("train: dataset smaller than one batch");
    }
    Rng rng(cfg.seed);
    const std::size_t l = m.cfg.sid_length();

    if (cfg.kmeans_init) {
      std::vector<std::vector<Tensor>> by_position = position_latents(data, m);
      for (std::size_t j = 0; j < l; ++j) {
        kmeans_init(m.codebooks[j], by_position[j], kKmeansIters, rng);
      }
    }

    warm_start_router(m, data, cfg.theta);

    TrainState state;
    state.stats = data.norm_stats;
    state.sparsity.lambda = cfg.lambda_0;
    state.sparsity.update_factor = cfg.update_factor;
    state.sparsity.theta = cfg.theta;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t n_batches = n / cfg.batch_size;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      state.epoch = epoch;
      rng.shuffle(order);
      StepReport mean;
      for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<ItemRecord> batch;
        batch.reserve(cfg.batch_size);
        for (std::size_t k = b * cfg.batch_size; k < (b + 1) * cfg.batch_size; ++k) {
          batch.push_back(data.items[order[k]]);
        }
        StepReport r = train_step(batch, m, state, cfg);
        mean.l_recon += r.l_recon;
        mean.l_content += r.l_content;
        mean.l_align += r.l_align;
        mean.l_vq += r.l_vq;
        mean.l_reg += r.l_reg;
        mean.total += r.total;
        mean.mean_s_current += r.mean_s_current;
        mean.mean_w += r.mean_w;
        mean.lambda += r.lambda;
      }
      const double inv = 1.0 / static_cast<double>(n_batches);
      mean.l_recon *= inv;
      mean.l_content *= inv;
      mean.l_align *= inv;
      mean.l_vq *= inv;
      mean.l_reg *= inv;
      mean.total *= inv;
      mean.mean_s_current *= inv;
      mean.mean_w *= inv;
      mean.lambda *= inv;

      // Reset decisions come from a fresh assignment pass with the updated
      // parameters. Usage counters accumulated across the epoch go stale as
      // the encoders move: a codeword can win batches mid-epoch yet attract
      // nothing by the end, and the counter cannot tell.
      if (cfg.reset_threshold > 0) {
        std::vector<std::vector<Tensor>> by_position = position_latents(data, m);
        for (std::size_t j = 0; j < l; ++j) {
          reset_dead_codes(m.codebooks[j], by_position[j], cfg.reset_threshold);
        }
      } else {
        for (std::size_t j = 0; j < l; ++j) reset_dead_codes(m.codebooks[j], {}, 0);
      }
      history.push_back(mean);
    }
  }

  if (!checkpoint_path.empty()) save_model(m, checkpoint_path);
  return {std::move(m), std::move(history)};
}

void save_history(const std::vector<StepReport>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(path + ": cannot open for writing");
  out << "epoch,l_recon,l_content,l_align,l_vq,l_reg,total,mean_s_current,mean_w,lambda\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const StepReport& r = history[i];
    out << i << ',' << fmt_double(r.l_recon) << ',' << fmt_double(r.l_content)
        << ',' << fmt_double(r.l_align) << ',' << fmt_double(r.l_vq) << ','
        << fmt_double(r.l_reg) << ',' << fmt_double(r.total) << ','
        << fmt_double(r.mean_s_current) << ',' << fmt_double(r.mean_w) << ','
        << fmt_double(r.lambda) << '\n';
  }
  if (!out) throw ArtifactError(path + ": write failed");
}

}  // namespace mixquant
