#include "mixquant/graph.hpp"

#include <utility>

#include "mixquant/align.hpp"
#include "mixquant/errors.hpp"

namespace mixquant {

ad::Var mlp_forward_tape(ad::Tape& tape, Mlp& mlp, ad::Var x) {
  if (mlp.weights.empty()) throw PreconditionError("mlp has no layers");
  if (mlp.weights.size() != mlp.biases.size()) {
    throw PreconditionError("mlp weight/bias layer count mismatch");
  }
  ad::Var h = x;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    ad::Var pre = ad::add(ad::matmul(tape.param(mlp.weights[i]), h),
                          tape.param(mlp.biases[i]));
    h = i + 1 < mlp.weights.size() ? ad::relu(pre) : pre;
  }
  return h;
}

namespace {

// Mirrors fuse_latents' left fold: shared latents enter unweighted, the rest
// as weight * latent, accumulated in SID order.
ad::Var fuse_tape(const std::vector<ad::Var>& latents, const MixQuantModel& m,
                  ad::Var gates_t, ad::Var gates_v, ad::Var router_weights) {
  const ModelConfig& cfg = m.cfg;
  if (cfg.n_shared == 0) {
    throw PreconditionError("fuse: need at least one shared latent");
  }
  ad::Var acc = latents[0];
  std::size_t pos = 1;
  for (std::size_t i = 1; i < cfg.n_shared; ++i) {
    acc = ad::add(acc, latents[pos++]);
  }
  for (std::size_t i = 0; i < cfg.n_text; ++i) {
    acc = ad::add(acc, ad::scale_by(latents[pos++], ad::at(gates_t, i)));
  }
  for (std::size_t i = 0; i < cfg.n_vision; ++i) {
    acc = ad::add(acc, ad::scale_by(latents[pos++], ad::at(gates_v, i)));
  }
  for (std::size_t i = 0; i < cfg.n_behavior; ++i) {
    acc = ad::add(acc, ad::scale_by(latents[pos++], ad::at(router_weights, i)));
  }
  return acc;
}

}  // namespace

ItemGraph build_item_graph(ad::Tape& tape, const ItemRecord& item,
                           MixQuantModel& m, const NormStats& stats,
                           const QuantFreeze* freeze) {
  const ModelConfig& cfg = m.cfg;
  const std::size_t l = cfg.sid_length();
  if (m.codebooks.size() != l) {
    throw PreconditionError("model has " + std::to_string(m.codebooks.size()) +
                            " codebooks for " + std::to_string(l) + " SID positions");
  }
  if (freeze && (freeze->codes.size() != l || freeze->latents.size() != l ||
                 freeze->codewords.size() != l)) {
    throw PreconditionError("quantization snapshot does not cover every SID position");
  }

  ItemGraph g;
  ad::Var e_t = tape.leaf(item.e_t);
  ad::Var e_v = tape.leaf(item.e_v);
  ad::Var e_b = tape.leaf(item.e_b);

  g.h_t = mlp_forward_tape(tape, m.proj_t, e_t);
  g.h_v = mlp_forward_tape(tape, m.proj_v, e_v);
  g.h_b = mlp_forward_tape(tape, m.proj_b, e_b);
  // Mirrors project_modalities: behavior enters the fused cross-modal input
  // scaled by the controller weight, a per-item constant off the tape.
  ControllerParams controller{m.cfg.alpha, m.cfg.beta, stats};
  const double w_fuse = alignment_weight(norm_normalize(item.e_b, stats), controller);
  std::vector<ad::Var> h_parts{g.h_t, g.h_v, ad::scale(g.h_b, w_fuse)};
  ad::Var h = ad::concat(h_parts);

  for (Mlp& e : m.shared_experts) g.latents.push_back(mlp_forward_tape(tape, e, h));
  for (Mlp& e : m.text_experts) g.latents.push_back(mlp_forward_tape(tape, e, e_t));
  for (Mlp& e : m.vision_experts) g.latents.push_back(mlp_forward_tape(tape, e, e_v));
  for (Mlp& e : m.behavior_experts) g.latents.push_back(mlp_forward_tape(tape, e, e_b));

  g.gates_t = ad::softmax(ad::add(mlp_forward_tape(tape, m.gate_t_mlp, e_t),
                                  tape.param(m.gate_t_bias)));
  g.gates_v = ad::softmax(ad::add(mlp_forward_tape(tape, m.gate_v_mlp, e_v),
                                  tape.param(m.gate_v_bias)));
  g.router_weights = route_weights_tape(tape, item.e_b, m, stats);
  g.routing = route_behavior(item.e_b, m, stats);

  // Quantize every position and accumulate the codebook objective. The
  // codeword pull term trains codewords; the commitment term trains encoders.
  std::vector<ad::Var> quantized;
  std::vector<ad::Var> vq_terms;
  quantized.reserve(l);
  for (std::size_t j = 0; j < l; ++j) {
    Codebook& cb = m.codebooks[j];
    Assignment asg;
    if (freeze) {
      asg.code_index = freeze->codes[j];
      if (asg.code_index >= cb.codewords.size()) {
        throw PreconditionError("quantization snapshot code out of range");
      }
      asg.codeword = cb.codewords[asg.code_index];
      asg.similarity = cosine_similarity(g.latents[j].value().span(),
                                         asg.codeword.span());
    } else {
      asg = nearest_codeword(g.latents[j].value(), cb);
    }
    ad::Var cw = tape.param(cb.codewords[asg.code_index]);
    quantized.push_back(cw);

    ad::Var anchor = freeze ? tape.leaf(freeze->latents[j])
                            : ad::stop_gradient(g.latents[j]);
    ad::Var target = freeze ? tape.leaf(freeze->codewords[j])
                            : ad::stop_gradient(cw);
    ad::Var pull = ad::sum_squares(ad::sub(anchor, cw));
    ad::Var commit = ad::scale(ad::sum_squares(ad::sub(g.latents[j], target)),
                               kCommitmentBeta);
    vq_terms.push_back(ad::add(pull, commit));
    g.assignments.push_back(std::move(asg));
  }
  g.vq_loss = ad::add_n(vq_terms);

  g.z = fuse_tape(g.latents, m, g.gates_t, g.gates_v, g.router_weights);
  g.z_q = fuse_tape(quantized, m, g.gates_t, g.gates_v, g.router_weights);

  ad::Var residual = freeze ? tape.leaf(freeze->residual)
                            : ad::stop_gradient(ad::sub(g.z_q, g.z));
  ad::Var decoder_in = ad::add(g.z, residual);
  g.reconstruction = mlp_forward_tape(tape, m.decoder, decoder_in);

  std::vector<double> target;
  target.reserve(item.e_t.size() + item.e_v.size() + item.e_b.size());
  target.insert(target.end(), item.e_t.values().begin(), item.e_t.values().end());
  target.insert(target.end(), item.e_v.values().begin(), item.e_v.values().end());
  target.insert(target.end(), item.e_b.values().begin(), item.e_b.values().end());
  g.recon_loss = ad::sum_squares(
      ad::sub(g.reconstruction, tape.leaf(Tensor::vec(std::move(target)))));
  return g;
}

QuantFreeze snapshot_quantization(const ItemGraph& g) {
  QuantFreeze f;
  for (std::size_t j = 0; j < g.assignments.size(); ++j) {
    f.codes.push_back(g.assignments[j].code_index);
    f.latents.push_back(g.latents[j].value());
    f.codewords.push_back(g.assignments[j].codeword);
  }
  Tensor residual = g.z_q.value();
  for (std::size_t i = 0; i < residual.size(); ++i) {
    residual[i] = residual[i] - g.z.value()[i];
  }
  f.residual = std::move(residual);
  return f;
}

}  // namespace mixquant
