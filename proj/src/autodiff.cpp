#include "mixquant/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "mixquant/errors.hpp"

namespace mixquant::ad {

namespace {

void check_same_tape(Var a, Var b, const char* op) {
  if (!a || !b || a.tape() != b.tape()) {
    throw PreconditionError(std::string(op) + ": vars from different tapes");
  }
}

void check_same_shape(Var a, Var b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
  }
}

void check_rank1(Var a, const char* op) {
  if (a.value().rank() != 1) {
    throw ShapeError(std::string(op) + ": expected a vector, got " +
                     a.value().shape_str());
  }
}

}  // namespace

Var Tape::leaf(Tensor value) { return emplace(std::move(value), "leaf"); }

Var Tape::param(Tensor& storage) {
  auto it = params_.find(&storage);
  if (it != params_.end()) return Var(it->second, this);
  Var v = emplace(storage, "param");
  params_.emplace(&storage, v.node());
  return v;
}

Var Tape::emplace(Tensor value, const char* op) {
  if (!value.finite()) {
    throw NumericError(std::string(op) + ": non-finite value");
  }
  Node& n = nodes_.emplace_back();
  n.idx = nodes_.size() - 1;
  n.grad = Tensor::zeros(value.shape());
  n.value = std::move(value);
  return Var(&n, this);
}

void Tape::backward(Var root) {
  if (!root || root.tape() != this) {
    throw PreconditionError("backward: root is not on this tape");
  }
  if (root.value().size() != 1) {
    throw PreconditionError("backward: root has " +
                            std::to_string(root.value().size()) + " elements");
  }
  if (swept_) throw PreconditionError("backward: tape already swept");
  swept_ = true;
  root.node()->grad[0] = 1.0;
  for (std::size_t i = root.node()->idx + 1; i-- > 0;) {
    if (nodes_[i].backprop) nodes_[i].backprop();
  }
}

const Tensor& Tape::grad_of(const Tensor& storage) const {
  auto it = params_.find(&storage);
  if (it == params_.end()) {
    throw PreconditionError("grad_of: tensor was never registered as a param");
  }
  return it->second->grad;
}

bool Tape::has_param(const Tensor& storage) const {
  return params_.count(&storage) > 0;
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = bv.rank() == 1 ? matvec(av, bv) : matmul_plain(av, bv);
  Var y = a.tape()->emplace(std::move(out), "matmul");
  Node* an = a.node();
  Node* bn = b.node();
  Node* yn = y.node();
  if (bv.rank() == 1) {
    yn->backprop = [an, bn, yn] {
      const Tensor& w = an->value;
      const Tensor& x = bn->value;
      const Tensor& dy = yn->grad;
      for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t k = 0; k < w.cols(); ++k) {
          an->grad.at(i, k) += dy[i] * x[k];
          bn->grad[k] += w.at(i, k) * dy[i];
        }
      }
    };
  } else {
    yn->backprop = [an, bn, yn] {
      const Tensor& av2 = an->value;
      const Tensor& bv2 = bn->value;
      const Tensor& dy = yn->grad;
      for (std::size_t i = 0; i < av2.rows(); ++i) {
        for (std::size_t j = 0; j < bv2.cols(); ++j) {
          double g = dy.at(i, j);
          for (std::size_t k = 0; k < av2.cols(); ++k) {
            an->grad.at(i, k) += g * bv2.at(k, j);
            bn->grad.at(k, j) += av2.at(i, k) * g;
          }
        }
      }
    };
  }
  return y;
}

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  Var y = a.tape()->emplace(std::move(out), "add");
  Node* an = a.node();
  Node* bn = b.node();
  Node* yn = y.node();
  yn->backprop = [an, bn, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += yn->grad[i];
      bn->grad[i] += yn->grad[i];
    }
  };
  return y;
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Var y = a.tape()->emplace(std::move(out), "sub");
  Node* an = a.node();
  Node* bn = b.node();
  Node* yn = y.node();
  yn->backprop = [an, bn, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += yn->grad[i];
      bn->grad[i] -= yn->grad[i];
    }
  };
  return y;
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  check_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Var y = a.tape()->emplace(std::move(out), "mul");
  Node* an = a.node();
  Node* bn = b.node();
  Node* yn = y.node();
  yn->backprop = [an, bn, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += yn->grad[i] * bn->value[i];
      bn->grad[i] += yn->grad[i] * an->value[i];
    }
  };
  return y;
}

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw PreconditionError("add_n: no inputs");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  Var y = a.tape()->emplace(std::move(out), "scale");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn, c] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += c * yn->grad[i];
  };
  return y;
}

Var scale_by(Var a, Var s) {
  check_same_tape(a, s, "scale_by");
  if (s.value().size() != 1) {
    throw ShapeError("scale_by: scale has shape " + s.value().shape_str());
  }
  double c = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  Var y = a.tape()->emplace(std::move(out), "scale_by");
  Node* an = a.node();
  Node* sn = s.node();
  Node* yn = y.node();
  yn->backprop = [an, sn, yn] {
    double c2 = sn->value[0];
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += c2 * yn->grad[i];
      sn->grad[0] += an->value[i] * yn->grad[i];
    }
  };
  return y;
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  Var y = a.tape()->emplace(std::move(out), "relu");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      if (an->value[i] > 0.0) an->grad[i] += yn->grad[i];
    }
  };
  return y;
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = mixquant::sigmoid(v);
  Var y = a.tape()->emplace(std::move(out), "sigmoid");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      double s = yn->value[i];
      an->grad[i] += yn->grad[i] * s * (1.0 - s);
    }
  };
  return y;
}

Var log(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) {
    if (v <= 0.0) throw NumericError("log: input " + std::to_string(v));
    v = std::log(v);
  }
  Var y = a.tape()->emplace(std::move(out), "log");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += yn->grad[i] / an->value[i];
    }
  };
  return y;
}

Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  Var y = a.tape()->emplace(std::move(out), "exp");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += yn->grad[i] * yn->value[i];
    }
  };
  return y;
}

Var softmax(Var a) {
  check_rank1(a, "softmax");
  Tensor out = Tensor::vec(mixquant::softmax(a.value().span()));
  Var y = a.tape()->emplace(std::move(out), "softmax");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    double inner = 0.0;
    for (std::size_t i = 0; i < yn->grad.size(); ++i) inner += yn->grad[i] * yn->value[i];
    for (std::size_t i = 0; i < yn->grad.size(); ++i) {
      an->grad[i] += yn->value[i] * (yn->grad[i] - inner);
    }
  };
  return y;
}

Var l2_norm(Var a) {
  check_rank1(a, "l2_norm");
  double n = mixquant::l2_norm(a.value().span());
  Var y = a.tape()->emplace(Tensor::scalar(n), "l2_norm");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    double n2 = yn->value[0];
    if (n2 < 1e-150) return;  // zero vector: flat, no direction
    double g = yn->grad[0] / n2;
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * an->value[i];
  };
  return y;
}

Var cosine_sim(Var a, Var b) {
  check_same_tape(a, b, "cosine_sim");
  check_rank1(a, "cosine_sim");
  check_same_shape(a, b, "cosine_sim");
  double s = mixquant::cosine_similarity(a.value().span(), b.value().span());
  Var y = a.tape()->emplace(Tensor::scalar(s), "cosine_sim");
  Node* an = a.node();
  Node* bn = b.node();
  Node* yn = y.node();
  yn->backprop = [an, bn, yn] {
    double na = mixquant::l2_norm(an->value.span());
    double nb = mixquant::l2_norm(bn->value.span());
    double d = (na + kNormGuard) * (nb + kNormGuard);
    double s2 = yn->value[0];
    double g = yn->grad[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) {
      double da = bn->value[i] / d;
      if (na >= 1e-150) da -= s2 * an->value[i] / (na * (na + kNormGuard));
      double db = an->value[i] / d;
      if (nb >= 1e-150) db -= s2 * bn->value[i] / (nb * (nb + kNormGuard));
      an->grad[i] += g * da;
      bn->grad[i] += g * db;
    }
  };
  return y;
}

Var dot(Var a, Var b) {
  check_same_tape(a, b, "dot");
  check_rank1(a, "dot");
  check_same_shape(a, b, "dot");
  double d = mixquant::dot(a.value().span(), b.value().span());
  Var y = a.tape()->emplace(Tensor::scalar(d), "dot");
  Node* an = a.node();
  Node* bn = b.node();
  Node* yn = y.node();
  yn->backprop = [an, bn, yn] {
    double g = yn->grad[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) {
      an->grad[i] += g * bn->value[i];
      bn->grad[i] += g * an->value[i];
    }
  };
  return y;
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  Var y = a.tape()->emplace(Tensor::scalar(s), "sum");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += yn->grad[0];
  };
  return y;
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  Var y = a.tape()->emplace(Tensor::scalar(s), "sum_squares");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    double g = yn->grad[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) {
      an->grad[i] += 2.0 * g * an->value[i];
    }
  };
  return y;
}

Var concat(std::span<const Var> xs) {
  if (xs.empty()) throw PreconditionError("concat: no inputs");
  std::vector<double> out;
  std::vector<Node*> parts;
  for (Var x : xs) {
    check_same_tape(xs[0], x, "concat");
    check_rank1(x, "concat");
    out.insert(out.end(), x.value().values().begin(), x.value().values().end());
    parts.push_back(x.node());
  }
  Var y = xs[0].tape()->emplace(Tensor::vec(std::move(out)), "concat");
  Node* yn = y.node();
  yn->backprop = [parts = std::move(parts), yn] {
    std::size_t off = 0;
    for (Node* p : parts) {
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += yn->grad[off + i];
      off += p->grad.size();
    }
  };
  return y;
}

Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw PreconditionError("stack: no inputs");
  std::vector<double> out;
  std::vector<Node*> parts;
  for (Var x : scalars) {
    check_same_tape(scalars[0], x, "stack");
    if (x.value().size() != 1) {
      throw ShapeError("stack: element has shape " + x.value().shape_str());
    }
    out.push_back(x.value()[0]);
    parts.push_back(x.node());
  }
  Var y = scalars[0].tape()->emplace(Tensor::vec(std::move(out)), "stack");
  Node* yn = y.node();
  yn->backprop = [parts = std::move(parts), yn] {
    for (std::size_t i = 0; i < parts.size(); ++i) parts[i]->grad[0] += yn->grad[i];
  };
  return y;
}

Var logsumexp(Var a) {
  check_rank1(a, "logsumexp");
  const auto& v = a.value().values();
  double m = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - m);
  double lse = m + std::log(z);
  Var y = a.tape()->emplace(Tensor::scalar(lse), "logsumexp");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn] {
    double g = yn->grad[0];
    double lse2 = yn->value[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) {
      an->grad[i] += g * std::exp(an->value[i] - lse2);
    }
  };
  return y;
}

Var stop_gradient(Var a) {
  return a.tape()->emplace(a.value(), "stop_gradient");
}

Var at(Var a, std::size_t i) {
  if (i >= a.value().size()) {
    throw PreconditionError("at: index " + std::to_string(i) + " out of range for " +
                            a.value().shape_str());
  }
  Var y = a.tape()->emplace(Tensor::scalar(a.value()[i]), "at");
  Node* an = a.node();
  Node* yn = y.node();
  yn->backprop = [an, yn, i] { an->grad[i] += yn->grad[0]; };
  return y;
}

FdReport finite_diff_check(const std::function<Var(Tape&)>& f,
                           std::span<const FdParam> params, double step,
                           double tol) {
  if (!(step > 0.0) || step > 1e-3 || !(tol > 0.0)) {
    throw PreconditionError("finite_diff_check: need step in (0, 1e-3] and tol > 0");
  }
  Tape tape;
  Var root = f(tape);
  tape.backward(root);

  FdReport report;
  report.tol = tol;
  for (const FdParam& p : params) {
    // Params that never entered the graph have zero gradient by definition.
    Tensor analytic = tape.has_param(*p.storage)
                          ? tape.grad_of(*p.storage)
                          : Tensor::zeros(p.storage->shape());
    FdEntry entry;
    entry.name = p.name;
    for (std::size_t i = 0; i < p.storage->size(); ++i) {
      double saved = (*p.storage)[i];
      (*p.storage)[i] = saved + step;
      Tape tp;
      double fp = f(tp).item();
      (*p.storage)[i] = saved - step;
      Tape tm;
      double fm = f(tm).item();
      (*p.storage)[i] = saved;
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[i];
      double rel = std::abs(a - numeric) /
                   std::max({std::abs(a), std::abs(numeric), 1e-3});
      if (rel >= entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mixquant::ad
