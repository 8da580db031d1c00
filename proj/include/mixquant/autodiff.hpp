#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixquant/tensor.hpp"

namespace mixquant::ad {

class Tape;

struct Node {
  Tensor value;
  Tensor grad;
  std::function<void()> backprop;  // empty for leaves
  std::size_t idx = 0;
};

// Handle into a tape node. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  Var(Node* node, Tape* tape) : node_(node), tape_(tape) {}

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  double item() const { return node_->value.item(); }
  Node* node() const { return node_; }
  Tape* tape() const { return tape_; }
  explicit operator bool() const { return node_ != nullptr; }

 private:
  Node* node_ = nullptr;
  Tape* tape_ = nullptr;
};

// Define-by-run tape. Nodes are recorded in creation order, which is a
// topological order, so backward is a single reverse sweep. Gradients
// accumulate, so reusing a Var in several places is fine. A tape is built
// fresh for every forward pass.
class Tape {
 public:
  Var leaf(Tensor value);
  Var scalar(double v) { return leaf(Tensor::scalar(v)); }

  // Leaf memoized by the storage tensor's address, so every use of one
  // parameter accumulates into one gradient.
  Var param(Tensor& storage);

  // Seeds d(root)/d(root) = 1 and sweeps the tape once. Root must hold a
  // single element. One backward per tape.
  void backward(Var root);

  const Tensor& grad_of(const Tensor& storage) const;
  bool has_param(const Tensor& storage) const;
  std::size_t node_count() const { return nodes_.size(); }

  Var emplace(Tensor value, const char* op);

 private:
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, Node*> params_;
  bool swept_ = false;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_n(std::span<const Var> xs);
Var scale(Var a, double c);
Var scale_by(Var a, Var s);
Var relu(Var a);
Var sigmoid(Var a);
Var log(Var a);
Var exp(Var a);
Var softmax(Var a);
Var l2_norm(Var a);
Var cosine_sim(Var a, Var b);
Var dot(Var a, Var b);
Var sum(Var a);
Var sum_squares(Var a);
Var concat(std::span<const Var> xs);
Var stack(std::span<const Var> scalars);
Var logsumexp(Var a);
Var stop_gradient(Var a);
Var at(Var a, std::size_t i);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

struct FdParam {
  std::string name;
  Tensor* storage;
};

struct FdEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct FdReport {
  double tol = 0.0;
  double max_rel_err = 0.0;
  std::vector<FdEntry> entries;
  bool ok() const { return max_rel_err <= tol; }
};

// Central-difference check of d f / d params. f must register every listed
// storage via tape.param and return a single-element Var. Relative error
// uses max(|analytic|, |numeric|, 1e-3) as denominator.
FdReport finite_diff_check(const std::function<Var(Tape&)>& f,
                           std::span<const FdParam> params, double step,
                           double tol);

}  // namespace mixquant::ad
