#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mixquant/autodiff.hpp"
#include "mixquant/errors.hpp"
#include "mixquant/rng.hpp"
#include "mixquant/tensor.hpp"

using namespace mixquant;
namespace ad = mixquant::ad;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces an op's output to a scalar with fixed coefficients so every output
// element contributes to the gradient.
ad::Var pin(ad::Tape& tape, ad::Var y, const Tensor& coeff) {
  ad::Var c = tape.leaf(coeff);
  if (y.value().rank() == 0) return y * c;
  return ad::sum(ad::mul(y, c));
}

}  // namespace

TEST_CASE("matmul identity and scalar products") {
  ad::Tape tape;
  ad::Var a = tape.leaf(Tensor::mat(2, 2, {1, 0, 0, 1}));
  ad::Var b = tape.leaf(Tensor::mat(2, 1, {3, 4}));
  ad::Var c = ad::matmul(a, b);
  CHECK(c.value().shape() == std::vector<std::size_t>{2, 1});
  CHECK(c.value()[0] == 3.0);
  CHECK(c.value()[1] == 4.0);

  ad::Var p = ad::matmul(tape.leaf(Tensor::mat(1, 1, {2})), tape.leaf(Tensor::mat(1, 1, {5})));
  CHECK(p.value()[0] == 10.0);
}

TEST_CASE("matmul gradients match central differences") {
  Rng rng(11);
  Tensor a = random_tensor({4, 3}, rng, -2, 2);
  Tensor b = random_tensor({3, 2}, rng, -2, 2);
  Tensor coeff = random_tensor({4, 2}, rng, -1, 1);
  auto f = [&](ad::Tape& tape) {
    return pin(tape, ad::matmul(tape.param(a), tape.param(b)), coeff);
  };
  std::vector<ad::FdParam> params{{"a", &a}, {"b", &b}};
  ad::FdReport report = ad::finite_diff_check(f, params, 1e-5, 1e-6);
  CHECK(report.ok());
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("matmul rejects mismatched shapes") {
  ad::Tape tape;
  ad::Var a = tape.leaf(Tensor::mat(2, 3, {1, 2, 3, 4, 5, 6}));
  ad::Var b = tape.leaf(Tensor::mat(4, 2, {1, 2, 3, 4, 5, 6, 7, 8}));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
}

TEST_CASE("stop_gradient is a forward identity") {
  Rng rng(3);
  Tensor x = random_tensor({5}, rng, -2, 2);
  ad::Tape tape;
  ad::Var sg = ad::stop_gradient(tape.param(x));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(sg.value()[i] == x[i]);
}

TEST_CASE("straight-through estimator has unit gradient") {
  // d/dx [x + sg(y - x)] == 1 even though the forward value equals y.
  Tensor x = Tensor::vec({0.7, -1.2, 2.5});
  Tensor y = Tensor::vec({1.0, 1.0, 1.0});
  ad::Tape tape;
  ad::Var xv = tape.param(x);
  ad::Var yv = tape.leaf(y);
  ad::Var st = xv + ad::stop_gradient(yv - xv);
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(st.value()[i] == x[i] + (y[i] - x[i]));
    CHECK(st.value()[i] == doctest::Approx(y[i]).epsilon(1e-15));
  }
  tape.backward(ad::sum(st));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(tape.grad_of(x)[i] == 1.0);
}

TEST_CASE("stop_gradient blocks the backward path") {
  Tensor x = Tensor::vec({1.5, -0.5});
  ad::Tape tape;
  ad::Var loss = ad::sum_squares(ad::stop_gradient(tape.param(x)));
  tape.backward(loss);
  CHECK(tape.grad_of(x)[0] == 0.0);
  CHECK(tape.grad_of(x)[1] == 0.0);
}

TEST_CASE("elementwise fixed points") {
  ad::Tape tape;
  ad::Var s = ad::softmax(tape.leaf(Tensor::vec({0, 0, 0})));
  CHECK(s.value()[0] == 1.0 / 3.0);
  CHECK(s.value()[1] == 1.0 / 3.0);
  CHECK(s.value()[2] == 1.0 / 3.0);

  ad::Var v = tape.leaf(Tensor::vec({0.3, -1.7, 4.0}));
  CHECK(ad::cosine_sim(v, v).item() == doctest::Approx(1.0).epsilon(1e-9));

  CHECK(ad::sigmoid(tape.scalar(0.0)).item() == 0.5);
  CHECK(sigmoid(0.0) == 0.5);
}

TEST_CASE("finite_diff_check on x squared") {
  Tensor x = Tensor::scalar(3.0);
  auto f = [&](ad::Tape& tape) {
    ad::Var xv = tape.param(x);
    return xv * xv;
  };
  std::vector<ad::FdParam> params{{"x", &x}};
  ad::FdReport report = ad::finite_diff_check(f, params, 1e-5, 1e-6);
  CHECK(report.entries.size() == 1);
  CHECK(report.entries[0].analytic == 6.0);
  CHECK(report.entries[0].numeric == doctest::Approx(6.0).epsilon(1e-8));
  CHECK(report.ok());
}

TEST_CASE("finite_diff_check validates step") {
  Tensor x = Tensor::scalar(1.0);
  auto f = [&](ad::Tape& tape) { return tape.param(x); };
  std::vector<ad::FdParam> params{{"x", &x}};
  CHECK_THROWS_AS(ad::finite_diff_check(f, params, 1e-2, 1e-6), PreconditionError);
  CHECK_THROWS_AS(ad::finite_diff_check(f, params, 0.0, 1e-6), PreconditionError);
}

TEST_CASE("per-op gradients match central differences on random inputs") {
  Rng rng(29);
  const double step = 1e-5;
  const double tol = 1e-4;

  auto check_unary = [&](const char* name, auto op, double lo, double hi) {
    CAPTURE(name);
    Tensor x = random_tensor({6}, rng, lo, hi);
    if (std::string(name) == "relu") {
      for (double& v : x.values()) {
        if (std::abs(v) < 1e-3) v = 0.5;  // keep clear of the kink
      }
    }
    Tensor coeff = random_tensor({6}, rng, -1, 1);
    Tensor coeff0 = random_tensor({}, rng, -1, 1);
    auto f = [&](ad::Tape& tape) {
      ad::Var y = op(tape.param(x));
      return pin(tape, y, y.value().rank() == 0 ? coeff0 : coeff);
    };
    std::vector<ad::FdParam> params{{"x", &x}};
    ad::FdReport report = ad::finite_diff_check(f, params, step, tol);
    CAPTURE(report.max_rel_err);
    CHECK(report.ok());
  };

  check_unary("relu", [](ad::Var x) { return ad::relu(x); }, -2, 2);
  check_unary("sigmoid", [](ad::Var x) { return ad::sigmoid(x); }, -2, 2);
  check_unary("log", [](ad::Var x) { return ad::log(x); }, 0.05, 2);
  check_unary("exp", [](ad::Var x) { return ad::exp(x); }, -2, 2);
  check_unary("softmax", [](ad::Var x) { return ad::softmax(x); }, -2, 2);
  check_unary("l2_norm", [](ad::Var x) { return ad::l2_norm(x); }, -2, 2);
  check_unary("sum", [](ad::Var x) { return ad::sum(x); }, -2, 2);
  check_unary("sum_squares", [](ad::Var x) { return ad::sum_squares(x); }, -2, 2);
  check_unary("logsumexp", [](ad::Var x) { return ad::logsumexp(x); }, -2, 2);
  check_unary("scale", [](ad::Var x) { return ad::scale(x, -1.7); }, -2, 2);
  check_unary("at", [](ad::Var x) { return ad::at(x, 2); }, -2, 2);

  auto check_binary = [&](const char* name, auto op) {
    CAPTURE(name);
    Tensor a = random_tensor({6}, rng, -2, 2);
    Tensor b = random_tensor({6}, rng, -2, 2);
    Tensor coeff = random_tensor({6}, rng, -1, 1);
    Tensor coeff0 = random_tensor({}, rng, -1, 1);
    auto f = [&](ad::Tape& tape) {
      ad::Var y = op(tape.param(a), tape.param(b));
      return pin(tape, y, y.value().rank() == 0 ? coeff0 : coeff);
    };
    std::vector<ad::FdParam> params{{"a", &a}, {"b", &b}};
    ad::FdReport report = ad::finite_diff_check(f, params, step, tol);
    CAPTURE(report.max_rel_err);
    CHECK(report.ok());
  };

  check_binary("add", [](ad::Var a, ad::Var b) { return ad::add(a, b); });
  check_binary("sub", [](ad::Var a, ad::Var b) { return ad::sub(a, b); });
  check_binary("mul", [](ad::Var a, ad::Var b) { return ad::mul(a, b); });
  check_binary("dot", [](ad::Var a, ad::Var b) { return ad::dot(a, b); });
  check_binary("cosine_sim", [](ad::Var a, ad::Var b) { return ad::cosine_sim(a, b); });

  // scale_by: scalar multiplier gets its own gradient.
  {
    Tensor a = random_tensor({6}, rng, -2, 2);
    Tensor s = Tensor::scalar(rng.uniform(-2, 2));
    Tensor coeff = random_tensor({6}, rng, -1, 1);
    auto f = [&](ad::Tape& tape) {
      return pin(tape, ad::scale_by(tape.param(a), tape.param(s)), coeff);
    };
    std::vector<ad::FdParam> params{{"a", &a}, {"s", &s}};
    CHECK(ad::finite_diff_check(f, params, step, tol).ok());
  }

  // concat and stack across three inputs.
  {
    Tensor a = random_tensor({3}, rng, -2, 2);
    Tensor b = random_tensor({2}, rng, -2, 2);
    Tensor coeff = random_tensor({5}, rng, -1, 1);
    auto f = [&](ad::Tape& tape) {
      std::vector<ad::Var> xs{tape.param(a), tape.param(b)};
      return pin(tape, ad::concat(xs), coeff);
    };
    std::vector<ad::FdParam> params{{"a", &a}, {"b", &b}};
    CHECK(ad::finite_diff_check(f, params, step, tol).ok());
  }
  {
    Tensor a = Tensor::scalar(rng.uniform(-2, 2));
    Tensor b = Tensor::scalar(rng.uniform(-2, 2));
    Tensor coeff = random_tensor({2}, rng, -1, 1);
    auto f = [&](ad::Tape& tape) {
      std::vector<ad::Var> xs{tape.param(a), tape.param(b)};
      return pin(tape, ad::stack(xs), coeff);
    };
    std::vector<ad::FdParam> params{{"a", &a}, {"b", &b}};
    CHECK(ad::finite_diff_check(f, params, step, tol).ok());
  }
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Tensor x = Tensor::scalar(3.0);
  ad::Tape tape;
  ad::Var xv = tape.param(x);
  CHECK(tape.param(x).node() == xv.node());  // memoized by address
  ad::Var y = xv * xv + xv;
  tape.backward(y);
  CHECK(tape.grad_of(x)[0] == 7.0);  // 2x + 1 at x = 3
}

TEST_CASE("gradients accumulate through a reused intermediate") {
  // u = 2x reused on two paths: y = u*u + 3u, dy/dx = 8x + 6.
  Tensor x = Tensor::scalar(1.25);
  ad::Tape tape;
  ad::Var u = ad::scale(tape.param(x), 2.0);
  ad::Var y = u * u + ad::scale(u, 3.0);
  tape.backward(y);
  CHECK(tape.grad_of(x)[0] == doctest::Approx(8.0 * 1.25 + 6.0));
}

TEST_CASE("non-finite inputs raise a numeric error naming the op") {
  ad::Tape tape;
  CHECK_THROWS_AS(tape.leaf(Tensor::vec({1.0, std::nan("")})), NumericError);
  CHECK_THROWS_WITH_AS(ad::log(tape.leaf(Tensor::vec({-1.0}))),
                       doctest::Contains("log"), NumericError);
  CHECK_THROWS_AS(ad::exp(tape.scalar(1e308)), NumericError);
}

TEST_CASE("backward preconditions") {
  ad::Tape tape;
  ad::Var v = tape.leaf(Tensor::vec({1, 2}));
  CHECK_THROWS_AS(tape.backward(v), PreconditionError);
  ad::Var s = ad::sum(v);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), PreconditionError);
}

TEST_CASE("relu backward uses subgradient zero at the kink") {
  Tensor x = Tensor::vec({0.0, -1.0, 2.0});
  ad::Tape tape;
  ad::Var y = ad::sum(ad::relu(tape.param(x)));
  tape.backward(y);
  CHECK(tape.grad_of(x)[0] == 0.0);
  CHECK(tape.grad_of(x)[1] == 0.0);
  CHECK(tape.grad_of(x)[2] == 1.0);
}
