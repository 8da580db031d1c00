#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mixquant/errors.hpp"

namespace mixquant {

// Dense row-major tensor of 64-bit reals. Scalars are rank 0; the model
// never needs more than rank 2.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double fill);
  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> values);
  static Tensor mat(std::size_t rows, std::size_t cols, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<const double> span() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  // Reads a rank-0 (or any single-element) tensor.
  double item() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool finite() const;
  std::string shape_str() const;

 private:
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

// Plain double-precision primitives shared by the autodiff ops and the
// no-gradient evaluation path, so both produce bit-identical values.
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double sigmoid(double x);
std::vector<double> softmax(std::span<const double> logits);
Tensor matvec(const Tensor& w, const Tensor& x);
Tensor matmul_plain(const Tensor& a, const Tensor& b);

// Guard added to each norm in cosine denominators; keeps zero vectors finite
// without moving results at realistic magnitudes.
inline constexpr double kNormGuard = 1e-12;

}  // namespace mixquant
