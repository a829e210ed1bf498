#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace selattn {

/// Dense row-major double tensor. Only what the layers need: a shape, flat
/// storage, and elementwise helpers.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Std of the reference N(0, std^2) weight initialization.
inline constexpr double kReferenceInitStd = 0.01;

/// Fixed forward multiplier for rectified hidden layers. With weights drawn
/// at the reference std it gives the layer He-scaled pre-activations, so
/// activations neither vanish nor explode through the stack.
inline double hidden_gain(std::size_t fan_in) {
  return std::sqrt(2.0 / static_cast<double>(fan_in)) / kReferenceInitStd;
}

/// Parameter groups expose their tensors through `visit(f)` where
/// `f(std::string_view name, Tensor&)`; this concept lets the optimizer,
/// initializer, checkpoint writer and gradient checks stay generic.
template <class P>
concept ParamGroup = requires(P& p) {
  p.visit([](auto, Tensor&) {});
};

/// Same-shaped zero tensors for every tensor in `p`.
template <ParamGroup P>
P zeros_like(const P& p) {
  P out = p;
  out.visit([](auto, Tensor& t) { t.fill(0.0); });
  return out;
}

/// Walk two parameter groups of the same type in lockstep.
template <ParamGroup P, class F>
void visit_pair(P& a, P& b, F&& f) {
  std::vector<Tensor*> bs;
  b.visit([&](auto, Tensor& t) { bs.push_back(&t); });
  std::size_t i = 0;
  a.visit([&](auto name, Tensor& t) { f(name, t, *bs.at(i++)); });
}

}  // namespace selattn
