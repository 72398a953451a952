#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trips {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array of Real. Image tensors are laid out [C][H][W].
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, Real fill = Real(0)) : shape_(std::move(shape)) {
    for (int extent : shape_) {
      if (extent <= 0) throw ShapeError("tensor extents must be positive");
    }
    data_.assign(element_count(shape_), fill);
  }

  static std::size_t element_count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  const Real& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-3 image access.
  Real& operator()(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  const Real& operator()(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return out;
  }

 private:
  std::vector<int> shape_;
  std::vector<Real> data_;
};

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
  for (Real v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_string(const std::vector<int>& shape);

template <typename Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

template <typename Real>
inline Real elu(Real x) {
  return x > Real(0) ? x : std::expm1(x);
}

template <typename Real>
inline Real elu_grad(Real x) {
  return x > Real(0) ? Real(1) : std::exp(x);
}

// Same-size cross-correlation with zero padding (k-1)/2.
// input [C_in,H,W], kernel [C_out,C_in,k,k], bias [C_out].
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias);

// Accumulates into whichever gradient outputs are non-null; each must already
// have the shape of its primal.
template <typename Real>
void conv2d_backward(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& grad_out,
                     Tensor<Real>* grad_input, Tensor<Real>* grad_kernel, Tensor<Real>* grad_bias);

// Bilinear 2x upsampling; output pixel i samples the input at (i + 0.5) / 2 - 0.5,
// clamped to the border. The output is cropped to out_h x out_w (<= 2H x 2W).
template <typename Real>
Tensor<Real> upsample2x(const Tensor<Real>& input, int out_h, int out_w);

template <typename Real>
Tensor<Real> upsample2x(const Tensor<Real>& input) {
  return upsample2x(input, 2 * input.dim(1), 2 * input.dim(2));
}

// Adjoint of upsample2x for an input of size in_h x in_w.
template <typename Real>
Tensor<Real> upsample2x_backward(const Tensor<Real>& grad_out, int in_h, int in_w);

template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> slice_channels(const Tensor<Real>& t, int begin, int count);

}  // namespace trips
