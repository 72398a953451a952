#include "tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <sstream>

#include "parallel.hpp"

namespace trips {
namespace {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using StridedMap = Eigen::Map<RowMatrix<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using ConstStridedMap = Eigen::Map<const RowMatrix<Real>, 0, Eigen::OuterStride<>>;

// Row bands are the unit of parallel work for convolutions. The band height
// is fixed so GEMM shapes (and therefore rounding) never depend on threads.
constexpr int kBandRows = 16;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename Real>
void check_conv_shapes(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias) {
  require(input.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_string(input.shape()));
  require(kernel.rank() == 4, "conv2d: kernel must be [C_out,C_in,k,k], got " + shape_string(kernel.shape()));
  require(kernel.dim(1) == input.dim(0), "conv2d: axis 1 (C_in) of kernel is " + std::to_string(kernel.dim(1)) +
                                             " but input has " + std::to_string(input.dim(0)) + " channels");
  require(kernel.dim(2) == kernel.dim(3), "conv2d: kernel axes 2 and 3 differ");
  require(kernel.dim(2) % 2 == 1, "conv2d: kernel size (axis 2) must be odd");
  require(bias.rank() == 1 && bias.dim(0) == kernel.dim(0),
          "conv2d: bias axis 0 must equal kernel axis 0 (C_out = " + std::to_string(kernel.dim(0)) + ")");
}

template <typename Real>
void im2col_band(const Real* in, int channels, int height, int width, int k, int r0, int r1, Real* col) {
  const int pad = k / 2;
  const int rows = r1 - r0;
  const std::size_t band = static_cast<std::size_t>(rows) * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Real* dst = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * band;
        for (int y = r0; y < r1; ++y) {
          const int sy = y + ky - pad;
          Real* row = dst + static_cast<std::size_t>(y - r0) * width;
          if (sy < 0 || sy >= height) {
            std::fill(row, row + width, Real(0));
            continue;
          }
          const Real* src = in + (static_cast<std::size_t>(c) * height + sy) * width;
          const int shift = kx - pad;
          for (int x = 0; x < width; ++x) {
            const int sx = x + shift;
            row[x] = (sx >= 0 && sx < width) ? src[sx] : Real(0);
          }
        }
      }
    }
  }
}

// out[C_out, H, W] = kernel (*) input, without bias.
template <typename Real>
void conv_core(const Tensor<Real>& input, const Real* kernel, int out_channels, int k, Real* out) {
  const int channels = input.dim(0);
  const int height = input.dim(1);
  const int width = input.dim(2);
  const int taps = channels * k * k;
  const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
  Eigen::Map<const RowMatrix<Real>> weights(kernel, out_channels, taps);

  parallel_chunks(height, kBandRows, [&](std::int64_t, std::int64_t r0, std::int64_t r1) {
    const Eigen::Index pixels = static_cast<Eigen::Index>(r1 - r0) * width;
    StridedMap<Real> out_band(out + r0 * width, out_channels, pixels, Eigen::OuterStride<>(plane));
    if (k == 1) {
      ConstStridedMap<Real> in_band(input.data() + r0 * width, channels, pixels, Eigen::OuterStride<>(plane));
      out_band.noalias() = weights * in_band;
      return;
    }
    std::vector<Real> col(static_cast<std::size_t>(taps) * pixels);
    im2col_band(input.data(), channels, height, width, k, static_cast<int>(r0), static_cast<int>(r1), col.data());
    Eigen::Map<const RowMatrix<Real>> col_map(col.data(), taps, pixels);
    out_band.noalias() = weights * col_map;
  });
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias) {
  check_conv_shapes(input, kernel, bias);
  const int out_channels = kernel.dim(0);
  const int height = input.dim(1);
  const int width = input.dim(2);
  Tensor<Real> out({out_channels, height, width});
  conv_core(input, kernel.data(), out_channels, kernel.dim(2), out.data());
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  parallel_for(out_channels, [&](std::int64_t c) {
    Real* dst = out.data() + c * plane;
    const Real b = bias[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) dst[i] += b;
  });
  return out;
}

template <typename Real>
void conv2d_backward(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& grad_out,
                     Tensor<Real>* grad_input, Tensor<Real>* grad_kernel, Tensor<Real>* grad_bias) {
  const int out_channels = kernel.dim(0);
  const int channels = input.dim(0);
  const int height = input.dim(1);
  const int width = input.dim(2);
  const int k = kernel.dim(2);
  const int taps = channels * k * k;
  require(grad_out.rank() == 3 && grad_out.dim(0) == out_channels && grad_out.dim(1) == height &&
              grad_out.dim(2) == width,
          "conv2d_backward: grad_out " + shape_string(grad_out.shape()) + " does not match output shape");
  const std::size_t plane = static_cast<std::size_t>(height) * width;

  if (grad_bias) {
    require(grad_bias->size() == static_cast<std::size_t>(out_channels), "conv2d_backward: grad_bias shape");
    for (int c = 0; c < out_channels; ++c) {
      const Real* g = grad_out.data() + c * plane;
      Real sum = 0;
      for (std::size_t i = 0; i < plane; ++i) sum += g[i];
      (*grad_bias)[static_cast<std::size_t>(c)] += sum;
    }
  }

  if (grad_kernel) {
    require(grad_kernel->same_shape(kernel), "conv2d_backward: grad_kernel shape");
    const std::int64_t bands = chunk_count(height, kBandRows);
    std::vector<RowMatrix<Real>> partial(static_cast<std::size_t>(bands));
    parallel_chunks(height, kBandRows, [&](std::int64_t band, std::int64_t r0, std::int64_t r1) {
      const Eigen::Index pixels = static_cast<Eigen::Index>(r1 - r0) * width;
      ConstStridedMap<Real> g(grad_out.data() + r0 * width, out_channels, pixels,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
      RowMatrix<Real>& acc = partial[static_cast<std::size_t>(band)];
      if (k == 1) {
        ConstStridedMap<Real> in_band(input.data() + r0 * width, channels, pixels,
                                      Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
        acc.noalias() = g * in_band.transpose();
        return;
      }
      std::vector<Real> col(static_cast<std::size_t>(taps) * pixels);
      im2col_band(input.data(), channels, height, width, k, static_cast<int>(r0), static_cast<int>(r1), col.data());
      Eigen::Map<const RowMatrix<Real>> col_map(col.data(), taps, pixels);
      acc.noalias() = g * col_map.transpose();
    });
    Eigen::Map<RowMatrix<Real>> dk(grad_kernel->data(), out_channels, taps);
    for (const auto& p : partial) dk += p;
  }

  if (grad_input) {
    require(grad_input->same_shape(input), "conv2d_backward: grad_input shape");
    // Adjoint of a stride-1 same-padded correlation is the correlation of the
    // output gradient with the spatially flipped, channel-transposed kernel.
    std::vector<Real> flipped(static_cast<std::size_t>(channels) * out_channels * k * k);
    for (int co = 0; co < out_channels; ++co)
      for (int ci = 0; ci < channels; ++ci)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            flipped[((static_cast<std::size_t>(ci) * out_channels + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                kernel[((static_cast<std::size_t>(co) * channels + ci) * k + ky) * k + kx];
    Tensor<Real> gin({channels, height, width});
    conv_core(grad_out, flipped.data(), channels, k, gin.data());
    Real* dst = grad_input->data();
    for (std::size_t i = 0; i < gin.size(); ++i) dst[i] += gin[i];
  }
}

namespace {

struct Tap {
  int i0, i1;
  double w;
};

inline Tap upsample_tap(int i, int n) {
  double s = (i + 0.5) / 2.0 - 0.5;
  if (s < 0) s = 0;
  int i0 = static_cast<int>(s);
  if (i0 > n - 1) i0 = n - 1;
  const int i1 = std::min(i0 + 1, n - 1);
  return {i0, i1, s - i0};
}

}  // namespace

template <typename Real>
Tensor<Real> upsample2x(const Tensor<Real>& input, int out_h, int out_w) {
  require(input.rank() == 3, "upsample2x: input must be [C,H,W], got " + shape_string(input.shape()));
  const int channels = input.dim(0);
  const int height = input.dim(1);
  const int width = input.dim(2);
  require(out_h >= 1 && out_h <= 2 * height, "upsample2x: output height (axis 1) out of range");
  require(out_w >= 1 && out_w <= 2 * width, "upsample2x: output width (axis 2) out of range");
  Tensor<Real> out({channels, out_h, out_w});
  std::vector<Tap> xs(static_cast<std::size_t>(out_w)), ys(static_cast<std::size_t>(out_h));
  for (int x = 0; x < out_w; ++x) xs[static_cast<std::size_t>(x)] = upsample_tap(x, width);
  for (int y = 0; y < out_h; ++y) ys[static_cast<std::size_t>(y)] = upsample_tap(y, height);
  parallel_for(channels, [&](std::int64_t c) {
    const int ch = static_cast<int>(c);
    for (int y = 0; y < out_h; ++y) {
      const Tap ty = ys[static_cast<std::size_t>(y)];
      const Real wy = static_cast<Real>(ty.w);
      for (int x = 0; x < out_w; ++x) {
        const Tap tx = xs[static_cast<std::size_t>(x)];
        const Real wx = static_cast<Real>(tx.w);
        const Real top = (Real(1) - wx) * input(ch, ty.i0, tx.i0) + wx * input(ch, ty.i0, tx.i1);
        const Real bottom = (Real(1) - wx) * input(ch, ty.i1, tx.i0) + wx * input(ch, ty.i1, tx.i1);
        out(ch, y, x) = (Real(1) - wy) * top + wy * bottom;
      }
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> upsample2x_backward(const Tensor<Real>& grad_out, int in_h, int in_w) {
  require(grad_out.rank() == 3, "upsample2x_backward: grad must be [C,H,W]");
  const int channels = grad_out.dim(0);
  const int out_h = grad_out.dim(1);
  const int out_w = grad_out.dim(2);
  require(out_h <= 2 * in_h && out_w <= 2 * in_w, "upsample2x_backward: gradient larger than 2x input");
  Tensor<Real> grad_in({channels, in_h, in_w});
  parallel_for(channels, [&](std::int64_t c) {
    const int ch = static_cast<int>(c);
    for (int y = 0; y < out_h; ++y) {
      const Tap ty = upsample_tap(y, in_h);
      const Real wy = static_cast<Real>(ty.w);
      for (int x = 0; x < out_w; ++x) {
        const Tap tx = upsample_tap(x, in_w);
        const Real wx = static_cast<Real>(tx.w);
        const Real g = grad_out(ch, y, x);
        grad_in(ch, ty.i0, tx.i0) += (Real(1) - wy) * (Real(1) - wx) * g;
        grad_in(ch, ty.i0, tx.i1) += (Real(1) - wy) * wx * g;
        grad_in(ch, ty.i1, tx.i0) += wy * (Real(1) - wx) * g;
        grad_in(ch, ty.i1, tx.i1) += wy * wx * g;
      }
    }
  });
  return grad_in;
}

template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.rank() == 3 && b.rank() == 3, "concat_channels: inputs must be [C,H,W]");
  require(a.dim(1) == b.dim(1), "concat_channels: axis 1 (height) differs");
  require(a.dim(2) == b.dim(2), "concat_channels: axis 2 (width) differs");
  Tensor<Real> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

template <typename Real>
Tensor<Real> slice_channels(const Tensor<Real>& t, int begin, int count) {
  require(t.rank() == 3 && begin >= 0 && count > 0 && begin + count <= t.dim(0),
          "slice_channels: channel range out of bounds (axis 0)");
  Tensor<Real> out({count, t.dim(1), t.dim(2)});
  const std::size_t plane = static_cast<std::size_t>(t.dim(1)) * t.dim(2);
  std::copy(t.data() + begin * plane, t.data() + (begin + count) * plane, out.data());
  return out;
}

#define TRIPS_INSTANTIATE(Real)                                                                                   \
  template Tensor<Real> conv2d(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);                   \
  template void conv2d_backward(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, Tensor<Real>*,    \
                                Tensor<Real>*, Tensor<Real>*);                                                   \
  template Tensor<Real> upsample2x(const Tensor<Real>&, int, int);                                               \
  template Tensor<Real> upsample2x_backward(const Tensor<Real>&, int, int);                                      \
  template Tensor<Real> concat_channels(const Tensor<Real>&, const Tensor<Real>&);                               \
  template Tensor<Real> slice_channels(const Tensor<Real>&, int, int);

TRIPS_INSTANTIATE(float)
TRIPS_INSTANTIATE(double)
#undef TRIPS_INSTANTIATE

}  // namespace trips
