#include "shading.hpp"

#include <cmath>
#include <numbers>

#include "parallel.hpp"

namespace trips {
namespace {

constexpr double kC1 = 0.4886025119029199;
constexpr double kC2a = 1.0925484305920792;
constexpr double kC2b = 0.31539156525252005;
constexpr double kC2c = 0.5462742152960396;
constexpr int kRowChunk = 16;

template <typename Real>
Real softplus(Real x) {
  return x > Real(20) ? x : std::log1p(std::exp(x));
}

}  // namespace

template <typename Real>
std::array<Real, kShBasis> sh_basis(const std::array<Real, 3>& d) {
  const Real x = d[0], y = d[1], z = d[2];
  const Real c1 = static_cast<Real>(kC1);
  const Real c2a = static_cast<Real>(kC2a);
  return {static_cast<Real>(kShBand0),
          c1 * y,
          c1 * z,
          c1 * x,
          c2a * x * y,
          c2a * y * z,
          static_cast<Real>(kC2b) * (Real(3) * z * z - Real(1)),
          c2a * x * z,
          static_cast<Real>(kC2c) * (x * x - y * y)};
}

template <typename Real>
std::array<std::array<Real, 3>, kShBasis> sh_basis_jacobian(const std::array<Real, 3>& d) {
  const Real x = d[0], y = d[1], z = d[2];
  const Real c1 = static_cast<Real>(kC1);
  const Real c2a = static_cast<Real>(kC2a);
  const Real c2c = static_cast<Real>(kC2c);
  std::array<std::array<Real, 3>, kShBasis> j{};
  j[1] = {0, c1, 0};
  j[2] = {0, 0, c1};
  j[3] = {c1, 0, 0};
  j[4] = {c2a * y, c2a * x, 0};
  j[5] = {0, c2a * z, c2a * y};
  j[6] = {0, 0, static_cast<Real>(kC2b) * Real(6) * z};
  j[7] = {c2a * z, 0, c2a * x};
  j[8] = {Real(2) * c2c * x, Real(-2) * c2c * y, 0};
  return j;
}

template <typename Real>
std::array<Real, 3> sh_shade(const Real* coeffs, std::size_t stride, const std::array<Real, 3>& dir) {
  const auto y = sh_basis(dir);
  std::array<Real, 3> rgb{0, 0, 0};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < kShBasis; ++i)
      rgb[static_cast<std::size_t>(c)] += coeffs[static_cast<std::size_t>(c * kShBasis + i) * stride] * y[static_cast<std::size_t>(i)];
  return rgb;
}

template <typename Real>
Tensor<Real> sh_shade_image(const Tensor<Real>& coeffs, const Tensor<Real>& dirs) {
  if (coeffs.rank() != 3 || coeffs.dim(0) != kShCoefficients)
    throw ShapeError("sh_shade_image: coefficients must be [27,H,W], got " + shape_string(coeffs.shape()));
  if (dirs.rank() != 3 || dirs.dim(0) != 3 || dirs.dim(1) != coeffs.dim(1) || dirs.dim(2) != coeffs.dim(2))
    throw ShapeError("sh_shade_image: directions must be [3,H,W] matching the coefficients");
  const int h = coeffs.dim(1), w = coeffs.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<Real> rgb({3, h, w});
  parallel_chunks(h, kRowChunk, [&](std::int64_t, std::int64_t r0, std::int64_t r1) {
    for (std::size_t p = static_cast<std::size_t>(r0) * w; p < static_cast<std::size_t>(r1) * w; ++p) {
      const std::array<Real, 3> d{dirs[p], dirs[plane + p], dirs[2 * plane + p]};
      const auto out = sh_shade(coeffs.data() + p, plane, d);
      for (int c = 0; c < 3; ++c) rgb[c * plane + p] = out[static_cast<std::size_t>(c)];
    }
  });
  return rgb;
}

template <typename Real>
void sh_shade_image_backward(const Tensor<Real>& coeffs, const Tensor<Real>& dirs, const Tensor<Real>& grad_rgb,
                             Tensor<Real>* grad_coeffs, Tensor<Real>* grad_dirs) {
  const int h = coeffs.dim(1), w = coeffs.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  parallel_chunks(h, kRowChunk, [&](std::int64_t, std::int64_t r0, std::int64_t r1) {
    for (std::size_t p = static_cast<std::size_t>(r0) * w; p < static_cast<std::size_t>(r1) * w; ++p) {
      const std::array<Real, 3> d{dirs[p], dirs[plane + p], dirs[2 * plane + p]};
      const auto y = sh_basis(d);
      if (grad_coeffs) {
        for (int c = 0; c < 3; ++c)
          for (int i = 0; i < kShBasis; ++i)
            (*grad_coeffs)[(c * kShBasis + i) * plane + p] += grad_rgb[c * plane + p] * y[static_cast<std::size_t>(i)];
      }
      if (grad_dirs) {
        const auto jac = sh_basis_jacobian(d);
        for (int c = 0; c < 3; ++c) {
          const Real g = grad_rgb[c * plane + p];
          for (int i = 1; i < kShBasis; ++i) {
            const Real k = g * coeffs[(c * kShBasis + i) * plane + p];
            for (int a = 0; a < 3; ++a) (*grad_dirs)[a * plane + p] += k * jac[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
          }
        }
      }
    }
  });
}

template <typename Real>
std::array<Real, kResponseKnots> response_knots(const ToneMapParams<Real>& params, int channel) {
  std::array<Real, kResponseKnots> y{};
  const Real* d = params.response.data() + channel * kResponseSegments;
  Real total = 0;
  for (int i = 0; i < kResponseSegments; ++i) total += softplus(d[i]);
  Real acc = 0;
  y[0] = 0;
  for (int i = 0; i < kResponseSegments; ++i) {
    acc += softplus(d[i]);
    y[static_cast<std::size_t>(i + 1)] = acc / total;
  }
  y[kResponseSegments] = 1;
  return y;
}

template <typename Real>
Real apply_response(const std::array<Real, kResponseKnots>& knots, Real u) {
  const Real t = u * Real(kResponseSegments);
  int k = static_cast<int>(std::floor(t));
  k = std::clamp(k, 0, kResponseSegments - 1);
  const Real frac = t - Real(k);
  return knots[static_cast<std::size_t>(k)] + (knots[static_cast<std::size_t>(k + 1)] - knots[static_cast<std::size_t>(k)]) * frac;
}

double SensorMapping::radius2(int i, int j) const {
  const double x = (i + offset_x + 0.5) / zoom - 0.5 - cx;
  const double y = (j + offset_y + 0.5) / zoom - 0.5 - cy;
  return (x * x + y * y) / (half_diagonal * half_diagonal);
}

template <typename Real>
Tensor<Real> radius2_map(const SensorMapping& mapping, int width, int height) {
  Tensor<Real> r({1, height, width});
  for (int j = 0; j < height; ++j)
    for (int i = 0; i < width; ++i) r(0, j, i) = static_cast<Real>(mapping.radius2(i, j));
  return r;
}

template <typename Real>
Tensor<Real> tone_map_image(const Tensor<Real>& hdr, const ToneMapParams<Real>& params, const Tensor<Real>& radius2) {
  if (hdr.rank() != 3 || hdr.dim(0) != 3) throw ShapeError("tone_map_image: hdr must be [3,H,W], got " + shape_string(hdr.shape()));
  if (radius2.dim(1) != hdr.dim(1) || radius2.dim(2) != hdr.dim(2)) throw ShapeError("tone_map_image: radius map size mismatch");
  const int h = hdr.dim(1), w = hdr.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::array<std::array<Real, kResponseKnots>, 3> knots;
  for (int c = 0; c < 3; ++c) knots[static_cast<std::size_t>(c)] = response_knots(params, c);
  const Real scale = std::exp2(params.exposure);
  const std::array<Real, 3> wb{params.wb_red, Real(1), params.wb_blue};
  Tensor<Real> out({3, h, w});
  parallel_chunks(h, kRowChunk, [&](std::int64_t, std::int64_t r0, std::int64_t r1) {
    for (std::size_t p = static_cast<std::size_t>(r0) * w; p < static_cast<std::size_t>(r1) * w; ++p) {
      const Real r2 = radius2[p];
      const Real v = Real(1) + r2 * (params.vignette[0] + r2 * (params.vignette[1] + r2 * params.vignette[2]));
      for (int c = 0; c < 3; ++c) {
        const Real x = hdr[c * plane + p] * scale * wb[static_cast<std::size_t>(c)] * v;
        out[c * plane + p] = apply_response(knots[static_cast<std::size_t>(c)], std::clamp(x, Real(0), Real(1)));
      }
    }
  });
  return out;
}

template <typename Real>
ToneMapGrads<Real> tone_map_backward(const Tensor<Real>& hdr, const ToneMapParams<Real>& params,
                                     const Tensor<Real>& radius2, const Tensor<Real>& grad_out,
                                     Tensor<Real>* grad_hdr) {
  const int h = hdr.dim(1), w = hdr.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::array<std::array<Real, kResponseKnots>, 3> knots;
  for (int c = 0; c < 3; ++c) knots[static_cast<std::size_t>(c)] = response_knots(params, c);
  const Real scale = std::exp2(params.exposure);
  const std::array<Real, 3> wb{params.wb_red, Real(1), params.wb_blue};

  struct Partial {
    Real exposure = 0, wb_red = 0, wb_blue = 0;
    std::array<Real, 3> vignette{0, 0, 0};
    std::array<std::array<Real, kResponseKnots>, 3> knot{};
  };
  std::vector<Partial> partials(static_cast<std::size_t>(chunk_count(h, kRowChunk)));
  parallel_chunks(h, kRowChunk, [&](std::int64_t chunk, std::int64_t r0, std::int64_t r1) {
    Partial& acc = partials[static_cast<std::size_t>(chunk)];
    for (std::size_t p = static_cast<std::size_t>(r0) * w; p < static_cast<std::size_t>(r1) * w; ++p) {
      const Real r2 = radius2[p];
      const Real v = Real(1) + r2 * (params.vignette[0] + r2 * (params.vignette[1] + r2 * params.vignette[2]));
      for (int c = 0; c < 3; ++c) {
        const auto& y = knots[static_cast<std::size_t>(c)];
        const Real g = grad_out[c * plane + p];
        const Real hv = hdr[c * plane + p];
        const Real x = hv * scale * wb[static_cast<std::size_t>(c)] * v;
        const Real u = std::clamp(x, Real(0), Real(1));
        const Real t = u * Real(kResponseSegments);
        const int k = std::clamp(static_cast<int>(std::floor(t)), 0, kResponseSegments - 1);
        const Real frac = t - Real(k);
        acc.knot[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)] += g * (Real(1) - frac);
        acc.knot[static_cast<std::size_t>(c)][static_cast<std::size_t>(k + 1)] += g * frac;
        if (x < Real(0) || x > Real(1)) continue;
        const Real gx = g * (y[static_cast<std::size_t>(k + 1)] - y[static_cast<std::size_t>(k)]) * Real(kResponseSegments);
        acc.exposure += gx * x * std::numbers::ln2_v<Real>;
        if (c == 0) acc.wb_red += gx * hv * scale * v;
        if (c == 2) acc.wb_blue += gx * hv * scale * v;
        const Real base = gx * hv * scale * wb[static_cast<std::size_t>(c)];
        acc.vignette[0] += base * r2;
        acc.vignette[1] += base * r2 * r2;
        acc.vignette[2] += base * r2 * r2 * r2;
        if (grad_hdr) (*grad_hdr)[c * plane + p] += gx * scale * wb[static_cast<std::size_t>(c)] * v;
      }
    }
  });

  ToneMapGrads<Real> out;
  std::array<std::array<Real, kResponseKnots>, 3> gknot{};
  for (const auto& part : partials) {
    out.exposure += part.exposure;
    out.wb_red += part.wb_red;
    out.wb_blue += part.wb_blue;
    for (int a = 0; a < 3; ++a) out.vignette[static_cast<std::size_t>(a)] += part.vignette[static_cast<std::size_t>(a)];
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < kResponseKnots; ++k)
        gknot[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)] += part.knot[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
  }
  // y_j = S_j / S with S_j = sum_{i<j} softplus(d_i); y_0 and y_31 are fixed.
  for (int c = 0; c < 3; ++c) {
    const Real* d = params.response.data() + c * kResponseSegments;
    const auto& y = knots[static_cast<std::size_t>(c)];
    const auto& gy = gknot[static_cast<std::size_t>(c)];
    Real total = 0;
    for (int i = 0; i < kResponseSegments; ++i) total += softplus(d[i]);
    Real weighted = 0;
    for (int j = 1; j < kResponseSegments; ++j) weighted += gy[static_cast<std::size_t>(j)] * y[static_cast<std::size_t>(j)];
    // suffix[i] = sum_{j > i, j < 31} gy_j
    Real suffix = 0;
    for (int i = kResponseSegments - 1; i >= 0; --i) {
      if (i + 1 < kResponseSegments) suffix += gy[static_cast<std::size_t>(i + 1)];
      out.response[static_cast<std::size_t>(c * kResponseSegments + i)] = (Real(1) / (Real(1) + std::exp(-d[i]))) / total * (suffix - weighted);
    }
  }
  return out;
}

#define TRIPS_INSTANTIATE(Real)                                                                                   \
  template std::array<Real, kShBasis> sh_basis(const std::array<Real, 3>&);                                     \
  template std::array<std::array<Real, 3>, kShBasis> sh_basis_jacobian(const std::array<Real, 3>&);             \
  template std::array<Real, 3> sh_shade(const Real*, std::size_t, const std::array<Real, 3>&);                  \
  template Tensor<Real> sh_shade_image(const Tensor<Real>&, const Tensor<Real>&);                               \
  template void sh_shade_image_backward(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&,          \
                                        Tensor<Real>*, Tensor<Real>*);                                          \
  template std::array<Real, kResponseKnots> response_knots(const ToneMapParams<Real>&, int);                    \
  template Real apply_response(const std::array<Real, kResponseKnots>&, Real);                                  \
  template Tensor<Real> radius2_map(const SensorMapping&, int, int);                                            \
  template Tensor<Real> tone_map_image(const Tensor<Real>&, const ToneMapParams<Real>&, const Tensor<Real>&);   \
  template ToneMapGrads<Real> tone_map_backward(const Tensor<Real>&, const ToneMapParams<Real>&,                \
                                                const Tensor<Real>&, const Tensor<Real>&, Tensor<Real>*);

TRIPS_INSTANTIATE(float)
TRIPS_INSTANTIATE(double)
#undef TRIPS_INSTANTIATE

}  // namespace trips
