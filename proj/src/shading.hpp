#pragma once

#include <array>
#include <vector>

#include "tensor.hpp"

namespace trips {

inline constexpr int kShBasis = 9;
inline constexpr int kShCoefficients = 27;
inline constexpr double kShBand0 = 0.28209479177387814;  // 1 / (2 sqrt(pi))

// Real spherical-harmonics basis up to degree 2 at a unit direction.
template <typename Real>
std::array<Real, kShBasis> sh_basis(const std::array<Real, 3>& d);

// Row i holds dY_i / d(x, y, z).
template <typename Real>
std::array<std::array<Real, 3>, kShBasis> sh_basis_jacobian(const std::array<Real, 3>& d);

// coeffs[c * 9 + i] is the i-th coefficient of colour channel c.
template <typename Real>
std::array<Real, 3> sh_shade(const Real* coeffs, std::size_t stride, const std::array<Real, 3>& dir);

// coeffs [27,H,W], dirs [3,H,W] (unit, world space) -> rgb [3,H,W].
template <typename Real>
Tensor<Real> sh_shade_image(const Tensor<Real>& coeffs, const Tensor<Real>& dirs);

template <typename Real>
void sh_shade_image_backward(const Tensor<Real>& coeffs, const Tensor<Real>& dirs, const Tensor<Real>& grad_rgb,
                             Tensor<Real>* grad_coeffs, Tensor<Real>* grad_dirs);

inline constexpr int kResponseKnots = 32;
inline constexpr int kResponseSegments = kResponseKnots - 1;

// Exposure and white balance are per image; the response curve and the
// vignette are shared by all images.
template <typename Real>
struct ToneMapParams {
  Real exposure = 0;  // EV
  Real wb_red = 1;
  Real wb_blue = 1;
  std::array<Real, 3> vignette{0, 0, 0};  // a1 r^2 + a2 r^4 + a3 r^6
  // Pre-softplus segment lengths of the per-channel response, 3 x 31.
  // Equal values give the identity response.
  std::vector<Real> response = std::vector<Real>(3 * kResponseSegments, Real(0));
};

template <typename Real>
struct ToneMapGrads {
  Real exposure = 0;
  Real wb_red = 0;
  Real wb_blue = 0;
  std::array<Real, 3> vignette{0, 0, 0};
  std::vector<Real> response = std::vector<Real>(3 * kResponseSegments, Real(0));
};

// Knot values y_0..y_31 of channel c: y_0 = 0, y_31 = 1, strictly increasing.
template <typename Real>
std::array<Real, kResponseKnots> response_knots(const ToneMapParams<Real>& params, int channel);

template <typename Real>
Real apply_response(const std::array<Real, kResponseKnots>& knots, Real u);

// Maps viewport pixels back to the original sensor so that vignetting stays
// attached to the sensor under zoom and crop.
struct SensorMapping {
  double zoom = 1;
  double offset_x = 0;
  double offset_y = 0;
  double cx = 0;
  double cy = 0;
  double half_diagonal = 1;

  // Squared normalized radius of viewport pixel (i, j).
  double radius2(int i, int j) const;
};

template <typename Real>
Tensor<Real> radius2_map(const SensorMapping& mapping, int width, int height);

// hdr [3,H,W] -> ldr [3,H,W]
// out_c = response_c(clamp(hdr_c * 2^EV * wb_c * vignette(r), 0, 1))
template <typename Real>
Tensor<Real> tone_map_image(const Tensor<Real>& hdr, const ToneMapParams<Real>& params, const Tensor<Real>& radius2);

template <typename Real>
ToneMapGrads<Real> tone_map_backward(const Tensor<Real>& hdr, const ToneMapParams<Real>& params,
                                     const Tensor<Real>& radius2, const Tensor<Real>& grad_out,
                                     Tensor<Real>* grad_hdr);

}  // namespace trips
