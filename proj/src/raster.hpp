#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "scene.hpp"
#include "tensor.hpp"

namespace trips {

inline constexpr int kMaxListLength = 16;
inline constexpr int kMaxLayers = 8;
inline constexpr double kSmallPointFloor = 0.25;  // minimum layer weight of sub-pixel points

struct RasterConfig {
  int layers = 4;
  double near = 0.01;
};

// Camera in compute precision, with an optional pose tangent already applied.
template <typename Real>
struct ViewCamera {
  std::array<Real, 9> rotation{};  // row-major, world -> view
  std::array<Real, 3> translation{};
  Real fx = 1, fy = 1, cx = 0, cy = 0;
  Real focal = 1;
  int width = 8;
  int height = 8;

  static ViewCamera make(const Intrinsics& k, const Pose& pose, const std::array<double, 6>& tangent = {});

  std::array<Real, 3> to_view(const Real* world) const;
  // Unit ray through continuous layer-0 pixel coordinate (x, y), view space.
  std::array<Real, 3> view_ray(Real x, Real y) const;
  std::array<Real, 3> view_to_world_dir(const std::array<Real, 3>& d) const;
  std::array<Real, 3> world_to_view_dir(const std::array<Real, 3>& d) const;
};

template <typename Real>
struct ProjectedPoint {
  Real x = 0, y = 0;  // continuous pixel coordinates at layer 0
  Real z = 0;         // view-space depth
  Real s = 0;         // screen-space size in pixels
  std::array<Real, 3> view{};
  int index = -1;
};

template <typename Real>
struct LayerSelection {
  int count = 1;
  std::array<int, 2> layer{0, 0};
  std::array<Real, 2> iota{1, 0};
  std::array<Real, 2> diota_ds{0, 0};
};

template <typename Real>
struct Fragment {
  Real depth = 0;
  Real gamma = 0;
  Real beta = 0;
  Real iota = 0;
  int point = -1;
  int layer = 0;
  int px = 0, py = 0;
};

template <typename Real>
struct FragmentSet {
  std::array<Fragment<Real>, 8> items{};
  int count = 0;
};

struct PyramidGeometry {
  int layers = 0;
  int width = 0, height = 0;
  std::array<int, kMaxLayers> w{}, h{};
  std::array<std::int64_t, kMaxLayers + 1> offset{};

  static PyramidGeometry make(int width, int height, int layers);
  std::int64_t pixel_count() const { return offset[static_cast<std::size_t>(layers)]; }
  std::int64_t pixel_index(int layer, int x, int y) const {
    return offset[static_cast<std::size_t>(layer)] + static_cast<std::int64_t>(y) * w[static_cast<std::size_t>(layer)] + x;
  }
  bool inside(int layer, int x, int y) const {
    return x >= 0 && y >= 0 && x < w[static_cast<std::size_t>(layer)] && y < h[static_cast<std::size_t>(layer)];
  }
  int layer_of(std::int64_t pixel) const;
};

// n layers of (F + 1) channels: blended features then accumulated opacity.
template <typename Real>
struct ImagePyramid {
  PyramidGeometry geometry;
  int features = 0;
  std::vector<Tensor<Real>> layers;

  static ImagePyramid zeros(const PyramidGeometry& g, int features);
};

template <typename Real>
struct RasterInputs {
  std::span<const Real> positions;       // N x 3
  std::span<const Real> log_sizes;       // N
  std::span<const Real> opacity_logits;  // N
  std::span<const Real> descriptors;     // N x F
  int features = 4;
  EnvMode env_mode = EnvMode::Constant;
  std::span<const Real> environment;  // F, or F x He x 2He
  int env_height = 0;

  std::size_t point_count() const { return log_sizes.size(); }
};

struct RasterTimings {
  double count_alloc_ms = 0;
  double splat_ms = 0;
  double sort_blend_ms = 0;
  double total() const { return count_alloc_ms + splat_ms + sort_blend_ms; }
};

struct RasterStats {
  std::int64_t fragments = 0;      // in-bounds fragments written
  std::int64_t visible_points = 0;
  std::int64_t kept = 0;           // fragments surviving the per-pixel cap
  std::int64_t nonempty_pixels = 0;
  std::int64_t truncated_pixels = 0;
  int max_fragments_per_point = 0;
};

template <typename Real>
struct PointRecord {
  ProjectedPoint<Real> projected;
  LayerSelection<Real> selection;
  Real alpha = 0;
  bool visible = false;
};

// Everything rasterize_backward needs: per-point projections and the sorted,
// capped per-pixel lists.
template <typename Real>
struct RasterSaved {
  RasterConfig config;
  ViewCamera<Real> camera;
  PyramidGeometry geometry;
  int features = 0;
  std::size_t point_count = 0;
  std::vector<PointRecord<Real>> records;
  std::vector<std::uint8_t> list_length;  // per pixel, <= 16
  std::vector<int> list_point;            // pixel * 16 + m
  std::vector<Real> list_depth;
  std::vector<Real> list_gamma;
  RasterTimings timings;
  RasterStats stats;
};

template <typename Real>
struct RasterGrads {
  std::vector<Real> positions;
  std::vector<Real> log_sizes;
  std::vector<Real> opacity_logits;
  std::vector<Real> descriptors;
  std::vector<Real> environment;
  std::array<Real, 6> pose{};  // (rotation, translation) tangent at zero
};

template <typename Real>
std::optional<ProjectedPoint<Real>> project_point(const ViewCamera<Real>& camera, const Real* world, Real near);

template <typename Real>
inline Real screen_size(Real focal, Real world_size, Real z) {
  return focal * world_size / z;
}

template <typename Real>
LayerSelection<Real> select_layers(Real s, int layers);

// Bilinear node weight of continuous layer coordinate `c` at integer pixel `p`.
template <typename Real>
inline Real bilinear_weight(Real c, int p) {
  return Real(1) - std::abs(c - static_cast<Real>(p));
}

template <typename Real>
inline Real fragment_gamma(Real beta, Real iota, Real alpha) {
  return beta * iota * alpha;
}

template <typename Real>
inline Real layer_coordinate(Real c, int layer) {
  return std::ldexp(c, -layer);
}

// True if the 2x2 footprint in the coarser selected layer touches the image.
template <typename Real>
bool footprint_visible(const ProjectedPoint<Real>& p, const LayerSelection<Real>& sel, const PyramidGeometry& g);

// Up to 8 fragments (2x2 per selected layer). Out-of-bounds pixels are dropped
// unless keep_out_of_bounds is set.
template <typename Real>
FragmentSet<Real> splat_point(const ProjectedPoint<Real>& p, Real alpha, const LayerSelection<Real>& sel,
                              const PyramidGeometry& g, bool keep_out_of_bounds = false);

// Front-to-back compositing of a depth-sorted list. `out` receives F blended
// features followed by the accumulated opacity.
template <typename Real>
void blend_pixel(std::span<const Real> gammas, std::span<const int> points, std::span<const Real> descriptors,
                 int features, const Real* background, Real* out);

// Background features for a pixel of `layer` at integer layer coordinates.
template <typename Real>
void sample_background(const RasterInputs<Real>& in, const ViewCamera<Real>& camera, int layer, int px, int py,
                       Real* out);

template <typename Real>
ImagePyramid<Real> rasterize_forward(const RasterInputs<Real>& in, const ViewCamera<Real>& camera,
                                     const RasterConfig& config, std::type_identity_t<RasterSaved<Real>>* saved);

template <typename Real>
RasterGrads<Real> rasterize_backward(const RasterInputs<Real>& in, const RasterSaved<Real>& saved,
                                     const ImagePyramid<Real>& grad);

// Hash of every discrete decision of a forward pass (layer choice, footprint
// pixels, list membership and order, background texels). Two parameter values
// with equal signatures lie on the same smooth piece of the render function.
template <typename Real>
std::uint64_t raster_signature(const RasterInputs<Real>& in, const RasterSaved<Real>& saved);

}  // namespace trips
