#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "decoder.hpp"
#include "params.hpp"
#include "raster.hpp"
#include "scene.hpp"
#include "shading.hpp"

namespace trips {

struct ModelConfig {
  int layers = 4;
  int features = 4;
  bool sh = true;
  EnvMode env_mode = EnvMode::Constant;
  int env_height = 16;
  double near = 0.01;
  std::uint64_t seed = 1;
};

// Base learning rates per parameter group; position is multiplied by the
// scene extent when the model is created.
struct LearningRates {
  double network = 1e-3;
  double tonemap = 1e-3;
  double descriptor = 5e-3;
  double opacity = 1e-3;
  double size = 1e-3;
  double position = 1e-4;
  double pose = 1e-5;
  double environment = 5e-3;
  double exposure = 1e-3;
};

namespace names {
inline constexpr const char* kPosition = "points.position";
inline constexpr const char* kLogSize = "points.log_size";
inline constexpr const char* kOpacity = "points.opacity_logit";
inline constexpr const char* kDescriptor = "points.descriptor";
inline constexpr const char* kEnvironment = "env.features";
inline constexpr const char* kResponse = "tonemap.response";
inline constexpr const char* kVignette = "tonemap.vignette";
std::string camera_pose(int i);
std::string camera_exposure(int i);
std::string camera_white_balance(int i);
}  // namespace names

template <typename Real>
struct Model {
  ModelConfig config;
  std::vector<Camera> cameras;  // base intrinsics and poses; capture parameters live in the store
  ParameterStore<Real> store;
  double extent = 1;
  int epoch = 0;

  static Model create(const PointCloud& cloud, const std::vector<Camera>& cameras, const ModelConfig& config,
                      const LearningRates& rates = {});

  DecoderConfig decoder() const;
  std::size_t point_count() const { return store.value(names::kLogSize).size(); }
  PointCloud point_cloud() const;
  RasterInputs<Real> raster_inputs() const;
  ToneMapParams<Real> tone_map_params(int camera) const;
  std::array<double, 6> pose_tangent(int camera) const;

  // Composes every camera's pose tangent onto its stored pose and zeroes it.
  void apply_pose_tangents();

  template <typename Other>
  Model<Other> cast() const {
    Model<Other> out;
    out.config = config;
    out.cameras = cameras;
    out.store = store.template cast<Other>();
    out.extent = extent;
    out.epoch = epoch;
    return out;
  }
};

// What to render: a viewport with its own intrinsics, a pose, the camera
// whose capture parameters apply (-1 = neutral), and where the viewport sits
// on that camera's sensor.
struct RenderView {
  Intrinsics intrinsics;
  Pose pose;
  int camera = -1;
  SensorMapping sensor;
};

SensorMapping full_sensor(const Intrinsics& k);
RenderView camera_view(const std::vector<Camera>& cameras, int camera);

// Scales camera `camera` by `zoom` and crops a vw x vh viewport whose top-left
// corner sits at (ox, oy) in zoomed pixels.
RenderView zoomed_view(const std::vector<Camera>& cameras, int camera, double zoom, double ox, double oy, int vw,
                       int vh);

struct RenderTimings {
  RasterTimings raster_stages;
  double raster_ms = 0;
  double network_ms = 0;
  double tonemap_ms = 0;

  RenderTimings& operator+=(const RenderTimings& o);
};

template <typename Real>
struct RenderCache {
  RenderView view;
  RasterSaved<Real> raster;
  DecoderCache<Real> decoder;
  Tensor<Real> decoded;  // 27 or 3 channels
  Tensor<Real> dirs;     // world-space view directions (SH only)
  Tensor<Real> hdr;
  Tensor<Real> radius2;
  ToneMapParams<Real> tone;
};

// rasterize -> decode -> SH -> tone map. Returns [3,H,W] in [0,1].
template <typename Real>
Tensor<Real> render(const Model<Real>& model, const RenderView& view, RenderCache<Real>* cache = nullptr,
                    RenderTimings* timings = nullptr);

// Accumulates d(loss)/d(parameters) into model.store grads. Work for groups
// that are all disabled is skipped.
template <typename Real>
void render_backward(Model<Real>& model, const RenderCache<Real>& cache, const Tensor<Real>& grad_image,
                     RenderTimings* timings = nullptr);

// Hash of the discrete state of a render: rasterizer decisions plus the
// tone-map clamp pattern.
template <typename Real>
std::uint64_t render_signature(const Model<Real>& model, const RenderView& view);

// Per-pixel world-space unit view directions of a viewport, [3,H,W].
template <typename Real>
Tensor<Real> view_directions(const ViewCamera<Real>& camera);

}  // namespace trips
