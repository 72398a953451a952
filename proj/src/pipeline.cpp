#include "pipeline.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include "parallel.hpp"

namespace trips {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

template <typename Real>
void accumulate(Tensor<Real>& dst, const std::vector<Real>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

namespace names {
std::string camera_pose(int i) { return "camera." + std::to_string(i) + ".pose"; }
std::string camera_exposure(int i) { return "camera." + std::to_string(i) + ".exposure"; }
std::string camera_white_balance(int i) { return "camera." + std::to_string(i) + ".white_balance"; }
}  // namespace names

RenderTimings& RenderTimings::operator+=(const RenderTimings& o) {
  raster_stages.count_alloc_ms += o.raster_stages.count_alloc_ms;
  raster_stages.splat_ms += o.raster_stages.splat_ms;
  raster_stages.sort_blend_ms += o.raster_stages.sort_blend_ms;
  raster_ms += o.raster_ms;
  network_ms += o.network_ms;
  tonemap_ms += o.tonemap_ms;
  return *this;
}

template <typename Real>
Model<Real> Model<Real>::create(const PointCloud& cloud, const std::vector<Camera>& cameras,
                                const ModelConfig& config, const LearningRates& rates) {
  cloud.check_consistent();
  if (cloud.size() == 0) throw DataError("cannot build a model from an empty point cloud");
  if (cloud.features != config.features) {
    throw DataError("point cloud has " + std::to_string(cloud.features) + " descriptor channels, model expects " +
                    std::to_string(config.features));
  }
  if (config.layers < 3 || config.layers > kMaxLayers) throw std::invalid_argument("layer count must lie in [3, 8]");
  Model m;
  m.config = config;
  m.cameras = cameras;
  m.extent = std::max(scene_extent(cloud.positions), 1e-6);
  const int n = static_cast<int>(cloud.size());
  const int f = config.features;
  auto from = [](const std::vector<float>& v, std::vector<int> shape) {
    Tensor<Real> t(std::move(shape));
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<Real>(v[i]);
    return t;
  };
  m.store.add(names::kPosition, "position", from(cloud.positions, {n, 3}), rates.position * m.extent);
  m.store.add(names::kLogSize, "size", from(cloud.log_sizes, {n}), rates.size);
  m.store.add(names::kOpacity, "opacity", from(cloud.opacity_logits, {n}), rates.opacity);
  m.store.add(names::kDescriptor, "descriptor", from(cloud.descriptors, {n, f}), rates.descriptor);
  if (config.env_mode == EnvMode::Constant) {
    m.store.add(names::kEnvironment, "environment", Tensor<Real>({f}), rates.environment);
  } else {
    m.store.add(names::kEnvironment, "environment", Tensor<Real>({f, config.env_height, 2 * config.env_height}),
                rates.environment);
  }
  std::mt19937_64 rng(config.seed);
  add_decoder_parameters(m.store, m.decoder(), rng, rates.network);
  m.store.add(names::kResponse, "tonemap", Tensor<Real>({3, kResponseSegments}), rates.tonemap);
  m.store.add(names::kVignette, "tonemap", Tensor<Real>({3}), rates.tonemap);
  for (int i = 0; i < static_cast<int>(cameras.size()); ++i) {
    const Camera& c = cameras[static_cast<std::size_t>(i)];
    m.store.add(names::camera_pose(i), "pose", Tensor<Real>({6}), rates.pose);
    m.store.add(names::camera_exposure(i), "exposure", Tensor<Real>({1}, static_cast<Real>(c.exposure)),
                rates.exposure);
    Tensor<Real> wb({2});
    wb[0] = static_cast<Real>(c.wb_red);
    wb[1] = static_cast<Real>(c.wb_blue);
    m.store.add(names::camera_white_balance(i), "exposure", std::move(wb), rates.exposure);
  }
  return m;
}

template <typename Real>
DecoderConfig Model<Real>::decoder() const {
  DecoderConfig d;
  d.layers = config.layers;
  d.features = config.features;
  d.output_channels = config.sh ? kShCoefficients : 3;
  return d;
}

template <typename Real>
PointCloud Model<Real>::point_cloud() const {
  PointCloud c;
  c.features = config.features;
  auto to = [](const Tensor<Real>& t) {
    std::vector<float> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<float>(t[i]);
    return v;
  };
  c.positions = to(store.value(names::kPosition));
  c.log_sizes = to(store.value(names::kLogSize));
  c.opacity_logits = to(store.value(names::kOpacity));
  c.descriptors = to(store.value(names::kDescriptor));
  return c;
}

template <typename Real>
RasterInputs<Real> Model<Real>::raster_inputs() const {
  RasterInputs<Real> in;
  in.positions = store.value(names::kPosition).values();
  in.log_sizes = store.value(names::kLogSize).values();
  in.opacity_logits = store.value(names::kOpacity).values();
  in.descriptors = store.value(names::kDescriptor).values();
  in.features = config.features;
  in.env_mode = config.env_mode;
  in.environment = store.value(names::kEnvironment).values();
  in.env_height = config.env_mode == EnvMode::Equirectangular ? config.env_height : 0;
  return in;
}

template <typename Real>
ToneMapParams<Real> Model<Real>::tone_map_params(int camera) const {
  ToneMapParams<Real> p;
  const auto& response = store.value(names::kResponse);
  p.response.assign(response.values().begin(), response.values().end());
  const auto& vig = store.value(names::kVignette);
  p.vignette = {vig[0], vig[1], vig[2]};
  if (camera >= 0) {
    p.exposure = store.value(names::camera_exposure(camera))[0];
    const auto& wb = store.value(names::camera_white_balance(camera));
    p.wb_red = wb[0];
    p.wb_blue = wb[1];
  }
  return p;
}

template <typename Real>
std::array<double, 6> Model<Real>::pose_tangent(int camera) const {
  std::array<double, 6> t{};
  if (camera < 0) return t;
  const auto& v = store.value(names::camera_pose(camera));
  for (int i = 0; i < 6; ++i) t[static_cast<std::size_t>(i)] = static_cast<double>(v[static_cast<std::size_t>(i)]);
  return t;
}

template <typename Real>
void Model<Real>::apply_pose_tangents() {
  for (int i = 0; i < static_cast<int>(cameras.size()); ++i) {
    auto& v = store.value(names::camera_pose(i));
    const auto t = pose_tangent(i);
    if (std::all_of(t.begin(), t.end(), [](double x) { return x == 0.0; })) continue;
    cameras[static_cast<std::size_t>(i)].pose = compose_tangent(cameras[static_cast<std::size_t>(i)].pose, t);
    v.fill(Real(0));
  }
}

SensorMapping full_sensor(const Intrinsics& k) {
  SensorMapping s;
  s.cx = k.cx;
  s.cy = k.cy;
  s.half_diagonal = 0.5 * std::hypot(static_cast<double>(k.width), static_cast<double>(k.height));
  return s;
}

RenderView camera_view(const std::vector<Camera>& cameras, int camera) {
  const Camera& c = cameras.at(static_cast<std::size_t>(camera));
  RenderView v;
  v.intrinsics = c.intrinsics;
  v.pose = c.pose;
  v.camera = camera;
  v.sensor = full_sensor(c.intrinsics);
  return v;
}

RenderView zoomed_view(const std::vector<Camera>& cameras, int camera, double zoom, double ox, double oy, int vw,
                       int vh) {
  const Camera& c = cameras.at(static_cast<std::size_t>(camera));
  const Intrinsics& k = c.intrinsics;
  RenderView v;
  v.intrinsics.fx = zoom * k.fx;
  v.intrinsics.fy = zoom * k.fy;
  v.intrinsics.cx = zoom * (k.cx + 0.5) - 0.5 - ox;
  v.intrinsics.cy = zoom * (k.cy + 0.5) - 0.5 - oy;
  v.intrinsics.width = vw;
  v.intrinsics.height = vh;
  v.pose = c.pose;
  v.camera = camera;
  v.sensor = full_sensor(k);
  v.sensor.zoom = zoom;
  v.sensor.offset_x = ox;
  v.sensor.offset_y = oy;
  return v;
}

template <typename Real>
Tensor<Real> view_directions(const ViewCamera<Real>& camera) {
  const int w = camera.width, h = camera.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  Tensor<Real> dirs({3, h, w});
  parallel_chunks(h, 16, [&](std::int64_t, std::int64_t r0, std::int64_t r1) {
    for (int j = static_cast<int>(r0); j < static_cast<int>(r1); ++j) {
      for (int i = 0; i < w; ++i) {
        const auto d = camera.view_to_world_dir(camera.view_ray(static_cast<Real>(i), static_cast<Real>(j)));
        const std::size_t p = static_cast<std::size_t>(j) * w + i;
        for (int a = 0; a < 3; ++a) dirs[a * plane + p] = d[static_cast<std::size_t>(a)];
      }
    }
  });
  return dirs;
}

template <typename Real>
Tensor<Real> render(const Model<Real>& model, const RenderView& view, RenderCache<Real>* cache,
                    RenderTimings* timings) {
  const auto in = model.raster_inputs();
  const auto camera = ViewCamera<Real>::make(view.intrinsics, view.pose, model.pose_tangent(view.camera));
  const RasterConfig rc{model.config.layers, model.config.near};
  RasterSaved<Real> local;
  RasterSaved<Real>& saved = cache ? cache->raster : local;

  const auto t0 = Clock::now();
  ImagePyramid<Real> pyramid = rasterize_forward(in, camera, rc, &saved);
  const auto t1 = Clock::now();
  Tensor<Real> decoded = decode_pyramid(model.store, model.decoder(), pyramid, cache ? &cache->decoder : nullptr);
  const auto t2 = Clock::now();
  Tensor<Real> dirs;
  Tensor<Real> hdr;
  if (model.config.sh) {
    dirs = view_directions(camera);
    hdr = sh_shade_image(decoded, dirs);
  } else {
    hdr = decoded;
  }
  Tensor<Real> radius2 = radius2_map<Real>(view.sensor, camera.width, camera.height);
  ToneMapParams<Real> tone = model.tone_map_params(view.camera);
  Tensor<Real> out = tone_map_image(hdr, tone, radius2);
  const auto t3 = Clock::now();

  if (timings) {
    timings->raster_stages = saved.timings;
    timings->raster_ms = elapsed_ms(t0, t1);
    timings->network_ms = elapsed_ms(t1, t2);
    timings->tonemap_ms = elapsed_ms(t2, t3);
  }
  if (cache) {
    cache->view = view;
    cache->decoded = std::move(decoded);
    cache->dirs = std::move(dirs);
    cache->hdr = std::move(hdr);
    cache->radius2 = std::move(radius2);
    cache->tone = std::move(tone);
  }
  return out;
}

template <typename Real>
void render_backward(Model<Real>& model, const RenderCache<Real>& cache, const Tensor<Real>& grad_image,
                     RenderTimings* timings) {
  auto& store = model.store;
  const int cam = cache.view.camera;
  const bool pose_on = cam >= 0 && store.get(names::camera_pose(cam)).enabled;

  const auto t0 = Clock::now();
  Tensor<Real> grad_hdr(cache.hdr.shape());
  const auto tg = tone_map_backward(cache.hdr, cache.tone, cache.radius2, grad_image, &grad_hdr);
  accumulate(store.grad(names::kResponse), tg.response);
  {
    auto& gv = store.grad(names::kVignette);
    for (int a = 0; a < 3; ++a) gv[static_cast<std::size_t>(a)] += tg.vignette[static_cast<std::size_t>(a)];
  }
  if (cam >= 0) {
    store.grad(names::camera_exposure(cam))[0] += tg.exposure;
    auto& gwb = store.grad(names::camera_white_balance(cam));
    gwb[0] += tg.wb_red;
    gwb[1] += tg.wb_blue;
  }

  std::array<Real, 3> dir_pose{0, 0, 0};
  Tensor<Real> grad_decoded;
  if (model.config.sh) {
    grad_decoded = Tensor<Real>(cache.decoded.shape());
    Tensor<Real> grad_dirs;
    if (pose_on) grad_dirs = Tensor<Real>(cache.dirs.shape());
    sh_shade_image_backward(cache.decoded, cache.dirs, grad_hdr, &grad_decoded, pose_on ? &grad_dirs : nullptr);
    if (pose_on) {
      // d_w = R'^T d_v with R' = Exp(w) R; at w = 0 the rotation gradient is
      // R * sum(g_w x d_w).
      const std::size_t plane = cache.dirs.size() / 3;
      std::array<Real, 3> acc{0, 0, 0};
      for (std::size_t p = 0; p < plane; ++p) {
        const Real gx = grad_dirs[p], gy = grad_dirs[plane + p], gz = grad_dirs[2 * plane + p];
        const Real dx = cache.dirs[p], dy = cache.dirs[plane + p], dz = cache.dirs[2 * plane + p];
        acc[0] += gy * dz - gz * dy;
        acc[1] += gz * dx - gx * dz;
        acc[2] += gx * dy - gy * dx;
      }
      const auto& r = cache.raster.camera.rotation;
      for (int a = 0; a < 3; ++a)
        dir_pose[static_cast<std::size_t>(a)] = r[3 * a] * acc[0] + r[3 * a + 1] * acc[1] + r[3 * a + 2] * acc[2];
    }
  } else {
    grad_decoded = std::move(grad_hdr);
  }
  const auto t1 = Clock::now();

  const bool network_on = store.group_enabled("network");
  const bool scene_on = store.group_enabled("position") || store.group_enabled("size") ||
                        store.group_enabled("opacity") || store.group_enabled("descriptor") ||
                        store.group_enabled("environment") || pose_on;
  ImagePyramid<Real> grad_pyramid;
  if (network_on || scene_on) {
    grad_pyramid = decode_pyramid_backward(store, model.decoder(), cache.decoder, grad_decoded, network_on);
  }
  const auto t2 = Clock::now();

  if (scene_on) {
    const auto in = model.raster_inputs();
    const RasterGrads<Real> g = rasterize_backward(in, cache.raster, grad_pyramid);
    accumulate(store.grad(names::kPosition), g.positions);
    accumulate(store.grad(names::kLogSize), g.log_sizes);
    accumulate(store.grad(names::kOpacity), g.opacity_logits);
    accumulate(store.grad(names::kDescriptor), g.descriptors);
    accumulate(store.grad(names::kEnvironment), g.environment);
    if (cam >= 0) {
      auto& gp = store.grad(names::camera_pose(cam));
      for (int a = 0; a < 6; ++a) gp[static_cast<std::size_t>(a)] += g.pose[static_cast<std::size_t>(a)];
      for (int a = 0; a < 3; ++a) gp[static_cast<std::size_t>(a)] += dir_pose[static_cast<std::size_t>(a)];
    }
  }
  const auto t3 = Clock::now();

  if (timings) {
    timings->tonemap_ms += elapsed_ms(t0, t1);
    timings->network_ms += elapsed_ms(t1, t2);
    timings->raster_ms += elapsed_ms(t2, t3);
  }
}

template <typename Real>
std::uint64_t render_signature(const Model<Real>& model, const RenderView& view) {
  RenderCache<Real> cache;
  render(model, view, &cache);
  std::uint64_t h = raster_signature(model.raster_inputs(), cache.raster);
  const auto& hdr = cache.hdr;
  const std::size_t plane = hdr.size() / 3;
  const Real scale = std::exp2(cache.tone.exposure);
  const std::array<Real, 3> wb{cache.tone.wb_red, Real(1), cache.tone.wb_blue};
  const auto& vg = cache.tone.vignette;
  for (std::size_t p = 0; p < plane; ++p) {
    const Real r2 = cache.radius2[p];
    const Real v = Real(1) + r2 * (vg[0] + r2 * (vg[1] + r2 * vg[2]));
    for (int c = 0; c < 3; ++c) {
      const Real x = hdr[c * plane + p] * scale * wb[static_cast<std::size_t>(c)] * v;
      std::uint64_t state;
      if (x < Real(0)) state = 0;
      else if (x > Real(1)) state = 1;
      else state = 2 + static_cast<std::uint64_t>(std::min(kResponseSegments - 1, static_cast<int>(std::floor(x * Real(kResponseSegments)))));
      h = mix(h, state);
    }
  }
  return h;
}

#define TRIPS_INSTANTIATE(Real)                                                                                  \
  template struct Model<Real>;                                                                                  \
  template Tensor<Real> view_directions(const ViewCamera<Real>&);                                               \
  template Tensor<Real> render(const Model<Real>&, const RenderView&, RenderCache<Real>*, RenderTimings*);      \
  template void render_backward(Model<Real>&, const RenderCache<Real>&, const Tensor<Real>&, RenderTimings*);   \
  template std::uint64_t render_signature(const Model<Real>&, const RenderView&);

TRIPS_INSTANTIATE(float)
TRIPS_INSTANTIATE(double)
#undef TRIPS_INSTANTIATE

}  // namespace trips
