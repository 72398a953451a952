#include "raster.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <numbers>

#include "parallel.hpp"

namespace trips {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

constexpr std::int64_t kPointChunk = 4096;
constexpr std::int64_t kPixelChunk = 4096;

template <typename Real>
inline bool depth_less(Real a, int ai, Real b, int bi) {
  return a < b || (a == b && ai < bi);
}

template <typename Real>
inline int slot_of(const LayerSelection<Real>& sel, int layer) {
  return (sel.count == 2 && sel.layer[1] == layer) ? 1 : 0;
}

// Equirectangular lookup: longitude from atan2(y, x), colatitude from +z.
template <typename Real>
struct EnvTap {
  int u0 = 0, u1 = 0, r0 = 0, r1 = 0;
  Real fu = 0, fv = 0;
  Real du_dphi = 0, dv_dtheta = 0;
};

template <typename Real>
EnvTap<Real> env_tap(const std::array<Real, 3>& d, int height) {
  const int width = 2 * height;
  const Real pi = std::numbers::pi_v<Real>;
  const Real z = std::clamp(d[2], Real(-1), Real(1));
  const Real theta = std::acos(z);
  const Real phi = std::atan2(d[1], d[0]);
  const Real u = (phi + pi) / (Real(2) * pi) * width - Real(0.5);
  const Real v = theta / pi * height - Real(0.5);
  EnvTap<Real> t;
  const Real uf = std::floor(u);
  const Real vf = std::floor(v);
  t.fu = u - uf;
  t.fv = v - vf;
  const int ui = static_cast<int>(uf);
  const int vi = static_cast<int>(vf);
  t.u0 = ((ui % width) + width) % width;
  t.u1 = (t.u0 + 1) % width;
  t.r0 = std::clamp(vi, 0, height - 1);
  t.r1 = std::clamp(vi + 1, 0, height - 1);
  t.du_dphi = width / (Real(2) * pi);
  t.dv_dtheta = height / pi;
  return t;
}

template <typename Real>
std::array<Real, 3> background_ray(const ViewCamera<Real>& camera, int layer, int px, int py) {
  return camera.view_ray(std::ldexp(static_cast<Real>(px), layer), std::ldexp(static_cast<Real>(py), layer));
}

template <typename Real>
std::array<Real, 3> cross(const std::array<Real, 3>& a, const std::array<Real, 3>& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h * 0x100000001b3ULL;
}

}  // namespace

template <typename Real>
ViewCamera<Real> ViewCamera<Real>::make(const Intrinsics& k, const Pose& pose, const std::array<double, 6>& tangent) {
  const Pose p = compose_tangent(pose, tangent);
  const Eigen::Matrix3d r = p.rotation.toRotationMatrix();
  ViewCamera<Real> c;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) c.rotation[static_cast<std::size_t>(3 * i + j)] = static_cast<Real>(r(i, j));
    c.translation[static_cast<std::size_t>(i)] = static_cast<Real>(p.translation[i]);
  }
  c.fx = static_cast<Real>(k.fx);
  c.fy = static_cast<Real>(k.fy);
  c.cx = static_cast<Real>(k.cx);
  c.cy = static_cast<Real>(k.cy);
  c.focal = static_cast<Real>(k.focal());
  c.width = k.width;
  c.height = k.height;
  return c;
}

template <typename Real>
std::array<Real, 3> ViewCamera<Real>::to_view(const Real* w) const {
  const auto& r = rotation;
  return {r[0] * w[0] + r[1] * w[1] + r[2] * w[2] + translation[0],
          r[3] * w[0] + r[4] * w[1] + r[5] * w[2] + translation[1],
          r[6] * w[0] + r[7] * w[1] + r[8] * w[2] + translation[2]};
}

template <typename Real>
std::array<Real, 3> ViewCamera<Real>::view_ray(Real x, Real y) const {
  const Real dx = (x - cx) / fx;
  const Real dy = (y - cy) / fy;
  const Real inv = Real(1) / std::sqrt(dx * dx + dy * dy + Real(1));
  return {dx * inv, dy * inv, inv};
}

template <typename Real>
std::array<Real, 3> ViewCamera<Real>::view_to_world_dir(const std::array<Real, 3>& d) const {
  const auto& r = rotation;
  return {r[0] * d[0] + r[3] * d[1] + r[6] * d[2], r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
          r[2] * d[0] + r[5] * d[1] + r[8] * d[2]};
}

template <typename Real>
std::array<Real, 3> ViewCamera<Real>::world_to_view_dir(const std::array<Real, 3>& d) const {
  const auto& r = rotation;
  return {r[0] * d[0] + r[1] * d[1] + r[2] * d[2], r[3] * d[0] + r[4] * d[1] + r[5] * d[2],
          r[6] * d[0] + r[7] * d[1] + r[8] * d[2]};
}

PyramidGeometry PyramidGeometry::make(int width, int height, int layers) {
  if (layers < 1 || layers > kMaxLayers) throw std::invalid_argument("pyramid layer count must be in [1, 8]");
  PyramidGeometry g;
  g.layers = layers;
  g.width = width;
  g.height = height;
  g.offset[0] = 0;
  for (int l = 0; l < layers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    g.w[i] = (width + (1 << l) - 1) >> l;
    g.h[i] = (height + (1 << l) - 1) >> l;
    g.offset[i + 1] = g.offset[i] + static_cast<std::int64_t>(g.w[i]) * g.h[i];
  }
  return g;
}

int PyramidGeometry::layer_of(std::int64_t pixel) const {
  int l = 0;
  while (l + 1 < layers && pixel >= offset[static_cast<std::size_t>(l + 1)]) ++l;
  return l;
}

template <typename Real>
ImagePyramid<Real> ImagePyramid<Real>::zeros(const PyramidGeometry& g, int features) {
  ImagePyramid<Real> p;
  p.geometry = g;
  p.features = features;
  for (int l = 0; l < g.layers; ++l) {
    p.layers.emplace_back(std::vector<int>{features + 1, g.h[static_cast<std::size_t>(l)], g.w[static_cast<std::size_t>(l)]});
  }
  return p;
}

template <typename Real>
std::optional<ProjectedPoint<Real>> project_point(const ViewCamera<Real>& camera, const Real* world, Real near) {
  const auto p = camera.to_view(world);
  if (!(p[2] > near)) return std::nullopt;
  ProjectedPoint<Real> out;
  out.view = p;
  out.z = p[2];
  out.x = camera.fx * p[0] / p[2] + camera.cx;
  out.y = camera.fy * p[1] / p[2] + camera.cy;
  return out;
}

template <typename Real>
LayerSelection<Real> select_layers(Real s, int layers) {
  LayerSelection<Real> sel;
  const Real eps = static_cast<Real>(kSmallPointFloor);
  if (!(s >= Real(1))) {
    sel.count = 1;
    sel.layer = {0, 0};
    sel.iota = {eps + (Real(1) - eps) * s, Real(0)};
    sel.diota_ds = {Real(1) - eps, Real(0)};
    return sel;
  }
  const int top = layers - 1;
  const int lo = std::ilogb(s);
  if (lo >= top) {
    sel.count = 1;
    sel.layer = {top, top};
    sel.iota = {Real(1), Real(0)};
    sel.diota_ds = {Real(0), Real(0)};
    return sel;
  }
  const Real a = std::ldexp(Real(1), lo);
  if (s == a) {
    sel.count = 1;
    sel.layer = {lo, lo};
    sel.iota = {Real(1), Real(0)};
    sel.diota_ds = {Real(0), Real(0)};
    return sel;
  }
  const Real b = std::ldexp(Real(1), lo + 1);
  const Real span = b - a;
  sel.count = 2;
  sel.layer = {lo, lo + 1};
  sel.iota = {Real(1) - (s - a) / span, Real(1) - (b - s) / span};
  sel.diota_ds = {Real(-1) / span, Real(1) / span};
  return sel;
}

template <typename Real>
bool footprint_visible(const ProjectedPoint<Real>& p, const LayerSelection<Real>& sel, const PyramidGeometry& g) {
  const int layer = sel.layer[static_cast<std::size_t>(sel.count - 1)];
  const Real xl = layer_coordinate(p.x, layer);
  const Real yl = layer_coordinate(p.y, layer);
  const auto w = static_cast<Real>(g.w[static_cast<std::size_t>(layer)]);
  const auto h = static_cast<Real>(g.h[static_cast<std::size_t>(layer)]);
  return xl > Real(-1) && yl > Real(-1) && xl < w && yl < h;
}

template <typename Real>
FragmentSet<Real> splat_point(const ProjectedPoint<Real>& p, Real alpha, const LayerSelection<Real>& sel,
                              const PyramidGeometry& g, bool keep_out_of_bounds) {
  FragmentSet<Real> out;
  for (int j = 0; j < sel.count; ++j) {
    const int layer = sel.layer[static_cast<std::size_t>(j)];
    const Real iota = sel.iota[static_cast<std::size_t>(j)];
    const Real xl = layer_coordinate(p.x, layer);
    const Real yl = layer_coordinate(p.y, layer);
    const int x0 = static_cast<int>(std::floor(xl));
    const int y0 = static_cast<int>(std::floor(yl));
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const int px = x0 + dx;
        const int py = y0 + dy;
        if (!keep_out_of_bounds && !g.inside(layer, px, py)) continue;
        Fragment<Real>& f = out.items[static_cast<std::size_t>(out.count++)];
        f.depth = p.z;
        f.beta = bilinear_weight(xl, px) * bilinear_weight(yl, py);
        f.iota = iota;
        f.gamma = fragment_gamma(f.beta, iota, alpha);
        f.point = p.index;
        f.layer = layer;
        f.px = px;
        f.py = py;
      }
    }
  }
  return out;
}

template <typename Real>
void blend_pixel(std::span<const Real> gammas, std::span<const int> points, std::span<const Real> descriptors,
                 int features, const Real* background, Real* out) {
  Real transmittance = 1;
  for (int f = 0; f < features; ++f) out[f] = 0;
  for (std::size_t m = 0; m < gammas.size(); ++m) {
    const Real w = transmittance * gammas[m];
    const Real* tau = descriptors.data() + static_cast<std::size_t>(points[m]) * features;
    for (int f = 0; f < features; ++f) out[f] += w * tau[f];
    transmittance = transmittance * (Real(1) - gammas[m]);
  }
  for (int f = 0; f < features; ++f) out[f] += transmittance * background[f];
  out[features] = Real(1) - transmittance;
}

template <typename Real>
void sample_background(const RasterInputs<Real>& in, const ViewCamera<Real>& camera, int layer, int px, int py,
                       Real* out) {
  const int features = in.features;
  if (in.env_mode == EnvMode::Constant) {
    for (int f = 0; f < features; ++f) out[f] = in.environment[static_cast<std::size_t>(f)];
    return;
  }
  const auto d = camera.view_to_world_dir(background_ray(camera, layer, px, py));
  const auto t = env_tap(d, in.env_height);
  const std::size_t plane = static_cast<std::size_t>(in.env_height) * 2 * in.env_height;
  const std::size_t w = 2 * static_cast<std::size_t>(in.env_height);
  for (int f = 0; f < features; ++f) {
    const Real* tex = in.environment.data() + f * plane;
    const Real top = (Real(1) - t.fu) * tex[t.r0 * w + t.u0] + t.fu * tex[t.r0 * w + t.u1];
    const Real bottom = (Real(1) - t.fu) * tex[t.r1 * w + t.u0] + t.fu * tex[t.r1 * w + t.u1];
    out[f] = (Real(1) - t.fv) * top + t.fv * bottom;
  }
}

template <typename Real>
ImagePyramid<Real> rasterize_forward(const RasterInputs<Real>& in, const ViewCamera<Real>& camera,
                                     const RasterConfig& config, std::type_identity_t<RasterSaved<Real>>* saved_out) {
  const std::size_t n = in.point_count();
  const int features = in.features;
  if (in.positions.size() != 3 * n || in.opacity_logits.size() != n ||
      in.descriptors.size() != n * static_cast<std::size_t>(features)) {
    throw ShapeError("rasterize_forward: point arrays have inconsistent lengths");
  }
  const std::size_t env_size = in.env_mode == EnvMode::Constant
                                   ? static_cast<std::size_t>(features)
                                   : static_cast<std::size_t>(features) * in.env_height * 2 * in.env_height;
  if (in.environment.size() != env_size) throw ShapeError("rasterize_forward: environment size mismatch");

  RasterSaved<Real> local;
  RasterSaved<Real>& saved = saved_out ? *saved_out : local;
  saved = RasterSaved<Real>{};
  saved.config = config;
  saved.camera = camera;
  saved.geometry = PyramidGeometry::make(camera.width, camera.height, config.layers);
  saved.features = features;
  saved.point_count = n;
  const PyramidGeometry& g = saved.geometry;
  const std::int64_t pixels = g.pixel_count();
  const Real near = static_cast<Real>(config.near);

  // Stage 1: project, select layers, count fragments per pixel.
  auto t0 = Clock::now();
  saved.records.assign(n, PointRecord<Real>{});
  std::vector<int> counts(static_cast<std::size_t>(pixels), 0);
  parallel_chunks(static_cast<std::int64_t>(n), kPointChunk, [&](std::int64_t, std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      PointRecord<Real>& rec = saved.records[static_cast<std::size_t>(i)];
      auto pp = project_point(camera, in.positions.data() + 3 * i, near);
      if (!pp) continue;
      pp->index = static_cast<int>(i);
      pp->s = screen_size(camera.focal, std::exp(in.log_sizes[static_cast<std::size_t>(i)]), pp->z);
      const auto sel = select_layers(pp->s, config.layers);
      if (!footprint_visible(*pp, sel, g)) continue;
      rec.projected = *pp;
      rec.selection = sel;
      rec.alpha = sigmoid(in.opacity_logits[static_cast<std::size_t>(i)]);
      rec.visible = true;
      for (int j = 0; j < sel.count; ++j) {
        const int layer = sel.layer[static_cast<std::size_t>(j)];
        const int x0 = static_cast<int>(std::floor(layer_coordinate(pp->x, layer)));
        const int y0 = static_cast<int>(std::floor(layer_coordinate(pp->y, layer)));
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            if (g.inside(layer, x0 + dx, y0 + dy))
              std::atomic_ref<int>(counts[static_cast<std::size_t>(g.pixel_index(layer, x0 + dx, y0 + dy))])
                  .fetch_add(1, std::memory_order_relaxed);
      }
    }
  });
  std::vector<std::int64_t> offsets(static_cast<std::size_t>(pixels) + 1, 0);
  for (std::int64_t p = 0; p < pixels; ++p)
    offsets[static_cast<std::size_t>(p + 1)] = offsets[static_cast<std::size_t>(p)] + counts[static_cast<std::size_t>(p)];
  const std::int64_t total = offsets.back();
  std::vector<Real> frag_depth(static_cast<std::size_t>(total));
  std::vector<int> frag_point(static_cast<std::size_t>(total));
  std::vector<std::int64_t> cursor(offsets.begin(), offsets.end() - 1);
  saved.timings.count_alloc_ms = elapsed_ms(t0);

  // Stage 2: scatter (depth, index) pairs into the per-pixel ranges.
  auto t1 = Clock::now();
  parallel_chunks(static_cast<std::int64_t>(n), kPointChunk, [&](std::int64_t, std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      const PointRecord<Real>& rec = saved.records[static_cast<std::size_t>(i)];
      if (!rec.visible) continue;
      const auto& sel = rec.selection;
      for (int j = 0; j < sel.count; ++j) {
        const int layer = sel.layer[static_cast<std::size_t>(j)];
        const int x0 = static_cast<int>(std::floor(layer_coordinate(rec.projected.x, layer)));
        const int y0 = static_cast<int>(std::floor(layer_coordinate(rec.projected.y, layer)));
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            if (!g.inside(layer, x0 + dx, y0 + dy)) continue;
            const std::int64_t pix = g.pixel_index(layer, x0 + dx, y0 + dy);
            const std::int64_t slot =
                std::atomic_ref<std::int64_t>(cursor[static_cast<std::size_t>(pix)]).fetch_add(1, std::memory_order_relaxed);
            frag_depth[static_cast<std::size_t>(slot)] = rec.projected.z;
            frag_point[static_cast<std::size_t>(slot)] = static_cast<int>(i);
          }
      }
    }
  });
  saved.timings.splat_ms = elapsed_ms(t1);

  // Stage 3: keep the 16 nearest fragments per pixel, then blend.
  auto t2 = Clock::now();
  ImagePyramid<Real> pyramid = ImagePyramid<Real>::zeros(g, features);
  saved.list_length.assign(static_cast<std::size_t>(pixels), 0);
  saved.list_point.assign(static_cast<std::size_t>(pixels) * kMaxListLength, -1);
  saved.list_depth.assign(static_cast<std::size_t>(pixels) * kMaxListLength, Real(0));
  saved.list_gamma.assign(static_cast<std::size_t>(pixels) * kMaxListLength, Real(0));
  std::atomic<std::int64_t> kept_total{0}, nonempty{0}, truncated{0};
  parallel_chunks(pixels, kPixelChunk, [&](std::int64_t, std::int64_t b, std::int64_t e) {
    std::vector<Real> bg(static_cast<std::size_t>(features));
    std::vector<Real> out(static_cast<std::size_t>(features) + 1);
    std::int64_t kept_local = 0, nonempty_local = 0, truncated_local = 0;
    int layer = g.layer_of(b);
    for (std::int64_t pix = b; pix < e; ++pix) {
      while (pix >= g.offset[static_cast<std::size_t>(layer + 1)]) ++layer;
      const auto lw = g.w[static_cast<std::size_t>(layer)];
      const int px = static_cast<int>((pix - g.offset[static_cast<std::size_t>(layer)]) % lw);
      const int py = static_cast<int>((pix - g.offset[static_cast<std::size_t>(layer)]) / lw);

      std::array<Real, kMaxListLength> depth{};
      std::array<int, kMaxListLength> point{};
      int len = 0;
      const std::int64_t fb = offsets[static_cast<std::size_t>(pix)];
      const std::int64_t fe = offsets[static_cast<std::size_t>(pix + 1)];
      for (std::int64_t f = fb; f < fe; ++f) {
        const Real z = frag_depth[static_cast<std::size_t>(f)];
        const int id = frag_point[static_cast<std::size_t>(f)];
        if (len == kMaxListLength && !depth_less(z, id, depth[kMaxListLength - 1], point[kMaxListLength - 1])) continue;
        int pos = len < kMaxListLength ? len++ : kMaxListLength - 1;
        while (pos > 0 && depth_less(z, id, depth[static_cast<std::size_t>(pos - 1)], point[static_cast<std::size_t>(pos - 1)])) {
          depth[static_cast<std::size_t>(pos)] = depth[static_cast<std::size_t>(pos - 1)];
          point[static_cast<std::size_t>(pos)] = point[static_cast<std::size_t>(pos - 1)];
          --pos;
        }
        depth[static_cast<std::size_t>(pos)] = z;
        point[static_cast<std::size_t>(pos)] = id;
      }
      if (fe > fb) ++nonempty_local;
      if (fe - fb > kMaxListLength) ++truncated_local;
      kept_local += len;

      std::array<Real, kMaxListLength> gamma{};
      for (int m = 0; m < len; ++m) {
        const PointRecord<Real>& rec = saved.records[static_cast<std::size_t>(point[static_cast<std::size_t>(m)])];
        const int j = slot_of(rec.selection, layer);
        const Real beta = bilinear_weight(layer_coordinate(rec.projected.x, layer), px) *
                          bilinear_weight(layer_coordinate(rec.projected.y, layer), py);
        gamma[static_cast<std::size_t>(m)] = fragment_gamma(beta, rec.selection.iota[static_cast<std::size_t>(j)], rec.alpha);
      }
      sample_background(in, camera, layer, px, py, bg.data());
      blend_pixel<Real>(std::span<const Real>(gamma.data(), static_cast<std::size_t>(len)),
                        std::span<const int>(point.data(), static_cast<std::size_t>(len)), in.descriptors, features,
                        bg.data(), out.data());
      Tensor<Real>& img = pyramid.layers[static_cast<std::size_t>(layer)];
      for (int f = 0; f <= features; ++f) img(f, py, px) = out[static_cast<std::size_t>(f)];

      const std::size_t base = static_cast<std::size_t>(pix) * kMaxListLength;
      saved.list_length[static_cast<std::size_t>(pix)] = static_cast<std::uint8_t>(len);
      for (int m = 0; m < len; ++m) {
        saved.list_point[base + m] = point[static_cast<std::size_t>(m)];
        saved.list_depth[base + m] = depth[static_cast<std::size_t>(m)];
        saved.list_gamma[base + m] = gamma[static_cast<std::size_t>(m)];
      }
    }
    kept_total += kept_local;
    nonempty += nonempty_local;
    truncated += truncated_local;
  });
  saved.timings.sort_blend_ms = elapsed_ms(t2);

  saved.stats.fragments = total;
  saved.stats.kept = kept_total.load();
  saved.stats.nonempty_pixels = nonempty.load();
  saved.stats.truncated_pixels = truncated.load();
  for (const auto& rec : saved.records) {
    if (!rec.visible) continue;
    ++saved.stats.visible_points;
    saved.stats.max_fragments_per_point = std::max(saved.stats.max_fragments_per_point, 4 * rec.selection.count);
  }
  return pyramid;
}

template <typename Real>
RasterGrads<Real> rasterize_backward(const RasterInputs<Real>& in, const RasterSaved<Real>& saved,
                                     const ImagePyramid<Real>& grad) {
  const std::size_t n = saved.point_count;
  const int features = saved.features;
  const PyramidGeometry& g = saved.geometry;
  const ViewCamera<Real>& camera = saved.camera;
  if (in.point_count() != n || in.features != features) {
    throw ShapeError("rasterize_backward: inputs do not match the saved forward state");
  }
  if (static_cast<int>(grad.layers.size()) != g.layers || grad.features != features) {
    throw ShapeError("rasterize_backward: gradient pyramid does not match the saved forward state");
  }
  for (int l = 0; l < g.layers; ++l) {
    const auto& t = grad.layers[static_cast<std::size_t>(l)];
    if (t.dim(0) != features + 1 || t.dim(1) != g.h[static_cast<std::size_t>(l)] || t.dim(2) != g.w[static_cast<std::size_t>(l)])
      throw ShapeError("rasterize_backward: gradient layer " + std::to_string(l) + " has shape " + shape_string(t.shape()));
  }

  RasterGrads<Real> out;
  out.positions.assign(3 * n, Real(0));
  out.log_sizes.assign(n, Real(0));
  out.opacity_logits.assign(n, Real(0));
  out.descriptors.assign(n * static_cast<std::size_t>(features), Real(0));
  out.environment.assign(in.environment.size(), Real(0));

  const std::int64_t pixels = g.pixel_count();
  std::vector<Real> dgamma(static_cast<std::size_t>(pixels) * kMaxListLength, Real(0));
  std::vector<Real> weight(static_cast<std::size_t>(pixels) * kMaxListLength, Real(0));

  const bool latlong = in.env_mode == EnvMode::Equirectangular;
  const std::size_t env_size = in.environment.size();
  const std::int64_t pixel_chunks = chunk_count(pixels, kPixelChunk);
  std::vector<std::vector<Real>> env_partial(static_cast<std::size_t>(pixel_chunks));
  std::vector<std::array<Real, 3>> env_rot_partial(static_cast<std::size_t>(pixel_chunks), std::array<Real, 3>{});

  // Stage A: per-pixel compositing adjoint.
  parallel_chunks(pixels, kPixelChunk, [&](std::int64_t chunk, std::int64_t b, std::int64_t e) {
    std::vector<Real>& env_acc = env_partial[static_cast<std::size_t>(chunk)];
    env_acc.assign(env_size, Real(0));
    std::array<Real, 3>& rot_acc = env_rot_partial[static_cast<std::size_t>(chunk)];
    std::vector<Real> bg(static_cast<std::size_t>(features)), rest(static_cast<std::size_t>(features)),
        gc(static_cast<std::size_t>(features));
    int layer = g.layer_of(b);
    for (std::int64_t pix = b; pix < e; ++pix) {
      while (pix >= g.offset[static_cast<std::size_t>(layer + 1)]) ++layer;
      const auto lw = g.w[static_cast<std::size_t>(layer)];
      const int px = static_cast<int>((pix - g.offset[static_cast<std::size_t>(layer)]) % lw);
      const int py = static_cast<int>((pix - g.offset[static_cast<std::size_t>(layer)]) / lw);
      const Tensor<Real>& gl = grad.layers[static_cast<std::size_t>(layer)];
      for (int f = 0; f < features; ++f) gc[static_cast<std::size_t>(f)] = gl(f, py, px);
      const Real ga = gl(features, py, px);

      const std::size_t base = static_cast<std::size_t>(pix) * kMaxListLength;
      const int len = saved.list_length[static_cast<std::size_t>(pix)];
      std::array<Real, kMaxListLength + 1> trans{};
      trans[0] = 1;
      for (int m = 0; m < len; ++m) trans[static_cast<std::size_t>(m + 1)] = trans[static_cast<std::size_t>(m)] * (Real(1) - saved.list_gamma[base + m]);
      sample_background(in, camera, layer, px, py, bg.data());
      rest = bg;
      Real rest_alpha = 0;
      for (int m = len - 1; m >= 0; --m) {
        const Real gm = saved.list_gamma[base + m];
        const Real* tau = in.descriptors.data() + static_cast<std::size_t>(saved.list_point[base + m]) * features;
        Real dot = (Real(1) - rest_alpha) * ga;
        for (int f = 0; f < features; ++f) dot += (tau[f] - rest[static_cast<std::size_t>(f)]) * gc[static_cast<std::size_t>(f)];
        const Real tm = trans[static_cast<std::size_t>(m)];
        dgamma[base + m] = tm * dot;
        weight[base + m] = tm * gm;
        for (int f = 0; f < features; ++f)
          rest[static_cast<std::size_t>(f)] = gm * tau[f] + (Real(1) - gm) * rest[static_cast<std::size_t>(f)];
        rest_alpha = gm + (Real(1) - gm) * rest_alpha;
      }
      const Real t_end = trans[static_cast<std::size_t>(len)];
      if (!latlong) {
        for (int f = 0; f < features; ++f) env_acc[static_cast<std::size_t>(f)] += t_end * gc[static_cast<std::size_t>(f)];
        continue;
      }
      const auto dv = background_ray(camera, layer, px, py);
      const auto d = camera.view_to_world_dir(dv);
      const auto t = env_tap(d, in.env_height);
      const std::size_t w = 2 * static_cast<std::size_t>(in.env_height);
      const std::size_t plane = static_cast<std::size_t>(in.env_height) * w;
      Real dvalue_du = 0, dvalue_dv = 0;
      for (int f = 0; f < features; ++f) {
        const Real gb = t_end * gc[static_cast<std::size_t>(f)];
        Real* acc = env_acc.data() + f * plane;
        acc[t.r0 * w + t.u0] += (Real(1) - t.fv) * (Real(1) - t.fu) * gb;
        acc[t.r0 * w + t.u1] += (Real(1) - t.fv) * t.fu * gb;
        acc[t.r1 * w + t.u0] += t.fv * (Real(1) - t.fu) * gb;
        acc[t.r1 * w + t.u1] += t.fv * t.fu * gb;
        const Real* tex = in.environment.data() + f * plane;
        const Real a00 = tex[t.r0 * w + t.u0], a01 = tex[t.r0 * w + t.u1];
        const Real a10 = tex[t.r1 * w + t.u0], a11 = tex[t.r1 * w + t.u1];
        dvalue_du += gb * ((Real(1) - t.fv) * (a01 - a00) + t.fv * (a11 - a10));
        dvalue_dv += gb * ((Real(1) - t.fu) * (a10 - a00) + t.fu * (a11 - a01));
      }
      // Chain through longitude/colatitude to the world direction.
      std::array<Real, 3> gdir{0, 0, 0};
      const Real rxy = d[0] * d[0] + d[1] * d[1];
      if (rxy > Real(0)) {
        const Real dphi = dvalue_du * t.du_dphi;
        gdir[0] += dphi * (-d[1] / rxy);
        gdir[1] += dphi * (d[0] / rxy);
      }
      const Real zz = std::clamp(d[2], Real(-1), Real(1));
      if (Real(1) - zz * zz > Real(0)) gdir[2] += dvalue_dv * t.dv_dtheta * (Real(-1) / std::sqrt(Real(1) - zz * zz));
      const auto rg = camera.world_to_view_dir(gdir);
      const auto c = cross(rg, dv);
      for (int a = 0; a < 3; ++a) rot_acc[static_cast<std::size_t>(a)] += c[static_cast<std::size_t>(a)];
    }
  });
  for (const auto& part : env_partial)
    for (std::size_t i = 0; i < env_size; ++i) out.environment[i] += part[i];
  for (const auto& part : env_rot_partial)
    for (int a = 0; a < 3; ++a) out.pose[static_cast<std::size_t>(a)] += part[static_cast<std::size_t>(a)];

  // Stage B: per-point gather of fragment adjoints.
  const std::int64_t point_chunks = chunk_count(static_cast<std::int64_t>(n), kPointChunk);
  std::vector<std::array<Real, 6>> pose_partial(static_cast<std::size_t>(point_chunks), std::array<Real, 6>{});
  parallel_chunks(static_cast<std::int64_t>(n), kPointChunk, [&](std::int64_t chunk, std::int64_t b, std::int64_t e) {
    std::array<Real, 6>& pose_acc = pose_partial[static_cast<std::size_t>(chunk)];
    for (std::int64_t i = b; i < e; ++i) {
      const PointRecord<Real>& rec = saved.records[static_cast<std::size_t>(i)];
      if (!rec.visible) continue;
      const auto& pp = rec.projected;
      const auto& sel = rec.selection;
      Real* dtau = out.descriptors.data() + static_cast<std::size_t>(i) * features;
      Real dalpha = 0, dx = 0, dy = 0, ds = 0;
      for (int j = 0; j < sel.count; ++j) {
        const int layer = sel.layer[static_cast<std::size_t>(j)];
        const Real iota = sel.iota[static_cast<std::size_t>(j)];
        const Real xl = layer_coordinate(pp.x, layer);
        const Real yl = layer_coordinate(pp.y, layer);
        const int x0 = static_cast<int>(std::floor(xl));
        const int y0 = static_cast<int>(std::floor(yl));
        const Real inv_scale = std::ldexp(Real(1), -layer);
        const Tensor<Real>& gl = grad.layers[static_cast<std::size_t>(layer)];
        for (int oy = 0; oy < 2; ++oy) {
          for (int ox = 0; ox < 2; ++ox) {
            const int px = x0 + ox;
            const int py = y0 + oy;
            if (!g.inside(layer, px, py)) continue;
            const std::size_t base = static_cast<std::size_t>(g.pixel_index(layer, px, py)) * kMaxListLength;
            const int len = saved.list_length[base / kMaxListLength];
            int m = 0;
            while (m < len && saved.list_point[base + m] != static_cast<int>(i)) ++m;
            if (m == len) continue;  // truncated away by the per-pixel cap
            const Real dg = dgamma[base + m];
            const Real w = weight[base + m];
            for (int f = 0; f < features; ++f) dtau[f] += w * gl(f, py, px);
            const Real wx = bilinear_weight(xl, px);
            const Real wy = bilinear_weight(yl, py);
            const Real sx = ox == 0 ? Real(-1) : Real(1);
            const Real sy = oy == 0 ? Real(-1) : Real(1);
            dalpha += dg * wx * wy * iota;
            const Real dbeta = dg * iota * rec.alpha;
            dx += dbeta * sx * wy * inv_scale;
            dy += dbeta * wx * sy * inv_scale;
            ds += dg * wx * wy * rec.alpha * sel.diota_ds[static_cast<std::size_t>(j)];
          }
        }
      }
      const Real pxv = pp.view[0], pyv = pp.view[1], pz = pp.view[2];
      // s = f * exp(log s_w) / z
      out.log_sizes[static_cast<std::size_t>(i)] = ds * pp.s;
      Real gz = -ds * pp.s / pz;
      const Real gx_view = dx * camera.fx / pz;
      const Real gy_view = dy * camera.fy / pz;
      gz += -dx * camera.fx * pxv / (pz * pz) - dy * camera.fy * pyv / (pz * pz);
      const std::array<Real, 3> gp{gx_view, gy_view, gz};
      const auto gw = camera.view_to_world_dir(gp);
      for (int a = 0; a < 3; ++a) out.positions[3 * static_cast<std::size_t>(i) + a] = gw[static_cast<std::size_t>(a)];
      out.opacity_logits[static_cast<std::size_t>(i)] = dalpha * rec.alpha * (Real(1) - rec.alpha);
      const auto c = cross(pp.view, gp);
      for (int a = 0; a < 3; ++a) {
        pose_acc[static_cast<std::size_t>(a)] += c[static_cast<std::size_t>(a)];
        pose_acc[static_cast<std::size_t>(a + 3)] += gp[static_cast<std::size_t>(a)];
      }
    }
  });
  for (const auto& part : pose_partial)
    for (int a = 0; a < 6; ++a) out.pose[static_cast<std::size_t>(a)] += part[static_cast<std::size_t>(a)];
  return out;
}

template <typename Real>
std::uint64_t raster_signature(const RasterInputs<Real>& in, const RasterSaved<Real>& saved) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& rec : saved.records) {
    h = mix(h, rec.visible ? 1u : 0u);
    if (!rec.visible) continue;
    h = mix(h, static_cast<std::uint64_t>(rec.selection.count));
    for (int j = 0; j < rec.selection.count; ++j) {
      const int layer = rec.selection.layer[static_cast<std::size_t>(j)];
      h = mix(h, static_cast<std::uint64_t>(layer));
      h = mix(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(layer_coordinate(rec.projected.x, layer)))));
      h = mix(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(layer_coordinate(rec.projected.y, layer)))));
    }
  }
  const std::int64_t pixels = saved.geometry.pixel_count();
  for (std::int64_t pix = 0; pix < pixels; ++pix) {
    const int len = saved.list_length[static_cast<std::size_t>(pix)];
    h = mix(h, static_cast<std::uint64_t>(len));
    for (int m = 0; m < len; ++m) h = mix(h, static_cast<std::uint64_t>(saved.list_point[static_cast<std::size_t>(pix) * kMaxListLength + m]));
  }
  if (in.env_mode == EnvMode::Equirectangular) {
    const auto& g = saved.geometry;
    for (int layer = 0; layer < g.layers; ++layer)
      for (int py = 0; py < g.h[static_cast<std::size_t>(layer)]; ++py)
        for (int px = 0; px < g.w[static_cast<std::size_t>(layer)]; ++px) {
          const auto d = saved.camera.view_to_world_dir(background_ray(saved.camera, layer, px, py));
          const auto t = env_tap(d, in.env_height);
          h = mix(h, static_cast<std::uint64_t>(t.u0) * 131071u + static_cast<std::uint64_t>(t.r0) * 8191u +
                         static_cast<std::uint64_t>(t.r1));
        }
  }
  return h;
}

#define TRIPS_INSTANTIATE(Real)                                                                                     \
  template struct ViewCamera<Real>;                                                                                 \
  template struct ImagePyramid<Real>;                                                                               \
  template std::optional<ProjectedPoint<Real>> project_point(const ViewCamera<Real>&, const Real*, Real);          \
  template LayerSelection<Real> select_layers(Real, int);                                                          \
  template bool footprint_visible(const ProjectedPoint<Real>&, const LayerSelection<Real>&, const PyramidGeometry&); \
  template FragmentSet<Real> splat_point(const ProjectedPoint<Real>&, Real, const LayerSelection<Real>&,            \
                                         const PyramidGeometry&, bool);                                             \
  template void blend_pixel(std::span<const Real>, std::span<const int>, std::span<const Real>, int, const Real*,   \
                            Real*);                                                                                 \
  template void sample_background(const RasterInputs<Real>&, const ViewCamera<Real>&, int, int, int, Real*);       \
  template ImagePyramid<Real> rasterize_forward(const RasterInputs<Real>&, const ViewCamera<Real>&,                 \
                                                const RasterConfig&, RasterSaved<Real>*);                           \
  template RasterGrads<Real> rasterize_backward(const RasterInputs<Real>&, const RasterSaved<Real>&,                \
                                                const ImagePyramid<Real>&);                                         \
  template std::uint64_t raster_signature(const RasterInputs<Real>&, const RasterSaved<Real>&);

TRIPS_INSTANTIATE(float)
TRIPS_INSTANTIATE(double)
#undef TRIPS_INSTANTIATE

}  // namespace trips
