#include "synth.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "parallel.hpp"

namespace trips {
namespace {

namespace fs = std::filesystem;

std::array<double, 3> checker(double x, double y, double cell) {
  const long long i = static_cast<long long>(std::floor(x / cell)) + static_cast<long long>(std::floor(y / cell));
  if (i % 2 == 0) return {0.85, 0.78, 0.32};
  return {0.18, 0.34, 0.72};
}

std::array<double, 3> sphere_color(const Eigen::Vector3d& n) {
  const double theta = std::atan2(n.y(), n.x());
  return {0.5 + 0.35 * n.x(), 0.5 + 0.3 * std::sin(3.0 * theta) * (1.0 - n.z() * n.z()), 0.5 + 0.35 * n.z()};
}

bool in_hole(double x, double y, double radius) { return x * x + y * y < radius * radius; }

// Hole scene: the disc sits in a plain patch twice its radius, like a
// bare pedestal in a textured room. Elsewhere the plane is the checker.
constexpr double kPatchScale = 2.0;

std::array<double, 3> plane_color(SceneKind kind, double x, double y, double cell, double hole_radius) {
  if (kind == SceneKind::Hole && in_hole(x, y, kPatchScale * hole_radius)) return {0.62, 0.52, 0.44};
  return checker(x, y, cell);
}

// World -> view pose of a camera at `eye` looking at the origin with +z up.
Pose look_at(const Eigen::Vector3d& eye) {
  const Eigen::Vector3d f = (-eye).normalized();
  const Eigen::Vector3d r = f.cross(Eigen::Vector3d::UnitZ()).normalized();
  const Eigen::Vector3d d = f.cross(r);
  Eigen::Matrix3d rot;
  rot.row(0) = r.transpose();
  rot.row(1) = d.transpose();
  rot.row(2) = f.transpose();
  Pose p;
  p.rotation = Eigen::Quaterniond(rot).normalized();
  p.translation = -(p.rotation * eye);
  return p;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

SceneKind parse_scene_kind(const std::string& name) {
  if (name == "plane") return SceneKind::Plane;
  if (name == "sphere") return SceneKind::Sphere;
  if (name == "hole") return SceneKind::Hole;
  throw std::invalid_argument("unknown scene kind '" + name + "' (expected plane, sphere or hole)");
}

const char* scene_kind_name(SceneKind kind) {
  switch (kind) {
    case SceneKind::Plane: return "plane";
    case SceneKind::Sphere: return "sphere";
    case SceneKind::Hole: return "hole";
  }
  return "plane";
}

std::array<double, 3> background_color() { return {0.1, 0.1, 0.12}; }

std::array<double, 3> trace_ray(const Surface& surface, const Eigen::Vector3d& o,
                                const Eigen::Vector3d& d, bool* hit_hole) {
  if (hit_hole) *hit_hole = false;
  if (surface.kind == SceneKind::Sphere) {
    const double b = o.dot(d);
    const double c = o.squaredNorm() - kSphereRadius * kSphereRadius;
    const double disc = b * b - c;
    if (disc < 0) return background_color();
    const double s = std::sqrt(disc);
    double t = -b - s;
    if (t <= 0) t = -b + s;
    if (t <= 0) return background_color();
    return sphere_color((o + t * d) / kSphereRadius);
  }
  if (std::abs(d.z()) < 1e-12) return background_color();
  const double t = -o.z() / d.z();
  if (t <= 0) return background_color();
  const Eigen::Vector3d p = o + t * d;
  if (std::abs(p.x()) > kPlaneHalfSize || std::abs(p.y()) > kPlaneHalfSize) return background_color();
  if (hit_hole && surface.kind == SceneKind::Hole) *hit_hole = in_hole(p.x(), p.y(), surface.hole_radius);
  return plane_color(surface.kind, p.x(), p.y(), surface.checker_cell, surface.hole_radius);
}

Tensor<float> trace_view(const Surface& surface, int supersample, const Intrinsics& k, const Pose& pose,
                         Tensor<float>* hole_mask) {
  const int ss = std::max(1, supersample);
  const int w = k.width, h = k.height;
  Tensor<float> img({3, h, w});
  if (hole_mask) *hole_mask = Tensor<float>({1, h, w});
  const Eigen::Matrix3d rt = pose.rotation.toRotationMatrix().transpose();
  const Eigen::Vector3d eye = pose.center();
  parallel_for(h, [&](std::int64_t j) {
    for (int i = 0; i < w; ++i) {
      std::array<double, 3> acc{0, 0, 0};
      int hole_hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double x = i + (sx + 0.5) / ss - 0.5;
          const double y = static_cast<double>(j) + (sy + 0.5) / ss - 0.5;
          const Eigen::Vector3d dir = (rt * Eigen::Vector3d((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)).normalized();
          bool hole = false;
          const auto c = trace_ray(surface, eye, dir, &hole);
          for (int a = 0; a < 3; ++a) acc[static_cast<std::size_t>(a)] += c[static_cast<std::size_t>(a)];
          hole_hits += hole;
        }
      for (int a = 0; a < 3; ++a) img(a, static_cast<int>(j), i) = static_cast<float>(acc[static_cast<std::size_t>(a)] / (ss * ss));
      if (hole_mask) (*hole_mask)(0, static_cast<int>(j), i) = hole_hits * 2 >= ss * ss ? 1.0f : 0.0f;
    }
  });
  return img;
}

Surface surface_of(const SyntheticScene& scene) {
  return {scene.options.kind, scene.checker_cell, scene.options.hole_radius};
}

SyntheticScene make_synthetic_scene(const SyntheticOptions& opt) {
  if (opt.points < 100) throw std::invalid_argument("synthetic scenes need at least 100 points");
  if (opt.cameras < 9) throw std::invalid_argument("synthetic scenes need at least 9 cameras");
  if (opt.resolution < 8) throw std::invalid_argument("synthetic images must be at least 8x8");
  if (opt.kind == SceneKind::Hole && !(opt.hole_radius > 0 && opt.hole_radius < kPlaneHalfSize)) {
    throw std::invalid_argument("hole radius must lie in (0, 1)");
  }
  SyntheticScene s;
  s.options = opt;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> jitter(-0.25, 0.25);
  std::vector<float>& pos = s.points.positions;

  if (opt.kind == SceneKind::Sphere) {
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int k = 0; k < opt.points; ++k) {
      const double z = 1.0 - 2.0 * (k + 0.5 + jitter(rng)) / opt.points;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * k + jitter(rng) * golden;
      for (double v : {r * std::cos(phi), r * std::sin(phi), z}) pos.push_back(static_cast<float>(kSphereRadius * v));
    }
    s.point_spacing = std::sqrt(4.0 * std::numbers::pi * kSphereRadius * kSphereRadius / opt.points);
  } else {
    // Stratified jittered grid. The hole scene grows the grid until at
    // least `points` candidates survive outside the disc, then drops a
    // random surplus.
    const double area = 4.0 * kPlaneHalfSize * kPlaneHalfSize;
    const double keep = opt.kind == SceneKind::Hole ? 1.0 - std::numbers::pi * opt.hole_radius * opt.hole_radius / area : 1.0;
    int candidates = static_cast<int>(std::ceil(opt.points / keep));
    int cols = 0, rows = 0;
    double cw = 0, ch = 0;
    for (;;) {
      cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(candidates))));
      rows = (candidates + cols - 1) / cols;
      cw = 2.0 * kPlaneHalfSize / cols;
      ch = 2.0 * kPlaneHalfSize / rows;
      std::mt19937_64 grid_rng(opt.seed);
      pos.clear();
      for (int k = 0; k < candidates; ++k) {
        const double x = -kPlaneHalfSize + (k % cols + 0.5 + jitter(grid_rng)) * cw;
        const double y = -kPlaneHalfSize + (k / cols + 0.5 + jitter(grid_rng)) * ch;
        if (opt.kind == SceneKind::Hole && in_hole(x, y, opt.hole_radius)) continue;
        for (double v : {x, y, 0.0}) pos.push_back(static_cast<float>(v));
      }
      if (pos.size() >= 3 * static_cast<std::size_t>(opt.points)) break;
      candidates += opt.points / 100 + 1;
    }
    const std::size_t have = pos.size() / 3;
    if (have > static_cast<std::size_t>(opt.points)) {
      std::vector<std::size_t> idx(have);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opt.points));
      std::sort(idx.begin(), idx.end());
      std::vector<float> kept;
      for (std::size_t i : idx) kept.insert(kept.end(), pos.begin() + 3 * i, pos.begin() + 3 * i + 3);
      pos = std::move(kept);
    }
    s.point_spacing = std::sqrt(cw * ch);
    s.checker_cell = 4.0 * s.point_spacing;
  }

  const std::size_t n = s.points.size();
  s.points.colors.resize(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d p(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
    const auto c = opt.kind == SceneKind::Sphere ? sphere_color(p / kSphereRadius)
                                                 : plane_color(opt.kind, p.x(), p.y(), s.checker_cell, opt.hole_radius);
    for (int a = 0; a < 3; ++a) s.points.colors[3 * i + static_cast<std::size_t>(a)] = quantize(static_cast<float>(c[static_cast<std::size_t>(a)]));
  }
  s.cloud = make_point_cloud(s.points, opt.features, opt.seed + 1);

  const double elevation = (opt.kind == SceneKind::Sphere ? 20.0 : 55.0) * std::numbers::pi / 180.0;
  const double distance = 2.4;
  const int res = opt.resolution;
  Intrinsics k;
  k.width = k.height = res;
  k.fx = k.fy = res / (2.0 * std::tan(0.5 * kFieldOfViewDeg * std::numbers::pi / 180.0));
  k.cx = k.cy = 0.5 * (res - 1);
  for (int c = 0; c < opt.cameras; ++c) {
    const double az = 2.0 * std::numbers::pi * c / opt.cameras;
    const Eigen::Vector3d eye(distance * std::cos(elevation) * std::cos(az), distance * std::cos(elevation) * std::sin(az),
                              distance * std::sin(elevation));
    Frame f;
    f.camera.intrinsics = k;
    f.camera.pose = look_at(eye);
    s.frames.frames.push_back(f);
  }
  s.frames.assign_split();
  if (!opt.render_images) return s;

  for (const Frame& f : s.frames.frames) {
    Tensor<float> mask;
    s.images.push_back(trace_view(surface_of(s), opt.supersample, k, f.camera.pose,
                                  opt.kind == SceneKind::Hole ? &mask : nullptr));
    if (opt.kind == SceneKind::Hole) s.hole_masks.push_back(std::move(mask));
  }
  return s;
}

void save_synthetic_scene(SyntheticScene& scene, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw DataError("cannot create " + dir + ": " + ec.message());
  for (std::size_t i = 0; i < scene.frames.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.png", i);
    const std::string path = (fs::path(dir) / "images" / name).string();
    if (i < scene.images.size()) write_image(path, scene.images[i]);
    scene.frames.frames[i].image = path;
  }
  write_ply((fs::path(dir) / "points.ply").string(), scene.points, true);
  write_cameras((fs::path(dir) / "cameras.json").string(), scene.frames);
}

TrainingData training_data(const SyntheticScene& scene) {
  TrainingData d;
  d.images = scene.images;
  std::vector<Pose> poses;
  for (const Frame& f : scene.frames.frames) poses.push_back(f.camera.pose);
  d.reference = [surface = surface_of(scene), ss = scene.options.supersample,
                 poses = std::move(poses)](int frame, const Intrinsics& k) {
    return trace_view(surface, ss, k, poses.at(static_cast<std::size_t>(frame)), nullptr);
  };
  d.train = scene.frames.train_indices();
  d.test = scene.frames.test_indices();
  return d;
}

TrainingData load_training_data(const FrameSet& frames) {
  TrainingData d;
  for (std::size_t i = 0; i < frames.frames.size(); ++i) {
    const Frame& f = frames.frames[i];
    if (f.image.empty()) throw DataError("frame " + std::to_string(i) + " has no image");
    Tensor<float> img = read_image(f.image);
    if (img.dim(1) != f.camera.intrinsics.height || img.dim(2) != f.camera.intrinsics.width) {
      throw DataError(f.image + " is " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) +
                      " but frame " + std::to_string(i) + " expects " + std::to_string(f.camera.intrinsics.width) +
                      "x" + std::to_string(f.camera.intrinsics.height));
    }
    d.images.push_back(std::move(img));
  }
  d.train = frames.train_indices();
  d.test = frames.test_indices();
  return d;
}

BenchmarkResult benchmark_render(const Model<float>& model, const RenderView& view, int repetitions, int warmup) {
  using Clock = std::chrono::steady_clock;
  BenchmarkResult r;
  r.points = model.point_count();
  r.layers = model.config.layers;
  r.width = view.intrinsics.width;
  r.height = view.intrinsics.height;
  r.repetitions = repetitions;
  for (int i = 0; i < warmup; ++i) render(model, view);
  std::vector<double> count, splat, sort, raster, net, tone, total;
  RasterStats stats;
  for (int i = 0; i < repetitions; ++i) {
    RenderCache<float> cache;
    RenderTimings t;
    const auto t0 = Clock::now();
    render(model, view, &cache, &t);
    const auto t1 = Clock::now();
    count.push_back(t.raster_stages.count_alloc_ms);
    splat.push_back(t.raster_stages.splat_ms);
    sort.push_back(t.raster_stages.sort_blend_ms);
    raster.push_back(t.raster_ms);
    net.push_back(t.network_ms);
    tone.push_back(t.tonemap_ms);
    total.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    stats = cache.raster.stats;
  }
  r.count_alloc_ms = median(count);
  r.splat_ms = median(splat);
  r.sort_blend_ms = median(sort);
  r.raster_ms = median(raster);
  r.network_ms = median(net);
  r.tonemap_ms = median(tone);
  r.total_ms = median(total);
  r.fragments_per_point = stats.visible_points ? static_cast<double>(stats.fragments) / stats.visible_points : 0.0;
  r.max_fragments_per_point = stats.max_fragments_per_point;
  r.mean_list_length = stats.nonempty_pixels ? static_cast<double>(stats.kept) / stats.nonempty_pixels : 0.0;
  r.truncation_rate = stats.nonempty_pixels ? static_cast<double>(stats.truncated_pixels) / stats.nonempty_pixels : 0.0;
  return r;
}

std::string benchmark_csv(const std::vector<BenchmarkResult>& rows) {
  std::ostringstream out;
  out << "points,layers,width,height,repetitions,count_alloc_ms,splat_ms,sort_blend_ms,raster_ms,network_ms,"
         "tonemap_ms,total_ms,fragments_per_point,max_fragments_per_point,mean_list_length,truncation_rate\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%d,%d,%d,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%d,%.4f,%.6f\n", r.points,
                  r.layers, r.width, r.height, r.repetitions, r.count_alloc_ms, r.splat_ms, r.sort_blend_ms,
                  r.raster_ms, r.network_ms, r.tonemap_ms, r.total_ms, r.fragments_per_point,
                  r.max_fragments_per_point, r.mean_list_length, r.truncation_rate);
    out << buf;
  }
  return out.str();
}

}  // namespace trips
