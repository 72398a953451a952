#include "scene.hpp"

#include <algorithm>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "parallel.hpp"

namespace trips {

Pose compose_tangent(const Pose& pose, const std::array<double, 6>& tangent) {
  const Eigen::Vector3d w(tangent[0], tangent[1], tangent[2]);
  const Eigen::Vector3d v(tangent[3], tangent[4], tangent[5]);
  const double angle = w.norm();
  Eigen::Quaterniond delta = Eigen::Quaterniond::Identity();
  if (angle > 0) delta = Eigen::Quaterniond(Eigen::AngleAxisd(angle, w / angle));
  Pose out;
  out.rotation = (delta * pose.rotation).normalized();
  out.translation = delta * pose.translation + v;
  return out;
}

void FrameSet::assign_split() {
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i].test = (i % 8 == 0);
}

std::vector<int> FrameSet::train_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (!frames[i].test) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> FrameSet::test_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (frames[i].test) out.push_back(static_cast<int>(i));
  return out;
}

EnvironmentMap EnvironmentMap::constant(int features, float value) {
  EnvironmentMap env;
  env.mode = EnvMode::Constant;
  env.features = features;
  env.values.assign(static_cast<std::size_t>(features), value);
  return env;
}

EnvironmentMap EnvironmentMap::equirectangular(int features, int height, float value) {
  EnvironmentMap env;
  env.mode = EnvMode::Equirectangular;
  env.features = features;
  env.height = height;
  env.values.assign(static_cast<std::size_t>(features) * height * 2 * height, value);
  return env;
}

PointCloud PointCloud::from_positions(std::vector<float> positions, int features) {
  if (positions.size() % 3 != 0) throw DataError("position array length is not a multiple of 3");
  PointCloud cloud;
  cloud.features = features;
  const std::size_t n = positions.size() / 3;
  cloud.positions = std::move(positions);
  cloud.log_sizes.assign(n, 0.0f);
  cloud.opacity_logits.assign(n, 0.0f);
  cloud.descriptors.assign(n * static_cast<std::size_t>(features), 0.0f);
  return cloud;
}

void PointCloud::check_consistent() const {
  const std::size_t n = size();
  if (positions.size() != 3 * n || opacity_logits.size() != n ||
      descriptors.size() != n * static_cast<std::size_t>(features)) {
    throw DataError("point cloud arrays have inconsistent lengths");
  }
}

double scene_extent(std::span<const float> positions) {
  if (positions.empty()) return 0;
  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i + 2 < positions.size(); i += 3) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], static_cast<double>(positions[i + a]));
      hi[a] = std::max(hi[a], static_cast<double>(positions[i + a]));
    }
  }
  return std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
}

namespace {

inline double squared_distance(std::span<const float> p, std::size_t i, std::size_t j) {
  const double dx = static_cast<double>(p[3 * i]) - p[3 * j];
  const double dy = static_cast<double>(p[3 * i + 1]) - p[3 * j + 1];
  const double dz = static_cast<double>(p[3 * i + 2]) - p[3 * j + 2];
  return dx * dx + dy * dy + dz * dz;
}

// Keeps the k smallest values seen, ascending.
struct BestK {
  int k;
  int count = 0;
  std::array<double, 16> d{};

  void offer(double v) {
    if (count == k && v >= d[k - 1]) return;
    int pos = count < k ? count++ : k - 1;
    while (pos > 0 && d[pos - 1] > v) {
      d[pos] = d[pos - 1];
      --pos;
    }
    d[pos] = v;
  }
  double mean_sqrt() const {
    double sum = 0;
    for (int i = 0; i < count; ++i) sum += std::sqrt(d[i]);
    return sum / count;
  }
};

}  // namespace

std::vector<double> knn_mean_distances(std::span<const float> positions, int k) {
  const std::size_t n = positions.size() / 3;
  std::vector<double> out(n, 0.0);
  if (n < 2) return out;
  k = std::min<int>({k, static_cast<int>(n - 1), 16});

  double lo[3] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                  std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], static_cast<double>(positions[3 * i + a]));
  const double extent = scene_extent(positions);
  double cell = extent / std::cbrt(static_cast<double>(n));
  if (!(cell > 0)) cell = 1.0;

  std::vector<std::array<std::int64_t, 3>> coord(n);
  std::int64_t dims[3] = {1, 1, 1};
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      coord[i][a] = static_cast<std::int64_t>(std::floor((positions[3 * i + a] - lo[a]) / cell));
      dims[a] = std::max(dims[a], coord[i][a] + 1);
    }
  }
  auto key_of = [&](std::int64_t x, std::int64_t y, std::int64_t z) { return (x * dims[1] + y) * dims[2] + z; };

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<std::int64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = key_of(coord[i][0], coord[i][1], coord[i][2]);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : a < b;
  });
  std::unordered_map<std::int64_t, std::pair<std::size_t, std::size_t>> cells;
  cells.reserve(n);
  for (std::size_t b = 0; b < n;) {
    std::size_t e = b;
    while (e < n && keys[order[e]] == keys[order[b]]) ++e;
    cells.emplace(keys[order[b]], std::make_pair(b, e));
    b = e;
  }
  const std::int64_t max_ring = std::max({dims[0], dims[1], dims[2]});

  parallel_for(static_cast<std::int64_t>(n), [&](std::int64_t idx) {
    const std::size_t i = static_cast<std::size_t>(idx);
    BestK best{k};
    const auto& h = coord[i];
    for (std::int64_t r = 0; r <= max_ring; ++r) {
      for (std::int64_t dx = -r; dx <= r; ++dx) {
        const std::int64_t x = h[0] + dx;
        if (x < 0 || x >= dims[0]) continue;
        for (std::int64_t dy = -r; dy <= r; ++dy) {
          const std::int64_t y = h[1] + dy;
          if (y < 0 || y >= dims[1]) continue;
          const bool face = std::abs(dx) == r || std::abs(dy) == r;
          for (std::int64_t dz = -r; dz <= r; dz += (face ? 1 : std::max<std::int64_t>(1, 2 * r))) {
            const std::int64_t z = h[2] + dz;
            if (z < 0 || z >= dims[2]) continue;
            auto it = cells.find(key_of(x, y, z));
            if (it == cells.end()) continue;
            for (std::size_t s = it->second.first; s < it->second.second; ++s) {
              const std::size_t j = order[s];
              if (j != i) best.offer(squared_distance(positions, i, j));
            }
          }
        }
      }
      // Every point not yet visited lies at least r cells away.
      const double bound = static_cast<double>(r) * cell;
      if (best.count == k && best.d[k - 1] <= bound * bound) break;
    }
    out[i] = best.mean_sqrt();
  });
  return out;
}

void init_point_sizes(PointCloud& cloud) {
  cloud.check_consistent();
  if (cloud.size() < 2) throw DataError("init_point_sizes needs at least two points");
  const auto dist = knn_mean_distances(cloud.positions, 4);
  const double extent = scene_extent(cloud.positions);
  const double floor_size = 1e-6 * (extent > 0 ? extent : 1.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    cloud.log_sizes[i] = static_cast<float>(std::log(std::max(dist[i], floor_size)));
  }
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  for (const auto& e : errors) os << "error: " << e << '\n';
  for (const auto& w : warnings) os << "warning: " << w << '\n';
  return os.str();
}

ValidationReport validate_scene(const PointCloud& cloud, const FrameSet& frames, double near) {
  ValidationReport report;
  try {
    cloud.check_consistent();
  } catch (const DataError& e) {
    report.fatal = true;
    report.errors.push_back(e.what());
    return report;
  }
  const std::size_t n = cloud.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = cloud.position(i);
    if (!p.allFinite()) {
      report.fatal = true;
      report.errors.push_back("point " + std::to_string(i) + " has a non-finite position");
    }
  }
  if (report.fatal) return report;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(cloud.log_sizes[i])) report.errors.push_back("point " + std::to_string(i) + " has a non-finite size");
    const float logit = cloud.opacity_logits[i];
    if (!std::isfinite(logit)) {
      report.errors.push_back("point " + std::to_string(i) + " has a non-finite opacity");
    } else {
      const float a = cloud.opacity(i);
      if (!(a > 0.0f && a < 1.0f)) report.warnings.push_back("point " + std::to_string(i) + " opacity saturated at " + std::to_string(a));
    }
    for (int f = 0; f < cloud.features; ++f) {
      if (!std::isfinite(cloud.descriptors[i * cloud.features + f])) {
        report.errors.push_back("point " + std::to_string(i) + " has a non-finite descriptor");
        break;
      }
    }
  }
  for (std::size_t fi = 0; fi < frames.frames.size(); ++fi) {
    const Camera& cam = frames.frames[fi].camera;
    const Intrinsics& k = cam.intrinsics;
    if (!(k.fx > 0 && k.fy > 0)) {
      report.errors.push_back("frame " + std::to_string(fi) + " has non-positive focal length");
      continue;
    }
    bool any = false;
    for (std::size_t i = 0; i < n && !any; ++i) {
      const Eigen::Vector3d p = cam.pose.to_view(cloud.position(i));
      if (p.z() <= near) continue;
      const double x = k.fx * p.x() / p.z() + k.cx;
      const double y = k.fy * p.y() / p.z() + k.cy;
      any = x > -0.5 && x < k.width - 0.5 && y > -0.5 && y < k.height - 0.5;
    }
    if (!any) {
      const std::string name = frames.frames[fi].image.empty() ? std::to_string(fi) : frames.frames[fi].image;
      report.warnings.push_back("frame " + name + " sees no points in its frustum");
    }
  }
  return report;
}

}  // namespace trips
