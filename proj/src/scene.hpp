#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trips {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pinhole intrinsics in pixels. Pixel (i, j) has its center at continuous
// coordinate (i, j).
struct Intrinsics {
  double fx = 1;
  double fy = 1;
  double cx = 0;
  double cy = 0;
  int width = 8;
  int height = 8;

  double focal() const { return fx == fy ? fx : std::sqrt(fx * fy); }
};

// World -> view rigid transform. View space is right-handed with +z looking
// into the screen, +x right and +y down.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d to_view(const Eigen::Vector3d& world) const { return rotation * world + translation; }
  Eigen::Vector3d center() const { return -(rotation.conjugate() * translation); }
};

// Left-composes exp(tangent) onto `pose`: tangent = (axis-angle w, translation v),
// R' = Exp(w) R, t' = Exp(w) t + v. Result is renormalized.
Pose compose_tangent(const Pose& pose, const std::array<double, 6>& tangent);

struct Camera {
  Intrinsics intrinsics;
  Pose pose;
  double exposure = 0;  // EV, log2 units
  double wb_red = 1;
  double wb_blue = 1;
};

struct Frame {
  Camera camera;
  std::string image;
  bool test = false;
};

struct FrameSet {
  std::vector<Frame> frames;

  // Every 8th frame (0, 8, 16, ...) is held out.
  void assign_split();
  std::vector<int> train_indices() const;
  std::vector<int> test_indices() const;
};

enum class EnvMode { Constant, Equirectangular };

struct EnvironmentMap {
  EnvMode mode = EnvMode::Constant;
  int features = 4;
  int height = 0;  // equirectangular only; width = 2 * height
  std::vector<float> values;

  static EnvironmentMap constant(int features, float value = 0.0f);
  static EnvironmentMap equirectangular(int features, int height, float value = 0.0f);
  int width() const { return 2 * height; }
};

// Optimizable point set. Sizes and opacities are stored unconstrained
// (log and logit) so that gradient steps cannot leave their domains.
struct PointCloud {
  int features = 4;
  std::vector<float> positions;       // N x 3
  std::vector<float> log_sizes;       // N
  std::vector<float> opacity_logits;  // N
  std::vector<float> descriptors;     // N x features

  std::size_t size() const { return log_sizes.size(); }
  float world_size(std::size_t i) const { return std::exp(log_sizes[i]); }
  float opacity(std::size_t i) const { return 1.0f / (1.0f + std::exp(-opacity_logits[i])); }
  Eigen::Vector3d position(std::size_t i) const {
    return {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]};
  }

  // Allocates N points at the given positions with unit size, opacity 0.5 and
  // zero descriptors.
  static PointCloud from_positions(std::vector<float> positions, int features);
  void check_consistent() const;
};

// Largest bounding-box side of the positions.
double scene_extent(std::span<const float> positions);

// Mean distance from every point to its min(4, N-1) nearest neighbours,
// computed on a uniform hash grid with cell = extent / cbrt(N).
std::vector<double> knn_mean_distances(std::span<const float> positions, int k = 4);

// Sets log_sizes from knn_mean_distances; coincident points are clamped to
// 1e-6 of the scene extent.
void init_point_sizes(PointCloud& cloud);

struct ValidationReport {
  bool fatal = false;
  std::vector<std::string> errors;
  std::vector<std::string> warnings;

  bool clean() const { return !fatal && errors.empty() && warnings.empty(); }
  std::string summary() const;
};

ValidationReport validate_scene(const PointCloud& cloud, const FrameSet& frames, double near = 0.01);

}  // namespace trips
