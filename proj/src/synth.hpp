#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "io.hpp"
#include "pipeline.hpp"
#include "training.hpp"

namespace trips {

enum class SceneKind { Plane, Sphere, Hole };

SceneKind parse_scene_kind(const std::string& name);
const char* scene_kind_name(SceneKind kind);

struct SyntheticOptions {
  SceneKind kind = SceneKind::Plane;
  int points = 10000;
  int cameras = 16;
  int resolution = 128;
  std::uint64_t seed = 1;
  int features = 4;
  int supersample = 4;        // analytic rays per pixel per axis
  double hole_radius = 0.35;  // hole scene: radius of the emptied disc
  bool render_images = true;  // false skips ground truth (benchmark scenes)
};

struct SyntheticScene {
  SyntheticOptions options;
  PlyData points;
  PointCloud cloud;
  FrameSet frames;
  std::vector<Tensor<float>> images;      // ground truth per frame, [3,H,W]
  std::vector<Tensor<float>> hole_masks;  // hole scene: [1,H,W], 1 where the pixel sees the removed disc
  double point_spacing = 0;               // mean spacing of the sampling pattern
  double checker_cell = 0;                // plane/hole texture period / 2
};

// What a ray can hit: enough to shade any view of a synthetic scene.
struct Surface {
  SceneKind kind = SceneKind::Plane;
  double checker_cell = 0;
  double hole_radius = 0;
};

Surface surface_of(const SyntheticScene& scene);

inline constexpr double kPlaneHalfSize = 1.0;
inline constexpr double kSphereRadius = 0.8;
inline constexpr double kFieldOfViewDeg = 50.0;

// Surfaces: plane z = 0 over [-1,1]^2 (checkerboard), sphere shell of radius
// 0.8 (smooth colour field), or the plane with a disc of points removed.
// Cameras sit on a ring around +z and look at the origin; ground truth is
// ray traced against the analytic surface, supersampled per pixel.
SyntheticScene make_synthetic_scene(const SyntheticOptions& options);

// Analytic surface colour seen along a world-space ray, or the background.
std::array<double, 3> trace_ray(const Surface& surface, const Eigen::Vector3d& origin,
                                const Eigen::Vector3d& dir, bool* hit_hole = nullptr);

std::array<double, 3> background_color();

// Supersampled ground truth of the analytic surface for any pinhole view.
Tensor<float> trace_view(const Surface& surface, int supersample, const Intrinsics& k, const Pose& pose,
                         Tensor<float>* hole_mask = nullptr);

// Writes points.ply, cameras.json and images/frame_NNN.png under dir.
void save_synthetic_scene(SyntheticScene& scene, const std::string& dir);

TrainingData training_data(const SyntheticScene& scene);
TrainingData load_training_data(const FrameSet& frames);

struct BenchmarkResult {
  std::size_t points = 0;
  int layers = 0;
  int width = 0, height = 0;
  int repetitions = 0;
  double count_alloc_ms = 0;
  double splat_ms = 0;
  double sort_blend_ms = 0;
  double raster_ms = 0;
  double network_ms = 0;
  double tonemap_ms = 0;
  double total_ms = 0;
  double fragments_per_point = 0;
  int max_fragments_per_point = 0;
  double mean_list_length = 0;
  double truncation_rate = 0;
};

// Forward-only timings; medians over `repetitions` after `warmup` discarded runs.
BenchmarkResult benchmark_render(const Model<float>& model, const RenderView& view, int repetitions, int warmup = 3);

std::string benchmark_csv(const std::vector<BenchmarkResult>& rows);

}  // namespace trips
