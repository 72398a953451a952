#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace trips {

struct GradcheckOptions {
  int points = 200;
  int resolution = 32;
  int layers = 4;
  int features = 4;
  bool sh = true;
  EnvMode env_mode = EnvMode::Constant;
  std::uint64_t seed = 3;
  double step = 1e-4;          // relative central-difference step
  double kink_radius = 1e-3;   // samples this close to a discrete change are excluded
  double abs_floor = 1e-7;     // relative-error denominator floor
  double ssim_weight = 0.2;
  std::size_t samples_per_entry = 24;
};

struct GradcheckGroup {
  std::string group;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst_entry;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// Random 64-bit scene: points in front of one camera with random sizes,
// opacities and descriptors, non-neutral tone mapping and a random target.
struct GradcheckProblem {
  Model<double> model;
  RenderView view;
  Tensor<double> target;
};

GradcheckProblem random_gradcheck_problem(const GradcheckOptions& options);

// Problem built from an existing scene: the first camera, rescaled so the
// longer side is options.resolution, against a random target.
GradcheckProblem scene_gradcheck_problem(const PointCloud& cloud, const std::vector<Camera>& cameras,
                                         const GradcheckOptions& options);

// Checks d(loss)/d(parameter) for every parameter group of the full pipeline
// (rasterizer, decoder, SH, tone mapper, pose). Groups: position, size,
// opacity, descriptor, environment, network, sh-output, tonemap, exposure, pose.
std::vector<GradcheckGroup> gradcheck_suite(GradcheckProblem& problem, const GradcheckOptions& options);

}  // namespace trips
