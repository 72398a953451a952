// Independent reference implementations used by the unit and acceptance tests.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "raster.hpp"
#include "scene.hpp"

namespace oracle {

// Projection through an explicit 4x4 matrix K * [R|t] in homogeneous
// coordinates. Returns (x, y, z) with z the view depth.
Eigen::Vector3d project_homogeneous(const trips::Intrinsics& k, const trips::Pose& pose, const Eigen::Vector3d& world);

// O(N^2) mean distance to the min(k, N-1) nearest neighbours.
std::vector<double> brute_knn_mean(const std::vector<float>& positions, int k = 4);

// Per-pixel reference: collect every fragment of every point, sort the whole
// list by (depth, index), keep the first 16 and composite front to back.
// Constant environment only.
template <typename Real>
trips::ImagePyramid<Real> naive_rasterize(const trips::RasterInputs<Real>& in, const trips::ViewCamera<Real>& camera,
                                          const trips::RasterConfig& config);

// Random points in the frustum of a random camera, sized so that every layer
// sees splats, with a few exact duplicates to exercise tie-breaking.
struct RasterScene {
  trips::Intrinsics intrinsics;
  trips::Pose pose;
  std::vector<double> positions;
  std::vector<double> log_sizes;
  std::vector<double> opacity_logits;
  std::vector<double> descriptors;
  std::vector<double> environment;
  int features = 4;
};

RasterScene random_raster_scene(std::uint64_t seed, int points, int width, int height, int features = 4);

template <typename Real>
trips::RasterInputs<Real> inputs_of(const RasterScene& s, std::vector<std::vector<Real>>& storage);

// Central difference of f at x along coordinate i.
double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                          std::size_t i, double h);

double relative_error(double a, double b, double floor = 1e-9);

}  // namespace oracle
