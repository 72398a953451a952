#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "parallel.hpp"
#include "raster.hpp"

using namespace trips;

namespace {

template <typename Real>
bool pyramids_identical(const ImagePyramid<Real>& a, const ImagePyramid<Real>& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (!a.layers[l].same_shape(b.layers[l])) return false;
    for (std::size_t i = 0; i < a.layers[l].size(); ++i)
      if (a.layers[l][i] != b.layers[l][i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("pyramid geometry halves with ceiling") {
  const auto g = PyramidGeometry::make(13, 7, 4);
  CHECK(g.w[0] == 13);
  CHECK(g.w[1] == 7);
  CHECK(g.w[2] == 4);
  CHECK(g.w[3] == 2);
  CHECK(g.h[3] == 1);
  CHECK(g.pixel_count() == 13 * 7 + 7 * 4 + 4 * 2 + 2 * 1);
  CHECK(g.layer_of(g.offset[2]) == 2);
  CHECK(g.layer_of(g.offset[2] - 1) == 1);
}

TEST_CASE("projection matches a homogeneous 4x4 camera matrix") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto scene = oracle::random_raster_scene(seed, 50, 40, 30);
    const auto cam = ViewCamera<double>::make(scene.intrinsics, scene.pose);
    for (std::size_t i = 0; i < 50; ++i) {
      const Eigen::Vector3d w(scene.positions[3 * i], scene.positions[3 * i + 1], scene.positions[3 * i + 2]);
      const auto ref = oracle::project_homogeneous(scene.intrinsics, scene.pose, w);
      const auto p = project_point(cam, scene.positions.data() + 3 * i, 0.01);
      REQUIRE(p.has_value());
      CHECK(p->x == doctest::Approx(ref.x()).epsilon(1e-12));
      CHECK(p->y == doctest::Approx(ref.y()).epsilon(1e-12));
      CHECK(p->z == doctest::Approx(ref.z()).epsilon(1e-12));
    }
  }
}

TEST_CASE("points behind the near plane are culled") {
  ViewCamera<double> cam = ViewCamera<double>::make(Intrinsics{}, Pose{});
  const double behind[3] = {0, 0, -1};
  const double close[3] = {0, 0, 0.005};
  const double front[3] = {0, 0, 2};
  CHECK_FALSE(project_point(cam, behind, 0.01).has_value());
  CHECK_FALSE(project_point(cam, close, 0.01).has_value());
  CHECK(project_point(cam, front, 0.01).has_value());
}

TEST_CASE("layer selection: worked examples") {
  // s = 3 lies between layers 1 (2 px) and 2 (4 px), halfway.
  auto sel = select_layers(3.0, 4);
  CHECK(sel.count == 2);
  CHECK(sel.layer[0] == 1);
  CHECK(sel.layer[1] == 2);
  CHECK(sel.iota[0] == doctest::Approx(0.5));
  CHECK(sel.iota[1] == doctest::Approx(0.5));
  // exact power of two: single layer
  sel = select_layers(4.0, 4);
  CHECK(sel.count == 1);
  CHECK(sel.layer[0] == 2);
  CHECK(sel.iota[0] == 1.0);
  // beyond the coarsest layer
  sel = select_layers(100.0, 4);
  CHECK(sel.count == 1);
  CHECK(sel.layer[0] == 3);
  CHECK(sel.iota[0] == 1.0);
  // sub-pixel points fade toward the floor weight
  sel = select_layers(0.0, 4);
  CHECK(sel.layer[0] == 0);
  CHECK(sel.iota[0] == doctest::Approx(kSmallPointFloor));
}

TEST_CASE("layer weights sum to one and are continuous at powers of two") {
  for (int layers = 3; layers <= 8; ++layers) {
    for (double s = 1.0; s < std::ldexp(1.0, layers + 1); s *= 1.0173) {
      const auto sel = select_layers(s, layers);
      CHECK(sel.iota[0] + (sel.count == 2 ? sel.iota[1] : 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (int k = 0; k <= layers; ++k) {
      const double b = std::ldexp(1.0, k);
      const auto lo = select_layers(b - 1e-4, layers);
      const auto hi = select_layers(b + 1e-4, layers);
      for (int layer = 0; layer < layers; ++layer) {
        auto weight = [layer](const LayerSelection<double>& sel) {
          double w = 0;
          for (int j = 0; j < sel.count; ++j)
            if (sel.layer[static_cast<std::size_t>(j)] == layer) w += sel.iota[static_cast<std::size_t>(j)];
          return w;
        };
        CHECK(std::abs(weight(lo) - weight(hi)) < 1e-3);
      }
    }
  }
}

TEST_CASE("splat_point writes at most 8 fragments whose weights sum to alpha") {
  const auto g = PyramidGeometry::make(64, 64, 6);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    ProjectedPoint<double> p;
    p.x = 5 + 50 * u(rng);
    p.y = 5 + 50 * u(rng);
    p.z = 1;
    p.s = std::exp(std::log(1.0) + std::log(30.0) * u(rng));
    const double alpha = u(rng);
    const auto sel = select_layers(p.s, g.layers);
    const auto frags = splat_point(p, alpha, sel, g, true);
    CHECK(frags.count <= 8);
    double total = 0;
    for (int i = 0; i < frags.count; ++i) total += frags.items[static_cast<std::size_t>(i)].gamma;
    CHECK(total == doctest::Approx(alpha).epsilon(1e-6));
  }
}

TEST_CASE("bilinear weights of the footprint") {
  ProjectedPoint<double> p;
  p.x = 2.25;
  p.y = 3.5;
  p.z = 1;
  p.s = 1;
  const auto g = PyramidGeometry::make(8, 8, 3);
  const auto frags = splat_point(p, 1.0, select_layers(1.0, 3), g);
  REQUIRE(frags.count == 4);
  CHECK(frags.items[0].px == 2);
  CHECK(frags.items[0].py == 3);
  CHECK(frags.items[0].beta == doctest::Approx(0.75 * 0.5));
  CHECK(frags.items[1].beta == doctest::Approx(0.25 * 0.5));
}

TEST_CASE("blend_pixel composites front to back") {
  // two fragments, gammas 0.5 and 0.5, descriptors 1 and 3, background 10:
  // 0.5*1 + 0.25*3 + 0.25*10 = 3.75, alpha = 0.75
  const std::vector<double> gammas{0.5, 0.5};
  const std::vector<int> points{0, 1};
  const std::vector<double> desc{1.0, 3.0};
  const double bg = 10;
  double out[2];
  blend_pixel<double>(gammas, points, desc, 1, &bg, out);
  CHECK(out[0] == doctest::Approx(3.75));
  CHECK(out[1] == doctest::Approx(0.75));
}

TEST_CASE("forward pyramid equals the naive full-sort reference bit for bit") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const int n = 100 + static_cast<int>(seed) * 150;
    const auto scene = oracle::random_raster_scene(seed, n, 37 + static_cast<int>(seed), 29);
    std::vector<std::vector<float>> storage;
    const auto in = oracle::inputs_of<float>(scene, storage);
    const auto cam = ViewCamera<float>::make(scene.intrinsics, scene.pose);
    RasterConfig config;
    config.layers = 3 + static_cast<int>(seed % 4);
    RasterSaved<float> saved;
    const auto fast = rasterize_forward(in, cam, config, &saved);
    const auto ref = oracle::naive_rasterize(in, cam, config);
    CHECK(pyramids_identical(fast, ref));
    CHECK(saved.stats.max_fragments_per_point <= 8);
  }
}

TEST_CASE("per-pixel lists are truncated to the 16 nearest fragments") {
  // 40 identical large points stacked in depth over one pixel neighbourhood.
  Intrinsics k;
  k.width = k.height = 8;
  k.fx = k.fy = 8;
  k.cx = k.cy = 3.5;
  std::vector<double> pos, logs, opac, desc, env{0.0};
  for (int i = 0; i < 40; ++i) {
    pos.insert(pos.end(), {0.0, 0.0, 1.0 + 0.01 * i});
    logs.push_back(std::log(0.5 / 8 * (1.0 + 0.01 * i)));
    opac.push_back(0.0);
    desc.push_back(i < 16 ? 1.0 : 100.0);
  }
  RasterInputs<double> in;
  in.positions = pos;
  in.log_sizes = logs;
  in.opacity_logits = opac;
  in.descriptors = desc;
  in.environment = env;
  in.features = 1;
  RasterSaved<double> saved;
  const auto pyr = rasterize_forward(in, ViewCamera<double>::make(k, Pose{}), RasterConfig{3, 0.01}, &saved);
  // Only the first 16 (descriptor 1) contribute; the output never sees 100.
  CHECK(pyr.layers[0](0, 3, 3) < 1.0);
  CHECK(saved.stats.truncated_pixels > 0);
  for (std::size_t p = 0; p < saved.list_length.size(); ++p) CHECK(saved.list_length[p] <= 16);
}

TEST_CASE("forward pass is identical across thread counts") {
  const auto scene = oracle::random_raster_scene(11, 3000, 64, 48);
  std::vector<std::vector<float>> storage;
  const auto in = oracle::inputs_of<float>(scene, storage);
  const auto cam = ViewCamera<float>::make(scene.intrinsics, scene.pose);
  set_thread_count(1);
  const auto one = rasterize_forward(in, cam, RasterConfig{5, 0.01}, nullptr);
  set_thread_count(4);
  const auto four = rasterize_forward(in, cam, RasterConfig{5, 0.01}, nullptr);
  set_thread_count(0);
  CHECK(pyramids_identical(one, four));
}

TEST_CASE("rasterizer backward matches central differences") {
  const auto scene = oracle::random_raster_scene(21, 60, 24, 20, 3);
  std::vector<std::vector<double>> storage;
  auto in = oracle::inputs_of<double>(scene, storage);
  const auto cam = ViewCamera<double>::make(scene.intrinsics, scene.pose);
  const RasterConfig config{4, 0.01};

  // Fixed random linear functional of the pyramid.
  RasterSaved<double> saved;
  const auto base = rasterize_forward(in, cam, config, &saved);
  ImagePyramid<double> weights = base;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  for (auto& l : weights.layers)
    for (double& v : l.values()) v = n01(rng);
  auto objective = [&]() {
    const auto p = rasterize_forward(in, cam, config, nullptr);
    double s = 0;
    for (std::size_t l = 0; l < p.layers.size(); ++l)
      for (std::size_t i = 0; i < p.layers[l].size(); ++i) s += p.layers[l][i] * weights.layers[l][i];
    return s;
  };
  const auto grads = rasterize_backward(in, saved, weights);
  const auto sig0 = raster_signature(in, saved);

  auto check_array = [&](std::vector<double>& values, const std::vector<double>& analytic) {
    int checked = 0;
    for (std::size_t i = 0; i < values.size(); i += 3) {
      const double v = values[i];
      const double h = 1e-6 * std::max(1.0, std::abs(v));
      bool smooth = true;
      for (double d : {-h, h}) {
        values[i] = v + d;
        RasterSaved<double> probe;
        rasterize_forward(in, cam, config, &probe);
        smooth = smooth && raster_signature(in, probe) == sig0;
      }
      values[i] = v + h;
      const double plus = objective();
      values[i] = v - h;
      const double minus = objective();
      values[i] = v;
      if (!smooth) continue;
      const double numeric = (plus - minus) / (2 * h);
      // Rounding in the differences is about eps * |objective| / h ~ 3e-9
      // here, so gradients below 1e-3 are compared at 1e-8 absolute.
      INFO("index " << i << " analytic " << analytic[i] << " numeric " << numeric);
      CHECK(oracle::relative_error(analytic[i], numeric, 1e-3) < 1e-5);
      ++checked;
    }
    CHECK(checked > 0);
  };
  check_array(storage[0], grads.positions);
  check_array(storage[1], grads.log_sizes);
  check_array(storage[2], grads.opacity_logits);
  check_array(storage[3], grads.descriptors);
  check_array(storage[4], grads.environment);
}
