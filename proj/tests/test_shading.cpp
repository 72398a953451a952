#include <doctest.h>

#include <numbers>
#include <random>

#include "oracles.hpp"
#include "pipeline.hpp"
#include "shading.hpp"

using namespace trips;

TEST_CASE("SH basis is orthonormal on the sphere (numerical quadrature)") {
  // midpoint rule in (cos theta, phi), which has uniform measure on the sphere
  const int nz = 200, nphi = 400;
  std::array<std::array<double, kShBasis>, kShBasis> gram{};
  const double dA = (2.0 / nz) * (2 * std::numbers::pi / nphi);
  for (int a = 0; a < nz; ++a) {
    const double z = -1 + (a + 0.5) * 2.0 / nz;
    const double r = std::sqrt(1 - z * z);
    for (int b = 0; b < nphi; ++b) {
      const double phi = (b + 0.5) * 2 * std::numbers::pi / nphi;
      const auto y = sh_basis<double>({r * std::cos(phi), r * std::sin(phi), z});
      for (int i = 0; i < kShBasis; ++i)
        for (int j = 0; j < kShBasis; ++j) gram[i][j] += y[i] * y[j] * dA;
    }
  }
  for (int i = 0; i < kShBasis; ++i)
    for (int j = 0; j < kShBasis; ++j) CHECK(gram[i][j] == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-4).scale(1));
}

TEST_CASE("SH band 0 is constant and shading with only band 0 ignores direction") {
  std::vector<double> coeffs(kShCoefficients, 0.0);
  coeffs[0] = 1.0 / kShBand0;
  coeffs[9] = 0.5 / kShBand0;
  coeffs[18] = 0.25 / kShBand0;
  for (const auto& d : {std::array<double, 3>{1, 0, 0}, std::array<double, 3>{0, 0.6, 0.8}}) {
    const auto rgb = sh_shade(coeffs.data(), 1, d);
    CHECK(rgb[0] == doctest::Approx(1.0));
    CHECK(rgb[1] == doctest::Approx(0.5));
    CHECK(rgb[2] == doctest::Approx(0.25));
  }
}

TEST_CASE("SH jacobian matches finite differences") {
  const std::array<double, 3> d{0.3, -0.5, 0.81};
  const auto jac = sh_basis_jacobian(d);
  for (int a = 0; a < 3; ++a) {
    auto p = d, m = d;
    p[a] += 1e-6;
    m[a] -= 1e-6;
    const auto yp = sh_basis(p), ym = sh_basis(m);
    for (int i = 0; i < kShBasis; ++i) CHECK(jac[i][a] == doctest::Approx((yp[i] - ym[i]) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("SH image backward matches finite differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  Tensor<double> coeffs({27, 4, 5}), dirs({3, 4, 5}), w({3, 4, 5});
  for (double& v : coeffs.values()) v = n01(rng);
  for (double& v : dirs.values()) v = n01(rng);
  for (double& v : w.values()) v = n01(rng);
  auto objective = [&]() {
    const auto rgb = sh_shade_image(coeffs, dirs);
    double s = 0;
    for (std::size_t i = 0; i < rgb.size(); ++i) s += rgb[i] * w[i];
    return s;
  };
  Tensor<double> gc(coeffs.shape()), gd(dirs.shape());
  sh_shade_image_backward(coeffs, dirs, w, &gc, &gd);
  for (auto* pair : {&coeffs, &dirs}) {
    const Tensor<double>& grad = pair == &coeffs ? gc : gd;
    for (std::size_t i = 0; i < pair->size(); i += 3) {
      const double v = (*pair)[i];
      (*pair)[i] = v + 1e-6;
      const double plus = objective();
      (*pair)[i] = v - 1e-6;
      const double minus = objective();
      (*pair)[i] = v;
      CHECK(oracle::relative_error(grad[i], (plus - minus) / 2e-6, 1e-8) < 1e-5);
    }
  }
}

TEST_CASE("neutral tone mapping is the identity on [0,1] and clamps outside") {
  ToneMapParams<double> p;
  Tensor<double> hdr({3, 2, 3});
  const double values[] = {-0.2, 0.0, 0.1, 0.5, 0.999, 1.3};
  for (std::size_t i = 0; i < hdr.size(); ++i) hdr[i] = values[i % 6];
  const auto r2 = radius2_map<double>(SensorMapping{}, 3, 2);
  const auto out = tone_map_image(hdr, p, r2);
  for (std::size_t i = 0; i < hdr.size(); ++i)
    CHECK(out[i] == doctest::Approx(std::clamp(hdr[i], 0.0, 1.0)).epsilon(1e-12));
  const auto knots = response_knots(p, 0);
  for (int j = 0; j < kResponseKnots; ++j) CHECK(knots[static_cast<std::size_t>(j)] == doctest::Approx(j / 31.0));
}

TEST_CASE("exposure, white balance and vignetting") {
  ToneMapParams<double> p;
  p.exposure = 1.0;  // one stop doubles the signal
  p.wb_red = 0.5;
  Tensor<double> hdr({3, 1, 1}, 0.2);
  Tensor<double> r2({1, 1, 1}, 0.0);
  auto out = tone_map_image(hdr, p, r2);
  CHECK(out[0] == doctest::Approx(0.2));  // 0.2 * 2 * 0.5
  CHECK(out[1] == doctest::Approx(0.4));
  p = {};
  p.vignette = {-0.5, 0.0, 0.0};
  r2[0] = 1.0;
  out = tone_map_image(hdr, p, r2);
  CHECK(out[1] == doctest::Approx(0.1));
}

TEST_CASE("response curve is monotone with fixed endpoints") {
  ToneMapParams<double> p;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  for (double& v : p.response) v = 2 * n01(rng);
  for (int c = 0; c < 3; ++c) {
    const auto k = response_knots(p, c);
    CHECK(k.front() == 0.0);
    CHECK(k.back() == doctest::Approx(1.0));
    for (int j = 1; j < kResponseKnots; ++j) CHECK(k[static_cast<std::size_t>(j)] > k[static_cast<std::size_t>(j - 1)]);
    CHECK(apply_response(k, 0.0) == 0.0);
    CHECK(apply_response(k, 1.0) == doctest::Approx(1.0));
  }
}

TEST_CASE("sensor radius uses the full-frame position of zoomed crops") {
  Intrinsics k;
  k.width = 64;
  k.height = 48;
  SensorMapping m = full_sensor(k);
  m.cx = 31.5;
  m.cy = 23.5;
  CHECK(m.radius2(0, 0) == doctest::Approx((31.5 * 31.5 + 23.5 * 23.5) / (40.0 * 40.0)));
  // zoom 2, crop offset (63, 47): crop pixel (0,0) sits at full-frame (31.25, 23.25)
  SensorMapping z = m;
  z.zoom = 2;
  z.offset_x = 63;
  z.offset_y = 47;
  CHECK(z.radius2(0, 0) == doctest::Approx(2 * 0.25 * 0.25 / 1600.0));
}

TEST_CASE("tone map backward matches finite differences away from kinks") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 0.7);
  std::normal_distribution<double> n01;
  ToneMapParams<double> p;
  for (double& v : p.response) v = 0.3 * n01(rng);
  p.exposure = 0.1;
  p.wb_red = 1.05;
  p.wb_blue = 0.9;
  p.vignette = {-0.05, 0.02, -0.01};
  Tensor<double> hdr({3, 5, 6}), w({3, 5, 6});
  for (double& v : hdr.values()) v = u(rng);
  for (double& v : w.values()) v = n01(rng);
  SensorMapping m;
  m.cx = 2.5;
  m.cy = 2;
  m.half_diagonal = 3.9;
  const auto r2 = radius2_map<double>(m, 6, 5);
  auto objective = [&](const ToneMapParams<double>& q, const Tensor<double>& x) {
    const auto out = tone_map_image(x, q, r2);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
    return s;
  };
  Tensor<double> gh(hdr.shape());
  const auto g = tone_map_backward(hdr, p, r2, w, &gh);
  const double h = 1e-7;
  auto fd = [&](auto mutate) {
    ToneMapParams<double> a = p, b = p;
    mutate(a, h);
    mutate(b, -h);
    return (objective(a, hdr) - objective(b, hdr)) / (2 * h);
  };
  CHECK(oracle::relative_error(g.exposure, fd([](auto& q, double d) { q.exposure += d; })) < 1e-5);
  CHECK(oracle::relative_error(g.wb_red, fd([](auto& q, double d) { q.wb_red += d; })) < 1e-5);
  CHECK(oracle::relative_error(g.wb_blue, fd([](auto& q, double d) { q.wb_blue += d; })) < 1e-5);
  for (int i = 0; i < 3; ++i)
    CHECK(oracle::relative_error(g.vignette[static_cast<std::size_t>(i)],
                                 fd([i](auto& q, double d) { q.vignette[static_cast<std::size_t>(i)] += d; })) < 1e-5);
  for (std::size_t i = 0; i < p.response.size(); i += 4)
    CHECK(oracle::relative_error(g.response[i], fd([i](auto& q, double d) { q.response[i] += d; }), 1e-8) < 1e-5);
  for (std::size_t i = 0; i < hdr.size(); i += 5) {
    Tensor<double> a = hdr, b = hdr;
    a[i] += h;
    b[i] -= h;
    CHECK(oracle::relative_error(gh[i], (objective(p, a) - objective(p, b)) / (2 * h)) < 1e-5);
  }
}
