#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "params.hpp"
#include "tensor.hpp"

using namespace trips;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> n01;
  for (double& v : t.values()) v = n01(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("tensor shape checks") {
  CHECK_THROWS_AS(Tensor<float>({2, 0, 3}), ShapeError);
  Tensor<float> t({2, 3, 4}, 1.5f);
  CHECK(t.size() == 24);
  CHECK(t(1, 2, 3) == 1.5f);
  CHECK(shape_string(t.shape()) == "[2,3,4]");
  Tensor<float> a({1, 2, 2}), b({2, 2, 2});
  CHECK(concat_channels(a, b).dim(0) == 3);
  CHECK_THROWS_AS(concat_channels(a, Tensor<float>({1, 3, 2})), ShapeError);
}

TEST_CASE("conv2d matches a direct loop with zero padding") {
  std::mt19937_64 rng(1);
  const auto x = random_tensor({3, 7, 9}, rng);
  const auto k = random_tensor({4, 3, 3, 3}, rng);
  const auto b = random_tensor({4}, rng);
  const auto y = conv2d(x, k, b);
  REQUIRE(y.shape() == std::vector<int>{4, 7, 9});
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 9; ++j) {
        double s = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < 3; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = i + di, jj = j + dj;
              if (ii < 0 || jj < 0 || ii >= 7 || jj >= 9) continue;
              s += k[((static_cast<std::size_t>(o) * 3 + c) * 3 + (di + 1)) * 3 + (dj + 1)] * x(c, ii, jj);
            }
        CHECK(y(o, i, j) == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("conv2d worked example: 1x1 kernel scales, 3x3 box sums") {
  Tensor<double> x({1, 2, 2});
  x[0] = 1;
  x[1] = 2;
  x[2] = 3;
  x[3] = 4;
  Tensor<double> k1({1, 1, 1, 1}, 2.0), bias({1}, 0.5);
  const auto y1 = conv2d(x, k1, bias);
  CHECK(y1[3] == 8.5);
  Tensor<double> k3({1, 1, 3, 3}, 1.0), zero({1});
  const auto y3 = conv2d(x, k3, zero);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y3[i] == 10.0);
}

TEST_CASE("conv2d backward is the adjoint and matches finite differences") {
  std::mt19937_64 rng(2);
  const auto x = random_tensor({2, 5, 6}, rng);
  const auto k = random_tensor({3, 2, 3, 3}, rng);
  const auto b = random_tensor({3}, rng);
  const auto w = random_tensor({3, 5, 6}, rng);
  Tensor<double> gx(x.shape()), gk(k.shape()), gb(b.shape());
  conv2d_backward(x, k, w, &gx, &gk, &gb);
  auto loss = [&](const Tensor<double>& xx, const Tensor<double>& kk, const Tensor<double>& bb) {
    return dot(conv2d(xx, kk, bb), w);
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); i += 7) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK(gx[i] == doctest::Approx((loss(xp, k, b) - loss(xm, k, b)) / (2 * h)).epsilon(1e-6));
  }
  for (std::size_t i = 0; i < k.size(); i += 5) {
    auto kp = k, km = k;
    kp[i] += h;
    km[i] -= h;
    CHECK(gk[i] == doctest::Approx((loss(x, kp, b) - loss(x, km, b)) / (2 * h)).epsilon(1e-6));
  }
  // d/db_o = sum of the output weights of channel o
  for (int o = 0; o < 3; ++o) {
    double s = 0;
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 6; ++xx) s += w(o, y, xx);
    CHECK(gb[static_cast<std::size_t>(o)] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("upsample2x: [0,1] becomes [0,0.25,0.75,1]") {
  Tensor<double> x({1, 1, 2});
  x[1] = 1;
  const auto y = upsample2x(x);
  REQUIRE(y.shape() == std::vector<int>{1, 2, 4});
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(y[1] == doctest::Approx(0.25));
  CHECK(y[2] == doctest::Approx(0.75));
  CHECK(y[3] == doctest::Approx(1.0));
  CHECK(y[4] == doctest::Approx(0.0));
}

TEST_CASE("upsample2x backward is the adjoint, including odd crops") {
  std::mt19937_64 rng(3);
  for (auto [h, w, oh, ow] : {std::array<int, 4>{3, 4, 6, 8}, std::array<int, 4>{3, 4, 5, 7}}) {
    const auto x = random_tensor({2, h, w}, rng);
    const auto g = random_tensor({2, oh, ow}, rng);
    const double lhs = dot(upsample2x(x, oh, ow), g);
    const double rhs = dot(x, upsample2x_backward(g, h, w));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("elu and its derivative") {
  CHECK(elu(2.0) == 2.0);
  CHECK(elu(-1.0) == doctest::Approx(std::exp(-1.0) - 1));
  CHECK(elu_grad(-1.0) == doctest::Approx(std::exp(-1.0)));
  CHECK(sigmoid(0.0) == 0.5);
}

TEST_CASE("adam: two steps by hand") {
  ParameterStore<double> store;
  store.add("x", "g", Tensor<double>({1}, 1.0), 0.1);
  store.grad("x")[0] = 2.0;
  adam_step(store, 1.0);
  CHECK(store.value("x")[0] == doctest::Approx(0.9000000005).epsilon(1e-12));
  CHECK(store.grad("x")[0] == 0.0);
  store.grad("x")[0] = -1.0;
  adam_step(store, 1.0);
  CHECK(store.value("x")[0] == doctest::Approx(0.8733662967024315).epsilon(1e-12));
}

TEST_CASE("adam skips disabled entries and refuses non-finite gradients") {
  ParameterStore<double> store;
  store.add("a", "g1", Tensor<double>({2}, 1.0), 0.1);
  store.add("b", "g2", Tensor<double>({2}, 1.0), 0.1);
  store.set_group_enabled("g2", false);
  store.grad("a").fill(1.0);
  store.grad("b").fill(1.0);
  adam_step(store, 1.0);
  CHECK(store.value("a")[0] < 1.0);
  CHECK(store.value("b")[0] == 1.0);
  store.grad("a")[1] = std::nan("");
  const auto report = adam_step(store, 1.0);
  CHECK_FALSE(report.applied);
  REQUIRE(report.nonfinite_entries.size() == 1);
  CHECK(report.nonfinite_entries[0] == "a");
}

TEST_CASE("parameter store: groups, norms and duplicate names") {
  ParameterStore<double> store;
  store.add("a", "g1", Tensor<double>({2}), 1e-3);
  CHECK_THROWS(store.add("a", "g1", Tensor<double>({2}), 1e-3));
  CHECK_THROWS(store.get("missing"));
  store.grad("a")[0] = 3;
  store.grad("a")[1] = 4;
  CHECK(store.grad_norm() == doctest::Approx(5.0));
  store.scale_grads(0.5);
  CHECK(store.grad("a")[1] == 2.0);
  CHECK(store.group_enabled("g1"));
}

TEST_CASE("finite_diff_check agrees with an analytic quadratic") {
  ParameterStore<double> store;
  store.add("w", "g", Tensor<double>({5}), 1e-3);
  for (int i = 0; i < 5; ++i) store.value("w")[static_cast<std::size_t>(i)] = 0.3 * i - 0.5;
  for (int i = 0; i < 5; ++i) store.grad("w")[static_cast<std::size_t>(i)] = 2 * store.value("w")[static_cast<std::size_t>(i)] * (i + 1);
  const ScalarFunction<double> f = [](ParameterStore<double>& s) {
    double sum = 0;
    for (int i = 0; i < 5; ++i) sum += (i + 1) * s.value("w")[static_cast<std::size_t>(i)] * s.value("w")[static_cast<std::size_t>(i)];
    return sum;
  };
  GradCheckOptions o;
  o.step = 1e-5;
  const auto r = finite_diff_check(f, store, "w", o);
  CHECK(r.checked == 5);
  CHECK(r.max_rel_error < 1e-8);
}
