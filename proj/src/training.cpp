#include "training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "parallel.hpp"

namespace trips {
namespace {

std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> g{};
  double sum = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - kSsimWindow / 2;
    g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable "valid" filtering of an h x w plane with the Gaussian window.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::array<double, kSsimWindow>& g) {
  const int oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kSsimWindow; ++k) s += g[static_cast<std::size_t>(k)] * img[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kSsimWindow; ++k) s += g[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

// Adjoint of filter_valid.
std::vector<double> filter_valid_adjoint(const std::vector<double>& map, int h, int w,
                                         const std::array<double, kSsimWindow>& g) {
  const int oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double v = map[static_cast<std::size_t>(y) * ow + x];
      for (int k = 0; k < kSsimWindow; ++k) tmp[static_cast<std::size_t>(y + k) * ow + x] += g[static_cast<std::size_t>(k)] * v;
    }
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * ow + x];
      for (int k = 0; k < kSsimWindow; ++k) out[static_cast<std::size_t>(y) * w + x + k] += g[static_cast<std::size_t>(k)] * v;
    }
  return out;
}

struct SsimTerms {
  double s, d_mu_a, d_m2a, d_mab;
};

SsimTerms ssim_terms(double mu_a, double mu_b, double m2a, double m2b, double mab) {
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
  const double var_a = m2a - mu_a * mu_a;
  const double var_b = m2b - mu_b * mu_b;
  const double cov = mab - mu_a * mu_b;
  const double n1 = 2 * mu_a * mu_b + c1, n2 = 2 * cov + c2;
  const double d1 = mu_a * mu_a + mu_b * mu_b + c1, d2 = var_a + var_b + c2;
  const double s = n1 * n2 / (d1 * d2);
  SsimTerms t;
  t.s = s;
  t.d_mu_a = 2 * mu_b * (n2 - n1) / (d1 * d2) - 2 * mu_a * s * (1 / d1 - 1 / d2);
  t.d_m2a = -s / d2;
  t.d_mab = 2 * n1 / (d1 * d2);
  return t;
}

}  // namespace

template <typename Real>
double ssim(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>* grad_a, double grad_scale) {
  if (!a.same_shape(b) || a.rank() != 3) {
    throw ShapeError("ssim: images must share a [C,H,W] shape, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const int channels = a.dim(0), h = a.dim(1), w = a.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const bool windowed = h >= kSsimWindow && w >= kSsimWindow;
  const auto g = gaussian_window();
  const std::size_t windows = windowed ? static_cast<std::size_t>(h - kSsimWindow + 1) * (w - kSsimWindow + 1) : 1;
  const double norm = 1.0 / (static_cast<double>(windows) * channels);

  std::vector<double> per_channel(static_cast<std::size_t>(channels), 0.0);
  parallel_for(channels, [&](std::int64_t c) {
    std::vector<double> va(plane), vb(plane), va2(plane), vb2(plane), vab(plane);
    for (std::size_t p = 0; p < plane; ++p) {
      const double x = static_cast<double>(a[c * plane + p]);
      const double y = static_cast<double>(b[c * plane + p]);
      va[p] = x;
      vb[p] = y;
      va2[p] = x * x;
      vb2[p] = y * y;
      vab[p] = x * y;
    }
    if (!windowed) {
      const double inv = 1.0 / static_cast<double>(plane);
      double mu_a = 0, mu_b = 0, m2a = 0, m2b = 0, mab = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        mu_a += va[p];
        mu_b += vb[p];
        m2a += va2[p];
        m2b += vb2[p];
        mab += vab[p];
      }
      const SsimTerms t = ssim_terms(mu_a * inv, mu_b * inv, m2a * inv, m2b * inv, mab * inv);
      per_channel[static_cast<std::size_t>(c)] = t.s;
      if (grad_a) {
        const double k = grad_scale * norm * inv;
        for (std::size_t p = 0; p < plane; ++p) {
          (*grad_a)[c * plane + p] += static_cast<Real>(k * (t.d_mu_a + 2 * va[p] * t.d_m2a + vb[p] * t.d_mab));
        }
      }
      return;
    }
    const auto mu_a = filter_valid(va, h, w, g);
    const auto mu_b = filter_valid(vb, h, w, g);
    const auto m2a = filter_valid(va2, h, w, g);
    const auto m2b = filter_valid(vb2, h, w, g);
    const auto mab = filter_valid(vab, h, w, g);
    std::vector<double> ga, g2, gab;
    if (grad_a) {
      ga.resize(windows);
      g2.resize(windows);
      gab.resize(windows);
    }
    double sum = 0;
    for (std::size_t q = 0; q < windows; ++q) {
      const SsimTerms t = ssim_terms(mu_a[q], mu_b[q], m2a[q], m2b[q], mab[q]);
      sum += t.s;
      if (grad_a) {
        ga[q] = grad_scale * norm * t.d_mu_a;
        g2[q] = grad_scale * norm * t.d_m2a;
        gab[q] = grad_scale * norm * t.d_mab;
      }
    }
    per_channel[static_cast<std::size_t>(c)] = sum / static_cast<double>(windows);
    if (grad_a) {
      const auto da = filter_valid_adjoint(ga, h, w, g);
      const auto d2 = filter_valid_adjoint(g2, h, w, g);
      const auto dab = filter_valid_adjoint(gab, h, w, g);
      for (std::size_t p = 0; p < plane; ++p) {
        (*grad_a)[c * plane + p] += static_cast<Real>(da[p] + 2 * va[p] * d2[p] + vb[p] * dab[p]);
      }
    }
  });
  double total = 0;
  for (double v : per_channel) total += v;
  return total / channels;
}

template <typename Real>
double mse(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (!a.same_shape(b)) throw ShapeError("mse: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

double psnr_from_mse(double m) {
  if (m <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

template <typename Real>
double masked_psnr(const Tensor<Real>& a, const Tensor<Real>& b, const Tensor<Real>& mask) {
  if (!a.same_shape(b) || mask.dim(1) != a.dim(1) || mask.dim(2) != a.dim(2)) throw ShapeError("masked_psnr: shape mismatch");
  const std::size_t plane = mask.size();
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (mask[p] == Real(0)) continue;
    for (int c = 0; c < a.dim(0); ++c) {
      const double d = static_cast<double>(a[c * plane + p]) - static_cast<double>(b[c * plane + p]);
      sum += d * d;
      ++count;
    }
  }
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  return psnr_from_mse(sum / static_cast<double>(count));
}

template <typename Real>
double total_loss(const Tensor<Real>& render, const Tensor<Real>& gt, double lambda, Tensor<Real>* grad) {
  const double m = mse(render, gt);
  double s = 1.0;
  if (grad) {
    if (!grad->same_shape(render)) *grad = Tensor<Real>(render.shape());
    grad->fill(Real(0));
    const double k = (1.0 - lambda) * 2.0 / static_cast<double>(render.size());
    for (std::size_t i = 0; i < render.size(); ++i) {
      (*grad)[i] = static_cast<Real>(k * (static_cast<double>(render[i]) - static_cast<double>(gt[i])));
    }
  }
  if (lambda != 0.0) s = ssim(render, gt, grad, -lambda);
  return (1.0 - lambda) * m + lambda * (1.0 - s);
}

Tensor<float> sample_ground_truth(const Tensor<float>& image, double zoom, double ox, double oy, int vw, int vh) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int taps = zoom < 1.0 ? static_cast<int>(std::ceil(1.0 / zoom - 1e-9)) : 1;
  Tensor<float> out({c, vh, vw});
  auto fetch = [&](int ch, double u, double v) {
    u = std::clamp(u, 0.0, static_cast<double>(w - 1));
    v = std::clamp(v, 0.0, static_cast<double>(h - 1));
    const int x0 = std::min(static_cast<int>(std::floor(u)), w - 1), y0 = std::min(static_cast<int>(std::floor(v)), h - 1);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = u - x0, fy = v - y0;
    return (1 - fy) * ((1 - fx) * image(ch, y0, x0) + fx * image(ch, y0, x1)) +
           fy * ((1 - fx) * image(ch, y1, x0) + fx * image(ch, y1, x1));
  };
  parallel_for(vh, [&](std::int64_t j) {
    for (int i = 0; i < vw; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (int sy = 0; sy < taps; ++sy)
          for (int sx = 0; sx < taps; ++sx) {
            const double px = i + ox + (sx + 0.5) / taps;
            const double py = static_cast<double>(j) + oy + (sy + 0.5) / taps;
            acc += fetch(ch, px / zoom - 0.5, py / zoom - 0.5);
          }
        out(ch, static_cast<int>(j), i) = static_cast<float>(acc / (taps * taps));
      }
    }
  });
  return out;
}

Evaluation evaluate(const Model<float>& model, const TrainingData& data, const std::vector<int>& frames) {
  Evaluation e;
  if (frames.empty()) return e;
  for (int f : frames) {
    const Tensor<float> img = render(model, camera_view(model.cameras, f));
    const Tensor<float>& gt = data.images.at(static_cast<std::size_t>(f));
    e.psnr += psnr(img, gt);
    e.ssim += ssim(img, gt);
  }
  e.psnr /= static_cast<double>(frames.size());
  e.ssim /= static_cast<double>(frames.size());
  return e;
}

TrainResult train(Model<float>& model, const TrainingData& data, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  if (data.images.size() != model.cameras.size()) {
    throw DataError("training data has " + std::to_string(data.images.size()) + " images for " +
                    std::to_string(model.cameras.size()) + " cameras");
  }
  for (int f : data.train) {
    const auto& k = model.cameras.at(static_cast<std::size_t>(f)).intrinsics;
    const auto& img = data.images[static_cast<std::size_t>(f)];
    if (img.dim(1) != k.height || img.dim(2) != k.width) {
      throw DataError("image of frame " + std::to_string(f) + " is " + std::to_string(img.dim(2)) + "x" +
                      std::to_string(img.dim(1)) + " but its camera is " + std::to_string(k.width) + "x" +
                      std::to_string(k.height));
    }
  }
  TrainResult result;
  std::mt19937_64 rng(config.seed);
  std::vector<int> order = data.train;

  std::vector<std::pair<std::string, bool>> anchored;
  if (config.anchor_camera && !data.train.empty()) {
    const int ref = *std::min_element(data.train.begin(), data.train.end());
    for (const std::string& name :
         {names::camera_pose(ref), names::camera_exposure(ref), names::camera_white_balance(ref)}) {
      if (!model.store.contains(name)) continue;
      anchored.emplace_back(name, model.store.get(name).enabled);
      model.store.get(name).enabled = false;
    }
  }
  struct Restore {
    Model<float>& model;
    const std::vector<std::pair<std::string, bool>>& flags;
    ~Restore() {
      for (const auto& [name, enabled] : flags) model.store.get(name).enabled = enabled;
    }
  } restore{model, anchored};
  const bool stepping = model.store.any_enabled();

  for (int e = 0; e < config.epochs; ++e) {
    const int epoch = model.epoch + 1;
    const Model<float> snapshot = model;
    std::shuffle(order.begin(), order.end(), rng);
    const bool warmup = e < config.warmup_epochs;
    std::uniform_real_distribution<double> log_zoom(std::log(config.zoom_min), std::log(config.zoom_max));
    MetricsRow row;
    row.epoch = epoch;
    double loss_sum = 0;
    std::size_t frames = 0;
    if (stepping) {
      for (int f : order) {
        // Zoom is drawn per frame so that every epoch mixes scales.
        double zoom = 1.0;
        if (warmup) {
          zoom = 0.5;
        } else if (config.zoom) {
          zoom = std::exp(log_zoom(rng));
        }
        const auto& k = model.cameras[static_cast<std::size_t>(f)].intrinsics;
        const int vw = std::max(1, std::min(k.width, static_cast<int>(std::floor(zoom * k.width + 1e-9))));
        const int vh = std::max(1, std::min(k.height, static_cast<int>(std::floor(zoom * k.height + 1e-9))));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        const double a = u01(rng), b = u01(rng), c = u01(rng), d = u01(rng);
        double ox = 0, oy = 0;
        if (!warmup) {
          // Mean of two uniforms: crops favour the image center.
          ox = std::max(0.0, zoom * k.width - vw) * 0.5 * (a + b);
          oy = std::max(0.0, zoom * k.height - vh) * 0.5 * (c + d);
        }
        const RenderView view = zoomed_view(model.cameras, f, zoom, ox, oy, vw, vh);
        const Tensor<float> gt = data.reference
                                     ? data.reference(f, view.intrinsics)
                                     : sample_ground_truth(data.images[static_cast<std::size_t>(f)], zoom, ox, oy, vw, vh);

        RenderCache<float> cache;
        RenderTimings timings;
        const Tensor<float> img = render(model, view, &cache, &timings);
        Tensor<float> grad;
        const double loss = total_loss(img, gt, config.ssim_weight, &grad);
        bool ok = std::isfinite(loss);
        if (ok) {
          render_backward(model, cache, grad, &timings);
          const double norm = model.store.grad_norm();
          if (std::isfinite(norm) && norm > config.clip_norm) model.store.scale_grads(config.clip_norm / norm);
          ok = adam_step(model.store, 1.0).applied;
          model.apply_pose_tangents();
        }
        if (!ok) {
          model = snapshot;
          if (!result.rates_halved) {
            model.store.scale_learning_rates(0.5);
            result.rates_halved = true;
          }
          row.aborted = true;
          break;
        }
        loss_sum += loss;
        ++frames;
        row.ms_raster += timings.raster_ms;
        row.ms_net += timings.network_ms;
        row.ms_tonemap += timings.tonemap_ms;
      }
    }
    row.loss = row.aborted ? std::numeric_limits<double>::quiet_NaN()
                           : (frames ? loss_sum / static_cast<double>(frames) : 0.0);
    model.epoch = epoch;
    const bool last = e + 1 == config.epochs;
    if (!data.test.empty() && (last || (config.eval_every > 0 && epoch % config.eval_every == 0))) {
      const Evaluation ev = evaluate(model, data, data.test);
      row.psnr = ev.psnr;
      row.ssim = ev.ssim;
    }
    result.metrics.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

RefitResult refit_positions(Model<float>& model, const TrainingData& data, const RefitConfig& config) {
  RefitResult r;
  r.before = evaluate(model, data, data.test);
  if (config.sigma > 0) {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> noise(0.0, config.sigma);
    for (float& v : model.store.value(names::kPosition).values()) v = static_cast<float>(v + noise(rng));
  }
  r.noisy = evaluate(model, data, data.test);
  model.store.set_all_enabled(false);
  if (config.optimize_positions) model.store.set_group_enabled("position", true);
  TrainConfig schedule = config.schedule;
  schedule.epochs = config.epochs;
  schedule.warmup_epochs = 0;
  r.run = train(model, data, schedule);
  r.after = evaluate(model, data, data.test);
  model.store.set_all_enabled(true);
  return r;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, bool include_timing) {
  std::ostringstream out;
  out << "epoch,loss,psnr,ssim";
  if (include_timing) out << ",ms_raster,ms_net,ms_tonemap";
  out << '\n';
  char buf[64];
  auto num = [&](double v) -> std::string {
    if (std::isnan(v)) return "";
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  };
  for (const auto& r : rows) {
    out << r.epoch << ',' << num(r.loss) << ',' << num(r.psnr) << ',' << num(r.ssim);
    if (include_timing) out << ',' << num(r.ms_raster) << ',' << num(r.ms_net) << ',' << num(r.ms_tonemap);
    out << '\n';
  }
  return out.str();
}

#define TRIPS_INSTANTIATE(Real)                                                                   \
  template double ssim(const Tensor<Real>&, const Tensor<Real>&, Tensor<Real>*, double);         \
  template double mse(const Tensor<Real>&, const Tensor<Real>&);                                 \
  template double masked_psnr(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);    \
  template double total_loss(const Tensor<Real>&, const Tensor<Real>&, double, Tensor<Real>*);

TRIPS_INSTANTIATE(float)
TRIPS_INSTANTIATE(double)
#undef TRIPS_INSTANTIATE

}  // namespace trips
