#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace trips {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

// Mean SSIM over all valid 11x11 windows and channels of [C,H,W] images with
// dynamic range 1. Images smaller than the window use one global window.
// When grad_a is given, d(SSIM)/d(a) is accumulated into it.
template <typename Real>
double ssim(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>* grad_a = nullptr, double grad_scale = 1.0);

template <typename Real>
double mse(const Tensor<Real>& a, const Tensor<Real>& b);

double psnr_from_mse(double mse);

template <typename Real>
double psnr(const Tensor<Real>& a, const Tensor<Real>& b) {
  return psnr_from_mse(mse(a, b));
}

// PSNR restricted to pixels whose mask [1,H,W] is nonzero.
template <typename Real>
double masked_psnr(const Tensor<Real>& a, const Tensor<Real>& b, const Tensor<Real>& mask);

// (1 - lambda) * MSE + lambda * (1 - SSIM); the gradient w.r.t. `render` is
// written to grad when given.
template <typename Real>
double total_loss(const Tensor<Real>& render, const Tensor<Real>& gt, double lambda, Tensor<Real>* grad = nullptr);

// Ground truth seen by a zoomed and cropped viewport: viewport pixel i maps
// to source coordinate (i + ox + 0.5) / zoom - 0.5. Zooming out averages a
// ceil(1/zoom)^2 grid of bilinear taps per pixel.
Tensor<float> sample_ground_truth(const Tensor<float>& image, double zoom, double ox, double oy, int vw, int vh);

struct TrainingData {
  std::vector<Tensor<float>> images;  // per camera, [3,H,W] in [0,1]
  std::vector<int> train;
  std::vector<int> test;
  // Exact image for a frame seen through scaled intrinsics, when the scene
  // can produce one; zoomed training views otherwise resample `images`.
  std::function<Tensor<float>(int frame, const Intrinsics& view)> reference;
};

struct TrainConfig {
  int epochs = 600;
  int warmup_epochs = 20;  // rendered at half resolution
  double ssim_weight = 0.2;
  bool zoom = true;
  double zoom_min = 0.5;
  double zoom_max = 2.0;
  int eval_every = 10;
  double clip_norm = 10.0;
  std::uint64_t seed = 1;
  // Hold pose, exposure and white balance of the first training camera fixed
  // while training. Without an anchor these drift together with the tone map
  // and point cloud, and held-out cameras inherit the offset.
  bool anchor_camera = true;
};

struct MetricsRow {
  int epoch = 0;
  double loss = 0;
  double psnr = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated this epoch
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double ms_raster = 0;
  double ms_net = 0;
  double ms_tonemap = 0;
  bool aborted = false;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  bool rates_halved = false;
};

using EpochCallback = std::function<void(const MetricsRow&)>;

struct Evaluation {
  double psnr = 0;
  double ssim = 0;
};

Evaluation evaluate(const Model<float>& model, const TrainingData& data, const std::vector<int>& frames);

// One Adam step per training frame, frames shuffled every epoch.
TrainResult train(Model<float>& model, const TrainingData& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct RefitConfig {
  double sigma = 0.01;
  int epochs = 100;
  bool optimize_positions = true;  // false: control run with every group frozen
  std::uint64_t seed = 7;
  TrainConfig schedule;            // epochs and warm-up are overridden
};

struct RefitResult {
  Evaluation before;  // checkpoint as given
  Evaluation noisy;   // right after the noise was added
  Evaluation after;
  TrainResult run;
};

// Perturbs every position by N(0, sigma^2) per axis and re-optimizes only the
// positions.
RefitResult refit_positions(Model<float>& model, const TrainingData& data, const RefitConfig& config);

// epoch,loss,psnr,ssim,ms_raster,ms_net,ms_tonemap
std::string metrics_csv(const std::vector<MetricsRow>& rows, bool include_timing = true);

}  // namespace trips
