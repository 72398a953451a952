#include "gradcheck.hpp"

#include <cmath>
#include <map>
#include <random>

#include "training.hpp"

namespace trips {
namespace {

void perturb_capture(Model<double>& model, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (double& v : model.store.value(names::kResponse).values()) v = 0.3 * n01(rng);
  auto& vig = model.store.value(names::kVignette);
  vig[0] = -0.05;
  vig[1] = 0.02;
  vig[2] = -0.01;
  for (int i = 0; i < static_cast<int>(model.cameras.size()); ++i) {
    model.store.value(names::camera_exposure(i))[0] = 0.15;
    auto& wb = model.store.value(names::camera_white_balance(i));
    wb[0] = 1.05;
    wb[1] = 0.95;
  }
  for (double& v : model.store.value(names::kEnvironment).values()) v = 0.5 * n01(rng);
}

Tensor<double> random_target(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> t({3, h, w});
  for (double& v : t.values()) v = u(rng);
  return t;
}

std::string group_label(const ParameterEntry<double>& e) {
  if (e.name == kDecoderOutputWeight || e.name == kDecoderOutputBias) return "sh-output";
  return e.group;
}

}  // namespace

GradcheckProblem random_gradcheck_problem(const GradcheckOptions& o) {
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  const int res = o.resolution;

  Camera cam;
  cam.intrinsics.width = cam.intrinsics.height = res;
  cam.intrinsics.fx = 1.1 * res;
  cam.intrinsics.fy = 1.0 * res;
  cam.intrinsics.cx = 0.5 * (res - 1) + 0.3;
  cam.intrinsics.cy = 0.5 * (res - 1) - 0.2;
  const Eigen::Vector3d axis = Eigen::Vector3d(n01(rng), n01(rng), n01(rng)).normalized();
  cam.pose.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(0.3 * u01(rng), axis));
  cam.pose.translation = Eigen::Vector3d(0.1 * n01(rng), 0.1 * n01(rng), 0.1 * n01(rng));

  std::vector<float> positions;
  std::vector<float> log_sizes;
  const Eigen::Matrix3d rt = cam.pose.rotation.toRotationMatrix().transpose();
  const double focal = std::sqrt(cam.intrinsics.fx * cam.intrinsics.fy);
  for (int i = 0; i < o.points; ++i) {
    const double px = -3 + (res + 6) * u01(rng), py = -3 + (res + 6) * u01(rng);
    const double z = 2.0 + 2.0 * u01(rng);
    const Eigen::Vector3d view((px - cam.intrinsics.cx) / cam.intrinsics.fx * z,
                               (py - cam.intrinsics.cy) / cam.intrinsics.fy * z, z);
    const Eigen::Vector3d world = rt * (view - cam.pose.translation);
    for (int a = 0; a < 3; ++a) positions.push_back(static_cast<float>(world[a]));
    const double s = std::exp(std::log(0.3) + (std::log(12.0) - std::log(0.3)) * u01(rng));
    log_sizes.push_back(static_cast<float>(std::log(s * z / focal)));
  }
  PointCloud cloud = PointCloud::from_positions(positions, o.features);
  cloud.log_sizes = log_sizes;
  for (float& v : cloud.opacity_logits) v = static_cast<float>(n01(rng));
  for (float& v : cloud.descriptors) v = static_cast<float>(0.5 * n01(rng));

  ModelConfig mc;
  mc.layers = o.layers;
  mc.features = o.features;
  mc.sh = o.sh;
  mc.env_mode = o.env_mode;
  mc.env_height = 8;
  mc.seed = o.seed + 11;
  GradcheckProblem p{Model<double>::create(cloud, {cam}, mc), {}, {}};
  perturb_capture(p.model, rng);
  p.view = camera_view(p.model.cameras, 0);
  p.target = random_target(res, res, rng);
  return p;
}

GradcheckProblem scene_gradcheck_problem(const PointCloud& cloud, const std::vector<Camera>& cameras,
                                         const GradcheckOptions& o) {
  if (cameras.empty()) throw DataError("gradcheck needs at least one camera");
  std::mt19937_64 rng(o.seed);
  ModelConfig mc;
  mc.layers = o.layers;
  mc.features = o.features;
  mc.sh = o.sh;
  mc.env_mode = o.env_mode;
  mc.env_height = 8;
  mc.seed = o.seed + 11;
  GradcheckProblem p{Model<double>::create(cloud, cameras, mc), {}, {}};
  perturb_capture(p.model, rng);
  const auto& k = cameras.front().intrinsics;
  const double scale = std::min(1.0, static_cast<double>(o.resolution) / std::max(k.width, k.height));
  const int vw = std::max(8, static_cast<int>(std::floor(k.width * scale)));
  const int vh = std::max(8, static_cast<int>(std::floor(k.height * scale)));
  p.view = zoomed_view(p.model.cameras, 0, scale, 0.0, 0.0, vw, vh);
  p.target = random_target(vw, vh, rng);
  return p;
}

std::vector<GradcheckGroup> gradcheck_suite(GradcheckProblem& problem, const GradcheckOptions& o) {
  Model<double>& model = problem.model;
  const RenderView& view = problem.view;

  model.store.zero_grad();
  {
    RenderCache<double> cache;
    const Tensor<double> img = render(model, view, &cache);
    Tensor<double> grad;
    total_loss(img, problem.target, o.ssim_weight, &grad);
    render_backward(model, cache, grad);
  }

  const ScalarFunction<double> loss = [&](ParameterStore<double>&) {
    return total_loss(render(model, view), problem.target, o.ssim_weight);
  };
  const SignatureFunction<double> signature = [&](ParameterStore<double>&) { return render_signature(model, view); };

  GradCheckOptions fd;
  fd.step = o.step;
  fd.relative_step = true;
  fd.max_samples = o.samples_per_entry;
  fd.abs_floor = o.abs_floor;
  fd.kink_radius = o.kink_radius;

  std::vector<GradcheckGroup> groups;
  std::map<std::string, std::size_t> index;
  std::vector<std::string> names;
  for (const auto& e : model.store.entries()) names.push_back(e.name);
  std::uint64_t salt = 0;
  for (const std::string& name : names) {
    const auto& e = model.store.get(name);
    const std::string label = group_label(e);
    fd.seed = o.seed * 1000003 + (++salt);
    const GradCheckResult r = finite_diff_check(loss, model.store, name, fd, signature);
    auto it = index.find(label);
    if (it == index.end()) {
      it = index.emplace(label, groups.size()).first;
      GradcheckGroup fresh;
      fresh.group = label;
      groups.push_back(fresh);
    }
    GradcheckGroup& g = groups[it->second];
    g.checked += r.checked;
    g.skipped += r.skipped;
    if (r.checked && (g.worst_entry.empty() || r.max_rel_error > g.max_rel_error)) {
      g.max_rel_error = r.max_rel_error;
      g.worst_entry = name;
      g.worst_index = r.worst_index;
      g.worst_analytic = r.worst_analytic;
      g.worst_numeric = r.worst_numeric;
    }
  }
  return groups;
}

}  // namespace trips
