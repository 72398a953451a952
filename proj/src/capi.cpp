#include <trips/trips.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "gradcheck.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "synth.hpp"
#include "training.hpp"

struct trips_scene {
  trips::PlyData points;
  trips::PointCloud cloud;
  trips::FrameSet frames;
  std::optional<trips::SyntheticScene> synthetic;
  std::vector<std::string> warnings;
};

struct trips_model {
  trips::Model<float> model;
};

namespace {

thread_local std::string g_last_error;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Fn>
trips_status guard(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return TRIPS_OK;
  } catch (const CheckFailure& e) {
    g_last_error = e.what();
    return TRIPS_ERROR_CHECK;
  } catch (const trips::DataError& e) {
    g_last_error = e.what();
    return TRIPS_ERROR_DATA;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return TRIPS_ERROR_USAGE;
  } catch (const std::out_of_range& e) {
    g_last_error = e.what();
    return TRIPS_ERROR_USAGE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TRIPS_ERROR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return TRIPS_ERROR_INTERNAL;
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

std::vector<trips::Camera> cameras_of(const trips::FrameSet& frames) {
  std::vector<trips::Camera> out;
  for (const auto& f : frames.frames) out.push_back(f.camera);
  return out;
}

trips::ModelConfig model_config(const trips_model_options& o) {
  require(o.layers >= 3 && o.layers <= trips::kMaxLayers, "layers must lie in [3, 8]");
  require(o.features >= 1 && o.features <= 64, "features must lie in [1, 64]");
  require(o.env == TRIPS_ENV_CONSTANT || o.env == TRIPS_ENV_LATLONG, "unknown environment mode");
  require(o.env_height >= 2, "env_height must be at least 2");
  trips::ModelConfig c;
  c.layers = o.layers;
  c.features = o.features;
  c.sh = o.sh != 0;
  c.env_mode = o.env == TRIPS_ENV_LATLONG ? trips::EnvMode::Equirectangular : trips::EnvMode::Constant;
  c.env_height = o.env_height;
  c.seed = o.seed;
  return c;
}

void check_camera(const trips_model* model, int camera) {
  require(model != nullptr, "model is null");
  require(camera >= 0 && camera < static_cast<int>(model->model.cameras.size()),
          "camera index " + std::to_string(camera) + " out of range [0, " +
              std::to_string(model->model.cameras.size()) + ")");
}

}  // namespace

extern "C" {

const char* trips_last_error(void) { return g_last_error.c_str(); }
const char* trips_version(void) { return "1.0.0"; }

void trips_set_threads(int threads) { trips::set_thread_count(threads); }
int trips_get_threads(void) { return trips::thread_count(); }

trips_status trips_scene_synthesize(const char* kind, int points, int cameras, int resolution, uint64_t seed,
                                    int features, trips_scene** out) {
  return guard([&] {
    require(kind && out, "kind and out must not be null");
    require(features >= 3, "synthetic scenes need at least 3 descriptor channels");
    trips::SyntheticOptions o;
    o.kind = trips::parse_scene_kind(kind);
    o.points = points;
    o.cameras = cameras;
    o.resolution = resolution;
    o.seed = seed;
    o.features = features;
    auto s = std::make_unique<trips_scene>();
    s->synthetic = trips::make_synthetic_scene(o);
    s->points = s->synthetic->points;
    s->cloud = s->synthetic->cloud;
    s->frames = s->synthetic->frames;
    *out = s.release();
  });
}

trips_status trips_scene_load(const char* ply_path, const char* cameras_path, int features, uint64_t seed,
                              trips_scene** out) {
  return guard([&] {
    require(ply_path && cameras_path && out, "paths and out must not be null");
    require(features >= 1, "features must be positive");
    auto s = std::make_unique<trips_scene>();
    s->points = trips::read_ply(ply_path);
    s->cloud = trips::make_point_cloud(s->points, features, seed);
    s->frames = trips::read_cameras(cameras_path, &s->warnings);
    const trips::ValidationReport report = trips::validate_scene(s->cloud, s->frames);
    if (report.fatal || !report.errors.empty()) throw trips::DataError(report.summary());
    for (const auto& w : report.warnings) s->warnings.push_back(w);
    *out = s.release();
  });
}

trips_status trips_scene_save(trips_scene* scene, const char* dir) {
  return guard([&] {
    require(scene && dir, "scene and dir must not be null");
    if (scene->synthetic) {
      trips::save_synthetic_scene(*scene->synthetic, dir);
      scene->frames = scene->synthetic->frames;
      return;
    }
    std::filesystem::create_directories(dir);
    trips::write_ply((std::filesystem::path(dir) / "points.ply").string(), scene->points, true);
    trips::write_cameras((std::filesystem::path(dir) / "cameras.json").string(), scene->frames);
  });
}

size_t trips_scene_point_count(const trips_scene* scene) { return scene ? scene->cloud.size() : 0; }
int trips_scene_frame_count(const trips_scene* scene) {
  return scene ? static_cast<int>(scene->frames.frames.size()) : 0;
}
int trips_scene_warning_count(const trips_scene* scene) {
  return scene ? static_cast<int>(scene->warnings.size()) : 0;
}
const char* trips_scene_warning(const trips_scene* scene, int index) {
  if (!scene || index < 0 || index >= static_cast<int>(scene->warnings.size())) return "";
  return scene->warnings[static_cast<std::size_t>(index)].c_str();
}
void trips_scene_free(trips_scene* scene) { delete scene; }

void trips_model_options_default(trips_model_options* o) {
  if (!o) return;
  o->layers = 4;
  o->features = 4;
  o->sh = 1;
  o->env = TRIPS_ENV_CONSTANT;
  o->env_height = 16;
  o->seed = 1;
}

trips_status trips_model_create(const trips_scene* scene, const trips_model_options* options, trips_model** out) {
  return guard([&] {
    require(scene && options && out, "scene, options and out must not be null");
    const trips::ModelConfig config = model_config(*options);
    require(config.features == scene->cloud.features,
            "scene has " + std::to_string(scene->cloud.features) + " descriptor channels but the model asks for " +
                std::to_string(config.features));
    auto m = std::make_unique<trips_model>();
    m->model = trips::Model<float>::create(scene->cloud, cameras_of(scene->frames), config);
    *out = m.release();
  });
}

trips_status trips_model_load(const char* path, trips_model** out) {
  return guard([&] {
    require(path && out, "path and out must not be null");
    auto m = std::make_unique<trips_model>();
    m->model = trips::load_checkpoint(path);
    *out = m.release();
  });
}

trips_status trips_model_save(const trips_model* model, const char* path) {
  return guard([&] {
    require(model && path, "model and path must not be null");
    trips::save_checkpoint(path, model->model);
  });
}

size_t trips_model_point_count(const trips_model* model) { return model ? model->model.point_count() : 0; }
int trips_model_camera_count(const trips_model* model) {
  return model ? static_cast<int>(model->model.cameras.size()) : 0;
}
int trips_model_epoch(const trips_model* model) { return model ? model->model.epoch : 0; }
void trips_model_free(trips_model* model) { delete model; }

void trips_train_options_default(trips_train_options* o) {
  if (!o) return;
  const trips::TrainConfig d;
  o->epochs = d.epochs;
  o->warmup_epochs = d.warmup_epochs;
  o->eval_every = d.eval_every;
  o->ssim_weight = d.ssim_weight;
  o->zoom = 1;
  o->seed = d.seed;
  o->metrics_csv = nullptr;
  o->verbose = 0;
}

trips_status trips_train(trips_model* model, const trips_scene* scene, const trips_train_options* options,
                         trips_train_summary* summary) {
  return guard([&] {
    require(model && scene && options, "model, scene and options must not be null");
    require(options->epochs >= 0, "epochs must be non-negative");
    require(options->ssim_weight >= 0 && options->ssim_weight <= 1, "ssim weight must lie in [0, 1]");
    require(scene->frames.frames.size() == model->model.cameras.size(),
            "scene has " + std::to_string(scene->frames.frames.size()) + " frames but the model has " +
                std::to_string(model->model.cameras.size()) + " cameras");
    if (model->model.point_count() != scene->cloud.size()) {
      throw trips::DataError("scene has " + std::to_string(scene->cloud.size()) + " points but the model has " +
                             std::to_string(model->model.point_count()));
    }
    trips::TrainingData data = scene->synthetic ? trips::training_data(*scene->synthetic)
                                                : trips::load_training_data(scene->frames);
    trips::TrainConfig cfg;
    cfg.epochs = options->epochs;
    cfg.warmup_epochs = options->warmup_epochs;
    cfg.eval_every = options->eval_every;
    cfg.ssim_weight = options->ssim_weight;
    cfg.zoom = options->zoom != 0;
    cfg.seed = options->seed;
    const bool verbose = options->verbose != 0;
    const trips::TrainResult result = trips::train(model->model, data, cfg, [&](const trips::MetricsRow& row) {
      if (!verbose) return;
      std::fprintf(stderr, "epoch %d loss %.6f", row.epoch, row.loss);
      if (!std::isnan(row.psnr)) std::fprintf(stderr, " psnr %.3f ssim %.4f", row.psnr, row.ssim);
      std::fprintf(stderr, "\n");
    });
    if (options->metrics_csv) trips::write_file(options->metrics_csv, trips::metrics_csv(result.metrics));
    if (summary) {
      *summary = trips_train_summary{};
      summary->epochs = static_cast<int>(result.metrics.size());
      summary->rates_halved = result.rates_halved ? 1 : 0;
      summary->test_psnr = std::nan("");
      summary->test_ssim = std::nan("");
      if (!result.metrics.empty()) {
        summary->final_loss = result.metrics.back().loss;
        summary->test_psnr = result.metrics.back().psnr;
        summary->test_ssim = result.metrics.back().ssim;
      }
    }
  });
}

trips_status trips_render_frame(const trips_model* model, int camera, const char* path) {
  return guard([&] {
    check_camera(model, camera);
    require(path != nullptr, "path must not be null");
    trips::write_image(path, trips::render(model->model, trips::camera_view(model->model.cameras, camera)));
  });
}

trips_status trips_render_to_buffer(const trips_model* model, int camera, float* rgb, size_t capacity, int* width,
                                    int* height) {
  return guard([&] {
    check_camera(model, camera);
    const auto img = trips::render(model->model, trips::camera_view(model->model.cameras, camera));
    if (width) *width = img.dim(2);
    if (height) *height = img.dim(1);
    if (rgb) {
      require(capacity >= img.size(), "buffer holds " + std::to_string(capacity) + " floats, image needs " +
                                          std::to_string(img.size()));
      std::memcpy(rgb, img.data(), img.size() * sizeof(float));
    }
  });
}

trips_status trips_render_path(const trips_model* model, const int* keys, int key_count, int steps_per_segment,
                               const char* dir, int* frames_written) {
  return guard([&] {
    require(model && keys && dir, "model, keys and dir must not be null");
    require(key_count >= 1, "need at least one key camera");
    require(steps_per_segment >= 1, "steps per segment must be positive");
    for (int i = 0; i < key_count; ++i) check_camera(model, keys[i]);
    std::filesystem::create_directories(dir);
    const auto& cams = model->model.cameras;
    int written = 0;
    auto emit = [&](const trips::Camera& a, const trips::Camera& b, double t) {
      trips::RenderView view;
      view.intrinsics = a.intrinsics;
      const Eigen::Quaterniond q = a.pose.rotation.slerp(t, b.pose.rotation).normalized();
      const Eigen::Vector3d center = (1 - t) * a.pose.center() + t * b.pose.center();
      view.pose.rotation = q;
      view.pose.translation = -(q * center);
      view.sensor = trips::full_sensor(a.intrinsics);
      char name[32];
      std::snprintf(name, sizeof name, "frame_%04d.png", written);
      trips::write_image((std::filesystem::path(dir) / name).string(), trips::render(model->model, view));
      ++written;
    };
    for (int k = 0; k + 1 < key_count; ++k) {
      const auto& a = cams[static_cast<std::size_t>(keys[k])];
      const auto& b = cams[static_cast<std::size_t>(keys[k + 1])];
      for (int s = 0; s < steps_per_segment; ++s) emit(a, b, static_cast<double>(s) / steps_per_segment);
    }
    const auto& last = cams[static_cast<std::size_t>(keys[key_count - 1])];
    emit(last, last, 0.0);
    if (frames_written) *frames_written = written;
  });
}

trips_status trips_benchmark(const trips_model* model, int camera, int repetitions, trips_benchmark_result* out) {
  return guard([&] {
    check_camera(model, camera);
    require(out != nullptr, "out must not be null");
    require(repetitions >= 1, "repetitions must be positive");
    const trips::BenchmarkResult r =
        trips::benchmark_render(model->model, trips::camera_view(model->model.cameras, camera), repetitions);
    out->points = r.points;
    out->layers = r.layers;
    out->width = r.width;
    out->height = r.height;
    out->count_alloc_ms = r.count_alloc_ms;
    out->splat_ms = r.splat_ms;
    out->sort_blend_ms = r.sort_blend_ms;
    out->raster_ms = r.raster_ms;
    out->network_ms = r.network_ms;
    out->tonemap_ms = r.tonemap_ms;
    out->total_ms = r.total_ms;
    out->fragments_per_point = r.fragments_per_point;
    out->max_fragments_per_point = r.max_fragments_per_point;
    out->mean_list_length = r.mean_list_length;
    out->truncation_rate = r.truncation_rate;
  });
}

trips_status trips_gradcheck(const trips_scene* scene, const trips_model_options* options, int resolution,
                             double tolerance, trips_gradcheck_group* groups, int capacity, int* count) {
  bool failed = false;
  std::string failures;
  const trips_status status = guard([&] {
    require(options != nullptr, "options must not be null");
    require(resolution >= 8, "resolution must be at least 8");
    const trips::ModelConfig config = model_config(*options);
    trips::GradcheckOptions o;
    o.resolution = resolution;
    o.layers = config.layers;
    o.features = config.features;
    o.sh = config.sh;
    o.env_mode = config.env_mode;
    o.seed = config.seed;
    trips::GradcheckProblem problem =
        scene ? trips::scene_gradcheck_problem(scene->cloud, cameras_of(scene->frames), o)
              : trips::random_gradcheck_problem(o);
    const auto result = trips::gradcheck_suite(problem, o);
    if (count) *count = static_cast<int>(result.size());
    for (std::size_t i = 0; i < result.size(); ++i) {
      if (groups && static_cast<int>(i) < capacity) {
        trips_gradcheck_group& g = groups[i];
        std::memset(g.group, 0, sizeof g.group);
        std::strncpy(g.group, result[i].group.c_str(), sizeof g.group - 1);
        g.max_rel_error = result[i].max_rel_error;
        g.checked = result[i].checked;
        g.skipped = result[i].skipped;
      }
      if (!(result[i].max_rel_error < tolerance)) {
        failed = true;
        failures += " " + result[i].group + " (" + result[i].worst_entry + "[" +
                    std::to_string(result[i].worst_index) + "] analytic " + std::to_string(result[i].worst_analytic) +
                    " numeric " + std::to_string(result[i].worst_numeric) + ")";
      }
    }
  });
  if (status != TRIPS_OK) return status;
  if (failed) {
    g_last_error = "gradient check exceeded tolerance in:" + failures;
    return TRIPS_ERROR_CHECK;
  }
  return TRIPS_OK;
}

}  // extern "C"
