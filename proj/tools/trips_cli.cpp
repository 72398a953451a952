// Command-line front end. Talks to the renderer only through trips.h.
#include <trips/trips.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace {

struct SceneDeleter {
  void operator()(trips_scene* s) const { trips_scene_free(s); }
};
struct ModelDeleter {
  void operator()(trips_model* m) const { trips_model_free(m); }
};
using ScenePtr = std::unique_ptr<trips_scene, SceneDeleter>;
using ModelPtr = std::unique_ptr<trips_model, ModelDeleter>;

struct Failure {
  int code;
};

void check(trips_status status) {
  if (status == TRIPS_OK) return;
  std::cerr << "trips: " << trips_last_error() << "\n";
  throw Failure{static_cast<int>(status) > 3 ? 4 : static_cast<int>(status)};
}

struct Common {
  std::string scene;
  std::string cameras;
  std::string out;
  int layers = 4;
  int features = 4;
  std::uint64_t seed = 1;
  int threads = 0;
  std::string sh = "on";
  std::string env = "constant";
};

void add_common(CLI::App* cmd, Common& c, bool scene_required) {
  auto* scene = cmd->add_option("--scene", c.scene, "Point cloud (.ply)");
  if (scene_required) scene->required();
  cmd->add_option("--cameras", c.cameras, "Camera list (.json); defaults to cameras.json next to the scene");
  cmd->add_option("--out", c.out, "Output path");
  cmd->add_option("--layers", c.layers, "Pyramid layers")->check(CLI::Range(3, 8));
  cmd->add_option("--features", c.features, "Descriptor channels")->check(CLI::Range(1, 64));
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--threads", c.threads, "Thread cap (default: TRIPS_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--sh", c.sh, "Spherical-harmonics output")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--env", c.env, "Environment model")->check(CLI::IsMember({"constant", "latlong"}));
}

trips_model_options model_options(const Common& c) {
  trips_model_options o;
  trips_model_options_default(&o);
  o.layers = c.layers;
  o.features = c.features;
  o.sh = c.sh == "on";
  o.env = c.env == "latlong" ? TRIPS_ENV_LATLONG : TRIPS_ENV_CONSTANT;
  o.seed = c.seed;
  return o;
}

ScenePtr load_scene(const Common& c) {
  std::string cameras = c.cameras;
  if (cameras.empty()) cameras = (std::filesystem::path(c.scene).parent_path() / "cameras.json").string();
  trips_scene* s = nullptr;
  check(trips_scene_load(c.scene.c_str(), cameras.c_str(), c.features, c.seed, &s));
  ScenePtr scene(s);
  for (int i = 0; i < trips_scene_warning_count(s); ++i) std::cerr << "warning: " << trips_scene_warning(s, i) << "\n";
  return scene;
}

ModelPtr make_model(const Common& c, const trips_scene* scene, const std::string& checkpoint) {
  trips_model* m = nullptr;
  if (!checkpoint.empty()) {
    check(trips_model_load(checkpoint.c_str(), &m));
    ModelPtr model(m);
    if (scene && trips_model_point_count(m) != trips_scene_point_count(scene)) {
      std::cerr << "trips: checkpoint has " << trips_model_point_count(m) << " points but the scene has "
                << trips_scene_point_count(scene) << "\n";
      throw Failure{2};
    }
    return model;
  }
  const trips_model_options o = model_options(c);
  check(trips_model_create(scene, &o, &m));
  return ModelPtr(m);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text)) {
    std::cerr << "trips: cannot write " << path << "\n";
    throw Failure{2};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trilinear point-splatting renderer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", trips_version());

  // synth
  Common syn;
  std::string kind = "plane";
  int syn_points = 10000, syn_cameras = 16, syn_res = 128;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene with ground-truth images");
  add_common(synth, syn, false);
  synth->add_option("--kind", kind, "plane, sphere or hole")->check(CLI::IsMember({"plane", "sphere", "hole"}));
  synth->add_option("--points", syn_points, "Point count")->check(CLI::Range(100, 100000000));
  synth->add_option("--num-cameras", syn_cameras, "Camera count")->check(CLI::Range(9, 100000));
  synth->add_option("--resolution", syn_res, "Image side length")->check(CLI::Range(8, 16384));

  // train
  Common tr;
  trips_train_options topt;
  trips_train_options_default(&topt);
  std::string tr_metrics, tr_checkpoint;
  bool tr_no_zoom = false, tr_quiet = false;
  auto* train = app.add_subcommand("train", "Optimize a model and write a checkpoint");
  add_common(train, tr, true);
  train->add_option("--epochs", topt.epochs, "Epochs")->check(CLI::NonNegativeNumber);
  train->add_option("--warmup", topt.warmup_epochs, "Half-resolution warm-up epochs")->check(CLI::NonNegativeNumber);
  train->add_option("--eval-every", topt.eval_every, "Held-out evaluation interval")->check(CLI::PositiveNumber);
  train->add_option("--ssim-weight", topt.ssim_weight, "Weight of 1-SSIM in the loss")->check(CLI::Range(0.0, 1.0));
  train->add_option("--metrics", tr_metrics, "Metrics CSV (default: <out>.csv)");
  train->add_option("--checkpoint", tr_checkpoint, "Resume from this checkpoint");
  train->add_flag("--no-zoom", tr_no_zoom, "Disable random zoom/crop");
  train->add_flag("--quiet", tr_quiet, "No per-epoch progress");

  // render
  Common rd;
  std::string rd_checkpoint;
  int rd_frame = 0;
  auto* render = app.add_subcommand("render", "Render one camera to PNG");
  add_common(render, rd, true);
  render->add_option("--checkpoint", rd_checkpoint, "Trained model");
  render->add_option("--frame", rd_frame, "Camera index")->check(CLI::NonNegativeNumber);

  // render-path
  Common rp;
  std::string rp_checkpoint;
  std::vector<int> rp_keys;
  int rp_steps = 10;
  auto* path = app.add_subcommand("render-path", "Render an interpolated camera path to numbered PNGs");
  add_common(path, rp, true);
  path->add_option("--checkpoint", rp_checkpoint, "Trained model");
  path->add_option("--keys", rp_keys, "Key camera indices (default: all cameras in order)");
  path->add_option("--steps", rp_steps, "Frames per segment")->check(CLI::PositiveNumber);

  // benchmark
  Common bm;
  std::string bm_checkpoint;
  int bm_frame = 0, bm_reps = 10, bm_points = 0, bm_res = 0;
  auto* bench = app.add_subcommand("benchmark", "Per-stage render timings as CSV");
  add_common(bench, bm, false);
  bench->add_option("--checkpoint", bm_checkpoint, "Trained model");
  bench->add_option("--frame", bm_frame, "Camera index")->check(CLI::NonNegativeNumber);
  bench->add_option("--repetitions", bm_reps, "Timed runs (median reported)")->check(CLI::PositiveNumber);
  bench->add_option("--synthetic-points", bm_points, "Benchmark a generated plane scene instead of --scene")
      ->check(CLI::Range(100, 100000000));
  bench->add_option("--resolution", bm_res, "Image side for --synthetic-points")->check(CLI::Range(8, 16384));

  // gradcheck
  Common gc;
  int gc_res = 32;
  double gc_tol = 1e-4;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
  add_common(grad, gc, false);
  grad->add_option("--resolution", gc_res, "Rendered resolution (longer side)")->check(CLI::Range(8, 4096));
  grad->add_option("--tolerance", gc_tol, "Maximum relative error")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "trips: " << e.what() << "\n\n";
    const auto chosen = app.get_subcommands();
    std::cerr << (chosen.empty() ? app.help() : chosen.front()->help());
    return 1;
  }

  auto apply_threads = [](const Common& c) { trips_set_threads(c.threads); };

  try {
    if (synth->parsed()) {
      apply_threads(syn);
      if (syn.out.empty()) {
        std::cerr << "trips synth: --out <directory> is required\n" << synth->help();
        return 1;
      }
      if (syn.features < 3) {
        std::cerr << "trips synth: synthetic scenes need --features >= 3\n";
        return 1;
      }
      trips_scene* s = nullptr;
      check(trips_scene_synthesize(kind.c_str(), syn_points, syn_cameras, syn_res, syn.seed, syn.features, &s));
      ScenePtr scene(s);
      check(trips_scene_save(s, syn.out.c_str()));
      std::cerr << "wrote " << kind << " scene with " << trips_scene_point_count(s) << " points and "
                << trips_scene_frame_count(s) << " frames to " << syn.out << "\n";
    } else if (train->parsed()) {
      apply_threads(tr);
      const std::string out = tr.out.empty() ? "model.trips" : tr.out;
      const std::string metrics = tr_metrics.empty() ? out + ".csv" : tr_metrics;
      ScenePtr scene = load_scene(tr);
      ModelPtr model = make_model(tr, scene.get(), tr_checkpoint);
      topt.seed = tr.seed;
      topt.zoom = tr_no_zoom ? 0 : 1;
      topt.verbose = tr_quiet ? 0 : 1;
      topt.metrics_csv = metrics.c_str();
      trips_train_summary summary{};
      check(trips_train(model.get(), scene.get(), &topt, &summary));
      check(trips_model_save(model.get(), out.c_str()));
      std::printf("epochs %d final_loss %.6f test_psnr %.3f test_ssim %.4f\n", summary.epochs, summary.final_loss,
                  summary.test_psnr, summary.test_ssim);
      if (summary.rates_halved) std::cerr << "warning: non-finite loss encountered; learning rates were halved\n";
    } else if (render->parsed()) {
      apply_threads(rd);
      ScenePtr scene = load_scene(rd);
      ModelPtr model = make_model(rd, scene.get(), rd_checkpoint);
      const std::string out = rd.out.empty() ? "render.png" : rd.out;
      check(trips_render_frame(model.get(), rd_frame, out.c_str()));
    } else if (path->parsed()) {
      apply_threads(rp);
      ScenePtr scene = load_scene(rp);
      ModelPtr model = make_model(rp, scene.get(), rp_checkpoint);
      if (rp_keys.empty()) {
        for (int i = 0; i < trips_model_camera_count(model.get()); ++i) rp_keys.push_back(i);
      }
      const std::string out = rp.out.empty() ? "path" : rp.out;
      int written = 0;
      check(trips_render_path(model.get(), rp_keys.data(), static_cast<int>(rp_keys.size()), rp_steps, out.c_str(),
                              &written));
      std::cerr << "wrote " << written << " frames to " << out << "\n";
    } else if (bench->parsed()) {
      apply_threads(bm);
      ScenePtr scene;
      if (bm_points > 0) {
        trips_scene* s = nullptr;
        const int res = bm_res > 0 ? bm_res : 512;
        check(trips_scene_synthesize("plane", bm_points, 9, res, bm.seed, std::max(3, bm.features), &s));
        scene.reset(s);
        bm.features = std::max(3, bm.features);
      } else if (!bm.scene.empty()) {
        scene = load_scene(bm);
      } else {
        std::cerr << "trips benchmark: need --scene or --synthetic-points\n" << bench->help();
        return 1;
      }
      ModelPtr model = make_model(bm, scene.get(), bm_checkpoint);
      trips_benchmark_result r{};
      check(trips_benchmark(model.get(), bm_frame, bm_reps, &r));
      char buf[512];
      std::snprintf(buf, sizeof buf, "%zu,%d,%d,%d,%d,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%d,%.4f,%.6f\n",
                    r.points, r.layers, r.width, r.height, bm_reps, r.count_alloc_ms, r.splat_ms, r.sort_blend_ms,
                    r.raster_ms, r.network_ms, r.tonemap_ms, r.total_ms, r.fragments_per_point,
                    r.max_fragments_per_point, r.mean_list_length, r.truncation_rate);
      write_text(bm.out,
                 std::string("points,layers,width,height,repetitions,count_alloc_ms,splat_ms,sort_blend_ms,raster_ms,"
                             "network_ms,tonemap_ms,total_ms,fragments_per_point,max_fragments_per_point,"
                             "mean_list_length,truncation_rate\n") +
                     buf);
    } else if (grad->parsed()) {
      apply_threads(gc);
      ScenePtr scene;
      if (!gc.scene.empty()) scene = load_scene(gc);
      const trips_model_options o = model_options(gc);
      std::vector<trips_gradcheck_group> groups(32);
      int count = 0;
      const trips_status status = trips_gradcheck(scene.get(), &o, gc_res, gc_tol, groups.data(),
                                                   static_cast<int>(groups.size()), &count);
      if (status != TRIPS_OK && status != TRIPS_ERROR_CHECK) check(status);
      std::printf("%-12s %14s %8s %8s\n", "group", "max_rel_error", "checked", "skipped");
      for (int i = 0; i < count && i < static_cast<int>(groups.size()); ++i) {
        const auto& g = groups[static_cast<std::size_t>(i)];
        std::printf("%-12s %14.3e %8zu %8zu\n", g.group, g.max_rel_error, g.checked, g.skipped);
      }
      check(status);
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
