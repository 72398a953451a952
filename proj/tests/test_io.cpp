#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <unistd.h>

#include "io.hpp"
#include "synth.hpp"

using namespace trips;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("trips_io_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

Model<float> small_model(int layers = 4) {
  SyntheticOptions o;
  o.points = 300;
  o.cameras = 9;
  o.resolution = 16;
  o.render_images = false;
  const auto scene = make_synthetic_scene(o);
  std::vector<Camera> cams;
  for (const auto& f : scene.frames.frames) cams.push_back(f.camera);
  ModelConfig mc;
  mc.layers = layers;
  mc.env_mode = EnvMode::Equirectangular;
  mc.env_height = 4;
  auto model = Model<float>::create(scene.cloud, cams, mc);
  // make every value non-default so a dropped field would show
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n01;
  for (auto& e : model.store.entries())
    for (float& v : e.value.values()) v += 0.01f * n01(rng);
  model.epoch = 17;
  return model;
}

}  // namespace

TEST_CASE("ASCII PLY with three vertices") {
  TempDir tmp;
  write_file(tmp / "a.ply",
             "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\nproperty float y\n"
             "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
             "0 0 0 255 0 0\n1.5 -2 3 0 255 0\n0.1 0.2 0.3 0 0 51\n");
  const auto ply = read_ply(tmp / "a.ply");
  REQUIRE(ply.size() == 3);
  CHECK(ply.positions[3] == 1.5f);
  CHECK(ply.positions[4] == -2.0f);
  CHECK(ply.positions[6] == 0.1f);
  const auto cloud = make_point_cloud(ply, 5, 1);
  CHECK(cloud.descriptors[0] == 1.0f);
  CHECK(cloud.descriptors[1] == 0.0f);
  CHECK(cloud.descriptors[2 * 5 + 2] == doctest::Approx(0.2f));
}

TEST_CASE("binary PLY round trip is bit-identical; ASCII preserves floats") {
  TempDir tmp;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n01;
  PlyData data;
  for (int i = 0; i < 10000 * 3; ++i) data.positions.push_back(n01(rng) * 100.0f);
  for (int i = 0; i < 10000 * 3; ++i) data.colors.push_back(static_cast<std::uint8_t>(rng() & 255));
  write_ply(tmp / "b.ply", data, true);
  auto back = read_ply(tmp / "b.ply");
  CHECK(back.positions == data.positions);
  CHECK(back.colors == data.colors);
  write_ply(tmp / "c.ply", data, false);
  back = read_ply(tmp / "c.ply");
  CHECK(back.positions == data.positions);
}

TEST_CASE("PLY errors") {
  TempDir tmp;
  write_file(tmp / "noz.ply",
             "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n");
  try {
    read_ply(tmp / "noz.ply");
    FAIL("expected rejection");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("x, y") != std::string::npos);
  }
  write_file(tmp / "bad.ply", "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nbogus line\nend_header\n");
  try {
    read_ply(tmp / "bad.ply");
    FAIL("expected rejection");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 5") != std::string::npos);
  }
  // count larger than the payload
  write_file(tmp / "short.ply",
             "ply\nformat binary_little_endian 1.0\nelement vertex 1000000000\nproperty float x\nproperty float y\n"
             "property float z\nend_header\n");
  CHECK_THROWS_AS(read_ply(tmp / "short.ply"), DataError);
  CHECK_THROWS_AS(read_ply(tmp / "missing.ply"), DataError);
}

TEST_CASE("camera JSON: identity record, split and round trip") {
  TempDir tmp;
  write_file(tmp / "cams.json",
             R"([{"image": "img.png", "width": 16, "height": 12, "fx": 20, "fy": 21, "cx": 7.5, "cy": 5.5,
                  "q": [1, 0, 0, 0], "t": [0, 0, 0]}])");
  auto frames = read_cameras(tmp / "cams.json");
  REQUIRE(frames.frames.size() == 1);
  const auto& cam = frames.frames[0].camera;
  CHECK((cam.pose.to_view(Eigen::Vector3d(1, 2, 3)) - Eigen::Vector3d(1, 2, 3)).norm() == 0.0);
  CHECK(frames.frames[0].image == tmp / "img.png");

  FrameSet many;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 16; ++i) {
    Frame f;
    f.camera.intrinsics = Intrinsics{100 + n01(rng), 101 + n01(rng), 31.5 + n01(rng), 23.5 + n01(rng), 64, 48};
    f.camera.pose.rotation = Eigen::Quaterniond(n01(rng), n01(rng), n01(rng), n01(rng)).normalized();
    f.camera.pose.translation = Eigen::Vector3d(n01(rng), n01(rng), n01(rng));
    f.camera.exposure = i % 3 == 0 ? 0.0 : n01(rng);
    f.camera.wb_red = 1 + 0.1 * n01(rng);
    f.image = tmp / ("images/f" + std::to_string(i) + ".png");
    many.frames.push_back(f);
  }
  write_cameras(tmp / "many.json", many);
  const auto back = read_cameras(tmp / "many.json");
  REQUIRE(back.frames.size() == 16);
  CHECK(back.test_indices() == std::vector<int>{0, 8});
  for (int i = 0; i < 16; ++i) {
    const auto& a = many.frames[static_cast<std::size_t>(i)];
    const auto& b = back.frames[static_cast<std::size_t>(i)];
    CHECK(a.camera.intrinsics.fx == b.camera.intrinsics.fx);
    CHECK(a.camera.intrinsics.cy == b.camera.intrinsics.cy);
    CHECK(a.camera.pose.translation == b.camera.pose.translation);
    CHECK(std::abs(a.camera.pose.rotation.w() - b.camera.pose.rotation.w()) <= 1e-15);
    CHECK(a.camera.exposure == b.camera.exposure);
    CHECK(a.camera.wb_red == b.camera.wb_red);
    CHECK(a.image == b.image);
  }
}

TEST_CASE("camera JSON errors and warnings") {
  TempDir tmp;
  write_file(tmp / "neg.json", R"([{"width": 16, "height": 12, "fx": 0, "fy": 21, "cx": 7.5, "cy": 5.5,
                                    "q": [1, 0, 0, 0], "t": [0, 0, 0]}])");
  CHECK_THROWS_AS(read_cameras(tmp / "neg.json"), DataError);
  write_file(tmp / "broken.json", "[{");
  CHECK_THROWS_AS(read_cameras(tmp / "broken.json"), DataError);
  write_file(tmp / "q.json", R"({"frames": [{"width": 16, "height": 12, "fx": 10, "fy": 10, "cx": 7.5, "cy": 5.5,
                                  "q": [2, 0, 0, 0], "t": [0, 0, 0]}]})");
  std::vector<std::string> warnings;
  const auto frames = read_cameras(tmp / "q.json", &warnings);
  CHECK(warnings.size() == 1);
  CHECK(frames.frames[0].camera.pose.rotation.w() == 1.0);
}

TEST_CASE("image quantization and PNG round trip") {
  TempDir tmp;
  CHECK(quantize(0.5f) == 128);
  CHECK(quantize(0.0f) == 0);
  CHECK(quantize(-1.0f) == 0);
  CHECK(quantize(2.0f) == 255);
  Tensor<float> img({3, 5, 7});
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  for (float& v : img.values()) v = u(rng);
  for (const char* name : {"x.png", "x.ppm"}) {
    write_image(tmp / name, img);
    const auto back = read_image(tmp / name);
    REQUIRE(back.shape() == img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back[i] - img[i]) <= 1.0f / 510.0f + 1e-6f);
  }
  write_image(tmp / "y.png", img);
  CHECK(read_file(tmp / "x.png") == read_file(tmp / "y.png"));
  Tensor<float> zero({3, 2, 2});
  write_image(tmp / "z.ppm", zero);
  const std::string bytes = read_file(tmp / "z.ppm");
  CHECK(bytes.substr(bytes.size() - 12) == std::string(12, '\0'));
  CHECK_THROWS_AS(write_image("/nonexistent/dir/x.png", img), DataError);
}

TEST_CASE("checkpoint save/load/save is byte-identical") {
  TempDir tmp;
  const auto model = small_model();
  save_checkpoint(tmp / "m.ckpt", model);
  const auto loaded = load_checkpoint(tmp / "m.ckpt");
  save_checkpoint(tmp / "m2.ckpt", loaded);
  CHECK(read_file(tmp / "m.ckpt") == read_file(tmp / "m2.ckpt"));
  CHECK(loaded.epoch == 17);
  CHECK(loaded.config.env_mode == EnvMode::Equirectangular);
  for (std::size_t i = 0; i < model.store.entries().size(); ++i) {
    const auto& a = model.store.entries()[i];
    const auto& b = loaded.store.entries()[i];
    CHECK(a.name == b.name);
    CHECK(std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("checkpoint rejects truncation, bad magic, versions and mismatched point counts") {
  TempDir tmp;
  const auto model = small_model();
  const std::string bytes = serialize_checkpoint(model);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 9)), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), DataError);
  std::string version = bytes;
  version[9] = 2;
  CHECK_THROWS_AS(deserialize_checkpoint(version), DataError);

  save_checkpoint(tmp / "m.ckpt", model);
  SyntheticOptions o;
  o.points = 200;
  o.cameras = 9;
  o.resolution = 16;
  o.render_images = false;
  const auto other = make_synthetic_scene(o);
  std::vector<Camera> cams;
  for (const auto& f : other.frames.frames) cams.push_back(f.camera);
  auto target = Model<float>::create(other.cloud, cams, ModelConfig{});
  const auto before = serialize_checkpoint(target);
  try {
    load_checkpoint_into(tmp / "m.ckpt", target);
    FAIL("expected rejection");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(model.point_count())) != std::string::npos);
    CHECK(msg.find(std::to_string(target.point_count())) != std::string::npos);
  }
  CHECK(serialize_checkpoint(target) == before);
}
