#include "io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

namespace trips {
namespace {

namespace fs = std::filesystem;

// ---- PLY -------------------------------------------------------------------

struct PlyProperty {
  std::string name;
  std::string type;
  bool list = false;
  std::string count_type;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

int type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  return 0;
}

template <typename T>
T load_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                               std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return std::bit_cast<T>(u);
}

double read_binary_scalar(const std::string& t, const unsigned char* p) {
  if (t == "char" || t == "int8") return load_le<std::int8_t>(p);
  if (t == "uchar" || t == "uint8") return load_le<std::uint8_t>(p);
  if (t == "short" || t == "int16") return load_le<std::int16_t>(p);
  if (t == "ushort" || t == "uint16") return load_le<std::uint16_t>(p);
  if (t == "int" || t == "int32") return load_le<std::int32_t>(p);
  if (t == "uint" || t == "uint32") return load_le<std::uint32_t>(p);
  if (t == "float" || t == "float32") return load_le<float>(p);
  return load_le<double>(p);
}

template <typename T>
void store_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                               std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

// ---- checkpoint reader -----------------------------------------------------

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    const T v = load_le<T>(reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_);
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const std::uint32_t n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (n > limit_ - pos_) {
      throw DataError("checkpoint is truncated or corrupt: needs " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + " but only " + std::to_string(limit_ - pos_) + " remain");
    }
  }
  std::size_t remaining() const { return limit_ - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[] = "TRIPSCKPT";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;

void put_string(std::string& out, const std::string& s) {
  store_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed while writing " + path);
}

PlyData read_ply(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  int line_no = 0;
  auto next_line = [&]() -> std::string {
    if (pos >= bytes.size()) throw DataError(path + ": PLY header ends before end_header (line " + std::to_string(line_no) + ")");
    std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) end = bytes.size();
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  auto fail = [&](const std::string& what) -> DataError {
    return DataError(path + ": malformed PLY header at line " + std::to_string(line_no) + ": " + what);
  };

  if (next_line() != "ply") throw fail("missing 'ply' magic");
  bool binary = false;
  bool have_format = false;
  std::vector<PlyElement> elements;
  for (;;) {
    const std::string line = next_line();
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key.empty() || key == "comment" || key == "obj_info") continue;
    if (key == "end_header") break;
    if (key == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "ascii") binary = false;
      else if (fmt == "binary_little_endian") binary = true;
      else throw fail("unsupported format '" + fmt + "'");
      have_format = true;
    } else if (key == "element") {
      PlyElement e;
      long long count = -1;
      ls >> e.name >> count;
      if (e.name.empty() || count < 0 || ls.fail()) throw fail("bad element line '" + line + "'");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(e);
    } else if (key == "property") {
      if (elements.empty()) throw fail("property before any element");
      PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.list = true;
        ls >> p.count_type >> p.type >> p.name;
        if (!type_size(p.count_type)) throw fail("unknown list count type '" + p.count_type + "'");
      } else {
        p.type = t;
        ls >> p.name;
      }
      if (p.name.empty() || !type_size(p.type)) throw fail("bad property line '" + line + "'");
      elements.back().properties.push_back(p);
    } else {
      throw fail("unexpected keyword '" + key + "'");
    }
  }
  if (!have_format) throw fail("no format line");
  auto vit = std::find_if(elements.begin(), elements.end(), [](const PlyElement& e) { return e.name == "vertex"; });
  if (vit == elements.end()) throw DataError(path + ": PLY has no vertex element");
  const PlyElement& vertex = *vit;
  auto index_of = [&](const std::string& n) {
    for (std::size_t i = 0; i < vertex.properties.size(); ++i)
      if (vertex.properties[i].name == n && !vertex.properties[i].list) return static_cast<int>(i);
    return -1;
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
  if (ix < 0 || iy < 0 || iz < 0) {
    std::string list;
    for (const auto& p : vertex.properties) list += (list.empty() ? "" : ", ") + p.name;
    throw DataError(path + ": vertex element lacks x/y/z; properties: " + (list.empty() ? "(none)" : list));
  }
  const int ir = index_of("red"), ig = index_of("green"), ib = index_of("blue");
  const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;

  PlyData out;
  const std::size_t n = vertex.count;
  const std::size_t payload = bytes.size() - std::min(pos, bytes.size());

  if (binary) {
    for (auto it = elements.begin(); it != vit; ++it) {
      for (const auto& p : it->properties)
        if (p.list) throw DataError(path + ": list properties before the vertex element are not supported");
    }
    std::size_t skip = 0;
    for (auto it = elements.begin(); it != vit; ++it) {
      std::size_t stride = 0;
      for (const auto& p : it->properties) stride += static_cast<std::size_t>(type_size(p.type));
      skip += stride * it->count;
    }
    std::size_t stride = 0;
    std::vector<std::size_t> offset;
    for (const auto& p : vertex.properties) {
      if (p.list) throw DataError(path + ": list properties in the vertex element are not supported");
      offset.push_back(stride);
      stride += static_cast<std::size_t>(type_size(p.type));
    }
    if (skip > payload || (stride > 0 && n > (payload - skip) / stride)) {
      throw DataError(path + ": vertex count " + std::to_string(n) + " exceeds the " + std::to_string(payload) +
                      " bytes of data in the file");
    }
    out.positions.resize(3 * n);
    if (has_color) out.colors.resize(3 * n);
    const auto* base = reinterpret_cast<const unsigned char*>(bytes.data()) + pos + skip;
    auto get = [&](std::size_t v, int prop) {
      return read_binary_scalar(vertex.properties[static_cast<std::size_t>(prop)].type,
                                base + v * stride + offset[static_cast<std::size_t>(prop)]);
    };
    for (std::size_t v = 0; v < n; ++v) {
      out.positions[3 * v] = static_cast<float>(get(v, ix));
      out.positions[3 * v + 1] = static_cast<float>(get(v, iy));
      out.positions[3 * v + 2] = static_cast<float>(get(v, iz));
      if (has_color) {
        out.colors[3 * v] = static_cast<std::uint8_t>(std::clamp(get(v, ir), 0.0, 255.0));
        out.colors[3 * v + 1] = static_cast<std::uint8_t>(std::clamp(get(v, ig), 0.0, 255.0));
        out.colors[3 * v + 2] = static_cast<std::uint8_t>(std::clamp(get(v, ib), 0.0, 255.0));
      }
    }
    return out;
  }

  // ASCII: every value needs at least two characters, which bounds the count.
  std::istringstream body(bytes.substr(pos));
  if (n > payload / 2 + 1) {
    throw DataError(path + ": vertex count " + std::to_string(n) + " cannot fit in " + std::to_string(payload) +
                    " bytes of ASCII data");
  }
  std::string token;
  for (auto it = elements.begin(); it != vit; ++it) {
    for (std::size_t r = 0; r < it->count; ++r) {
      for (const auto& p : it->properties) {
        if (p.list) {
          long long k = 0;
          if (!(body >> k) || k < 0) throw DataError(path + ": bad list length in element " + it->name);
          for (long long q = 0; q < k; ++q)
            if (!(body >> token)) throw DataError(path + ": truncated element " + it->name);
        } else if (!(body >> token)) {
          throw DataError(path + ": truncated element " + it->name);
        }
      }
    }
  }
  out.positions.resize(3 * n);
  if (has_color) out.colors.resize(3 * n);
  std::vector<double> row(vertex.properties.size());
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t p = 0; p < vertex.properties.size(); ++p) {
      if (vertex.properties[p].list) {
        long long k = 0;
        if (!(body >> k) || k < 0) throw DataError(path + ": bad list length in vertex " + std::to_string(v));
        for (long long q = 0; q < k; ++q) body >> token;
        continue;
      }
      if (!(body >> token)) throw DataError(path + ": file ends inside vertex " + std::to_string(v));
      char* end = nullptr;
      row[p] = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0') {
        throw DataError(path + ": vertex " + std::to_string(v) + " property " + vertex.properties[p].name +
                        " is not a number: '" + token + "'");
      }
    }
    out.positions[3 * v] = static_cast<float>(row[static_cast<std::size_t>(ix)]);
    out.positions[3 * v + 1] = static_cast<float>(row[static_cast<std::size_t>(iy)]);
    out.positions[3 * v + 2] = static_cast<float>(row[static_cast<std::size_t>(iz)]);
    if (has_color) {
      out.colors[3 * v] = static_cast<std::uint8_t>(std::clamp(row[static_cast<std::size_t>(ir)], 0.0, 255.0));
      out.colors[3 * v + 1] = static_cast<std::uint8_t>(std::clamp(row[static_cast<std::size_t>(ig)], 0.0, 255.0));
      out.colors[3 * v + 2] = static_cast<std::uint8_t>(std::clamp(row[static_cast<std::size_t>(ib)], 0.0, 255.0));
    }
  }
  return out;
}

void write_ply(const std::string& path, const PlyData& data, bool binary) {
  const std::size_t n = data.size();
  const bool color = data.colors.size() == 3 * n && n > 0;
  std::string out = "ply\n";
  out += binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  out += "element vertex " + std::to_string(n) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  if (color) out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out += "end_header\n";
  char buf[128];
  for (std::size_t i = 0; i < n; ++i) {
    if (binary) {
      for (int a = 0; a < 3; ++a) store_le<float>(out, data.positions[3 * i + a]);
      if (color)
        for (int a = 0; a < 3; ++a) out.push_back(static_cast<char>(data.colors[3 * i + a]));
    } else {
      std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", data.positions[3 * i], data.positions[3 * i + 1],
                    data.positions[3 * i + 2]);
      out += buf;
      if (color) {
        std::snprintf(buf, sizeof buf, " %d %d %d", data.colors[3 * i], data.colors[3 * i + 1], data.colors[3 * i + 2]);
        out += buf;
      }
      out += '\n';
    }
  }
  write_file(path, out);
}

PointCloud make_point_cloud(const PlyData& data, int features, std::uint64_t seed) {
  if (data.size() == 0) throw DataError("point cloud is empty");
  PointCloud cloud = PointCloud::from_positions(data.positions, features);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.25f);
  const int seeded = data.colors.empty() ? 0 : std::min(3, features);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < features; ++c) {
      float& d = cloud.descriptors[i * static_cast<std::size_t>(features) + static_cast<std::size_t>(c)];
      d = c < seeded ? static_cast<float>(data.colors[3 * i + static_cast<std::size_t>(c)]) / 255.0f : noise(rng);
    }
  }
  if (cloud.size() >= 2) init_point_sizes(cloud);
  return cloud;
}

FrameSet read_cameras(const std::string& path, std::vector<std::string>* warnings) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
  if (doc.is_object() && doc.contains("frames")) doc = doc["frames"];
  if (!doc.is_array()) throw DataError(path + ": expected a JSON list of camera records");
  const fs::path dir = fs::path(path).parent_path();
  FrameSet set;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& r = doc[i];
    const std::string where = path + ": camera " + std::to_string(i);
    try {
      Frame f;
      Intrinsics& k = f.camera.intrinsics;
      k.width = r.at("width").get<int>();
      k.height = r.at("height").get<int>();
      k.fx = r.at("fx").get<double>();
      k.fy = r.at("fy").get<double>();
      k.cx = r.at("cx").get<double>();
      k.cy = r.at("cy").get<double>();
      if (!(k.fx > 0) || !(k.fy > 0)) throw DataError(where + ": focal lengths must be positive");
      if (k.width < 8 || k.height < 8) throw DataError(where + ": image must be at least 8x8");
      const auto q = r.at("q").get<std::vector<double>>();
      const auto t = r.at("t").get<std::vector<double>>();
      if (q.size() != 4 || t.size() != 3) throw DataError(where + ": q needs 4 values and t needs 3");
      Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
      const double norm = quat.norm();
      if (!(norm > 0) || !std::isfinite(norm)) throw DataError(where + ": quaternion has zero or invalid norm");
      if (std::abs(norm - 1.0) > 1e-3 && warnings) {
        warnings->push_back(where + ": quaternion norm " + std::to_string(norm) + " renormalized");
      }
      quat.normalize();
      f.camera.pose.rotation = quat;
      f.camera.pose.translation = Eigen::Vector3d(t[0], t[1], t[2]);
      if (r.contains("exposure")) f.camera.exposure = r["exposure"].get<double>();
      if (r.contains("white_balance")) {
        const auto wb = r["white_balance"].get<std::vector<double>>();
        if (wb.size() != 2) throw DataError(where + ": white_balance needs [r, b]");
        f.camera.wb_red = wb[0];
        f.camera.wb_blue = wb[1];
      }
      f.image = r.value("image", std::string());
      if (!f.image.empty() && fs::path(f.image).is_relative() && !dir.empty()) f.image = (dir / f.image).string();
      set.frames.push_back(std::move(f));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  set.assign_split();
  return set;
}

void write_cameras(const std::string& path, const FrameSet& frames) {
  nlohmann::json doc = nlohmann::json::array();
  const fs::path dir = fs::path(path).parent_path();
  for (const Frame& f : frames.frames) {
    const auto& k = f.camera.intrinsics;
    const auto& q = f.camera.pose.rotation;
    const auto& t = f.camera.pose.translation;
    std::string image = f.image;
    if (!image.empty() && !dir.empty()) {
      const fs::path rel = fs::path(image).lexically_relative(dir);
      if (!rel.empty() && rel.native()[0] != '.') image = rel.string();
    }
    nlohmann::json r;
    r["image"] = image;
    r["width"] = k.width;
    r["height"] = k.height;
    r["fx"] = k.fx;
    r["fy"] = k.fy;
    r["cx"] = k.cx;
    r["cy"] = k.cy;
    r["q"] = {q.w(), q.x(), q.y(), q.z()};
    r["t"] = {t.x(), t.y(), t.z()};
    if (f.camera.exposure != 0) r["exposure"] = f.camera.exposure;
    if (f.camera.wb_red != 1 || f.camera.wb_blue != 1) r["white_balance"] = {f.camera.wb_red, f.camera.wb_blue};
    doc.push_back(r);
  }
  write_file(path, doc.dump(2) + "\n");
}

std::uint8_t quantize(float v) {
  const float c = std::clamp(std::isnan(v) ? 0.0f : v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::floor(static_cast<double>(c) * 255.0 + 0.5));
}

namespace {

bool has_extension(const std::string& path, const char* ext) {
  std::string e = fs::path(path).extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e == ext;
}

Tensor<float> read_ppm(const std::string& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255 || !in) throw DataError(path + ": unsupported PPM (need 8-bit P6)");
  in.get();
  const std::size_t start = static_cast<std::size_t>(in.tellg());
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < start || bytes.size() - start < need) throw DataError(path + ": PPM pixel data truncated");
  Tensor<float> img({3, h, w});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + start;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(p[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

}  // namespace

Tensor<float> read_image(const std::string& path) {
  if (has_extension(path, ".ppm")) return read_ppm(path);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError(path + ": cannot read PNG: " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError(path + ": cannot decode PNG: " + image.message);
  }
  const int w = static_cast<int>(image.width), h = static_cast<int>(image.height);
  Tensor<float> img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

void write_image(const std::string& path, const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("write_image: expected [3,H,W], got " + shape_string(rgb.shape()));
  const int h = rgb.dim(1), w = rgb.dim(2);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = quantize(rgb(c, y, x));
  if (has_extension(path, ".ppm")) {
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(buf.data()), buf.size());
    write_file(path, out);
    return;
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError(path + ": cannot write PNG: " + image.message);
  }
}

// Layout: magic, u32 version, model config, cameras, parameter entries,
// u64 total length of the file (including this field).
std::string serialize_checkpoint(const Model<float>& model) {
  std::string out(kMagic, kMagicSize);
  store_le<std::uint32_t>(out, kCheckpointVersion);
  const ModelConfig& c = model.config;
  store_le<std::int32_t>(out, c.layers);
  store_le<std::int32_t>(out, c.features);
  store_le<std::uint8_t>(out, c.sh ? 1 : 0);
  store_le<std::uint8_t>(out, c.env_mode == EnvMode::Equirectangular ? 1 : 0);
  store_le<std::int32_t>(out, c.env_height);
  store_le<double>(out, c.near);
  store_le<std::uint64_t>(out, c.seed);
  store_le<std::int32_t>(out, model.epoch);
  store_le<double>(out, model.extent);

  store_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.cameras.size()));
  for (const Camera& cam : model.cameras) {
    const auto& k = cam.intrinsics;
    store_le<std::int32_t>(out, k.width);
    store_le<std::int32_t>(out, k.height);
    for (double v : {k.fx, k.fy, k.cx, k.cy}) store_le<double>(out, v);
    const auto& q = cam.pose.rotation;
    for (double v : {q.w(), q.x(), q.y(), q.z()}) store_le<double>(out, v);
    for (int a = 0; a < 3; ++a) store_le<double>(out, cam.pose.translation[a]);
  }

  const auto& entries = model.store.entries();
  store_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_string(out, e.name);
    put_string(out, e.group);
    store_le<double>(out, e.learning_rate);
    store_le<std::uint8_t>(out, e.enabled ? 1 : 0);
    store_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.shape()) store_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : e.value.values()) store_le<float>(out, v);
  }
  store_le<std::uint64_t>(out, static_cast<std::uint64_t>(out.size() + sizeof(std::uint64_t)));
  return out;
}

Model<float> deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicSize + 4 + 8 || bytes.compare(0, kMagicSize, kMagic) != 0) {
    throw DataError("not a checkpoint (bad magic)");
  }
  {
    ByteReader head(bytes, bytes.size());
    for (std::size_t i = 0; i < kMagicSize; ++i) head.get<std::uint8_t>();
    const auto version = head.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
      throw DataError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
  }
  const std::uint64_t recorded = load_le<std::uint64_t>(reinterpret_cast<const unsigned char*>(bytes.data()) + bytes.size() - 8);
  if (recorded != bytes.size()) {
    throw DataError("checkpoint is truncated or corrupt: length field says " + std::to_string(recorded) +
                    " bytes, file has " + std::to_string(bytes.size()));
  }
  ByteReader r(bytes, bytes.size() - 8);
  for (std::size_t i = 0; i < kMagicSize; ++i) r.get<std::uint8_t>();
  r.get<std::uint32_t>();

  Model<float> m;
  ModelConfig& c = m.config;
  c.layers = r.get<std::int32_t>();
  c.features = r.get<std::int32_t>();
  c.sh = r.get<std::uint8_t>() != 0;
  c.env_mode = r.get<std::uint8_t>() ? EnvMode::Equirectangular : EnvMode::Constant;
  c.env_height = r.get<std::int32_t>();
  c.near = r.get<double>();
  c.seed = r.get<std::uint64_t>();
  m.epoch = r.get<std::int32_t>();
  m.extent = r.get<double>();
  if (c.layers < 3 || c.layers > kMaxLayers || c.features < 1) throw DataError("checkpoint has an invalid model configuration");

  const auto cameras = r.get<std::uint32_t>();
  constexpr std::size_t kCameraBytes = 2 * 4 + 11 * 8;
  if (cameras > r.remaining() / kCameraBytes) throw DataError("checkpoint camera count exceeds file size");
  for (std::uint32_t i = 0; i < cameras; ++i) {
    Camera cam;
    auto& k = cam.intrinsics;
    k.width = r.get<std::int32_t>();
    k.height = r.get<std::int32_t>();
    k.fx = r.get<double>();
    k.fy = r.get<double>();
    k.cx = r.get<double>();
    k.cy = r.get<double>();
    const double w = r.get<double>(), x = r.get<double>(), y = r.get<double>(), z = r.get<double>();
    cam.pose.rotation = Eigen::Quaterniond(w, x, y, z);
    for (int a = 0; a < 3; ++a) cam.pose.translation[a] = r.get<double>();
    m.cameras.push_back(cam);
  }

  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    const std::string group = r.get_string();
    const double lr = r.get<double>();
    const bool enabled = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw DataError("checkpoint entry " + name + " has invalid rank " + std::to_string(rank));
    std::vector<int> shape;
    std::size_t elements = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint32_t>();
      if (extent == 0 || extent > r.remaining()) throw DataError("checkpoint entry " + name + " has invalid shape");
      shape.push_back(static_cast<int>(extent));
      elements *= extent;
      if (elements > r.remaining() / 4 + 1) throw DataError("checkpoint entry " + name + " exceeds file size");
    }
    r.need(elements * 4);
    Tensor<float> value(shape);
    for (float& v : value.values()) v = r.get<float>();
    auto& e = m.store.add(name, group, std::move(value), lr);
    e.enabled = enabled;
  }
  if (r.remaining() != 0) throw DataError("checkpoint has " + std::to_string(r.remaining()) + " unexpected trailing bytes");
  for (const char* required : {names::kPosition, names::kLogSize, names::kOpacity, names::kDescriptor,
                               names::kEnvironment, names::kResponse, names::kVignette}) {
    if (!m.store.contains(required)) throw DataError(std::string("checkpoint lacks entry ") + required);
  }
  return m;
}

void save_checkpoint(const std::string& path, const Model<float>& model) { write_file(path, serialize_checkpoint(model)); }

Model<float> load_checkpoint(const std::string& path) {
  try {
    return deserialize_checkpoint(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void load_checkpoint_into(const std::string& path, Model<float>& model) {
  Model<float> loaded = load_checkpoint(path);
  if (loaded.point_count() != model.point_count()) {
    throw DataError(path + ": checkpoint has " + std::to_string(loaded.point_count()) + " points but the model has " +
                    std::to_string(model.point_count()));
  }
  model = std::move(loaded);
}

}  // namespace trips
