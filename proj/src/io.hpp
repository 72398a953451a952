#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pipeline.hpp"
#include "scene.hpp"
#include "tensor.hpp"

namespace trips {

struct PlyData {
  std::vector<float> positions;  // N x 3
  std::vector<std::uint8_t> colors;  // N x 3, empty when the file has no red/green/blue
  std::size_t size() const { return positions.size() / 3; }
};

// ASCII or binary little-endian PLY; only the vertex element is interpreted.
PlyData read_ply(const std::string& path);
void write_ply(const std::string& path, const PlyData& data, bool binary = true);

// Point cloud ready for optimization: colors seed the first three descriptor
// channels (scaled to [0,1]), remaining channels ~ N(0, 0.25^2), sizes from
// the 4-nearest-neighbour mean, opacity 0.5.
PointCloud make_point_cloud(const PlyData& data, int features, std::uint64_t seed);

// JSON list of {image, width, height, fx, fy, cx, cy, q: [w,x,y,z], t: [x,y,z]}.
// Relative image paths are resolved against the file's directory.
FrameSet read_cameras(const std::string& path, std::vector<std::string>* warnings = nullptr);
void write_cameras(const std::string& path, const FrameSet& frames);

// PNG (8-bit RGB) or binary PPM, chosen by extension. Values are clamped to
// [0,1] and rounded half up.
Tensor<float> read_image(const std::string& path);
void write_image(const std::string& path, const Tensor<float>& rgb);
std::uint8_t quantize(float v);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Model<float>& model);
Model<float> deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Model<float>& model);
Model<float> load_checkpoint(const std::string& path);
// Replaces `model` only if the checkpoint matches its point count.
void load_checkpoint_into(const std::string& path, Model<float>& model);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace trips
