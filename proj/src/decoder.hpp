#pragma once

#include <random>
#include <string>
#include <vector>

#include "params.hpp"
#include "raster.hpp"
#include "tensor.hpp"

namespace trips {

struct DecoderConfig {
  int layers = 4;
  int features = 4;
  int hidden = 32;
  int output_channels = 27;
  int kernel = 3;

  // Raster channels of one pyramid layer (features + accumulated opacity).
  int raster_channels() const { return features + 1; }
  // The coarsest block sees only its raster layer; finer blocks also get the
  // upsampled hidden state of the level below.
  int block_inputs(int layer) const { return layer == layers - 1 ? raster_channels() : raster_channels() + hidden; }
  std::size_t parameter_count() const;
};

std::string block_prefix(int layer);
inline constexpr const char* kDecoderOutputWeight = "decoder.output.weight";
inline constexpr const char* kDecoderOutputBias = "decoder.output.bias";

// Read-only view of one gated block's parameters.
template <typename Real>
struct GatedConvBlock {
  const Tensor<Real>* feature_weight = nullptr;
  const Tensor<Real>* feature_bias = nullptr;
  const Tensor<Real>* gate_weight = nullptr;
  const Tensor<Real>* gate_bias = nullptr;
  const Tensor<Real>* bypass_weight = nullptr;
  const Tensor<Real>* bypass_bias = nullptr;

  static GatedConvBlock from_store(const ParameterStore<Real>& store, int layer);
};

// Gradient sinks for one block; null members are skipped.
template <typename Real>
struct GatedConvBlockGrads {
  Tensor<Real>* feature_weight = nullptr;
  Tensor<Real>* feature_bias = nullptr;
  Tensor<Real>* gate_weight = nullptr;
  Tensor<Real>* gate_bias = nullptr;
  Tensor<Real>* bypass_weight = nullptr;
  Tensor<Real>* bypass_bias = nullptr;

  static GatedConvBlockGrads from_store(ParameterStore<Real>& store, int layer);
  bool any() const { return feature_weight != nullptr; }
};

template <typename Real>
struct GatedConvCache {
  Tensor<Real> input;
  Tensor<Real> feature;  // pre-activation
  Tensor<Real> gate;     // pre-sigmoid
};

// out = ELU(conv_f(x)) * sigmoid(conv_g(x)) + bypass_1x1(x)
template <typename Real>
Tensor<Real> gated_conv_block(const Tensor<Real>& input, const GatedConvBlock<Real>& block,
                              GatedConvCache<Real>* cache = nullptr);

// Returns the gradient w.r.t. the block input; parameter gradients accumulate
// into `grads` when provided.
template <typename Real>
Tensor<Real> gated_conv_block_backward(const GatedConvBlock<Real>& block, const GatedConvCache<Real>& cache,
                                       const Tensor<Real>& grad_out, const GatedConvBlockGrads<Real>& grads);

template <typename Real>
struct DecoderCache {
  std::vector<GatedConvCache<Real>> blocks;  // indexed by pyramid layer
  Tensor<Real> hidden;                       // finest block output
};

// Kaiming-uniform kernels, zero biases, gate biases +1. The band-0 output
// bias starts at mid grey so the first renders are not clamped to black.
template <typename Real>
void add_decoder_parameters(ParameterStore<Real>& store, const DecoderConfig& config, std::mt19937_64& rng,
                            double learning_rate);

template <typename Real>
Tensor<Real> decode_pyramid(const ParameterStore<Real>& store, const DecoderConfig& config,
                            const ImagePyramid<Real>& pyramid, DecoderCache<Real>* cache = nullptr);

// Gradient w.r.t. every pyramid layer. Parameter gradients accumulate into the
// store when `param_grads` is set.
template <typename Real>
ImagePyramid<Real> decode_pyramid_backward(ParameterStore<Real>& store, const DecoderConfig& config,
                                           const DecoderCache<Real>& cache, const Tensor<Real>& grad_out,
                                           bool param_grads);

}  // namespace trips
