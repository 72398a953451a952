#include "decoder.hpp"

#include <cmath>

#include "parallel.hpp"
#include "shading.hpp"

namespace trips {

std::string block_prefix(int layer) { return "decoder.block" + std::to_string(layer); }

std::size_t DecoderConfig::parameter_count() const {
  std::size_t total = 0;
  for (int l = 0; l < layers; ++l) {
    const std::size_t in = static_cast<std::size_t>(block_inputs(l));
    total += 2 * (hidden * in * kernel * kernel + hidden);  // feature + gate
    total += hidden * in + hidden;                           // bypass
  }
  total += static_cast<std::size_t>(output_channels) * hidden + output_channels;
  return total;
}

template <typename Real>
GatedConvBlock<Real> GatedConvBlock<Real>::from_store(const ParameterStore<Real>& store, int layer) {
  const std::string p = block_prefix(layer);
  GatedConvBlock<Real> b;
  b.feature_weight = &store.value(p + ".feature.weight");
  b.feature_bias = &store.value(p + ".feature.bias");
  b.gate_weight = &store.value(p + ".gate.weight");
  b.gate_bias = &store.value(p + ".gate.bias");
  b.bypass_weight = &store.value(p + ".bypass.weight");
  b.bypass_bias = &store.value(p + ".bypass.bias");
  return b;
}

template <typename Real>
GatedConvBlockGrads<Real> GatedConvBlockGrads<Real>::from_store(ParameterStore<Real>& store, int layer) {
  const std::string p = block_prefix(layer);
  GatedConvBlockGrads<Real> g;
  g.feature_weight = &store.grad(p + ".feature.weight");
  g.feature_bias = &store.grad(p + ".feature.bias");
  g.gate_weight = &store.grad(p + ".gate.weight");
  g.gate_bias = &store.grad(p + ".gate.bias");
  g.bypass_weight = &store.grad(p + ".bypass.weight");
  g.bypass_bias = &store.grad(p + ".bypass.bias");
  return g;
}

template <typename Real>
Tensor<Real> gated_conv_block(const Tensor<Real>& input, const GatedConvBlock<Real>& block,
                              GatedConvCache<Real>* cache) {
  Tensor<Real> feature = conv2d(input, *block.feature_weight, *block.feature_bias);
  Tensor<Real> gate = conv2d(input, *block.gate_weight, *block.gate_bias);
  Tensor<Real> out = conv2d(input, *block.bypass_weight, *block.bypass_bias);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += elu(feature[i]) * sigmoid(gate[i]);
  if (cache) {
    cache->input = input;
    cache->feature = std::move(feature);
    cache->gate = std::move(gate);
  }
  return out;
}

template <typename Real>
Tensor<Real> gated_conv_block_backward(const GatedConvBlock<Real>& block, const GatedConvCache<Real>& cache,
                                       const Tensor<Real>& grad_out, const GatedConvBlockGrads<Real>& grads) {
  if (!grad_out.same_shape(cache.feature)) {
    throw ShapeError("gated_conv_block_backward: gradient shape " + shape_string(grad_out.shape()) +
                     " does not match block output " + shape_string(cache.feature.shape()));
  }
  Tensor<Real> d_feature(cache.feature.shape());
  Tensor<Real> d_gate(cache.gate.shape());
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const Real f = cache.feature[i];
    const Real s = sigmoid(cache.gate[i]);
    d_feature[i] = grad_out[i] * s * elu_grad(f);
    d_gate[i] = grad_out[i] * elu(f) * s * (Real(1) - s);
  }
  Tensor<Real> d_input(cache.input.shape());
  conv2d_backward(cache.input, *block.feature_weight, d_feature, &d_input, grads.feature_weight, grads.feature_bias);
  conv2d_backward(cache.input, *block.gate_weight, d_gate, &d_input, grads.gate_weight, grads.gate_bias);
  conv2d_backward(cache.input, *block.bypass_weight, grad_out, &d_input, grads.bypass_weight, grads.bypass_bias);
  return d_input;
}

template <typename Real>
void add_decoder_parameters(ParameterStore<Real>& store, const DecoderConfig& config, std::mt19937_64& rng,
                            double learning_rate) {
  auto kaiming = [&](std::vector<int> shape) {
    Tensor<Real> t(shape);
    const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Real& v : t.values()) v = static_cast<Real>(dist(rng));
    return t;
  };
  const int k = config.kernel;
  const int h = config.hidden;
  for (int l = config.layers - 1; l >= 0; --l) {
    const std::string p = block_prefix(l);
    const int in = config.block_inputs(l);
    store.add(p + ".feature.weight", "network", kaiming({h, in, k, k}), learning_rate);
    store.add(p + ".feature.bias", "network", Tensor<Real>({h}), learning_rate);
    store.add(p + ".gate.weight", "network", kaiming({h, in, k, k}), learning_rate);
    store.add(p + ".gate.bias", "network", Tensor<Real>({h}, Real(1)), learning_rate);
    store.add(p + ".bypass.weight", "network", kaiming({h, in, 1, 1}), learning_rate);
    store.add(p + ".bypass.bias", "network", Tensor<Real>({h}), learning_rate);
  }
  Tensor<Real> out_w = kaiming({config.output_channels, h, 1, 1});
  // Keep the initial output small around the grey bias.
  for (Real& v : out_w.values()) v = static_cast<Real>(v * 0.1);
  Tensor<Real> out_b({config.output_channels});
  if (config.output_channels == kShCoefficients) {
    for (int c = 0; c < 3; ++c) out_b[static_cast<std::size_t>(c * kShBasis)] = static_cast<Real>(0.5 / kShBand0);
  } else {
    for (Real& v : out_b.values()) v = Real(0.5);
  }
  store.add(kDecoderOutputWeight, "network", std::move(out_w), learning_rate);
  store.add(kDecoderOutputBias, "network", std::move(out_b), learning_rate);
}

template <typename Real>
Tensor<Real> decode_pyramid(const ParameterStore<Real>& store, const DecoderConfig& config,
                            const ImagePyramid<Real>& pyramid, DecoderCache<Real>* cache) {
  const int n = config.layers;
  if (static_cast<int>(pyramid.layers.size()) != n) {
    throw ShapeError("decode_pyramid: pyramid has " + std::to_string(pyramid.layers.size()) +
                     " layers but the decoder expects " + std::to_string(n));
  }
  if (pyramid.features != config.features) throw ShapeError("decode_pyramid: feature count mismatch");
  if (cache) cache->blocks.assign(static_cast<std::size_t>(n), GatedConvCache<Real>{});

  auto block_cache = [&](int l) { return cache ? &cache->blocks[static_cast<std::size_t>(l)] : nullptr; };
  Tensor<Real> hidden =
      gated_conv_block(pyramid.layers[static_cast<std::size_t>(n - 1)], GatedConvBlock<Real>::from_store(store, n - 1),
                       block_cache(n - 1));
  for (int l = n - 2; l >= 0; --l) {
    const Tensor<Real>& raster = pyramid.layers[static_cast<std::size_t>(l)];
    Tensor<Real> up = upsample2x(hidden, raster.dim(1), raster.dim(2));
    hidden = gated_conv_block(concat_channels(raster, up), GatedConvBlock<Real>::from_store(store, l), block_cache(l));
  }
  Tensor<Real> out = conv2d(hidden, store.value(kDecoderOutputWeight), store.value(kDecoderOutputBias));
  if (cache) cache->hidden = std::move(hidden);
  return out;
}

template <typename Real>
ImagePyramid<Real> decode_pyramid_backward(ParameterStore<Real>& store, const DecoderConfig& config,
                                           const DecoderCache<Real>& cache, const Tensor<Real>& grad_out,
                                           bool param_grads) {
  const int n = config.layers;
  if (static_cast<int>(cache.blocks.size()) != n) throw ShapeError("decode_pyramid_backward: cache does not match config");
  ImagePyramid<Real> grad;
  grad.features = config.features;
  grad.layers.resize(static_cast<std::size_t>(n));
  {
    const Tensor<Real>& first = cache.blocks[0].input;
    grad.geometry = PyramidGeometry::make(first.dim(2), first.dim(1), n);
  }

  Tensor<Real> d_hidden(cache.hidden.shape());
  conv2d_backward(cache.hidden, store.value(kDecoderOutputWeight), grad_out, &d_hidden,
                  param_grads ? &store.grad(kDecoderOutputWeight) : nullptr,
                  param_grads ? &store.grad(kDecoderOutputBias) : nullptr);

  const int raster = config.raster_channels();
  for (int l = 0; l < n; ++l) {
    const auto& bc = cache.blocks[static_cast<std::size_t>(l)];
    GatedConvBlockGrads<Real> sinks;
    if (param_grads) sinks = GatedConvBlockGrads<Real>::from_store(store, l);
    Tensor<Real> d_input =
        gated_conv_block_backward(GatedConvBlock<Real>::from_store(store, l), bc, d_hidden, sinks);
    if (l == n - 1) {
      grad.layers[static_cast<std::size_t>(l)] = std::move(d_input);
      break;
    }
    grad.layers[static_cast<std::size_t>(l)] = slice_channels(d_input, 0, raster);
    const Tensor<Real> d_up = slice_channels(d_input, raster, config.hidden);
    const auto& coarser = cache.blocks[static_cast<std::size_t>(l + 1)].feature;
    d_hidden = upsample2x_backward(d_up, coarser.dim(1), coarser.dim(2));
  }
  return grad;
}

#define TRIPS_INSTANTIATE(Real)                                                                                  \
  template struct GatedConvBlock<Real>;                                                                         \
  template struct GatedConvBlockGrads<Real>;                                                                    \
  template Tensor<Real> gated_conv_block(const Tensor<Real>&, const GatedConvBlock<Real>&, GatedConvCache<Real>*); \
  template Tensor<Real> gated_conv_block_backward(const GatedConvBlock<Real>&, const GatedConvCache<Real>&,        \
                                                  const Tensor<Real>&, const GatedConvBlockGrads<Real>&);       \
  template void add_decoder_parameters(ParameterStore<Real>&, const DecoderConfig&, std::mt19937_64&, double);  \
  template Tensor<Real> decode_pyramid(const ParameterStore<Real>&, const DecoderConfig&,                      \
                                       const ImagePyramid<Real>&, DecoderCache<Real>*);                         \
  template ImagePyramid<Real> decode_pyramid_backward(ParameterStore<Real>&, const DecoderConfig&,              \
                                                      const DecoderCache<Real>&, const Tensor<Real>&, bool);

TRIPS_INSTANTIATE(float)
TRIPS_INSTANTIATE(double)
#undef TRIPS_INSTANTIATE

}  // namespace trips
