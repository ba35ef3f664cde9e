#include <cmath>
#include <sstream>
#include <stdexcept>

#include "compresskit/layers.hpp"

namespace compresskit {

namespace {

void fail(const std::string& message) { throw std::invalid_argument(message); }

void alloc_param(Layer& l, std::vector<std::size_t> shape, bool weight) {
  l.params.emplace_back(shape);
  l.grads.emplace_back(shape);
  l.velocity.emplace_back(shape);
  l.masks.emplace_back(weight ? Tensor::full(shape, 1.0) : Tensor{});
}

int scaled(int base, double width_multiplier) {
  const int c = static_cast<int>(std::lround(base * width_multiplier));
  return c < 1 ? 1 : c;
}

std::vector<std::size_t> infer_list(std::vector<Layer>& layers, std::vector<std::size_t> shape);

std::vector<std::size_t> infer_one(Layer& l, const std::vector<std::size_t>& in) {
  auto require_rank3 = [&](const char* what) {
    if (in.size() != 3)
      fail(std::string(what) + ": expected a [C, H, W] input, got " + shape_to_string(in));
  };
  l.input_shape = in;
  switch (l.kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != static_cast<std::size_t>(l.fan_in))
        fail("dense: expected [" + std::to_string(l.fan_in) + "] input, got " + shape_to_string(in));
      l.output_shape = {static_cast<std::size_t>(l.fan_out)};
      break;
    case LayerKind::conv:
    case LayerKind::group_conv:
    case LayerKind::depthwise_separable_conv: {
      require_rank3(layer_kind_name(l.kind));
      if (in[0] != static_cast<std::size_t>(l.conv.d))
        fail(std::string(layer_kind_name(l.kind)) + ": expected " + std::to_string(l.conv.d) +
             " input channels, got " + shape_to_string(in));
      l.conv.h_in = static_cast<int>(in[1]);
      l.conv.w_in = static_cast<int>(in[2]);
      l.conv.validate();
      l.output_shape = {static_cast<std::size_t>(l.conv.n_filters),
                        static_cast<std::size_t>(l.conv.h_out()),
                        static_cast<std::size_t>(l.conv.w_out())};
      break;
    }
    case LayerKind::channel_shuffle:
      require_rank3("channel_shuffle");
      if (in[0] % static_cast<std::size_t>(l.groups) != 0)
        fail("channel_shuffle: channels " + std::to_string(in[0]) + " not divisible by groups " +
             std::to_string(l.groups));
      l.output_shape = in;
      break;
    case LayerKind::batch_norm: {
      const std::size_t channels = in.size() == 3 ? in[0] : in.at(0);
      if (in.size() != 3 && in.size() != 1)
        fail("batch_norm: expected [C, H, W] or [F] input, got " + shape_to_string(in));
      if (channels != static_cast<std::size_t>(l.bn_channels))
        fail("batch_norm: configured for " + std::to_string(l.bn_channels) + " channels, input has " +
             std::to_string(channels));
      l.output_shape = in;
      break;
    }
    case LayerKind::dropout:
    case LayerKind::relu:
      l.output_shape = in;
      break;
    case LayerKind::softmax_xent_head:
      if (in.size() != 1)
        fail("softmax_xent_head: expected a flat logits input, got " + shape_to_string(in));
      l.output_shape = in;
      break;
    case LayerKind::residual_block:
      l.output_shape = infer_list(l.children, in);
      break;
    case LayerKind::flatten:
      l.output_shape = {shape_product(in)};
      break;
    case LayerKind::pool: {
      require_rank3("pool");
      const std::size_t kh = l.pool.global ? in[1] : static_cast<std::size_t>(l.pool.k);
      const std::size_t kw = l.pool.global ? in[2] : static_cast<std::size_t>(l.pool.k);
      const std::size_t stride = l.pool.global ? 1 : static_cast<std::size_t>(l.pool.stride);
      if (kh > in[1] || kw > in[2])
        fail("pool: window exceeds input " + shape_to_string(in));
      l.output_shape = {in[0], (in[1] - kh) / stride + 1, (in[2] - kw) / stride + 1};
      break;
    }
  }
  return l.output_shape;
}

std::vector<std::size_t> infer_list(std::vector<Layer>& layers, std::vector<std::size_t> shape) {
  for (auto& l : layers) shape = infer_one(l, shape);
  return shape;
}

} // namespace

Layer Layer::dense_layer(int fan_in, int fan_out) {
  if (fan_in <= 0 || fan_out <= 0) fail("dense_layer: non-positive fan");
  Layer l;
  l.kind = LayerKind::dense;
  l.fan_in = fan_in;
  l.fan_out = fan_out;
  alloc_param(l, {static_cast<std::size_t>(fan_out), static_cast<std::size_t>(fan_in)}, true);
  alloc_param(l, {static_cast<std::size_t>(fan_out)}, false);
  return l;
}

Layer Layer::conv_layer(int in_channels, int out_channels, int k, int stride, int padding) {
  return group_conv_layer(in_channels, out_channels, k, 1, stride, padding);
}

Layer Layer::group_conv_layer(int in_channels, int out_channels, int k, int g, int stride,
                              int padding) {
  Layer l;
  l.kind = g == 1 ? LayerKind::conv : LayerKind::group_conv;
  l.conv = ConvSpec{.w_in = 0, .h_in = 0, .d = in_channels, .n_filters = out_channels, .k = k,
                    .g = g, .stride = stride, .padding = padding};
  if (in_channels <= 0 || out_channels <= 0 || in_channels % g != 0 || out_channels % g != 0)
    fail("group_conv_layer: invalid channel/group combination");
  alloc_param(l, {static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels / g),
                  static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, true);
  alloc_param(l, {static_cast<std::size_t>(out_channels)}, false);
  return l;
}

Layer Layer::depthwise_separable_layer(int in_channels, int out_channels, int k, int stride,
                                       int padding) {
  Layer l;
  l.kind = LayerKind::depthwise_separable_conv;
  l.conv = ConvSpec{.w_in = 0, .h_in = 0, .d = in_channels, .n_filters = out_channels, .k = k,
                    .g = 1, .stride = stride, .padding = padding};
  alloc_param(l, {static_cast<std::size_t>(in_channels), static_cast<std::size_t>(k),
                  static_cast<std::size_t>(k)}, true);
  alloc_param(l, {static_cast<std::size_t>(in_channels)}, false);
  alloc_param(l, {static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels), 1, 1},
              true);
  alloc_param(l, {static_cast<std::size_t>(out_channels)}, false);
  return l;
}

Layer Layer::channel_shuffle_layer(int groups) {
  if (groups <= 0) fail("channel_shuffle_layer: groups must be positive");
  Layer l;
  l.kind = LayerKind::channel_shuffle;
  l.groups = groups;
  return l;
}

Layer Layer::batch_norm_layer(int channels) {
  if (channels <= 0) fail("batch_norm_layer: channels must be positive");
  Layer l;
  l.kind = LayerKind::batch_norm;
  l.bn_channels = channels;
  l.regularisation_flag = true;
  alloc_param(l, {static_cast<std::size_t>(channels)}, false); // gamma
  alloc_param(l, {static_cast<std::size_t>(channels)}, false); // beta
  l.state.emplace_back(std::vector<std::size_t>{static_cast<std::size_t>(channels)});
  l.state.emplace_back(std::vector<std::size_t>{static_cast<std::size_t>(channels)});
  l.params[0].fill(1.0);
  l.state[1].fill(1.0);
  return l;
}

Layer Layer::dropout_layer(double rate) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout_layer: rate must be in [0, 1)");
  Layer l;
  l.kind = LayerKind::dropout;
  l.rate = rate;
  l.regularisation_flag = true;
  return l;
}

Layer Layer::relu_layer() {
  Layer l;
  l.kind = LayerKind::relu;
  return l;
}

Layer Layer::softmax_xent_head_layer() {
  Layer l;
  l.kind = LayerKind::softmax_xent_head;
  return l;
}

Layer Layer::residual_block_layer(std::vector<Layer> children) {
  Layer l;
  l.kind = LayerKind::residual_block;
  l.children = std::move(children);
  return l;
}

Layer Layer::flatten_layer() {
  Layer l;
  l.kind = LayerKind::flatten;
  return l;
}

Layer Layer::pool_layer(PoolOp op, int k, int stride) {
  if (k <= 0 || stride <= 0) fail("pool_layer: window and stride must be positive");
  Layer l;
  l.kind = LayerKind::pool;
  l.pool = PoolSpec{op, k, stride, false};
  return l;
}

Layer Layer::global_avg_pool_layer() {
  Layer l;
  l.kind = LayerKind::pool;
  l.pool = PoolSpec{PoolOp::avg, 0, 1, true};
  return l;
}

void infer_shapes(Network& net) {
  if (net.input_shape.empty()) fail("infer_shapes: network has no input shape");
  infer_list(net.layers, net.input_shape);
}

namespace {

// inverted residual: 1x1 expand -> BN -> relu -> depthwise separable (k3) -> BN
Layer inverted_residual_block(int c_in, int c_out, int expand, int stride) {
  const int mid = c_in * expand;
  std::vector<Layer> body;
  body.push_back(Layer::conv_layer(c_in, mid, 1, 1, 0));
  body.push_back(Layer::batch_norm_layer(mid));
  body.push_back(Layer::relu_layer());
  body.push_back(Layer::depthwise_separable_layer(mid, c_out, 3, stride, 1));
  body.push_back(Layer::batch_norm_layer(c_out));
  return Layer::residual_block_layer(std::move(body));
}

// grouped pointwise -> shuffle -> depthwise -> pointwise, batch-normed
Layer shuffle_block(int c_in, int c_out, int g, int stride) {
  std::vector<Layer> body;
  body.push_back(Layer::group_conv_layer(c_in, c_in, 1, g, 1, 0));
  body.push_back(Layer::batch_norm_layer(c_in));
  body.push_back(Layer::relu_layer());
  body.push_back(Layer::channel_shuffle_layer(g));
  body.push_back(Layer::group_conv_layer(c_in, c_in, 3, c_in, stride, 1)); // depthwise
  body.push_back(Layer::batch_norm_layer(c_in));
  body.push_back(Layer::conv_layer(c_in, c_out, 1, 1, 0));
  body.push_back(Layer::batch_norm_layer(c_out));
  body.push_back(Layer::relu_layer());
  return Layer::residual_block_layer(std::move(body));
}

} // namespace

Network build_architecture(ArchTag tag, const std::vector<std::size_t>& input_shape, int classes,
                           double width_multiplier) {
  if (input_shape.size() != 3)
    fail("build_architecture: expected a [C, H, W] input shape, got " + shape_to_string(input_shape));
  if (classes < 2) fail("build_architecture: need at least 2 classes");
  if (width_multiplier <= 0.0) fail("build_architecture: width multiplier must be positive");

  Network net;
  net.arch_tag = tag;
  net.input_shape = input_shape;
  net.classes = classes;
  const int c_in = static_cast<int>(input_shape[0]);

  switch (tag) {
    case ArchTag::mini_alexnet: {
      const int c1 = scaled(8, width_multiplier);
      const int c2 = scaled(16, width_multiplier);
      const int c3 = scaled(32, width_multiplier);
      const int hidden = scaled(64, width_multiplier);
      net.layers.push_back(Layer::conv_layer(c_in, c1, 3, 1, 1));
      net.layers.push_back(Layer::relu_layer());
      net.layers.push_back(Layer::pool_layer(PoolOp::max, 2, 2));
      net.layers.push_back(Layer::conv_layer(c1, c2, 3, 1, 1));
      net.layers.push_back(Layer::relu_layer());
      net.layers.push_back(Layer::pool_layer(PoolOp::max, 2, 2));
      net.layers.push_back(Layer::conv_layer(c2, c3, 3, 1, 1));
      net.layers.push_back(Layer::relu_layer());
      net.layers.push_back(Layer::pool_layer(PoolOp::max, 2, 2));
      net.layers.push_back(Layer::flatten_layer());
      // flat size depends on the input spatial dims; resolve by inference below
      Network probe = net;
      const auto flat = infer_list(probe.layers, probe.input_shape);
      const int flat_size = static_cast<int>(flat[0]);
      net.layers.push_back(Layer::dropout_layer(0.5));
      net.layers.push_back(Layer::dense_layer(flat_size, hidden));
      net.layers.push_back(Layer::relu_layer());
      net.layers.push_back(Layer::dropout_layer(0.5));
      net.layers.push_back(Layer::dense_layer(hidden, classes));
      net.layers.push_back(Layer::softmax_xent_head_layer());
      break;
    }
    case ArchTag::mini_mobilenet: {
      const int stem = scaled(8, width_multiplier);
      const int wide = scaled(16, width_multiplier);
      net.layers.push_back(Layer::conv_layer(c_in, stem, 3, 1, 1));
      net.layers.push_back(Layer::batch_norm_layer(stem));
      net.layers.push_back(Layer::relu_layer());
      net.layers.push_back(inverted_residual_block(stem, stem, 2, 1));
      net.layers.push_back(inverted_residual_block(stem, stem, 2, 1));
      net.layers.push_back(inverted_residual_block(stem, wide, 2, 2));
      net.layers.push_back(inverted_residual_block(wide, wide, 2, 1));
      net.layers.push_back(Layer::global_avg_pool_layer());
      net.layers.push_back(Layer::flatten_layer());
      net.layers.push_back(Layer::dense_layer(wide, classes));
      net.layers.push_back(Layer::softmax_xent_head_layer());
      break;
    }
    case ArchTag::mini_shufflenet: {
      const int stem = scaled(8, width_multiplier);
      const int wide = scaled(16, width_multiplier);
      net.layers.push_back(Layer::conv_layer(c_in, stem, 3, 1, 1));
      net.layers.push_back(Layer::batch_norm_layer(stem));
      net.layers.push_back(Layer::relu_layer());
      net.layers.push_back(shuffle_block(stem, stem, 2, 1));
      net.layers.push_back(shuffle_block(stem, wide, 2, 2));
      net.layers.push_back(shuffle_block(wide, wide, 2, 1));
      net.layers.push_back(Layer::global_avg_pool_layer());
      net.layers.push_back(Layer::flatten_layer());
      net.layers.push_back(Layer::dense_layer(wide, classes));
      net.layers.push_back(Layer::softmax_xent_head_layer());
      break;
    }
    case ArchTag::custom:
      fail("build_architecture: custom networks are assembled directly from layers");
  }

  infer_shapes(net);
  return net;
}

namespace {

bool foldable(LayerKind kind) {
  return kind == LayerKind::dense || kind == LayerKind::conv || kind == LayerKind::group_conv ||
         kind == LayerKind::depthwise_separable_conv;
}

// y = scale_c * conv_out_c + shift_c folded into the producing weights/bias
void fold_batch_norm(Layer& target, const Layer& bn) {
  const auto& gamma = bn.params[0];
  const auto& beta = bn.params[1];
  const auto& mean = bn.state[0];
  const auto& var = bn.state[1];
  const std::size_t channels = gamma.size();

  const std::size_t weight_idx = target.kind == LayerKind::depthwise_separable_conv ? 2 : 0;
  const std::size_t bias_idx = weight_idx + 1;
  Tensor& weights = target.params[weight_idx];
  Tensor& bias = target.params[bias_idx];
  if (bias.size() != channels)
    fail("strip_regularisation: batch norm over " + std::to_string(channels) +
         " channels cannot fold into a layer with " + std::to_string(bias.size()) + " outputs");

  const std::size_t per_channel = weights.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    const double scale = gamma[c] / std::sqrt(var[c] + bn.bn_eps);
    for (std::size_t i = 0; i < per_channel; ++i) weights[c * per_channel + i] *= scale;
    bias[c] = (bias[c] - mean[c]) * scale + beta[c];
  }
  for (auto& v : target.velocity) v.fill(0.0);
}

std::vector<Layer> strip_list(const std::vector<Layer>& layers) {
  std::vector<Layer> out;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::dropout) continue;
    if (l.kind == LayerKind::batch_norm) {
      if (out.empty() || !foldable(out.back().kind))
        fail("strip_regularisation: batch_norm has no preceding weighted layer to fold into");
      fold_batch_norm(out.back(), l);
      continue;
    }
    Layer copy = l;
    if (l.kind == LayerKind::residual_block) copy.children = strip_list(l.children);
    out.push_back(std::move(copy));
  }
  return out;
}

} // namespace

Network strip_regularisation(const Network& net) {
  Network out = net;
  out.layers = strip_list(net.layers);
  infer_shapes(out);
  return out;
}

} // namespace compresskit
