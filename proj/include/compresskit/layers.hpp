#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "compresskit/conv.hpp"
#include "compresskit/tensor.hpp"

namespace compresskit {

enum class LayerKind {
  dense,
  conv,
  depthwise_separable_conv,
  group_conv,
  channel_shuffle,
  batch_norm,
  dropout,
  relu,
  softmax_xent_head,
  residual_block,
  flatten,
  pool,
};

const char* layer_kind_name(LayerKind kind);

enum class PoolOp { max, avg };

struct PoolSpec {
  PoolOp op = PoolOp::max;
  int k = 2;
  int stride = 2;
  bool global = false; // window spans the whole plane, output 1x1
};

/// One network layer. Parameters, gradients, masks and optimiser velocity are
/// parallel vectors; mask/velocity entries exist only for weight tensors
/// (biases and batch-norm affine terms are never masked).
struct Layer {
  LayerKind kind = LayerKind::relu;

  ConvSpec conv;     // conv, group_conv, depthwise_separable_conv
  int fan_in = 0;    // dense
  int fan_out = 0;   // dense
  double rate = 0.0; // dropout
  int groups = 1;    // channel_shuffle
  PoolSpec pool;
  int bn_channels = 0;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  bool regularisation_flag = false; // dropout and batch_norm

  std::vector<std::size_t> input_shape;  // per-sample, filled by infer_shapes
  std::vector<std::size_t> output_shape;

  std::vector<Tensor> params;
  std::vector<Tensor> grads;
  std::vector<Tensor> masks;    // empty Tensor for non-weight params
  std::vector<Tensor> velocity; // same layout as params
  std::vector<Tensor> state;    // batch_norm running mean / variance

  std::vector<Layer> children; // residual_block

  static Layer dense_layer(int fan_in, int fan_out);
  static Layer conv_layer(int in_channels, int out_channels, int k, int stride, int padding);
  static Layer group_conv_layer(int in_channels, int out_channels, int k, int g, int stride,
                                int padding);
  static Layer depthwise_separable_layer(int in_channels, int out_channels, int k, int stride,
                                         int padding);
  static Layer channel_shuffle_layer(int groups);
  static Layer batch_norm_layer(int channels);
  static Layer dropout_layer(double rate);
  static Layer relu_layer();
  static Layer softmax_xent_head_layer();
  static Layer residual_block_layer(std::vector<Layer> children);
  static Layer flatten_layer();
  static Layer pool_layer(PoolOp op, int k, int stride);
  static Layer global_avg_pool_layer(); // k resolved from the incoming shape

  /// True if params[idx] is a prunable weight tensor (has a mask).
  bool is_weight_param(std::size_t idx) const { return idx < masks.size() && !masks[idx].empty(); }
};

enum class ArchTag { custom, mini_alexnet, mini_mobilenet, mini_shufflenet };

const char* arch_tag_name(ArchTag tag);
ArchTag arch_tag_from_name(const std::string& name);

struct Network {
  ArchTag arch_tag = ArchTag::custom;
  std::vector<std::size_t> input_shape; // per-sample [C, H, W] or [F]
  int classes = 0;
  std::vector<Layer> layers;
};

enum class Mode { train, eval };

struct LayerTrace {
  Tensor input;                    // batch input to the layer
  Tensor aux;                      // kind-specific: bn x-hat, dropout keep mask, dwsep mid
  std::vector<double> bn_mean;     // batch statistics actually used
  std::vector<double> bn_var;
  std::vector<std::size_t> argmax; // max-pool winner (flat index into input batch)
  std::vector<LayerTrace> children;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

/// Resolves per-layer input/output shapes from net.input_shape and validates
/// adjacency. Throws std::invalid_argument on any inconsistency.
void infer_shapes(Network& net);

/// Fan-in-scaled uniform initialisation (bound sqrt(6/fan_in)), deterministic
/// under the seed. Batch norm starts at identity; biases at zero. Masks are
/// reset to all-ones, gradients and velocity to zero.
void init_params(Network& net, std::uint64_t seed);

/// Re-draws unmasked weight entries only; masked entries stay exactly zero and
/// masks are preserved. Biases are re-zeroed, velocity reset.
void reinitialise_surviving(Network& net, std::uint64_t seed);

/// Forward pass over a batch (leading dimension = samples). Dropout is active
/// only in train mode; batch norm uses batch statistics (and updates running
/// statistics) in train mode and running statistics in eval mode. With a trace
/// the per-layer activations needed for backward are recorded.
Tensor forward(Network& net, const Tensor& batch, Mode mode, ForwardTrace* trace = nullptr,
               std::uint64_t dropout_seed = 0);
Tensor forward_eval(const Network& net, const Tensor& batch);

/// Gradients of the mean cross-entropy over the batch with respect to every
/// parameter, written into layer.grads (masked entries receive exactly zero).
/// Runs in train mode with the given dropout seed. Returns the loss.
double backward(Network& net, const Tensor& batch, const std::vector<int>& labels,
                std::uint64_t dropout_seed = 0);

/// Train-mode loss without touching gradients; the finite-difference oracle in
/// the tests drives this with a fixed dropout seed.
double loss_value(Network& net, const Tensor& batch, const std::vector<int>& labels, Mode mode,
                  std::uint64_t dropout_seed = 0);

Tensor softmax_rows(const Tensor& logits);
double mean_xent(const Tensor& logits, const std::vector<int>& labels);

void zero_grads(Network& net);

/// Hard-sets weights to zero wherever their mask is zero and clears the
/// affected velocity entries.
void apply_masks(Network& net);

/// Mask-1 weight entries plus all unmasked parameter tensors (biases, batch
/// norm affine terms).
std::size_t live_param_count(const Network& net);
std::size_t total_param_count(const Network& net);

/// Desk-scale architectures:
///   mini_alexnet    3 conv (+max pool) + 2 dense with dropout
///   mini_mobilenet  stem conv + 4 inverted-residual depthwise-separable blocks + dense head
///   mini_shufflenet stem conv + 3 stages of grouped pointwise -> shuffle ->
///                   depthwise -> pointwise blocks + dense head
Network build_architecture(ArchTag tag, const std::vector<std::size_t>& input_shape, int classes,
                           double width_multiplier = 1.0);

/// Removes every layer whose regularisation_flag is set. Dropout layers are
/// dropped outright; each batch norm is folded into the preceding weighted
/// layer using its running statistics, so eval-mode outputs are unchanged at
/// removal time.
Network strip_regularisation(const Network& net);

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

} // namespace compresskit
