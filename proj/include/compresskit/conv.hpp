#pragma once

#include <cstdint>
#include <string>

#include "compresskit/tensor.hpp"

namespace compresskit {

/// Geometry of one convolution: input w_in x h_in x d, convolved with
/// n_filters filters of size k x k x (d/g) in g groups.
struct ConvSpec {
  int w_in = 0;
  int h_in = 0;
  int d = 0;         // input channels
  int n_filters = 0; // output channels
  int k = 0;         // kernel side length
  int g = 1;         // group count
  int stride = 1;
  int padding = 0;

  int w_out() const { return (w_in + 2 * padding - k) / stride + 1; }
  int h_out() const { return (h_in + 2 * padding - k) / stride + 1; }

  // Throws std::invalid_argument on non-positive dims, divisibility or
  // output-size violations.
  void validate() const;

  std::string to_string() const;
};

// Layout convention: activations are [d, h, w], filters are [N, d/g, k, k],
// all convolutions are cross-correlations (no kernel flip). Eq-style flipped
// convolution is available as conv2d_reference.

Tensor conv2d(const Tensor& input, const Tensor& filters, const ConvSpec& spec);

/// True (flipped-kernel) 2-d convolution of a single-channel image with a
/// single kernel, evaluated over the valid region. Output element [r, c]
/// corresponds to out[i, j] = sum_{p,q} I[i-p, j-q] K[p, q] at
/// i = r + m - 1, j = c + n - 1 for an m x n kernel.
Tensor conv2d_reference(const Tensor& image, const Tensor& kernel);

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernels, const ConvSpec& spec);

Tensor pointwise_conv2d(const Tensor& input, const Tensor& filters);

Tensor group_conv2d(const Tensor& input, const Tensor& filters, const ConvSpec& spec);

/// Permutes channels by reshaping [g, d/g] -> transpose -> flatten, so channel
/// j*(d/g)+i moves to i*g+j. channel_shuffle(channel_shuffle(x, g), d/g) == x.
Tensor channel_shuffle(const Tensor& input, int groups);

enum class ConvKind { standard, depthwise_separable, grouped };

/// Closed-form multiply-accumulate counts:
///   standard            w_in * h_in * d * N * k * k
///   depthwise separable (w_in * h_in * d * k * k) + (w_in * h_in * d * N)
///   grouped             g * (w_in * h_in * k * k * (d/g) * (N/g))
/// These assume stride 1 and a same-size output (the counts use w_in * h_in);
/// flop_count_exact substitutes the actual w_out * h_out for strided or
/// unpadded specs.
std::uint64_t flop_count(const ConvSpec& spec, ConvKind kind);
std::uint64_t flop_count_exact(const ConvSpec& spec, ConvKind kind);

} // namespace compresskit
