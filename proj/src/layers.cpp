#include "compresskit/layers.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace compresskit {

namespace {

void fail(const std::string& message) { throw std::invalid_argument(message); }

std::vector<std::size_t> sample_shape(const Tensor& batch) {
  return {batch.shape().begin() + 1, batch.shape().end()};
}

Tensor sample_slice(const Tensor& batch, std::size_t b) {
  auto shape = sample_shape(batch);
  const std::size_t n = shape_product(shape);
  Tensor s(std::move(shape));
  std::copy_n(batch.data().data() + b * n, n, s.data().data());
  return s;
}

void place_sample(Tensor& batch, std::size_t b, const Tensor& s) {
  std::copy_n(s.data().data(), s.size(), batch.data().data() + b * s.size());
}

template <class F>
void visit(std::vector<Layer>& layers, F&& f) {
  for (auto& l : layers) {
    f(l);
    visit(l.children, f);
  }
}

template <class F>
void visit(const std::vector<Layer>& layers, F&& f) {
  for (const auto& l : layers) {
    f(l);
    visit(l.children, f);
  }
}

Tensor uniform_tensor(std::vector<std::size_t> shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

double init_bound(const Layer& l, std::size_t param_idx) {
  switch (l.kind) {
    case LayerKind::dense:
      return std::sqrt(6.0 / l.fan_in);
    case LayerKind::conv:
    case LayerKind::group_conv:
      return std::sqrt(6.0 / (static_cast<double>(l.conv.d / l.conv.g) * l.conv.k * l.conv.k));
    case LayerKind::depthwise_separable_conv:
      return param_idx == 0 ? std::sqrt(6.0 / (static_cast<double>(l.conv.k) * l.conv.k))
                            : std::sqrt(6.0 / l.conv.d);
    default:
      return 0.0;
  }
}

// ---- batched conv helpers ------------------------------------------------

// forward: per-sample tensor_core kernel plus a per-channel bias
Tensor grouped_conv_forward(const ConvSpec& spec, const Tensor& x, const Tensor& weights,
                            const Tensor* bias) {
  const std::size_t B = x.dim(0);
  Tensor out({B, static_cast<std::size_t>(spec.n_filters), static_cast<std::size_t>(spec.h_out()),
              static_cast<std::size_t>(spec.w_out())});
  const std::size_t plane = out.dim(2) * out.dim(3);
  for (std::size_t b = 0; b < B; ++b) {
    Tensor o = group_conv2d(sample_slice(x, b), weights, spec);
    if (bias) {
      for (int n = 0; n < spec.n_filters; ++n)
        for (std::size_t i = 0; i < plane; ++i) o.data()[n * plane + i] += (*bias)[n];
    }
    place_sample(out, b, o);
  }
  return out;
}

// backward: adjoint of the grouped cross-correlation; accumulates into dW/db
void grouped_conv_backward(const ConvSpec& spec, const Tensor& x, const Tensor& weights,
                           const Tensor& dy, Tensor& dx, Tensor& dW, Tensor* db) {
  const std::size_t B = x.dim(0);
  const int dg = spec.d / spec.g;
  const int ng = spec.n_filters / spec.g;
  const int ho = spec.h_out(), wo = spec.w_out();
  for (std::size_t b = 0; b < B; ++b) {
    for (int n = 0; n < spec.n_filters; ++n) {
      const int c0 = (n / ng) * dg;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const double gout = dy(b, n, oy, ox);
          if (db) (*db)[n] += gout;
          for (int c = 0; c < dg; ++c) {
            for (int ky = 0; ky < spec.k; ++ky) {
              const int iy = oy * spec.stride - spec.padding + ky;
              if (iy < 0 || iy >= spec.h_in) continue;
              for (int kx = 0; kx < spec.k; ++kx) {
                const int ix = ox * spec.stride - spec.padding + kx;
                if (ix < 0 || ix >= spec.w_in) continue;
                dW(n, c, ky, kx) += gout * x(b, c0 + c, iy, ix);
                dx(b, c0 + c, iy, ix) += gout * weights(n, c, ky, kx);
              }
            }
          }
        }
      }
    }
  }
}

ConvSpec depthwise_stage_spec(const ConvSpec& composite) {
  ConvSpec dw = composite;
  dw.n_filters = composite.d;
  dw.g = composite.d;
  return dw;
}

ConvSpec pointwise_stage_spec(const ConvSpec& composite) {
  ConvSpec pw;
  pw.w_in = composite.w_out();
  pw.h_in = composite.h_out();
  pw.d = composite.d;
  pw.n_filters = composite.n_filters;
  pw.k = 1;
  return pw;
}

void bn_axes(const Tensor& batch, std::size_t& channels, std::size_t& per_channel,
             std::size_t& plane) {
  if (batch.rank() == 4) {
    channels = batch.dim(1);
    plane = batch.dim(2) * batch.dim(3);
    per_channel = batch.dim(0) * plane;
  } else if (batch.rank() == 2) {
    channels = batch.dim(1);
    plane = 1;
    per_channel = batch.dim(0);
  } else {
    fail("batch_norm: expected a [B, C, H, W] or [B, F] batch, got " + batch.shape_string());
  }
}

// flat index of element j of channel c (j enumerates batch x spatial)
inline std::size_t bn_index(std::size_t c, std::size_t j, std::size_t channels, std::size_t plane) {
  const std::size_t b = j / plane;
  const std::size_t p = j % plane;
  return (b * channels + c) * plane + p;
}

struct FwdCtx {
  Mode mode;
  std::uint64_t seed = 0;
  std::uint64_t dropout_streams = 0;
};

Tensor forward_layers(std::vector<Layer>& layers, const Tensor& input, FwdCtx& ctx,
                      std::vector<LayerTrace>* traces);

Tensor forward_one(Layer& l, const Tensor& x, FwdCtx& ctx, LayerTrace* t) {
  const std::size_t B = x.dim(0);
  switch (l.kind) {
    case LayerKind::dense: {
      const auto& W = l.params[0];
      const auto& bias = l.params[1];
      const std::size_t in = l.fan_in, out = l.fan_out;
      Tensor y({B, out});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out; ++o) {
          double acc = bias[o];
          for (std::size_t i = 0; i < in; ++i) acc += x(b, i) * W(o, i);
          y(b, o) = acc;
        }
      return y;
    }
    case LayerKind::conv:
    case LayerKind::group_conv:
      return grouped_conv_forward(l.conv, x, l.params[0], &l.params[1]);
    case LayerKind::depthwise_separable_conv: {
      const ConvSpec dw = depthwise_stage_spec(l.conv);
      const ConvSpec pw = pointwise_stage_spec(l.conv);
      Tensor dw_weights = l.params[0].reshaped({static_cast<std::size_t>(l.conv.d), 1,
                                                static_cast<std::size_t>(l.conv.k),
                                                static_cast<std::size_t>(l.conv.k)});
      Tensor mid = grouped_conv_forward(dw, x, dw_weights, &l.params[1]);
      Tensor y = grouped_conv_forward(pw, mid, l.params[2], &l.params[3]);
      if (t) t->aux = std::move(mid);
      return y;
    }
    case LayerKind::channel_shuffle: {
      Tensor y(x.shape());
      for (std::size_t b = 0; b < B; ++b) place_sample(y, b, channel_shuffle(sample_slice(x, b), l.groups));
      return y;
    }
    case LayerKind::batch_norm: {
      std::size_t channels, m, plane;
      bn_axes(x, channels, m, plane);
      if (channels != static_cast<std::size_t>(l.bn_channels))
        fail("batch_norm: configured for " + std::to_string(l.bn_channels) + " channels, input has " +
             std::to_string(channels));
      const auto& gamma = l.params[0];
      const auto& beta = l.params[1];
      auto& run_mean = l.state[0];
      auto& run_var = l.state[1];

      std::vector<double> mean(channels), var(channels);
      if (ctx.mode == Mode::train) {
        for (std::size_t c = 0; c < channels; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += x[bn_index(c, j, channels, plane)];
          mean[c] = s / static_cast<double>(m);
          double v = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const double d = x[bn_index(c, j, channels, plane)] - mean[c];
            v += d * d;
          }
          var[c] = v / static_cast<double>(m); // biased, matching the backward pass
          run_mean[c] = (1.0 - l.bn_momentum) * run_mean[c] + l.bn_momentum * mean[c];
          run_var[c] = (1.0 - l.bn_momentum) * run_var[c] + l.bn_momentum * var[c];
        }
      } else {
        for (std::size_t c = 0; c < channels; ++c) {
          mean[c] = run_mean[c];
          var[c] = run_var[c];
        }
      }

      Tensor xhat(x.shape());
      Tensor y(x.shape());
      for (std::size_t c = 0; c < channels; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + l.bn_eps);
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t idx = bn_index(c, j, channels, plane);
          xhat[idx] = (x[idx] - mean[c]) * inv;
          y[idx] = gamma[c] * xhat[idx] + beta[c];
        }
      }
      if (t) {
        t->aux = std::move(xhat);
        t->bn_mean = std::move(mean);
        t->bn_var = std::move(var);
      }
      return y;
    }
    case LayerKind::dropout: {
      if (ctx.mode == Mode::eval) return x;
      std::mt19937_64 rng(splitmix64(ctx.seed ^ (0xd0u + ctx.dropout_streams++)));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double keep_scale = 1.0 / (1.0 - l.rate);
      Tensor keep(x.shape());
      Tensor y(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        keep[i] = u(rng) >= l.rate ? 1.0 : 0.0;
        y[i] = x[i] * keep[i] * keep_scale;
      }
      if (t) t->aux = std::move(keep);
      return y;
    }
    case LayerKind::relu: {
      Tensor y(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      return y;
    }
    case LayerKind::softmax_xent_head:
      return x;
    case LayerKind::residual_block: {
      std::vector<LayerTrace>* child_traces = nullptr;
      if (t) {
        t->children.clear();
        child_traces = &t->children;
      }
      Tensor y = forward_layers(l.children, x, ctx, child_traces);
      if (y.shape() == x.shape())
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
      return y;
    }
    case LayerKind::flatten: {
      return x.reshaped({B, shape_product(sample_shape(x))});
    }
    case LayerKind::pool: {
      const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t kh = l.pool.global ? H : static_cast<std::size_t>(l.pool.k);
      const std::size_t kw = l.pool.global ? W : static_cast<std::size_t>(l.pool.k);
      const std::size_t stride = l.pool.global ? 1 : static_cast<std::size_t>(l.pool.stride);
      const std::size_t ho = (H - kh) / stride + 1;
      const std::size_t wo = (W - kw) / stride + 1;
      Tensor y({B, C, ho, wo});
      if (t && l.pool.op == PoolOp::max) t->argmax.assign(y.size(), 0);
      std::size_t out_flat = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox, ++out_flat) {
              if (l.pool.op == PoolOp::max) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::size_t iy = oy * stride + ky, ix = ox * stride + kx;
                    const std::size_t idx = ((b * C + c) * H + iy) * W + ix;
                    if (x[idx] > best) {
                      best = x[idx];
                      best_idx = idx;
                    }
                  }
                y(b, c, oy, ox) = best;
                if (t) t->argmax[out_flat] = best_idx;
              } else {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx)
                    acc += x[((b * C + c) * H + oy * stride + ky) * W + ox * stride + kx];
                y(b, c, oy, ox) = acc / static_cast<double>(kh * kw);
              }
            }
      return y;
    }
  }
  fail("forward: unknown layer kind");
  return {};
}

Tensor forward_layers(std::vector<Layer>& layers, const Tensor& input, FwdCtx& ctx,
                      std::vector<LayerTrace>* traces) {
  Tensor cur = input;
  if (traces) traces->assign(layers.size(), LayerTrace{});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerTrace* t = traces ? &(*traces)[i] : nullptr;
    Tensor next = forward_one(layers[i], cur, ctx, t);
    if (t) t->input = std::move(cur);
    cur = std::move(next);
  }
  return cur;
}

Tensor backward_layers(std::vector<Layer>& layers, std::vector<LayerTrace>& traces,
                       const Tensor& grad_out);

Tensor backward_one(Layer& l, LayerTrace& t, const Tensor& dy) {
  const Tensor& x = t.input;
  const std::size_t B = x.dim(0);
  switch (l.kind) {
    case LayerKind::dense: {
      const auto& W = l.params[0];
      auto& dW = l.grads[0];
      auto& db = l.grads[1];
      const std::size_t in = l.fan_in, out = l.fan_out;
      Tensor dx({B, in});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out; ++o) {
          const double g = dy(b, o);
          db[o] += g;
          for (std::size_t i = 0; i < in; ++i) {
            dW(o, i) += g * x(b, i);
            dx(b, i) += g * W(o, i);
          }
        }
      return dx;
    }
    case LayerKind::conv:
    case LayerKind::group_conv: {
      Tensor dx(x.shape());
      grouped_conv_backward(l.conv, x, l.params[0], dy, dx, l.grads[0], &l.grads[1]);
      return dx;
    }
    case LayerKind::depthwise_separable_conv: {
      const ConvSpec dw = depthwise_stage_spec(l.conv);
      const ConvSpec pw = pointwise_stage_spec(l.conv);
      const Tensor& mid = t.aux;
      // pointwise stage
      Tensor dmid(mid.shape());
      grouped_conv_backward(pw, mid, l.params[2], dy, dmid, l.grads[2], &l.grads[3]);
      // depthwise stage
      const std::vector<std::size_t> dw4{static_cast<std::size_t>(l.conv.d), 1,
                                         static_cast<std::size_t>(l.conv.k),
                                         static_cast<std::size_t>(l.conv.k)};
      Tensor dw_weights = l.params[0].reshaped(dw4);
      Tensor ddw(dw4);
      Tensor dx(x.shape());
      grouped_conv_backward(dw, x, dw_weights, dmid, dx, ddw, &l.grads[1]);
      for (std::size_t i = 0; i < ddw.size(); ++i) l.grads[0][i] += ddw[i];
      return dx;
    }
    case LayerKind::channel_shuffle: {
      const int d = static_cast<int>(x.dim(1));
      Tensor dx(x.shape());
      for (std::size_t b = 0; b < B; ++b)
        place_sample(dx, b, channel_shuffle(sample_slice(dy, b), d / l.groups));
      return dx;
    }
    case LayerKind::batch_norm: {
      // train-mode backward through the batch statistics
      std::size_t channels, m, plane;
      bn_axes(x, channels, m, plane);
      const auto& gamma = l.params[0];
      const Tensor& xhat = t.aux;
      auto& dgamma = l.grads[0];
      auto& dbeta = l.grads[1];
      Tensor dx(x.shape());
      for (std::size_t c = 0; c < channels; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t idx = bn_index(c, j, channels, plane);
          sum_dy += dy[idx];
          sum_dy_xhat += dy[idx] * xhat[idx];
        }
        dbeta[c] += sum_dy;
        dgamma[c] += sum_dy_xhat;
        const double inv = 1.0 / std::sqrt(t.bn_var[c] + l.bn_eps);
        const double mean_dy = sum_dy / static_cast<double>(m);
        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t idx = bn_index(c, j, channels, plane);
          dx[idx] = gamma[c] * inv * (dy[idx] - mean_dy - xhat[idx] * mean_dy_xhat);
        }
      }
      return dx;
    }
    case LayerKind::dropout: {
      if (t.aux.empty()) return dy; // eval mode: identity
      const double keep_scale = 1.0 / (1.0 - l.rate);
      Tensor dx(dy.shape());
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * t.aux[i] * keep_scale;
      return dx;
    }
    case LayerKind::relu: {
      Tensor dx(dy.shape());
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
      return dx;
    }
    case LayerKind::softmax_xent_head:
      return dy;
    case LayerKind::residual_block: {
      Tensor dx = backward_layers(l.children, t.children, dy);
      if (dx.shape() == dy.shape() && l.input_shape == l.output_shape)
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      return dx;
    }
    case LayerKind::flatten:
      return dy.reshaped(x.shape());
    case LayerKind::pool: {
      Tensor dx(x.shape());
      const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t kh = l.pool.global ? H : static_cast<std::size_t>(l.pool.k);
      const std::size_t kw = l.pool.global ? W : static_cast<std::size_t>(l.pool.k);
      const std::size_t stride = l.pool.global ? 1 : static_cast<std::size_t>(l.pool.stride);
      const std::size_t ho = dy.dim(2), wo = dy.dim(3);
      if (l.pool.op == PoolOp::max) {
        std::size_t out_flat = 0;
        for (std::size_t i = 0; i < dy.size(); ++i, ++out_flat) dx[t.argmax[out_flat]] += dy[i];
      } else {
        const double inv = 1.0 / static_cast<double>(kh * kw);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < ho; ++oy)
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const double g = dy(b, c, oy, ox) * inv;
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx)
                    dx[((b * C + c) * H + oy * stride + ky) * W + ox * stride + kx] += g;
              }
      }
      return dx;
    }
  }
  fail("backward: unknown layer kind");
  return {};
}

Tensor backward_layers(std::vector<Layer>& layers, std::vector<LayerTrace>& traces,
                       const Tensor& grad_out) {
  Tensor cur = grad_out;
  for (std::size_t i = layers.size(); i-- > 0;) {
    cur = backward_one(layers[i], traces[i], cur);
  }
  return cur;
}

} // namespace

// ---- public API ------------------------------------------------------------

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_separable_conv: return "depthwise_separable_conv";
    case LayerKind::group_conv: return "group_conv";
    case LayerKind::channel_shuffle: return "channel_shuffle";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::dropout: return "dropout";
    case LayerKind::relu: return "relu";
    case LayerKind::softmax_xent_head: return "softmax_xent_head";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::flatten: return "flatten";
    case LayerKind::pool: return "pool";
  }
  return "unknown";
}

const char* arch_tag_name(ArchTag tag) {
  switch (tag) {
    case ArchTag::custom: return "custom";
    case ArchTag::mini_alexnet: return "mini_alexnet";
    case ArchTag::mini_mobilenet: return "mini_mobilenet";
    case ArchTag::mini_shufflenet: return "mini_shufflenet";
  }
  return "unknown";
}

ArchTag arch_tag_from_name(const std::string& name) {
  if (name == "custom") return ArchTag::custom;
  if (name == "mini_alexnet") return ArchTag::mini_alexnet;
  if (name == "mini_mobilenet") return ArchTag::mini_mobilenet;
  if (name == "mini_shufflenet") return ArchTag::mini_shufflenet;
  throw std::invalid_argument("unknown architecture tag: " + name);
}

Tensor forward(Network& net, const Tensor& batch, Mode mode, ForwardTrace* trace,
               std::uint64_t dropout_seed) {
  if (batch.rank() != net.input_shape.size() + 1)
    fail("forward: batch rank " + std::to_string(batch.rank()) + " does not match input shape " +
         shape_to_string(net.input_shape));
  for (std::size_t i = 0; i < net.input_shape.size(); ++i)
    if (batch.dim(i + 1) != net.input_shape[i])
      fail("forward: batch shape " + batch.shape_string() + " does not match input shape " +
           shape_to_string(net.input_shape));
  FwdCtx ctx{mode, dropout_seed};
  return forward_layers(net.layers, batch, ctx, trace ? &trace->layers : nullptr);
}

Tensor forward_eval(const Network& net, const Tensor& batch) {
  // eval mode never mutates the network (running stats update only in train)
  return forward(const_cast<Network&>(net), batch, Mode::eval);
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    double mx = logits(b, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits(b, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(logits(b, c) - mx);
    for (std::size_t c = 0; c < C; ++c) out(b, c) = std::exp(logits(b, c) - mx) / denom;
  }
  return out;
}

double mean_xent(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B)
    fail("mean_xent: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      fail("mean_xent: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    double mx = logits(b, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits(b, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(logits(b, c) - mx);
    total += mx + std::log(denom) - logits(b, y);
  }
  return total / static_cast<double>(B);
}

double backward(Network& net, const Tensor& batch, const std::vector<int>& labels,
                std::uint64_t dropout_seed) {
  zero_grads(net);
  ForwardTrace trace;
  Tensor logits = forward(net, batch, Mode::train, &trace, dropout_seed);
  const double loss = mean_xent(logits, labels);

  const std::size_t B = logits.dim(0), C = logits.dim(1);
  Tensor dlogits = softmax_rows(logits);
  for (std::size_t b = 0; b < B; ++b) {
    dlogits(b, labels[b]) -= 1.0;
    for (std::size_t c = 0; c < C; ++c) dlogits(b, c) /= static_cast<double>(B);
  }
  backward_layers(net.layers, trace.layers, dlogits);

  // masked parameters receive exactly zero gradient
  visit(net.layers, [](Layer& l) {
    for (std::size_t p = 0; p < l.params.size(); ++p) {
      if (!l.is_weight_param(p)) continue;
      const Tensor& m = l.masks[p];
      Tensor& g = l.grads[p];
      for (std::size_t i = 0; i < g.size(); ++i)
        if (m[i] == 0.0) g[i] = 0.0;
    }
  });
  return loss;
}

double loss_value(Network& net, const Tensor& batch, const std::vector<int>& labels, Mode mode,
                  std::uint64_t dropout_seed) {
  Tensor logits = forward(net, batch, mode, nullptr, dropout_seed);
  return mean_xent(logits, labels);
}

void zero_grads(Network& net) {
  visit(net.layers, [](Layer& l) {
    for (auto& g : l.grads) g.fill(0.0);
  });
}

void apply_masks(Network& net) {
  visit(net.layers, [](Layer& l) {
    for (std::size_t p = 0; p < l.params.size(); ++p) {
      if (!l.is_weight_param(p)) continue;
      for (std::size_t i = 0; i < l.params[p].size(); ++i) {
        if (l.masks[p][i] == 0.0) {
          l.params[p][i] = 0.0;
          l.velocity[p][i] = 0.0;
        }
      }
    }
  });
}

std::size_t live_param_count(const Network& net) {
  std::size_t count = 0;
  visit(net.layers, [&](const Layer& l) {
    for (std::size_t p = 0; p < l.params.size(); ++p) {
      if (l.is_weight_param(p)) {
        for (std::size_t i = 0; i < l.masks[p].size(); ++i)
          if (l.masks[p][i] != 0.0) ++count;
      } else {
        count += l.params[p].size();
      }
    }
  });
  return count;
}

std::size_t total_param_count(const Network& net) {
  std::size_t count = 0;
  visit(net.layers, [&](const Layer& l) {
    for (const auto& p : l.params) count += p.size();
  });
  return count;
}

void init_params(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  visit(net.layers, [&](Layer& l) {
    for (std::size_t p = 0; p < l.params.size(); ++p) {
      if (l.is_weight_param(p)) {
        l.params[p] = uniform_tensor(l.params[p].shape(), init_bound(l, p), rng);
        l.masks[p].fill(1.0);
      } else if (l.kind == LayerKind::batch_norm && p == 0) {
        l.params[p].fill(1.0);
      } else {
        l.params[p].fill(0.0);
      }
      l.grads[p].fill(0.0);
      l.velocity[p].fill(0.0);
    }
    if (l.kind == LayerKind::batch_norm) {
      l.state[0].fill(0.0);
      l.state[1].fill(1.0);
    }
  });
}

void reinitialise_surviving(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  visit(net.layers, [&](Layer& l) {
    for (std::size_t p = 0; p < l.params.size(); ++p) {
      if (l.is_weight_param(p)) {
        Tensor fresh = uniform_tensor(l.params[p].shape(), init_bound(l, p), rng);
        for (std::size_t i = 0; i < fresh.size(); ++i)
          l.params[p][i] = l.masks[p][i] != 0.0 ? fresh[i] : 0.0;
      } else if (l.kind != LayerKind::batch_norm) {
        l.params[p].fill(0.0);
      }
      l.velocity[p].fill(0.0);
    }
  });
}

} // namespace compresskit
