#include "compresskit/conv.hpp"

#include <sstream>
#include <stdexcept>

namespace compresskit {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

void check_activation_shape(const Tensor& t, int d, int h, int w, const char* what) {
  if (t.rank() != 3 || t.dim(0) != static_cast<std::size_t>(d) ||
      t.dim(1) != static_cast<std::size_t>(h) || t.dim(2) != static_cast<std::size_t>(w)) {
    std::ostringstream os;
    os << what << ": expected shape [" << d << ", " << h << ", " << w << "], got "
       << t.shape_string();
    throw std::invalid_argument(os.str());
  }
}

} // namespace

void ConvSpec::validate() const {
  require(w_in > 0 && h_in > 0 && d > 0 && n_filters > 0 && k > 0,
          "ConvSpec: dimensions must be positive, got " + to_string());
  require(g > 0 && stride > 0 && padding >= 0, "ConvSpec: invalid g/stride/padding in " + to_string());
  require(d % g == 0, "ConvSpec: input channels " + std::to_string(d) + " not divisible by groups " +
                          std::to_string(g));
  require(n_filters % g == 0, "ConvSpec: filter count " + std::to_string(n_filters) +
                                  " not divisible by groups " + std::to_string(g));
  require(w_in + 2 * padding >= k && h_in + 2 * padding >= k,
          "ConvSpec: kernel exceeds padded input in " + to_string());
  require(w_out() >= 1 && h_out() >= 1, "ConvSpec: empty output in " + to_string());
}

std::string ConvSpec::to_string() const {
  std::ostringstream os;
  os << "{w_in=" << w_in << ", h_in=" << h_in << ", d=" << d << ", n=" << n_filters << ", k=" << k
     << ", g=" << g << ", stride=" << stride << ", padding=" << padding << "}";
  return os.str();
}

Tensor group_conv2d(const Tensor& input, const Tensor& filters, const ConvSpec& spec) {
  spec.validate();
  check_activation_shape(input, spec.d, spec.h_in, spec.w_in, "group_conv2d input");
  const int dg = spec.d / spec.g;
  const int ng = spec.n_filters / spec.g;
  if (filters.rank() != 4 || filters.dim(0) != static_cast<std::size_t>(spec.n_filters) ||
      filters.dim(1) != static_cast<std::size_t>(dg) ||
      filters.dim(2) != static_cast<std::size_t>(spec.k) ||
      filters.dim(3) != static_cast<std::size_t>(spec.k)) {
    std::ostringstream os;
    os << "group_conv2d filters: expected [" << spec.n_filters << ", " << dg << ", " << spec.k
       << ", " << spec.k << "], got " << filters.shape_string();
    throw std::invalid_argument(os.str());
  }

  const int ho = spec.h_out();
  const int wo = spec.w_out();
  Tensor out({static_cast<std::size_t>(spec.n_filters), static_cast<std::size_t>(ho),
              static_cast<std::size_t>(wo)});

  for (int n = 0; n < spec.n_filters; ++n) {
    const int group = n / ng;
    const int c0 = group * dg;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int c = 0; c < dg; ++c) {
          for (int ky = 0; ky < spec.k; ++ky) {
            const int iy = oy * spec.stride - spec.padding + ky;
            if (iy < 0 || iy >= spec.h_in) continue;
            for (int kx = 0; kx < spec.k; ++kx) {
              const int ix = ox * spec.stride - spec.padding + kx;
              if (ix < 0 || ix >= spec.w_in) continue;
              acc += input(c0 + c, iy, ix) * filters(n, c, ky, kx);
            }
          }
        }
        out(n, oy, ox) = acc;
      }
    }
  }
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& filters, const ConvSpec& spec) {
  if (spec.g != 1) {
    throw std::invalid_argument("conv2d requires g=1, got " + spec.to_string() +
                                "; use group_conv2d for grouped filters");
  }
  return group_conv2d(input, filters, spec);
}

Tensor conv2d_reference(const Tensor& image, const Tensor& kernel) {
  if (image.rank() != 2 || kernel.rank() != 2) {
    throw std::invalid_argument("conv2d_reference: expected 2-d image and kernel, got " +
                                image.shape_string() + " and " + kernel.shape_string());
  }
  const int M = static_cast<int>(image.dim(0));
  const int N = static_cast<int>(image.dim(1));
  const int m = static_cast<int>(kernel.dim(0));
  const int n = static_cast<int>(kernel.dim(1));
  if (m > M || n > N) {
    throw std::invalid_argument("conv2d_reference: kernel " + kernel.shape_string() +
                                " larger than image " + image.shape_string());
  }

  Tensor out({static_cast<std::size_t>(M - m + 1), static_cast<std::size_t>(N - n + 1)});
  for (int i = m - 1; i < M; ++i) {
    for (int j = n - 1; j < N; ++j) {
      double acc = 0.0;
      for (int p = 0; p < m; ++p) {
        for (int q = 0; q < n; ++q) {
          acc += image(i - p, j - q) * kernel(p, q);
        }
      }
      out(i - (m - 1), j - (n - 1)) = acc;
    }
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernels, const ConvSpec& spec) {
  ConvSpec dw = spec;
  dw.g = spec.d;
  dw.n_filters = spec.d;
  dw.validate();
  if (kernels.rank() != 3 || kernels.dim(0) != static_cast<std::size_t>(spec.d) ||
      kernels.dim(1) != static_cast<std::size_t>(spec.k) ||
      kernels.dim(2) != static_cast<std::size_t>(spec.k)) {
    std::ostringstream os;
    os << "depthwise_conv2d kernels: expected one " << spec.k << "x" << spec.k
       << " kernel per input channel [" << spec.d << ", " << spec.k << ", " << spec.k << "], got "
       << kernels.shape_string();
    throw std::invalid_argument(os.str());
  }
  Tensor filters = kernels.reshaped({static_cast<std::size_t>(spec.d), 1,
                                     static_cast<std::size_t>(spec.k),
                                     static_cast<std::size_t>(spec.k)});
  return group_conv2d(input, filters, dw);
}

Tensor pointwise_conv2d(const Tensor& input, const Tensor& filters) {
  if (input.rank() != 3) {
    throw std::invalid_argument("pointwise_conv2d: expected [d, h, w] input, got " +
                                input.shape_string());
  }
  if (filters.rank() != 4 || filters.dim(1) != input.dim(0) || filters.dim(2) != 1 ||
      filters.dim(3) != 1) {
    throw std::invalid_argument("pointwise_conv2d: expected [N, " + std::to_string(input.dim(0)) +
                                ", 1, 1] filters, got " + filters.shape_string());
  }
  ConvSpec spec{.w_in = static_cast<int>(input.dim(2)),
                .h_in = static_cast<int>(input.dim(1)),
                .d = static_cast<int>(input.dim(0)),
                .n_filters = static_cast<int>(filters.dim(0)),
                .k = 1};
  return group_conv2d(input, filters, spec);
}

Tensor channel_shuffle(const Tensor& input, int groups) {
  if (input.rank() != 3) {
    throw std::invalid_argument("channel_shuffle: expected [d, h, w] input, got " +
                                input.shape_string());
  }
  const int d = static_cast<int>(input.dim(0));
  if (groups <= 0 || d % groups != 0) {
    throw std::invalid_argument("channel_shuffle: channels " + std::to_string(d) +
                                " not divisible by groups " + std::to_string(groups));
  }
  const int per_group = d / groups;
  const std::size_t plane = input.dim(1) * input.dim(2);
  Tensor out(input.shape());
  for (int j = 0; j < groups; ++j) {
    for (int i = 0; i < per_group; ++i) {
      const std::size_t src = static_cast<std::size_t>(j) * per_group + i;
      const std::size_t dst = static_cast<std::size_t>(i) * groups + j;
      std::copy_n(input.data().data() + src * plane, plane, out.data().data() + dst * plane);
    }
  }
  return out;
}

std::uint64_t flop_count(const ConvSpec& spec, ConvKind kind) {
  spec.validate();
  const auto w = static_cast<std::uint64_t>(spec.w_in);
  const auto h = static_cast<std::uint64_t>(spec.h_in);
  const auto d = static_cast<std::uint64_t>(spec.d);
  const auto n = static_cast<std::uint64_t>(spec.n_filters);
  const auto k = static_cast<std::uint64_t>(spec.k);
  const auto g = static_cast<std::uint64_t>(spec.g);
  switch (kind) {
    case ConvKind::standard:
      return w * h * d * n * k * k;
    case ConvKind::depthwise_separable:
      return w * h * d * k * k + w * h * d * n;
    case ConvKind::grouped:
      return g * (w * h * k * k * (d / g) * (n / g));
  }
  throw std::invalid_argument("flop_count: unknown kind");
}

std::uint64_t flop_count_exact(const ConvSpec& spec, ConvKind kind) {
  spec.validate();
  const auto w = static_cast<std::uint64_t>(spec.w_out());
  const auto h = static_cast<std::uint64_t>(spec.h_out());
  const auto d = static_cast<std::uint64_t>(spec.d);
  const auto n = static_cast<std::uint64_t>(spec.n_filters);
  const auto k = static_cast<std::uint64_t>(spec.k);
  const auto g = static_cast<std::uint64_t>(spec.g);
  switch (kind) {
    case ConvKind::standard:
      return w * h * d * n * k * k;
    case ConvKind::depthwise_separable:
      return w * h * d * k * k + w * h * d * n;
    case ConvKind::grouped:
      return g * (w * h * k * k * (d / g) * (n / g));
  }
  throw std::invalid_argument("flop_count_exact: unknown kind");
}

} // namespace compresskit
