#pragma once

// Central finite-difference gradient oracle. Perturbs every parameter of the
// network and compares against the analytic gradients from backward().

#include <cmath>
#include <string>
#include <vector>

#include "compresskit/layers.hpp"

namespace oracles {

using compresskit::Layer;
using compresskit::Mode;
using compresskit::Network;
using compresskit::Tensor;

struct GradCheckResult {
  double worst_rel_err = 0.0;
  std::string worst_location;
  std::size_t checked = 0;
};

template <class F>
void for_each_layer(std::vector<Layer>& layers, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    f(layers[i], prefix + std::to_string(i));
    for_each_layer(layers[i].children, prefix + std::to_string(i) + ".", f);
  }
}

inline GradCheckResult finite_difference_check(Network& net, const Tensor& batch,
                                               const std::vector<int>& labels,
                                               std::uint64_t dropout_seed = 0,
                                               double epsilon = 1e-5) {
  compresskit::backward(net, batch, labels, dropout_seed);

  // snapshot analytic gradients before the FD evaluations overwrite them
  struct Entry {
    Layer* layer;
    std::size_t param;
    Tensor grad;
    std::string name;
  };
  std::vector<Entry> entries;
  for_each_layer(net.layers, "", [&](Layer& l, const std::string& name) {
    for (std::size_t p = 0; p < l.params.size(); ++p)
      entries.push_back({&l, p, l.grads[p], name + "/" + std::to_string(p)});
  });

  GradCheckResult result;
  for (auto& e : entries) {
    Tensor& w = e.layer->params[e.param];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (e.layer->is_weight_param(e.param) && e.layer->masks[e.param][i] == 0.0) {
        // masked entries must report exactly zero
        if (e.grad[i] != 0.0) {
          result.worst_rel_err = 1.0;
          result.worst_location = e.name + "[masked " + std::to_string(i) + "]";
        }
        continue;
      }
      const double saved = w[i];
      const auto central_diff = [&](double eps) {
        w[i] = saved + eps;
        const double up = compresskit::loss_value(net, batch, labels, Mode::train, dropout_seed);
        w[i] = saved - eps;
        const double down = compresskit::loss_value(net, batch, labels, Mode::train, dropout_seed);
        w[i] = saved;
        return (up - down) / (2.0 * eps);
      };
      // The denominator floor reflects the oracle's own resolution: central
      // differences carry cancellation noise of ulp(loss)/2eps (~1e-11 here)
      // and truncation error eps^2 * f'''. Elements whose true gradient sits
      // below the floor are compared at absolute accuracy tol * floor rather
      // than amplifying oracle noise into the ratio.
      const auto rel_err = [&](double fd) {
        return std::abs(fd - e.grad[i]) / std::max(1e-3, std::abs(fd) + std::abs(e.grad[i]));
      };
      double rel = rel_err(central_diff(epsilon));
      // A relu/max-pool kink inside the +-eps window contaminates the central
      // difference even though the loss is differentiable at the point itself.
      // Shrinking the window moves the kink outside; a genuine gradient bug
      // disagrees at every eps.
      for (double eps = epsilon / 10.0; rel > 1e-4 && eps >= epsilon / 1000.0; eps /= 10.0)
        rel = std::min(rel, rel_err(central_diff(eps)));
      ++result.checked;
      if (rel > result.worst_rel_err) {
        result.worst_rel_err = rel;
        result.worst_location = e.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

} // namespace oracles
