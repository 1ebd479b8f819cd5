#pragma once

// Central finite-difference checks of the full network gradient in double
// precision, shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hetmt/model.hpp"
#include "hetmt/rng.hpp"
#include "hetmt/trainer.hpp"

namespace gradcheck {

struct Result {
  double worst_rel = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

inline hetmt::ModelConfig tiny_config(hetmt::Variant v) {
  hetmt::ModelConfig c;
  c.trunk_features = {2, 2, 2, 2, 2};
  c.branch_widths = {2, 2, 2, 2};
  c.class_count = 3;
  c.variant = v;
  // Baselines halve the trunk; keep their widths at 2 as well.
  if (c.traits().baseline) c.trunk_features = {4, 4, 4, 4, 4};
  return c;
}

// rel = |a - n| / max(|a|, |n|), with differences below `abs_floor` ignored.
// The small default step makes crossing a ReLU kink unlikely; in double the
// roundoff it adds stays below abs_floor.
inline Result check_network(const hetmt::ModelConfig& cfg, std::uint64_t seed, double tol = 1e-4,
                            double step = 1e-6, double abs_floor = 1e-9, int size = 8, int items = 2) {
  using namespace hetmt;
  const Network<double> net(cfg);
  Params<double> params = net.init(seed);
  Rng rng(derive_seed(seed, {7}));
  // Nonzero biases and scalars so every parameter carries gradient.
  for (auto& t : params.tensors)
    if (t.shape.size() == 1)
      for (double& x : t.data) x = rng.uniform(-0.2, 0.2);
  const std::size_t n = static_cast<std::size_t>(size) * size;
  std::vector<std::vector<double>> x(items), y(items);
  std::vector<std::vector<std::uint8_t>> labels(items);
  std::vector<std::uint64_t> seeds(items);
  for (int i = 0; i < items; ++i) {
    x[i].resize(n);
    y[i].resize(n);
    labels[i].resize(n);
    for (std::size_t v = 0; v < n; ++v) {
      x[i][v] = rng.uniform(-1.0, 1.0);
      y[i][v] = rng.uniform(-1.0, 1.0);
      labels[i][v] = static_cast<std::uint8_t>(rng.index(cfg.class_count));
    }
    seeds[i] = derive_seed(seed, {11, static_cast<std::uint64_t>(i)});
  }
  auto loss_at = [&](const Params<double>& p) {
    Params<double> g = p.zeros_like();
    return batch_gradient<double>(net, p, x, y, labels, size, size, Mode::train, seeds, g).total;
  };
  Params<double> grads = params.zeros_like();
  batch_gradient<double>(net, params, x, y, labels, size, size, Mode::train, seeds, grads);

  Result r;
  for (std::size_t t = 0; t < params.tensors.size(); ++t)
    for (std::size_t i = 0; i < params.tensors[t].data.size(); ++i) {
      const double orig = params.tensors[t].data[i];
      params.tensors[t].data[i] = orig + step;
      const double lp = loss_at(params);
      params.tensors[t].data[i] = orig - step;
      const double lm = loss_at(params);
      params.tensors[t].data[i] = orig;
      const double numeric = (lp - lm) / (2.0 * step);
      const double analytic = grads.tensors[t].data[i];
      const double diff = std::abs(numeric - analytic);
      const double rel = diff <= abs_floor ? 0.0 : diff / std::max(std::abs(numeric), std::abs(analytic));
      ++r.checked;
      if (rel > tol) ++r.failures;
      if (rel > r.worst_rel) {
        r.worst_rel = rel;
        r.worst_name = params.tensors[t].name + "[" + std::to_string(i) + "]";
      }
    }
  return r;
}

}  // namespace gradcheck
