#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lorcon/errors.hpp"
#include "lorcon/nn/random.hpp"
#include "lorcon/nn/tensor.hpp"

namespace lorcon::nn {

enum class Stencil {
  kTwoPoint,   // (f(x+e) - f(x-e)) / 2e
  kFourPoint,  // [8(f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))] / 12e
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  Stencil stencil = Stencil::kTwoPoint;
  // Coordinates probed per input; 0 probes all of them.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // Multiplies the analytic gradient; used to prove the check has teeth.
  double analytic_scale = 1.0;
  // Step shrinks by 10x when a probe crosses a ReLU/max kink; after this many
  // attempts the coordinate is skipped and counted.
  int kink_retries = 3;
  // Denominator floor of the relative error; gradients below it are compared
  // in absolute terms.
  double denominator_floor = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  std::string worst_location;
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// f must rebuild the scalar from the (leaf, requires_grad) inputs on every
// call and be deterministic.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opts = {}) {
  for (auto& in : inputs) in.zero_grad();
  Tensor<double> out = f();
  if (out.numel() != 1)
    throw ShapeError("grad_check: function output has shape " + to_string(out.shape()) +
                     ", expected a scalar");
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    std::vector<double> g(in.grad().begin(), in.grad().end());
    for (double& v : g) v *= opts.analytic_scale;
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  auto eval = [&](std::uint64_t& pattern) {
    NonSmoothRecorder rec;
    const double v = f().item();
    pattern = rec.hash();
    return v;
  };
  std::uint64_t base_pattern = 0;
  eval(base_pattern);

  Rng rng(opts.seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto x = inputs[k].data();
    std::vector<std::size_t> coords(x.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.max_coords_per_input != 0 && coords.size() > opts.max_coords_per_input) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = x[i];
      double eps = opts.epsilon;
      bool smooth = false;
      double numeric = 0.0;
      for (int attempt = 0; attempt <= opts.kink_retries; ++attempt, eps /= 10.0) {
        const int points = opts.stencil == Stencil::kTwoPoint ? 2 : 4;
        const double offsets[4] = {eps, -eps, 2 * eps, -2 * eps};
        std::uint64_t p[4] = {};
        double fv[4] = {};
        for (int q = 0; q < points; ++q) {
          x[i] = saved + offsets[q];
          fv[q] = eval(p[q]);
        }
        x[i] = saved;
        if (std::all_of(p, p + points, [&](std::uint64_t h) { return h == base_pattern; })) {
          numeric = points == 2 ? (fv[0] - fv[1]) / (2.0 * eps)
                                : (8.0 * (fv[0] - fv[1]) - (fv[2] - fv[3])) / (12.0 * eps);
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++result.skipped_nonsmooth;
        continue;
      }
      const double err = relative_error(analytic[k][i], numeric, opts.denominator_floor);
      ++result.checked;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_location = "input " + std::to_string(k) + " element " + std::to_string(i);
      }
    }
  }
  return result;
}

}  // namespace lorcon::nn
