#pragma once

// Finite-difference checks of every differentiable op plus a tiny end-to-end
// model, in double precision over many random seeds.

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "lorcon/evaluation.hpp"
#include "lorcon/model.hpp"
#include "lorcon/nn/gradcheck.hpp"
#include "lorcon/nn/layers.hpp"
#include "lorcon/nn/ops.hpp"

namespace lorcon {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckCase {
  std::string op;
  std::function<nn::GradCheckResult(std::uint64_t seed, const nn::GradCheckOptions&)> run;
};

namespace detail {

using TD = nn::Tensor<double>;

inline TD random_tensor(nn::Shape shape, nn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  TD t(std::move(shape), 0.0, true);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Inputs bounded away from zero so that ReLU probes rarely sit on the kink.
inline TD signed_tensor(nn::Shape shape, nn::Rng& rng) {
  TD t(std::move(shape), 0.0, true);
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
  return t;
}

inline std::vector<double> random_weights(std::size_t n, nn::Rng& rng) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

inline std::size_t pick(nn::Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace detail

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.height = 16;
  c.width = 64;
  c.channels = {10, 8, 8, 8, 8, 8, 8};
  c.embed = 16;
  c.hidden = 8;
  c.sequence_length = 2;
  return c;
}

// The end-to-end loss is O(1) and is evaluated through dozens of layers, so
// double-precision roundoff bounds the finite-difference accuracy near 1e-12
// absolute. A fourth-order stencil with a wider step, and a floor that
// compares gradients below 1e-6 in absolute terms, keep the check meaningful.
// Coordinates are sampled from every parameter tensor to bound the runtime.
inline nn::GradCheckOptions end_to_end_options(nn::GradCheckOptions o) {
  o.stencil = nn::Stencil::kFourPoint;
  o.epsilon = 1e-4;
  o.denominator_floor = 1e-6;
  o.max_coords_per_input = 12;
  return o;
}

// One entry per differentiable operation, plus the end-to-end model.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using detail::TD;
  std::vector<GradCheckCase> cases;

  cases.push_back({"conv2d_circular", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 3), h = detail::pick(rng, 3, 5),
                      w = detail::pick(rng, 3, 7), out = detail::pick(rng, 1, 3);
    const nn::Conv2dGeometry geo{detail::pick(rng, 1, 2), detail::pick(rng, 1, 2), 1, detail::pick(rng, 1, 2)};
    TD x = detail::random_tensor({n, c, h, w}, rng);
    TD wt = detail::random_tensor({out, c, 3, 3}, rng);
    TD b = detail::random_tensor({out}, rng);
    const auto ho = nn::conv_output_extent(h, geo.pad_v, 3, geo.stride_v);
    const auto wo = nn::conv_output_extent(w, geo.pad_h, 3, geo.stride_h);
    const auto proj = detail::random_weights(n * out * ho * wo, rng);
    return nn::grad_check([&] { return nn::weighted_sum(nn::conv2d(x, wt, b, geo), proj); }, {x, wt, b}, o);
  }});

  cases.push_back({"batchnorm2d", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t n = detail::pick(rng, 2, 3), c = detail::pick(rng, 1, 3), h = detail::pick(rng, 1, 3),
                      w = detail::pick(rng, 2, 4);
    TD x = detail::random_tensor({n, c, h, w}, rng);
    TD gamma = detail::random_tensor({c}, rng, 0.5, 1.5);
    TD beta = detail::random_tensor({c}, rng);
    nn::BatchNormStats<double> stats{TD({c}, 0.0), TD({c}, 1.0)};
    const auto proj = detail::random_weights(x.numel(), rng);
    const bool training = rng.uniform() < 0.75;
    if (!training)
      for (std::size_t k = 0; k < c; ++k) {
        stats.running_mean.data()[k] = rng.uniform(-0.5, 0.5);
        stats.running_var.data()[k] = rng.uniform(0.5, 2.0);
      }
    return nn::grad_check(
        [&] { return nn::weighted_sum(nn::batchnorm2d(x, gamma, beta, stats, training), proj); },
        {x, gamma, beta}, o);
  }});

  cases.push_back({"maxpool2d", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t n = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 3), h = detail::pick(rng, 2, 4);
    const std::size_t kh = detail::pick(rng, 1, 2), kw = 2;
    const std::size_t w = 2 * detail::pick(rng, 2, 4);
    TD x = detail::random_tensor({n, c, h, w}, rng);
    const std::size_t ho = (h - kh) / kh + 1, wo = w / kw;
    const auto proj = detail::random_weights(n * c * ho * wo, rng);
    return nn::grad_check([&] { return nn::weighted_sum(nn::maxpool2d(x, kh, kw, kh, kw), proj); }, {x}, o);
  }});

  cases.push_back({"bilstm", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t s = detail::pick(rng, 1, 3), b = detail::pick(rng, 1, 2), f = detail::pick(rng, 2, 4),
                      hid = detail::pick(rng, 2, 3), layers = detail::pick(rng, 1, 2);
    nn::BiLstm<double> lstm(f, hid, layers, rng);
    nn::ParameterList<double> params;
    lstm.collect("lstm", params);
    TD x = detail::random_tensor({s, b, f}, rng);
    std::vector<TD> inputs{x};
    for (auto& p : params.parameters) inputs.push_back(p.tensor);
    const auto proj = detail::random_weights(s * b * 2 * hid, rng);
    return nn::grad_check([&] { return nn::weighted_sum(lstm(x), proj); }, inputs, o);
  }});

  cases.push_back({"linear", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t rows = detail::pick(rng, 1, 4), in = detail::pick(rng, 1, 6), out = detail::pick(rng, 1, 5);
    TD x = detail::random_tensor({rows, in}, rng);
    TD w = detail::random_tensor({out, in}, rng);
    TD b = detail::random_tensor({out}, rng);
    const auto proj = detail::random_weights(rows * out, rng);
    return nn::grad_check([&] { return nn::weighted_sum(nn::linear(x, w, b), proj); }, {x, w, b}, o);
  }});

  cases.push_back({"relu", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    TD x = detail::signed_tensor({detail::pick(rng, 2, 12)}, rng);
    const auto proj = detail::random_weights(x.numel(), rng);
    return nn::grad_check([&] { return nn::weighted_sum(nn::relu(x), proj); }, {x}, o);
  }});

  cases.push_back({"sigmoid", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    TD x = detail::random_tensor({detail::pick(rng, 2, 12)}, rng, -3.0, 3.0);
    const auto proj = detail::random_weights(x.numel(), rng);
    return nn::grad_check([&] { return nn::weighted_sum(nn::sigmoid(x), proj); }, {x}, o);
  }});

  cases.push_back({"tanh", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    TD x = detail::random_tensor({detail::pick(rng, 2, 12)}, rng, -3.0, 3.0);
    const auto proj = detail::random_weights(x.numel(), rng);
    return nn::grad_check([&] { return nn::weighted_sum(nn::tanh(x), proj); }, {x}, o);
  }});

  cases.push_back({"add_mul_scale", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t n = detail::pick(rng, 2, 10);
    TD a = detail::random_tensor({n}, rng);
    TD b = detail::random_tensor({n}, rng);
    const double k = rng.uniform(-2.0, 2.0);
    return nn::grad_check([&] { return nn::sum(nn::scale(nn::mul(nn::add(a, b), a), k)); }, {a, b}, o);
  }});

  cases.push_back({"reshape_slice_concat_transpose", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t s = detail::pick(rng, 2, 4), b = detail::pick(rng, 1, 3), f = detail::pick(rng, 2, 4);
    TD x = detail::random_tensor({s, b, f}, rng);
    TD y = detail::random_tensor({s, b, 2}, rng);
    const auto proj = detail::random_weights(b * s * (f + 1), rng);
    return nn::grad_check(
        [&] {
          TD z = nn::concat<double>({nn::slice(x, 2, 1, f - 1), y}, 2);
          return nn::weighted_sum(nn::reshape(nn::transpose01(z), {b * s * (f + 1)}), proj);
        },
        {x, y}, o);
  }});

  cases.push_back({"dropout", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    TD x = detail::random_tensor({detail::pick(rng, 4, 16)}, rng);
    const double p = rng.uniform(0.1, 0.7);
    const auto proj = detail::random_weights(x.numel(), rng);
    const std::uint64_t mask_seed = rng.next();
    return nn::grad_check(
        [&] {
          nn::Rng mask(mask_seed);
          return nn::weighted_sum(nn::dropout(x, p, true, mask), proj);
        },
        {x}, o);
  }});

  cases.push_back({"weighted_mse_loss", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const std::size_t b = detail::pick(rng, 1, 3), s = detail::pick(rng, 1, 4);
    TD pred = detail::random_tensor({b, s, 6}, rng);
    const TD target({b, s, 6}, detail::random_weights(b * s * 6, rng));
    const auto steps = rng.uniform() < 0.5 ? nn::LossSteps::kAll : nn::LossSteps::kLast;
    return nn::grad_check([&] { return nn::weighted_mse_loss(pred, target, 100.0, steps).total; }, {pred}, o);
  }});

  cases.push_back({"end_to_end_model", [](std::uint64_t seed, const nn::GradCheckOptions& o) {
    nn::Rng rng(seed);
    const ModelConfig cfg = tiny_model_config();
    LorconNet<double> model(cfg, seed);
    const std::size_t b = 2, s = static_cast<std::size_t>(cfg.sequence_length);
    TD x = detail::random_tensor({b, s, 10, static_cast<std::size_t>(cfg.height), static_cast<std::size_t>(cfg.width)},
                                 rng, 0.0, 1.0);
    // Odometry-scale targets: about a meter of translation, a few degrees of rotation.
    std::vector<double> tv(b * s * 6);
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = i % 6 < 3 ? rng.uniform(-1.0, 1.0) : rng.uniform(-0.05, 0.05);
    const TD target({b, s, 6}, tv);
    const std::uint64_t mask_seed = rng.next();
    std::vector<TD> inputs{x};
    for (auto& p : model.parameters().parameters) inputs.push_back(p.tensor);
    return nn::grad_check(
        [&] {
          nn::Rng mask(mask_seed);
          return nn::weighted_mse_loss(model.forward_all(x, &mask), target, 100.0).total;
        },
        inputs, end_to_end_options(o));
  }});
  return cases;
}

struct GradCheckRow {
  std::string op;
  double max_rel_error = 0;
  std::uint64_t worst_seed = 0;
  std::string worst_location;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  bool passed = true;
};

struct GradCheckSuiteOptions {
  int seeds = 20;
  std::uint64_t base_seed = 1000;
  // Scales the analytic gradient of this op by 1.01 (sensitivity check).
  std::string inject_fault;
};

inline std::vector<GradCheckRow> run_gradcheck_suite(const GradCheckSuiteOptions& opts,
                                                     std::ostream* progress = nullptr) {
  std::vector<GradCheckRow> rows;
  for (const auto& c : gradcheck_cases()) {
    GradCheckRow row;
    row.op = c.op;
    for (int k = 0; k < opts.seeds; ++k) {
      const std::uint64_t seed = opts.base_seed + static_cast<std::uint64_t>(k);
      nn::GradCheckOptions o;
      o.seed = seed;
      if (c.op == opts.inject_fault) o.analytic_scale = 1.01;
      const auto r = c.run(seed, o);
      row.checked += r.checked;
      row.skipped_nonsmooth += r.skipped_nonsmooth;
      if (r.max_rel_error >= row.max_rel_error) {
        row.max_rel_error = r.max_rel_error;
        row.worst_seed = seed;
        row.worst_location = r.worst_location;
      }
    }
    row.passed = row.max_rel_error < kGradCheckTolerance && row.checked > 0;
    if (progress) *progress << "  " << row.op << " done\n" << std::flush;
    rows.push_back(row);
  }
  return rows;
}

inline bool print_gradcheck_report(std::ostream& out, const std::vector<GradCheckRow>& rows) {
  bool ok = true;
  out << std::left << std::setw(32) << "op" << std::setw(16) << "max_rel_error" << std::setw(10) << "checked"
      << std::setw(10) << "skipped" << "status\n";
  for (const auto& r : rows) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << r.max_rel_error;
    out << std::left << std::setw(32) << r.op << std::setw(16) << err.str() << std::setw(10) << r.checked
        << std::setw(10) << r.skipped_nonsmooth << (r.passed ? "PASS" : "FAIL");
    if (!r.passed) out << " (seed " << r.worst_seed << ", " << r.worst_location << ")";
    out << '\n';
    ok = ok && r.passed;
  }
  out << std::right;
  return ok;
}

}  // namespace lorcon
