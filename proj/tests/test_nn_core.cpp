#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lorcon/nn/checkpoint.hpp"
#include "lorcon/nn/gradcheck.hpp"
#include "lorcon/nn/layers.hpp"
#include "lorcon/nn/ops.hpp"
#include "lorcon/nn/optim.hpp"
#include "support.hpp"

using namespace lorcon;
using namespace lorcon::nn;
using T64 = Tensor<double>;

namespace {

T64 leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return T64(std::move(shape), std::move(v), true);
}

// Scalar probe with fixed random weights so every output element matters.
T64 probe(const T64& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.uniform(-1, 1);
  return weighted_sum(y, w);
}

std::vector<double> values_of(const T64& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Conv2d, CircularPaddingWrapsColumns) {
  const double a = 1.5, b = -2.0, c = 4.25;
  const T64 x({1, 1, 1, 3}, {a, b, c});
  const T64 w({1, 1, 1, 1}, {1.0});
  const T64 y = conv2d(x, w, T64(), Conv2dGeometry{1, 1, 0, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 5}));
  EXPECT_EQ(values_of(y), (std::vector<double>{c, a, b, c, a}));
}

TEST(Conv2d, VerticalPaddingIsZero) {
  const T64 x({1, 1, 2, 1}, {3.0, 5.0});
  const T64 w({1, 1, 1, 1}, {1.0});
  const T64 y = conv2d(x, w, T64(), Conv2dGeometry{1, 1, 1, 0});
  EXPECT_EQ(values_of(y), (std::vector<double>{0, 3, 5, 0}));
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  const T64 x = leaf({2, 3, 4, 5}, rng);
  T64 w({3, 3, 1, 1}, 0.0);
  for (int i = 0; i < 3; ++i) w.data()[i * 3 + i] = 1.0;
  const T64 y = conv2d(x, w, T64({3}, 0.0), Conv2dGeometry{});
  EXPECT_EQ(values_of(y), values_of(x));
}

TEST(Conv2d, OutputExtentFormula) {
  Rng rng(2);
  const T64 x = leaf({1, 2, 9, 20}, rng);
  const T64 w = leaf({4, 2, 3, 5}, rng);
  const T64 y = conv2d(x, w, T64(), Conv2dGeometry{2, 3, 1, 2});
  EXPECT_EQ(y.shape(), (Shape{1, 4, (9 + 2 - 3) / 2 + 1, (20 + 4 - 5) / 3 + 1}));
}

TEST(Conv2d, ShapeMismatchRejected) {
  Rng rng(3);
  EXPECT_THROW(conv2d(leaf({1, 2, 4, 4}, rng), leaf({1, 3, 1, 1}, rng), T64(), Conv2dGeometry{}), ShapeError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    T64 x = leaf({2, 2, 5, 6}, rng), w = leaf({3, 2, 3, 3}, rng), b = leaf({3}, rng);
    const auto r = grad_check([&] { return probe(conv2d(x, w, b, Conv2dGeometry{2, 2, 1, 1}), seed); }, {x, w, b});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_location;
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(Conv2d, HorizontalShiftEquivariance) {
  Rng rng(4);
  const std::size_t width = 256, sh = 4, k = 12;
  const T64 x = leaf({1, 2, 6, width}, rng);
  const T64 w = leaf({3, 2, 3, 5}, rng);
  T64 shifted({1, 2, 6, width}, 0.0);
  for (std::size_t p = 0; p < 12; ++p)
    for (std::size_t u = 0; u < width; ++u) shifted.data()[p * width + (u + k) % width] = x.data()[p * width + u];
  const Conv2dGeometry geo{2, sh, 1, 2};
  const T64 y0 = conv2d(x, w, T64(), geo), y1 = conv2d(shifted, w, T64(), geo);
  const std::size_t wo = y0.dim(3), rows = y0.numel() / wo;
  ASSERT_EQ(wo, width / sh);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t u = 0; u < wo; ++u)
      EXPECT_NEAR(y1.data()[r * wo + (u + k / sh) % wo], y0.data()[r * wo + u], 1e-12);
}

TEST(MaxPool, HalvesWidth) {
  const T64 x({1, 1, 1, 4}, {1, 3, 2, 4});
  EXPECT_EQ(values_of(maxpool2d(x, 1, 2, 1, 2)), (std::vector<double>{3, 4}));
  EXPECT_EQ(maxpool2d(T64({1, 1, 64, 900}, 0.0), 1, 2, 1, 2).shape(), (Shape{1, 1, 64, 450}));
}

TEST(MaxPool, TieRoutesGradientToFirst) {
  T64 x({1, 1, 1, 2}, {2.0, 2.0}, true);
  sum(maxpool2d(x, 1, 2, 1, 2)).backward();
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(MaxPool, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  T64 x = leaf({2, 2, 3, 8}, rng);
  const auto r = grad_check([&] { return probe(maxpool2d(x, 1, 2, 1, 2), 5); }, {x});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(BatchNorm, StandardizedBatchPassesThrough) {
  // Two values per channel at +-1: mean 0, variance 1.
  const T64 x({2, 1, 1, 1}, {1.0, -1.0});
  BatchNormStats<double> st{T64({1}, 0.0), T64({1}, 1.0)};
  const T64 y = batchnorm2d(x, T64({1}, 1.0), T64({1}, 0.0), st, true);
  EXPECT_NEAR(y.data()[0], 1.0, 1e-5);
  EXPECT_NEAR(y.data()[1], -1.0, 1e-5);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  const T64 x({2, 1, 2, 2}, 3.5);
  BatchNormStats<double> st{T64({1}, 0.0), T64({1}, 1.0)};
  const T64 y = batchnorm2d(x, T64({1}, 2.0), T64({1}, 0.25), st, true);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(BatchNorm, TrainingOutputIsStandardized) {
  Rng rng(6);
  // A wide input keeps the eps contribution far below the tolerance.
  const T64 x = leaf({4, 3, 5, 5}, rng, -40, 60);
  BatchNormStats<double> st{T64({3}, 0.0), T64({3}, 1.0)};
  const T64 y = batchnorm2d(x, T64({3}, 1.0), T64({3}, 0.0), st, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) mean += y.data()[(n * 3 + c) * 25 + i];
    mean /= 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) sq += std::pow(y.data()[(n * 3 + c) * 25 + i] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(sq / 100, 1.0, 1e-6);
  }
}

TEST(BatchNorm, RunningStatsAndInference) {
  const T64 x({2, 1, 1, 2}, {1, 2, 3, 4});
  BatchNormStats<double> st{T64({1}, 0.0), T64({1}, 1.0)};
  batchnorm2d(x, T64({1}, 1.0), T64({1}, 0.0), st, true);
  EXPECT_DOUBLE_EQ(st.running_mean.data()[0], 0.25);
  EXPECT_DOUBLE_EQ(st.running_var.data()[0], 0.9 + 0.1 * (5.0 / 3.0));
  const T64 y = batchnorm2d(T64({1, 1, 1, 1}, {0.25}), T64({1}, 2.0), T64({1}, 1.0), st, false);
  EXPECT_DOUBLE_EQ(y.data()[0], 1.0);
}

TEST(BatchNorm, SingleValueChannelRejectedInTraining) {
  BatchNormStats<double> st{T64({1}, 0.0), T64({1}, 1.0)};
  EXPECT_THROW(batchnorm2d(T64({1, 1, 1, 1}, 1.0), T64({1}, 1.0), T64({1}, 0.0), st, true), ShapeError);
  EXPECT_NO_THROW(batchnorm2d(T64({1, 1, 1, 1}, 1.0), T64({1}, 1.0), T64({1}, 0.0), st, false));
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(200 + seed);
    T64 x = leaf({2, 3, 4, 4}, rng), g = leaf({3}, rng, 0.5, 1.5), b = leaf({3}, rng);
    BatchNormStats<double> st{T64({3}, 0.0), T64({3}, 1.0)};
    const auto r = grad_check([&] { return probe(batchnorm2d(x, g, b, st, true), seed); }, {x, g, b});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_location;
  }
}

TEST(Lstm, ZeroParametersGiveZeroOutput) {
  Rng rng(7);
  BiLstm<double> lstm(4, 3, 4, rng);
  for (auto& layer : lstm.cells())
    for (auto& cell : layer)
      for (T64* t : {&cell.w_ih, &cell.w_hh, &cell.b_ih, &cell.b_hh}) std::fill(t->data().begin(), t->data().end(), 0.0);
  const T64 y = lstm(leaf({5, 2, 4}, rng));
  EXPECT_EQ(y.shape(), (Shape{5, 2, 6}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, SingleStepDirectionsAreIndependentCells) {
  Rng rng(8);
  BiLstm<double> lstm(4, 3, 1, rng);
  auto& dirs = lstm.cells()[0];
  dirs[1].w_ih.values() = dirs[0].w_ih.values();
  dirs[1].w_hh.values() = dirs[0].w_hh.values();
  dirs[1].b_ih.values() = dirs[0].b_ih.values();
  dirs[1].b_hh.values() = dirs[0].b_hh.values();
  const T64 x = leaf({1, 2, 4}, rng);
  const T64 y = lstm(x);
  // Hand-evaluated single cell from zero state: h = o * tanh(i * g).
  const auto& c = dirs[0];
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 3; ++j) {
      double z[4];
      for (int gate = 0; gate < 4; ++gate) {
        const std::size_t row = gate * 3 + j;
        z[gate] = c.b_ih.data()[row] + c.b_hh.data()[row];
        for (std::size_t f = 0; f < 4; ++f) z[gate] += c.w_ih.data()[row * 4 + f] * x.data()[b * 4 + f];
      }
      auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
      const double h = sig(z[3]) * std::tanh(sig(z[0]) * std::tanh(z[2]));
      EXPECT_NEAR(y.data()[b * 6 + j], h, 1e-12);
      EXPECT_NEAR(y.data()[b * 6 + 3 + j], h, 1e-12);
    }
}

TEST(Lstm, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(300 + seed);
    BiLstm<double> lstm(4, 3, 2, rng);
    T64 x = leaf({3, 2, 4}, rng);
    std::vector<T64> inputs{x};
    for (auto& layer : lstm.cells())
      for (auto& cell : layer) inputs.insert(inputs.end(), {cell.w_ih, cell.w_hh, cell.b_ih, cell.b_hh});
    // Some recurrent-weight gradients are ~1e-7; a wider step keeps the
    // difference quotient clear of roundoff.
    GradCheckOptions opts;
    opts.epsilon = 1e-4;
    const auto r = grad_check([&] { return probe(lstm(x), seed); }, inputs, opts);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_location;
  }
}

TEST(Lstm, FeatureMismatchRejected) {
  Rng rng(9);
  BiLstm<double> lstm(4, 3, 1, rng);
  EXPECT_THROW(lstm(leaf({2, 1, 5}, rng)), ShapeError);
}

TEST(Dropout, ZeroProbabilityAndInferenceAreIdentity) {
  Rng rng(10), drop(11);
  const T64 x = leaf({50}, rng);
  EXPECT_EQ(values_of(dropout(x, 0.0, true, drop)), values_of(x));
  EXPECT_EQ(values_of(dropout(x, 0.0, false, drop)), values_of(x));
  EXPECT_EQ(values_of(dropout(x, 0.5, false, drop)), values_of(x));
}

TEST(Dropout, ExpectationPreserved) {
  Rng drop(12);
  const T64 x({100000}, 1.0);
  const T64 y = dropout(x, 0.5, true, drop);
  const double mean = std::accumulate(y.values().begin(), y.values().end(), 0.0) / 100000.0;
  EXPECT_NEAR(mean, 1.0, 0.02);  // six standard errors
  for (double v : y.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Dropout, SeededMaskIsDeterministic) {
  Rng a(13), b(13);
  const T64 x({1000}, 1.0);
  EXPECT_EQ(values_of(dropout(x, 0.5, true, a)), values_of(dropout(x, 0.5, true, b)));
}

TEST(Dropout, InvalidProbabilityRejected) {
  Rng drop(14);
  EXPECT_THROW(dropout(T64({3}, 1.0), 1.0, true, drop), ShapeError);
  EXPECT_THROW(dropout(T64({3}, 1.0), -0.1, true, drop), ShapeError);
}

TEST(Linear, IdentityAndBias) {
  Rng rng(15);
  const T64 x = leaf({2, 3}, rng);
  T64 eye({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) eye.data()[i * 4] = 1.0;
  EXPECT_EQ(values_of(linear(x, eye, T64({3}, 0.0))), values_of(x));
  const T64 bias({3}, {1, 2, 3});
  EXPECT_EQ(values_of(linear(T64({2, 3}, 0.0), leaf({3, 3}, rng), bias)), (std::vector<double>{1, 2, 3, 1, 2, 3}));
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(16);
  T64 x = leaf({2, 5}, rng), w = leaf({3, 5}, rng), b = leaf({3}, rng);
  const auto r = grad_check([&] { return probe(linear(x, w, b), 16); }, {x, w, b});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Linear, TrailingDimMismatch) {
  Rng rng(17);
  EXPECT_THROW(linear(leaf({2, 4}, rng), leaf({3, 5}, rng), leaf({3}, rng)), ShapeError);
}

TEST(Relu, Values) {
  EXPECT_EQ(values_of(relu(T64({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  const T64 pos({3}, {0.5, 1, 2});
  EXPECT_EQ(values_of(relu(pos)), values_of(pos));
}

TEST(Relu, GradientAwayFromKink) {
  Rng rng(18);
  T64 x({20}, 0.0, true);
  for (double& v : x.data()) {
    v = rng.uniform(0.1, 1.0);
    if (rng.uniform() < 0.5) v = -v;
  }
  const auto r = grad_check([&] { return probe(relu(x), 18); }, {x});
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.skipped_nonsmooth, 0u);
}

TEST(Adagrad, HandEvaluatedSteps) {
  Adagrad<double> opt(0.0005);
  std::vector<NamedTensor<double>> params{{"p", T64({1}, 0.0, true)}};
  params[0].tensor.grad()[0] = 1.0;
  opt.step(params);
  EXPECT_DOUBLE_EQ(params[0].tensor.data()[0], -0.0005 / (1.0 + 1e-10));
  const double after_one = params[0].tensor.data()[0];
  opt.step(params);
  EXPECT_DOUBLE_EQ(params[0].tensor.data()[0] - after_one, -0.0005 / (std::sqrt(2.0) + 1e-10));
  EXPECT_DOUBLE_EQ(opt.accumulators().at("p")[0], 2.0);
}

TEST(Adagrad, ZeroGradientLeavesStateUnchanged) {
  Adagrad<double> opt(0.1);
  std::vector<NamedTensor<double>> params{{"p", T64({2}, {1.0, -1.0}, true)}};
  params[0].tensor.grad()[0] = 0.5;
  opt.step(params);
  const auto theta = values_of(params[0].tensor);
  const auto acc = opt.accumulators().at("p");
  params[0].tensor.zero_grad();
  opt.step(params);
  EXPECT_EQ(values_of(params[0].tensor), theta);
  EXPECT_EQ(opt.accumulators().at("p"), acc);
}

TEST(Adagrad, AccumulatorsNeverDecrease) {
  Rng rng(19);
  Adagrad<double> opt(0.01);
  std::vector<NamedTensor<double>> params{{"p", T64({8}, 0.0, true)}};
  std::vector<double> prev(8, 0.0);
  for (int s = 0; s < 50; ++s) {
    for (double& g : params[0].tensor.grad()) g = rng.uniform(-3, 3);
    opt.step(params);
    const auto& acc = opt.accumulators().at("p");
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_GE(acc[i], prev[i]);
      prev[i] = acc[i];
    }
  }
}

TEST(Adagrad, NonFiniteGradientRejected) {
  Adagrad<double> opt(0.01);
  std::vector<NamedTensor<double>> params{{"conv1.weight", T64({1}, 0.0, true)}};
  params[0].tensor.grad()[0] = std::nan("");
  EXPECT_THROW(opt.step(params), NumericalError);
}

TEST(GradCheck, Square) {
  T64 x({1}, {3.0}, true);
  GradCheckOptions opts;
  opts.epsilon = 1e-4;  // exact for a quadratic, so only roundoff remains
  const auto r = grad_check([&] { return mul(x, x); }, {x}, opts);
  EXPECT_LT(r.max_rel_error, 1e-10);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(GradCheck, ConvBatchNormReluLinearChain) {
  Rng rng(20);
  T64 x = leaf({1, 2, 4, 6}, rng), w = leaf({3, 2, 3, 3}, rng);
  T64 g = leaf({3}, rng, 0.5, 1.5), b = leaf({3}, rng);
  T64 lw = leaf({2, 72}, rng), lb = leaf({2}, rng);
  BatchNormStats<double> st{T64({3}, 0.0), T64({3}, 1.0)};
  const auto f = [&] {
    T64 h = relu(batchnorm2d(conv2d(x, w, T64(), Conv2dGeometry{1, 1, 1, 1}), g, b, st, true));
    return probe(linear(reshape(h, {1, 72}), lw, lb), 20);
  };
  EXPECT_LT(grad_check(f, {x, w, g, b, lw, lb}).max_rel_error, 1e-4);
}

TEST(GradCheck, DetectsCorruptedGradient) {
  Rng rng(21);
  T64 x = leaf({2, 5}, rng), w = leaf({3, 5}, rng), b = leaf({3}, rng);
  GradCheckOptions opts;
  opts.analytic_scale = 1.01;
  EXPECT_GT(grad_check([&] { return probe(linear(x, w, b), 21); }, {x, w, b}, opts).max_rel_error, 1e-3);
}

TEST(GradCheck, NonScalarRejected) {
  Rng rng(22);
  T64 x = leaf({3}, rng);
  EXPECT_THROW(grad_check([&] { return scale(x, 2.0); }, {x}), ShapeError);
}

TEST(Tensor, NonFiniteValuesAreDiagnosed) {
  T64 x({3}, {1.0, std::nan(""), 2.0});
  try {
    check_finite(x, "conv2");
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("conv2"), std::string::npos);
  }
}

TEST(Tensor, NoGradGuardStopsTracking) {
  T64 x({2}, 1.0, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(scale(x, 2.0).requires_grad());
  }
  EXPECT_TRUE(scale(x, 2.0).requires_grad());
}

TEST(Checkpoint, RoundTripPreservesEveryRecord) {
  testing_support::TempDir dir("ckpt");
  Checkpoint ck;
  ck.put<float>("conv1.weight", {2, 3}, {1.5f, -2.25f, 3e-8f, 0.0f, 7.0f, -1e30f});
  ck.put<double>("adagrad/conv1.weight", {6}, {1, 2, 3, 4, 5, 6});
  ck.put<std::int64_t>("meta/epoch", {1}, {42});
  ck.save(dir.path() / "a.ckpt");
  const auto back = Checkpoint::load(dir.path() / "a.ckpt");
  EXPECT_EQ(back.get<float>("conv1.weight"), (std::vector<float>{1.5f, -2.25f, 3e-8f, 0.0f, 7.0f, -1e30f}));
  EXPECT_EQ(back.get<double>("adagrad/conv1.weight"), (std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(back.get<std::int64_t>("meta/epoch")[0], 42);
  EXPECT_EQ(back.record("conv1.weight").dims, (Shape{2, 3}));
  EXPECT_EQ(back.serialize(), ck.serialize());
}

TEST(Checkpoint, CorruptionIsReported) {
  Checkpoint ck;
  ck.put<float>("w", {2}, {1.0f, 2.0f});
  auto bytes = ck.serialize();
  EXPECT_THROW(Checkpoint::deserialize({bytes.begin(), bytes.end() - 1}, "x"), DataError);
  bytes[0] = 'Z';
  EXPECT_THROW(Checkpoint::deserialize(bytes, "x"), DataError);
  EXPECT_THROW(ck.get<double>("w"), DataError);
  EXPECT_THROW(ck.get<float>("missing"), DataError);
}
