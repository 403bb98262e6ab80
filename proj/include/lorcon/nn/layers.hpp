#pragma once

// Parameterized layers built on the differentiable ops.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lorcon/nn/ops.hpp"
#include "lorcon/nn/random.hpp"
#include "lorcon/nn/tensor.hpp"

namespace lorcon::nn {

enum class Mode { kTraining, kInference };

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Learnable parameters and non-learnable buffers of a model, in a fixed
// registration order.
template <typename T>
struct ParameterList {
  std::vector<NamedTensor<T>> parameters;
  std::vector<NamedTensor<T>> buffers;

  void add_parameter(std::string name, Tensor<T> t) {
    parameters.push_back({std::move(name), std::move(t)});
  }
  void add_buffer(std::string name, Tensor<T> t) { buffers.push_back({std::move(name), std::move(t)}); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters) p.tensor.zero_grad();
  }
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad = true) {
  Tensor<T> t(std::move(shape), T(0), requires_grad);
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

// Circular-horizontal convolution. Weights use a Kaiming-style uniform bound
// sqrt(6 / fan_in).
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw, Conv2dGeometry geo,
         bool with_bias, Rng& rng)
      : geo_(geo) {
    const double fan_in = static_cast<double>(in * kh * kw);
    weight_ = uniform_tensor<T>({out, in, kh, kw}, std::sqrt(6.0 / fan_in), rng);
    if (with_bias) bias_ = Tensor<T>({out}, T(0), true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, geo_); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.add_parameter(prefix + ".weight", weight_);
    if (bias_.defined()) out.add_parameter(prefix + ".bias", bias_);
  }

  const Conv2dGeometry& geometry() const { return geo_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Conv2dGeometry geo_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma_({channels}, T(1), true),
        beta_({channels}, T(0), true),
        stats_{Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))} {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batchnorm2d(x, gamma_, beta_, stats_, mode == Mode::kTraining);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.add_parameter(prefix + ".gamma", gamma_);
    out.add_parameter(prefix + ".beta", beta_);
    out.add_buffer(prefix + ".running_mean", stats_.running_mean);
    out.add_buffer(prefix + ".running_var", stats_.running_var);
  }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
  BatchNormStats<T> stats_;
};

enum class LinearInit { kRelu, kDefault };

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, LinearInit init = LinearInit::kRelu) {
    const double fan_in = static_cast<double>(in);
    const double bound = init == LinearInit::kRelu ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
    weight_ = uniform_tensor<T>({out, in}, bound, rng);
    bias_ = Tensor<T>({out}, T(0), true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.add_parameter(prefix + ".weight", weight_);
    out.add_parameter(prefix + ".bias", bias_);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

// Multi-layer bidirectional LSTM over [S, B, F] with zero initial state.
// Gate order inside the 4H blocks: input, forget, cell, output.
template <typename T>
class BiLstm {
 public:
  struct Cell {
    Tensor<T> w_ih, w_hh, b_ih, b_hh;
  };

  BiLstm() = default;
  BiLstm(std::size_t input_size, std::size_t hidden, std::size_t layers, Rng& rng)
      : hidden_(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t in = l == 0 ? input_size : 2 * hidden;
      std::array<Cell, 2> dirs;
      for (auto& c : dirs) {
        c.w_ih = uniform_tensor<T>({4 * hidden, in}, bound, rng);
        c.w_hh = uniform_tensor<T>({4 * hidden, hidden}, bound, rng);
        c.b_ih = uniform_tensor<T>({4 * hidden}, bound, rng);
        c.b_hh = uniform_tensor<T>({4 * hidden}, bound, rng);
      }
      layers_.push_back(std::move(dirs));
    }
  }

  std::size_t hidden() const { return hidden_; }
  std::size_t layers() const { return layers_.size(); }
  std::vector<std::array<Cell, 2>>& cells() { return layers_; }

  // [S, B, F] -> [S, B, 2H]; forward direction first along the last axis.
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 3) throw ShapeError("lstm: expected [S,B,F], got " + to_string(x.shape()));
    Tensor<T> seq = x;
    for (const auto& dirs : layers_) {
      if (seq.dim(2) != dirs[0].w_ih.dim(1))
        throw ShapeError("lstm: input features " + std::to_string(seq.dim(2)) + " but layer expects " +
                         std::to_string(dirs[0].w_ih.dim(1)));
      Tensor<T> fwd = run_direction(seq, dirs[0], false);
      Tensor<T> bwd = run_direction(seq, dirs[1], true);
      seq = concat<T>({fwd, bwd}, 2);
    }
    return seq;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (int d = 0; d < 2; ++d) {
        const std::string p = prefix + ".l" + std::to_string(l) + (d == 0 ? ".fwd" : ".bwd");
        const Cell& c = layers_[l][d];
        out.add_parameter(p + ".w_ih", c.w_ih);
        out.add_parameter(p + ".w_hh", c.w_hh);
        out.add_parameter(p + ".b_ih", c.b_ih);
        out.add_parameter(p + ".b_hh", c.b_hh);
      }
  }

 private:
  Tensor<T> run_direction(const Tensor<T>& seq, const Cell& cell, bool reverse) const {
    const std::size_t steps = seq.dim(0), batch = seq.dim(1), hd = hidden_;
    // Input projections for every step at once: [S, B, 4H].
    const Tensor<T> projected = linear(seq, cell.w_ih, cell.b_ih);
    Tensor<T> h({batch, hd}, T(0));
    Tensor<T> c({batch, hd}, T(0));
    std::vector<Tensor<T>> outputs(steps);
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t t = reverse ? steps - 1 - k : k;
      const Tensor<T> xt = reshape(slice(projected, 0, t, 1), {batch, 4 * hd});
      const Tensor<T> gates = add(xt, linear(h, cell.w_hh, cell.b_hh));
      const Tensor<T> i = sigmoid(slice(gates, 1, 0, hd));
      const Tensor<T> f = sigmoid(slice(gates, 1, hd, hd));
      const Tensor<T> g = tanh(slice(gates, 1, 2 * hd, hd));
      const Tensor<T> o = sigmoid(slice(gates, 1, 3 * hd, hd));
      c = add(mul(f, c), mul(i, g));
      h = mul(o, tanh(c));
      outputs[t] = reshape(h, {1, batch, hd});
    }
    return concat(outputs, 0);
  }

  std::size_t hidden_ = 0;
  std::vector<std::array<Cell, 2>> layers_;
};

}  // namespace lorcon::nn
