#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lorcon/errors.hpp"
#include "lorcon/nn/layers.hpp"

namespace lorcon::nn {

// Adagrad: G += g^2; theta -= lr * g / (sqrt(G) + eps).
template <typename T>
class Adagrad {
 public:
  explicit Adagrad(double lr, double eps = 1e-10) : lr_(lr), eps_(eps) {}

  double learning_rate() const { return lr_; }
  double epsilon() const { return eps_; }

  void step(std::vector<NamedTensor<T>>& params) {
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto g = p.tensor.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i]))
          throw NumericalError("non-finite gradient in parameter " + p.name);
      }
      auto& acc = accumulators_[p.name];
      if (acc.empty()) acc.assign(g.size(), T(0));
      if (acc.size() != g.size())
        throw ShapeError("adagrad: accumulator for " + p.name + " has wrong size");
      auto theta = p.tensor.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        acc[i] += g[i] * g[i];
        theta[i] -= static_cast<T>(lr_ * g[i] / (std::sqrt(static_cast<double>(acc[i])) + eps_));
      }
    }
  }

  std::map<std::string, std::vector<T>>& accumulators() { return accumulators_; }
  const std::map<std::string, std::vector<T>>& accumulators() const { return accumulators_; }

 private:
  double lr_;
  double eps_;
  std::map<std::string, std::vector<T>> accumulators_;
};

}  // namespace lorcon::nn
