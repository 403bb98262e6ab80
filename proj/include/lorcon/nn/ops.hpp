#pragma once

// Differentiable operations. Every op computes its forward value eagerly and,
// when recording, attaches a closure that accumulates input gradients.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lorcon/errors.hpp"
#include "lorcon/nn/random.hpp"
#include "lorcon/nn/tensor.hpp"

namespace lorcon::nn {

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
}

// y = f(x) with dy/dx expressed through (x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
  return make_result<T>(x.shape(), std::move(y), op, {&x}, [x, df](Node<T>& self) {
    T* gx = grad_sink(x);
    const auto xs = x.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gx[i] += self.grad[i] * df(xs[i], self.value[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(y), "add", {&a, &b}, [a, b](Node<T>& self) {
    if (T* ga = grad_sink(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (T* gb = grad_sink(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(y), "mul", {&a, &b}, [a, b](Node<T>& self) {
    if (T* ga = grad_sink(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * b.data()[i];
    if (T* gb = grad_sink(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * a.data()[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// max(0, x); subgradient 0 at x = 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  if (NonSmoothRecorder* rec = NonSmoothRecorder::active()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      word = (word << 1) | (x.data()[i] > T(0) ? 1u : 0u);
      if ((i & 63) == 63) rec->mix(word), word = 0;
    }
    rec->mix(word);
  }
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>({1}, {s}, "sum", {&x}, [x](Node<T>& self) {
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += self.grad[0];
  });
}

// Sum of x * w with w held constant. Used to scalarize outputs in checks.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const std::vector<T>& w) {
  if (w.size() != x.numel()) throw ShapeError("weighted_sum: weight count mismatch");
  T s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x.data()[i] * w[i];
  return make_result<T>({1}, {s}, "weighted_sum", {&x}, [x, w](Node<T>& self) {
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += self.grad[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return make_result<T>(std::move(shape), x.values(), "reshape", {&x}, [x](Node<T>& self) {
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

namespace detail {

// Splits a shape around an axis: outer * axis * inner.
inline std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

}  // namespace detail

// Elements [start, start+len) along an axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " +
                     to_string(x.shape()));
  const auto [outer, inner] = detail::outer_inner(x.shape(), axis);
  const std::size_t extent = x.dim(axis);
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> y(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().begin() + (o * extent + start) * inner, len * inner,
                y.begin() + o * len * inner);
  return make_result<T>(std::move(shape), std::move(y), "slice", {&x},
                        [x, outer, inner, extent, start, len](Node<T>& self) {
                          T* gx = grad_sink(x);
                          for (std::size_t o = 0; o < outer; ++o) {
                            T* dst = gx + (o * extent + start) * inner;
                            const T* src = self.grad.data() + o * len * inner;
                            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Shape shape = xs[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = xs[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: incompatible shapes " + to_string(x.shape()) + " and " +
                                 to_string(xs[0].shape()));
    total += x.dim(axis);
  }
  shape[axis] = total;
  const auto [outer, inner] = detail::outer_inner(shape, axis);
  std::vector<T> y(numel(shape));
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t len = x.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.data().begin() + o * len * inner, len * inner,
                  y.begin() + (o * total + offset) * inner);
    offset += len;
  }
  return make_result_n<T>(std::move(shape), std::move(y), "concat", xs,
                          [xs, axis, outer, inner, total](Node<T>& self) {
                            std::size_t offset = 0;
                            for (const auto& x : xs) {
                              const std::size_t len = x.dim(axis);
                              if (T* gx = grad_sink(x)) {
                                for (std::size_t o = 0; o < outer; ++o) {
                                  const T* src = self.grad.data() + (o * total + offset) * inner;
                                  T* dst = gx + o * len * inner;
                                  for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                                }
                              }
                              offset += len;
                            }
                          });
}

// Swaps the two leading axes: [A, B, ...] -> [B, A, ...].
template <typename T>
Tensor<T> transpose01(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose01: rank < 2");
  const std::size_t a = x.dim(0), b = x.dim(1), inner = x.numel() / (a * b);
  Shape shape = x.shape();
  std::swap(shape[0], shape[1]);
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(x.data().begin() + (i * b + j) * inner, inner, y.begin() + (j * a + i) * inner);
  return make_result<T>(std::move(shape), std::move(y), "transpose01", {&x},
                        [x, a, b, inner](Node<T>& self) {
                          T* gx = grad_sink(x);
                          for (std::size_t i = 0; i < a; ++i)
                            for (std::size_t j = 0; j < b; ++j) {
                              const T* src = self.grad.data() + (j * a + i) * inner;
                              T* dst = gx + (i * b + j) * inner;
                              for (std::size_t k = 0; k < inner; ++k) dst[k] += src[k];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Linear: y[..., o] = b[o] + sum_f x[..., f] * w[o, f]

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(1))
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  const std::size_t in = w.dim(1), out = w.dim(0), rows = x.numel() / in;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out))
    throw ShapeError("linear: bias shape " + to_string(b.shape()) + " for " +
                     std::to_string(out) + " outputs");
  Shape shape = x.shape();
  shape.back() = out;
  std::vector<T> y(rows * out);
  const T* xs = x.data().data();
  const T* ws = w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xs + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T* wr = ws + o * in;
      T acc = b.defined() ? b.data()[o] : T(0);
      for (std::size_t f = 0; f < in; ++f) acc += xr[f] * wr[f];
      y[r * out + o] = acc;
    }
  }
  return make_result<T>(std::move(shape), std::move(y), "linear", {&x, &w, &b},
                        [x, w, b, in, out, rows](Node<T>& self) {
                          const T* g = self.grad.data();
                          const T* xs = x.data().data();
                          const T* ws = w.data().data();
                          T* gx = grad_sink(x);
                          T* gw = grad_sink(w);
                          T* gb = grad_sink(b);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gr = g + r * out;
                            const T* xr = xs + r * in;
                            for (std::size_t o = 0; o < out; ++o) {
                              const T go = gr[o];
                              if (go == T(0)) continue;
                              if (gx) {
                                T* gxr = gx + r * in;
                                const T* wr = ws + o * in;
                                for (std::size_t f = 0; f < in; ++f) gxr[f] += go * wr[f];
                              }
                              if (gw) {
                                T* gwr = gw + o * in;
                                for (std::size_t f = 0; f < in; ++f) gwr[f] += go * xr[f];
                              }
                              if (gb) gb[o] += go;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution with circular horizontal padding and zero vertical padding.

struct Conv2dGeometry {
  std::size_t stride_v = 1, stride_h = 1;
  std::size_t pad_v = 0, pad_h = 0;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t pad, std::size_t kernel,
                                      std::size_t stride) {
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

// input [N,C,H,W], weight [O,C,KH,KW], bias [O] (may be undefined).
// Column -1 reads column W-1; padding wider than the image keeps wrapping.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dGeometry geo) {
  if (input.rank() != 4 || weight.rank() != 4 || weight.dim(1) != input.dim(1))
    throw ShapeError("conv2d: input " + to_string(input.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  if (geo.stride_v == 0 || geo.stride_h == 0) throw ShapeError("conv2d: zero stride");
  const std::size_t n_batch = input.dim(0), chans = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  const std::size_t outs = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outs))
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()));
  if (w == 0 || h == 0) throw ShapeError("conv2d: empty input " + to_string(input.shape()));
  const std::size_t ho = conv_output_extent(h, geo.pad_v, kh, geo.stride_v);
  const std::size_t wo = conv_output_extent(w, geo.pad_h, kw, geo.stride_h);
  if (ho == 0 || wo == 0)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + to_string(input.shape()));

  // cols[kx * wo + ox] = source column for output column ox and tap kx.
  std::vector<std::size_t> cols(kw * wo);
  for (std::size_t kx = 0; kx < kw; ++kx)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const long c = static_cast<long>(ox * geo.stride_h + kx) - static_cast<long>(geo.pad_h);
      const long m = static_cast<long>(w);
      cols[kx * wo + ox] = static_cast<std::size_t>(((c % m) + m) % m);
    }
  // rows[ky * ho + oy] = source row, or h when it falls into zero padding.
  std::vector<std::size_t> rows(kh * ho);
  for (std::size_t ky = 0; ky < kh; ++ky)
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const long r = static_cast<long>(oy * geo.stride_v + ky) - static_cast<long>(geo.pad_v);
      rows[ky * ho + oy] = (r < 0 || r >= static_cast<long>(h)) ? h : static_cast<std::size_t>(r);
    }

  std::vector<T> y(n_batch * outs * ho * wo);
  const T* xs = input.data().data();
  const T* ws = weight.data().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < outs; ++o) {
      T* yp = y.data() + (n * outs + o) * ho * wo;
      if (bias.defined()) std::fill(yp, yp + ho * wo, bias.data()[o]);
      for (std::size_t c = 0; c < chans; ++c) {
        const T* xp = xs + (n * chans + c) * h * w;
        const T* wk = ws + ((o * chans + c) * kh) * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = wk[ky * kw + kx];
            const std::size_t* cmap = cols.data() + kx * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const std::size_t iy = rows[ky * ho + oy];
              if (iy == h) continue;
              const T* xr = xp + iy * w;
              T* yr = yp + oy * wo;
              for (std::size_t ox = 0; ox < wo; ++ox) yr[ox] += wv * xr[cmap[ox]];
            }
          }
        }
      }
    }
  }

  return make_result<T>(
      {n_batch, outs, ho, wo}, std::move(y), "conv2d", {&input, &weight, &bias},
      [input, weight, bias, cols = std::move(cols), rows = std::move(rows), n_batch, chans, h, w,
       outs, kh, kw, ho, wo](Node<T>& self) {
        const T* g = self.grad.data();
        const T* xs = input.data().data();
        const T* ws = weight.data().data();
        T* gx = grad_sink(input);
        T* gw = grad_sink(weight);
        if (T* gb = grad_sink(bias)) {
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t o = 0; o < outs; ++o) {
              const T* gp = g + (n * outs + o) * ho * wo;
              T acc = 0;
              for (std::size_t i = 0; i < ho * wo; ++i) acc += gp[i];
              gb[o] += acc;
            }
        }
        if (!gx && !gw) return;
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t o = 0; o < outs; ++o) {
            const T* gp = g + (n * outs + o) * ho * wo;
            for (std::size_t c = 0; c < chans; ++c) {
              const T* xp = xs + (n * chans + c) * h * w;
              T* gxp = gx ? gx + (n * chans + c) * h * w : nullptr;
              const std::size_t wbase = ((o * chans + c) * kh) * kw;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const T wv = ws[wbase + ky * kw + kx];
                  const std::size_t* cmap = cols.data() + kx * wo;
                  T wacc = 0;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::size_t iy = rows[ky * ho + oy];
                    if (iy == h) continue;
                    const T* gr = gp + oy * wo;
                    const T* xr = xp + iy * w;
                    if (gxp) {
                      T* gxr = gxp + iy * w;
                      for (std::size_t ox = 0; ox < wo; ++ox) gxr[cmap[ox]] += wv * gr[ox];
                    }
                    for (std::size_t ox = 0; ox < wo; ++ox) wacc += gr[ox] * xr[cmap[ox]];
                  }
                  if (gw) gw[wbase + ky * kw + kx] += wacc;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Max pooling. Ties route the gradient to the first maximal element.

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t kh, std::size_t kw, std::size_t sv,
                    std::size_t sh) {
  if (input.rank() != 4) throw ShapeError("maxpool2d: expected [N,C,H,W], got " + to_string(input.shape()));
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < kh || w < kw) throw ShapeError("maxpool2d: window larger than input " + to_string(input.shape()));
  const std::size_t ho = (h - kh) / sv + 1, wo = (w - kw) / sh + 1;
  if ((w - kw) % sh != 0)
    log::warn("maxpool2d: width " + std::to_string(w) + " not divisible by the window; trailing columns dropped");
  std::vector<T> y(planes * ho * wo);
  std::vector<std::size_t> arg(y.size());
  const T* xs = input.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = xs + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (oy * sv) * w + ox * sh;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t idx = (oy * sv + ky) * w + ox * sh + kx;
            if (xp[idx] > xp[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        y[o] = xp[best];
        arg[o] = p * h * w + best;
      }
  }
  if (NonSmoothRecorder* rec = NonSmoothRecorder::active())
    for (std::size_t a : arg) rec->mix(a);
  return make_result<T>({input.dim(0), input.dim(1), ho, wo}, std::move(y), "maxpool2d", {&input},
                        [input, arg = std::move(arg)](Node<T>& self) {
                          T* gx = grad_sink(input);
                          for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
  if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
    throw ShapeError("batchnorm2d: input " + to_string(x.shape()) + " with " +
                     std::to_string(gamma.numel()) + " channel parameters");
  const std::size_t n_batch = x.dim(0), chans = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t m = n_batch * plane;
  const T* xs = x.data().data();
  std::vector<T> y(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(chans);

  auto at = [&](std::size_t n, std::size_t c) { return (n * chans + c) * plane; };

  if (training) {
    if (m < 2)
      throw ShapeError("batchnorm2d: training mode needs at least 2 values per channel, got " +
                       std::to_string(m));
    for (std::size_t c = 0; c < chans; ++c) {
      double mean = 0;
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t i = 0; i < plane; ++i) mean += xs[at(n, c) + i];
      mean /= static_cast<double>(m);
      double var = 0;
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = xs[at(n, c) + i] - mean;
          var += d * d;
        }
      var /= static_cast<double>(m);
      const double istd = 1.0 / std::sqrt(var + eps);
      inv_std[c] = static_cast<T>(istd);
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = at(n, c) + i;
          xhat[k] = static_cast<T>((xs[k] - mean) * istd);
          y[k] = gamma.data()[c] * xhat[k] + beta.data()[c];
        }
      // Running statistics use the unbiased variance.
      auto rm = stats.running_mean.data();
      auto rv = stats.running_var.data();
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mean);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] +
                             momentum * var * static_cast<double>(m) / static_cast<double>(m - 1));
    }
  } else {
    for (std::size_t c = 0; c < chans; ++c) {
      const double mean = stats.running_mean.data()[c];
      const double istd = 1.0 / std::sqrt(static_cast<double>(stats.running_var.data()[c]) + eps);
      inv_std[c] = static_cast<T>(istd);
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = at(n, c) + i;
          xhat[k] = static_cast<T>((xs[k] - mean) * istd);
          y[k] = gamma.data()[c] * xhat[k] + beta.data()[c];
        }
    }
  }

  return make_result<T>(
      x.shape(), std::move(y), "batchnorm2d", {&x, &gamma, &beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), training, n_batch,
       chans, plane, m](Node<T>& self) {
        const T* g = self.grad.data();
        T* gx = grad_sink(x);
        T* gg = grad_sink(gamma);
        T* gb = grad_sink(beta);
        for (std::size_t c = 0; c < chans; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t k = (n * chans + c) * plane + i;
              sum_g += g[k];
              sum_gx += g[k] * xhat[k];
            }
          if (gg) gg[c] += static_cast<T>(sum_gx);
          if (gb) gb[c] += static_cast<T>(sum_g);
          if (!gx) continue;
          const double scale = static_cast<double>(gamma.data()[c]) * inv_std[c];
          const double md = static_cast<double>(m);
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t k = (n * chans + c) * plane + i;
              if (training) {
                gx[k] += static_cast<T>(scale * (g[k] - sum_g / md - xhat[k] * sum_gx / md));
              } else {
                gx[k] += static_cast<T>(scale * g[k]);
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors are scaled by 1/(1-p) so inference is identity.

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0) || p >= 1.0)
    throw ShapeError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < p ? T(0) : keep_scale;
    y[i] = x.data()[i] * mask[i];
  }
  return make_result<T>(x.shape(), std::move(y), "dropout", {&x},
                        [x, mask = std::move(mask)](Node<T>& self) {
                          T* gx = grad_sink(x);
                          for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
                        });
}

// ---------------------------------------------------------------------------
// Pose regression loss.

enum class LossSteps { kAll, kLast };

template <typename T>
struct LossTerms {
  Tensor<T> total;           // translation + rot_weight * rotation
  double translation = 0.0;  // mean squared translation residual
  double rotation = 0.0;     // mean squared rotation residual (unweighted)
};

// pred and target are [B, S, 6]: (tx, ty, tz, roll, pitch, yaw) per step.
// Each term is a mean over (B, steps, 3) entries.
template <typename T>
LossTerms<T> weighted_mse_loss(const Tensor<T>& pred, const Tensor<T>& target, double rot_weight,
                               LossSteps steps = LossSteps::kAll) {
  if (pred.shape() != target.shape() || pred.rank() != 3 || pred.dim(2) != 6)
    throw ShapeError("weighted_mse_loss: prediction " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  const std::size_t b = pred.dim(0), s = pred.dim(1);
  const std::size_t first_step = steps == LossSteps::kLast ? s - 1 : 0;
  const double count = static_cast<double>(b * (s - first_step) * 3);
  double trans = 0, rot = 0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = first_step; t < s; ++t)
      for (std::size_t k = 0; k < 6; ++k) {
        const std::size_t idx = (i * s + t) * 6 + k;
        const double r = static_cast<double>(pred.data()[idx]) - target.data()[idx];
        (k < 3 ? trans : rot) += r * r;
      }
  trans /= count;
  rot /= count;
  const double total = trans + rot_weight * rot;
  LossTerms<T> out;
  out.translation = trans;
  out.rotation = rot;
  out.total = make_result<T>(
      {1}, {static_cast<T>(total)}, "weighted_mse_loss", {&pred},
      [pred, target, rot_weight, b, s, first_step, count](Node<T>& self) {
        T* gp = grad_sink(pred);
        const double g0 = self.grad[0];
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t t = first_step; t < s; ++t)
            for (std::size_t k = 0; k < 6; ++k) {
              const std::size_t idx = (i * s + t) * 6 + k;
              const double r = static_cast<double>(pred.data()[idx]) - target.data()[idx];
              const double w = k < 3 ? 1.0 : rot_weight;
              gp[idx] += static_cast<T>(g0 * 2.0 * w * r / count);
            }
      });
  return out;
}

}  // namespace lorcon::nn
