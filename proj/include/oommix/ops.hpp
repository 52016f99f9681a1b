#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "oommix/graph.hpp"
#include "oommix/tensor.hpp"

// Differentiable primitives over Graph. Every function records its output
// with a backward rule and throws ShapeError on non-conforming operands.
namespace oommix::ops {

inline constexpr double kLogFloor = 1e-12;

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

inline std::size_t norm_axis(const char* op, std::ptrdiff_t axis,
                             std::size_t rank) {
  auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < -r || axis >= r) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " +
                       std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      shape_fail(op, "cannot broadcast " + to_string(a) + " with " +
                         to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each flat output index, the flat index into an operand of shape `in`.
inline std::vector<std::size_t> broadcast_map(const Shape& out,
                                              const Shape& in) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    std::size_t oi = k + (rank - in.size());
    stride[oi] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = cur;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) {
        cur += stride[d];
        break;
      }
      cur -= stride[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

/// C (+)= op(A) * op(B), with op(A) n x k and op(B) k x m, row-major.
template <typename T>
void gemm(T* c, const T* a, const T* b, std::size_t n, std::size_t k,
          std::size_t m, bool ta, bool tb, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  Eigen::Map<Mat> C(c, n, m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto mi = static_cast<Eigen::Index>(m);
  CMap A(a, ta ? ki : ni, ta ? ni : ki);
  CMap B(b, tb ? mi : ki, tb ? ki : mi);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      C.noalias() += lhs * rhs;
    } else {
      C.noalias() = lhs * rhs;
    }
  };
  if (!ta && !tb) run(A, B);
  else if (ta && !tb) run(A.transpose(), B);
  else if (!ta && tb) run(A, B.transpose());
  else run(A.transpose(), B.transpose());
}

template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(const char* op, Var<T> a, Var<T> b, Fwd f, DA dfa, DB dfb) {
  auto& g = a.graph();
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape == bv.shape) {
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return g.record(op, std::move(out), {a.id(), b.id()},
                    [ai = a.id(), bi = b.id(), dfa, dfb](Graph<T>& gr,
                                                         std::size_t self) {
                      auto dy = gr.grad(self);
                      const auto& x = gr.value(ai).data;
                      const auto& y = gr.value(bi).data;
                      if (gr.wants_grad(ai)) {
                        auto& ga = gr.grad_buffer(ai);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          ga[i] += dy[i] * dfa(x[i], y[i]);
                      }
                      if (gr.wants_grad(bi)) {
                        auto& gb = gr.grad_buffer(bi);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          gb[i] += dy[i] * dfb(x[i], y[i]);
                      }
                    });
  }
  Shape os = broadcast_shape(op, av.shape, bv.shape);
  // b matches the trailing axes of a: index b by i mod |b|.
  if (os == av.shape && bv.shape.size() <= av.shape.size() &&
      std::equal(bv.shape.begin(), bv.shape.end(),
                 av.shape.end() - static_cast<std::ptrdiff_t>(bv.shape.size()))) {
    const std::size_t nb = bv.size();
    Tensor<T> out(os);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i % nb]);
    return g.record(op, std::move(out), {a.id(), b.id()},
                    [ai = a.id(), bi = b.id(), nb, dfa, dfb](Graph<T>& gr,
                                                             std::size_t self) {
                      auto dy = gr.grad(self);
                      const auto& x = gr.value(ai).data;
                      const auto& y = gr.value(bi).data;
                      if (gr.wants_grad(ai)) {
                        auto& ga = gr.grad_buffer(ai);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          ga[i] += dy[i] * dfa(x[i], y[i % nb]);
                      }
                      if (gr.wants_grad(bi)) {
                        auto& gb = gr.grad_buffer(bi);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          gb[i % nb] += dy[i] * dfb(x[i], y[i % nb]);
                      }
                    });
  }
  auto ma = broadcast_map(os, av.shape);
  auto mb = broadcast_map(os, bv.shape);
  Tensor<T> out(os);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[ma[i]], bv[mb[i]]);
  return g.record(
      op, std::move(out), {a.id(), b.id()},
      [ai = a.id(), bi = b.id(), ma = std::move(ma), mb = std::move(mb), dfa,
       dfb](Graph<T>& gr, std::size_t self) {
        auto dy = gr.grad(self);
        const auto& x = gr.value(ai).data;
        const auto& y = gr.value(bi).data;
        if (gr.wants_grad(ai)) {
          auto& ga = gr.grad_buffer(ai);
          for (std::size_t i = 0; i < dy.size(); ++i)
            ga[ma[i]] += dy[i] * dfa(x[ma[i]], y[mb[i]]);
        }
        if (gr.wants_grad(bi)) {
          auto& gb = gr.grad_buffer(bi);
          for (std::size_t i = 0; i < dy.size(); ++i)
            gb[mb[i]] += dy[i] * dfb(x[ma[i]], y[mb[i]]);
        }
      });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const char* op, Var<T> x, Fwd f, Deriv df) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  // df receives (input, output).
  return x.graph().record(op, std::move(out), {x.id()},
                          [xi = x.id(), df](Graph<T>& gr, std::size_t self) {
                            auto dy = gr.grad(self);
                            const auto& in = gr.value(xi).data;
                            const auto& y = gr.value(self).data;
                            auto& gx = gr.grad_buffer(xi);
                            for (std::size_t i = 0; i < dy.size(); ++i)
                              gx[i] += dy[i] * df(in[i], y[i]);
                          });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

/// a*x + b, constants a and b.
template <typename T>
Var<T> affine(Var<T> x, T a, T b = T(0)) {
  return detail::unary<T>(
      "affine", x, [a, b](T v) { return a * v + b; },
      [a](T, T) { return a; });
}

template <typename T>
Var<T> scale(Var<T> x, T a) {
  return affine(x, a, T(0));
}

/// Scalar-affine combine a*X + b*Y of equal-shaped inputs.
template <typename T>
Var<T> combine(T a, Var<T> x, T b, Var<T> y) {
  if (x.shape() != y.shape()) {
    detail::shape_fail("combine", "shapes " + to_string(x.shape()) + " and " +
                                      to_string(y.shape()) + " differ");
  }
  return detail::binary<T>(
      "combine", x, y, [a, b](T u, T v) { return a * u + b * v; },
      [a](T, T) { return a; }, [b](T, T) { return b; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// Natural log with the argument floored at 1e-12; zero gradient below it.
template <typename T>
Var<T> log(Var<T> x) {
  const T floor = static_cast<T>(kLogFloor);
  return detail::unary<T>(
      "log", x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T v, T) { return v > floor ? T(1) / v : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  return detail::unary<T>(
      "gelu", x,
      [](T v) {
        return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
      },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) *
                      std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        return cdf + v * pdf;
      });
}

/// Matrix product over the last two axes. `b` is either rank 2 (shared
/// across a's leading axes) or has a's rank with identical leading axes.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    detail::shape_fail("matmul", "operands must have rank >= 2, got " +
                                     to_string(as) + " and " + to_string(bs));
  }
  const bool shared_b = bs.size() == 2;
  if (!shared_b &&
      (bs.size() != as.size() ||
       !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    detail::shape_fail("matmul", "batch axes of " + to_string(as) + " and " +
                                     to_string(bs) + " differ");
  }
  const std::size_t ar = as[as.size() - 2], ac = as.back();
  const std::size_t br = bs[bs.size() - 2], bc = bs.back();
  const std::size_t n = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, m = trans_b ? br : bc;
  if (k != kb) {
    detail::shape_fail("matmul", "inner dimensions of " + to_string(as) +
                                     (trans_a ? "^T" : "") + " and " +
                                     to_string(bs) + (trans_b ? "^T" : "") +
                                     " differ");
  }
  std::size_t batch = numel(as) / (ar * ac);
  // A shared right operand and untransposed left collapse into one product.
  std::size_t rows = n;
  if (shared_b && !trans_a) {
    rows = n * batch;
    batch = 1;
  }
  Shape os(as.begin(), as.end() - 2);
  os.push_back(n);
  os.push_back(m);
  Tensor<T> out(os);
  const std::size_t a_step = ar * ac, b_step = shared_b ? 0 : br * bc;
  const std::size_t c_step = rows * m;
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(out.data.data() + i * c_step, a.value().data.data() + i * a_step,
                 b.value().data.data() + i * b_step, rows, k, m, trans_a,
                 trans_b, false);
  }
  return a.graph().record(
      "matmul", std::move(out), {a.id(), b.id()},
      [ai = a.id(), bi = b.id(), trans_a, trans_b, batch, rows, k, m, a_step,
       b_step, c_step](Graph<T>& gr, std::size_t self) {
        const T* dc = gr.grad(self).data();
        const T* av = gr.value(ai).data.data();
        const T* bv = gr.value(bi).data.data();
        if (gr.wants_grad(ai)) {
          T* da = gr.grad_buffer(ai).data();
          for (std::size_t i = 0; i < batch; ++i) {
            if (!trans_a) {
              detail::gemm(da + i * a_step, dc + i * c_step, bv + i * b_step,
                           rows, m, k, false, !trans_b, true);
            } else {
              detail::gemm(da + i * a_step, bv + i * b_step, dc + i * c_step,
                           k, m, rows, trans_b, true, true);
            }
          }
        }
        if (gr.wants_grad(bi)) {
          T* db = gr.grad_buffer(bi).data();
          for (std::size_t i = 0; i < batch; ++i) {
            if (!trans_b) {
              detail::gemm(db + i * b_step, av + i * a_step, dc + i * c_step,
                           k, rows, m, !trans_a, false, true);
            } else {
              detail::gemm(db + i * b_step, dc + i * c_step, av + i * a_step,
                           m, rows, k, true, trans_a, true);
            }
          }
        }
      });
}

template <typename T>
Var<T> softmax(Var<T> x, std::ptrdiff_t axis = -1) {
  const std::size_t ax = detail::norm_axis("softmax", axis, x.shape().size());
  const auto sp = detail::split_at(x.shape(), ax);
  const auto& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < sp.len; ++j)
        mx = std::max(mx, xv[base + j * sp.inner]);
      T sum = 0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        T e = std::exp(xv[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= sum;
    }
  }
  return x.graph().record(
      "softmax", std::move(out), {x.id()},
      [xi = x.id(), sp](Graph<T>& gr, std::size_t self) {
        auto dy = gr.grad(self);
        const auto& y = gr.value(self).data;
        auto& gx = gr.grad_buffer(xi);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            T dot = 0;
            for (std::size_t j = 0; j < sp.len; ++j) {
              auto idx = base + j * sp.inner;
              dot += dy[idx] * y[idx];
            }
            for (std::size_t j = 0; j < sp.len; ++j) {
              auto idx = base + j * sp.inner;
              gx[idx] += y[idx] * (dy[idx] - dot);
            }
          }
        }
      });
}

/// Normalizes over the last axis, then applies gain and bias of that width.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& xs = x.shape();
  const std::size_t d = xs.back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    detail::shape_fail("layer_norm", "gain " + to_string(gain.shape()) +
                                         " / bias " + to_string(bias.shape()) +
                                         " do not match last axis of " +
                                         to_string(xs));
  }
  const std::size_t rows = x.size() / d;
  const auto& xv = x.value().data;
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  std::vector<T> xhat(x.size()), rstd(rows);
  Tensor<T> out(xs);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      T h = (row[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.graph().record(
      "layer_norm", std::move(out), {x.id(), gain.id(), bias.id()},
      [xi = x.id(), gi = gain.id(), bi = bias.id(), d, rows,
       xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& gr,
                                                       std::size_t self) {
        auto dy = gr.grad(self);
        const auto& gv = gr.value(gi).data;
        if (gr.wants_grad(gi) || gr.wants_grad(bi)) {
          auto& gg = gr.grad_buffer(gi);
          auto& gb = gr.grad_buffer(bi);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += dy[r * d + j] * xhat[r * d + j];
              gb[j] += dy[r * d + j];
            }
          }
        }
        if (!gr.wants_grad(xi)) return;
        auto& gx = gr.grad_buffer(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            T dh = dy[r * d + j] * gv[j];
            m1 += dh;
            m2 += dh * xhat[r * d + j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            T dh = dy[r * d + j] * gv[j];
            gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
          }
        }
      });
}

template <typename T>
Var<T> sum(Var<T> x, std::ptrdiff_t axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis("sum", axis, x.shape().size());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape os = x.shape();
  if (keepdim || os.size() == 1) {
    os[ax] = 1;
  } else {
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto& xv = x.value();
  Tensor<T> out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.len; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += xv[(o * sp.len + j) * sp.inner + in];
  return x.graph().record("sum", std::move(out), {x.id()},
                          [xi = x.id(), sp](Graph<T>& gr, std::size_t self) {
                            auto dy = gr.grad(self);
                            auto& gx = gr.grad_buffer(xi);
                            for (std::size_t o = 0; o < sp.outer; ++o)
                              for (std::size_t j = 0; j < sp.len; ++j)
                                for (std::size_t in = 0; in < sp.inner; ++in)
                                  gx[(o * sp.len + j) * sp.inner + in] +=
                                      dy[o * sp.inner + in];
                          });
}

template <typename T>
Var<T> mean(Var<T> x, std::ptrdiff_t axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis("mean", axis, x.shape().size());
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.shape()[ax]));
}

/// Mean of every element, as a shape-[1] scalar.
template <typename T>
Var<T> mean_all(Var<T> x) {
  Shape flat{x.size()};
  auto& g = x.graph();
  Tensor<T> v(flat, x.value().data);
  auto r = g.record("flatten", std::move(v), {x.id()},
                    [xi = x.id()](Graph<T>& gr, std::size_t self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_buffer(xi);
                      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
                    });
  return mean(r, 0);
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (numel(shape) != x.size()) {
    detail::shape_fail("reshape", "cannot view " + to_string(x.shape()) +
                                      " as " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.value().data);
  return x.graph().record("reshape", std::move(out), {x.id()},
                          [xi = x.id()](Graph<T>& gr, std::size_t self) {
                            auto dy = gr.grad(self);
                            auto& gx = gr.grad_buffer(xi);
                            for (std::size_t i = 0; i < dy.size(); ++i)
                              gx[i] += dy[i];
                          });
}

template <typename T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& perm) {
  const auto& xs = x.shape();
  const std::size_t rank = xs.size();
  std::vector<bool> seen(rank, false);
  if (perm.size() != rank) {
    detail::shape_fail("permute", "permutation length " +
                                      std::to_string(perm.size()) +
                                      " does not match rank of " +
                                      to_string(xs));
  }
  for (auto p : perm) {
    if (p >= rank || seen[p]) detail::shape_fail("permute", "invalid axes");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * xs[d + 1];
  Shape os(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    os[d] = xs[perm[d]];
    stride[d] = in_stride[perm[d]];
  }
  // src[i] = flat input index of flat output index i.
  const std::size_t n = x.size();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = cur;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < os[d]) {
        cur += stride[d];
        break;
      }
      cur -= stride[d] * (os[d] - 1);
      idx[d] = 0;
    }
  }
  Tensor<T> out(os);
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  return x.graph().record("permute", std::move(out), {x.id()},
                          [xi = x.id(), src = std::move(src)](Graph<T>& gr,
                                                              std::size_t self) {
                            auto dy = gr.grad(self);
                            auto& gx = gr.grad_buffer(xi);
                            for (std::size_t i = 0; i < dy.size(); ++i)
                              gx[src[i]] += dy[i];
                          });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::ptrdiff_t axis = -1) {
  if (xs.empty()) detail::shape_fail("concat", "no inputs");
  const std::size_t rank = xs[0].shape().size();
  const std::size_t ax = detail::norm_axis("concat", axis, rank);
  Shape os = xs[0].shape();
  os[ax] = 0;
  for (const auto& v : xs) {
    const auto& s = v.shape();
    bool ok = s.size() == rank;
    for (std::size_t d = 0; ok && d < rank; ++d)
      ok = d == ax || s[d] == xs[0].shape()[d];
    if (!ok) {
      detail::shape_fail("concat", "shape " + to_string(s) +
                                       " does not conform to " +
                                       to_string(xs[0].shape()));
    }
    os[ax] += s[ax];
  }
  const auto sp = detail::split_at(os, ax);
  Tensor<T> out(os);
  std::vector<std::size_t> ids, offsets, lens;
  std::size_t off = 0;
  for (const auto& v : xs) {
    const std::size_t len = v.shape()[ax] * sp.inner;
    const auto& vv = v.value().data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(vv.begin() + static_cast<std::ptrdiff_t>(o * len), len,
                  out.data.begin() +
                      static_cast<std::ptrdiff_t>(o * sp.len * sp.inner + off));
    ids.push_back(v.id());
    offsets.push_back(off);
    lens.push_back(len);
    off += len;
  }
  auto& g = xs[0].graph();
  return g.record("concat", std::move(out), ids,
                  [ids, offsets, lens, sp](Graph<T>& gr, std::size_t self) {
                    auto dy = gr.grad(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!gr.wants_grad(ids[k])) continue;
                      auto& gx = gr.grad_buffer(ids[k]);
                      for (std::size_t o = 0; o < sp.outer; ++o)
                        for (std::size_t j = 0; j < lens[k]; ++j)
                          gx[o * lens[k] + j] +=
                              dy[o * sp.len * sp.inner + offsets[k] + j];
                    }
                  });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Var<T> slice(Var<T> x, std::ptrdiff_t axis, std::size_t begin,
             std::size_t end) {
  const std::size_t ax = detail::norm_axis("slice", axis, x.shape().size());
  const auto sp = detail::split_at(x.shape(), ax);
  if (begin >= end || end > sp.len) {
    detail::shape_fail("slice", "range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) +
                                    ") invalid for axis of length " +
                                    std::to_string(sp.len) + " in " +
                                    to_string(x.shape()));
  }
  Shape os = x.shape();
  os[ax] = end - begin;
  const std::size_t len = (end - begin) * sp.inner;
  Tensor<T> out(os);
  const auto& xv = x.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      out[o * len + j] = xv[(o * sp.len + begin) * sp.inner + j];
  return x.graph().record(
      "slice", std::move(out), {x.id()},
      [xi = x.id(), sp, begin, len](Graph<T>& gr, std::size_t self) {
        auto dy = gr.grad(self);
        auto& gx = gr.grad_buffer(xi);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < len; ++j)
            gx[(o * sp.len + begin) * sp.inner + j] += dy[o * len + j];
      });
}

/// Gathers slices of `table` along its first axis (embedding lookup).
template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& ids) {
  const auto& ts = table.shape();
  if (ids.empty()) detail::shape_fail("gather_rows", "no indices");
  const std::size_t row = table.size() / ts[0];
  for (auto id : ids) {
    if (id >= ts[0]) {
      detail::shape_fail("gather_rows", "index " + std::to_string(id) +
                                            " out of range for table " +
                                            to_string(ts));
    }
  }
  Shape os = ts;
  os[0] = ids.size();
  Tensor<T> out(os);
  const auto& tv = table.value().data;
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * row), row,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * row));
  return table.graph().record(
      "gather_rows", std::move(out), {table.id()},
      [ti = table.id(), ids, row](Graph<T>& gr, std::size_t self) {
        auto dy = gr.grad(self);
        auto& gt = gr.grad_buffer(ti);
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < row; ++j)
            gt[ids[i] * row + j] += dy[i * row + j];
      });
}

/// Sets entries to `value` wherever the broadcast `mask` is zero.
template <typename T>
Var<T> masked_fill(Var<T> x, const Tensor<T>& mask, T value) {
  Shape os = detail::broadcast_shape("masked_fill", x.shape(), mask.shape);
  if (os != x.shape()) {
    detail::shape_fail("masked_fill", "mask " + to_string(mask.shape) +
                                          " does not broadcast to " +
                                          to_string(x.shape()));
  }
  auto map = detail::broadcast_map(os, mask.shape);
  std::vector<std::uint8_t> keep(x.size());
  Tensor<T> out(os);
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    keep[i] = mask[map[i]] != T(0);
    out[i] = keep[i] ? xv[i] : value;
  }
  return x.graph().record("masked_fill", std::move(out), {x.id()},
                          [xi = x.id(), keep = std::move(keep)](
                              Graph<T>& gr, std::size_t self) {
                            auto dy = gr.grad(self);
                            auto& gx = gr.grad_buffer(xi);
                            for (std::size_t i = 0; i < dy.size(); ++i)
                              if (keep[i]) gx[i] += dy[i];
                          });
}

/// Inverted dropout. Identity (same node) when not training or p == 0.
template <typename T, typename Rng>
Var<T> dropout(Var<T> x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("dropout: probability must lie in [0, 1)");
  }
  if (!train || p == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<T> factor(x.size());
  for (auto& f : factor) f = keep(rng) ? scale : T(0);
  Tensor<T> out(x.shape());
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor[i];
  return x.graph().record("dropout", std::move(out), {x.id()},
                          [xi = x.id(), factor = std::move(factor)](
                              Graph<T>& gr, std::size_t self) {
                            auto dy = gr.grad(self);
                            auto& gx = gr.grad_buffer(xi);
                            for (std::size_t i = 0; i < dy.size(); ++i)
                              gx[i] += dy[i] * factor[i];
                          });
}

/// Mean over rows of KL(target || pred) for [N, C] probability rows, with
/// 0 log 0 = 0 and pred floored at 1e-12. Differentiable in both inputs.
template <typename T>
Var<T> kl_div(Var<T> pred, Var<T> target) {
  using A = std::common_type_t<T, double>;
  const auto& ps = pred.shape();
  if (ps != target.shape() || ps.empty()) {
    detail::shape_fail("kl_div", "pred " + to_string(ps) + " and target " +
                                     to_string(target.shape()) + " differ");
  }
  const std::size_t c = ps.back();
  const std::size_t rows = pred.size() / c;
  const auto& pv = pred.value().data;
  const auto& tv = target.value().data;
  const double tol = sizeof(T) >= 8 ? 1e-6 : 1e-5;
  for (std::size_t r = 0; r < rows; ++r) {
    A sp = 0, st = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (pv[r * c + j] < 0 || tv[r * c + j] < 0) {
        throw std::invalid_argument("kl_div: negative probability");
      }
      sp += pv[r * c + j];
      st += tv[r * c + j];
    }
    if (std::abs(static_cast<double>(sp) - 1.0) > tol || std::abs(static_cast<double>(st) - 1.0) > tol) {
      throw std::invalid_argument("kl_div: row " + std::to_string(r) +
                                  " is not normalized");
    }
  }
  A total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const A t = tv[i];
    if (t > 0) total += t * (std::log(t) - std::log(std::max<A>(pv[i], A(kLogFloor))));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<A>(rows)));
  return pred.graph().record(
      "kl_div", std::move(out), {pred.id(), target.id()},
      [pi = pred.id(), ti = target.id(), rows](Graph<T>& gr, std::size_t self) {
        const A dy = gr.grad(self)[0] / static_cast<A>(rows);
        const auto& p = gr.value(pi).data;
        const auto& t = gr.value(ti).data;
        if (gr.wants_grad(pi)) {
          auto& gp = gr.grad_buffer(pi);
          for (std::size_t i = 0; i < p.size(); ++i)
            if (p[i] > kLogFloor) gp[i] += static_cast<T>(-dy * t[i] / p[i]);
        }
        if (gr.wants_grad(ti)) {
          auto& gt = gr.grad_buffer(ti);
          for (std::size_t i = 0; i < t.size(); ++i) {
            const A tc = std::max<A>(t[i], A(kLogFloor));
            const A d = std::log(tc) + (t[i] > kLogFloor ? 1.0 : 0.0) -
                             std::log(std::max<A>(p[i], A(kLogFloor)));
            gt[i] += static_cast<T>(dy * d);
          }
        }
      });
}

/// Mean binary cross entropy of scores (any shape, N elements) against 0/1
/// labels, scores clamped to [1e-12, 1 - 1e-12].
template <typename T>
Var<T> bce(Var<T> score, const std::vector<T>& labels) {
  using A = std::common_type_t<T, double>;
  if (score.size() != labels.size()) {
    detail::shape_fail("bce", "score " + to_string(score.shape()) + " vs " +
                                  std::to_string(labels.size()) + " labels");
  }
  const auto& sv = score.value().data;
  A total = 0;
  for (std::size_t i = 0; i < sv.size(); ++i) {
    const A s = std::clamp<A>(sv[i], A(kLogFloor), A(1) - A(kLogFloor));
    const A y = labels[i];
    total += -y * std::log(s) - (1.0 - y) * std::log(1.0 - s);
  }
  const A n = static_cast<A>(sv.size());
  return score.graph().record(
      "bce", Tensor<T>::scalar(static_cast<T>(total / n)), {score.id()},
      [si = score.id(), labels, n](Graph<T>& gr, std::size_t self) {
        const A dy = gr.grad(self)[0] / n;
        const auto& s = gr.value(si).data;
        auto& gs = gr.grad_buffer(si);
        for (std::size_t i = 0; i < s.size(); ++i) {
          const A v = s[i];
          if (v <= kLogFloor || v >= 1.0 - kLogFloor) continue;
          const A y = labels[i];
          gs[i] += static_cast<T>(dy * (-y / v + (1.0 - y) / (1.0 - v)));
        }
      });
}

}  // namespace oommix::ops
