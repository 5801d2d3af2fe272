#pragma once

// Differentiable tensor operations recorded on a GradTape.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/rng.hpp"
#include "histovit/tape.hpp"
#include "histovit/tensor.hpp"

namespace histovit {

enum class Mode { train, eval };

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n], with optional transposes of the stored operands.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == T{0}) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

inline std::size_t leading(const Shape& s, std::size_t trailing) {
  std::size_t out = 1;
  for (std::size_t i = 0; i + trailing < s.size(); ++i) out *= s[i];
  return out;
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

/// Matrix product over the last two axes. `a` is [..., m, k]; `b` is either
/// [k, n] (broadcast over the leading axes of `a`) or [..., k, n] with the same
/// leading axes.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  const auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const bool broadcast_b = bs.size() == 2;
  if (!broadcast_b && !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) throw mismatch();
  const std::size_t batch = detail::leading(as, 2);

  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out(os);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm(av.data().data() + bi * m * k, bv.data().data() + (broadcast_b ? 0 : bi * k * n),
                 out.data().data() + bi * m * n, m, k, n, false, false, false);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n, batch, broadcast_b](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const Tensor<T>& av = t.value(a.id);
    const Tensor<T>& bv = t.value(b.id);
    if (t.needs_grad(a)) {
      Tensor<T> ga(av.shape());
      for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::gemm(g.data().data() + bi * m * n, bv.data().data() + (broadcast_b ? 0 : bi * k * n),
                     ga.data().data() + bi * m * k, m, n, k, false, true, false);
      }
      t.accumulate(a, ga);
    }
    if (t.needs_grad(b)) {
      Tensor<T> gb(bv.shape());
      for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::gemm(av.data().data() + bi * m * k, g.data().data() + bi * m * n,
                     gb.data().data() + (broadcast_b ? 0 : bi * k * n), k, m, n, true, false, broadcast_b);
      }
      t.accumulate(b, gb);
    }
  });
}

/// Swaps the last two axes.
template <typename T>
Var<T> transpose(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const Shape& s = xv.shape();
  if (s.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(s));
  const std::size_t r = s[s.size() - 2], c = s.back(), batch = detail::leading(s, 2);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  auto swap_into = [r, c, batch](const Tensor<T>& src, Tensor<T>& dst, std::size_t rows, std::size_t cols) {
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* in = src.data().data() + bi * r * c;
      T* o = dst.data().data() + bi * r * c;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) o[j * rows + i] = in[i * cols + j];
    }
  };
  Tensor<T> out(os);
  swap_into(xv, out, r, c);
  return x.tape->record(std::move(out), {x}, [x, r, c, swap_into](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gx(t.value(x.id).shape());
    swap_into(g, gx, c, r);
    t.accumulate(x, gx);
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    t.accumulate(x, g.reshaped(t.value(x.id).shape()));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

/// Elementwise (Hadamard) product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const auto av = t.value(a.id).data();
    const auto bv = t.value(b.id).data();
    if (t.needs_grad(a)) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * bv[i];
      t.accumulate(a, ga);
    }
    if (t.needs_grad(b)) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * av[i];
      t.accumulate(b, gb);
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  return x.tape->record(std::move(out), {x}, [x, factor](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gx = g;
    for (auto& v : gx.data()) v *= factor;
    t.accumulate(x, gx);
  });
}

/// x[..., n] + bias[n].
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  if (xv.rank() < 1 || bv.rank() != 1 || bv.size() != xv.shape().back()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  }
  const std::size_t n = bv.size();
  Tensor<T> out = xv;
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % n];
  return x.tape->record(std::move(out), {x, bias}, [x, bias, n](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    t.accumulate(x, g);
    if (t.needs_grad(bias)) {
      Tensor<T> gb(Shape{n});
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      t.accumulate(bias, gb);
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return x.tape->record(std::move(out), {x}, [x](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const auto xv = t.value(x.id).data();
    Tensor<T> gx(g.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = xv[i] > T{0} ? g[i] : T{0};
    t.accumulate(x, gx);
  });
}

/// GELU, tanh approximation.
template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = T{0.5} * v * (T{1} + std::tanh(c * (v + a * v * v * v)));
  return x.tape->record(std::move(out), {x}, [x](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const auto xv = t.value(x.id).data();
    Tensor<T> gx(g.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(c * (v + a * v * v * v));
      const T d = T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * c * (T{1} + T{3} * a * v * v);
      gx[i] = g[i] * d;
    }
    t.accumulate(x, gx);
  });
}

/// Sum of all elements, as a rank-0 tensor.
template <typename T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape->record(Tensor<T>::scalar(s), {x}, [x](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    t.accumulate(x, Tensor<T>(t.value(x.id).shape(), g.item()));
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(n));
}

/// Softmax over the last axis, computed with max-subtraction.
template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 1 || xv.shape().back() == 0) {
    throw DimensionError("softmax_lastdim: empty last dimension in " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data().data() + r * n;
    T* o = out.data().data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s{0};
    for (std::size_t j = 0; j < n; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  return x.tape->record(std::move(out), {x}, [x](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
    const std::size_t n = y.shape().back(), rows = y.size() / n;
    Tensor<T> gx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.data().data() + r * n;
      const T* gr = g.data().data() + r * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = yr[j] * (gr[j] - dot);
    }
    t.accumulate(x, gx);
  });
}

/// Normalises over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 1) throw DimensionError("layer_norm on a rank-0 tensor");
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  if (gamma.value().shape() != Shape{n} || beta.value().shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma/beta must have shape [" + std::to_string(n) + "]");
  }
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(rows);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data().data() + r * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (in[j] - mu) * rstd[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, rows](
                            GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const auto gv = t.value(gamma.id).data();
    if (t.needs_grad(x)) {
      Tensor<T> gx(xhat.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d{0}, mean_dh{0};
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g[r * n + j] * gv[j];
          mean_d += d;
          mean_dh += d * xhat[r * n + j];
        }
        mean_d /= static_cast<T>(n);
        mean_dh /= static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g[r * n + j] * gv[j];
          gx[r * n + j] = rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dh);
        }
      }
      t.accumulate(x, gx);
    }
    if (t.needs_grad(gamma) || t.needs_grad(beta)) {
      Tensor<T> gg(Shape{n}), gb(Shape{n});
      for (std::size_t i = 0; i < g.size(); ++i) {
        gg[i % n] += g[i] * xhat[i];
        gb[i % n] += g[i];
      }
      t.accumulate(gamma, gg);
      t.accumulate(beta, gb);
    }
  });
}

/// Running statistics of a batch-norm layer. Updated in train mode only.
template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

/// Batch normalisation over the batch axis of x[B x F]. Train mode uses the
/// biased batch variance for normalisation and folds the unbiased variance
/// into the running estimate.
template <typename T>
Var<T> batch_norm_1d(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormState<T>& state, Mode mode) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("batch_norm_1d expects [B x F], got " + shape_str(xv.shape()));
  const std::size_t b = xv.dim(0), f = xv.dim(1);
  if (gamma.value().shape() != Shape{f} || beta.value().shape() != Shape{f}) {
    throw DimensionError("batch_norm_1d: gamma/beta must have shape [" + std::to_string(f) + "]");
  }
  if (!state.running_mean || !state.running_var || state.running_mean->shape() != Shape{f} ||
      state.running_var->shape() != Shape{f}) {
    throw DimensionError("batch_norm_1d: running statistics must have shape [" + std::to_string(f) + "]");
  }
  if (!(state.eps > T{0})) throw ConfigError("batch_norm_1d: eps must be positive");
  if (mode == Mode::train && b < 2) throw ContractError("batch_norm_1d: train mode needs a batch of at least 2");

  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  std::vector<T> mu(f), rstd(f);
  if (mode == Mode::train) {
    for (std::size_t j = 0; j < f; ++j) {
      T m{0};
      for (std::size_t i = 0; i < b; ++i) m += xv.at(i, j);
      m /= static_cast<T>(b);
      T v{0};
      for (std::size_t i = 0; i < b; ++i) v += (xv.at(i, j) - m) * (xv.at(i, j) - m);
      const T biased = v / static_cast<T>(b);
      const T unbiased = v / static_cast<T>(b - 1);
      mu[j] = m;
      rstd[j] = T{1} / std::sqrt(biased + state.eps);
      auto& rm = (*state.running_mean)[j];
      auto& rv = (*state.running_var)[j];
      rm = (T{1} - state.momentum) * rm + state.momentum * m;
      rv = (T{1} - state.momentum) * rv + state.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = (*state.running_mean)[j];
      rstd[j] = T{1} / std::sqrt((*state.running_var)[j] + state.eps);
    }
  }
  Tensor<T> xhat(xv.shape()), out(xv.shape());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const T h = (xv.at(i, j) - mu[j]) * rstd[j];
      xhat.at(i, j) = h;
      out.at(i, j) = h * gv[j] + bv[j];
    }
  }
  const bool batch_stats = mode == Mode::train;
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), b, f, batch_stats](
                            GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const auto gv = t.value(gamma.id).data();
    if (t.needs_grad(x)) {
      Tensor<T> gx(xhat.shape());
      for (std::size_t j = 0; j < f; ++j) {
        if (!batch_stats) {
          for (std::size_t i = 0; i < b; ++i) gx.at(i, j) = g.at(i, j) * gv[j] * rstd[j];
          continue;
        }
        T mean_d{0}, mean_dh{0};
        for (std::size_t i = 0; i < b; ++i) {
          const T d = g.at(i, j) * gv[j];
          mean_d += d;
          mean_dh += d * xhat.at(i, j);
        }
        mean_d /= static_cast<T>(b);
        mean_dh /= static_cast<T>(b);
        for (std::size_t i = 0; i < b; ++i) {
          gx.at(i, j) = rstd[j] * (g.at(i, j) * gv[j] - mean_d - xhat.at(i, j) * mean_dh);
        }
      }
      t.accumulate(x, gx);
    }
    if (t.needs_grad(gamma) || t.needs_grad(beta)) {
      Tensor<T> gg(Shape{f}), gb(Shape{f});
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < f; ++j) {
          gg[j] += g.at(i, j) * xhat.at(i, j);
          gb[j] += g.at(i, j);
        }
      }
      t.accumulate(gamma, gg);
      t.accumulate(beta, gb);
    }
  });
}

/// Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the
/// identity. The mask is drawn from `rng` and reused by backward.
template <typename T>
Var<T> dropout(Var<T> x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.value().shape());
  for (auto& m : mask.data()) m = rng.uniform() < p ? T{0} : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->record(std::move(out), {x}, [x, mask = std::move(mask)](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask[i];
    t.accumulate(x, gx);
  });
}

/// Mean categorical cross-entropy of logits[B x C] against integer labels,
/// fused with a log-sum-exp softmax.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2) throw DimensionError("cross_entropy expects logits [B x C], got " + shape_str(z.shape()));
  const std::size_t b = z.dim(0), c = z.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(b));
  }
  if (b == 0 || c == 0) throw DimensionError("cross_entropy on an empty batch");
  Tensor<T> probs(z.shape());
  T loss{0};
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const T* row = z.data().data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs.at(i, j) = std::exp(row[j] - lse);
    loss += lse - row[y];
  }
  loss /= static_cast<T>(b);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(Tensor<T>::scalar(loss), {logits},
                             [logits, probs = std::move(probs), ys = std::move(ys), b, c](
                                 GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gz = probs;
    const T s = g.item() / static_cast<T>(b);
    for (std::size_t i = 0; i < b; ++i) {
      gz.at(i, static_cast<std::size_t>(ys[i])) -= T{1};
      for (std::size_t j = 0; j < c; ++j) gz.at(i, j) *= s;
    }
    t.accumulate(logits, gz);
  });
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size());
  Shape os = first;
  os[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    extents.push_back(s[ax]);
    os[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  Tensor<T> out(os);
  const std::size_t out_row = os[ax] * inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().data();
    const std::size_t chunk = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data().data() + o * out_row + offset);
    }
    offset += chunk;
  }
  return parts.front().tape->record(std::move(out), parts,
                                    [parts, extents, outer, inner, out_row](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::size_t chunk = extents[k] * inner;
      if (t.needs_grad(parts[k])) {
        Tensor<T> gp(t.value(parts[k].id).shape());
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(g.data().data() + o * out_row + offset, chunk, gp.data().data() + o * chunk);
        }
        t.accumulate(parts[k], gp);
      }
      offset += chunk;
    }
  });
}

/// Elements [start, start + length) along `axis`.
template <typename T>
Var<T> slice(Var<T> x, int axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  const std::size_t ax = detail::normalize_axis(axis, s.size());
  if (start + length > s[ax]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of range for " +
                         shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[ax] = length;
  const std::size_t in_row = s[ax] * inner, chunk = length * inner, off = start * inner;
  Tensor<T> out(os);
  const auto src = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(src.data() + o * in_row + off, chunk, out.data().data() + o * chunk);
  return x.tape->record(std::move(out), {x}, [x, outer, in_row, chunk, off](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gx(t.value(x.id).shape());
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(g.data().data() + o * chunk, chunk, gx.data().data() + o * in_row + off);
    }
    t.accumulate(x, gx);
  });
}

/// Embedding lookup: rows `indices` of table[V x D], giving [n x D].
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> indices) {
  const Tensor<T>& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows expects a [V x D] table, got " + shape_str(tv.shape()));
  const std::size_t v = tv.dim(0), d = tv.dim(1);
  Tensor<T> out(Shape{indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v) {
      throw IndexError("gather_rows: row " + std::to_string(indices[i]) + " outside table of " + std::to_string(v));
    }
    std::copy_n(tv.data().data() + indices[i] * d, d, out.data().data() + i * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape->record(std::move(out), {table}, [table, idx = std::move(idx), d](GradTape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gt(t.value(table.id).shape());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
    }
    t.accumulate(table, gt);
  });
}

}  // namespace histovit
