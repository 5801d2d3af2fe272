#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/tape.hpp"
#include "histovit/tensor.hpp"

namespace histovit {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; only applied to parameters with decay == true
};

/// Moment estimates for one parameter.
template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t t = 0;
};

/// One Adam update of `param` from `grad`. The step counter is incremented
/// before bias correction, so the first call uses t = 1.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, const AdamOptions& opt, bool apply_decay) {
  if (grad.shape() != param.shape()) {
    throw ContractError("adam_step: gradient shape " + shape_str(grad.shape()) + " does not match parameter shape " +
                        shape_str(param.shape()));
  }
  if (state.m.shape() != param.shape()) {
    if (state.t != 0) throw ContractError("adam_step: moment shape does not match parameter shape");
    state.m = Tensor<T>(param.shape());
    state.v = Tensor<T>(param.shape());
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.learning_rate);
  const T decay = apply_decay ? static_cast<T>(1.0 - opt.learning_rate * opt.weight_decay) : T{1};
  auto p = param.data();
  auto g = grad.data();
  auto m = state.m.data();
  auto v = state.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * g[i];
    v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
    const T m_hat = static_cast<T>(m[i] / bc1);
    const T v_hat = static_cast<T>(v[i] / bc2);
    p[i] = p[i] * decay - lr * m_hat / (std::sqrt(v_hat) + static_cast<T>(opt.eps));
  }
}

/// Adam over a fixed list of parameters. Frozen parameters and buffers are
/// skipped entirely.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    states_.resize(params_.size());
  }

  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamOptions& options() const noexcept { return options_; }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      if (!p.trainable || p.buffer) continue;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      adam_step(p.value, p.grad, states_[i], options_, p.decay && options_.weight_decay > 0.0);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const AdamState<T>& state(std::size_t i) const { return states_.at(i); }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<AdamState<T>> states_;
  AdamOptions options_;
};

}  // namespace histovit
