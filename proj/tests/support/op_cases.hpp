#pragma once

// One finite-difference case per differentiable op, shared by the unit tests
// and the acceptance gate.

#include <string>
#include <vector>

#include "support/gradcheck.hpp"

namespace histovit::test_support {

template <typename T>
struct OpCase {
  std::string name;
  std::vector<Tensor<T>> inputs;
  LossBuilder<T> build;
};

template <typename T>
std::vector<OpCase<T>> op_cases(Rng& rng) {
  std::vector<OpCase<T>> c;
  auto r = [&](Shape s, double scale = 1.0) { return random_tensor<T>(std::move(s), rng, scale); };

  c.push_back({"matmul", {r({3, 4}), r({4, 2})},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, matmul(v[0], v[1])); }});
  c.push_back({"batched_matmul", {r({2, 3, 4}), r({2, 4, 2})},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, matmul(v[0], v[1])); }});
  c.push_back({"broadcast_matmul", {r({2, 3, 4}), r({4, 2})},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, matmul(v[0], v[1])); }});
  c.push_back({"transpose", {r({2, 3, 5})},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, transpose(v[0])); }});
  c.push_back({"reshape_add_mul_scale", {r({2, 6}), r({3, 4})}, [](GradTape<T>& t, const auto& v) {
                 auto a = reshape(v[0], Shape{3, 4});
                 return weighted_sum(t, scale(add(mul(a, v[1]), a), T(1.7)));
               }});
  c.push_back({"add_bias", {r({4, 3}), r({3})},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, add_bias(v[0], v[1])); }});

  // Inputs kept away from the kink so the central difference is valid.
  auto x = r({20});
  for (auto& v : x.data()) v = v < T(0) ? v - T(0.1) : v + T(0.1);
  c.push_back({"relu", {x}, [](GradTape<T>& t, const auto& v) { return weighted_sum(t, relu(v[0])); }});

  c.push_back({"gelu", {r({20}, 3.0)}, [](GradTape<T>& t, const auto& v) { return weighted_sum(t, gelu(v[0])); }});
  c.push_back({"sum_mean", {r({3, 3})},
               [](GradTape<T>&, const auto& v) { return add(sum(mul(v[0], v[0])), mean(v[0])); }});
  c.push_back({"softmax", {r({3, 5}, 2.0)},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, softmax_lastdim(v[0])); }});
  c.push_back({"layer_norm", {r({3, 6}), r({6}), r({6})},
               [](GradTape<T>& t, const auto& v) { return weighted_sum(t, layer_norm(v[0], v[1], v[2], T(1e-6))); }});
  c.push_back({"batch_norm_train", {r({5, 3}), r({3}), r({3})}, [](GradTape<T>& t, const auto& v) {
                 static Tensor<T> rm(Shape{3}), rv(Shape{3}, T(1));
                 BatchNormState<T> st{&rm, &rv, T(0.1), T(1e-5)};
                 return weighted_sum(t, batch_norm_1d(v[0], v[1], v[2], st, Mode::train));
               }});
  c.push_back({"batch_norm_eval", {r({2, 3}), r({3}), r({3})}, [](GradTape<T>& t, const auto& v) {
                 static Tensor<T> rm(Shape{3}, {T(0.1), T(-0.2), T(0.3)}), rv(Shape{3}, {T(0.5), T(2), T(1)});
                 BatchNormState<T> st{&rm, &rv, T(0.1), T(1e-5)};
                 return weighted_sum(t, batch_norm_1d(v[0], v[1], v[2], st, Mode::eval));
               }});
  c.push_back({"dropout_fixed_mask", {r({30})}, [](GradTape<T>& t, const auto& v) {
                 Rng mask_rng(8);
                 return weighted_sum(t, dropout(v[0], 0.4, Mode::train, mask_rng));
               }});
  c.push_back({"cross_entropy", {r({4, 3}, 2.0)}, [](GradTape<T>&, const auto& v) {
                 static const std::vector<int> labels{0, 2, 1, 2};
                 return cross_entropy(v[0], std::span<const int>(labels));
               }});
  c.push_back({"concat_slice_gather", {r({2, 3}), r({1, 3}), r({4, 3})}, [](GradTape<T>& t, const auto& v) {
                 static const std::vector<std::size_t> idx{3, 0, 3};
                 auto rows = gather_rows(v[2], std::span<const std::size_t>(idx));
                 auto cat = concat<T>({v[0], v[1], rows}, 0);
                 return weighted_sum(t, slice(concat<T>({cat, cat}, 1), 1, 2, 3));
               }});
  return c;
}

}  // namespace histovit::test_support
