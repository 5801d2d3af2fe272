// Finite-difference checks for every differentiable op at 32 and 64 bits.

#include <gtest/gtest.h>

#include "support/op_cases.hpp"

using namespace histovit;
using histovit::test_support::GradTolerance;

template <typename T>
class OpGradient : public ::testing::Test {};

using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(OpGradient, Precisions);

TYPED_TEST(OpGradient, EveryOpMatchesFiniteDifferences) {
  using T = TypeParam;
  Rng rng(1234);
  const auto cases = histovit::test_support::op_cases<T>(rng);
  EXPECT_EQ(cases.size(), 16u);
  for (const auto& c : cases) {
    const auto res = histovit::test_support::check_gradients<T>(c.inputs, c.build);
    EXPECT_LT(res.max_rel_error, GradTolerance<T>::max_rel_error) << c.name << " input " << res.worst_input;
    EXPECT_EQ(res.kinks_skipped, 0u) << c.name;
    EXPECT_GT(res.elements_checked, 0u) << c.name;
  }
}
