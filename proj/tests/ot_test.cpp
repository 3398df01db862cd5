#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "remote/ot.hpp"

namespace remote {
namespace {

using D = BasicTensor<double>;

D random_cost(std::size_t a, std::size_t b, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 2.0);
  D c(Shape{a, b});
  for (auto& x : c.data()) x = dist(rng);
  return c;
}

// Assignment DP over column subsets; shares no code with exact_ot_oracle.
double subset_dp_assignment(const D& cost) {
  const std::size_t n = cost.rows();
  std::vector<double> best(std::size_t{1} << n, std::numeric_limits<double>::infinity());
  best[0] = 0.0;
  for (std::size_t mask = 0; mask < best.size(); ++mask) {
    const std::size_t row = static_cast<std::size_t>(__builtin_popcountll(mask));
    if (row >= n || !std::isfinite(best[mask])) continue;
    for (std::size_t col = 0; col < n; ++col) {
      if (mask & (std::size_t{1} << col)) continue;
      auto& next = best[mask | (std::size_t{1} << col)];
      next = std::min(next, best[mask] + cost(row, col));
    }
  }
  return best.back() / static_cast<double>(n);
}

TEST(CosineCostTest, IdenticalOrthogonalAntipodal) {
  const D source = D::matrix({{1, 0}, {0, 1}, {-1, 0}});
  const D target = D::matrix({{1, 0}});
  const auto c = cosine_cost(source, target);
  ASSERT_EQ(c.values.shape(), (Shape{1, 3}));
  EXPECT_NEAR(c.values(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(c.values(0, 1), 1.0, 1e-12);
  EXPECT_NEAR(c.values(0, 2), 2.0, 1e-12);
  EXPECT_EQ(c.zero_norm_rows, 0u);
}

TEST(CosineCostTest, ZeroNormRowIsFlagged) {
  const auto c = cosine_cost(D::matrix({{0, 0}, {1, 1}}), D::matrix({{1, 0}}));
  EXPECT_EQ(c.zero_norm_rows, 1u);
  EXPECT_NEAR(c.values(0, 0), 1.0, 1e-12);
  EXPECT_TRUE(c.values.all_finite());
}

TEST(CosineCostTest, WidthMismatch) {
  EXPECT_THROW(cosine_cost(D(Shape{2, 3}), D(Shape{2, 4})), DimensionError);
}

TEST(SinkhornTest, SingleCellPlanIsOne) {
  const auto plan = solve_entropic_ot(D::matrix({{0.7}}), {1.0}, {1.0}, 0.1);
  EXPECT_NEAR(plan.plan(0, 0), 1.0, 1e-12);
  EXPECT_TRUE(plan.converged);
}

TEST(SinkhornTest, ConstantCostGivesProductMeasure) {
  const auto plan = solve_entropic_ot(D::full(Shape{2, 3}, 0.4), uniform_weights(2), uniform_weights(3), 0.1);
  for (double p : plan.plan.data()) EXPECT_NEAR(p, 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(plan.entropy, std::log(6.0), 1e-9);
  EXPECT_NEAR(plan.transport_cost, 0.4, 1e-12);
}

TEST(SinkhornTest, SmallLambdaApproachesPermutationOptimum) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const D cost = random_cost(5, 5, rng);
    const auto plan = solve_entropic_ot(cost, uniform_weights(5), uniform_weights(5), 1e-3, {20000, 1e-9, 0.05});
    const double optimum = exact_ot_oracle(cost).optimal_cost;
    EXPECT_GE(plan.transport_cost, optimum - 1e-9);
    EXPECT_LE(plan.transport_cost, optimum * 1.01);
  }
}

TEST(SinkhornTest, FeasibilityOnRandomRectangularInstances) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> rows(1, 16), cols(1, 48);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t a = rows(rng), b = cols(rng);
    for (double lambda : {0.05, 0.1, 0.5}) {
      const auto plan = solve_entropic_ot(random_cost(a, b, rng), uniform_weights(a), uniform_weights(b), lambda,
                                          {2000, 1e-8, 0.05});
      ASSERT_TRUE(plan.converged);
      EXPECT_LT(plan.marginal_residual, 1e-6);
      for (double p : plan.plan.data()) EXPECT_GE(p, 0.0);
    }
  }
}

TEST(SinkhornTest, LogDomainAgreesWithScalingDomain) {
  std::mt19937_64 rng(23);
  const D cost = random_cost(4, 7, rng);
  const auto scaled = solve_entropic_ot(cost, uniform_weights(4), uniform_weights(7), 0.2, {5000, 1e-12, 0.0});
  const auto logged = solve_entropic_ot(cost, uniform_weights(4), uniform_weights(7), 0.2, {5000, 1e-12, 1.0});
  for (std::size_t k = 0; k < scaled.plan.numel(); ++k) EXPECT_NEAR(scaled.plan[k], logged.plan[k], 1e-10);
}

TEST(SinkhornTest, EntropyIsMonotoneInLambda) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const D cost = random_cost(6, 9, rng);
    double previous = -1.0;
    for (double lambda : {0.01, 0.05, 0.1, 0.5, 1.0}) {
      const auto plan = solve_entropic_ot(cost, uniform_weights(6), uniform_weights(9), lambda, {20000, 1e-12, 0.05});
      EXPECT_GE(plan.entropy, previous - 1e-9) << "lambda " << lambda;
      previous = plan.entropy;
    }
  }
}

TEST(SinkhornTest, ZeroLimitConsistencyUpToSix) {
  std::mt19937_64 rng(41);
  for (std::size_t n = 2; n <= 6; ++n) {
    for (int trial = 0; trial < 4; ++trial) {
      const D cost = random_cost(n, n, rng);
      const auto plan = solve_entropic_ot(cost, uniform_weights(n), uniform_weights(n), 1e-3, {20000, 1e-9, 0.05});
      const double gap = plan.transport_cost - exact_ot_oracle(cost).optimal_cost;
      EXPECT_GE(gap, -1e-9);
      EXPECT_LE(gap, 0.01 * exact_ot_oracle(cost).optimal_cost + 1e-4);
    }
  }
}

TEST(SinkhornTest, NonConvergenceIsFlaggedNotThrown) {
  std::mt19937_64 rng(3);
  const auto plan = solve_entropic_ot(random_cost(5, 8, rng), uniform_weights(5), uniform_weights(8), 0.1, {1, 1e-14, 0.05});
  EXPECT_FALSE(plan.converged);
  EXPECT_EQ(plan.iterations, 1);
}

TEST(SinkhornTest, NonFiniteScalingNamesLambda) {
  D cost = D::full(Shape{2, 2}, 0.5);
  cost(0, 1) = std::numeric_limits<double>::quiet_NaN();
  try {
    solve_entropic_ot(cost, uniform_weights(2), uniform_weights(2), 0.25);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("lambda=0.25"), std::string::npos);
  }
}

TEST(SinkhornTest, InvalidProblemsAreRejected) {
  EXPECT_THROW(solve_entropic_ot(D(Shape{2, 2}), {0.5, 0.5}, {0.5, 0.5}, 0.0), ContractError);
  EXPECT_THROW(solve_entropic_ot(D(Shape{2, 2}), {0.7, 0.7}, {0.5, 0.5}, 0.1), ContractError);
  EXPECT_THROW(solve_entropic_ot(D(Shape{2, 2}), {1.0, 0.0}, {0.5, 0.5}, 0.1), ContractError);
  EXPECT_THROW(solve_entropic_ot(D(Shape{2, 2}), {1.0}, {0.5, 0.5}, 0.1), DimensionError);
}

TEST(SinkhornTest, FeatureProblemOrientation) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  D mu(Shape{6, 4}), nu(Shape{2, 4});
  for (auto& x : mu.data()) x = n01(rng);
  for (auto& x : nu.data()) x = n01(rng);
  const auto plan = sinkhorn(OtProblem<double>::uniform(mu, nu, 0.1));
  ASSERT_EQ(plan.plan.shape(), (Shape{2, 6}));
  for (std::size_t i = 0; i < 2; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < 6; ++j) r += plan.plan(i, j);
    EXPECT_NEAR(r, 0.5, 1e-6);
  }
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(plan.plan(0, j) + plan.plan(1, j), 1.0 / 6.0, 1e-9);
}

TEST(ExactOracleTest, IdentityFavoringAndConstantCosts) {
  D cost = D::full(Shape{4, 4}, 1.0);
  for (std::size_t i = 0; i < 4; ++i) cost(i, i) = 0.0;
  const auto best = exact_ot_oracle(cost);
  EXPECT_EQ(best.permutation, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(best.optimal_cost, 0.0);
  EXPECT_DOUBLE_EQ(exact_ot_oracle(D::full(Shape{3, 3}, 0.3)).optimal_cost, 0.3);
}

TEST(ExactOracleTest, MatchesSubsetDynamicProgram) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 25; ++trial) {
    const D cost = random_cost(4, 4, rng);
    EXPECT_NEAR(exact_ot_oracle(cost).optimal_cost, subset_dp_assignment(cost), 1e-12);
  }
}

TEST(ExactOracleTest, RefusesLargeOrRectangularInputs) {
  EXPECT_THROW(exact_ot_oracle(D(Shape{9, 9})), ContractError);
  EXPECT_THROW(exact_ot_oracle(D(Shape{2, 3})), DimensionError);
}

}  // namespace
}  // namespace remote
