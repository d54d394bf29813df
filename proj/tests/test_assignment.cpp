#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "grain/assignment.hpp"
#include "grain/random.hpp"
#include "oracles.hpp"

namespace grain {
namespace {

Eigen::MatrixXd random_costs(Rng& rng, int m, int n) {
  Eigen::MatrixXd c(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c(i, j) = rng.uniform(0.0, 10.0);
  return c;
}

void expect_valid(const Assignment& a, const CostMatrix& cost) {
  ASSERT_EQ(static_cast<Eigen::Index>(a.pairs.size()), cost.gt_count());
  std::vector<bool> used(static_cast<std::size_t>(cost.query_count()), false);
  double total = 0.0;
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].first, static_cast<int>(i));
    const int q = a.pairs[i].second;
    ASSERT_GE(q, 0);
    ASSERT_LT(q, cost.query_count());
    EXPECT_FALSE(used[static_cast<std::size_t>(q)]);
    used[static_cast<std::size_t>(q)] = true;
    total += cost.values(static_cast<Eigen::Index>(i), q);
  }
  EXPECT_DOUBLE_EQ(total, a.total_cost);
}

TEST(BuildCostMatrix, Examples) {
  const std::vector<NormBox> gt{{0.25, 0.25, 0.5, 0.5}};
  const std::vector<NormBox> pred{{0.25, 0.25, 0.5, 0.5}, {0.5, 0.25, 0.5, 0.5}};
  const auto cost = build_cost_matrix(gt, pred);
  EXPECT_DOUBLE_EQ(cost.values(0, 0), 0.0);
  // 0.25 (L1) + (1 - 1/3) (GIoU term).
  EXPECT_NEAR(cost.values(0, 1), 0.25 + 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(cost.values(0, 1), 0.9167, 5e-5);

  const auto empty = build_cost_matrix({}, pred);
  EXPECT_EQ(empty.gt_count(), 0);
  EXPECT_TRUE(hungarian(empty).pairs.empty());

  EXPECT_THROW(build_cost_matrix(pred, gt), ShapeError);
}

TEST(BuildCostMatrix, EntriesAreNonnegative) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<NormBox> gt, pred;
    for (int i = 0; i < 3; ++i) gt.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.01, 1), rng.uniform(0.01, 1)});
    for (int i = 0; i < 6; ++i) pred.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.01, 1), rng.uniform(0.01, 1)});
    const auto cost = build_cost_matrix(gt, pred);
    EXPECT_GE(cost.values.minCoeff(), 0.0);
  }
}

TEST(Hungarian, TwoByTwo) {
  CostMatrix cost{Eigen::MatrixXd{{1, 2}, {2, 1}}};
  const auto a = hungarian(cost);
  ASSERT_EQ(a.pairs.size(), 2u);
  EXPECT_EQ(a.pairs[0], std::make_pair(0, 0));
  EXPECT_EQ(a.pairs[1], std::make_pair(1, 1));
  EXPECT_DOUBLE_EQ(a.total_cost, 2.0);
}

TEST(Hungarian, SingleRowPicksArgmin) {
  CostMatrix cost{Eigen::MatrixXd{{3.0, 0.5, 2.0, 0.7}}};
  const auto a = hungarian(cost);
  EXPECT_EQ(a.pairs.at(0).second, 1);
  // Ties resolve to the lowest query index.
  CostMatrix tied{Eigen::MatrixXd{{2.0, 1.0, 1.0, 1.0}}};
  EXPECT_EQ(hungarian(tied).pairs.at(0).second, 1);
}

TEST(Hungarian, RejectsMoreRowsThanColumns) {
  CostMatrix cost{Eigen::MatrixXd::Zero(3, 2)};
  EXPECT_THROW(hungarian(cost), ShapeError);
  CostMatrix bad{Eigen::MatrixXd{{1.0, std::nan("")}}};
  EXPECT_THROW(hungarian(bad), ShapeError);
}

TEST(Hungarian, MatchesExhaustiveSearch5x7) {
  EXPECT_EQ(oracle::count_injections(5, 7), 2520);
  Rng rng(21);
  for (int t = 0; t < 100; ++t) {
    CostMatrix cost{random_costs(rng, 5, 7)};
    const auto a = hungarian(cost);
    expect_valid(a, cost);
    EXPECT_DOUBLE_EQ(a.total_cost, oracle::brute_force_min_cost(cost.values));
  }
}

TEST(Hungarian, MatchesExhaustiveSearchAllShapes) {
  Rng rng(22);
  for (int m = 0; m <= 5; ++m)
    for (int n = std::max(m, 1); n <= 7; ++n)
      for (int t = 0; t < 10; ++t) {
        CostMatrix cost{random_costs(rng, m, n)};
        // Integer costs create many ties.
        if (t % 2) cost.values = cost.values.array().floor();
        const auto a = hungarian(cost);
        expect_valid(a, cost);
        EXPECT_DOUBLE_EQ(a.total_cost, oracle::brute_force_min_cost(cost.values));
      }
}

TEST(Hungarian, ColumnPermutationEquivariance) {
  Rng rng(23);
  for (int t = 0; t < 100; ++t) {
    CostMatrix cost{random_costs(rng, 4, 6)};
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    CostMatrix permuted{Eigen::MatrixXd(4, 6)};
    for (int j = 0; j < 6; ++j) permuted.values.col(j) = cost.values.col(perm[static_cast<std::size_t>(j)]);
    const auto a = hungarian(cost);
    const auto b = hungarian(permuted);
    EXPECT_NEAR(a.total_cost, b.total_cost, 1e-12);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(perm[static_cast<std::size_t>(b.query_for(i))], a.query_for(i));
  }
}

TEST(Hungarian, ConstantShift) {
  Rng rng(24);
  for (int t = 0; t < 100; ++t) {
    CostMatrix cost{random_costs(rng, 3, 5)};
    CostMatrix shifted{cost.values.array() + 7.5};
    const auto a = hungarian(cost);
    const auto b = hungarian(shifted);
    EXPECT_NEAR(b.total_cost, a.total_cost + 3 * 7.5, 1e-9);
    EXPECT_EQ(a.pairs, b.pairs);
  }
}

}  // namespace
}  // namespace grain
