#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grain/box_geometry.hpp"
#include "grain/errors.hpp"

namespace grain {

// m x n matching costs: rows are ground-truth regions, columns predicted queries.
struct CostMatrix {
  Eigen::MatrixXd values;

  Eigen::Index gt_count() const { return values.rows(); }
  Eigen::Index query_count() const { return values.cols(); }
};

struct Assignment {
  // (gt_index, query_index), ordered by gt_index.
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;

  int query_for(int gt) const { return pairs.at(static_cast<std::size_t>(gt)).second; }
};

struct MatchCostWeights {
  double l1 = 1.0;
  double giou = 1.0;
};

inline CostMatrix build_cost_matrix(std::span<const NormBox> gt_boxes, std::span<const NormBox> pred_boxes,
                                    MatchCostWeights weights = {}) {
  if (gt_boxes.size() > pred_boxes.size())
    throw ShapeError("more ground-truth boxes (" + std::to_string(gt_boxes.size()) + ") than queries (" +
                     std::to_string(pred_boxes.size()) + ")");
  CostMatrix cost{Eigen::MatrixXd(static_cast<Eigen::Index>(gt_boxes.size()),
                                  static_cast<Eigen::Index>(pred_boxes.size()))};
  for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
    for (std::size_t j = 0; j < pred_boxes.size(); ++j) {
      const double c = weights.l1 * l1_distance(gt_boxes[i], pred_boxes[j]) +
                       weights.giou * (1.0 - generalized_iou(gt_boxes[i], pred_boxes[j]));
      cost.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c;
    }
  }
  return cost;
}

// Minimum-cost injective assignment of rows to columns (rows <= columns),
// using the shortest-augmenting-path form of the Hungarian method with
// row/column potentials. O(m^2 n). Equal-cost alternatives resolve to the
// lowest column index encountered during the scan.
inline Assignment hungarian(const CostMatrix& cost) {
  const Eigen::Index m = cost.gt_count();
  const Eigen::Index n = cost.query_count();
  if (m > n) throw ShapeError("hungarian requires rows <= columns");
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (!std::isfinite(cost.values(i, j))) throw ShapeError("cost matrix contains a non-finite entry");

  Assignment result;
  if (m == 0) return result;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual source row/column.
  std::vector<double> u(static_cast<std::size_t>(m) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<Eigen::Index> owner(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);

  for (Eigen::Index row = 1; row <= m; ++row) {
    owner[0] = row;
    Eigen::Index col0 = 0;
    std::vector<double> min_slack(static_cast<std::size_t>(n) + 1, kInf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[col0] = true;
      const Eigen::Index r = owner[col0];
      double delta = kInf;
      Eigen::Index col1 = 0;
      for (Eigen::Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double reduced = cost.values(r - 1, j - 1) - u[r] - v[j];
        if (reduced < min_slack[j]) {
          min_slack[j] = reduced;
          way[j] = col0;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          col1 = j;
        }
      }
      for (Eigen::Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const Eigen::Index col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  std::vector<int> row_to_col(static_cast<std::size_t>(m), -1);
  for (Eigen::Index j = 1; j <= n; ++j)
    if (owner[j] != 0) row_to_col[owner[j] - 1] = static_cast<int>(j - 1);

  result.pairs.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < static_cast<int>(m); ++i) {
    result.pairs.emplace_back(i, row_to_col[i]);
    result.total_cost += cost.values(i, row_to_col[i]);
  }
  return result;
}

}  // namespace grain
