#pragma once

// Reverse-mode automatic differentiation over dense float64 matrices.
//
// A Var is a handle to a node in a dynamically built graph. Every operation
// records its parents and a closure that pushes the output gradient back to
// them. Graphs are released when the last handle to the root goes away.
// Gradient recording is controlled per thread by NoGradGuard, so read-only
// evaluation can run concurrently over the same parameters.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "grain/errors.hpp"

namespace grain::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

namespace detail {
inline thread_local bool grad_enabled_flag = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag; }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag) { detail::grad_enabled_flag = false; }
  ~NoGradGuard() { detail::grad_enabled_flag = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var scalar(double v) { return Var(Matrix::Constant(1, 1, v)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on a non-scalar value");
    return node_->value(0, 0);
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient accumulated by the last backward pass; zero-shaped if none.
  Matrix grad() const {
    if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Accumulates d(this)/d(leaf) into every reachable leaf requiring grad.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  bool needs = false;
  if (ad::grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

inline void push(const std::shared_ptr<Node>& parent, const Matrix& g) {
  if (parent->requires_grad) parent->accumulate(g);
}

// Sum a broadcast gradient back down to a (rows x cols) operand.
inline Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  if (cols == 1) return g.rowwise().sum();
  throw ShapeError("cannot reduce gradient to operand shape");
}

inline Matrix broadcast_to(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1 && m.cols() == cols) return m.replicate(rows, 1);
  if (m.cols() == 1 && m.rows() == rows) return m.replicate(1, cols);
  throw ShapeError("operand shapes are not broadcast-compatible");
}

inline std::pair<Index, Index> broadcast_shape(const Matrix& a, const Matrix& b) {
  auto dim = [](Index x, Index y) -> Index {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError("operand shapes are not broadcast-compatible: " + std::to_string(x) + " vs " +
                     std::to_string(y));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

}  // namespace detail

inline void Var::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.contains(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;  // leaf
    if (n->grad.size() != 0) n->backward_fn(*n);
    n->grad.resize(0, 0);
  }
}

inline Var constant(Matrix m) { return Var(std::move(m), false); }
inline Var parameter(Matrix m) { return Var(std::move(m), true); }

// ---------------------------------------------------------------------------
// Elementwise binary operations with scalar/row/column broadcasting.

inline Var operator+(const Var& a, const Var& b) {
  auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix out = detail::broadcast_to(a.value(), r, c) + detail::broadcast_to(b.value(), r, c);
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    detail::push(pa, detail::reduce_to(n.grad, pa->value.rows(), pa->value.cols()));
    detail::push(pb, detail::reduce_to(n.grad, pb->value.rows(), pb->value.cols()));
  });
}

inline Var operator-(const Var& a, const Var& b) {
  auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix out = detail::broadcast_to(a.value(), r, c) - detail::broadcast_to(b.value(), r, c);
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    detail::push(pa, detail::reduce_to(n.grad, pa->value.rows(), pa->value.cols()));
    detail::push(pb, detail::reduce_to(-n.grad, pb->value.rows(), pb->value.cols()));
  });
}

inline Var operator*(const Var& a, const Var& b) {
  auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix av = detail::broadcast_to(a.value(), r, c);
  Matrix bv = detail::broadcast_to(b.value(), r, c);
  Matrix out = av.cwiseProduct(bv);
  return detail::make_result(std::move(out), {a, b}, [av, bv](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad)
      detail::push(pa, detail::reduce_to(n.grad.cwiseProduct(bv), pa->value.rows(), pa->value.cols()));
    if (pb->requires_grad)
      detail::push(pb, detail::reduce_to(n.grad.cwiseProduct(av), pb->value.rows(), pb->value.cols()));
  });
}

inline Var operator/(const Var& a, const Var& b) {
  auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix av = detail::broadcast_to(a.value(), r, c);
  Matrix bv = detail::broadcast_to(b.value(), r, c);
  Matrix out = av.cwiseQuotient(bv);
  return detail::make_result(out, {a, b}, [out, bv](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    Matrix ga = n.grad.cwiseQuotient(bv);
    if (pa->requires_grad) detail::push(pa, detail::reduce_to(ga, pa->value.rows(), pa->value.cols()));
    if (pb->requires_grad)
      detail::push(pb, detail::reduce_to(-ga.cwiseProduct(out), pb->value.rows(), pb->value.cols()));
  });
}

// Ties route the gradient to the first operand.
inline Var min(const Var& a, const Var& b) {
  auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix av = detail::broadcast_to(a.value(), r, c);
  Matrix bv = detail::broadcast_to(b.value(), r, c);
  Matrix pick_a = (av.array() <= bv.array()).cast<double>().matrix();
  Matrix out = av.cwiseMin(bv);
  return detail::make_result(std::move(out), {a, b}, [pick_a](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    Matrix ga = n.grad.cwiseProduct(pick_a);
    detail::push(pa, detail::reduce_to(ga, pa->value.rows(), pa->value.cols()));
    detail::push(pb, detail::reduce_to(n.grad - ga, pb->value.rows(), pb->value.cols()));
  });
}

inline Var max(const Var& a, const Var& b) {
  auto [r, c] = detail::broadcast_shape(a.value(), b.value());
  Matrix av = detail::broadcast_to(a.value(), r, c);
  Matrix bv = detail::broadcast_to(b.value(), r, c);
  Matrix pick_a = (av.array() >= bv.array()).cast<double>().matrix();
  Matrix out = av.cwiseMax(bv);
  return detail::make_result(std::move(out), {a, b}, [pick_a](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    Matrix ga = n.grad.cwiseProduct(pick_a);
    detail::push(pa, detail::reduce_to(ga, pa->value.rows(), pa->value.cols()));
    detail::push(pb, detail::reduce_to(n.grad - ga, pb->value.rows(), pb->value.cols()));
  });
}

inline Var operator+(const Var& a, double s) { return a + Var::scalar(s); }
inline Var operator+(double s, const Var& a) { return Var::scalar(s) + a; }
inline Var operator-(const Var& a, double s) { return a - Var::scalar(s); }
inline Var operator-(double s, const Var& a) { return Var::scalar(s) - a; }
inline Var operator*(const Var& a, double s) { return a * Var::scalar(s); }
inline Var operator*(double s, const Var& a) { return Var::scalar(s) * a; }
inline Var operator/(const Var& a, double s) { return a / Var::scalar(s); }
inline Var operator/(double s, const Var& a) { return Var::scalar(s) / a; }
inline Var operator-(const Var& a) { return a * -1.0; }
inline Var min(const Var& a, double s) { return min(a, Var::scalar(s)); }
inline Var max(const Var& a, double s) { return max(a, Var::scalar(s)); }

// ---------------------------------------------------------------------------
// Elementwise unary operations.

namespace detail {
template <typename Forward, typename Derivative>
Var unary(const Var& a, Forward f, Derivative df) {
  Matrix out = a.value().unaryExpr(f);
  Matrix local = a.value().binaryExpr(out, df);
  return make_result(std::move(out), {a}, [local](Node& n) {
    push(n.parents[0], n.grad.cwiseProduct(local));
  });
}
}  // namespace detail

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var sqrt(const Var& a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}
inline Var abs(const Var& a) {
  return detail::unary(a, [](double x) { return std::abs(x); },
                       [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
inline Var sigmoid(const Var& a) {
  return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                       [](double, double y) { return y * (1.0 - y); });
}
inline Var relu(const Var& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions.

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul shape mismatch: " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  Matrix out = a.value() * b.value();
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
  });
}

inline Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return detail::make_result(std::move(out), {a},
                             [](Node& n) { detail::push(n.parents[0], n.grad.transpose()); });
}

inline Var sum(const Var& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return detail::make_result(std::move(out), {a}, [](Node& n) {
    const auto& p = n.parents[0];
    detail::push(p, Matrix::Constant(p->value.rows(), p->value.cols(), n.grad(0, 0)));
  });
}

inline Var mean(const Var& a) { return sum(a) / static_cast<double>(a.value().size()); }

// Per-row sum, producing a column vector.
inline Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return detail::make_result(std::move(out), {a}, [](Node& n) {
    const auto& p = n.parents[0];
    detail::push(p, n.grad.replicate(1, p->value.cols()));
  });
}

inline Var softmax_rows(const Var& a) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    auto row = a.value().row(i);
    const double m = row.maxCoeff();
    out.row(i) = (row.array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return detail::make_result(out, {a}, [out](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (Index i = 0; i < out.rows(); ++i) {
      const double dot = n.grad.row(i).dot(out.row(i));
      g.row(i) = out.row(i).cwiseProduct((n.grad.row(i).array() - dot).matrix());
    }
    detail::push(n.parents[0], g);
  });
}

// Mean over rows of -log softmax(row)[target[row]].
inline Var cross_entropy_rows(const Var& logits, std::span<const Index> targets) {
  const Index rows = logits.rows();
  if (static_cast<Index>(targets.size()) != rows) throw ShapeError("cross_entropy_rows: target count mismatch");
  Matrix probs(rows, logits.cols());
  double total = 0.0;
  for (Index i = 0; i < rows; ++i) {
    auto row = logits.value().row(i);
    const double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp().matrix();
    const double z = e.sum();
    probs.row(i) = e / z;
    total += -(row(targets[i]) - m - std::log(z));
  }
  std::vector<Index> tgt(targets.begin(), targets.end());
  Matrix out = Matrix::Constant(1, 1, rows > 0 ? total / static_cast<double>(rows) : 0.0);
  return detail::make_result(std::move(out), {logits}, [probs, tgt](Node& n) {
    Matrix g = probs;
    for (std::size_t i = 0; i < tgt.size(); ++i) g(static_cast<Index>(i), tgt[i]) -= 1.0;
    g *= n.grad(0, 0) / static_cast<double>(tgt.size());
    detail::push(n.parents[0], g);
  });
}

// Row-wise layer normalization with affine parameters (1 x cols each).
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Index rows = x.rows();
  const Index cols = x.cols();
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Index i = 0; i < rows; ++i) {
    auto row = x.value().row(i);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = ((row.array() - mu) * inv_std(i)).matrix();
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return detail::make_result(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    auto& pb = n.parents[2];
    const Index cols = xhat.cols();
    if (pg->requires_grad) pg->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
    if (px->requires_grad) {
      Matrix dxhat = n.grad.array().rowwise() * pg->value.row(0).array();
      Matrix dx(xhat.rows(), cols);
      for (Index i = 0; i < xhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(cols);
        dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
      }
      px->accumulate(dx);
    }
  });
}

// Scales each row to unit L2 norm. A zero row has no direction.
inline Var l2_normalize_rows(const Var& x) {
  Eigen::VectorXd norms = x.value().rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0) || !std::isfinite(norms(i)))
      throw NormalizationError("cannot normalize a zero or non-finite vector (row " + std::to_string(i) + ")");
  }
  Matrix out = x.value().array().colwise() / norms.array();
  return detail::make_result(out, {x}, [out, norms](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (Index i = 0; i < out.rows(); ++i) {
      const double dot = n.grad.row(i).dot(out.row(i));
      g.row(i) = (n.grad.row(i) - dot * out.row(i)) / norms(i);
    }
    detail::push(n.parents[0], g);
  });
}

// ---------------------------------------------------------------------------
// Structural operations.

inline Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  Matrix out = a.value().middleRows(start, count);
  return detail::make_result(std::move(out), {a}, [start, count](Node& n) {
    const auto& p = n.parents[0];
    Matrix g = Matrix::Zero(p->value.rows(), p->value.cols());
    g.middleRows(start, count) = n.grad;
    detail::push(p, g);
  });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix out = a.value().middleCols(start, count);
  return detail::make_result(std::move(out), {a}, [start, count](Node& n) {
    const auto& p = n.parents[0];
    Matrix g = Matrix::Zero(p->value.rows(), p->value.cols());
    g.middleCols(start, count) = n.grad;
    detail::push(p, g);
  });
}

inline Var element(const Var& a, Index r, Index c) {
  Matrix out = Matrix::Constant(1, 1, a.value()(r, c));
  return detail::make_result(std::move(out), {a}, [r, c](Node& n) {
    const auto& p = n.parents[0];
    if (!p->requires_grad) return;
    if (p->grad.size() == 0) p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
    p->grad(r, c) += n.grad(0, 0);
  });
}

inline Var gather_rows(const Var& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("gather_rows index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return detail::make_result(std::move(out), {a}, [idx](Node& n) {
    const auto& p = n.parents[0];
    if (!p->requires_grad) return;
    // Scatter straight into the parent's gradient; embedding tables are large
    // relative to the rows touched.
    if (p->grad.size() == 0) p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) p->grad.row(idx[i]) += n.grad.row(static_cast<Index>(i));
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_result(std::move(out), parts, [](Node& n) {
    Index at = 0;
    for (auto& p : n.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) p->accumulate(n.grad.middleRows(at, r));
      at += r;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_result(std::move(out), parts, [](Node& n) {
    Index at = 0;
    for (auto& p : n.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) p->accumulate(n.grad.middleCols(at, c));
      at += c;
    }
  });
}

}  // namespace grain::ad
