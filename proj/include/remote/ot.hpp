#pragma once

// Entropy-regularized optimal transport between two sets of feature rows.
//
// The solver runs in double precision regardless of the feature type and
// hands plans back as BasicTensor<double>; callers cast at the boundary.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "remote/errors.hpp"
#include "remote/tensor.hpp"

namespace remote {

struct CostMatrix {
  BasicTensor<double> values;    // a×b, target rows × source columns
  std::size_t zero_norm_rows = 0;  // rows whose norm was replaced by kZeroNormEpsilon
};

inline constexpr double kZeroNormEpsilon = 1e-8;

/// C(i, j) = 1 − cos(target_i, source_j), laid out target × source to match
/// the plan orientation.
template <std::floating_point T>
CostMatrix cosine_cost(const BasicTensor<T>& source, const BasicTensor<T>& target) {
  if (source.rank() != 2 || target.rank() != 2 || source.cols() != target.cols()) {
    throw DimensionError("cosine_cost: source " + shape_string(source.shape()) + " and target " +
                         shape_string(target.shape()) + " must be matrices of equal width");
  }
  const std::size_t b = source.rows(), a = target.rows(), d = source.cols();
  CostMatrix out{BasicTensor<double>(Shape{a, b}), 0};
  auto norms = [&](const BasicTensor<T>& m) {
    std::vector<double> n(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double s = 0.0;
      for (T v : m.row(i)) s += static_cast<double>(v) * static_cast<double>(v);
      n[i] = std::sqrt(s);
      if (n[i] == 0.0) {
        n[i] = kZeroNormEpsilon;
        ++out.zero_norm_rows;
      }
    }
    return n;
  };
  const auto ns = norms(source);
  const auto nt = norms(target);
  for (std::size_t i = 0; i < a; ++i) {
    const auto ti = target.row(i);
    for (std::size_t j = 0; j < b; ++j) {
      const auto sj = source.row(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(ti[k]) * static_cast<double>(sj[k]);
      const double c = std::clamp(1.0 - dot / (nt[i] * ns[j]), 0.0, 2.0);
      out.values(i, j) = c;
    }
  }
  return out;
}

inline std::vector<double> uniform_weights(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

/// Source rows μ (b×d), target rows ν (a×d), their probability weights, and
/// the entropy strength λ.
template <std::floating_point T>
struct OtProblem {
  BasicTensor<T> source;
  BasicTensor<T> target;
  std::vector<double> source_weights;
  std::vector<double> target_weights;
  double lambda = 0.1;

  static OtProblem uniform(BasicTensor<T> source, BasicTensor<T> target, double lambda) {
    OtProblem p{std::move(source), std::move(target), {}, {}, lambda};
    p.source_weights = uniform_weights(p.source.rows());
    p.target_weights = uniform_weights(p.target.rows());
    return p;
  }
};

struct SinkhornOptions {
  int max_iter = 200;
  double tol = 1e-6;
  // Below this λ the updates run on log-potentials.
  double log_domain_below = 0.05;
};

struct TransportPlan {
  BasicTensor<double> plan;  // a×b
  BasicTensor<double> cost;  // a×b
  double lambda = 0.0;
  int iterations = 0;
  bool converged = false;
  double marginal_residual = 0.0;
  double transport_cost = 0.0;
  double entropy = 0.0;
  std::size_t zero_norm_rows = 0;

  std::size_t target_count() const { return plan.rows(); }
  std::size_t source_count() const { return plan.cols(); }
};

namespace detail {

inline void check_weights(const std::vector<double>& w, std::size_t n, const char* which) {
  if (w.size() != n) {
    throw DimensionError(std::string(which) + " weights have length " + std::to_string(w.size()) + ", expected " +
                         std::to_string(n));
  }
  double s = 0.0;
  for (double x : w) {
    if (!(x > 0.0)) throw ContractError(std::string(which) + " weights must be strictly positive");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ContractError(std::string(which) + " weights must sum to 1");
}

inline double marginal_residual(const BasicTensor<double>& plan, const std::vector<double>& row_w,
                                const std::vector<double>& col_w) {
  const std::size_t a = plan.rows(), b = plan.cols();
  double row_dev = 0.0, col_dev = 0.0;
  std::vector<double> col(b, 0.0);
  for (std::size_t i = 0; i < a; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      r += plan(i, j);
      col[j] += plan(i, j);
    }
    row_dev += std::abs(r - row_w[i]);
  }
  for (std::size_t j = 0; j < b; ++j) col_dev += std::abs(col[j] - col_w[j]);
  return std::max(row_dev, col_dev);
}

[[noreturn]] inline void throw_non_finite(double lambda) {
  throw NumericalError("sinkhorn scaling became non-finite at lambda=" + std::to_string(lambda));
}

inline double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[k * stride]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(x[k * stride] - mx);
  return mx + std::log(s);
}

// Log-domain Sinkhorn on potentials f (rows) and g (columns); warm-starts
// from the incoming f, g. Returns iterations used and whether tol was met.
inline std::pair<int, bool> sinkhorn_log(const BasicTensor<double>& cost, const std::vector<double>& row_w,
                                         const std::vector<double>& col_w, double lambda, int max_iter, double tol,
                                         std::vector<double>& f, std::vector<double>& g) {
  const std::size_t a = cost.rows(), b = cost.cols();
  std::vector<double> log_r(a), log_c(b), scratch(std::max(a, b));
  for (std::size_t i = 0; i < a; ++i) log_r[i] = std::log(row_w[i]);
  for (std::size_t j = 0; j < b; ++j) log_c[j] = std::log(col_w[j]);
  for (int it = 1; it <= max_iter; ++it) {
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t j = 0; j < b; ++j) scratch[j] = (g[j] - cost(i, j)) / lambda;
      f[i] = lambda * (log_r[i] - log_sum_exp(scratch.data(), b, 1));
    }
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t i = 0; i < a; ++i) scratch[i] = (f[i] - cost(i, j)) / lambda;
      g[j] = lambda * (log_c[j] - log_sum_exp(scratch.data(), a, 1));
    }
    // Columns are exact after the g update; rows carry the residual.
    double row_dev = 0.0;
    for (std::size_t i = 0; i < a; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < b; ++j) r += std::exp((f[i] + g[j] - cost(i, j)) / lambda);
      row_dev += std::abs(r - row_w[i]);
    }
    if (!std::isfinite(row_dev)) throw_non_finite(lambda);
    if (row_dev < tol) return {it, true};
  }
  return {max_iter, false};
}

}  // namespace detail

/// Entropic OT on an explicit cost matrix. Rows of the plan follow
/// `target_weights` (length a), columns follow `source_weights` (length b).
inline TransportPlan solve_entropic_ot(const BasicTensor<double>& cost, const std::vector<double>& target_weights,
                                       const std::vector<double>& source_weights, double lambda,
                                       const SinkhornOptions& options = {}) {
  if (cost.rank() != 2) throw DimensionError("cost must be a matrix, got " + shape_string(cost.shape()));
  if (!(lambda > 0.0)) throw ContractError("entropy strength lambda must be positive");
  const std::size_t a = cost.rows(), b = cost.cols();
  detail::check_weights(target_weights, a, "target");
  detail::check_weights(source_weights, b, "source");

  TransportPlan out;
  out.cost = cost;
  out.lambda = lambda;
  out.plan = BasicTensor<double>(Shape{a, b});

  if (lambda < options.log_domain_below) {
    std::vector<double> f(a, 0.0), g(b, 0.0);
    // Anneal λ down from a well-conditioned value, warm-starting potentials.
    int used = 0;
    const int stage_iter = std::max(20, options.max_iter / 20);
    for (double stage = 0.5; stage > lambda * 4.0; stage *= 0.25) {
      used += detail::sinkhorn_log(cost, target_weights, source_weights, stage, stage_iter, options.tol, f, g).first;
    }
    const auto [iters, ok] =
        detail::sinkhorn_log(cost, target_weights, source_weights, lambda, options.max_iter, options.tol, f, g);
    out.iterations = used + iters;
    out.converged = ok;
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) out.plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / lambda);
  } else {
    BasicTensor<double> kernel(Shape{a, b});
    for (std::size_t k = 0; k < a * b; ++k) kernel[k] = std::exp(-cost[k] / lambda);
    std::vector<double> u(a, 1.0), v(b, 1.0), kv(a), ktu(b);
    auto apply_k = [&] {
      for (std::size_t i = 0; i < a; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < b; ++j) s += kernel(i, j) * v[j];
        kv[i] = s;
      }
    };
    apply_k();
    for (int it = 1; it <= options.max_iter; ++it) {
      for (std::size_t i = 0; i < a; ++i) u[i] = target_weights[i] / kv[i];
      std::fill(ktu.begin(), ktu.end(), 0.0);
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j) ktu[j] += kernel(i, j) * u[i];
      for (std::size_t j = 0; j < b; ++j) v[j] = source_weights[j] / ktu[j];
      apply_k();
      double row_dev = 0.0;
      for (std::size_t i = 0; i < a; ++i) row_dev += std::abs(u[i] * kv[i] - target_weights[i]);
      if (!std::isfinite(row_dev)) detail::throw_non_finite(lambda);
      out.iterations = it;
      if (row_dev < options.tol) {
        out.converged = true;
        break;
      }
    }
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) out.plan(i, j) = u[i] * kernel(i, j) * v[j];
  }

  if (!out.plan.all_finite()) detail::throw_non_finite(lambda);
  out.marginal_residual = detail::marginal_residual(out.plan, target_weights, source_weights);
  for (std::size_t k = 0; k < a * b; ++k) {
    const double p = out.plan[k];
    out.transport_cost += cost[k] * p;
    if (p > 0.0) out.entropy -= p * std::log(p);
  }
  return out;
}

/// Cosine cost followed by entropic OT with the problem's weights.
template <std::floating_point T>
TransportPlan sinkhorn(const OtProblem<T>& problem, const SinkhornOptions& options = {}) {
  CostMatrix cost = cosine_cost(problem.source, problem.target);
  TransportPlan plan =
      solve_entropic_ot(cost.values, problem.target_weights, problem.source_weights, problem.lambda, options);
  plan.zero_norm_rows = cost.zero_norm_rows;
  return plan;
}

struct Assignment {
  std::vector<std::size_t> permutation;  // row i goes to column permutation[i]
  double optimal_cost = 0.0;               // (1/n)·Σ C(i, σ(i))
};

inline constexpr std::size_t kMaxOracleSize = 8;

/// Exhaustive minimum-cost assignment for uniform square OT.
inline Assignment exact_ot_oracle(const BasicTensor<double>& cost) {
  if (cost.rank() != 2 || cost.rows() != cost.cols()) {
    throw DimensionError("exact_ot_oracle needs a square cost, got " + shape_string(cost.shape()));
  }
  const std::size_t n = cost.rows();
  if (n == 0) throw DimensionError("exact_ot_oracle needs a non-empty cost");
  if (n > kMaxOracleSize) throw ContractError("exact_ot_oracle refuses n=" + std::to_string(n) + " (limit 8)");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Assignment best{perm, std::numeric_limits<double>::infinity()};
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
    if (s < best.optimal_cost) {
      best.optimal_cost = s;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.optimal_cost /= static_cast<double>(n);
  return best;
}

}  // namespace remote
