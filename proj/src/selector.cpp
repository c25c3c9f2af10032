#include "gradsel/selector.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "gradsel/errors.hpp"

namespace gradsel::selector {

namespace {

void check_budget(Index budget, Index n) {
  if (budget < 0) throw ConfigError("budget must be non-negative");
  if (budget > n) {
    throw ConfigError("budget " + std::to_string(budget) + " exceeds pool size " +
                      std::to_string(n));
  }
}

void check_subset(const GramSystem& sys, std::span<const Index> subset) {
  if (subset.empty()) throw ShapeError("subset must be non-empty");
  for (Index i : subset) {
    if (i < 0 || i >= sys.size()) throw ShapeError("subset index out of range");
  }
}

Matrix sub_matrix(const GramSystem& sys, std::span<const Index> subset) {
  const auto m = static_cast<Index>(subset.size());
  Matrix q(m, m);
  for (Index r = 0; r < m; ++r) {
    for (Index c = 0; c < m; ++c) q(r, c) = sys.G(subset[r], subset[c]);
  }
  q.diagonal().array() += sys.lambda;
  return q;
}

Vector sub_vector(const Vector& v, std::span<const Index> subset) {
  Vector out(static_cast<Index>(subset.size()));
  for (std::size_t i = 0; i < subset.size(); ++i) out[static_cast<Index>(i)] = v[subset[i]];
  return out;
}

// Solves q z = c on a PSD system; falls back to a rank-revealing solve if the
// Cholesky factorization breaks down.
Vector psd_solve(const Matrix& q, const Vector& c) {
  Eigen::LLT<Matrix> llt(q);
  if (llt.info() == Eigen::Success) {
    Vector z = llt.solve(c);
    z += llt.solve(c - q * z);
    return z;
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(q);
  Vector z = cod.solve(c);
  z += cod.solve(c - q * z);
  return z;
}

bool degenerate_pool(const GramSystem& sys) {
  return sys.size() == 0 || sys.G.diagonal().maxCoeff() <= 0.0;
}

SelectionOutcome finish(const GramSystem& sys, std::vector<Index> indices, Vector w) {
  SelectionOutcome out;
  out.objective = objective_value(sys, scatter(sys.size(), indices, w));
  out.residual_norm = std::sqrt(std::max(out.objective, 0.0));
  out.indices = std::move(indices);
  out.weights = std::move(w);
  return out;
}

SelectionOutcome unit_weights(const GramSystem& sys, std::vector<Index> indices) {
  Vector w = Vector::Ones(static_cast<Index>(indices.size()));
  return finish(sys, std::move(indices), std::move(w));
}

}  // namespace

GramSystem build_gram_system(std::span<const ProjectedSample> candidates,
                             const ValAggregate& raw_target,
                             const ValAggregate& precond_target, double lambda) {
  if (candidates.empty()) throw ShapeError("build_gram_system: no candidates");
  if (raw_target.per_layer.size() != precond_target.per_layer.size() ||
      raw_target.count != precond_target.count) {
    throw ShapeError("build_gram_system: targets come from different validation batches");
  }
  if (lambda < 0.0) throw ConfigError("ridge lambda must be >= 0");
  const auto n = static_cast<Index>(candidates.size());
  GramSystem sys;
  sys.G.resize(n, n);
  sys.b.resize(n);
  sys.lambda = lambda;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= i; ++j) {
      const double v = gradcore::inner_ghost(candidates[i], candidates[j]);
      sys.G(i, j) = v;
      sys.G(j, i) = v;
    }
    sys.b[i] = gradcore::inner_reordered(candidates[i], precond_target);
  }
  sys.target_sq_norm = precond_target.squared_norm();
  return sys;
}

void set_relative_ridge(GramSystem& sys, double relative) {
  if (relative < 0.0) throw ConfigError("relative ridge must be >= 0");
  if (sys.size() == 0) return;
  sys.lambda = relative * sys.G.diagonal().mean();
}

double objective_value(const GramSystem& sys, const Vector& w) {
  if (w.size() != sys.size()) {
    throw ShapeError("objective_value: weight vector has " + std::to_string(w.size()) +
                     " entries, system has " + std::to_string(sys.size()));
  }
  return sys.target_sq_norm - 2.0 * w.dot(sys.b) + w.dot(sys.G * w) +
         sys.lambda * w.squaredNorm();
}

Vector scatter(Index n, std::span<const Index> subset, const Vector& w) {
  if (static_cast<Index>(subset.size()) != w.size()) {
    throw ShapeError("scatter: subset and weights differ in length");
  }
  Vector full = Vector::Zero(n);
  for (std::size_t i = 0; i < subset.size(); ++i) full[subset[i]] = w[static_cast<Index>(i)];
  return full;
}

std::vector<Index> greedy_filter(std::span<const ProjectedSample> candidates,
                                 const ValAggregate& target, Index budget,
                                 const FilterOptions& options) {
  const auto n = static_cast<Index>(candidates.size());
  check_budget(budget, n);
  if (options.precondition_residual_updates && options.preconditioner == nullptr) {
    throw ConfigError("preconditioned residual updates need a preconditioner");
  }
  ValAggregate residual = target;
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(budget));
  while (static_cast<Index>(order.size()) < budget) {
    Index best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (taken[static_cast<std::size_t>(i)]) continue;
      const double s = gradcore::inner_reordered(candidates[i], residual);
      if (best < 0 || s > best_score) {
        best = i;
        best_score = s;
      }
    }
    taken[static_cast<std::size_t>(best)] = true;
    order.push_back(best);
    const auto& picked = candidates[best];
    for (std::size_t l = 0; l < residual.per_layer.size(); ++l) {
      const auto& fp = picked.layers[l];
      Matrix c = fp.activations * fp.out_grads.transpose();
      if (options.precondition_residual_updates) {
        c = options.preconditioner->per_layer[l].cwiseProduct(c);
      }
      residual.per_layer[l] -= c;
    }
  }
  return order;
}

Vector ridge_solve(const GramSystem& sys, std::span<const Index> subset) {
  check_subset(sys, subset);
  const Matrix q = sub_matrix(sys, subset);
  const Vector c = sub_vector(sys.b, subset);
  Eigen::LDLT<Matrix> ldlt(q);
  const Vector piv = ldlt.vectorD().cwiseAbs();
  if (ldlt.info() != Eigen::Success || !(piv.minCoeff() > 1e-14 * piv.maxCoeff()) ||
      ldlt.rcond() < 1e-14) {
    throw NumericError(sys.lambda > 0.0
                           ? "ridge_solve: system is numerically singular"
                           : "ridge_solve: singular Gram submatrix; use lambda > 0");
  }
  Vector w = ldlt.solve(c);
  w += ldlt.solve(c - q * w);
  return w;
}

Vector nnls_solve(const GramSystem& sys, std::span<const Index> subset) {
  check_subset(sys, subset);
  const Matrix q = sub_matrix(sys, subset);
  const Vector c = sub_vector(sys.b, subset);
  const Index m = q.rows();
  const double scale0 =
      std::max({c.cwiseAbs().maxCoeff(), q.cwiseAbs().maxCoeff(),
                std::numeric_limits<double>::min()});
  const double tol = 1e-12 * scale0;

  Vector w = Vector::Zero(m);
  std::vector<bool> passive(static_cast<std::size_t>(m), false);
  std::vector<bool> rejected(static_cast<std::size_t>(m), false);

  auto solve_passive = [&](Vector& z) {
    std::vector<Index> p;
    for (Index i = 0; i < m; ++i) {
      if (passive[static_cast<std::size_t>(i)]) p.push_back(i);
    }
    z = Vector::Zero(m);
    if (p.empty()) return;
    Matrix qp(static_cast<Index>(p.size()), static_cast<Index>(p.size()));
    Vector cp(static_cast<Index>(p.size()));
    for (std::size_t r = 0; r < p.size(); ++r) {
      cp[static_cast<Index>(r)] = c[p[r]];
      for (std::size_t s = 0; s < p.size(); ++s) {
        qp(static_cast<Index>(r), static_cast<Index>(s)) = q(p[r], p[s]);
      }
    }
    const Vector zp = psd_solve(qp, cp);
    for (std::size_t r = 0; r < p.size(); ++r) z[p[r]] = zp[static_cast<Index>(r)];
  };

  const Index max_outer = 3 * m + 10;
  for (Index outer = 0; outer < max_outer; ++outer) {
    const Vector grad = c - q * w;  // negative half-gradient
    Index j = -1;
    double best = tol;
    for (Index i = 0; i < m; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (passive[ui] || rejected[ui]) continue;
      if (grad[i] > best) {
        best = grad[i];
        j = i;
      }
    }
    if (j < 0) break;
    passive[static_cast<std::size_t>(j)] = true;

    Vector z;
    for (Index inner = 0; inner <= 3 * m + 10; ++inner) {
      solve_passive(z);
      if (inner == 0 && z[j] <= 0.0) {
        // Entering coordinate cannot move off the bound; numerical tie.
        passive[static_cast<std::size_t>(j)] = false;
        rejected[static_cast<std::size_t>(j)] = true;
        z = w;
        break;
      }
      bool feasible = true;
      double alpha = 1.0;
      for (Index i = 0; i < m; ++i) {
        if (passive[static_cast<std::size_t>(i)] && z[i] <= 0.0) {
          feasible = false;
          const double denom = w[i] - z[i];
          if (denom > 0.0) alpha = std::min(alpha, w[i] / denom);
        }
      }
      if (feasible) break;
      w += alpha * (z - w);
      for (Index i = 0; i < m; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (passive[ui] && (w[i] <= 0.0 || (z[i] <= 0.0 && w[i] <= tol))) {
          passive[ui] = false;
          w[i] = 0.0;
        }
      }
    }
    w = z.cwiseMax(0.0);
    std::fill(rejected.begin(), rejected.end(), false);
  }
  return w;
}

KktReport kkt_check(const GramSystem& sys, std::span<const Index> subset,
                    const Vector& w) {
  check_subset(sys, subset);
  const Matrix q = sub_matrix(sys, subset);
  const Vector c = sub_vector(sys.b, subset);
  const Vector grad = q * w - c;
  KktReport r;
  r.scale = std::max({c.cwiseAbs().maxCoeff(),
                      q.cwiseAbs().rowwise().sum().maxCoeff() * w.cwiseAbs().maxCoeff(),
                      std::numeric_limits<double>::min()});
  r.min_weight = w.size() > 0 ? w.minCoeff() : 0.0;
  r.min_active_gradient = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0) {
      r.max_passive_residual = std::max(r.max_passive_residual, std::abs(grad[i]));
    } else {
      r.min_active_gradient = std::min(r.min_active_gradient, grad[i]);
    }
  }
  if (!std::isfinite(r.min_active_gradient)) r.min_active_gradient = 0.0;
  return r;
}

SelectionOutcome omp_select(const GramSystem& sys, Index budget) {
  const Index n = sys.size();
  check_budget(budget, n);
  std::vector<Index> selected;
  Vector weights;
  double best_err = sys.target_sq_norm;
  for (Index k = 0; k < budget; ++k) {
    Index best_u = -1;
    double err_star = std::numeric_limits<double>::infinity();
    Vector w_star;
    for (Index u = 0; u < n; ++u) {
      if (std::find(selected.begin(), selected.end(), u) != selected.end()) continue;
      std::vector<Index> trial = selected;
      trial.push_back(u);
      const Vector w = ridge_solve(sys, trial);
      const double err = objective_value(sys, scatter(n, trial, w));
      if (err < err_star) {
        best_u = u;
        err_star = err;
        w_star = w;
      }
    }
    selected.push_back(best_u);
    weights = w_star;
    best_err = err_star;
  }
  SelectionOutcome out;
  out.indices = std::move(selected);
  out.weights = budget > 0 ? weights : Vector();
  out.objective = best_err;
  out.residual_norm = std::sqrt(std::max(best_err, 0.0));
  return out;
}

std::vector<Index> topk_select(const Vector& scores, Index budget) {
  check_budget(budget, scores.size());
  std::vector<Index> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](Index a, Index b) { return scores[a] > scores[b]; });
  idx.resize(static_cast<std::size_t>(budget));
  return idx;
}

SelectionOutcome two_stage_select(std::span<const ProjectedSample> candidates,
                                  const ValAggregate& raw_target,
                                  const ValAggregate& precond_target, Index budget,
                                  double lambda, const FilterOptions& options) {
  const GramSystem sys = build_gram_system(candidates, raw_target, precond_target, lambda);
  std::vector<Index> idx = greedy_filter(candidates, precond_target, budget, options);
  if (idx.empty()) return finish(sys, {}, Vector());
  Vector w = nnls_solve(sys, idx);
  return finish(sys, std::move(idx), std::move(w));
}

double shapley_first_order(double weight, double alignment, double lr) {
  return -lr * weight * alignment;
}

double second_order_utility(const GramSystem& sys, const Vector& w, double lr) {
  if (w.size() != sys.size()) throw ShapeError("second_order_utility: dimension mismatch");
  return -lr * w.dot(sys.b) + 0.5 * lr * lr * w.dot(sys.G * w);
}

AlignmentArgs alignment_l2_check(const Vector& v, std::span<const Vector> candidates) {
  if (candidates.empty()) throw ShapeError("alignment_l2_check: no candidates");
  const double vn = v.norm();
  if (vn == 0.0) throw NumericError("alignment_l2_check: zero target vector");
  double hmax = 0.0;
  for (const auto& h : candidates) {
    if (h.size() != v.size()) throw ShapeError("alignment_l2_check: dimension mismatch");
    if (h.norm() == 0.0) throw NumericError("alignment_l2_check: zero-norm candidate");
    hmax = std::max(hmax, h.squaredNorm());
  }
  const double ip_tol = 1e-10 * (v.squaredNorm() + hmax);
  const double cos_tol = 1e-10;

  // Lowest index among values within tol of the optimum.
  auto arg_opt = [&](auto&& value, bool maximize, double tol) {
    Index best = 0;
    double best_v = value(candidates[0]);
    for (std::size_t i = 1; i < candidates.size(); ++i) {
      const double x = value(candidates[i]);
      if (maximize ? x > best_v + tol : x < best_v - tol) {
        best = static_cast<Index>(i);
        best_v = x;
      }
    }
    return best;
  };
  const Vector v_hat = v / vn;
  AlignmentArgs out;
  out.argmax_ip = arg_opt([&](const Vector& h) { return v.dot(h); }, true, ip_tol);
  out.argmin_shifted_l2 = arg_opt(
      [&](const Vector& h) { return (v - h).squaredNorm() - h.squaredNorm(); }, false,
      2.0 * ip_tol);
  out.argmax_cos =
      arg_opt([&](const Vector& h) { return v.dot(h) / (vn * h.norm()); }, true, cos_tol);
  out.argmin_unit_l2 = arg_opt(
      [&](const Vector& h) { return (v_hat - h / h.norm()).squaredNorm(); }, false,
      2.0 * cos_tol);
  return out;
}

namespace {

constexpr std::array<std::pair<Strategy, std::string_view>, 9> kStrategyNames{{
    {Strategy::two_stage, "two_stage"},
    {Strategy::omp, "omp"},
    {Strategy::topk_aware, "topk_aware"},
    {Strategy::topk_raw, "topk_raw"},
    {Strategy::random, "random"},
    {Strategy::grad_match, "grad_match"},
    {Strategy::hard_filter_reweight, "hard_filter_reweight"},
    {Strategy::vanilla_reweight, "vanilla_reweight"},
    {Strategy::unbounded, "unbounded"},
}};

constexpr std::array<Strategy, 9> kAllStrategies{
    Strategy::two_stage,  Strategy::omp,        Strategy::topk_aware,
    Strategy::topk_raw,   Strategy::random,     Strategy::grad_match,
    Strategy::hard_filter_reweight, Strategy::vanilla_reweight, Strategy::unbounded};

GramSystem system_for(const StrategyContext& ctx, const ValAggregate& target) {
  GramSystem sys = build_gram_system(ctx.candidates, *ctx.raw_target, target, 0.0);
  if (ctx.params.ridge_relative) {
    set_relative_ridge(sys, ctx.params.ridge);
  } else {
    if (ctx.params.ridge < 0.0) throw ConfigError("ridge must be >= 0");
    sys.lambda = ctx.params.ridge;
  }
  return sys;
}

}  // namespace

Strategy parse_strategy(std::string_view name) {
  for (const auto& [s, n] : kStrategyNames) {
    if (n == name) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

std::string_view to_string(Strategy s) {
  for (const auto& [k, n] : kStrategyNames) {
    if (k == s) return n;
  }
  return "unknown";
}

std::span<const Strategy> all_strategies() { return kAllStrategies; }

SelectionOutcome select(Strategy strategy, const StrategyContext& ctx) {
  if (ctx.raw_target == nullptr || ctx.precond_target == nullptr) {
    throw ConfigError("strategy context needs both raw and preconditioned targets");
  }
  const auto n = static_cast<Index>(ctx.candidates.size());
  check_budget(ctx.budget, n);

  const ValAggregate& aware = *ctx.precond_target;
  ValAggregate raw = *ctx.raw_target;
  raw.preconditioned = true;  // same target used as the alignment side

  const GramSystem sys_aware = system_for(ctx, aware);
  if (degenerate_pool(sys_aware)) {
    std::vector<Index> first(static_cast<std::size_t>(ctx.budget));
    std::iota(first.begin(), first.end(), Index{0});
    return finish(sys_aware, std::move(first), Vector::Zero(ctx.budget));
  }

  FilterOptions aware_filter;
  aware_filter.precondition_residual_updates = ctx.params.precondition_residual_updates;
  aware_filter.preconditioner = ctx.preconditioner;

  switch (strategy) {
    case Strategy::two_stage: {
      auto idx = greedy_filter(ctx.candidates, aware, ctx.budget, aware_filter);
      Vector w = nnls_solve(sys_aware, idx);
      return finish(sys_aware, std::move(idx), std::move(w));
    }
    case Strategy::omp:
      return omp_select(sys_aware, ctx.budget);
    case Strategy::topk_aware:
      return unit_weights(sys_aware, topk_select(sys_aware.b, ctx.budget));
    case Strategy::topk_raw: {
      const GramSystem sys_raw = system_for(ctx, raw);
      return unit_weights(sys_raw, topk_select(sys_raw.b, ctx.budget));
    }
    case Strategy::random: {
      std::mt19937_64 rng(ctx.random_seed);
      std::vector<Index> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), Index{0});
      for (Index i = 0; i < ctx.budget; ++i) {
        std::uniform_int_distribution<Index> pick(i, n - 1);
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[static_cast<std::size_t>(pick(rng))]);
      }
      perm.resize(static_cast<std::size_t>(ctx.budget));
      return unit_weights(sys_aware, std::move(perm));
    }
    case Strategy::grad_match: {
      const GramSystem sys_raw = system_for(ctx, raw);
      auto picked = omp_select(sys_raw, ctx.budget);
      Vector w = nnls_solve(sys_raw, picked.indices);
      return finish(sys_raw, std::move(picked.indices), std::move(w));
    }
    case Strategy::hard_filter_reweight: {
      auto idx = topk_select(sys_aware.b, ctx.budget);
      Vector w = nnls_solve(sys_aware, idx);
      return finish(sys_aware, std::move(idx), std::move(w));
    }
    case Strategy::vanilla_reweight: {
      const GramSystem sys_raw = system_for(ctx, raw);
      auto idx = greedy_filter(ctx.candidates, raw, ctx.budget);
      Vector w = nnls_solve(sys_raw, idx);
      return finish(sys_raw, std::move(idx), std::move(w));
    }
    case Strategy::unbounded: {
      auto idx = greedy_filter(ctx.candidates, aware, ctx.budget, aware_filter);
      Vector w = ridge_solve(sys_aware, idx);
      return finish(sys_aware, std::move(idx), std::move(w));
    }
  }
  throw ConfigError("unhandled strategy");
}

}  // namespace gradsel::selector
