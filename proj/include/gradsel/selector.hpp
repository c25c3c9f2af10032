#pragma once

// Subset selection and weighting over a candidate pool.
//
// The matching objective ||target - sum_i w_i grad_i||^2 + lambda ||w||^2 is
// handled through its expansion into a Gram matrix G (raw candidate inner
// products) and an alignment vector b (candidate against the preconditioned
// target). Greedy filtering, OMP, ridge and NNLS all operate on that system.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradsel/gradcore.hpp"
#include "gradsel/optstate.hpp"

namespace gradsel::selector {

using gradcore::Index;
using gradcore::Matrix;
using gradcore::ProjectedSample;
using gradcore::ValAggregate;
using gradcore::Vector;

struct GramSystem {
  Matrix G;
  Vector b;
  double lambda = 0.0;
  double target_sq_norm = 0.0;

  Index size() const { return b.size(); }
};

struct SelectionOutcome {
  std::vector<Index> indices;  // selection order
  Vector weights;              // aligned with indices
  double objective = 0.0;
  double residual_norm = 0.0;
};

GramSystem build_gram_system(std::span<const ProjectedSample> candidates,
                             const ValAggregate& raw_target,
                             const ValAggregate& precond_target, double lambda);

// lambda = relative * mean(diag G). Leaves lambda at 0 for an all-zero pool.
void set_relative_ridge(GramSystem& sys, double relative);

double objective_value(const GramSystem& sys, const Vector& w);

// Expands subset weights into a length-n vector with zeros elsewhere.
Vector scatter(Index n, std::span<const Index> subset, const Vector& w);

struct FilterOptions {
  // Subtract D (.) grad instead of the raw candidate gradient from the residual.
  bool precondition_residual_updates = false;
  const optstate::Preconditioner* preconditioner = nullptr;
};

// Greedy residual search: r starts at the (preconditioned) target; each round
// picks argmax_i <grad_i, r> over unselected candidates and subtracts the
// picked candidate's gradient from r. Ties go to the lowest index.
std::vector<Index> greedy_filter(std::span<const ProjectedSample> candidates,
                                 const ValAggregate& target, Index budget,
                                 const FilterOptions& options = {});

// (G_S + lambda I)^{-1} b_S; signs unconstrained.
Vector ridge_solve(const GramSystem& sys, std::span<const Index> subset);

// Active-set (Lawson-Hanson) NNLS on the subset: minimizes the objective over
// w >= 0.
Vector nnls_solve(const GramSystem& sys, std::span<const Index> subset);

struct KktReport {
  double scale = 0.0;
  double max_passive_residual = 0.0;  // max |grad_i| over w_i > 0
  double min_active_gradient = 0.0;   // min grad_i over w_i == 0
  double min_weight = 0.0;

  bool satisfied(double rel_tol) const {
    return min_weight >= 0.0 && max_passive_residual <= rel_tol * scale &&
           min_active_gradient >= -rel_tol * scale;
  }
};

// KKT diagnostics for w on the subset, with gradient (G_S + lambda I) w - b_S.
KktReport kkt_check(const GramSystem& sys, std::span<const Index> subset,
                    const Vector& w);

// Forward selection where each trial addition is scored by its ridge-optimal
// objective; the weights come from the final ridge solve.
SelectionOutcome omp_select(const GramSystem& sys, Index budget);

std::vector<Index> topk_select(const Vector& scores, Index budget);

SelectionOutcome two_stage_select(std::span<const ProjectedSample> candidates,
                                  const ValAggregate& raw_target,
                                  const ValAggregate& precond_target, Index budget,
                                  double lambda, const FilterOptions& options = {});

double shapley_first_order(double weight, double alignment, double lr);

// -lr w^T b + (lr^2 / 2) w^T G w.
double second_order_utility(const GramSystem& sys, const Vector& w, double lr);

struct AlignmentArgs {
  Index argmax_ip = -1;
  Index argmin_shifted_l2 = -1;
  Index argmax_cos = -1;
  Index argmin_unit_l2 = -1;
};

AlignmentArgs alignment_l2_check(const Vector& v, std::span<const Vector> candidates);

// ---------------------------------------------------------------------------
// Strategy registry
// ---------------------------------------------------------------------------

enum class Strategy {
  two_stage,
  omp,
  topk_aware,
  topk_raw,
  random,
  grad_match,
  hard_filter_reweight,
  vanilla_reweight,
  unbounded,
};

Strategy parse_strategy(std::string_view name);
std::string_view to_string(Strategy s);
std::span<const Strategy> all_strategies();

struct StrategyParams {
  double ridge = 1e-3;
  bool ridge_relative = true;
  bool precondition_residual_updates = false;
};

struct StrategyContext {
  std::span<const ProjectedSample> candidates;
  const ValAggregate* raw_target = nullptr;
  const ValAggregate* precond_target = nullptr;
  const optstate::Preconditioner* preconditioner = nullptr;
  Index budget = 0;
  StrategyParams params;
  std::uint64_t random_seed = 0;
};

SelectionOutcome select(Strategy strategy, const StrategyContext& ctx);

}  // namespace gradsel::selector
