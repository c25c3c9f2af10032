#pragma once

// Optimizer state in parameter space (the real update) and in projected factor
// space (selection only), plus the frozen diagonal preconditioner derived from
// the projected second moment.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "gradsel/gradcore.hpp"

namespace gradsel::optstate {

using gradcore::Matrix;
using gradcore::ValAggregate;
using gradcore::Vector;

struct AdamState {
  Vector m;
  Vector v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamStep {
  Vector delta;
  AdamState state;
};

Vector sgd_apply(const Vector& g, double lr);

// One bias-corrected Adam step. An empty state (m, v of size 0) is sized to g.
AdamStep adam_update(const AdamState& state, const Vector& g, double lr);

// Second moment of projected batch gradients, one k1 x k2 matrix per layer.
struct ProjectedMoment {
  std::vector<int> layer_ids;
  std::vector<Matrix> per_layer;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static ProjectedMoment zeros(std::span<const gradcore::LayerShape> projected_shapes,
                               double beta1, double beta2, double eps);
};

ProjectedMoment projected_moment_update(const ProjectedMoment& pm,
                                        const ValAggregate& batch_grad);

struct Preconditioner {
  std::vector<int> layer_ids;
  std::vector<Matrix> per_layer;
  std::int64_t source_step = 0;

  static Preconditioner ones(std::span<const gradcore::LayerShape> projected_shapes);
};

// D = (1 - b1) / ((1 - b1^t) (sqrt(v_hat) + eps)), v_hat = V / (1 - b2^t), with
// t = max(pm.t, 1). A fresh moment (t = 0, V = 0) gives D = 1/eps everywhere.
Preconditioner linearized_preconditioner(const ProjectedMoment& pm);

// Moves D onto the validation side: returns D (.) M per layer, flagged.
ValAggregate precondition_target(const ValAggregate& agg, const Preconditioner& d);

// ---------------------------------------------------------------------------
// Checkpoints (GSEL container, kind = optimizer checkpoint)
// ---------------------------------------------------------------------------

struct OptimizerCheckpoint {
  AdamState adam;
  ProjectedMoment moment;
};

void write_checkpoint(std::ostream& out, const OptimizerCheckpoint& ckpt);
OptimizerCheckpoint read_checkpoint(std::istream& in);

}  // namespace gradsel::optstate
