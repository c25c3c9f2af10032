#pragma once

// Factorized per-sample gradients for linear layers.
//
// A linear layer s = W^T a has per-sample weight gradient g a^T, where a (d1 x T)
// holds the layer inputs per token position and g (d2 x T) the loss gradient
// with respect to the pre-activations. Everything here works on the factors and
// never needs the d2 x d1 gradient except in the reference kernel.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace gradsel::gradcore {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct FactorPair {
  int layer_id = 0;
  Matrix activations;  // d1 x T
  Matrix out_grads;    // d2 x T

  Index input_dim() const { return activations.rows(); }
  Index output_dim() const { return out_grads.rows(); }
  Index tokens() const { return activations.cols(); }

  // g a^T, summed over token positions (d2 x d1).
  Matrix materialize() const { return out_grads * activations.transpose(); }
};

struct SampleGradient {
  std::int64_t sample_id = 0;
  std::vector<FactorPair> layers;
};

// Same layout as SampleGradient, but the factors live in sketch space:
// activations are R_a a (k1 x T) and out_grads are R_g g (k2 x T).
struct ProjectedSample {
  std::int64_t sample_id = 0;
  std::vector<FactorPair> layers;
};

// Validates a FactorPair and the uniformity rules of a sample (strictly
// increasing layer ids, equal token counts within a layer). Throws ShapeError.
void validate(const SampleGradient& sample);
void validate(const ProjectedSample& sample);

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

enum class Distribution { gaussian, rademacher };

struct LayerShape {
  int layer_id = 0;
  Index d1 = 0;  // activation dimension
  Index d2 = 0;  // output-gradient dimension
};

struct LayerProjection {
  int layer_id = 0;
  Matrix act;   // k1 x d1
  Matrix grad;  // k2 x d2
  bool act_identity = false;
  bool grad_identity = false;
};

// Seeded per-layer sketching matrices. Entries are generated from a
// counter-based hash of (seed, layer_id, side, row, col), so a spec can be
// rebuilt bit-for-bit from its parameters alone. A side whose requested
// dimension is >= the input dimension uses the identity instead of a sketch.
struct ProjectionSpec {
  std::uint64_t seed = 0;
  Distribution distribution = Distribution::rademacher;
  std::vector<LayerProjection> per_layer;

  static ProjectionSpec make(std::uint64_t seed, Distribution distribution,
                             std::span<const LayerShape> shapes, Index k);
  static ProjectionSpec make(std::uint64_t seed, Distribution distribution,
                             std::span<const LayerShape> shapes, Index k1,
                             Index k2);
  static ProjectionSpec identity(std::span<const LayerShape> shapes);

  // The (k1, k2) sketch dimensions per layer, in layer order.
  std::vector<LayerShape> projected_shapes() const;
};

// A single sketch entry, before 1/sqrt(k) scaling. Exposed for tests.
double sketch_entry(std::uint64_t seed, Distribution distribution, int layer_id,
                    int side, Index row, Index col);

std::vector<LayerShape> shapes_of(const SampleGradient& sample);

ProjectedSample project_sample(const SampleGradient& sample,
                               const ProjectionSpec& spec);

// Treats an unprojected sample as a projected one (identity sketch).
ProjectedSample as_projected(const SampleGradient& sample);

// ---------------------------------------------------------------------------
// Inner products
// ---------------------------------------------------------------------------

// Reference kernel: materializes both per-layer gradients.
double inner_naive(const SampleGradient& x, const SampleGradient& y);
double inner_naive(const ProjectedSample& x, const ProjectedSample& y);

// Ghost dot-product: sum over layers of <g_y^T g_x, a_y^T a_x>_F using T x T
// interaction matrices.
double inner_ghost(const SampleGradient& x, const SampleGradient& y);
double inner_ghost(const ProjectedSample& x, const ProjectedSample& y);

// Per-layer target matrices in k1 x k2 layout, i.e. sum_j a_j g_j^T. The same
// type carries the optimizer-preconditioned target and the greedy residual.
struct ValAggregate {
  std::vector<int> layer_ids;
  std::vector<Matrix> per_layer;
  std::int64_t count = 0;
  bool preconditioned = false;

  static ValAggregate zeros_like(const ValAggregate& other);
  double squared_norm() const;
};

ValAggregate val_aggregate(std::span<const ProjectedSample> val);

// sum_i w_i a_i g_i^T per layer; the projected image of a weighted batch
// gradient. Empty weight span means unit weights.
ValAggregate weighted_aggregate(std::span<const ProjectedSample> samples,
                                std::span<const double> weights = {});

// Contraction order for the reordered product. `target_first` evaluates
// (a^T M) against g; `grad_first` evaluates (M g) against a.
enum class ReorderForm { target_first, grad_first };

// <x, agg>: sum over layers and tokens of a[:,t]^T M g[:,t].
double inner_reordered(const ProjectedSample& x, const ValAggregate& agg);
double inner_reordered(const ProjectedSample& x, const ValAggregate& agg,
                       ReorderForm form);

// Second-order score of x against a candidate set under the K-FAC
// approximation of the validation Hessian (per layer G (x) A with
// G = sum_m g_m g_m^T, A = sum_m a_m a_m^T):
//   sum_l sum_k < sum_m (g_x^T g_m)(g_m^T g_k), sum_m (a_x^T a_m)(a_m^T a_k) >_F
// With T = 1 every factor is a scalar and this is the familiar product of
// two double sums.
double kfac_second_order_score(const ProjectedSample& x,
                               std::span<const ProjectedSample> candidates,
                               std::span<const ProjectedSample> val);

// ---------------------------------------------------------------------------
// Cost model (leading-order terms per batch)
// ---------------------------------------------------------------------------

enum class Kernel { naive, ghost, reordered, reordered_grad_first };

struct KernelDims {
  std::int64_t L = 1;
  std::int64_t T = 1;
  std::int64_t B_tr = 1;
  std::int64_t B_val = 1;
  std::int64_t d1 = 1;
  std::int64_t d2 = 1;
};

struct KernelCost {
  std::int64_t time_ops = 0;
  std::int64_t space_units = 0;
};

KernelCost cost_model(Kernel kernel, const KernelDims& dims);

// Cheaper of the two reordered contraction orders; ties go to target_first.
ReorderForm choose_reorder_form(const KernelDims& dims);

const char* to_string(Kernel kernel);

}  // namespace gradsel::gradcore
