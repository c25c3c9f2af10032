#include "gradsel/gradcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "gradsel/errors.hpp"

namespace gradsel::gradcore {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t counter_hash(std::uint64_t seed, int layer_id, int side,
                           Index row, Index col) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(layer_id)));
  h = mix64(h ^ static_cast<std::uint64_t>(side));
  h = mix64(h ^ static_cast<std::uint64_t>(row));
  h = mix64(h ^ static_cast<std::uint64_t>(col));
  return h;
}

// Uniform in (0, 1].
double unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

std::string layer_tag(int layer_id) {
  return "layer " + std::to_string(layer_id);
}

void validate_layers(std::span<const FactorPair> layers) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& fp = layers[i];
    if (fp.activations.cols() != fp.out_grads.cols()) {
      throw ShapeError(layer_tag(fp.layer_id) +
                       ": activations and out_grads disagree on token count");
    }
    if (fp.activations.cols() < 1) {
      throw ShapeError(layer_tag(fp.layer_id) + ": token count must be >= 1");
    }
    if (i > 0 && fp.layer_id <= layers[i - 1].layer_id) {
      throw ShapeError("layer ids must be strictly increasing (" +
                       layer_tag(fp.layer_id) + ")");
    }
  }
}

void check_pair(std::span<const FactorPair> x, std::span<const FactorPair> y) {
  if (x.size() != y.size()) {
    throw ShapeError("layer count mismatch: " + std::to_string(x.size()) +
                     " vs " + std::to_string(y.size()));
  }
  for (std::size_t l = 0; l < x.size(); ++l) {
    if (x[l].layer_id != y[l].layer_id || x[l].input_dim() != y[l].input_dim() ||
        x[l].output_dim() != y[l].output_dim()) {
      throw ShapeError(layer_tag(x[l].layer_id) + ": factor shapes differ");
    }
  }
}

void check_against(std::span<const FactorPair> x, const ValAggregate& agg) {
  if (x.size() != agg.per_layer.size()) {
    throw ShapeError("layer count mismatch against aggregate");
  }
  for (std::size_t l = 0; l < x.size(); ++l) {
    if (agg.layer_ids[l] != x[l].layer_id ||
        agg.per_layer[l].rows() != x[l].input_dim() ||
        agg.per_layer[l].cols() != x[l].output_dim()) {
      throw ShapeError(layer_tag(x[l].layer_id) +
                       ": sample does not match aggregate shape");
    }
  }
}

double naive_layers(std::span<const FactorPair> x, std::span<const FactorPair> y) {
  check_pair(x, y);
  double total = 0.0;
  for (std::size_t l = 0; l < x.size(); ++l) {
    const Matrix gx = x[l].materialize();
    const Matrix gy = y[l].materialize();
    total += gx.cwiseProduct(gy).sum();
  }
  return total;
}

double ghost_layers(std::span<const FactorPair> x, std::span<const FactorPair> y) {
  check_pair(x, y);
  double total = 0.0;
  for (std::size_t l = 0; l < x.size(); ++l) {
    const Matrix gg = y[l].out_grads.transpose() * x[l].out_grads;
    const Matrix aa = y[l].activations.transpose() * x[l].activations;
    total += gg.cwiseProduct(aa).sum();
  }
  return total;
}

Matrix sketch_matrix(std::uint64_t seed, Distribution distribution, int layer_id,
                     int side, Index k, Index d) {
  Matrix r(k, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(k));
  for (Index j = 0; j < d; ++j) {
    for (Index i = 0; i < k; ++i) {
      r(i, j) = scale * sketch_entry(seed, distribution, layer_id, side, i, j);
    }
  }
  return r;
}

}  // namespace

void validate(const SampleGradient& sample) { validate_layers(sample.layers); }
void validate(const ProjectedSample& sample) { validate_layers(sample.layers); }

double sketch_entry(std::uint64_t seed, Distribution distribution, int layer_id,
                    int side, Index row, Index col) {
  const std::uint64_t h = counter_hash(seed, layer_id, side, row, col);
  if (distribution == Distribution::rademacher) {
    return (h >> 63) != 0 ? 1.0 : -1.0;
  }
  const double u1 = unit_open(mix64(h ^ 0x1ULL));
  const double u2 = unit_open(mix64(h ^ 0x2ULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

ProjectionSpec ProjectionSpec::make(std::uint64_t seed, Distribution distribution,
                                    std::span<const LayerShape> shapes, Index k) {
  return make(seed, distribution, shapes, k, k);
}

ProjectionSpec ProjectionSpec::make(std::uint64_t seed, Distribution distribution,
                                    std::span<const LayerShape> shapes, Index k1,
                                    Index k2) {
  if (k1 < 1 || k2 < 1) throw ShapeError("projection dimension must be >= 1");
  ProjectionSpec spec;
  spec.seed = seed;
  spec.distribution = distribution;
  for (const auto& s : shapes) {
    LayerProjection lp;
    lp.layer_id = s.layer_id;
    if (k1 >= s.d1) {
      lp.act = Matrix::Identity(s.d1, s.d1);
      lp.act_identity = true;
    } else {
      lp.act = sketch_matrix(seed, distribution, s.layer_id, 0, k1, s.d1);
    }
    if (k2 >= s.d2) {
      lp.grad = Matrix::Identity(s.d2, s.d2);
      lp.grad_identity = true;
    } else {
      lp.grad = sketch_matrix(seed, distribution, s.layer_id, 1, k2, s.d2);
    }
    spec.per_layer.push_back(std::move(lp));
  }
  return spec;
}

ProjectionSpec ProjectionSpec::identity(std::span<const LayerShape> shapes) {
  ProjectionSpec spec;
  for (const auto& s : shapes) {
    LayerProjection lp;
    lp.layer_id = s.layer_id;
    lp.act = Matrix::Identity(s.d1, s.d1);
    lp.grad = Matrix::Identity(s.d2, s.d2);
    lp.act_identity = lp.grad_identity = true;
    spec.per_layer.push_back(std::move(lp));
  }
  return spec;
}

std::vector<LayerShape> ProjectionSpec::projected_shapes() const {
  std::vector<LayerShape> out;
  out.reserve(per_layer.size());
  for (const auto& lp : per_layer) {
    out.push_back({lp.layer_id, lp.act.rows(), lp.grad.rows()});
  }
  return out;
}

std::vector<LayerShape> shapes_of(const SampleGradient& sample) {
  std::vector<LayerShape> out;
  for (const auto& fp : sample.layers) {
    out.push_back({fp.layer_id, fp.input_dim(), fp.output_dim()});
  }
  return out;
}

ProjectedSample project_sample(const SampleGradient& sample,
                               const ProjectionSpec& spec) {
  if (sample.layers.size() != spec.per_layer.size()) {
    throw ShapeError("projection spec has " + std::to_string(spec.per_layer.size()) +
                     " layers, sample has " + std::to_string(sample.layers.size()));
  }
  ProjectedSample out;
  out.sample_id = sample.sample_id;
  out.layers.reserve(sample.layers.size());
  for (std::size_t l = 0; l < sample.layers.size(); ++l) {
    const auto& fp = sample.layers[l];
    const auto& lp = spec.per_layer[l];
    if (lp.layer_id != fp.layer_id || lp.act.cols() != fp.input_dim() ||
        lp.grad.cols() != fp.output_dim()) {
      throw ShapeError(layer_tag(fp.layer_id) + ": projection expects d1=" +
                       std::to_string(lp.act.cols()) + ", d2=" +
                       std::to_string(lp.grad.cols()) + " but sample has d1=" +
                       std::to_string(fp.input_dim()) + ", d2=" +
                       std::to_string(fp.output_dim()));
    }
    FactorPair p;
    p.layer_id = fp.layer_id;
    p.activations = lp.act_identity ? fp.activations : Matrix(lp.act * fp.activations);
    p.out_grads = lp.grad_identity ? fp.out_grads : Matrix(lp.grad * fp.out_grads);
    out.layers.push_back(std::move(p));
  }
  return out;
}

ProjectedSample as_projected(const SampleGradient& sample) {
  return ProjectedSample{sample.sample_id, sample.layers};
}

double inner_naive(const SampleGradient& x, const SampleGradient& y) {
  return naive_layers(x.layers, y.layers);
}
double inner_naive(const ProjectedSample& x, const ProjectedSample& y) {
  return naive_layers(x.layers, y.layers);
}
double inner_ghost(const SampleGradient& x, const SampleGradient& y) {
  return ghost_layers(x.layers, y.layers);
}
double inner_ghost(const ProjectedSample& x, const ProjectedSample& y) {
  return ghost_layers(x.layers, y.layers);
}

ValAggregate ValAggregate::zeros_like(const ValAggregate& other) {
  ValAggregate out;
  out.layer_ids = other.layer_ids;
  for (const auto& m : other.per_layer) {
    out.per_layer.push_back(Matrix::Zero(m.rows(), m.cols()));
  }
  return out;
}

double ValAggregate::squared_norm() const {
  double total = 0.0;
  for (const auto& m : per_layer) total += m.squaredNorm();
  return total;
}

ValAggregate weighted_aggregate(std::span<const ProjectedSample> samples,
                                std::span<const double> weights) {
  if (samples.empty()) throw ShapeError("cannot aggregate an empty sample list");
  if (!weights.empty() && weights.size() != samples.size()) {
    throw ShapeError("weight count does not match sample count");
  }
  const auto& first = samples.front().layers;
  ValAggregate agg;
  for (const auto& fp : first) {
    agg.layer_ids.push_back(fp.layer_id);
    agg.per_layer.push_back(Matrix::Zero(fp.input_dim(), fp.output_dim()));
  }
  for (std::size_t j = 0; j < samples.size(); ++j) {
    check_pair(first, samples[j].layers);
    validate_layers(samples[j].layers);
    const double w = weights.empty() ? 1.0 : weights[j];
    for (std::size_t l = 0; l < first.size(); ++l) {
      const auto& fp = samples[j].layers[l];
      if (w == 1.0) {
        agg.per_layer[l].noalias() += fp.activations * fp.out_grads.transpose();
      } else {
        agg.per_layer[l].noalias() += w * (fp.activations * fp.out_grads.transpose());
      }
    }
  }
  agg.count = static_cast<std::int64_t>(samples.size());
  return agg;
}

ValAggregate val_aggregate(std::span<const ProjectedSample> val) {
  return weighted_aggregate(val);
}

double inner_reordered(const ProjectedSample& x, const ValAggregate& agg,
                       ReorderForm form) {
  check_against(x.layers, agg);
  double total = 0.0;
  for (std::size_t l = 0; l < x.layers.size(); ++l) {
    const auto& fp = x.layers[l];
    const Matrix& m = agg.per_layer[l];
    if (form == ReorderForm::target_first) {
      const Matrix am = fp.activations.transpose() * m;  // T x k2
      total += am.cwiseProduct(fp.out_grads.transpose()).sum();
    } else {
      const Matrix mg = m * fp.out_grads;  // k1 x T
      total += mg.cwiseProduct(fp.activations).sum();
    }
  }
  return total;
}

double inner_reordered(const ProjectedSample& x, const ValAggregate& agg) {
  if (x.layers.empty()) return 0.0;
  const auto& fp = x.layers.front();
  KernelDims dims;
  dims.L = static_cast<std::int64_t>(x.layers.size());
  dims.T = fp.tokens();
  dims.B_tr = 1;
  dims.B_val = std::max<std::int64_t>(agg.count, 1);
  dims.d1 = fp.input_dim();
  dims.d2 = fp.output_dim();
  return inner_reordered(x, agg, choose_reorder_form(dims));
}

double kfac_second_order_score(const ProjectedSample& x,
                               std::span<const ProjectedSample> candidates,
                               std::span<const ProjectedSample> val) {
  if (val.empty()) throw ShapeError("K-FAC score needs a non-empty validation set");
  for (const auto& m : val) check_pair(x.layers, m.layers);
  for (const auto& k : candidates) check_pair(x.layers, k.layers);

  double total = 0.0;
  for (std::size_t l = 0; l < x.layers.size(); ++l) {
    const auto& xi = x.layers[l];
    std::vector<Matrix> gxm, axm;  // T_x x T_m
    gxm.reserve(val.size());
    axm.reserve(val.size());
    for (const auto& m : val) {
      gxm.push_back(xi.out_grads.transpose() * m.layers[l].out_grads);
      axm.push_back(xi.activations.transpose() * m.layers[l].activations);
    }
    for (const auto& k : candidates) {
      const auto& kl = k.layers[l];
      Matrix gg = Matrix::Zero(xi.tokens(), kl.tokens());
      Matrix aa = Matrix::Zero(xi.tokens(), kl.tokens());
      for (std::size_t m = 0; m < val.size(); ++m) {
        const auto& ml = val[m].layers[l];
        gg.noalias() += gxm[m] * (ml.out_grads.transpose() * kl.out_grads);
        aa.noalias() += axm[m] * (ml.activations.transpose() * kl.activations);
      }
      total += gg.cwiseProduct(aa).sum();
    }
  }
  return total;
}

KernelCost cost_model(Kernel kernel, const KernelDims& d) {
  const std::int64_t L = d.L, T = d.T, Btr = d.B_tr, Bval = d.B_val, d1 = d.d1,
                     d2 = d.d2;
  KernelCost c;
  switch (kernel) {
    case Kernel::naive:
      c.time_ops = L * T * T * Btr * Bval * d1 * d2;
      c.space_units = L * Btr * Bval * d1 * d2;
      break;
    case Kernel::ghost:
      c.time_ops = L * T * T * Btr * Bval * (d1 + d2);
      c.space_units = L * T * (Btr + Bval) * d1 + T * T * Btr * Bval;
      break;
    case Kernel::reordered:
      c.time_ops = L * T * Btr * d2 * (Bval * d1 + T);
      c.space_units = L * T * (Btr + Bval) * d1 + Btr * d2 * std::max(d1, T);
      break;
    case Kernel::reordered_grad_first:
      c.time_ops = L * T * Btr * d1 * (Bval * d2 + T);
      c.space_units = L * T * (Btr + Bval) * d1 + Btr * d1 * std::max(d2, T);
      break;
  }
  return c;
}

ReorderForm choose_reorder_form(const KernelDims& dims) {
  const auto a = cost_model(Kernel::reordered, dims).time_ops;
  const auto b = cost_model(Kernel::reordered_grad_first, dims).time_ops;
  return b < a ? ReorderForm::grad_first : ReorderForm::target_first;
}

const char* to_string(Kernel kernel) {
  switch (kernel) {
    case Kernel::naive: return "naive";
    case Kernel::ghost: return "ghost";
    case Kernel::reordered: return "reordered";
    case Kernel::reordered_grad_first: return "reordered_grad_first";
  }
  return "unknown";
}

}  // namespace gradsel::gradcore
