#include "gradsel/optstate.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "gradsel/container.hpp"
#include "gradsel/errors.hpp"

namespace gradsel::optstate {

namespace {

void require_finite(const Vector& g, const char* what) {
  if (!g.allFinite()) throw NumericError(std::string(what) + ": non-finite gradient");
}

void check_layers(const std::vector<int>& ids, const std::vector<Matrix>& mats,
                  const ValAggregate& agg, const char* what) {
  if (mats.size() != agg.per_layer.size()) {
    throw ShapeError(std::string(what) + ": layer count mismatch");
  }
  for (std::size_t l = 0; l < mats.size(); ++l) {
    if (ids[l] != agg.layer_ids[l] || mats[l].rows() != agg.per_layer[l].rows() ||
        mats[l].cols() != agg.per_layer[l].cols()) {
      throw ShapeError(std::string(what) + ": shape mismatch in layer " +
                       std::to_string(agg.layer_ids[l]));
    }
  }
}

}  // namespace

Vector sgd_apply(const Vector& g, double lr) {
  require_finite(g, "sgd_apply");
  return -lr * g;
}

AdamStep adam_update(const AdamState& state, const Vector& g, double lr) {
  require_finite(g, "adam_update");
  if (state.t < 0) throw NumericError("adam_update: negative step counter");
  AdamStep out;
  out.state = state;
  AdamState& s = out.state;
  if (s.m.size() == 0) s.m = Vector::Zero(g.size());
  if (s.v.size() == 0) s.v = Vector::Zero(g.size());
  if (s.m.size() != g.size() || s.v.size() != g.size()) {
    throw ShapeError("adam_update: state size does not match gradient");
  }
  s.t += 1;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * g;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  const Vector m_hat = s.m / c1;
  const Vector v_hat = s.v / c2;
  out.delta = -lr * (m_hat.array() / (v_hat.array().sqrt() + s.eps)).matrix();
  return out;
}

ProjectedMoment ProjectedMoment::zeros(std::span<const gradcore::LayerShape> shapes,
                                       double beta1, double beta2, double eps) {
  ProjectedMoment pm;
  pm.beta1 = beta1;
  pm.beta2 = beta2;
  pm.eps = eps;
  for (const auto& s : shapes) {
    pm.layer_ids.push_back(s.layer_id);
    pm.per_layer.push_back(Matrix::Zero(s.d1, s.d2));
  }
  return pm;
}

ProjectedMoment projected_moment_update(const ProjectedMoment& pm,
                                        const ValAggregate& batch_grad) {
  check_layers(pm.layer_ids, pm.per_layer, batch_grad, "projected_moment_update");
  ProjectedMoment out = pm;
  for (std::size_t l = 0; l < out.per_layer.size(); ++l) {
    if (!batch_grad.per_layer[l].allFinite()) {
      throw NumericError("projected_moment_update: non-finite batch gradient");
    }
    out.per_layer[l] =
        pm.beta2 * pm.per_layer[l] + (1.0 - pm.beta2) * batch_grad.per_layer[l].cwiseAbs2();
  }
  out.t = pm.t + 1;
  return out;
}

Preconditioner Preconditioner::ones(std::span<const gradcore::LayerShape> shapes) {
  Preconditioner d;
  for (const auto& s : shapes) {
    d.layer_ids.push_back(s.layer_id);
    d.per_layer.push_back(Matrix::Ones(s.d1, s.d2));
  }
  return d;
}

Preconditioner linearized_preconditioner(const ProjectedMoment& pm) {
  const double t = static_cast<double>(std::max<std::int64_t>(pm.t, 1));
  const double scale = (1.0 - pm.beta1) / (1.0 - std::pow(pm.beta1, t));
  const double v_corr = 1.0 - std::pow(pm.beta2, t);
  Preconditioner d;
  d.layer_ids = pm.layer_ids;
  d.source_step = pm.t;
  for (const auto& v : pm.per_layer) {
    const auto v_hat = v.array() / v_corr;
    d.per_layer.push_back((scale / (v_hat.sqrt() + pm.eps)).matrix());
  }
  return d;
}

ValAggregate precondition_target(const ValAggregate& agg, const Preconditioner& d) {
  if (agg.preconditioned) {
    throw NumericError("precondition_target: target is already preconditioned");
  }
  check_layers(d.layer_ids, d.per_layer, agg, "precondition_target");
  ValAggregate out = agg;
  for (std::size_t l = 0; l < out.per_layer.size(); ++l) {
    out.per_layer[l] = d.per_layer[l].cwiseProduct(agg.per_layer[l]);
  }
  out.preconditioned = true;
  return out;
}

void write_checkpoint(std::ostream& out, const OptimizerCheckpoint& ckpt) {
  using namespace container;
  const auto& pm = ckpt.moment;
  Header h;
  h.kind = PayloadKind::optimizer_checkpoint;
  h.count = 1;
  for (std::size_t l = 0; l < pm.per_layer.size(); ++l) {
    h.layers.push_back({pm.layer_ids[l], pm.per_layer[l].rows(), pm.per_layer[l].cols()});
  }
  write_header(out, h);
  const auto& a = ckpt.adam;
  if (a.m.size() != a.v.size()) throw ShapeError("checkpoint: m and v differ in size");
  write_i64(out, a.t);
  write_f64(out, a.beta1);
  write_f64(out, a.beta2);
  write_f64(out, a.eps);
  write_u64(out, static_cast<std::uint64_t>(a.m.size()));
  for (Eigen::Index i = 0; i < a.m.size(); ++i) write_f64(out, a.m[i]);
  for (Eigen::Index i = 0; i < a.v.size(); ++i) write_f64(out, a.v[i]);
  write_i64(out, pm.t);
  write_f64(out, pm.beta1);
  write_f64(out, pm.beta2);
  write_f64(out, pm.eps);
  for (const auto& v : pm.per_layer) write_matrix(out, v);
}

OptimizerCheckpoint read_checkpoint(std::istream& in) {
  using namespace container;
  const Header h = read_header(in);
  if (h.kind != PayloadKind::optimizer_checkpoint) {
    throw Error("GSEL: payload is not an optimizer checkpoint");
  }
  OptimizerCheckpoint ckpt;
  auto& a = ckpt.adam;
  a.t = read_i64(in);
  a.beta1 = read_f64(in);
  a.beta2 = read_f64(in);
  a.eps = read_f64(in);
  const auto n = static_cast<Eigen::Index>(read_u64(in));
  a.m.resize(n);
  a.v.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) a.m[i] = read_f64(in);
  for (Eigen::Index i = 0; i < n; ++i) a.v[i] = read_f64(in);
  auto& pm = ckpt.moment;
  pm.t = read_i64(in);
  pm.beta1 = read_f64(in);
  pm.beta2 = read_f64(in);
  pm.eps = read_f64(in);
  for (const auto& s : h.layers) {
    pm.layer_ids.push_back(s.layer_id);
    pm.per_layer.push_back(read_matrix(in, s.d1, s.d2));
  }
  return ckpt;
}

}  // namespace gradsel::optstate
