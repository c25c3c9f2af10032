#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "gradsel/config.hpp"
#include "gradsel/errors.hpp"
#include "gradsel/gradcore.hpp"
#include "gradsel/harness.hpp"
#include "gradsel/optstate.hpp"
#include "gradsel/selector.hpp"
#include "gradsel/simkit.hpp"

namespace py = pybind11;
using namespace gradsel;
using gradcore::Matrix;
using gradcore::ProjectedSample;
using gradcore::ValAggregate;
using gradcore::Vector;

namespace {

using Layers = std::vector<std::pair<Matrix, Matrix>>;

template <class S>
S make_sample(const Layers& layers, std::int64_t id) {
  S s;
  s.sample_id = id;
  for (std::size_t i = 0; i < layers.size(); ++i)
    s.layers.push_back(gradcore::FactorPair{static_cast<int>(i), layers[i].first, layers[i].second});
  gradcore::validate(s);
  return s;
}

ValAggregate make_aggregate(const std::vector<Matrix>& ms, std::int64_t count, bool preconditioned) {
  ValAggregate a;
  for (std::size_t i = 0; i < ms.size(); ++i) a.layer_ids.push_back(static_cast<int>(i));
  a.per_layer = ms;
  a.count = count;
  a.preconditioned = preconditioned;
  return a;
}

optstate::Preconditioner make_preconditioner(const std::vector<Matrix>& ms, std::int64_t step) {
  optstate::Preconditioner d;
  for (std::size_t i = 0; i < ms.size(); ++i) d.layer_ids.push_back(static_cast<int>(i));
  d.per_layer = ms;
  d.source_step = step;
  return d;
}

py::dict outcome_dict(const selector::SelectionOutcome& o) {
  py::dict d;
  d["indices"] = o.indices;
  d["weights"] = o.weights;
  d["objective"] = o.objective;
  d["residual_norm"] = o.residual_norm;
  return d;
}

py::list rows_list(const std::vector<simkit::MetricsRow>& rows) {
  py::list out;
  for (const auto& r : rows) {
    py::dict d;
    d["step"] = r.step;
    d["target_loss"] = r.target_loss;
    d["eval_accuracy"] = r.eval_accuracy;
    d["selected_clean_fraction"] = r.selected_clean_fraction;
    d["objective_value"] = r.objective_value;
    d["weights_entropy"] = r.weights_entropy;
    d["cumulative_data_fraction"] = r.cumulative_data_fraction;
    d["status"] = r.status;
    out.append(d);
  }
  return out;
}

gradcore::ReorderForm parse_form(const std::string& name) {
  if (name == "target_first") return gradcore::ReorderForm::target_first;
  if (name == "grad_first") return gradcore::ReorderForm::grad_first;
  throw ConfigError("unknown reorder form '" + name + "'");
}

gradcore::Distribution parse_distribution(const std::string& name) {
  if (name == "rademacher") return gradcore::Distribution::rademacher;
  if (name == "gaussian") return gradcore::Distribution::gaussian;
  throw ConfigError("unknown distribution '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_gradsel, m) {
  m.doc() = "Optimizer-aware gradient matching for online data selection";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  // Samples are lists of (activations d1 x T, out_grads d2 x T) per layer.
  py::class_<gradcore::SampleGradient>(m, "SampleGradient")
      .def(py::init(&make_sample<gradcore::SampleGradient>), py::arg("layers"), py::arg("sample_id") = 0)
      .def_readonly("sample_id", &gradcore::SampleGradient::sample_id)
      .def_property_readonly("num_layers", [](const gradcore::SampleGradient& s) { return s.layers.size(); })
      .def("materialize", [](const gradcore::SampleGradient& s) {
        std::vector<Matrix> out;
        for (const auto& l : s.layers) out.push_back(l.materialize());
        return out;
      });

  py::class_<ProjectedSample>(m, "ProjectedSample")
      .def(py::init(&make_sample<ProjectedSample>), py::arg("layers"), py::arg("sample_id") = 0)
      .def_readonly("sample_id", &ProjectedSample::sample_id)
      .def_property_readonly("num_layers", [](const ProjectedSample& s) { return s.layers.size(); })
      .def("factors", [](const ProjectedSample& s) {
        Layers out;
        for (const auto& l : s.layers) out.emplace_back(l.activations, l.out_grads);
        return out;
      });

  py::class_<ValAggregate>(m, "ValAggregate")
      .def(py::init(&make_aggregate), py::arg("per_layer"), py::arg("count") = 1,
           py::arg("preconditioned") = false)
      .def_readonly("per_layer", &ValAggregate::per_layer)
      .def_readonly("count", &ValAggregate::count)
      .def_readonly("preconditioned", &ValAggregate::preconditioned)
      .def("squared_norm", &ValAggregate::squared_norm);

  py::class_<gradcore::ProjectionSpec>(m, "ProjectionSpec")
      .def_readonly("seed", &gradcore::ProjectionSpec::seed)
      .def("matrices", [](const gradcore::ProjectionSpec& p) {
        std::vector<std::pair<Matrix, Matrix>> out;
        for (const auto& l : p.per_layer) out.emplace_back(l.act, l.grad);
        return out;
      });

  m.def(
      "make_projection",
      [](std::uint64_t seed, const std::vector<std::pair<gradcore::Index, gradcore::Index>>& dims,
         gradcore::Index k, const std::string& distribution) {
        std::vector<gradcore::LayerShape> shapes;
        for (std::size_t i = 0; i < dims.size(); ++i)
          shapes.push_back({static_cast<int>(i), dims[i].first, dims[i].second});
        return gradcore::ProjectionSpec::make(seed, parse_distribution(distribution), shapes, k);
      },
      py::arg("seed"), py::arg("dims"), py::arg("k"), py::arg("distribution") = "rademacher",
      "Per-layer sketches for (d1, d2) layer dimensions.");
  m.def("project", &gradcore::project_sample, py::arg("sample"), py::arg("spec"));
  m.def("as_projected", &gradcore::as_projected);

  m.def("inner_naive", py::overload_cast<const ProjectedSample&, const ProjectedSample&>(&gradcore::inner_naive));
  m.def("inner_naive",
        py::overload_cast<const gradcore::SampleGradient&, const gradcore::SampleGradient&>(&gradcore::inner_naive));
  m.def("inner_ghost", py::overload_cast<const ProjectedSample&, const ProjectedSample&>(&gradcore::inner_ghost));
  m.def("inner_ghost",
        py::overload_cast<const gradcore::SampleGradient&, const gradcore::SampleGradient&>(&gradcore::inner_ghost));
  m.def(
      "inner_reordered",
      [](const ProjectedSample& x, const ValAggregate& agg, const std::string& form) {
        return gradcore::inner_reordered(x, agg, parse_form(form));
      },
      py::arg("x"), py::arg("target"), py::arg("form") = "target_first");
  m.def("val_aggregate", [](const std::vector<ProjectedSample>& val) { return gradcore::val_aggregate(val); });
  m.def(
      "weighted_aggregate",
      [](const std::vector<ProjectedSample>& s, const std::vector<double>& w) {
        return gradcore::weighted_aggregate(s, w);
      },
      py::arg("samples"), py::arg("weights") = std::vector<double>{});
  m.def(
      "kfac_second_order_score",
      [](const ProjectedSample& x, const std::vector<ProjectedSample>& cands, const std::vector<ProjectedSample>& val) {
        return gradcore::kfac_second_order_score(x, cands, val);
      });

  m.def(
      "linearized_preconditioner",
      [](const std::vector<Matrix>& moment, std::int64_t t, double beta1, double beta2, double eps) {
        optstate::ProjectedMoment pm;
        for (std::size_t i = 0; i < moment.size(); ++i) pm.layer_ids.push_back(static_cast<int>(i));
        pm.per_layer = moment;
        pm.t = t;
        pm.beta1 = beta1;
        pm.beta2 = beta2;
        pm.eps = eps;
        return optstate::linearized_preconditioner(pm).per_layer;
      },
      py::arg("moment"), py::arg("t"), py::arg("beta1") = 0.9, py::arg("beta2") = 0.999, py::arg("eps") = 1e-8);
  m.def(
      "precondition_target",
      [](const ValAggregate& agg, const std::vector<Matrix>& d) {
        return optstate::precondition_target(agg, make_preconditioner(d, 0));
      },
      py::arg("target"), py::arg("preconditioner"));
  m.def(
      "adam_update",
      [](const Vector& m1, const Vector& v, std::int64_t t, const Vector& g, double lr) {
        optstate::AdamState s;
        s.m = m1;
        s.v = v;
        s.t = t;
        const auto r = optstate::adam_update(s, g, lr);
        return py::make_tuple(r.delta, r.state.m, r.state.v, r.state.t);
      },
      py::arg("m"), py::arg("v"), py::arg("t"), py::arg("grad"), py::arg("lr"),
      "Returns (delta, m, v, t).");

  m.def(
      "gram_system",
      [](const std::vector<ProjectedSample>& cands, const ValAggregate& raw, const ValAggregate& pre, double lambda) {
        const auto sys = selector::build_gram_system(cands, raw, pre, lambda);
        return py::make_tuple(sys.G, sys.b);
      },
      py::arg("candidates"), py::arg("raw_target"), py::arg("precond_target"), py::arg("lam") = 0.0,
      "Returns (G, b).");

  auto sys_of = [](const Matrix& G, const Vector& b, double lambda) {
    selector::GramSystem s;
    s.G = G;
    s.b = b;
    s.lambda = lambda;
    return s;
  };
  m.def(
      "ridge_solve",
      [sys_of](const Matrix& G, const Vector& b, const std::vector<gradcore::Index>& subset, double lambda) {
        return selector::ridge_solve(sys_of(G, b, lambda), subset);
      },
      py::arg("G"), py::arg("b"), py::arg("subset"), py::arg("lam") = 0.0);
  m.def(
      "nnls_solve",
      [sys_of](const Matrix& G, const Vector& b, const std::vector<gradcore::Index>& subset, double lambda) {
        return selector::nnls_solve(sys_of(G, b, lambda), subset);
      },
      py::arg("G"), py::arg("b"), py::arg("subset"), py::arg("lam") = 0.0);
  m.def(
      "omp_select",
      [sys_of](const Matrix& G, const Vector& b, gradcore::Index budget, double lambda) {
        return outcome_dict(selector::omp_select(sys_of(G, b, lambda), budget));
      },
      py::arg("G"), py::arg("b"), py::arg("budget"), py::arg("lam") = 0.0);
  m.def("topk_select", &selector::topk_select, py::arg("scores"), py::arg("budget"));
  m.def(
      "greedy_filter",
      [](const std::vector<ProjectedSample>& cands, const ValAggregate& target, gradcore::Index budget) {
        return selector::greedy_filter(cands, target, budget);
      },
      py::arg("candidates"), py::arg("target"), py::arg("budget"));
  m.def(
      "two_stage_select",
      [](const std::vector<ProjectedSample>& cands, const ValAggregate& raw, const ValAggregate& pre,
         gradcore::Index budget, double lambda) {
        return outcome_dict(selector::two_stage_select(cands, raw, pre, budget, lambda));
      },
      py::arg("candidates"), py::arg("raw_target"), py::arg("precond_target"), py::arg("budget"),
      py::arg("lam") = 0.0);
  m.def(
      "select",
      [](const std::string& strategy, const std::vector<ProjectedSample>& cands, const ValAggregate& raw,
         const ValAggregate& pre, const std::vector<Matrix>& d, gradcore::Index budget, std::uint64_t seed) {
        const auto precond = make_preconditioner(d, 0);
        selector::StrategyContext ctx;
        ctx.candidates = cands;
        ctx.raw_target = &raw;
        ctx.precond_target = &pre;
        ctx.preconditioner = &precond;
        ctx.budget = budget;
        ctx.random_seed = seed;
        return outcome_dict(selector::select(selector::parse_strategy(strategy), ctx));
      },
      py::arg("strategy"), py::arg("candidates"), py::arg("raw_target"), py::arg("precond_target"),
      py::arg("preconditioner"), py::arg("budget"), py::arg("seed") = 0);
  m.def("strategies", [] {
    std::vector<std::string> out;
    for (auto s : selector::all_strategies()) out.emplace_back(selector::to_string(s));
    return out;
  });

  // Configs travel as JSON text.
  m.def("parse_config", [](const std::string& text) { return config::serialize(config::parse(text)); },
        "Validates a config and returns it with every default filled in.");
  m.def(
      "planned_steps", [](const std::string& text) { return simkit::planned_steps(config::parse(text).sim); },
      py::arg("config") = "{}");
  m.def(
      "run_online",
      [](const std::string& text, const std::string& strategy, std::uint64_t seed) {
        const auto cfg = config::parse(text);
        simkit::RunResult r;
        {
          py::gil_scoped_release release;
          r = simkit::run_online(cfg.sim, selector::parse_strategy(strategy), seed);
        }
        py::dict d;
        d["rows"] = rows_list(r.rows);
        d["steps_taken"] = r.steps_taken;
        d["consumed"] = r.consumed;
        d["any_negative_weight"] = r.any_negative_weight;
        d["stream_exhausted"] = r.stream_exhausted;
        return d;
      },
      py::arg("config"), py::arg("strategy"), py::arg("seed"));
  m.def(
      "run_experiment",
      [](const std::string& text, const std::string& out_dir, int threads) {
        const auto cfg = config::parse(text);
        harness::ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = harness::run_experiment(cfg, out_dir, threads);
        }
        return r.summary_json;
      },
      py::arg("config"), py::arg("out_dir"), py::arg("threads") = 0,
      "Writes per-run CSVs, summary.json and timing.json; returns the summary JSON.");
  m.def(
      "bench_kernels",
      [](const std::string& grid, int reps) {
        harness::BenchOptions opts;
        if (!grid.empty()) harness::parse_grid(grid, opts);
        opts.reps = reps;
        harness::BenchReport rep;
        {
          py::gil_scoped_release release;
          rep = harness::bench_kernels(opts);
        }
        py::list rows;
        for (const auto& r : rep.rows) {
          py::dict d;
          d["kernel"] = gradcore::to_string(r.kernel);
          d["d"] = r.dims.d1;
          d["T"] = r.dims.T;
          d["seconds"] = r.seconds;
          d["predicted_ops"] = r.predicted_ops;
          rows.append(d);
        }
        py::dict d;
        d["rows"] = rows;
        d["spearman"] = rep.spearman;
        d["min_kernel_spearman"] = rep.min_kernel_spearman();
        return d;
      },
      py::arg("grid") = "", py::arg("reps") = 5);
}
