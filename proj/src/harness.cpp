#include "gradsel/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "gradsel/errors.hpp"

namespace gradsel::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using gradcore::Index;
using gradcore::Matrix;
using gradcore::ProjectedSample;
using gradcore::Vector;

namespace {

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << content;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string csv_name(const std::string& strategy, std::uint64_t seed) {
  return strategy + "_seed" + std::to_string(seed) + ".csv";
}

int resolve_threads(int threads, std::size_t jobs) {
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return std::max(1, std::min<int>(threads, static_cast<int>(jobs)));
}

struct Job {
  selector::Strategy strategy;
  std::size_t seed_index;
};

std::vector<RunSummary> run_jobs(const config::ExperimentConfig& cfg,
                                 const std::vector<selector::Strategy>& strategies,
                                 const fs::path& out_dir, int threads) {
  fs::create_directories(out_dir);
  std::vector<simkit::Corpus> corpora;
  corpora.reserve(cfg.seeds.size());
  for (auto seed : cfg.seeds) {
    corpora.push_back(
        simkit::gen_corpus(simkit::SeedSet::derive(seed).corpus, cfg.sim.corpus));
  }
  std::vector<Job> jobs;
  for (auto st : strategies) {
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) jobs.push_back({st, s});
  }
  std::vector<RunSummary> out(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      const auto& job = jobs[k];
      const std::string name(selector::to_string(job.strategy));
      const auto seed = cfg.seeds[job.seed_index];
      const auto t0 = std::chrono::steady_clock::now();
      RunSummary rs;
      try {
        const auto result = simkit::run_online(cfg.sim, job.strategy, seed,
                                               corpora[job.seed_index]);
        std::ostringstream csv;
        simkit::write_metrics_csv(csv, result.rows);
        write_atomic(out_dir / csv_name(name, seed), csv.str());
        rs = summarize(name, seed, result.rows, cfg.loss_threshold);
        rs.any_negative_weight = result.any_negative_weight;
        if (result.stream_exhausted) rs.status = "stream_exhausted";
      } catch (const std::exception& e) {
        rs = RunSummary{};
        rs.strategy = name;
        rs.seed = seed;
        rs.status = "failed";
        rs.error = e.what();
      }
      rs.wall_time =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out[k] = std::move(rs);
    }
  };
  const int nt = resolve_threads(threads, jobs.size());
  std::vector<std::thread> pool;
  for (int i = 1; i < nt; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return out;
}

json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

std::string timing_json(const std::vector<RunSummary>& runs) {
  json j = json::array();
  for (const auto& r : runs) {
    j.push_back({{"strategy", r.strategy}, {"seed", r.seed}, {"wall_time", r.wall_time}});
  }
  return j.dump(2) + "\n";
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::vector<ProjectedSample> random_batch(std::mt19937_64& rng, Index n, Index L, Index d,
                                          Index T) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<ProjectedSample> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    auto& s = out[static_cast<std::size_t>(i)];
    s.sample_id = i;
    for (Index l = 0; l < L; ++l) {
      gradcore::FactorPair fp;
      fp.layer_id = static_cast<int>(l);
      fp.activations = Matrix::NullaryExpr(d, T, [&]() { return nd(rng); });
      fp.out_grads = Matrix::NullaryExpr(d, T, [&]() { return nd(rng); });
      s.layers.push_back(std::move(fp));
    }
  }
  return out;
}

template <typename F>
double time_min(F&& fn, int reps, double min_rep_seconds) {
  using clock = std::chrono::steady_clock;
  int iters = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (int i = 0; i < iters; ++i) fn();
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    if (dt >= min_rep_seconds || iters >= (1 << 20)) break;
    iters *= 2;
  }
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < reps; ++r) {
    const auto t0 = clock::now();
    for (int i = 0; i < iters; ++i) fn();
    best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count() / iters);
  }
  return best;
}

// Least squares fit of y on [1, x1, x2]; returns the two slopes.
std::pair<double, double> fit2(const std::vector<double>& x1, const std::vector<double>& x2,
                               const std::vector<double>& y) {
  Matrix a(static_cast<Index>(y.size()), 3);
  Vector b(static_cast<Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) {
    a(static_cast<Index>(i), 0) = 1.0;
    a(static_cast<Index>(i), 1) = x1[i];
    a(static_cast<Index>(i), 2) = x2[i];
    b[static_cast<Index>(i)] = y[i];
  }
  const Vector c = a.completeOrthogonalDecomposition().solve(b);
  return {c[1], c[2]};
}

const std::map<selector::Strategy, std::string>& ablation_labels() {
  static const std::map<selector::Strategy, std::string> labels = {
      {selector::Strategy::hard_filter_reweight, "Hard Filter + Reweight"},
      {selector::Strategy::topk_aware, "Optimizer-Aware Filter Only"},
      {selector::Strategy::topk_raw, "Vanilla Filter Only"},
      {selector::Strategy::vanilla_reweight, "Vanilla Filter + Reweight"},
      {selector::Strategy::unbounded, "Unbounded Weights"},
      {selector::Strategy::two_stage, "Greedy Filter + NNLS"},
  };
  return labels;
}

std::string fmt(double v, const char* f = "%.17g") {
  char buf[48];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

RunSummary summarize(const std::string& strategy, std::uint64_t seed,
                     const std::vector<simkit::MetricsRow>& rows, double loss_threshold) {
  RunSummary rs;
  rs.strategy = strategy;
  rs.seed = seed;
  if (rows.empty()) {
    rs.status = "failed";
    rs.error = "no metrics rows";
    return rs;
  }
  rs.best_metric = rows.front().target_loss;
  rs.best_accuracy = rows.front().eval_accuracy;
  for (const auto& r : rows) {
    rs.best_metric = std::min(rs.best_metric, r.target_loss);
    rs.best_accuracy = std::max(rs.best_accuracy, r.eval_accuracy);
    if (rs.steps_to_threshold < 0 && r.target_loss <= loss_threshold) {
      rs.steps_to_threshold = r.step;
    }
  }
  rs.final_metric = rows.back().target_loss;
  rs.final_accuracy = rows.back().eval_accuracy;
  rs.final_clean_fraction = rows.back().selected_clean_fraction;
  rs.status = rows.back().status;
  return rs;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  m.n = values.size();
  if (values.empty()) return m;
  m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
  }
  return m;
}

std::string summary_json(const config::ExperimentConfig& cfg,
                         const std::vector<RunSummary>& runs) {
  json j;
  j["schema_version"] = config::kSchemaVersion;
  j["config"] = json::parse(config::serialize(cfg));
  j["best_of_run"] = "min target_loss over the eval_interval grid (excluding step 0)";
  j["fixed_budget"] = "target_loss at the last step allowed by the data budget";
  json rj = json::array();
  for (const auto& r : runs) {
    json e = {{"strategy", r.strategy},
              {"seed", r.seed},
              {"status", r.status},
              {"best_metric", r.best_metric},
              {"final_metric", r.final_metric},
              {"best_accuracy", r.best_accuracy},
              {"final_accuracy", r.final_accuracy},
              {"final_clean_fraction", r.final_clean_fraction},
              {"steps_to_threshold", r.steps_to_threshold},
              {"any_negative_weight", r.any_negative_weight}};
    if (!r.error.empty()) e["error"] = r.error;
    rj.push_back(e);
  }
  j["runs"] = rj;

  json sj = json::object();
  std::vector<std::pair<double, std::string>> order;
  for (auto st : cfg.strategies) {
    const std::string name(selector::to_string(st));
    std::vector<double> best, fin, bacc, facc, clean;
    std::size_t failed = 0;
    bool negative = false;
    for (const auto& r : runs) {
      if (r.strategy != name) continue;
      if (r.status == "failed") {
        ++failed;
        continue;
      }
      best.push_back(r.best_metric);
      fin.push_back(r.final_metric);
      bacc.push_back(r.best_accuracy);
      facc.push_back(r.final_accuracy);
      clean.push_back(r.final_clean_fraction);
      negative = negative || r.any_negative_weight;
    }
    const auto f = mean_std(fin);
    sj[name] = {{"best_metric", mean_std_json(mean_std(best))},
                {"final_metric", mean_std_json(f)},
                {"best_accuracy", mean_std_json(mean_std(bacc))},
                {"final_accuracy", mean_std_json(mean_std(facc))},
                {"final_clean_fraction", mean_std_json(mean_std(clean))},
                {"failed_runs", failed},
                {"negative_weights", negative}};
    if (f.n > 0) order.emplace_back(f.mean, name);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  json oj = json::array();
  for (const auto& o : order) oj.push_back(o.second);
  j["strategies"] = sj;
  j["ordering_by_final_metric"] = oj;
  return j.dump(2) + "\n";
}

ExperimentResult run_experiment(const config::ExperimentConfig& cfg,
                                const std::string& out_dir, int threads) {
  ExperimentResult res;
  res.runs = run_jobs(cfg, cfg.strategies, out_dir, threads);
  res.summary_json = summary_json(cfg, res.runs);
  write_atomic(fs::path(out_dir) / "summary.json", res.summary_json);
  write_atomic(fs::path(out_dir) / "timing.json", timing_json(res.runs));
  res.all_ok = std::none_of(res.runs.begin(), res.runs.end(),
                            [](const RunSummary& r) { return r.status == "failed"; });
  return res;
}

// ---------------------------------------------------------------------------

void parse_grid(const std::string& spec, BenchOptions& opts) {
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("grid: expected key=v1,v2,... in '" + part + "'");
    const auto key = part.substr(0, eq);
    std::vector<std::int64_t> vals;
    std::stringstream vs(part.substr(eq + 1));
    std::string tok;
    while (std::getline(vs, tok, ',')) {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(tok, &used);
        if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
        vals.push_back(v);
      } catch (const std::logic_error&) {
        throw ConfigError("grid: bad value '" + tok + "' for " + key);
      }
    }
    if (vals.empty()) throw ConfigError("grid: no values for " + key);
    if (key == "d") {
      opts.d = vals;
    } else if (key == "T") {
      opts.T = vals;
    } else {
      throw ConfigError("grid: unknown key '" + key + "' (use d or T)");
    }
  }
}

Vector naive_token_pair_scores(std::span<const ProjectedSample> train,
                               std::span<const ProjectedSample> val) {
  Vector out = Vector::Zero(static_cast<Index>(train.size()));
  for (std::size_t i = 0; i < train.size(); ++i) {
    double total = 0.0;
    for (const auto& v : val) {
      for (std::size_t l = 0; l < train[i].layers.size(); ++l) {
        const auto& x = train[i].layers[l];
        const auto& y = v.layers[l];
        for (Index t = 0; t < x.tokens(); ++t) {
          for (Index u = 0; u < y.tokens(); ++u) {
            const Matrix gx = x.out_grads.col(t) * x.activations.col(t).transpose();
            const Matrix gy = y.out_grads.col(u) * y.activations.col(u).transpose();
            total += gx.cwiseProduct(gy).sum();
          }
        }
      }
    }
    out[static_cast<Index>(i)] = total;
  }
  return out;
}

BenchReport bench_kernels(const BenchOptions& opts) {
  if (opts.reps < 1) throw ConfigError("bench: reps must be >= 1");
  BenchReport rep;
  std::mt19937_64 rng(opts.seed);
  volatile double sink = 0.0;
  for (auto d : opts.d) {
    for (auto T : opts.T) {
      const auto train = random_batch(rng, opts.B_tr, opts.L, d, T);
      const auto val = random_batch(rng, opts.B_val, opts.L, d, T);
      gradcore::KernelDims dims{opts.L, T, opts.B_tr, opts.B_val, d, d};

      auto run_naive = [&]() { sink = sink + naive_token_pair_scores(train, val).sum(); };
      auto run_ghost = [&]() {
        double s = 0.0;
        for (const auto& x : train) {
          for (const auto& y : val) s += gradcore::inner_ghost(x, y);
        }
        sink = sink + s;
      };
      auto run_reordered = [&]() {
        const auto agg = gradcore::val_aggregate(val);
        double s = 0.0;
        for (const auto& x : train) s += gradcore::inner_reordered(x, agg);
        sink = sink + s;
      };
      const auto form = gradcore::choose_reorder_form(dims);
      const auto reorder_kernel = form == gradcore::ReorderForm::target_first
                                      ? gradcore::Kernel::reordered
                                      : gradcore::Kernel::reordered_grad_first;
      const std::pair<gradcore::Kernel, std::function<void()>> kernels[] = {
          {gradcore::Kernel::naive, run_naive},
          {gradcore::Kernel::ghost, run_ghost},
          {reorder_kernel, run_reordered}};
      for (const auto& [k, fn] : kernels) {
        BenchRow row;
        row.dims = dims;
        row.kernel = k;
        row.seconds = time_min(fn, opts.reps, opts.min_rep_seconds);
        const auto cost = gradcore::cost_model(k, dims);
        row.predicted_ops = cost.time_ops;
        row.predicted_space = cost.space_units;
        rep.rows.push_back(row);
      }
    }
  }
  std::vector<double> measured, predicted;
  for (const auto& r : rep.rows) {
    measured.push_back(r.seconds);
    predicted.push_back(static_cast<double>(r.predicted_ops));
  }
  rep.spearman = spearman(measured, predicted);

  std::map<int, std::vector<const BenchRow*>> by_kernel;
  for (const auto& r : rep.rows) {
    const auto k = r.kernel == gradcore::Kernel::reordered_grad_first ? gradcore::Kernel::reordered
                                                                      : r.kernel;
    by_kernel[static_cast<int>(k)].push_back(&r);
  }
  for (const auto& [k, rows] : by_kernel) {
    std::vector<double> lt, ld, ly, secs, ops;
    for (const auto* r : rows) {
      lt.push_back(std::log(static_cast<double>(r->dims.T)));
      ld.push_back(std::log(static_cast<double>(r->dims.d1)));
      ly.push_back(std::log(r->seconds));
      secs.push_back(r->seconds);
      ops.push_back(static_cast<double>(r->predicted_ops));
    }
    ScalingFit fit;
    fit.kernel = static_cast<gradcore::Kernel>(k);
    if (rows.size() > 1) fit.spearman = spearman(secs, ops);
    if (opts.T.size() > 1 && opts.d.size() > 1) {
      std::tie(fit.exponent_T, fit.exponent_d) = fit2(lt, ld, ly);
    }
    rep.fits.push_back(fit);
  }
  return rep;
}

double BenchReport::min_kernel_spearman() const {
  double m = 1.0;
  for (const auto& f : fits) m = std::min(m, f.spearman);
  return m;
}

void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << "kernel,L,T,B_tr,B_val,d1,d2,seconds,predicted_ops,predicted_space\n";
  for (const auto& r : report.rows) {
    out << gradcore::to_string(r.kernel) << ',' << r.dims.L << ',' << r.dims.T << ','
        << r.dims.B_tr << ',' << r.dims.B_val << ',' << r.dims.d1 << ',' << r.dims.d2 << ','
        << fmt(r.seconds) << ',' << r.predicted_ops << ',' << r.predicted_space << '\n';
  }
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ShapeError("spearman: need two equal-length series");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------

std::vector<selector::Strategy> ablation_variants() {
  return {selector::Strategy::hard_filter_reweight, selector::Strategy::topk_aware,
          selector::Strategy::topk_raw,             selector::Strategy::vanilla_reweight,
          selector::Strategy::unbounded,            selector::Strategy::two_stage};
}

std::vector<AblationRow> ablation_table(const config::ExperimentConfig& cfg,
                                        const std::vector<RunSummary>& runs) {
  (void)cfg;
  std::vector<AblationRow> rows;
  for (auto st : ablation_variants()) {
    AblationRow row;
    row.variant = std::string(selector::to_string(st));
    row.label = ablation_labels().at(st);
    std::vector<double> best, fin;
    for (const auto& r : runs) {
      if (r.strategy != row.variant || r.status == "failed") continue;
      best.push_back(r.best_metric);
      fin.push_back(r.final_metric);
      row.negative_weights = row.negative_weights || r.any_negative_weight;
    }
    row.best = mean_std(best);
    row.final = mean_std(fin);
    rows.push_back(row);
  }
  return rows;
}

std::vector<AblationRow> ablation_suite(const config::ExperimentConfig& cfg,
                                        const std::string& out_dir, int threads) {
  const auto runs = run_jobs(cfg, ablation_variants(), out_dir, threads);
  const auto rows = ablation_table(cfg, runs);
  std::ostringstream csv, md;
  write_ablation_csv(csv, rows);
  write_ablation_markdown(md, rows);
  write_atomic(fs::path(out_dir) / "ablation.csv", csv.str());
  write_atomic(fs::path(out_dir) / "ablation.md", md.str());
  write_atomic(fs::path(out_dir) / "timing.json", timing_json(runs));
  for (const auto& r : runs) {
    if (r.status == "failed") {
      throw Error("ablation run " + r.strategy + " seed " + std::to_string(r.seed) +
                  " failed: " + r.error);
    }
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "variant,label,best_mean,best_std,final_mean,final_std,n,negative_weights\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << r.label << ',' << fmt(r.best.mean) << ',' << fmt(r.best.std)
        << ',' << fmt(r.final.mean) << ',' << fmt(r.final.std) << ',' << r.final.n << ','
        << (r.negative_weights ? "true" : "false") << '\n';
  }
}

void write_ablation_markdown(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "| Method | Best (target loss) | Final (target loss) | Negative weights |\n";
  out << "|---|---|---|---|\n";
  for (const auto& r : rows) {
    out << "| " << r.label << " (`" << r.variant << "`) | " << fmt(r.best.mean, "%.4f")
        << " ± " << fmt(r.best.std, "%.4f") << " | " << fmt(r.final.mean, "%.4f") << " ± "
        << fmt(r.final.std, "%.4f") << " | " << (r.negative_weights ? "yes" : "no") << " |\n";
  }
}

std::string output_dir_from_env(const std::string& fallback) {
  const char* v = std::getenv("GRADSEL_OUTPUT_DIR");
  return (v != nullptr && *v != '\0') ? std::string(v) : fallback;
}

int threads_from_env(int fallback) {
  const char* v = std::getenv("GRADSEL_THREADS");
  if (v == nullptr || *v == '\0') return fallback;
  try {
    const int n = std::stoi(v);
    if (n < 1) throw std::invalid_argument(v);
    return n;
  } catch (const std::logic_error&) {
    throw ConfigError(std::string("GRADSEL_THREADS: expected a positive integer, got '") + v +
                      "'");
  }
}

}  // namespace gradsel::harness
