// gradsel: run | bench | ablate

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gradsel/config.hpp"
#include "gradsel/errors.hpp"
#include "gradsel/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

using namespace gradsel;

int cmd_run(const std::string& path, std::string out, int threads) {
  const auto cfg = config::load(path);
  out = harness::output_dir_from_env(out.empty() ? cfg.output : out);
  threads = harness::threads_from_env(threads);
  const auto res = harness::run_experiment(cfg, out, threads);
  for (const auto& r : res.runs) {
    std::printf("%-22s seed=%-6llu final=%.6f best=%.6f clean=%.3f %s\n", r.strategy.c_str(),
                static_cast<unsigned long long>(r.seed), r.final_metric, r.best_metric,
                r.final_clean_fraction, r.status.c_str());
  }
  std::printf("outputs in %s\n", out.c_str());
  if (!res.all_ok) {
    std::fprintf(stderr, "gradsel: one or more runs failed; see summary.json\n");
    return kExitRuntime;
  }
  return 0;
}

int cmd_bench(const std::string& grid, harness::BenchOptions opts, std::string out) {
  if (!grid.empty()) harness::parse_grid(grid, opts);
  const auto rep = harness::bench_kernels(opts);
  for (const auto& r : rep.rows) {
    std::printf("%-22s d=%-3lld T=%-3lld %.3e s  predicted_ops=%lld\n",
                gradcore::to_string(r.kernel), static_cast<long long>(r.dims.d1),
                static_cast<long long>(r.dims.T), r.seconds,
                static_cast<long long>(r.predicted_ops));
  }
  std::printf("spearman(measured, predicted) = %.4f\n", rep.spearman);
  for (const auto& f : rep.fits) {
    std::printf("fit %-10s time ~ T^%.2f d^%.2f  spearman %.4f\n", gradcore::to_string(f.kernel),
                f.exponent_T, f.exponent_d, f.spearman);
  }
  out = harness::output_dir_from_env(out);
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    const auto path = std::filesystem::path(out) / "bench_kernels.csv";
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path.string());
    harness::write_bench_csv(f, rep);
    std::printf("wrote %s\n", path.string().c_str());
  }
  return 0;
}

int cmd_ablate(const std::string& path, std::string out, int threads) {
  const auto cfg = config::load(path);
  out = harness::output_dir_from_env(out.empty() ? cfg.output : out);
  threads = harness::threads_from_env(threads);
  const auto rows = harness::ablation_suite(cfg, out, threads);
  harness::write_ablation_markdown(std::cout, rows);
  std::printf("outputs in %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimizer-aware online data selection"};
  app.require_subcommand(1);

  std::string config_path, out_dir, grid;
  int threads = 0;
  harness::BenchOptions bench;

  auto* run = app.add_subcommand("run", "Run every strategy x seed in a config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("-o,--output", out_dir, "Output directory (overrides config)");
  run->add_option("-j,--threads", threads, "Concurrent runs (0 = all cores)");

  auto* bn = app.add_subcommand("bench", "Time the inner-product kernels against the cost model");
  bn->add_option("--grid", grid, "Grid, e.g. \"d=4,8,16;T=4,8,16,32\"");
  bn->add_option("--layers", bench.L, "Layer count")->check(CLI::PositiveNumber);
  bn->add_option("--btr", bench.B_tr, "Training batch size")->check(CLI::PositiveNumber);
  bn->add_option("--bval", bench.B_val, "Validation batch size")->check(CLI::PositiveNumber);
  bn->add_option("--reps", bench.reps, "Timed repetitions (min is kept)")->check(CLI::PositiveNumber);
  bn->add_option("-o,--output", out_dir, "Directory for bench_kernels.csv");

  auto* ab = app.add_subcommand("ablate", "Run the ablation variants and write the table");
  ab->add_option("config", config_path, "Experiment config (JSON)")->required();
  ab->add_option("-o,--output", out_dir, "Output directory (overrides config)");
  ab->add_option("-j,--threads", threads, "Concurrent runs (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, out_dir, threads);
    if (bn->parsed()) return cmd_bench(grid, bench, out_dir);
    if (ab->parsed()) return cmd_ablate(config_path, out_dir, threads);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "gradsel: config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gradsel: error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
