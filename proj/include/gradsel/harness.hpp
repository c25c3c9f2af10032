#pragma once

// Strategy sweeps over seeds, summaries, the kernel benchmark and the
// ablation table.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gradsel/config.hpp"
#include "gradsel/gradcore.hpp"
#include "gradsel/simkit.hpp"

namespace gradsel::harness {

struct RunSummary {
  std::string strategy;
  std::uint64_t seed = 0;
  double best_metric = 0.0;   // min target loss over the eval grid
  double final_metric = 0.0;  // target loss at the budget
  double best_accuracy = 0.0;
  double final_accuracy = 0.0;
  double final_clean_fraction = 0.0;
  std::int64_t steps_to_threshold = -1;  // -1: threshold never reached
  double wall_time = 0.0;
  bool any_negative_weight = false;
  std::string status = "ok";  // ok, stream_exhausted, failed
  std::string error;
};

RunSummary summarize(const std::string& strategy, std::uint64_t seed,
                     const std::vector<simkit::MetricsRow>& rows, double loss_threshold);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std (n - 1); 0 for a single run
  std::size_t n = 0;
};

MeanStd mean_std(const std::vector<double>& values);

struct ExperimentResult {
  std::vector<RunSummary> runs;  // strategy-major, seed-minor
  std::string summary_json;
  bool all_ok = true;
};

// Runs every (strategy, seed) pair, writing <strategy>_seed<seed>.csv,
// summary.json and timing.json into out_dir. threads <= 0 picks the hardware
// concurrency.
ExperimentResult run_experiment(const config::ExperimentConfig& cfg,
                                const std::string& out_dir, int threads = 0);

// Summary JSON (deterministic; no wall times) over finished runs.
std::string summary_json(const config::ExperimentConfig& cfg,
                         const std::vector<RunSummary>& runs);

// ---------------------------------------------------------------------------
// Kernel benchmark
// ---------------------------------------------------------------------------

struct BenchOptions {
  std::vector<std::int64_t> d = {4, 8, 16};
  std::vector<std::int64_t> T = {4, 8, 16, 32};
  std::int64_t L = 2;
  std::int64_t B_tr = 32;  // alpha * b_tr of the default pool
  std::int64_t B_val = 32;
  int reps = 5;
  double min_rep_seconds = 2e-3;
  std::uint64_t seed = 7;
};

struct BenchRow {
  gradcore::KernelDims dims;
  gradcore::Kernel kernel = gradcore::Kernel::naive;
  double seconds = 0.0;  // per full B_tr x B_val scoring pass, min over reps
  std::int64_t predicted_ops = 0;
  std::int64_t predicted_space = 0;
};

struct ScalingFit {
  gradcore::Kernel kernel = gradcore::Kernel::naive;
  double exponent_T = 0.0;
  double exponent_d = 0.0;
  double spearman = 0.0;  // measured vs predicted over this kernel's grid points
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double spearman = 0.0;  // measured seconds vs predicted ops, all rows pooled
  std::vector<ScalingFit> fits;

  double min_kernel_spearman() const;
};

// Parses "d=4,8,16;T=4,8,16,32" (either part optional) into opts.
void parse_grid(const std::string& spec, BenchOptions& opts);

// Kernels timed: naive (per-token-pair materialization), ghost, reordered.
BenchReport bench_kernels(const BenchOptions& opts);
void write_bench_csv(std::ostream& out, const BenchReport& report);

// Average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Score of every candidate against the summed validation set, per kernel.
gradcore::Vector naive_token_pair_scores(std::span<const gradcore::ProjectedSample> train,
                                         std::span<const gradcore::ProjectedSample> val);

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::string label;
  MeanStd best;
  MeanStd final;
  bool negative_weights = false;
};

std::vector<selector::Strategy> ablation_variants();

std::vector<AblationRow> ablation_table(const config::ExperimentConfig& cfg,
                                        const std::vector<RunSummary>& runs);

// Runs the ablation variants over cfg.seeds and writes ablation.csv and
// ablation.md next to the per-run outputs.
std::vector<AblationRow> ablation_suite(const config::ExperimentConfig& cfg,
                                        const std::string& out_dir, int threads = 0);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);
void write_ablation_markdown(std::ostream& out, const std::vector<AblationRow>& rows);

// GRADSEL_OUTPUT_DIR / GRADSEL_THREADS overrides.
std::string output_dir_from_env(const std::string& fallback);
int threads_from_env(int fallback);

}  // namespace gradsel::harness
