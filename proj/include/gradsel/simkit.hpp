#pragma once

// Deterministic online fine-tuning simulator: a synthetic mixed-quality
// corpus, a small stack of linear layers with per-sample factor capture, and
// the select-then-step training loop.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gradsel/gradcore.hpp"
#include "gradsel/optstate.hpp"
#include "gradsel/selector.hpp"

namespace gradsel::simkit {

using gradcore::Index;
using gradcore::Matrix;
using gradcore::Vector;

enum class Quality { clean = 0, noisy_label = 1, off_distribution = 2 };

const char* to_string(Quality q);

struct Sample {
  std::int64_t id = 0;
  Matrix tokens;               // d0 x T
  std::vector<int> labels;     // one class per position
  Matrix targets;              // optional C x T real targets (squared error only)
  Quality quality = Quality::clean;
};

struct QualityMix {
  double clean = 0.4;
  double noisy_label = 0.3;
  double off_distribution = 0.3;
};

struct CorpusSpec {
  Index n = 4000;
  Index target_size = 256;
  Index eval_size = 1024;
  Index input_dim = 32;
  Index num_classes = 8;
  Index tokens = 4;
  QualityMix mix;
  double offdist_shift = 1.5;  // norm of the mean shift of off-distribution inputs
};

struct Corpus {
  CorpusSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> target;  // clean; source of validation batches
  std::vector<Sample> eval;    // clean; held out for reporting
};

Corpus gen_corpus(std::uint64_t seed, const CorpusSpec& spec);

// GSEL export of one split (kind = corpus). Record: i64 id, u32 quality,
// tokens (d0 x T), labels as a 1 x T row of f64.
void write_samples(std::ostream& out, const std::vector<Sample>& samples,
                   Index num_classes);
std::vector<Sample> read_samples(std::istream& in);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class Loss { softmax_ce, squared_error };
enum class Activation { tanh, identity };

struct LinearStackModel {
  std::vector<Matrix> weights;  // W_l is d_l x d_{l+1}; pre-activation s = W^T a
  Activation activation = Activation::tanh;
  Loss loss = Loss::softmax_ce;

  static LinearStackModel init(const std::vector<Index>& dims, Activation act, Loss loss,
                               double init_scale, std::uint64_t seed);

  Index num_layers() const { return static_cast<Index>(weights.size()); }
  Index num_params() const;
  std::vector<gradcore::LayerShape> layer_shapes() const;

  // Column-major concatenation of all W_l.
  Vector flat() const;
  void set_flat(const Vector& theta);

  Matrix forward(const Matrix& x) const;  // logits, C x T
  double loss_value(const Sample& s) const;
};

struct BackwardResult {
  gradcore::SampleGradient grad;
  double loss = 0.0;
};

// Per-layer (input, pre-activation gradient) factors. The weight gradient of
// W_l is a g^T, i.e. the transpose of the materialized g a^T.
BackwardResult per_sample_backward(const LinearStackModel& model, const Sample& s);

// Flat parameter gradient matching LinearStackModel::flat ordering.
Vector flat_gradient(const gradcore::SampleGradient& grad);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const LinearStackModel& model, const std::vector<Sample>& set);

// ---------------------------------------------------------------------------
// Online loop
// ---------------------------------------------------------------------------

enum class OptimizerKind { adam, sgd };
enum class MomentSource { applied, pool_mean };

struct ModelSpec {
  std::vector<Index> hidden = {16};
  Activation activation = Activation::tanh;
  Loss loss = Loss::softmax_ce;
  double init_scale = 1.0;
};

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index warmup_steps = 2;
  bool linear_decay = true;
};

struct ProjectionConfig {
  Index k = 64;
  gradcore::Distribution distribution = gradcore::Distribution::rademacher;
};

struct PoolSchedule {
  Index b_tr = 8;
  Index alpha = 4;
  Index b_val = 8;
  Index alpha_val = 4;
  Index steps = 1000;
  double budget_fraction = 0.05;
};

struct SimulationConfig {
  CorpusSpec corpus;
  ModelSpec model;
  OptimizerSpec optimizer;
  ProjectionConfig projection;
  PoolSchedule pool;
  selector::StrategyParams strategy_params;
  bool fixed_validation = false;
  bool normalize_weights = true;
  MomentSource moment_source = MomentSource::applied;
  Index eval_interval = 20;
};

struct MetricsRow {
  std::int64_t step = 0;
  double target_loss = 0.0;
  double eval_accuracy = 0.0;
  double selected_clean_fraction = 0.0;
  double objective_value = 0.0;
  double weights_entropy = 0.0;
  double cumulative_data_fraction = 0.0;
  std::string status = "ok";
};

struct RunResult {
  std::vector<MetricsRow> rows;
  Index steps_taken = 0;
  Index consumed = 0;
  bool any_negative_weight = false;
  bool stream_exhausted = false;
};

// Sub-seeds for the independent random concerns of one run.
struct SeedSet {
  std::uint64_t corpus = 0;
  std::uint64_t projection = 0;
  std::uint64_t pool = 0;
  std::uint64_t init = 0;

  static SeedSet derive(std::uint64_t seed);
};

// Learning rate at 1-based step t over a horizon of `total` steps.
double lr_at(const OptimizerSpec& opt, Index t, Index total);

// Number of optimizer steps the budget allows.
Index planned_steps(const SimulationConfig& config);

void validate(const SimulationConfig& config);

RunResult run_online(const SimulationConfig& config, selector::Strategy strategy,
                     std::uint64_t seed);
// Same, on a prebuilt corpus.
RunResult run_online(const SimulationConfig& config, selector::Strategy strategy,
                     std::uint64_t seed, const Corpus& corpus);

extern const char* const kMetricsHeader;
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);

// Entropy (nats) of |w| / sum |w|; 0 for an all-zero vector.
double weights_entropy(const Vector& w);

}  // namespace gradsel::simkit
