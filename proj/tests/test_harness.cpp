#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "gradsel/config.hpp"
#include "gradsel/errors.hpp"
#include "gradsel/harness.hpp"
#include "oracles.hpp"

using namespace gradsel;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kSmall = R"({
  "schema_version": 1,
  "corpus": {"n": 600, "target_size": 64, "eval_size": 128, "input_dim": 12,
             "num_classes": 4, "tokens": 2},
  "model": {"hidden": [6]},
  "projection": {"k": 8},
  "pool": {"budget_fraction": 0.2},
  "strategies": ["two_stage", "topk_raw", "random"],
  "seeds": [1, 2, 3],
  "eval_interval": 5
})";

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("gradsel_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(GRADSEL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parse and round trip") {
  const auto cfg = config::parse(kSmall);
  CHECK(cfg.sim.corpus.n == 600);
  CHECK(cfg.sim.model.hidden == std::vector<gradcore::Index>{6});
  CHECK(cfg.seeds.size() == 3);
  CHECK(cfg.sim.optimizer.beta1 == 0.9);
  CHECK(cfg.sim.optimizer.beta2 == 0.999);
  CHECK(cfg.sim.pool.alpha == 4);
  CHECK(cfg.sim.pool.b_tr == 8);

  const auto text = config::serialize(cfg);
  const auto again = config::parse(text);
  CHECK(config::equivalent(cfg, again));
  CHECK(config::serialize(again) == text);

  const auto defaults = config::parse("{}");
  CHECK(config::equivalent(defaults, config::ExperimentConfig{}));
  CHECK(config::equivalent(config::parse(config::serialize(defaults)), defaults));
}

TEST_CASE("config errors name the field or line") {
  auto msg = [](const std::string& text) {
    try {
      config::parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(msg(R"({"pool": {"b_tr": 8, "oversample": 2}})").find("pool.oversample") != std::string::npos);
  CHECK(msg(R"({"strategies": ["two_stage", "tracin"]})").find("strategies[1]") != std::string::npos);
  CHECK(msg(R"({"optimizer": {"lr": "fast"}})").find("optimizer.lr") != std::string::npos);
  CHECK(msg("{\n  \"seeds\": [1,\n  2,,\n]}").find("line 3") != std::string::npos);
  CHECK(msg(R"({"schema_version": 9})").find("schema") != std::string::npos);
  CHECK(msg(R"({"corpus": {"mix": {"clean": 0.9}}})").find("mix") != std::string::npos);
  CHECK_FALSE(msg(R"({"bogus": 1})").empty());
}

TEST_CASE("summaries") {
  std::vector<simkit::MetricsRow> rows(3);
  rows[0].step = 5;
  rows[0].target_loss = 2.0;
  rows[1].step = 10;
  rows[1].target_loss = 1.2;
  rows[2].step = 12;
  rows[2].target_loss = 1.4;
  const auto s = harness::summarize("two_stage", 1, rows, 1.3);
  CHECK(s.best_metric == 1.2);
  CHECK(s.final_metric == 1.4);
  CHECK(s.steps_to_threshold == 10);
  CHECK(harness::summarize("x", 1, rows, 0.5).steps_to_threshold == -1);

  const auto ms = harness::mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(ms.mean == 2.5);
  CHECK(ms.std == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  CHECK(harness::mean_std({7.0}).std == 0.0);
}

TEST_CASE("run_experiment fan-out, determinism and recomputable summary") {
  const auto cfg = config::parse(kSmall);
  const auto a = scratch("exp_a"), b = scratch("exp_b");
  const auto ra = harness::run_experiment(cfg, a.string(), 2);
  const auto rb = harness::run_experiment(cfg, b.string(), 3);
  CHECK(ra.all_ok);
  CHECK(ra.runs.size() == 9);
  for (const char* st : {"two_stage", "topk_raw", "random"})
    for (int seed = 1; seed <= 3; ++seed) {
      const auto name = std::string(st) + "_seed" + std::to_string(seed) + ".csv";
      CHECK(fs::exists(a / name));
      CHECK(slurp(a / name) == slurp(b / name));
    }
  CHECK(slurp(a / "summary.json") == slurp(b / "summary.json"));
  CHECK(fs::exists(a / "timing.json"));

  const auto summary = json::parse(slurp(a / "summary.json"));
  CHECK(summary["ordering_by_final_metric"].size() == 3);
  for (const char* st : {"two_stage", "topk_raw", "random"}) {
    std::vector<double> finals, bests;
    for (int seed = 1; seed <= 3; ++seed) {
      std::ifstream in(a / (std::string(st) + "_seed" + std::to_string(seed) + ".csv"));
      const auto rows = simkit::read_metrics_csv(in);
      const auto rs = harness::summarize(st, static_cast<std::uint64_t>(seed), rows, cfg.loss_threshold);
      finals.push_back(rs.final_metric);
      bests.push_back(rs.best_metric);
    }
    double mf = 0.0, mb = 0.0;
    for (int i = 0; i < 3; ++i) {
      mf += finals[static_cast<std::size_t>(i)] / 3.0;
      mb += bests[static_cast<std::size_t>(i)] / 3.0;
    }
    double sf = 0.0;
    for (double f : finals) sf += (f - mf) * (f - mf) / 2.0;
    const auto& node = summary["strategies"][st];
    CHECK(std::abs(node["final_metric"]["mean"].get<double>() - mf) <= 1e-12);
    CHECK(std::abs(node["best_metric"]["mean"].get<double>() - mb) <= 1e-12);
    CHECK(std::abs(node["final_metric"]["std"].get<double>() - std::sqrt(sf)) <= 1e-12);
    CHECK(node["final_metric"]["n"].get<int>() == 3);
  }
  auto order = summary["ordering_by_final_metric"];
  double prev = -1.0;
  for (const auto& name : order) {
    const double m = summary["strategies"][name.get<std::string>()]["final_metric"]["mean"].get<double>();
    CHECK(m >= prev);
    prev = m;
  }
}

TEST_CASE("ablation table") {
  auto cfg = config::parse(kSmall);
  cfg.seeds = {1, 2};
  const auto dir = scratch("ablate");
  const auto rows = harness::ablation_suite(cfg, dir.string(), 0);
  REQUIRE(rows.size() == harness::ablation_variants().size());
  CHECK(rows.size() == 6);
  for (const auto& r : rows) CHECK(r.final.n == 2);
  CHECK(fs::exists(dir / "ablation.csv"));
  CHECK(fs::exists(dir / "ablation.md"));
  const auto md = slurp(dir / "ablation.md");
  for (auto v : harness::ablation_variants()) CHECK(md.find(std::string(selector::to_string(v))) != std::string::npos);

  // The negative-weight flag follows the runs.
  std::vector<harness::RunSummary> runs(1);
  runs[0].strategy = "unbounded";
  runs[0].any_negative_weight = true;
  cfg.strategies = {selector::Strategy::unbounded};
  const auto t = harness::ablation_table(cfg, runs);
  bool flagged = false;
  for (const auto& r : t)
    if (r.variant == "unbounded") flagged = r.negative_weights;
  CHECK(flagged);
}

TEST_CASE("bench grid and rank statistics") {
  harness::BenchOptions opts;
  harness::parse_grid("d=2,4;T=8,16", opts);
  CHECK(opts.d == std::vector<std::int64_t>{2, 4});
  CHECK(opts.T == std::vector<std::int64_t>{8, 16});
  CHECK_THROWS_AS(harness::parse_grid("q=3", opts), ConfigError);

  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> x, y;
    std::uniform_int_distribution<int> small(0, 4);
    for (int i = 0; i < 12; ++i) {
      x.push_back(small(rng));
      y.push_back(small(rng) + 0.5 * x.back());
    }
    CHECK(harness::spearman(x, y) == doctest::Approx(oracle::spearman_bruteforce(x, y)).epsilon(1e-12));
  }

  // The naive per-token-pair kernel computes the same scores.
  std::vector<gradcore::ProjectedSample> tr, val;
  const oracle::Dims d{{{3, 4}, {5, 2}}, 3};
  for (int i = 0; i < 4; ++i) tr.push_back(oracle::random_sample<gradcore::ProjectedSample>(rng, d));
  for (int i = 0; i < 3; ++i) val.push_back(oracle::random_sample<gradcore::ProjectedSample>(rng, d));
  const auto scores = harness::naive_token_pair_scores(tr, val);
  for (int i = 0; i < 4; ++i) {
    double ref = 0.0;
    for (const auto& v : val) ref += oracle::inner(tr[static_cast<std::size_t>(i)], v);
    CHECK(oracle::close_rel(scores[i], ref, 1e-10));
  }

  harness::BenchOptions tiny;
  tiny.d = {2, 4};
  tiny.T = {2, 4};
  tiny.reps = 1;
  tiny.min_rep_seconds = 1e-4;
  const auto rep = harness::bench_kernels(tiny);
  CHECK(rep.rows.size() == 12);
  std::stringstream csv;
  harness::write_bench_csv(csv, rep);
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("kernel") != std::string::npos);
}

TEST_CASE("environment overrides") {
  ::setenv("GRADSEL_OUTPUT_DIR", "/tmp/elsewhere", 1);
  CHECK(harness::output_dir_from_env("x") == "/tmp/elsewhere");
  ::unsetenv("GRADSEL_OUTPUT_DIR");
  CHECK(harness::output_dir_from_env("x") == "x");
  ::setenv("GRADSEL_THREADS", "3", 1);
  CHECK(harness::threads_from_env(0) == 3);
  ::unsetenv("GRADSEL_THREADS");
  CHECK(harness::threads_from_env(5) == 5);
}

TEST_CASE("CLI exit codes") {
  const auto dir = scratch("cli");
  const auto good = dir / "good.json";
  {
    std::ofstream f(good);
    auto j = json::parse(kSmall);
    j["seeds"] = {1};
    j["strategies"] = {"random"};
    f << j.dump();
  }
  const auto bad = dir / "bad.json";
  {
    std::ofstream f(bad);
    f << R"({"pool": {"oversample": 2}})";
  }
  CHECK(run_cli("run " + good.string() + " -o " + (dir / "out").string()) == 0);
  CHECK(fs::exists(dir / "out" / "summary.json"));
  CHECK(run_cli("run " + bad.string()) == 2);
  CHECK(run_cli("run " + (dir / "missing.json").string()) == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("bench --grid q=1") == 2);
  CHECK(run_cli("bench --grid 'd=2;T=2' --reps 1 -o " + (dir / "bench").string()) == 0);
  CHECK(fs::exists(dir / "bench" / "bench_kernels.csv"));
  // An output path that cannot be created is a runtime failure.
  const auto blocker = dir / "file";
  std::ofstream(blocker) << "x";
  CHECK(run_cli("run " + good.string() + " -o " + (blocker / "sub").string()) == 3);
}
