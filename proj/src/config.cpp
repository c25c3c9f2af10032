#include "gradsel/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gradsel/errors.hpp"

namespace gradsel::config {

namespace {

using json = nlohmann::json;
using gradcore::Index;

// Walks a JSON object, reading known keys and rejecting anything left over.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }
  ~Reader() = default;

  template <typename F>
  void field(const char* key, F&& apply) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    apply(*it, child(key));
  }

  void number(const char* key, double& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number()) throw ConfigError(p + ": expected a number");
      out = v.get<double>();
    });
  }

  void integer(const char* key, Index& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number_integer()) throw ConfigError(p + ": expected an integer");
      out = v.get<Index>();
    });
  }

  void boolean(const char* key, bool& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_boolean()) throw ConfigError(p + ": expected true or false");
      out = v.get<bool>();
    });
  }

  template <typename E>
  void choice(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> opts) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_string()) throw ConfigError(p + ": expected a string");
      const auto s = v.get<std::string>();
      for (const auto& [name, e] : opts) {
        if (s == name) {
          out = e;
          return;
        }
      }
      std::string allowed;
      for (const auto& o : opts) allowed += std::string(allowed.empty() ? "" : ", ") + o.first;
      throw ConfigError(p + ": unknown value '" + s + "' (allowed: " + allowed + ")");
    });
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(child(it.key()) + ": unknown key");
    }
  }

  std::string child(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

constexpr std::initializer_list<std::pair<const char*, simkit::Loss>> kLosses = {
    {"softmax_ce", simkit::Loss::softmax_ce}, {"squared_error", simkit::Loss::squared_error}};
constexpr std::initializer_list<std::pair<const char*, simkit::Activation>> kActs = {
    {"tanh", simkit::Activation::tanh}, {"identity", simkit::Activation::identity}};
constexpr std::initializer_list<std::pair<const char*, simkit::OptimizerKind>> kOpts = {
    {"adam", simkit::OptimizerKind::adam}, {"sgd", simkit::OptimizerKind::sgd}};
constexpr std::initializer_list<std::pair<const char*, gradcore::Distribution>> kDists = {
    {"rademacher", gradcore::Distribution::rademacher},
    {"gaussian", gradcore::Distribution::gaussian}};
constexpr std::initializer_list<std::pair<const char*, simkit::MomentSource>> kMoments = {
    {"applied", simkit::MomentSource::applied}, {"pool_mean", simkit::MomentSource::pool_mean}};

template <typename E>
std::string name_of(E e, std::initializer_list<std::pair<const char*, E>> opts) {
  for (const auto& [n, v] : opts) {
    if (v == e) return n;
  }
  return "unknown";
}

ExperimentConfig from_json(const json& root) {
  ExperimentConfig cfg;
  auto& sim = cfg.sim;
  Reader r(root, "");
  r.field("schema_version", [](const json& v, const std::string& p) {
    if (!v.is_number_integer() || v.get<int>() != kSchemaVersion) {
      throw ConfigError(p + ": unsupported schema version (expected " +
                        std::to_string(kSchemaVersion) + ")");
    }
  });
  r.field("corpus", [&](const json& v, const std::string& p) {
    Reader c(v, p);
    c.integer("n", sim.corpus.n);
    c.integer("target_size", sim.corpus.target_size);
    c.integer("eval_size", sim.corpus.eval_size);
    c.integer("input_dim", sim.corpus.input_dim);
    c.integer("num_classes", sim.corpus.num_classes);
    c.integer("tokens", sim.corpus.tokens);
    c.number("offdist_shift", sim.corpus.offdist_shift);
    c.field("mix", [&](const json& mv, const std::string& mp) {
      Reader m(mv, mp);
      m.number("clean", sim.corpus.mix.clean);
      m.number("noisy_label", sim.corpus.mix.noisy_label);
      m.number("off_distribution", sim.corpus.mix.off_distribution);
      m.finish();
    });
    c.finish();
  });
  r.field("model", [&](const json& v, const std::string& p) {
    Reader m(v, p);
    m.field("hidden", [&](const json& hv, const std::string& hp) {
      if (!hv.is_array()) throw ConfigError(hp + ": expected an array of integers");
      sim.model.hidden.clear();
      for (std::size_t i = 0; i < hv.size(); ++i) {
        if (!hv[i].is_number_integer()) {
          throw ConfigError(hp + "[" + std::to_string(i) + "]: expected an integer");
        }
        sim.model.hidden.push_back(hv[i].get<Index>());
      }
    });
    m.choice("activation", sim.model.activation, kActs);
    m.choice("loss", sim.model.loss, kLosses);
    m.number("init_scale", sim.model.init_scale);
    m.finish();
  });
  r.field("optimizer", [&](const json& v, const std::string& p) {
    Reader o(v, p);
    o.choice("kind", sim.optimizer.kind, kOpts);
    o.number("lr", sim.optimizer.lr);
    o.number("beta1", sim.optimizer.beta1);
    o.number("beta2", sim.optimizer.beta2);
    o.number("eps", sim.optimizer.eps);
    o.integer("warmup_steps", sim.optimizer.warmup_steps);
    o.boolean("linear_decay", sim.optimizer.linear_decay);
    o.finish();
  });
  r.field("projection", [&](const json& v, const std::string& p) {
    Reader o(v, p);
    o.integer("k", sim.projection.k);
    o.choice("distribution", sim.projection.distribution, kDists);
    o.finish();
  });
  r.field("pool", [&](const json& v, const std::string& p) {
    Reader o(v, p);
    o.integer("b_tr", sim.pool.b_tr);
    o.integer("alpha", sim.pool.alpha);
    o.integer("b_val", sim.pool.b_val);
    o.integer("alpha_val", sim.pool.alpha_val);
    o.integer("steps", sim.pool.steps);
    o.number("budget_fraction", sim.pool.budget_fraction);
    o.finish();
  });
  r.field("selection", [&](const json& v, const std::string& p) {
    Reader o(v, p);
    o.number("ridge", sim.strategy_params.ridge);
    o.boolean("ridge_relative", sim.strategy_params.ridge_relative);
    o.boolean("precondition_residual_updates",
              sim.strategy_params.precondition_residual_updates);
    o.boolean("fixed_validation", sim.fixed_validation);
    o.boolean("normalize_weights", sim.normalize_weights);
    o.choice("moment_source", sim.moment_source, kMoments);
    o.finish();
  });
  r.field("strategies", [&](const json& v, const std::string& p) {
    if (!v.is_array() || v.empty()) throw ConfigError(p + ": expected a non-empty array");
    cfg.strategies.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto ip = p + "[" + std::to_string(i) + "]";
      if (!v[i].is_string()) throw ConfigError(ip + ": expected a strategy name");
      try {
        cfg.strategies.push_back(selector::parse_strategy(v[i].get<std::string>()));
      } catch (const ConfigError& e) {
        throw ConfigError(ip + ": " + e.what());
      }
    }
  });
  r.field("seeds", [&](const json& v, const std::string& p) {
    if (!v.is_array() || v.empty()) throw ConfigError(p + ": expected a non-empty array");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_unsigned()) {
        throw ConfigError(p + "[" + std::to_string(i) + "]: expected a non-negative integer");
      }
      cfg.seeds.push_back(v[i].get<std::uint64_t>());
    }
  });
  r.integer("eval_interval", sim.eval_interval);
  r.number("loss_threshold", cfg.loss_threshold);
  r.field("output", [&](const json& v, const std::string& p) {
    if (!v.is_string()) throw ConfigError(p + ": expected a string");
    cfg.output = v.get<std::string>();
  });
  r.finish();
  try {
    simkit::validate(sim);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  const auto& s = cfg.sim;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["corpus"] = {{"n", s.corpus.n},
                 {"target_size", s.corpus.target_size},
                 {"eval_size", s.corpus.eval_size},
                 {"input_dim", s.corpus.input_dim},
                 {"num_classes", s.corpus.num_classes},
                 {"tokens", s.corpus.tokens},
                 {"offdist_shift", s.corpus.offdist_shift},
                 {"mix",
                  {{"clean", s.corpus.mix.clean},
                   {"noisy_label", s.corpus.mix.noisy_label},
                   {"off_distribution", s.corpus.mix.off_distribution}}}};
  j["model"] = {{"hidden", s.model.hidden},
                {"activation", name_of(s.model.activation, kActs)},
                {"loss", name_of(s.model.loss, kLosses)},
                {"init_scale", s.model.init_scale}};
  j["optimizer"] = {{"kind", name_of(s.optimizer.kind, kOpts)},
                    {"lr", s.optimizer.lr},
                    {"beta1", s.optimizer.beta1},
                    {"beta2", s.optimizer.beta2},
                    {"eps", s.optimizer.eps},
                    {"warmup_steps", s.optimizer.warmup_steps},
                    {"linear_decay", s.optimizer.linear_decay}};
  j["projection"] = {{"k", s.projection.k},
                     {"distribution", name_of(s.projection.distribution, kDists)}};
  j["pool"] = {{"b_tr", s.pool.b_tr},       {"alpha", s.pool.alpha},
               {"b_val", s.pool.b_val},     {"alpha_val", s.pool.alpha_val},
               {"steps", s.pool.steps},     {"budget_fraction", s.pool.budget_fraction}};
  j["selection"] = {
      {"ridge", s.strategy_params.ridge},
      {"ridge_relative", s.strategy_params.ridge_relative},
      {"precondition_residual_updates", s.strategy_params.precondition_residual_updates},
      {"fixed_validation", s.fixed_validation},
      {"normalize_weights", s.normalize_weights},
      {"moment_source", name_of(s.moment_source, kMoments)}};
  json names = json::array();
  for (auto st : cfg.strategies) names.push_back(std::string(selector::to_string(st)));
  j["strategies"] = names;
  j["seeds"] = cfg.seeds;
  j["eval_interval"] = s.eval_interval;
  j["loss_threshold"] = cfg.loss_threshold;
  j["output"] = cfg.output;
  return j;
}

}  // namespace

ExperimentConfig parse(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
    throw ConfigError("config parse error at line " + std::to_string(line) + ": " + e.what());
  }
  return from_json(root);
}

ExperimentConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string serialize(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

bool equivalent(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_json(a) == to_json(b);
}

}  // namespace gradsel::config
