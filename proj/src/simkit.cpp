#include "gradsel/simkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "gradsel/container.hpp"
#include "gradsel/errors.hpp"

namespace gradsel::simkit {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Matrix gaussian_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = scale * nd(rng);
  }
  return m;
}

int argmax_col(const Matrix& m, Index col) {
  Index best = 0;
  m.col(col).maxCoeff(&best);
  return static_cast<int>(best);
}

struct Teacher {
  Matrix w;         // d0 x C
  Matrix rotation;  // d0 x d0
  Vector shift;
  int label_offset = 1;
};

Sample draw_sample(std::mt19937_64& rng, const Teacher& teacher, const CorpusSpec& spec,
                   Quality q, std::int64_t id) {
  Sample s;
  s.id = id;
  s.quality = q;
  s.tokens = gaussian_matrix(rng, spec.input_dim, spec.tokens, 1.0);
  if (q == Quality::off_distribution) {
    s.tokens = (teacher.rotation * s.tokens).colwise() + teacher.shift;
  }
  const Matrix scores = teacher.w.transpose() * s.tokens;
  const auto c = static_cast<int>(spec.num_classes);
  std::uniform_int_distribution<int> uniform_label(0, c - 1);
  s.labels.resize(static_cast<std::size_t>(spec.tokens));
  for (Index t = 0; t < spec.tokens; ++t) {
    int y = argmax_col(scores, t);
    if (q == Quality::noisy_label) y = uniform_label(rng);
    if (q == Quality::off_distribution) y = (y + teacher.label_offset) % c;
    s.labels[static_cast<std::size_t>(t)] = y;
  }
  return s;
}

void check_mix(const QualityMix& mix) {
  const double parts[] = {mix.clean, mix.noisy_label, mix.off_distribution};
  for (double p : parts) {
    if (!(p >= 0.0) || p > 1.0) throw ConfigError("corpus.mix: entries must lie in [0, 1]");
  }
  if (std::abs(mix.clean + mix.noisy_label + mix.off_distribution - 1.0) > 1e-9) {
    throw ConfigError("corpus.mix: entries must sum to 1");
  }
}

double activate(Activation act, double x) {
  return act == Activation::tanh ? std::tanh(x) : x;
}

Matrix one_hot(const std::vector<int>& labels, Index classes) {
  Matrix y = Matrix::Zero(classes, static_cast<Index>(labels.size()));
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] < 0 || labels[t] >= classes) throw ShapeError("label out of range");
    y(labels[t], static_cast<Index>(t)) = 1.0;
  }
  return y;
}

Matrix softmax_cols(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index t = 0; t < logits.cols(); ++t) {
    const double mx = logits.col(t).maxCoeff();
    p.col(t) = (logits.col(t).array() - mx).exp().matrix();
    p.col(t) /= p.col(t).sum();
  }
  return p;
}

// Loss value and dl/dlogits for one sample.
std::pair<double, Matrix> head(const LinearStackModel& model, const Matrix& logits,
                               const Sample& s) {
  const Index c = logits.rows();
  const Index tt = logits.cols();
  if (static_cast<Index>(s.labels.size()) != tt && s.targets.size() == 0) {
    throw ShapeError("sample labels do not match token count");
  }
  const double inv_t = 1.0 / static_cast<double>(tt);
  if (model.loss == Loss::softmax_ce) {
    const Matrix p = softmax_cols(logits);
    double loss = 0.0;
    for (Index t = 0; t < tt; ++t) {
      const int y = s.labels[static_cast<std::size_t>(t)];
      if (y < 0 || y >= c) throw ShapeError("label out of range");
      const double mx = logits.col(t).maxCoeff();
      const double lse = mx + std::log((logits.col(t).array() - mx).exp().sum());
      loss += lse - logits(y, t);
    }
    return {loss * inv_t, (p - one_hot(s.labels, c)) * inv_t};
  }
  const Matrix y = s.targets.size() > 0 ? s.targets : one_hot(s.labels, c);
  if (y.rows() != c || y.cols() != tt) throw ShapeError("sample targets have wrong shape");
  const Matrix diff = logits - y;
  return {0.5 * diff.squaredNorm() * inv_t, diff * inv_t};
}

Vector flat_outer(const gradcore::FactorPair& fp) {
  const Matrix gw = fp.activations * fp.out_grads.transpose();
  return Eigen::Map<const Vector>(gw.data(), gw.size());
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const char* to_string(Quality q) {
  switch (q) {
    case Quality::clean:
      return "clean";
    case Quality::noisy_label:
      return "noisy_label";
    case Quality::off_distribution:
      return "off_distribution";
  }
  return "unknown";
}

Corpus gen_corpus(std::uint64_t seed, const CorpusSpec& spec) {
  check_mix(spec.mix);
  if (spec.n < 1 || spec.target_size < 1 || spec.eval_size < 1) {
    throw ConfigError("corpus: n, target_size and eval_size must be >= 1");
  }
  if (spec.input_dim < 1 || spec.tokens < 1 || spec.num_classes < 2) {
    throw ConfigError("corpus: input_dim, tokens >= 1 and num_classes >= 2 required");
  }
  std::mt19937_64 rng(seed);
  Teacher teacher;
  teacher.w = gaussian_matrix(rng, spec.input_dim, spec.num_classes,
                              1.0 / std::sqrt(static_cast<double>(spec.input_dim)));
  teacher.rotation =
      gaussian_matrix(rng, spec.input_dim, spec.input_dim, 1.0).householderQr().householderQ();
  Vector dir = gaussian_matrix(rng, spec.input_dim, 1, 1.0).col(0);
  teacher.shift = spec.offdist_shift * dir / std::max(dir.norm(), 1e-300);
  std::uniform_int_distribution<int> offset(1, static_cast<int>(spec.num_classes) - 1);
  teacher.label_offset = offset(rng);

  Corpus corpus;
  corpus.spec = spec;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  corpus.train.reserve(static_cast<std::size_t>(spec.n));
  for (Index i = 0; i < spec.n; ++i) {
    const double u = u01(rng);
    Quality q = Quality::off_distribution;
    if (u < spec.mix.clean) {
      q = Quality::clean;
    } else if (u < spec.mix.clean + spec.mix.noisy_label) {
      q = Quality::noisy_label;
    }
    corpus.train.push_back(draw_sample(rng, teacher, spec, q, i));
  }
  for (Index i = 0; i < spec.target_size; ++i) {
    corpus.target.push_back(draw_sample(rng, teacher, spec, Quality::clean, spec.n + i));
  }
  for (Index i = 0; i < spec.eval_size; ++i) {
    corpus.eval.push_back(
        draw_sample(rng, teacher, spec, Quality::clean, spec.n + spec.target_size + i));
  }
  return corpus;
}

void write_samples(std::ostream& out, const std::vector<Sample>& samples,
                   Index num_classes) {
  container::Header h;
  h.kind = container::PayloadKind::corpus;
  h.count = samples.size();
  h.k2 = static_cast<std::uint32_t>(num_classes);
  if (!samples.empty()) {
    h.k1 = static_cast<std::uint32_t>(samples.front().tokens.rows());
    h.T = static_cast<std::uint32_t>(samples.front().tokens.cols());
  }
  for (const auto& s : samples) {
    if (s.tokens.rows() != h.k1 || s.tokens.cols() != h.T ||
        s.labels.size() != static_cast<std::size_t>(h.T)) {
      throw ShapeError("write_samples: samples are not uniform");
    }
  }
  container::write_header(out, h);
  for (const auto& s : samples) {
    container::write_i64(out, s.id);
    container::write_u32(out, static_cast<std::uint32_t>(s.quality));
    container::write_matrix(out, s.tokens);
    for (int y : s.labels) container::write_f64(out, static_cast<double>(y));
  }
}

std::vector<Sample> read_samples(std::istream& in) {
  const auto h = container::read_header(in);
  if (h.kind != container::PayloadKind::corpus) {
    throw Error("GSEL: payload is not a corpus");
  }
  std::vector<Sample> out;
  out.reserve(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    Sample s;
    s.id = container::read_i64(in);
    const auto q = container::read_u32(in);
    if (q > 2) throw Error("GSEL: bad quality tag");
    s.quality = static_cast<Quality>(q);
    s.tokens = container::read_matrix(in, h.k1, h.T);
    for (std::uint32_t t = 0; t < h.T; ++t) {
      s.labels.push_back(static_cast<int>(container::read_f64(in)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

LinearStackModel LinearStackModel::init(const std::vector<Index>& dims, Activation act,
                                        Loss loss, double init_scale, std::uint64_t seed) {
  if (dims.size() < 2) throw ConfigError("model needs at least input and output dims");
  LinearStackModel m;
  m.activation = act;
  m.loss = loss;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] < 1 || dims[l + 1] < 1) throw ConfigError("model dims must be >= 1");
    m.weights.push_back(gaussian_matrix(
        rng, dims[l], dims[l + 1], init_scale / std::sqrt(static_cast<double>(dims[l]))));
  }
  return m;
}

Index LinearStackModel::num_params() const {
  Index n = 0;
  for (const auto& w : weights) n += w.size();
  return n;
}

std::vector<gradcore::LayerShape> LinearStackModel::layer_shapes() const {
  std::vector<gradcore::LayerShape> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back({static_cast<int>(l), weights[l].rows(), weights[l].cols()});
  }
  return out;
}

Vector LinearStackModel::flat() const {
  Vector theta(num_params());
  Index off = 0;
  for (const auto& w : weights) {
    theta.segment(off, w.size()) = Eigen::Map<const Vector>(w.data(), w.size());
    off += w.size();
  }
  return theta;
}

void LinearStackModel::set_flat(const Vector& theta) {
  if (theta.size() != num_params()) throw ShapeError("set_flat: parameter count mismatch");
  Index off = 0;
  for (auto& w : weights) {
    Eigen::Map<Vector>(w.data(), w.size()) = theta.segment(off, w.size());
    off += w.size();
  }
}

Matrix LinearStackModel::forward(const Matrix& x) const {
  Matrix a = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (a.rows() != weights[l].rows()) throw ShapeError("forward: input dimension mismatch");
    Matrix s = weights[l].transpose() * a;
    if (l + 1 < weights.size()) {
      a = s.unaryExpr([this](double v) { return activate(activation, v); });
    } else {
      a = std::move(s);
    }
  }
  return a;
}

double LinearStackModel::loss_value(const Sample& s) const {
  return head(*this, forward(s.tokens), s).first;
}

BackwardResult per_sample_backward(const LinearStackModel& model, const Sample& s) {
  const std::size_t nl = model.weights.size();
  if (nl == 0) throw ShapeError("model has no layers");
  std::vector<Matrix> inputs(nl);
  inputs[0] = s.tokens;
  Matrix logits;
  for (std::size_t l = 0; l < nl; ++l) {
    if (inputs[l].rows() != model.weights[l].rows()) {
      throw ShapeError("per_sample_backward: input dimension mismatch in layer " +
                       std::to_string(l));
    }
    Matrix pre = model.weights[l].transpose() * inputs[l];
    if (!pre.allFinite()) throw NumericError("per_sample_backward: non-finite activations");
    if (l + 1 < nl) {
      inputs[l + 1] = pre.unaryExpr([&](double v) { return activate(model.activation, v); });
    } else {
      logits = std::move(pre);
    }
  }
  auto [loss, g] = head(model, logits, s);
  BackwardResult out;
  out.loss = loss;
  out.grad.sample_id = s.id;
  out.grad.layers.resize(nl);
  for (std::size_t l = nl; l-- > 0;) {
    auto& fp = out.grad.layers[l];
    fp.layer_id = static_cast<int>(l);
    fp.activations = inputs[l];
    fp.out_grads = g;
    if (l > 0) {
      Matrix da = model.weights[l] * g;
      if (model.activation == Activation::tanh) {
        da.array() *= 1.0 - inputs[l].array().square();
      }
      g = std::move(da);
    }
  }
  return out;
}

Vector flat_gradient(const gradcore::SampleGradient& grad) {
  Index n = 0;
  for (const auto& fp : grad.layers) n += fp.input_dim() * fp.output_dim();
  Vector out(n);
  Index off = 0;
  for (const auto& fp : grad.layers) {
    const Index sz = fp.input_dim() * fp.output_dim();
    out.segment(off, sz) = flat_outer(fp);
    off += sz;
  }
  return out;
}

EvalResult evaluate(const LinearStackModel& model, const std::vector<Sample>& set) {
  if (set.empty()) throw ConfigError("evaluate: empty evaluation set");
  double loss = 0.0;
  std::int64_t correct = 0;
  std::int64_t total = 0;
  for (const auto& s : set) {
    const Matrix logits = model.forward(s.tokens);
    loss += head(model, logits, s).first;
    for (Index t = 0; t < logits.cols(); ++t) {
      if (argmax_col(logits, t) == s.labels[static_cast<std::size_t>(t)]) ++correct;
      ++total;
    }
  }
  EvalResult r;
  r.loss = loss / static_cast<double>(set.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  return r;
}

// ---------------------------------------------------------------------------

SeedSet SeedSet::derive(std::uint64_t seed) {
  SeedSet s;
  s.corpus = splitmix(seed ^ 0x636f72707573ULL);
  s.projection = splitmix(seed ^ 0x70726f6aULL);
  s.pool = splitmix(seed ^ 0x706f6f6cULL);
  s.init = splitmix(seed ^ 0x696e6974ULL);
  return s;
}

double lr_at(const OptimizerSpec& opt, Index t, Index total) {
  if (t < 1) return 0.0;
  if (opt.warmup_steps > 0 && t <= opt.warmup_steps) {
    return opt.lr * static_cast<double>(t) / static_cast<double>(opt.warmup_steps);
  }
  if (!opt.linear_decay || total <= opt.warmup_steps) return opt.lr;
  const double span = static_cast<double>(total - opt.warmup_steps);
  const double done = static_cast<double>(t - opt.warmup_steps - 1);
  return opt.lr * std::max(0.0, 1.0 - done / span);
}

Index planned_steps(const SimulationConfig& config) {
  const auto budget = static_cast<Index>(
      std::floor(config.pool.budget_fraction * static_cast<double>(config.corpus.n) + 1e-9));
  return std::min(config.pool.steps, budget / config.pool.b_tr);
}

void validate(const SimulationConfig& c) {
  check_mix(c.corpus.mix);
  if (c.pool.b_tr < 1 || c.pool.b_val < 1) throw ConfigError("pool: b_tr and b_val must be >= 1");
  if (c.pool.alpha < 1 || c.pool.alpha_val < 1) throw ConfigError("pool: alpha must be >= 1");
  if (c.pool.steps < 0) throw ConfigError("pool.steps must be >= 0");
  if (!(c.pool.budget_fraction > 0.0) || c.pool.budget_fraction > 1.0) {
    throw ConfigError("pool.budget_fraction must lie in (0, 1]");
  }
  if (c.pool.b_val * c.pool.alpha_val > c.corpus.target_size) {
    throw ConfigError("pool: validation batch exceeds corpus.target_size");
  }
  if (c.pool.b_tr * c.pool.alpha > c.corpus.n) throw ConfigError("pool: pool exceeds corpus size");
  if (c.projection.k < 1) throw ConfigError("projection.k must be >= 1");
  if (c.eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (c.optimizer.lr < 0.0) throw ConfigError("optimizer.lr must be >= 0");
  if (c.optimizer.eps <= 0.0) throw ConfigError("optimizer.eps must be > 0");
  if (c.optimizer.beta1 < 0.0 || c.optimizer.beta1 >= 1.0 || c.optimizer.beta2 < 0.0 ||
      c.optimizer.beta2 >= 1.0) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (c.optimizer.warmup_steps < 0) throw ConfigError("optimizer.warmup_steps must be >= 0");
  for (Index h : c.model.hidden) {
    if (h < 1) throw ConfigError("model.hidden entries must be >= 1");
  }
  if (c.model.loss == Loss::softmax_ce && c.corpus.num_classes < 2) {
    throw ConfigError("softmax_ce needs at least 2 classes");
  }
}

RunResult run_online(const SimulationConfig& config, selector::Strategy strategy,
                     std::uint64_t seed) {
  validate(config);
  const SeedSet seeds = SeedSet::derive(seed);
  return run_online(config, strategy, seed, gen_corpus(seeds.corpus, config.corpus));
}

RunResult run_online(const SimulationConfig& config, selector::Strategy strategy,
                     std::uint64_t seed, const Corpus& corpus) {
  validate(config);
  const SeedSet seeds = SeedSet::derive(seed);
  const auto& cs = corpus.spec;

  std::vector<Index> dims{cs.input_dim};
  dims.insert(dims.end(), config.model.hidden.begin(), config.model.hidden.end());
  dims.push_back(cs.num_classes);
  LinearStackModel model = LinearStackModel::init(dims, config.model.activation,
                                                  config.model.loss, config.model.init_scale,
                                                  seeds.init);
  const auto shapes = model.layer_shapes();
  const auto proj = gradcore::ProjectionSpec::make(seeds.projection,
                                                   config.projection.distribution, shapes,
                                                   config.projection.k);
  const auto pshapes = proj.projected_shapes();

  const auto& opt = config.optimizer;
  optstate::AdamState adam;
  adam.beta1 = opt.beta1;
  adam.beta2 = opt.beta2;
  adam.eps = opt.eps;
  auto moment = optstate::ProjectedMoment::zeros(pshapes, opt.beta1, opt.beta2, opt.eps);

  std::mt19937_64 rng(seeds.pool);
  std::vector<Index> order(corpus.train.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::deque<Index> stream(order.begin(), order.end());

  const Index pool_size = config.pool.alpha * config.pool.b_tr;
  const Index val_size = config.pool.alpha_val * config.pool.b_val;
  if (val_size > static_cast<Index>(corpus.target.size())) {
    throw ConfigError("pool: validation batch exceeds the target set");
  }
  std::vector<Index> val_pick(corpus.target.size());
  std::iota(val_pick.begin(), val_pick.end(), Index{0});
  auto draw_validation = [&]() {
    for (Index i = 0; i < val_size; ++i) {
      std::uniform_int_distribution<Index> pick(i, static_cast<Index>(val_pick.size()) - 1);
      std::swap(val_pick[static_cast<std::size_t>(i)],
                val_pick[static_cast<std::size_t>(pick(rng))]);
    }
  };
  if (config.fixed_validation) draw_validation();

  const Index total = planned_steps(config);
  const auto n = static_cast<double>(corpus.train.size());
  RunResult result;
  Index clean_selected = 0;

  auto emit = [&](std::int64_t step, double objective, double entropy, const char* status) {
    const EvalResult ev = evaluate(model, corpus.eval);
    MetricsRow row;
    row.step = step;
    row.target_loss = ev.loss;
    row.eval_accuracy = ev.accuracy;
    row.selected_clean_fraction =
        result.consumed > 0
            ? static_cast<double>(clean_selected) / static_cast<double>(result.consumed)
            : 0.0;
    row.objective_value = objective;
    row.weights_entropy = entropy;
    row.cumulative_data_fraction = static_cast<double>(result.consumed) / n;
    row.status = status;
    result.rows.push_back(row);
  };

  double last_objective = 0.0;
  double last_entropy = 0.0;
  for (Index t = 1; t <= total; ++t) {
    if (static_cast<Index>(stream.size()) < pool_size) {
      result.stream_exhausted = true;
      break;
    }
    std::vector<Index> pool(stream.begin(), stream.begin() + pool_size);
    stream.erase(stream.begin(), stream.begin() + pool_size);
    if (!config.fixed_validation) draw_validation();

    std::vector<gradcore::SampleGradient> grads;
    std::vector<gradcore::ProjectedSample> cands;
    grads.reserve(pool.size());
    cands.reserve(pool.size());
    for (Index i : pool) {
      grads.push_back(per_sample_backward(model, corpus.train[static_cast<std::size_t>(i)]).grad);
      cands.push_back(gradcore::project_sample(grads.back(), proj));
    }
    std::vector<gradcore::ProjectedSample> val;
    val.reserve(static_cast<std::size_t>(val_size));
    for (Index i = 0; i < val_size; ++i) {
      const auto& s = corpus.target[static_cast<std::size_t>(val_pick[static_cast<std::size_t>(i)])];
      val.push_back(gradcore::project_sample(per_sample_backward(model, s).grad, proj));
    }
    gradcore::ValAggregate raw = gradcore::val_aggregate(val);
    for (auto& m : raw.per_layer) m /= static_cast<double>(val_size);

    const auto precond = opt.kind == OptimizerKind::adam
                             ? optstate::linearized_preconditioner(moment)
                             : optstate::Preconditioner::ones(pshapes);
    const auto target = optstate::precondition_target(raw, precond);

    selector::StrategyContext ctx;
    ctx.candidates = cands;
    ctx.raw_target = &raw;
    ctx.precond_target = &target;
    ctx.preconditioner = &precond;
    ctx.budget = config.pool.b_tr;
    ctx.params = config.strategy_params;
    ctx.random_seed = splitmix(seeds.pool ^ static_cast<std::uint64_t>(t));
    const auto outcome = selector::select(strategy, ctx);

    Vector w = outcome.weights;
    const auto m = static_cast<double>(outcome.indices.size());
    if ((w.array() < 0.0).any()) result.any_negative_weight = true;
    const double mass = w.cwiseAbs().sum();
    if (config.normalize_weights && mass > 0.0) w *= m / mass;

    std::vector<bool> chosen(pool.size(), false);
    Vector applied = Vector::Zero(model.num_params());
    std::vector<gradcore::ProjectedSample> picked;
    for (std::size_t j = 0; j < outcome.indices.size(); ++j) {
      const auto idx = static_cast<std::size_t>(outcome.indices[j]);
      chosen[idx] = true;
      picked.push_back(cands[idx]);
      applied += (w[static_cast<Index>(j)] / m) * flat_gradient(grads[idx]);
      if (corpus.train[static_cast<std::size_t>(pool[idx])].quality == Quality::clean) {
        ++clean_selected;
      }
    }
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (!chosen[j]) stream.push_back(pool[j]);
    }
    result.consumed += static_cast<Index>(outcome.indices.size());

    if (mass > 0.0) {
      const double lr = lr_at(opt, t, total);
      Vector theta = model.flat();
      if (opt.kind == OptimizerKind::adam) {
        auto step = optstate::adam_update(adam, applied, lr);
        adam = std::move(step.state);
        theta += step.delta;
        gradcore::ValAggregate batch;
        if (config.moment_source == MomentSource::applied) {
          std::vector<double> wv(w.data(), w.data() + w.size());
          batch = gradcore::weighted_aggregate(picked, wv);
          for (auto& mm : batch.per_layer) mm /= m;
        } else {
          batch = gradcore::weighted_aggregate(cands);
          for (auto& mm : batch.per_layer) mm /= static_cast<double>(cands.size());
        }
        moment = optstate::projected_moment_update(moment, batch);
      } else {
        theta += optstate::sgd_apply(applied, lr);
      }
      model.set_flat(theta);
    }
    result.steps_taken = t;
    last_objective = outcome.objective;
    last_entropy = weights_entropy(w);
    if (t % config.eval_interval == 0 || t == total) {
      emit(t, last_objective, last_entropy, "ok");
    }
  }
  if (result.stream_exhausted) {
    if (!result.rows.empty() && result.rows.back().step == result.steps_taken) {
      result.rows.back().status = "stream_exhausted";
    } else {
      emit(result.steps_taken, last_objective, last_entropy, "stream_exhausted");
    }
  }
  if (result.rows.empty()) emit(0, 0.0, 0.0, "ok");
  return result;
}

const char* const kMetricsHeader =
    "step,target_loss,eval_accuracy,selected_clean_fraction,objective_value,"
    "weights_entropy,cumulative_data_fraction,status";

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << fmt17(r.target_loss) << ',' << fmt17(r.eval_accuracy) << ','
        << fmt17(r.selected_clean_fraction) << ',' << fmt17(r.objective_value) << ','
        << fmt17(r.weights_entropy) << ',' << fmt17(r.cumulative_data_fraction) << ','
        << r.status << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw Error("metrics CSV: unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw Error("metrics CSV: expected 8 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    r.step = std::stoll(f[0]);
    r.target_loss = std::stod(f[1]);
    r.eval_accuracy = std::stod(f[2]);
    r.selected_clean_fraction = std::stod(f[3]);
    r.objective_value = std::stod(f[4]);
    r.weights_entropy = std::stod(f[5]);
    r.cumulative_data_fraction = std::stod(f[6]);
    r.status = f[7];
    rows.push_back(r);
  }
  return rows;
}

double weights_entropy(const Vector& w) {
  const double mass = w.cwiseAbs().sum();
  if (!(mass > 0.0)) return 0.0;
  double h = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    const double p = std::abs(w[i]) / mass;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace gradsel::simkit
