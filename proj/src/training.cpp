#include "snapmmd/training.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <limits>
#include <nlohmann/json.hpp>

#include "snapmmd/errors.hpp"
#include "snapmmd/evaluation.hpp"

namespace snapmmd {

using ad::Var;

void FitConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (trajectories < 2) throw ConfigError("at least 2 simulated trajectories are required");
  if (!(substep > 0.0)) throw ConfigError("substep must be positive");
  if (kernel_mode == KernelMode::fixed && !(lengthscale > 0.0)) throw ConfigError("fixed lengthscale must be positive");
  if (init_candidates < 1 || restarts < 1) throw ConfigError("init_candidates and restarts must be at least 1");
  if (early_stop_window < 1) throw ConfigError("early-stop window must be at least 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.epsilon > 0.0)) {
    throw ConfigError("invalid Adam constants");
  }
}

nlohmann::json to_json(const FitConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"max_epochs", c.max_epochs},
          {"trajectories", c.trajectories},
          {"substep", c.substep},
          {"kernel", c.kernel_mode == FitConfig::KernelMode::median_heuristic ? "median_heuristic" : "fixed"},
          {"lengthscale", c.lengthscale},
          {"noise", c.noise_mode == FitConfig::NoiseMode::frozen ? "frozen" : "resample_each_epoch"},
          {"seed", c.seed},
          {"early_stop", c.early_stop},
          {"early_stop_window", c.early_stop_window},
          {"early_stop_tolerance", c.early_stop_tolerance},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_epsilon", c.adam.epsilon},
          {"init_fill", c.init_fill},
          {"init_candidates", c.init_candidates},
          {"restarts", c.restarts},
          {"threads", c.threads}};
}

FitConfig fit_config_from_json(const nlohmann::json& j, FitConfig c) {
  if (!j.is_object()) throw ConfigError("fit config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "max_epochs") c.max_epochs = v.get<std::size_t>();
    else if (key == "trajectories") c.trajectories = v.get<std::size_t>();
    else if (key == "substep") c.substep = v.get<double>();
    else if (key == "kernel") {
      const auto s = v.get<std::string>();
      if (s == "median_heuristic") c.kernel_mode = FitConfig::KernelMode::median_heuristic;
      else if (s == "fixed") c.kernel_mode = FitConfig::KernelMode::fixed;
      else throw ConfigError("kernel must be median_heuristic or fixed");
    } else if (key == "lengthscale") c.lengthscale = v.get<double>();
    else if (key == "noise") {
      const auto s = v.get<std::string>();
      if (s == "frozen") c.noise_mode = FitConfig::NoiseMode::frozen;
      else if (s == "resample_each_epoch") c.noise_mode = FitConfig::NoiseMode::resample_each_epoch;
      else throw ConfigError("noise must be frozen or resample_each_epoch");
    } else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "early_stop") c.early_stop = v.get<bool>();
    else if (key == "early_stop_window") c.early_stop_window = v.get<std::size_t>();
    else if (key == "early_stop_tolerance") c.early_stop_tolerance = v.get<double>();
    else if (key == "adam_beta1") c.adam.beta1 = v.get<double>();
    else if (key == "adam_beta2") c.adam.beta2 = v.get<double>();
    else if (key == "adam_epsilon") c.adam.epsilon = v.get<double>();
    else if (key == "init_fill") c.init_fill = v.get<std::vector<double>>();
    else if (key == "init_candidates") c.init_candidates = v.get<std::size_t>();
    else if (key == "restarts") c.restarts = v.get<std::size_t>();
    else if (key == "threads") c.threads = v.get<std::size_t>();
    else throw ConfigError("unknown fit config key '" + key + "'");
  }
  c.validate();
  return c;
}

void adam_step(AdamState& s, std::span<const double> grad, std::span<double> params, double lr, const AdamConfig& cfg) {
  if (grad.size() != params.size()) throw DimensionError("gradient and parameter sizes differ");
  for (double g : grad) {
    if (!std::isfinite(g)) throw NumericalError("non-finite gradient");
  }
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  if (s.m.size() != params.size()) throw DimensionError("optimizer state size differs from parameters");
  ++s.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * grad[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg.epsilon);
  }
}

Var mmd_u_against_data(const RbfKernel& k, const Matrix& data, double data_term, std::span<const Var> sim,
                       std::size_t count) {
  const std::size_t n = static_cast<std::size_t>(data.rows());
  const std::size_t d = static_cast<std::size_t>(data.cols());
  if (sim.size() != count * d) throw DimensionError("simulated block has the wrong size");
  if (n < 2 || count < 2) throw InsufficientDataError("U-statistic MMD needs at least 2 samples per side");

  std::vector<double> y(sim.size());
  for (std::size_t i = 0; i < sim.size(); ++i) y[i] = sim[i].value();
  std::vector<double> partial(sim.size(), 0.0);
  const double inv_l2 = 1.0 / (k.lengthscale() * k.lengthscale());
  const double cross_scale = 2.0 / (static_cast<double>(n) * static_cast<double>(count));
  const double self_scale = 1.0 / (static_cast<double>(count) * static_cast<double>(count - 1));

  double cross = 0.0;
  for (std::size_t m = 0; m < count; ++m) {
    const double* ym = &y[m * d];
    double* gm = &partial[m * d];
    for (std::size_t r = 0; r < n; ++r) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = ym[c] - data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        d2 += diff * diff;
      }
      const double kv = k.from_squared_distance(d2);
      cross += kv;
      // d/dy of -cross_scale * k(x, y) = cross_scale * k * (y - x) / l^2
      const double coef = cross_scale * kv * inv_l2;
      for (std::size_t c = 0; c < d; ++c) gm[c] += coef * (ym[c] - data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    }
  }

  double self = 0.0;
  for (std::size_t a = 0; a < count; ++a) {
    const double* ya = &y[a * d];
    for (std::size_t b = a + 1; b < count; ++b) {
      const double* yb = &y[b * d];
      double d2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) d2 += (ya[c] - yb[c]) * (ya[c] - yb[c]);
      const double kv = k.from_squared_distance(d2);
      self += 2.0 * kv;
      // Each unordered pair appears twice in the off-diagonal sum.
      const double coef = 2.0 * self_scale * kv * inv_l2;
      for (std::size_t c = 0; c < d; ++c) {
        const double g = coef * (ya[c] - yb[c]);
        partial[a * d + c] -= g;
        partial[b * d + c] += g;
      }
    }
  }

  const double value = data_term - cross_scale * cross + self_scale * self;
  ad::Tape* tape = nullptr;
  for (const auto& v : sim) {
    if (v.tape()) {
      tape = v.tape();
      break;
    }
  }
  if (!tape) return value;
  return tape->record(value, "mmd_u", sim, partial);
}

InitialDistribution default_initial(const SnapshotDataset& train, std::vector<double> fill) {
  if (train.size() == 0) throw InsufficientDataError("no training snapshots");
  const std::size_t missing = train.dim_state - train.dim_observed();
  if (fill.empty()) fill.assign(missing, 0.0);
  return InitialDistribution::empirical(train.snapshots.front().states, train.dim_state, train.observed_coords,
                                        std::move(fill));
}

namespace {

RbfKernel training_kernel(const SnapshotDataset& train, const FitConfig& cfg) {
  if (cfg.kernel_mode == FitConfig::KernelMode::fixed) return RbfKernel(cfg.lengthscale);
  return RbfKernel(median_heuristic(train.pooled_states()));
}

}  // namespace

SnapMmdObjective::SnapMmdObjective(SnapshotDataset train, SdeModel model, InitialDistribution init,
                                   const FitConfig& cfg)
    : train_(std::move(train)),
      model_(std::move(model)),
      init_(std::move(init)),
      cfg_(cfg),
      kernel_(training_kernel(train_, cfg)) {
  cfg_.validate();
  train_.validate();
  if (train_.size() == 0) throw InsufficientDataError("no training snapshots");
  if (model_.observed_coords != train_.observed_coords) {
    throw ConfigError("model observed coordinates do not match the data layout");
  }
  if (model_.dim_state != train_.dim_state) {
    throw ConfigError("model state dimension " + std::to_string(model_.dim_state) + " differs from data state dimension " +
                      std::to_string(train_.dim_state));
  }
  if (train_.snapshots.front().time < 0.0) throw ConfigError("training times must start at or after scaled time 0");
  for (const auto& s : train_.snapshots) {
    if (s.count() < 2) throw InsufficientDataError("every training snapshot needs at least 2 observations");
  }
  weights_ = snapmmd::weights(train_);
  for (const auto& s : train_.snapshots) {
    const double n = static_cast<double>(s.count());
    data_terms_.push_back(offdiagonal_sum(kernel_, s.states) / (n * (n - 1.0)));
  }
  r2_denominator_ = snapmmd::r2_denominator(train_, kernel_);
}

Var SnapMmdObjective::loss(ad::Tape& tape, std::span<const Var> raw, std::uint64_t seed) const {
  if (raw.size() != model_.params.size()) throw DimensionError("raw parameter vector has the wrong length");
  const std::vector<Var> natural = model_.params.to_natural(raw);
  const auto times = train_.times();
  SimOptions opt;
  opt.time_factor = train_.time_scale.factor;

  std::vector<std::vector<Var>> sim;
  try {
    sim = simulate_on_tape(model_, natural, init_, times, cfg_.substep, cfg_.trajectories, seed, opt);
  } catch (const NumericalError& e) {
    throw DivergenceError("simulation diverged with noise seed " + std::to_string(seed) + ": " + e.what());
  }

  const std::size_t d = train_.dim_observed();
  const std::size_t dim = model_.dim_state;
  const std::size_t count = cfg_.trajectories;
  std::vector<Var> projected(count * d);
  Var total = 0.0;
  (void)tape;
  for (std::size_t i = 0; i < times.size(); ++i) {
    for (std::size_t m = 0; m < count; ++m) {
      for (std::size_t c = 0; c < d; ++c) projected[m * d + c] = sim[i][m * dim + model_.observed_coords[c]];
    }
    total += weights_[i] * mmd_u_against_data(kernel_, train_.snapshots[i].states, data_terms_[i], projected, count);
  }
  return total;
}

double SnapMmdObjective::loss_value(std::span<const double> raw, std::uint64_t seed) const {
  ad::Tape tape;
  const auto vars = tape.variables(raw);
  return loss(tape, vars, seed).value();
}

ad::Objective SnapMmdObjective::frozen(std::uint64_t seed) const {
  return [this, seed](ad::Tape& tape, std::span<const Var> raw) { return loss(tape, raw, seed); };
}

Var snapmmd_loss(ad::Tape& tape, std::span<const Var> raw, const SnapshotDataset& train, const SdeModel& model,
                 const InitialDistribution& init, const FitConfig& cfg, std::uint64_t seed) {
  const SnapMmdObjective objective(train, model, init, cfg);
  return objective.loss(tape, raw, seed);
}

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::early_stop: return "early_stop";
    case StopReason::max_epochs: return "max_epochs";
    case StopReason::divergence: return "divergence";
  }
  return "unknown";
}

std::uint64_t epoch_seed(const FitConfig& cfg, std::size_t epoch) {
  if (cfg.noise_mode == FitConfig::NoiseMode::frozen) return cfg.seed;
  // splitmix64 finalizer over (seed, epoch)
  std::uint64_t z = cfg.seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

double nan_max(std::span<const double> v) {
  double best = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    if (std::isfinite(x)) best = std::max(best, x);
  }
  return best;
}

}  // namespace

FitResult fit(const SnapshotDataset& train, const SdeModel& model, const InitialDistribution& init,
              const FitConfig& cfg, const EpochCallback& on_epoch) {
  const SnapMmdObjective objective(train, model, init, cfg);
  FitResult result;
  result.model = model;
  result.lengthscale = objective.kernel().lengthscale();
  result.best_r2 = -std::numeric_limits<double>::infinity();

  std::vector<double> raw = model.params.raw;
  AdamState adam;
  std::size_t consecutive_failures = 0;
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    ++result.epochs;
    double loss = nan;
    std::vector<double> gradient;
    try {
      ad::Tape tape;
      const auto vars = tape.variables(raw);
      const Var l = objective.loss(tape, vars, epoch_seed(cfg, epoch));
      loss = l.value();
      gradient = tape.gradient(l, vars);
      for (double g : gradient) {
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient");
      }
    } catch (const Error& e) {
      result.loss_history.push_back(nan);
      result.r2_history.push_back(nan);
      if (on_epoch) on_epoch(epoch, nan, nan);
      result.message = e.what();
      if (++consecutive_failures >= 3) {
        result.stop_reason = StopReason::divergence;
        break;
      }
      continue;
    }
    consecutive_failures = 0;

    const double r2 = 1.0 - loss / objective.r2_denominator();
    result.loss_history.push_back(loss);
    result.r2_history.push_back(r2);
    if (on_epoch) on_epoch(epoch, loss, r2);
    if (r2 > result.best_r2) {
      result.best_r2 = r2;
      result.best_epoch = epoch;
      result.model.params.raw = raw;
    }

    adam_step(adam, gradient, raw, cfg.learning_rate, cfg.adam);

    const std::size_t len = result.r2_history.size();
    const std::size_t w = cfg.early_stop_window;
    if (cfg.early_stop && len > w) {
      const std::span<const double> hist(result.r2_history);
      const double before = nan_max(hist.first(len - w));
      const double recent = nan_max(hist.last(w));
      if (std::isfinite(before) && recent - before < cfg.early_stop_tolerance) {
        result.stop_reason = StopReason::early_stop;
        break;
      }
    }
  }
  if (!result.best_epoch) result.best_r2 = nan;
  return result;
}

FitResult fit_multistart(const SnapshotDataset& train, Family family, const InitialDistribution& init,
                         const FitConfig& cfg, std::uint64_t init_seed, std::vector<std::size_t> mlp_hidden,
                         const EpochCallback& on_epoch) {
  cfg.validate();
  std::vector<SdeModel> candidates;
  for (std::size_t k = 0; k < cfg.init_candidates; ++k) {
    FitConfig mix;
    mix.seed = init_seed;
    candidates.push_back(initial_model(family, train.dim_state, train.observed_coords, epoch_seed(mix, k), &train,
                                       mlp_hidden));
  }
  std::vector<std::size_t> order;
  if (cfg.init_candidates == 1) {
    order.push_back(0);
  } else {
    const SnapMmdObjective objective(train, candidates.front(), init, cfg);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      try {
        ranked.emplace_back(objective.loss_value(candidates[k].params.raw, epoch_seed(cfg, 0)), k);
      } catch (const Error&) {
        // divergent draw; skipped
      }
    }
    if (ranked.empty()) {
      throw DivergenceError("all " + std::to_string(candidates.size()) + " initial draws diverged");
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [loss, k] : ranked) order.push_back(k);
  }

  std::optional<FitResult> best;
  for (std::size_t s = 0; s < std::min(cfg.restarts, order.size()); ++s) {
    FitResult r = fit(train, candidates[order[s]], init, cfg, on_epoch);
    const bool better = r.best_epoch && (!best || !best->best_epoch || r.best_r2 > best->best_r2);
    if (!best || better) best = std::move(r);
  }
  return std::move(*best);
}

nlohmann::json to_json(const FitResult& r) {
  auto nullable = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return a;
  };
  nlohmann::json j;
  j["model"] = to_json(r.model);
  j["loss_history"] = nullable(r.loss_history);
  j["r2_history"] = nullable(r.r2_history);
  j["epochs"] = r.epochs;
  j["stop_reason"] = to_string(r.stop_reason);
  j["best_epoch"] = r.best_epoch ? nlohmann::json(*r.best_epoch) : nlohmann::json(nullptr);
  j["best_r2"] = std::isfinite(r.best_r2) ? nlohmann::json(r.best_r2) : nlohmann::json(nullptr);
  j["lengthscale"] = r.lengthscale;
  if (!r.message.empty()) j["message"] = r.message;
  return j;
}

}  // namespace snapmmd
