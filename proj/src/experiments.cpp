#include "snapmmd/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "snapmmd/errors.hpp"
#include "snapmmd/io.hpp"

namespace snapmmd {

std::vector<double> ExperimentRecipe::raw_times() const {
  std::vector<double> t;
  t.reserve(points + 1);
  for (std::size_t i = 0; i < points; ++i) t.push_back(step * static_cast<double>(i));
  if (forecast_increment > 0.0) t.push_back(t.back() + forecast_increment);
  return t;
}

void ExperimentRecipe::validate() const {
  if (name.empty()) throw ConfigError("recipe needs a name");
  if (!(step > 0.0)) throw ConfigError("recipe step must be positive");
  if (points < 3) throw ConfigError("recipe needs at least 3 grid points");
  if (forecast_increment < 0.0) throw ConfigError("forecast increment must be non-negative");
  if (samples < 2) throw ConfigError("recipe needs at least 2 samples per time");
  if (!(generation_substep > 0.0)) throw ConfigError("generation substep must be positive");
  if (truth.dim_state == 0) throw ConfigError("recipe truth model is empty");
  truth_initial.validate();
  if (truth_initial.dim_state != truth.dim_state) throw ConfigError("truth initial law has the wrong dimension");
  for (std::size_t c : observed_coords) {
    if (c >= truth.dim_state) throw ConfigError("observed coordinate out of range");
  }
}

std::vector<std::string> recipe_names() { return {"lv", "repr3", "repr_protein", "vortex_synthetic"}; }

ExperimentRecipe make_recipe(const std::string& name) {
  ExperimentRecipe r;
  r.name = name;
  if (name == "lv") {
    r.truth = make_lotka_volterra(1.0, 0.4, 0.4, 0.1, 0.02);
    r.truth_initial = InitialDistribution::uniform_box({5.0, 4.0}, {5.1, 4.1});
  } else if (name == "repr3") {
    r.truth = make_repressilator3(10.0, 3.0, 1.0, 1.0, 0.02);
    r.truth_initial = InitialDistribution::uniform_box({1.0, 1.0, 2.0}, {1.1, 1.1, 2.1});
  } else if (name == "repr_protein") {
    r.truth = make_repressilator_protein(1e-5, 10.0, 3.0, 1.0, 1.0, 1.0, 1.0, 0.02);
    r.truth_initial = InitialDistribution::uniform_box({1.0, 1.0, 2.0, 0.0, 0.0, 0.0}, {1.1, 1.1, 2.1, 0.1, 0.1, 0.1});
    r.observed_coords = {0, 1, 2};
  } else if (name == "vortex_synthetic") {
    VortexParams v;
    v.gamma = 1.0;
    v.r_v = 1.0;
    v.x0 = 0.5;
    v.y0 = -0.3;
    v.d = 0.02;
    v.r_d = 2.0;
    v.x0_d = 0.5;
    v.y0_d = -0.3;
    v.sigma = 0.02;
    r.truth = make_vortex(v);
    // A blob one core radius east of the center; it loops once in ~10 units.
    r.truth_initial = InitialDistribution::uniform_box({1.3, -0.5}, {1.7, -0.1});
    r.generation_substep = 0.05;
  } else {
    std::string list;
    for (const auto& n : recipe_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown recipe '" + name + "' (known: " + list + ")");
  }
  r.truth.observed_coords = r.observed_coords;
  if (r.truth.observed_coords.empty()) {
    for (std::size_t c = 0; c < r.truth.dim_state; ++c) r.truth.observed_coords.push_back(c);
  }
  return r;
}

FitConfig recipe_fit_config(const ExperimentRecipe& recipe) {
  recipe.validate();
  // Training time scale from a placeholder dataset on the recipe grid.
  std::vector<Snapshot> snaps;
  for (double t : recipe.raw_times()) snaps.push_back({t, Matrix::Zero(1, 1)});
  const Partition p = partition(recipe, make_dataset(std::move(snaps)));

  FitConfig cfg;
  cfg.substep = recipe.generation_substep / p.train.time_scale.factor * (1.0 + 1e-9);
  cfg.noise_mode = FitConfig::NoiseMode::frozen;
  cfg.early_stop = false;
  cfg.init_candidates = 64;
  cfg.restarts = 4;
  cfg.max_epochs = recipe.name == "lv" ? 1500 : 500;
  return cfg;
}

namespace {

nlohmann::json split_json(const SplitSpec& s) {
  switch (s.mode) {
    case SplitSpec::Mode::alternating: return {{"mode", "alternating"}};
    case SplitSpec::Mode::holdout_last_k: return {{"mode", "holdout_last_k"}, {"k", s.k}};
    case SplitSpec::Mode::index_list:
      return {{"mode", "index_list"}, {"train", s.train_indices}, {"validation", s.validation_indices}};
  }
  return {};
}

SplitSpec split_from_json(const nlohmann::json& j) {
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "alternating") return SplitSpec::alternating();
  if (mode == "holdout_last_k") return SplitSpec::holdout_last(j.at("k").get<std::size_t>());
  if (mode == "index_list") {
    return SplitSpec::indices(j.at("train").get<std::vector<std::size_t>>(),
                              j.at("validation").get<std::vector<std::size_t>>());
  }
  throw ConfigError("unknown split mode '" + mode + "'");
}

nlohmann::json initial_json(const InitialDistribution& d) {
  switch (d.kind) {
    case InitialDistribution::Kind::uniform_box: return {{"kind", "uniform_box"}, {"lo", d.lo}, {"hi", d.hi}};
    case InitialDistribution::Kind::point_mass: return {{"kind", "point_mass"}, {"point", d.point}};
    case InitialDistribution::Kind::empirical_resample: break;
  }
  throw ConfigError("recipe initial law must be uniform_box or point_mass");
}

InitialDistribution initial_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "uniform_box") {
    return InitialDistribution::uniform_box(j.at("lo").get<std::vector<double>>(), j.at("hi").get<std::vector<double>>());
  }
  if (kind == "point_mass") return InitialDistribution::point_mass(j.at("point").get<std::vector<double>>());
  throw ConfigError("unknown initial law '" + kind + "'");
}

}  // namespace

nlohmann::json to_json(const ExperimentRecipe& r) {
  return {{"name", r.name},
          {"truth", to_json(r.truth)},
          {"truth_initial", initial_json(r.truth_initial)},
          {"observed_coords", r.observed_coords},
          {"step", r.step},
          {"points", r.points},
          {"forecast_increment", r.forecast_increment},
          {"samples", r.samples},
          {"generation_substep", r.generation_substep},
          {"interpolation_split", split_json(r.interpolation_split)},
          {"seeds", r.seeds}};
}

ExperimentRecipe recipe_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("recipe must be a JSON object");
  // A named recipe may be used as a base and partially overridden.
  ExperimentRecipe r;
  if (j.contains("name")) {
    const auto name = j.at("name").get<std::string>();
    const auto known = recipe_names();
    if (std::find(known.begin(), known.end(), name) != known.end()) r = make_recipe(name);
    r.name = name;
  }
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "name") continue;
      if (key == "truth") r.truth = model_from_json(v);
      else if (key == "truth_initial") r.truth_initial = initial_from_json(v);
      else if (key == "observed_coords") r.observed_coords = v.get<std::vector<std::size_t>>();
      else if (key == "step") r.step = v.get<double>();
      else if (key == "points") r.points = v.get<std::size_t>();
      else if (key == "forecast_increment") r.forecast_increment = v.get<double>();
      else if (key == "samples") r.samples = v.get<std::size_t>();
      else if (key == "generation_substep") r.generation_substep = v.get<double>();
      else if (key == "interpolation_split") r.interpolation_split = split_from_json(v);
      else if (key == "seeds") r.seeds = v.get<std::size_t>();
      else throw ConfigError("unknown recipe key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed recipe: ") + e.what());
  }
  r.truth.observed_coords = r.observed_coords;
  if (r.truth.observed_coords.empty()) {
    for (std::size_t c = 0; c < r.truth.dim_state; ++c) r.truth.observed_coords.push_back(c);
  }
  r.validate();
  return r;
}

Generated generate(const ExperimentRecipe& recipe, std::uint64_t seed) {
  recipe.validate();
  const auto times = recipe.raw_times();
  const TrajectoryBatch batch = simulate(recipe.truth, recipe.truth_initial, times, recipe.generation_substep,
                                         recipe.samples, seed);
  if (batch.any_diverged()) {
    throw DivergenceError("truth simulation diverged for seed " + std::to_string(seed) + "; regenerate with another seed");
  }
  std::vector<std::size_t> coords = recipe.observed_coords;
  if (coords.empty()) {
    for (std::size_t c = 0; c < recipe.truth.dim_state; ++c) coords.push_back(c);
  }
  std::vector<Snapshot> snaps;
  for (std::size_t k = 0; k < times.size(); ++k) snaps.push_back({times[k], batch.snapshot(k, coords)});
  SnapshotDataset ds = make_dataset(std::move(snaps));
  if (!recipe.observed_coords.empty()) ds = with_observation(std::move(ds), recipe.truth.dim_state, coords);
  return {std::move(ds), recipe.truth};
}

Partition partition(const ExperimentRecipe& recipe, const SnapshotDataset& full) {
  SnapshotDataset grid = full;
  SnapshotDataset forecast;
  if (recipe.forecast_increment > 0.0) {
    auto s = split(full, SplitSpec::holdout_last(1));
    grid = std::move(s.train);
    forecast = std::move(s.validation);
  }
  auto s = split(grid, recipe.interpolation_split);
  Partition p;
  p.train = scale_times(s.train);
  p.interpolation = rescale_with(s.validation, p.train.time_scale);
  if (forecast.size() > 0) p.forecast = rescale_with(forecast, p.train.time_scale);
  return p;
}

namespace {

// Independent sub-seeds for the stages of one pipeline run.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) {
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ull + stage * 0xd1b54a32d192ed03ull + 0x632be59bd9b4e019ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Aggregate aggregate_of(const std::vector<SeedOutcome>& seeds, const std::function<std::optional<double>(const SeedOutcome&)>& f) {
  std::vector<double> v;
  for (const auto& s : seeds) {
    if (!s.ok()) continue;
    if (auto x = f(s); x && std::isfinite(*x)) v.push_back(*x);
  }
  if (v.empty()) return {std::nan(""), std::nan(""), 0};
  return aggregate(v);
}

}  // namespace

SeedOutcome run_seed(const ExperimentRecipe& recipe, const FitConfig& base_cfg, std::uint64_t seed,
                     const RunOptions& options) {
  SeedOutcome out;
  out.seed = seed;
  try {
    const Generated gen = generate(recipe, stage_seed(seed, 0));
    const Partition part = partition(recipe, gen.full);

    FitConfig cfg = base_cfg;
    cfg.seed = stage_seed(seed, 1);
    const InitialDistribution init = default_initial(part.train, cfg.init_fill);
    out.fit = fit_multistart(part.train, recipe.truth.family, init, cfg, stage_seed(seed, 2), {32, 64, 32},
                             options.on_epoch);
    if (!out.fit->best_epoch) throw DivergenceError("fit never produced a finite loss: " + out.fit->message);

    ScoreOptions so;
    so.trajectories = options.score_trajectories;
    so.substep = cfg.substep;
    so.seed = stage_seed(seed, 3);
    if (part.forecast.size() > 0) out.forecast = score_holdout(out.fit->model, init, part.train, part.forecast, so);
    so.seed = stage_seed(seed, 4);
    if (part.interpolation.size() > 0) {
      out.interpolation = score_holdout(out.fit->model, init, part.train, part.interpolation, so);
    }
    if (part.train.dim_observed() == part.train.dim_state) {
      const GridSpec grid = GridSpec::bounding_box(part.train.pooled_states());
      out.drift_mse = drift_mse(out.fit->model, gen.truth, grid);
      if (recipe.truth.family == Family::lamb_oseen_vortex) {
        const auto& fp = out.fit->model.params;
        const auto& tp = gen.truth.params;
        double worst = 0.0;
        const char* names[2] = {"x0", "y0"};
        for (std::size_t a = 0; a < 2; ++a) {
          const double cell = (grid.hi[a] - grid.lo[a]) / static_cast<double>(grid.count[a] - 1);
          const double err = std::abs(fp.natural(fp.index_of(names[a])) - tp.natural(tp.index_of(names[a])));
          worst = std::max(worst, err / cell);
        }
        out.center_error_cells = worst;
      }
    }
  } catch (const Error& e) {
    out.error = e.what();
  }
  return out;
}

RecipeResult run_recipe(const ExperimentRecipe& recipe, const FitConfig& cfg, const std::vector<std::uint64_t>& seeds,
                        const RunOptions& options) {
  recipe.validate();
  cfg.validate();
  RecipeResult r;
  r.recipe = recipe.name;
  r.seeds.resize(seeds.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.threads, seeds.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) r.seeds[i] = run_seed(recipe, cfg, seeds[i], options);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) r.seeds[i] = run_seed(recipe, cfg, seeds[i], options);
      });
    }
  }
  for (const auto& s : r.seeds) r.completed += s.ok() ? 1 : 0;
  r.forecast_mmd = aggregate_of(r.seeds, [](const SeedOutcome& s) -> std::optional<double> {
    return s.forecast && s.forecast->mmd.count ? std::optional(s.forecast->mmd.mean) : std::nullopt;
  });
  r.forecast_emd = aggregate_of(r.seeds, [](const SeedOutcome& s) -> std::optional<double> {
    return s.forecast && s.forecast->emd_available && s.forecast->emd.count ? std::optional(s.forecast->emd.mean)
                                                                             : std::nullopt;
  });
  r.interpolation_mmd = aggregate_of(r.seeds, [](const SeedOutcome& s) -> std::optional<double> {
    return s.interpolation && s.interpolation->mmd.count ? std::optional(s.interpolation->mmd.mean) : std::nullopt;
  });
  r.interpolation_emd = aggregate_of(r.seeds, [](const SeedOutcome& s) -> std::optional<double> {
    return s.interpolation && s.interpolation->emd_available && s.interpolation->emd.count
               ? std::optional(s.interpolation->emd.mean)
               : std::nullopt;
  });
  r.drift_mse = aggregate_of(r.seeds, [](const SeedOutcome& s) { return s.drift_mse; });
  r.final_r2 = aggregate_of(r.seeds, [](const SeedOutcome& s) -> std::optional<double> {
    return s.fit ? std::optional(s.fit->best_r2) : std::nullopt;
  });
  return r;
}

nlohmann::json to_json(const SeedOutcome& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  j["fit"] = s.fit ? to_json(*s.fit) : nlohmann::json(nullptr);
  j["forecast"] = s.forecast ? to_json(*s.forecast) : nlohmann::json(nullptr);
  j["interpolation"] = s.interpolation ? to_json(*s.interpolation) : nlohmann::json(nullptr);
  j["drift_mse"] = s.drift_mse ? nlohmann::json(*s.drift_mse) : nlohmann::json(nullptr);
  if (s.center_error_cells) j["center_error_cells"] = *s.center_error_cells;
  if (!s.error.empty()) j["error"] = s.error;
  return j;
}

namespace {

nlohmann::json agg_json(const Aggregate& a) {
  if (a.count == 0) return nullptr;
  return {{"mean", a.mean}, {"sd", a.sd}, {"count", a.count}};
}

std::string cell(const Aggregate& a) {
  if (a.count == 0) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g (%.2g)", a.mean, a.sd);
  return buf;
}

}  // namespace

nlohmann::json to_json(const RecipeResult& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.seeds) seeds.push_back(to_json(s));
  return {{"recipe", r.recipe},
          {"completed", r.completed},
          {"seeds", seeds},
          {"forecast_mmd", agg_json(r.forecast_mmd)},
          {"forecast_emd", agg_json(r.forecast_emd)},
          {"interpolation_mmd", agg_json(r.interpolation_mmd)},
          {"interpolation_emd", agg_json(r.interpolation_emd)},
          {"drift_mse", agg_json(r.drift_mse)},
          {"final_r2", agg_json(r.final_r2)}};
}

std::string markdown_table(const std::vector<RecipeResult>& results) {
  std::ostringstream os;
  os << "| recipe | seeds | forecast MMD | forecast EMD | interp. MMD | interp. EMD | drift MSE | R2 |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : results) {
    os << "| " << r.recipe << " | " << r.completed << "/" << r.seeds.size() << " | " << cell(r.forecast_mmd) << " | "
       << cell(r.forecast_emd) << " | " << cell(r.interpolation_mmd) << " | " << cell(r.interpolation_emd) << " | "
       << cell(r.drift_mse) << " | " << cell(r.final_r2) << " |\n";
  }
  return os.str();
}

}  // namespace snapmmd
