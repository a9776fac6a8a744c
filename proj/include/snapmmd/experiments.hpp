#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "snapmmd/dataset.hpp"
#include "snapmmd/evaluation.hpp"
#include "snapmmd/sde.hpp"
#include "snapmmd/training.hpp"

namespace snapmmd {

struct ExperimentRecipe {
  std::string name;
  SdeModel truth;
  // Law of the full truth state at raw time 0.
  InitialDistribution truth_initial;
  // Data columns; empty means every coordinate.
  std::vector<std::size_t> observed_coords;
  double step = 0.5;              // raw spacing of the snapshot grid
  std::size_t points = 19;        // snapshots on the regular grid
  double forecast_increment = 1.0;
  std::size_t samples = 200;      // observations per snapshot
  double generation_substep = 0.5;
  SplitSpec interpolation_split = SplitSpec::alternating();
  std::size_t seeds = 3;

  std::vector<double> raw_times() const;
  void validate() const;
};

// Named recipes: lv, repr3, repr_protein, vortex_synthetic.
ExperimentRecipe make_recipe(const std::string& name);
std::vector<std::string> recipe_names();

nlohmann::json to_json(const ExperimentRecipe& r);
ExperimentRecipe recipe_from_json(const nlohmann::json& j);

struct Generated {
  SnapshotDataset full;  // raw times, grid plus forecast point
  SdeModel truth;
};

// One batch of `samples` truth trajectories recorded at every grid time and
// at the forecast point.
Generated generate(const ExperimentRecipe& recipe, std::uint64_t seed);

// Train/holdout datasets; holdouts are expressed in the train time scale.
struct Partition {
  SnapshotDataset train;
  SnapshotDataset interpolation;
  SnapshotDataset forecast;
};
Partition partition(const ExperimentRecipe& recipe, const SnapshotDataset& full);

// Fit settings used for a recipe: the training substep reproduces the
// generation step, noise is frozen, and several screened starts are fitted.
FitConfig recipe_fit_config(const ExperimentRecipe& recipe);

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<FitResult> fit;
  std::optional<EvalReport> forecast;
  std::optional<EvalReport> interpolation;
  std::optional<double> drift_mse;
  // vortex_synthetic only: |fitted center - true center| per axis in grid cells
  std::optional<double> center_error_cells;
  std::string error;
  bool ok() const { return error.empty(); }
};

struct RecipeResult {
  std::string recipe;
  std::vector<SeedOutcome> seeds;
  Aggregate forecast_mmd;
  Aggregate forecast_emd;
  Aggregate interpolation_mmd;
  Aggregate interpolation_emd;
  Aggregate drift_mse;
  Aggregate final_r2;
  std::size_t completed = 0;
};

struct RunOptions {
  std::size_t score_trajectories = 200;
  std::size_t threads = 1;  // seeds in flight
  EpochCallback on_epoch;   // called from the worker running the seed
};

SeedOutcome run_seed(const ExperimentRecipe& recipe, const FitConfig& cfg, std::uint64_t seed,
                     const RunOptions& options = {});
RecipeResult run_recipe(const ExperimentRecipe& recipe, const FitConfig& cfg, const std::vector<std::uint64_t>& seeds,
                        const RunOptions& options = {});

nlohmann::json to_json(const SeedOutcome& s);
nlohmann::json to_json(const RecipeResult& r);
// mean (sd) per metric, one row per recipe.
std::string markdown_table(const std::vector<RecipeResult>& results);

}  // namespace snapmmd
