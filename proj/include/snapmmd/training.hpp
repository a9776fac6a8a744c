#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "snapmmd/autodiff.hpp"
#include "snapmmd/dataset.hpp"
#include "snapmmd/kernel.hpp"
#include "snapmmd/sde.hpp"

namespace snapmmd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct FitConfig {
  enum class KernelMode { median_heuristic, fixed };
  enum class NoiseMode { resample_each_epoch, frozen };

  double learning_rate = 0.05;
  std::size_t max_epochs = 300;
  std::size_t trajectories = 200;
  // Largest Euler step in scaled time.
  double substep = 0.01;
  KernelMode kernel_mode = KernelMode::median_heuristic;
  double lengthscale = 1.0;  // used when kernel_mode == fixed
  NoiseMode noise_mode = NoiseMode::resample_each_epoch;
  std::uint64_t seed = 0;
  bool early_stop = true;
  std::size_t early_stop_window = 20;
  double early_stop_tolerance = 0.01;
  AdamConfig adam;
  // Values for unobserved state coordinates at time 0; zeros when empty.
  std::vector<double> init_fill;
  // fit_multistart: default initializations drawn and screened by loss, and
  // how many of the best are then fitted.
  std::size_t init_candidates = 1;
  std::size_t restarts = 1;
  std::size_t threads = 1;

  void validate() const;
};

nlohmann::json to_json(const FitConfig& cfg);
// Keys present in `j` override `base`; unknown keys are a ConfigError.
FitConfig fit_config_from_json(const nlohmann::json& j, FitConfig base = {});

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, std::span<const double> grad, std::span<double> params, double learning_rate,
               const AdamConfig& cfg = {});

// U-statistic MMD^2 between fixed data rows and simulated rows held as Vars
// (count x dim, row-major), recorded as one tape entry. `data_term` is the
// precomputed data-data average, which carries no parameter dependence.
ad::Var mmd_u_against_data(const RbfKernel& k, const Matrix& data, double data_term, std::span<const ad::Var> sim,
                           std::size_t count);

// Empirical resample of the first snapshot, with `fill` (or zeros) on the
// coordinates the data do not observe.
InitialDistribution default_initial(const SnapshotDataset& train, std::vector<double> fill = {});

// The weighted U-statistic objective on a fixed training set. Everything
// that does not depend on the parameters is computed once at construction.
class SnapMmdObjective {
 public:
  SnapMmdObjective(SnapshotDataset train, SdeModel model, InitialDistribution init, const FitConfig& cfg);

  // sum_i w_i MMD_u(data_i, simulated_i) at raw parameters `raw`, with noise
  // drawn from `seed`. Throws DivergenceError when a trajectory blows up.
  ad::Var loss(ad::Tape& tape, std::span<const ad::Var> raw, std::uint64_t seed) const;
  double loss_value(std::span<const double> raw, std::uint64_t seed) const;
  ad::Objective frozen(std::uint64_t seed) const;

  const RbfKernel& kernel() const { return kernel_; }
  const std::vector<double>& weights() const { return weights_; }
  // sum_i w_i MMD^2(barycenter, data_i); R^2 = 1 - loss / r2_denominator.
  double r2_denominator() const { return r2_denominator_; }
  const SnapshotDataset& train() const { return train_; }
  const SdeModel& model() const { return model_; }

 private:
  SnapshotDataset train_;
  SdeModel model_;
  InitialDistribution init_;
  FitConfig cfg_;
  RbfKernel kernel_;
  std::vector<double> weights_;
  std::vector<double> data_terms_;
  double r2_denominator_ = 0.0;
};

// One-shot convenience over SnapMmdObjective.
ad::Var snapmmd_loss(ad::Tape& tape, std::span<const ad::Var> raw, const SnapshotDataset& train, const SdeModel& model,
                     const InitialDistribution& init, const FitConfig& cfg, std::uint64_t seed);

enum class StopReason { early_stop, max_epochs, divergence };
std::string to_string(StopReason r);

struct FitResult {
  SdeModel model;  // parameters with the best R^2 seen
  std::vector<double> loss_history;
  std::vector<double> r2_history;
  std::size_t epochs = 0;
  StopReason stop_reason = StopReason::max_epochs;
  std::optional<std::size_t> best_epoch;
  double best_r2 = 0.0;
  double lengthscale = 0.0;
  std::string message;
};

nlohmann::json to_json(const FitResult& r);

using EpochCallback = std::function<void(std::size_t epoch, double loss, double r2)>;

FitResult fit(const SnapshotDataset& train, const SdeModel& model, const InitialDistribution& init,
              const FitConfig& cfg, const EpochCallback& on_epoch = {});

// Draws cfg.init_candidates default initializations of `family` (seeded from
// `init_seed`), ranks the ones with a finite loss at the first epoch's noise,
// fits the cfg.restarts lowest and keeps the run with the highest best R^2.
FitResult fit_multistart(const SnapshotDataset& train, Family family, const InitialDistribution& init,
                         const FitConfig& cfg, std::uint64_t init_seed,
                         std::vector<std::size_t> mlp_hidden = {32, 64, 32}, const EpochCallback& on_epoch = {});

// Seed for epoch `epoch` under the configured noise mode.
std::uint64_t epoch_seed(const FitConfig& cfg, std::size_t epoch);

}  // namespace snapmmd
