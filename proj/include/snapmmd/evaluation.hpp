#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "snapmmd/dataset.hpp"
#include "snapmmd/kernel.hpp"
#include "snapmmd/sde.hpp"

namespace snapmmd {

// Weighted mixture of all observations: each row of snapshot i carries mass
// w_i / sum_j w_j N_j.
AtomicMeasure barycenter(const SnapshotDataset& ds);

// sum_i w_i MMD^2(barycenter, empirical_i), computed exactly.
double r2_denominator(const SnapshotDataset& ds, const RbfKernel& k);

// RKHS coefficient of determination with U-statistic numerator; `predicted`
// holds one sample matrix (observed coordinates only) per snapshot. Not
// clamped: slightly above 1 or below 0 are both legitimate.
double r_squared(const SnapshotDataset& ds, std::span<const Matrix> predicted, const RbfKernel& k);
// Same with known predicted laws and exact MMD in the numerator.
double r_squared_exact(const SnapshotDataset& ds, std::span<const AtomicMeasure> predicted, const RbfKernel& k);

// Exact 1-Wasserstein distance between the uniform laws on the rows of x and
// y under Euclidean cost. Throws SizeLimitError when N*M > 4e6.
double emd(const Matrix& x, const Matrix& y);

struct GridSpec {
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<std::size_t> count;

  // Axis-aligned bounding box of the rows of `points`.
  static GridSpec bounding_box(const Matrix& points, std::size_t per_axis = 20);
  std::size_t dim() const { return lo.size(); }
  std::size_t node_count() const;
  std::vector<double> node(std::size_t flat) const;
  void validate() const;
};

using DriftField = std::function<std::vector<double>(std::span<const double>)>;

// Mean over grid nodes of |fitted(x) - truth(x)|^2 at scaled time 0.
double drift_mse(const SdeModel& fitted, const DriftField& truth, const GridSpec& grid);
double drift_mse(const SdeModel& fitted, const SdeModel& truth, const GridSpec& grid);

struct TimeScore {
  double time = 0.0;      // scaled, in the training time scale
  double raw_time = 0.0;
  std::size_t observed = 0;
  std::optional<double> mmd;
  std::optional<double> emd;
  bool diverged = false;
};

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t count = 0;
};

// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
Aggregate aggregate(std::span<const double> values);

struct EvalReport {
  std::vector<TimeScore> per_time;
  Aggregate mmd;
  Aggregate emd;
  bool emd_available = true;
  std::optional<double> r_squared;
  std::optional<double> drift_mse;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const EvalReport& r);
// `time,mmd,emd` rows then `mean,...` and `sd,...` footer rows.
std::string to_csv(const EvalReport& r);

struct ScoreOptions {
  std::size_t trajectories = 200;
  std::uint64_t seed = 0;
  double substep = 0.01;
  double eval_lengthscale = 1.0;
  std::size_t threads = 1;
};

// Simulates from scaled time 0 through the last held-out time and scores
// each held-out snapshot by MMD (fixed evaluation kernel) and EMD on the
// observed coordinates. Covers interpolation and forecasting alike.
EvalReport score_holdout(const SdeModel& fitted, const InitialDistribution& init, const SnapshotDataset& train,
                         const SnapshotDataset& holdout, const ScoreOptions& options,
                         TrajectoryBatch* cloud = nullptr);

}  // namespace snapmmd
