#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace snapmmd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Affine map from stored time to raw time: raw = offset + factor * stored.
struct TimeScale {
  double offset = 0.0;
  double factor = 1.0;

  double to_raw(double stored) const { return offset + factor * stored; }
  double to_scaled(double raw) const { return (raw - offset) / factor; }
  bool operator==(const TimeScale&) const = default;
};

// One destructive measurement round: N_i rows of d observed coordinates.
struct Snapshot {
  double time = 0.0;
  Matrix states;

  std::size_t count() const { return static_cast<std::size_t>(states.rows()); }
  bool operator==(const Snapshot& o) const { return time == o.time && states == o.states; }
};

struct SnapshotDataset {
  std::vector<Snapshot> snapshots;
  // Model state dimension D; equals dim_observed() when fully observed.
  std::size_t dim_state = 0;
  // Model coordinate carried by each observed column.
  std::vector<std::size_t> observed_coords;
  TimeScale time_scale;

  std::size_t size() const { return snapshots.size(); }
  std::size_t dim_observed() const { return observed_coords.size(); }
  std::size_t total_count() const;
  std::vector<double> times() const;
  std::vector<double> raw_times() const;
  // Vertical stack of every snapshot's states.
  Matrix pooled_states() const;

  // Throws ValidationError on any invariant violation.
  void validate() const;

  bool operator==(const SnapshotDataset&) const = default;
};

// Builds a dataset from (time, states) pairs: sorts by time, fully observed.
SnapshotDataset make_dataset(std::vector<Snapshot> snapshots);

// Partial observation: the d data columns are model coordinates `observed`
// of a D-dimensional state. Throws ValidationError on bad indices.
SnapshotDataset with_observation(SnapshotDataset ds, std::size_t dim_state, std::vector<std::size_t> observed);

// `min_times` distinct times are required (simulated clouds may carry one).
SnapshotDataset load_csv(const std::filesystem::path& path, std::size_t min_times = 2);
SnapshotDataset parse_csv(const std::string& text, std::size_t min_times = 2);
std::string to_csv(const SnapshotDataset& ds);
void save_csv(const SnapshotDataset& ds, const std::filesystem::path& path);

nlohmann::json to_json(const SnapshotDataset& ds);
SnapshotDataset dataset_from_json(const nlohmann::json& j);

// Maps stored times to [0,1] (first -> 0, last -> 1). Idempotent; the
// composed map to raw time is kept in time_scale.
SnapshotDataset scale_times(const SnapshotDataset& ds);
// Re-expresses the stored times of `ds` in the stored units of `target`.
SnapshotDataset rescale_with(const SnapshotDataset& ds, const TimeScale& target);

struct SplitSpec {
  enum class Mode { alternating, holdout_last_k, index_list };
  Mode mode = Mode::alternating;
  std::size_t k = 1;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> validation_indices;

  static SplitSpec alternating() { return {}; }
  static SplitSpec holdout_last(std::size_t k) { return {Mode::holdout_last_k, k, {}, {}}; }
  static SplitSpec indices(std::vector<std::size_t> train, std::vector<std::size_t> validation) {
    return {Mode::index_list, 0, std::move(train), std::move(validation)};
  }
};

struct Split {
  SnapshotDataset train;
  SnapshotDataset validation;
};

// Alternating keeps positions 0,2,4,... for training and 1,3,5,... for
// validation.
Split split(const SnapshotDataset& ds, const SplitSpec& spec);
// Union of two datasets on the same time scale, ordered by time.
SnapshotDataset merge(const SnapshotDataset& a, const SnapshotDataset& b);

// Objective weights w_i = (N_i / sum_j N_j)^2 in snapshot order.
std::vector<double> weights(const SnapshotDataset& ds);

}  // namespace snapmmd
