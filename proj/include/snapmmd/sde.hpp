#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "snapmmd/autodiff.hpp"
#include "snapmmd/dataset.hpp"

namespace snapmmd {

enum class Family { lotka_volterra, repressilator3, repressilator_protein, lamb_oseen_vortex, semiparam_grn, custom };

std::string family_name(Family f);
// Accepts the CLI spellings: lv, repr3, repr_protein, vortex, semiparam.
Family family_from_name(const std::string& name);
std::vector<std::string> family_names();

enum class Transform { identity, exp };

// Unconstrained parameters plus the map to natural space. Exp entries are
// strictly positive in natural space.
struct ParamVector {
  std::vector<double> raw;
  std::vector<Transform> transforms;
  std::vector<std::string> names;

  std::size_t size() const { return raw.size(); }
  void push(std::string name, double natural_value, Transform t);
  double natural(std::size_t i) const;
  std::vector<double> natural() const;
  void set_natural(std::size_t i, double value);
  std::size_t index_of(const std::string& name) const;

  template <class T>
  std::vector<T> to_natural(std::span<const T> raw_values) const {
    std::vector<T> out;
    out.reserve(raw_values.size());
    for (std::size_t i = 0; i < raw_values.size(); ++i) {
      out.push_back(transforms[i] == Transform::exp ? T(ad::exp(raw_values[i])) : raw_values[i]);
    }
    return out;
  }
};

// Fully connected network: rectifier hidden layers, sigmoid output layer.
// Weights are stored layer by layer as (row-major W, then b).
struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> hidden;
  std::size_t output = 0;

  std::size_t parameter_count() const;
  template <class T>
  void forward(std::span<const T> weights, std::span<const T> x, std::span<T> out) const;
};

// User-supplied drift/diffusion, written once per scalar type.
struct CustomFamily {
  template <class T>
  using Field = std::function<void(std::span<const T> params, std::span<const T> x, double t, std::span<T> out)>;

  std::string name = "custom";
  std::size_t dim = 0;
  Field<double> drift;
  Field<double> diffusion;
  Field<ad::Var> drift_var;
  Field<ad::Var> diffusion_var;
};

class SdeModel {
 public:
  Family family = Family::custom;
  ParamVector params;
  std::size_t dim_state = 0;
  std::vector<std::size_t> observed_coords;
  std::optional<MlpSpec> mlp;
  std::shared_ptr<const CustomFamily> custom;

  std::size_t dim_observed() const { return observed_coords.size(); }

  // Family fields at the given natural parameters. Diffusion is the diagonal
  // of the volatility matrix. `t` is scaled time; all shipped families are
  // time-homogeneous.
  template <class T>
  void drift(std::span<const T> natural, std::span<const T> x, double t, std::span<T> out) const;
  template <class T>
  void diffusion(std::span<const T> natural, std::span<const T> x, double t, std::span<T> out) const;

  // Checked evaluation at the model's current parameters: rejects states of
  // the wrong dimension and throws NumericalError on non-finite output.
  std::vector<double> drift(std::span<const double> x, double t = 0.0) const;
  std::vector<double> diffusion(std::span<const double> x, double t = 0.0) const;
};

SdeModel make_lotka_volterra(double alpha, double beta, double gamma, double delta, double sigma);
SdeModel make_repressilator3(double beta, double n, double k, double gamma, double sigma);
SdeModel make_repressilator_protein(double alpha, double beta, double n, double k, double gamma, double beta_p,
                                    double gamma_p, double sigma);
struct VortexParams {
  double gamma = 1.0;
  double r_v = 1.0;
  double x0 = 0.0;
  double y0 = 0.0;
  double d = 0.0;
  double r_d = 1.0;
  double x0_d = 0.0;
  double y0_d = 0.0;
  double sigma = 0.1;
};
SdeModel make_vortex(const VortexParams& p);
// Production rates M, degradation L, volatilities G (each length dim), MLP
// weights drawn with fan-in scaled uniform init from `seed`.
SdeModel make_semiparam_grn(std::size_t dim, std::vector<std::size_t> hidden, std::span<const double> production,
                            std::span<const double> degradation, std::span<const double> volatility, std::uint64_t seed);
SdeModel make_custom(std::shared_ptr<const CustomFamily> family, ParamVector params);

// Untrained instance of a family with default initial parameters: rates
// log-uniform in [0.05, 5], volatilities log-uniform in [0.01, 0.1], location
// parameters from the data centroid when `data` is given.
SdeModel initial_model(Family family, std::size_t dim_state, std::vector<std::size_t> observed_coords,
                       std::uint64_t seed, const SnapshotDataset* data = nullptr,
                       std::vector<std::size_t> mlp_hidden = {32, 64, 32});

nlohmann::json to_json(const SdeModel& model);
SdeModel model_from_json(const nlohmann::json& j);

struct InitialDistribution {
  enum class Kind { empirical_resample, uniform_box, point_mass };
  Kind kind = Kind::point_mass;
  std::size_t dim_state = 0;
  // empirical_resample: rows to draw from, their model coordinates, and the
  // values placed on the remaining coordinates (in increasing index order).
  Matrix rows;
  std::vector<std::size_t> observed_coords;
  std::vector<double> fill;
  // uniform_box
  std::vector<double> lo;
  std::vector<double> hi;
  // point_mass
  std::vector<double> point;

  static InitialDistribution empirical(const Matrix& rows, std::size_t dim_state, std::vector<std::size_t> observed,
                                       std::vector<double> fill);
  static InitialDistribution uniform_box(std::vector<double> lo, std::vector<double> hi);
  static InitialDistribution point_mass(std::vector<double> x);
  void validate() const;
};

// Independent generator for trajectory `index`; `purpose` separates the
// initial-state draw (1) from the Brownian increments (0).
std::mt19937_64 trajectory_stream(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose);

std::vector<double> sample_initial_one(const InitialDistribution& init, std::size_t index, std::uint64_t seed);
Matrix sample_initial(const InitialDistribution& init, std::size_t count, std::uint64_t seed);

struct SimOptions {
  // Raw time per unit of scaled time; Euler increments use raw durations.
  double time_factor = 1.0;
  std::size_t threads = 1;
};

// Integration grid from 0 through the last output time; every step is at
// most `substep` and every output time is a grid node. `record[k]` is the
// grid index of output time k.
struct TimeGrid {
  std::vector<double> nodes;
  std::vector<std::size_t> record;
};
TimeGrid build_grid(std::span<const double> out_times, double substep);

struct TrajectoryBatch {
  std::vector<double> times;
  std::size_t count = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  // count x times x dim, trajectory-major.
  std::vector<double> states;
  // First grid step with a non-finite state, per trajectory.
  std::vector<std::optional<std::size_t>> diverged_at;

  double at(std::size_t m, std::size_t k, std::size_t c) const { return states[(m * times.size() + k) * dim + c]; }
  bool any_diverged() const;
  // count x |coords| states at output time k; diverged trajectories are
  // included unless `drop_diverged`.
  Matrix snapshot(std::size_t k, std::span<const std::size_t> coords, bool drop_diverged = false) const;
  Matrix snapshot(std::size_t k) const;
  bool operator==(const TrajectoryBatch&) const = default;
};

// Euler-Maruyama with per-trajectory noise streams; bit-reproducible.
TrajectoryBatch simulate(const SdeModel& model, const InitialDistribution& init, std::span<const double> out_times,
                         double substep, std::size_t count, std::uint64_t seed, const SimOptions& options = {});

// Same recursion recorded on a tape with the natural parameters as Vars.
// Returns, per output time, a count x dim row-major block. Non-finite states
// throw NumericalError.
std::vector<std::vector<ad::Var>> simulate_on_tape(const SdeModel& model, std::span<const ad::Var> natural,
                                                   const InitialDistribution& init, std::span<const double> out_times,
                                                   double substep, std::size_t count, std::uint64_t seed,
                                                   const SimOptions& options = {});

}  // namespace snapmmd
