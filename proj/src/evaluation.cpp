#include "snapmmd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "snapmmd/errors.hpp"
#include "snapmmd/io.hpp"

namespace snapmmd {

AtomicMeasure barycenter(const SnapshotDataset& ds) {
  if (ds.size() == 0) throw InsufficientDataError("barycenter of an empty dataset");
  const auto w = weights(ds);
  double norm = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) norm += w[i] * static_cast<double>(ds.snapshots[i].count());
  AtomicMeasure out;
  out.points = ds.pooled_states();
  out.masses.resize(out.points.rows());
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t n = 0; n < ds.snapshots[i].count(); ++n) out.masses(row++) = w[i] / norm;
  }
  return out;
}

double r2_denominator(const SnapshotDataset& ds, const RbfKernel& k) {
  const AtomicMeasure bary = barycenter(ds);
  const auto w = weights(ds);
  // The barycenter self-term is shared by every snapshot.
  const double bb = weighted_cross_sum(k, bary.points, bary.masses, bary.points, bary.masses);
  double den = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const AtomicMeasure emp = AtomicMeasure::uniform(ds.snapshots[i].states);
    const double v = bb - 2.0 * weighted_cross_sum(k, bary.points, bary.masses, emp.points, emp.masses) +
                     weighted_cross_sum(k, emp.points, emp.masses, emp.points, emp.masses);
    den += w[i] * std::max(v, 0.0);
  }
  return den;
}

namespace {

double checked_ratio(double num, double den) {
  if (den <= 1e-14) throw DegenerateError("R^2 undefined: every snapshot matches the barycenter");
  return 1.0 - num / den;
}

}  // namespace

double r_squared(const SnapshotDataset& ds, std::span<const Matrix> predicted, const RbfKernel& k) {
  if (predicted.size() != ds.size()) throw DimensionError("one prediction per snapshot is required");
  const auto w = weights(ds);
  double num = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) num += w[i] * mmd_u(k, ds.snapshots[i].states, predicted[i]);
  return checked_ratio(num, r2_denominator(ds, k));
}

double r_squared_exact(const SnapshotDataset& ds, std::span<const AtomicMeasure> predicted, const RbfKernel& k) {
  if (predicted.size() != ds.size()) throw DimensionError("one prediction per snapshot is required");
  const auto w = weights(ds);
  double num = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    num += w[i] * mmd_exact(k, predicted[i], AtomicMeasure::uniform(ds.snapshots[i].states));
  }
  return checked_ratio(num, r2_denominator(ds, k));
}

// ---------------------------------------------------------------------------
// Exact transport by successive shortest paths.
//
// Row i supplies M units, column j demands N units, so every unit carries
// mass 1/(NM). Dijkstra runs on reduced costs over the residual bipartite
// graph (row -> column always open, column -> row where flow is positive);
// rows with spare supply are sources at distance 0.

double emd(const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) throw DimensionError("EMD point sets have different dimensions");
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const std::size_t m = static_cast<std::size_t>(y.rows());
  if (n == 0 || m == 0) throw InsufficientDataError("EMD needs non-empty point sets");
  if (static_cast<double>(n) * static_cast<double>(m) > 4e6) throw SizeLimitError("EMD problem exceeds 4e6 cost entries");

  std::vector<double> cost(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) cost[i * m + j] = (x.row(static_cast<Eigen::Index>(i)) - y.row(static_cast<Eigen::Index>(j))).norm();
  }

  std::vector<long long> supply(n, static_cast<long long>(m));
  std::vector<long long> demand(m, static_cast<long long>(n));
  std::vector<long long> flow(n * m, 0);
  std::vector<double> pot_row(n, 0.0), pot_col(m, 0.0);

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist_row(n), dist_col(m);
  std::vector<char> done_row(n), done_col(m);
  std::vector<std::size_t> parent_col(m);  // row feeding each column
  std::vector<std::size_t> parent_row(n);  // column feeding each row (reverse edge)
  std::vector<char> is_source(n);

  long long remaining = static_cast<long long>(n) * static_cast<long long>(m);
  while (remaining > 0) {
    std::fill(dist_row.begin(), dist_row.end(), inf);
    std::fill(dist_col.begin(), dist_col.end(), inf);
    std::fill(done_row.begin(), done_row.end(), 0);
    std::fill(done_col.begin(), done_col.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      is_source[i] = supply[i] > 0;
      if (is_source[i]) dist_row[i] = 0.0;
    }

    for (std::size_t iter = 0; iter < n + m; ++iter) {
      double best = inf;
      std::size_t node = 0;
      bool row_node = true;
      for (std::size_t i = 0; i < n; ++i) {
        if (!done_row[i] && dist_row[i] < best) best = dist_row[i], node = i, row_node = true;
      }
      for (std::size_t j = 0; j < m; ++j) {
        if (!done_col[j] && dist_col[j] < best) best = dist_col[j], node = j, row_node = false;
      }
      if (best == inf) break;
      if (row_node) {
        done_row[node] = 1;
        for (std::size_t j = 0; j < m; ++j) {
          if (done_col[j]) continue;
          const double rc = std::max(0.0, cost[node * m + j] + pot_row[node] - pot_col[j]);
          if (best + rc < dist_col[j]) dist_col[j] = best + rc, parent_col[j] = node;
        }
      } else {
        done_col[node] = 1;
        for (std::size_t i = 0; i < n; ++i) {
          if (done_row[i] || flow[i * m + node] == 0) continue;
          const double rc = std::max(0.0, -cost[i * m + node] + pot_col[node] - pot_row[i]);
          if (best + rc < dist_row[i]) dist_row[i] = best + rc, parent_row[i] = node;
        }
      }
    }

    // Cheapest column with open demand, measured in true path cost.
    std::size_t target = m;
    double target_cost = inf;
    for (std::size_t j = 0; j < m; ++j) {
      if (demand[j] > 0 && dist_col[j] < inf && dist_col[j] + pot_col[j] < target_cost) {
        target_cost = dist_col[j] + pot_col[j];
        target = j;
      }
    }
    if (target == m) throw NumericalError("transport solver found no augmenting path");

    long long delta = demand[target];
    std::size_t j = target;
    std::size_t source = n;
    while (true) {
      const std::size_t i = parent_col[j];
      if (is_source[i]) {
        source = i;
        break;
      }
      const std::size_t prev = parent_row[i];
      delta = std::min(delta, flow[i * m + prev]);
      j = prev;
    }
    delta = std::min(delta, supply[source]);

    j = target;
    while (true) {
      const std::size_t i = parent_col[j];
      flow[i * m + j] += delta;
      if (i == source) break;
      const std::size_t prev = parent_row[i];
      flow[i * m + prev] -= delta;
      j = prev;
    }
    supply[source] -= delta;
    demand[target] -= delta;
    remaining -= delta;

    for (std::size_t i = 0; i < n; ++i) pot_row[i] += dist_row[i];
    for (std::size_t c = 0; c < m; ++c) pot_col[c] += dist_col[c];
  }

  double total = 0.0;
  for (std::size_t k = 0; k < n * m; ++k) {
    if (flow[k] != 0) total += static_cast<double>(flow[k]) * cost[k];
  }
  return total / (static_cast<double>(n) * static_cast<double>(m));
}

// ---------------------------------------------------------------------------

GridSpec GridSpec::bounding_box(const Matrix& points, std::size_t per_axis) {
  if (points.rows() == 0) throw InsufficientDataError("bounding box of no points");
  GridSpec g;
  for (Eigen::Index c = 0; c < points.cols(); ++c) {
    g.lo.push_back(points.col(c).minCoeff());
    g.hi.push_back(points.col(c).maxCoeff());
    g.count.push_back(per_axis);
  }
  g.validate();
  return g;
}

std::size_t GridSpec::node_count() const {
  std::size_t n = 1;
  for (std::size_t c : count) n *= c;
  return n;
}

std::vector<double> GridSpec::node(std::size_t flat) const {
  std::vector<double> x(dim());
  for (std::size_t c = 0; c < dim(); ++c) {
    const std::size_t k = flat % count[c];
    flat /= count[c];
    x[c] = lo[c] + (hi[c] - lo[c]) * static_cast<double>(k) / static_cast<double>(count[c] - 1);
  }
  return x;
}

void GridSpec::validate() const {
  if (lo.size() != hi.size() || lo.size() != count.size() || lo.empty()) throw DimensionError("inconsistent grid spec");
  for (std::size_t c = 0; c < lo.size(); ++c) {
    if (count[c] < 2) throw ValidationError("grid needs at least 2 nodes per coordinate");
    if (!(lo[c] < hi[c])) throw ValidationError("grid needs lo < hi on every coordinate");
  }
}

double drift_mse(const SdeModel& fitted, const DriftField& truth, const GridSpec& grid) {
  grid.validate();
  if (grid.dim() != fitted.dim_state) throw DimensionError("grid dimension differs from model state dimension");
  const auto nat = fitted.params.natural();
  std::vector<double> b(fitted.dim_state);
  std::vector<std::size_t> bad;
  double total = 0.0;
  const std::size_t nodes = grid.node_count();
  for (std::size_t k = 0; k < nodes; ++k) {
    const auto x = grid.node(k);
    fitted.drift<double>(nat, x, 0.0, b);
    const auto t = truth(x);
    if (t.size() != b.size()) throw DimensionError("truth drift has a different state dimension");
    double s = 0.0;
    for (std::size_t c = 0; c < b.size(); ++c) s += (b[c] - t[c]) * (b[c] - t[c]);
    if (!std::isfinite(s)) {
      bad.push_back(k);
      continue;
    }
    total += s;
  }
  if (!bad.empty()) {
    std::string list;
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 10); ++i) list += (i ? ", " : "") + std::to_string(bad[i]);
    throw NumericalError("non-finite drift at " + std::to_string(bad.size()) + " grid nodes (" + list + ")");
  }
  return total / static_cast<double>(nodes);
}

double drift_mse(const SdeModel& fitted, const SdeModel& truth, const GridSpec& grid) {
  const auto nat = truth.params.natural();
  return drift_mse(fitted, [&](std::span<const double> x) {
    std::vector<double> out(x.size());
    truth.drift<double>(nat, x, 0.0, out);
    return out;
  }, grid);
}

// ---------------------------------------------------------------------------

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

EvalReport score_holdout(const SdeModel& fitted, const InitialDistribution& init, const SnapshotDataset& train,
                         const SnapshotDataset& holdout_in, const ScoreOptions& options, TrajectoryBatch* cloud) {
  if (holdout_in.size() == 0) throw InsufficientDataError("empty holdout set");
  if (holdout_in.dim_observed() != fitted.dim_observed()) throw DimensionError("holdout dimension differs from model");
  const SnapshotDataset holdout = rescale_with(holdout_in, train.time_scale);
  const auto times = holdout.times();
  if (times.front() < 0.0) throw ConfigError("holdout time precedes the training start");

  SimOptions sim;
  sim.time_factor = train.time_scale.factor;
  sim.threads = options.threads;
  TrajectoryBatch batch = simulate(fitted, init, times, options.substep, options.trajectories, options.seed, sim);

  const RbfKernel k(options.eval_lengthscale);
  EvalReport report;
  report.emd_available = holdout.dim_observed() <= 10;
  if (!report.emd_available) report.warnings.push_back("EMD omitted for more than 10 observed dimensions");

  std::vector<double> mmds, emds;
  for (std::size_t i = 0; i < holdout.size(); ++i) {
    TimeScore s;
    s.time = times[i];
    s.raw_time = holdout.time_scale.to_raw(times[i]);
    s.observed = holdout.snapshots[i].count();
    const Matrix pred = batch.snapshot(i, fitted.observed_coords);
    if (!pred.allFinite()) {
      s.diverged = true;
      report.warnings.push_back("simulation diverged before time " + format_double(s.raw_time) + "; excluded");
      report.per_time.push_back(s);
      continue;
    }
    const Matrix& data = holdout.snapshots[i].states;
    if (data.rows() >= 2 && pred.rows() >= 2) {
      s.mmd = mmd_u(k, data, pred);
      mmds.push_back(*s.mmd);
    }
    if (report.emd_available) {
      s.emd = emd(data, pred);
      emds.push_back(*s.emd);
    }
    report.per_time.push_back(s);
  }
  report.mmd = aggregate(mmds);
  report.emd = aggregate(emds);
  if (cloud) *cloud = std::move(batch);
  return report;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  auto& rows = j["per_time"] = nlohmann::json::array();
  for (const auto& s : r.per_time) {
    nlohmann::json row = {{"time", s.time}, {"raw_time", s.raw_time}, {"observed", s.observed}, {"diverged", s.diverged}};
    row["mmd"] = s.mmd ? nlohmann::json(*s.mmd) : nlohmann::json(nullptr);
    row["emd"] = s.emd ? nlohmann::json(*s.emd) : nlohmann::json(nullptr);
    rows.push_back(row);
  }
  j["mmd"] = {{"mean", r.mmd.mean}, {"sd", r.mmd.sd}, {"count", r.mmd.count}};
  if (r.emd_available) {
    j["emd"] = {{"mean", r.emd.mean}, {"sd", r.emd.sd}, {"count", r.emd.count}};
  } else {
    j["emd"] = nullptr;
  }
  j["r_squared"] = r.r_squared ? nlohmann::json(*r.r_squared) : nlohmann::json(nullptr);
  if (r.drift_mse) j["drift_mse"] = *r.drift_mse;
  j["warnings"] = r.warnings;
  return j;
}

std::string to_csv(const EvalReport& r) {
  auto field = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::string out = "time,mmd,emd\n";
  for (const auto& s : r.per_time) out += format_double(s.raw_time) + "," + field(s.mmd) + "," + field(s.emd) + "\n";
  const bool has_mmd = r.mmd.count > 0;
  const bool has_emd = r.emd_available && r.emd.count > 0;
  out += "mean," + (has_mmd ? format_double(r.mmd.mean) : "") + "," + (has_emd ? format_double(r.emd.mean) : "") + "\n";
  out += "sd," + (has_mmd ? format_double(r.mmd.sd) : "") + "," + (has_emd ? format_double(r.emd.sd) : "") + "\n";
  return out;
}

}  // namespace snapmmd
