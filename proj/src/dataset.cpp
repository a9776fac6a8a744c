#include "snapmmd/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "snapmmd/errors.hpp"
#include "snapmmd/io.hpp"

namespace snapmmd {

std::size_t SnapshotDataset::total_count() const {
  std::size_t n = 0;
  for (const auto& s : snapshots) n += s.count();
  return n;
}

std::vector<double> SnapshotDataset::times() const {
  std::vector<double> t;
  t.reserve(snapshots.size());
  for (const auto& s : snapshots) t.push_back(s.time);
  return t;
}

std::vector<double> SnapshotDataset::raw_times() const {
  std::vector<double> t;
  t.reserve(snapshots.size());
  for (const auto& s : snapshots) t.push_back(time_scale.to_raw(s.time));
  return t;
}

Matrix SnapshotDataset::pooled_states() const {
  Matrix out(static_cast<Eigen::Index>(total_count()), static_cast<Eigen::Index>(dim_observed()));
  Eigen::Index row = 0;
  for (const auto& s : snapshots) {
    out.middleRows(row, s.states.rows()) = s.states;
    row += s.states.rows();
  }
  return out;
}

void SnapshotDataset::validate() const {
  const std::size_t d = dim_observed();
  if (d == 0) throw ValidationError("dataset has no observed coordinates");
  if (dim_state < d) throw ValidationError("state dimension smaller than observed dimension");
  std::set<std::size_t> seen;
  for (std::size_t c : observed_coords) {
    if (c >= dim_state) throw ValidationError("observed coordinate " + std::to_string(c) + " out of range");
    if (!seen.insert(c).second) throw ValidationError("duplicate observed coordinate " + std::to_string(c));
  }
  if (!(time_scale.factor > 0.0) || !std::isfinite(time_scale.offset)) throw ValidationError("invalid time scale");
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    const auto& s = snapshots[i];
    if (!std::isfinite(s.time)) throw ValidationError("non-finite snapshot time");
    if (i > 0 && !(s.time > snapshots[i - 1].time)) throw ValidationError("snapshot times not strictly increasing");
    if (s.states.rows() < 1) throw ValidationError("empty snapshot at time " + std::to_string(s.time));
    if (static_cast<std::size_t>(s.states.cols()) != d) throw ValidationError("snapshot dimension mismatch");
    if (!s.states.allFinite()) throw ValidationError("non-finite state value at time " + std::to_string(s.time));
  }
}

SnapshotDataset make_dataset(std::vector<Snapshot> snapshots) {
  std::sort(snapshots.begin(), snapshots.end(), [](const Snapshot& a, const Snapshot& b) { return a.time < b.time; });
  SnapshotDataset ds;
  ds.snapshots = std::move(snapshots);
  const std::size_t d = ds.snapshots.empty() ? 0 : static_cast<std::size_t>(ds.snapshots.front().states.cols());
  ds.dim_state = d;
  ds.observed_coords.resize(d);
  std::iota(ds.observed_coords.begin(), ds.observed_coords.end(), std::size_t{0});
  ds.validate();
  return ds;
}

SnapshotDataset with_observation(SnapshotDataset ds, std::size_t dim_state, std::vector<std::size_t> observed) {
  if (observed.size() != ds.dim_observed()) {
    throw ValidationError("observed coordinate list has " + std::to_string(observed.size()) + " entries but data has " +
                          std::to_string(ds.dim_observed()) + " columns");
  }
  ds.dim_state = dim_state;
  ds.observed_coords = std::move(observed);
  ds.validate();
  return ds;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

double parse_number(std::string_view field, std::size_t line) {
  if (!field.empty() && field.front() == '+') field.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw ParseError("malformed number '" + std::string(field) + "'", line);
  }
  return v;
}

}  // namespace

SnapshotDataset parse_csv(const std::string& text, std::size_t min_times) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::size_t columns = 0;
  std::map<double, std::vector<std::vector<double>>> groups;

  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.empty()) continue;
    const auto fields = split_fields(view);
    if (columns == 0) {
      if (fields.size() < 2 || fields[0] != "time") throw ParseError("header must be 'time,y1,...,yd'", lineno);
      columns = fields.size();
      continue;
    }
    if (fields.size() != columns) {
      throw ParseError("expected " + std::to_string(columns) + " fields, found " + std::to_string(fields.size()), lineno);
    }
    std::vector<double> row(columns - 1);
    const double t = parse_number(fields[0], lineno);
    for (std::size_t c = 1; c < columns; ++c) row[c - 1] = parse_number(fields[c], lineno);
    if (!std::isfinite(t) || !std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
      throw ValidationError("non-finite value on line " + std::to_string(lineno));
    }
    groups[t].push_back(std::move(row));
  }
  if (columns == 0) throw ParseError("missing header", lineno);
  if (groups.size() < min_times)
    throw InsufficientDataError("need at least " + std::to_string(min_times) + " distinct times, found " + std::to_string(groups.size()));

  std::vector<Snapshot> snaps;
  for (auto& [t, rows] : groups) {
    Snapshot s;
    s.time = t;
    s.states.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns - 1));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c + 1 < columns; ++c) s.states(r, c) = rows[r][c];
    }
    snaps.push_back(std::move(s));
  }
  return make_dataset(std::move(snaps));
}

SnapshotDataset load_csv(const std::filesystem::path& path, std::size_t min_times) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), min_times);
}

std::string to_csv(const SnapshotDataset& ds) {
  std::string out = "time";
  for (std::size_t c = 0; c < ds.dim_observed(); ++c) out += ",y" + std::to_string(c + 1);
  out += '\n';
  for (const auto& s : ds.snapshots) {
    const std::string t = format_double(ds.time_scale.to_raw(s.time));
    for (Eigen::Index r = 0; r < s.states.rows(); ++r) {
      out += t;
      for (Eigen::Index c = 0; c < s.states.cols(); ++c) {
        out += ',';
        out += format_double(s.states(r, c));
      }
      out += '\n';
    }
  }
  return out;
}

void save_csv(const SnapshotDataset& ds, const std::filesystem::path& path) { write_file_atomic(path, to_csv(ds)); }

nlohmann::json to_json(const SnapshotDataset& ds) {
  nlohmann::json j;
  j["dim_state"] = ds.dim_state;
  j["observed_coords"] = ds.observed_coords;
  j["time_scale"] = {{"offset", ds.time_scale.offset}, {"factor", ds.time_scale.factor}};
  auto& arr = j["snapshots"] = nlohmann::json::array();
  for (const auto& s : ds.snapshots) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < s.states.rows(); ++r) {
      std::vector<double> row(s.states.row(r).begin(), s.states.row(r).end());
      rows.push_back(row);
    }
    arr.push_back({{"time", s.time}, {"states", rows}});
  }
  return j;
}

SnapshotDataset dataset_from_json(const nlohmann::json& j) {
  std::vector<Snapshot> snaps;
  for (const auto& js : j.at("snapshots")) {
    Snapshot s;
    s.time = js.at("time").get<double>();
    const auto rows = js.at("states").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw ValidationError("empty snapshot in JSON");
    s.states.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows[0].size()) throw ValidationError("ragged state matrix in JSON");
      for (std::size_t c = 0; c < rows[r].size(); ++c) s.states(r, c) = rows[r][c];
    }
    snaps.push_back(std::move(s));
  }
  SnapshotDataset ds = make_dataset(std::move(snaps));
  if (j.contains("time_scale")) {
    ds.time_scale.offset = j["time_scale"].at("offset").get<double>();
    ds.time_scale.factor = j["time_scale"].at("factor").get<double>();
  }
  if (j.contains("observed_coords")) {
    ds = with_observation(std::move(ds), j.value("dim_state", ds.dim_observed()),
                          j["observed_coords"].get<std::vector<std::size_t>>());
  }
  ds.validate();
  return ds;
}

SnapshotDataset scale_times(const SnapshotDataset& ds) {
  if (ds.size() < 2) throw InsufficientDataError("time scaling needs at least 2 snapshots");
  const double first = ds.snapshots.front().time;
  const double last = ds.snapshots.back().time;
  if (!(last > first)) throw DegenerateError("all snapshot times are equal");
  if (first == 0.0 && last == 1.0) return ds;

  const double span = last - first;
  SnapshotDataset out = ds;
  for (auto& s : out.snapshots) s.time = (s.time - first) / span;
  out.snapshots.front().time = 0.0;
  out.snapshots.back().time = 1.0;
  out.time_scale.offset = ds.time_scale.to_raw(first);
  out.time_scale.factor = ds.time_scale.factor * span;
  return out;
}

SnapshotDataset rescale_with(const SnapshotDataset& ds, const TimeScale& target) {
  SnapshotDataset out = ds;
  if (ds.time_scale == target) return out;
  for (auto& s : out.snapshots) s.time = target.to_scaled(ds.time_scale.to_raw(s.time));
  out.time_scale = target;
  out.validate();
  return out;
}

namespace {

SnapshotDataset subset(const SnapshotDataset& ds, const std::vector<std::size_t>& idx) {
  SnapshotDataset out;
  out.dim_state = ds.dim_state;
  out.observed_coords = ds.observed_coords;
  out.time_scale = ds.time_scale;
  for (std::size_t i : idx) out.snapshots.push_back(ds.snapshots[i]);
  return out;
}

}  // namespace

Split split(const SnapshotDataset& ds, const SplitSpec& spec) {
  const std::size_t n = ds.size();
  std::vector<std::size_t> train, val;
  switch (spec.mode) {
    case SplitSpec::Mode::alternating:
      for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? train : val).push_back(i);
      break;
    case SplitSpec::Mode::holdout_last_k:
      if (spec.k > n) throw ValidationError("holdout_last_k exceeds snapshot count");
      for (std::size_t i = 0; i < n; ++i) (i + spec.k < n ? train : val).push_back(i);
      break;
    case SplitSpec::Mode::index_list: {
      train = spec.train_indices;
      val = spec.validation_indices;
      std::set<std::size_t> seen;
      for (std::size_t i : train) {
        if (i >= n) throw ValidationError("split index " + std::to_string(i) + " out of range");
        if (!seen.insert(i).second) throw ValidationError("duplicate split index " + std::to_string(i));
      }
      for (std::size_t i : val) {
        if (i >= n) throw ValidationError("split index " + std::to_string(i) + " out of range");
        if (!seen.insert(i).second) throw ValidationError("train and validation indices overlap at " + std::to_string(i));
      }
      std::sort(train.begin(), train.end());
      std::sort(val.begin(), val.end());
      break;
    }
  }
  if (train.empty()) throw InsufficientDataError("split leaves an empty training set");
  return {subset(ds, train), subset(ds, val)};
}

SnapshotDataset merge(const SnapshotDataset& a, const SnapshotDataset& b) {
  if (a.dim_observed() != b.dim_observed() || !(a.time_scale == b.time_scale)) {
    throw ValidationError("cannot merge datasets with different layouts");
  }
  SnapshotDataset out = a;
  out.snapshots.insert(out.snapshots.end(), b.snapshots.begin(), b.snapshots.end());
  std::sort(out.snapshots.begin(), out.snapshots.end(),
            [](const Snapshot& x, const Snapshot& y) { return x.time < y.time; });
  out.validate();
  return out;
}

std::vector<double> weights(const SnapshotDataset& ds) {
  const double total = static_cast<double>(ds.total_count());
  std::vector<double> w;
  w.reserve(ds.size());
  for (const auto& s : ds.snapshots) {
    const double r = static_cast<double>(s.count()) / total;
    w.push_back(r * r);
  }
  return w;
}

}  // namespace snapmmd
