#include "snapmmd/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "snapmmd/autodiff.hpp"
#include "snapmmd/dataset.hpp"
#include "snapmmd/errors.hpp"
#include "snapmmd/evaluation.hpp"
#include "snapmmd/experiments.hpp"
#include "snapmmd/io.hpp"
#include "snapmmd/sde.hpp"
#include "snapmmd/training.hpp"

namespace snapmmd {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public Error {
  using Error::Error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string key_of(const std::string& flag) {
  std::string k = flag;
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

// Options that take part in config-file precedence (flag > file > default).
struct Knob {
  std::string key;
  CLI::Option* option = nullptr;
  std::function<void(const json&)> set;
  std::function<json()> get;
};

// FitConfig fields exposed as flags; names follow the FitConfig JSON keys.
struct FitFlags {
  double learning_rate = 0.0;
  std::size_t max_epochs = 0;
  std::size_t trajectories = 0;
  double substep = 0.0;
  std::string kernel;
  double lengthscale = 0.0;
  std::string noise;
  bool early_stop = true;
  std::size_t init_candidates = 0;
  std::size_t restarts = 0;
  std::vector<double> init_fill;
  std::map<std::string, CLI::Option*> options;
};

const std::vector<std::string> kFitKeys = {"learning_rate", "max_epochs", "trajectories", "substep",
                                           "kernel",        "lengthscale", "noise",       "early_stop",
                                           "init_candidates", "restarts",  "init_fill"};

class Command {
 public:
  Command(CLI::App& root, const std::string& name, const std::string& help, bool needs_out = true)
      : name_(name), app_(root.add_subcommand(name, help)) {
    knob("seed", seed, "Random seed");
    knob("threads", threads, "Worker threads")->check(CLI::PositiveNumber);
    app_->add_option("--config", config_path, "JSON config file or a previous run manifest")->check(CLI::ExistingFile);
    auto* o = app_->add_option("--out", out, "Output directory, or a file path whose stem names every artifact");
    if (needs_out) o->required();
  }

  CLI::App* app() { return app_; }
  const std::string& name() const { return name_; }

  template <class T>
  CLI::Option* knob(const std::string& flag, T& var, const std::string& help) {
    CLI::Option* o = app_->add_option("--" + flag, var, help);
    if constexpr (requires { var.push_back(var.front()); } && !std::is_same_v<T, std::string>) o->delimiter(',');
    add_knob(flag, o, var);
    return o;
  }
  CLI::Option* toggle(const std::string& flag, bool& var, const std::string& help) {
    CLI::Option* o = app_->add_flag("--" + flag + ",!--no-" + flag, var, help);
    add_knob(flag, o, var);
    return o;
  }

  void fit_flags() {
    fit_enabled_ = true;
    auto& f = fit_;
    auto add = [&](const std::string& key, auto& var, const std::string& help) {
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      CLI::Option* o = app_->add_option("--" + flag, var, help);
      f.options[key] = o;
      return o;
    };
    add("learning_rate", f.learning_rate, "Adam learning rate");
    add("max_epochs", f.max_epochs, "Maximum optimization epochs");
    add("trajectories", f.trajectories, "Simulated trajectories per epoch");
    add("substep", f.substep, "Largest Euler step in scaled time");
    add("kernel", f.kernel, "Training kernel: median_heuristic or fixed");
    add("lengthscale", f.lengthscale, "Training kernel length scale when fixed");
    add("noise", f.noise, "Noise mode: resample_each_epoch or frozen");
    add("init_candidates", f.init_candidates, "Default initializations screened by loss");
    add("restarts", f.restarts, "Screened initializations that are fitted");
    add("init_fill", f.init_fill, "Initial values of unobserved coordinates")->delimiter(',');
    f.options["early_stop"] = app_->add_flag("--early-stop,!--no-early-stop", f.early_stop, "R2 early stopping");
  }

  // Applies the config file under the flags and returns the effective
  // configuration. `fit_base` seeds the FitConfig when fit flags are enabled.
  json resolve(const FitConfig& fit_base = {}) {
    json file = json::object();
    if (!config_path.empty()) {
      try {
        file = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError("config " + config_path + ": " + e.what());
      }
      if (!file.is_object()) throw ConfigError("config must be a JSON object");
      if (file.contains("command") && file.contains("config")) {
        if (file["command"] != name_) throw ConfigError("manifest is for command '" + file["command"].get<std::string>() + "'");
        file = file["config"];
      }
    }
    std::set<std::string> known;
    for (const auto& k : knobs_) known.insert(k.key);
    if (fit_enabled_) {
      known.insert("fit");
      known.insert(kFitKeys.begin(), kFitKeys.end());
    }
    for (const auto& [k, v] : file.items()) {
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "' for " + name_);
    }

    json eff = json::object();
    for (auto& k : knobs_) {
      if (k.option->count() == 0 && file.contains(k.key)) {
        try {
          k.set(file[k.key]);
        } catch (const json::exception& e) {
          throw ConfigError("config key '" + k.key + "': " + e.what());
        }
      }
      eff[k.key] = k.get();
    }
    if (fit_enabled_) {
      json fj = to_json(fit_base);
      if (file.contains("fit")) fj.update(file["fit"]);
      for (const auto& key : kFitKeys)
        if (file.contains(key)) fj[key] = file[key];
      auto& f = fit_;
      auto given = [&](const std::string& key) { return f.options.at(key)->count() > 0; };
      if (given("learning_rate")) fj["learning_rate"] = f.learning_rate;
      if (given("max_epochs")) fj["max_epochs"] = f.max_epochs;
      if (given("trajectories")) fj["trajectories"] = f.trajectories;
      if (given("substep")) fj["substep"] = f.substep;
      if (given("kernel")) fj["kernel"] = f.kernel;
      if (given("lengthscale")) fj["lengthscale"] = f.lengthscale;
      if (given("noise")) fj["noise"] = f.noise;
      if (given("early_stop")) fj["early_stop"] = f.early_stop;
      if (given("init_candidates")) fj["init_candidates"] = f.init_candidates;
      if (given("restarts")) fj["restarts"] = f.restarts;
      if (given("init_fill")) fj["init_fill"] = f.init_fill;
      fj["seed"] = seed;
      fj["threads"] = threads;
      try {
        fit_config = fit_config_from_json(fj);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("fit config: ") + e.what());
      }
      fit_config.validate();
      eff["fit"] = to_json(fit_config);
    }
    effective_ = eff;
    return eff;
  }

  // Artifact path `stem + suffix`.
  fs::path artifact(const std::string& default_stem, const std::string& suffix) const {
    const fs::path p(out);
    const fs::path stem = p.has_extension() ? p.parent_path() / p.stem() : p / default_stem;
    return fs::path(stem.string() + suffix);
  }

  void write(const std::string& default_stem, const std::string& suffix, const std::string& text) {
    const fs::path p = artifact(default_stem, suffix);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file_atomic(p, text);
    artifacts_.push_back(p.string());
  }

  void manifest(const std::string& default_stem, double seconds, const json& seeds) {
    json m;
    m["command"] = name_;
    m["version"] = kVersion;
    m["config"] = effective_;
    m["config_digest"] = hex64(fnv1a64(effective_.dump()));
    m["seeds"] = seeds;
    m["artifacts"] = artifacts_;
    m["wall_clock_seconds"] = seconds;
    const fs::path p = artifact(default_stem, ".manifest.json");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file_atomic(p, m.dump(2) + "\n");
  }

  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string config_path;
  std::string out;
  FitConfig fit_config;

 private:
  template <class T>
  void add_knob(const std::string& flag, CLI::Option* o, T& var) {
    knobs_.push_back({key_of(flag), o, [&var](const json& j) { var = j.get<T>(); }, [&var] { return json(var); }});
  }

  std::string name_;
  CLI::App* app_;
  std::vector<Knob> knobs_;
  bool fit_enabled_ = false;
  FitFlags fit_;
  json effective_;
  std::vector<std::string> artifacts_;
};

// ---------------------------------------------------------------------------
// Shared pipeline pieces

struct Layout {
  std::size_t state_dim = 0;
  std::vector<std::size_t> observed;
};

SnapshotDataset load_data(const std::string& path, const Layout& layout) {
  SnapshotDataset ds = load_csv(path);
  if (layout.state_dim == 0 && layout.observed.empty()) return ds;
  std::vector<std::size_t> obs = layout.observed;
  if (obs.empty()) {
    obs.resize(ds.dim_observed());
    std::iota(obs.begin(), obs.end(), std::size_t{0});
  }
  if (obs.size() != ds.dim_observed()) {
    throw ConfigError("--observed lists " + std::to_string(obs.size()) + " coordinates but the data have " +
                      std::to_string(ds.dim_observed()) + " columns");
  }
  const std::size_t dim = layout.state_dim ? layout.state_dim : ds.dim_observed();
  try {
    return with_observation(std::move(ds), dim, obs);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

struct Parts {
  SnapshotDataset train;
  SnapshotDataset interpolation;
  SnapshotDataset forecast;
};

// The last `forecast_last` snapshots are the forecast holdout; of the rest,
// alternating positions are held out for interpolation when `alternate`.
Parts make_parts(const SnapshotDataset& full, std::size_t forecast_last, bool alternate) {
  SnapshotDataset rest = full, fc, interp;
  if (forecast_last > 0) {
    auto s = split(full, SplitSpec::holdout_last(forecast_last));
    rest = std::move(s.train);
    fc = std::move(s.validation);
  }
  SnapshotDataset train = rest;
  if (alternate) {
    auto s = split(rest, SplitSpec::alternating());
    train = std::move(s.train);
    interp = std::move(s.validation);
  }
  Parts p;
  p.train = scale_times(train);
  if (interp.size() > 0) p.interpolation = rescale_with(interp, p.train.time_scale);
  if (fc.size() > 0) p.forecast = rescale_with(fc, p.train.time_scale);
  return p;
}

std::string recipe_for_family(const std::string& family) {
  if (family == "vortex") return "vortex_synthetic";
  if (family == "semiparam") return "repr3";
  return family;
}

ExperimentRecipe load_recipe(const std::string& name_or_path) {
  if (fs::path(name_or_path).extension() == ".json") return recipe_from_json(json::parse(read_file(name_or_path)));
  return make_recipe(name_or_path);
}

// Dataset of a simulated batch at output times `raw_times` on `coords`,
// dropping diverged trajectories.
SnapshotDataset batch_dataset(const TrajectoryBatch& b, const std::vector<double>& raw_times,
                              const std::vector<std::size_t>& coords) {
  std::vector<Snapshot> snaps;
  for (std::size_t k = 0; k < raw_times.size(); ++k) {
    Matrix m = b.snapshot(k, coords, true);
    if (m.rows() == 0) throw DivergenceError("every trajectory diverged before time " + format_double(raw_times[k]));
    snaps.push_back({raw_times[k], std::move(m)});
  }
  return make_dataset(std::move(snaps));
}

struct Fitted {
  SdeModel model;
  Parts parts;
  InitialDistribution init;
  FitConfig cfg;
  double lengthscale = 1.0;
};

Fitted load_fitted(const std::string& fit_path, const std::string& data_path) {
  const json j = json::parse(read_file(fit_path));
  Fitted f;
  f.model = model_from_json(j.at("fit").at("model"));
  f.lengthscale = j.at("fit").value("lengthscale", 1.0);
  Layout layout{j.at("layout").at("dim_state").get<std::size_t>(),
                j.at("layout").at("observed_coords").get<std::vector<std::size_t>>()};
  const SnapshotDataset full = load_data(data_path, layout);
  f.parts = make_parts(full, j.at("split").at("forecast_last").get<std::size_t>(), j.at("split").at("alternate").get<bool>());
  const TimeScale recorded{j.at("time_scale").at("offset").get<double>(), j.at("time_scale").at("factor").get<double>()};
  const TimeScale& ts = f.parts.train.time_scale;
  if (std::abs(ts.offset - recorded.offset) > 1e-12 * std::max(1.0, std::abs(recorded.offset)) ||
      std::abs(ts.factor - recorded.factor) > 1e-12 * recorded.factor) {
    throw ValidationError("data do not match the fit: training time scale differs");
  }
  f.cfg = fit_config_from_json(j.at("config"));
  f.init = default_initial(f.parts.train, f.cfg.init_fill);
  return f;
}

// ---------------------------------------------------------------------------
// SVG

struct Group {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

struct Panel {
  std::string title;
  std::vector<Group> groups;
};

std::string time_color(std::size_t i, std::size_t n) {
  // blue to red through the hue circle
  const double h = n > 1 ? 240.0 * (1.0 - static_cast<double>(i) / static_cast<double>(n - 1)) : 240.0;
  const double x = 1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  if (h < 60) r = 1, g = x;
  else if (h < 120) r = x, g = 1;
  else if (h < 180) g = 1, b = x;
  else if (h < 240) g = x, b = 1;
  else r = x, b = 1;
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(r * 200)),
                static_cast<int>(std::lround(g * 200)), static_cast<int>(std::lround(b * 200)));
  return buf;
}

std::string render_svg(const std::vector<Panel>& panels) {
  const double w = 420, h = 380, pad = 40;
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n",
                w * static_cast<double>(panels.size()), h + 20);
  os << buf;
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const auto& panel = panels[p];
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& g : panel.groups)
      for (const auto& [x, y] : g.points) x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
    if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
    const double ox = w * static_cast<double>(p);
    auto sx = [&](double x) { return ox + pad + (x - x0) / (x1 - x0) * (w - 2 * pad); };
    auto sy = [&](double y) { return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad); };
    std::snprintf(buf, sizeof buf, "<g class=\"panel\">\n<text x=\"%.2f\" y=\"20\">%s</text>\n", ox + pad, panel.title.c_str());
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"none\" stroke=\"#888\"/>\n", ox + pad,
                  pad, w - 2 * pad, h - 2 * pad);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\">%.3g</text><text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%.3g</text>\n",
                  ox + pad, h - pad + 14, x0, ox + w - pad, h - pad + 14, x1);
    os << buf;
    for (std::size_t gi = 0; gi < panel.groups.size(); ++gi) {
      const auto& g = panel.groups[gi];
      std::snprintf(buf, sizeof buf, "<g class=\"group\" data-label=\"%s\" fill=\"%s\" fill-opacity=\"0.6\">\n",
                    g.label.c_str(), g.color.c_str());
      os << buf;
      for (const auto& [x, y] : g.points) {
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"1.8\"/>\n", sx(x), sy(y));
        os << buf;
      }
      std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\" fill=\"%s\">%s</text>\n</g>\n", ox + w - pad + 4,
                    pad + 12.0 * static_cast<double>(gi), g.color.c_str(), g.label.c_str());
      os << buf;
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::pair<double, double>> xy(const Matrix& m, double t) {
  std::vector<std::pair<double, double>> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.emplace_back(m.cols() >= 2 ? m(i, 0) : t, m.cols() >= 2 ? m(i, 1) : m(i, 0));
  return out;
}

std::string cell(const json& agg) {
  if (agg.is_null() || !agg.contains("mean") || agg.value("count", 0) == 0) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g (%.2g)", agg["mean"].get<double>(), agg["sd"].get<double>());
  return buf;
}

std::string scalar(const json& v) {
  if (v.is_null()) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v.get<double>());
  return buf;
}

// One Markdown row per report file: recipe results, evaluate outputs, or
// single holdout reports.
std::string report_row(const std::string& label, const json& j) {
  std::ostringstream os;
  os << "| " << label << " | ";
  if (j.contains("recipe")) {
    os << j["completed"].get<std::size_t>() << "/" << j["seeds"].size() << " | " << cell(j["forecast_mmd"]) << " | "
       << cell(j["forecast_emd"]) << " | " << cell(j["interpolation_mmd"]) << " | " << cell(j["interpolation_emd"])
       << " | " << cell(j["drift_mse"]) << " | " << cell(j["final_r2"]) << " |";
  } else if (j.contains("forecast") || j.contains("interpolation")) {
    auto part = [&](const char* k, const char* m) { return j.contains(k) && !j[k].is_null() ? cell(j[k][m]) : "-"; };
    os << "1 | " << part("forecast", "mmd") << " | " << part("forecast", "emd") << " | " << part("interpolation", "mmd")
       << " | " << part("interpolation", "emd") << " | " << scalar(j.value("drift_mse", json())) << " | "
       << scalar(j.value("r_squared", json())) << " |";
  } else if (j.contains("per_time")) {
    os << "1 | " << cell(j["mmd"]) << " | " << cell(j["emd"]) << " | - | - | " << scalar(j.value("drift_mse", json()))
       << " | " << scalar(j.value("r_squared", json())) << " |";
  } else {
    throw ValidationError("unrecognized report " + label);
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct SimulateCmd {
  Command c;
  std::string recipe, model;
  std::vector<double> times, init_lo, init_hi, init_point;
  std::size_t samples = 0;
  double substep = 0.0;

  explicit SimulateCmd(CLI::App& root) : c(root, "simulate", "Generate snapshot data from a recipe or a model") {
    c.knob("recipe", recipe, "Recipe name or recipe JSON file");
    c.knob("model", model, "Model JSON (with --times and an initial law)");
    c.knob("times", times, "Raw output times for --model");
    c.knob("samples", samples, "Observations per snapshot (0: recipe default, or 200)");
    c.knob("substep", substep, "Euler step in raw time (0: recipe default, or 0.01)");
    c.knob("init-lo", init_lo, "Uniform initial box, lower corner");
    c.knob("init-hi", init_hi, "Uniform initial box, upper corner");
    c.knob("init-point", init_point, "Point-mass initial state");
  }

  int run(std::ostream& out) {
    const auto t0 = Clock::now();
    c.resolve();
    SnapshotDataset ds;
    if (!recipe.empty() && !model.empty()) throw UsageError("give either --recipe or --model, not both");
    if (!recipe.empty()) {
      ExperimentRecipe r = load_recipe(recipe);
      if (samples > 0) r.samples = samples;
      if (substep > 0.0) r.generation_substep = substep;
      ds = generate(r, c.seed).full;
    } else if (!model.empty()) {
      if (times.empty()) throw UsageError("--model needs --times");
      const SdeModel m = model_from_json(json::parse(read_file(model)));
      InitialDistribution init;
      if (!init_point.empty()) init = InitialDistribution::point_mass(init_point);
      else if (!init_lo.empty()) init = InitialDistribution::uniform_box(init_lo, init_hi);
      else throw UsageError("--model needs --init-point or --init-lo/--init-hi");
      SimOptions o;
      o.threads = c.threads;
      const auto b = simulate(m, init, times, substep > 0.0 ? substep : 0.01, samples > 0 ? samples : 200, c.seed, o);
      ds = batch_dataset(b, times, m.observed_coords);
    } else {
      throw UsageError("simulate needs --recipe or --model");
    }
    c.write("data", ".csv", to_csv(ds));
    c.manifest("data", since(t0), json::array({c.seed}));
    out << "simulate: " << ds.size() << " snapshots written to " << c.artifact("data", ".csv").string() << "\n";
    return 0;
  }
};

struct FitCmd {
  Command c;
  std::string data, family;
  std::size_t state_dim = 0, forecast_last = 1;
  std::vector<std::size_t> observed, hidden{32, 64, 32};
  bool alternate = true;

  explicit FitCmd(CLI::App& root) : c(root, "fit", "Fit a model family to snapshot data") {
    c.knob("data", data, "Snapshot CSV (time,y1,...,yd)");
    c.knob("family", family, "Model family: " + [] {
      std::string s;
      for (const auto& n : family_names()) s += (s.empty() ? "" : ", ") + n;
      return s;
    }());
    c.knob("state-dim", state_dim, "Model state dimension (default: data columns)");
    c.knob("observed", observed, "Model coordinates of the data columns, e.g. 0,1,2");
    c.knob("hidden", hidden, "Hidden widths of the semiparametric network");
    c.knob("forecast-last", forecast_last, "Final snapshots held out for forecasting");
    c.toggle("alternate", alternate, "Hold out alternating snapshots for interpolation");
    c.fit_flags();
  }

  int run(std::ostream& out) {
    const auto t0 = Clock::now();
    c.resolve();
    if (data.empty() || family.empty()) throw UsageError("fit needs --data and --family");
    const Family fam = family_from_name(family);
    const SnapshotDataset full = load_data(data, {state_dim, observed});
    const Parts parts = make_parts(full, forecast_last, alternate);
    const FitConfig& cfg = c.fit_config;
    const InitialDistribution init = default_initial(parts.train, cfg.init_fill);
    const FitResult r = fit_multistart(parts.train, fam, init, cfg, c.seed, hidden);

    json j;
    j["fit"] = to_json(r);
    j["layout"] = {{"dim_state", parts.train.dim_state}, {"observed_coords", parts.train.observed_coords}};
    j["split"] = {{"forecast_last", forecast_last}, {"alternate", alternate}};
    j["time_scale"] = {{"offset", parts.train.time_scale.offset}, {"factor", parts.train.time_scale.factor}};
    j["config"] = to_json(cfg);
    c.write("fit", ".json", j.dump(2) + "\n");
    c.manifest("fit", since(t0), json::array({c.seed}));
    out << "fit " << family << ": " << r.epochs << " epochs, best R2 " << format_double(r.best_r2) << ", stop "
        << to_string(r.stop_reason) << "\n";
    return 0;
  }
};

struct ScoreCmd {
  enum class Kind { forecast, interpolate, evaluate };
  Kind kind;
  Command c;
  std::string fit_path, data, truth, truth_recipe;
  std::size_t trajectories = 200;
  double substep = 0.0, eval_lengthscale = 1.0;

  static const char* name_of(Kind k) {
    return k == Kind::forecast ? "forecast" : k == Kind::interpolate ? "interpolate" : "evaluate";
  }
  static const char* help_of(Kind k) {
    return k == Kind::forecast      ? "Score the fitted model on the forecast holdout"
           : k == Kind::interpolate ? "Score the fitted model on the interpolation holdout"
                                    : "Score both holdouts, R2 and optional drift error";
  }

  ScoreCmd(CLI::App& root, Kind k) : kind(k), c(root, name_of(k), help_of(k)) {
    c.knob("fit", fit_path, "Fit output JSON");
    c.knob("data", data, "The snapshot CSV the fit was made from");
    c.knob("trajectories", trajectories, "Simulated trajectories for scoring")->check(CLI::Range(2, 1 << 30));
    c.knob("substep", substep, "Euler step in scaled time (0: the fit's)");
    c.knob("eval-lengthscale", eval_lengthscale, "Evaluation kernel length scale");
    if (k == Kind::evaluate) {
      c.knob("truth", truth, "Ground-truth model JSON for the drift error");
      c.knob("truth-recipe", truth_recipe, "Recipe whose generator is the ground truth");
    }
  }

  ScoreOptions options(const Fitted& f) const {
    ScoreOptions o;
    o.trajectories = trajectories;
    o.seed = c.seed;
    o.substep = substep > 0.0 ? substep : f.cfg.substep;
    o.eval_lengthscale = eval_lengthscale;
    o.threads = c.threads;
    return o;
  }

  static EvalReport score(const Fitted& f, const SnapshotDataset& hold, const ScoreOptions& o, const char* what,
                          TrajectoryBatch* cloud = nullptr) {
    if (hold.size() == 0) throw ValidationError(std::string(what) + " holdout is empty");
    return score_holdout(f.model, f.init, f.parts.train, hold, o, cloud);
  }

  int run(std::ostream& out) {
    const auto t0 = Clock::now();
    c.resolve();
    if (fit_path.empty() || data.empty()) throw UsageError(std::string(name_of(kind)) + " needs --fit and --data");
    const Fitted f = load_fitted(fit_path, data);
    const ScoreOptions o = options(f);
    const std::string stem = name_of(kind);

    if (kind == Kind::forecast) {
      TrajectoryBatch cloud;
      const EvalReport r = score(f, f.parts.forecast, o, "forecast", &cloud);
      c.write(stem, ".json", to_json(r).dump(2) + "\n");
      c.write(stem, ".csv", to_csv(r));
      c.write(stem, ".cloud.csv", to_csv(batch_dataset(cloud, f.parts.forecast.raw_times(), f.model.observed_coords)));
      out << "forecast: MMD " << format_double(r.mmd.mean) << ", EMD " << format_double(r.emd.mean) << "\n";
    } else if (kind == Kind::interpolate) {
      const EvalReport r = score(f, f.parts.interpolation, o, "interpolation");
      c.write(stem, ".json", to_json(r).dump(2) + "\n");
      c.write(stem, ".csv", to_csv(r));
      out << "interpolate: " << r.per_time.size() << " times, MMD " << format_double(r.mmd.mean) << ", EMD "
          << format_double(r.emd.mean) << "\n";
    } else {
      json j;
      if (f.parts.forecast.size() > 0) {
        const EvalReport r = score(f, f.parts.forecast, o, "forecast");
        j["forecast"] = to_json(r);
        c.write(stem, ".forecast.csv", to_csv(r));
      }
      if (f.parts.interpolation.size() > 0) {
        const EvalReport r = score(f, f.parts.interpolation, o, "interpolation");
        j["interpolation"] = to_json(r);
        c.write(stem, ".interpolation.csv", to_csv(r));
      }
      // R2 on the training snapshots with the fit's training kernel
      SimOptions so;
      so.time_factor = f.parts.train.time_scale.factor;
      so.threads = c.threads;
      const auto b = simulate(f.model, f.init, f.parts.train.times(), o.substep, trajectories, c.seed, so);
      std::vector<Matrix> pred;
      for (std::size_t k = 0; k < f.parts.train.size(); ++k) pred.push_back(b.snapshot(k, f.model.observed_coords));
      j["r_squared"] = r_squared(f.parts.train, pred, RbfKernel(f.lengthscale));

      std::optional<SdeModel> truth_model;
      if (!truth.empty()) truth_model = model_from_json(json::parse(read_file(truth)));
      else if (!truth_recipe.empty()) truth_model = load_recipe(truth_recipe).truth;
      if (truth_model) {
        if (f.model.dim_observed() != f.model.dim_state) {
          j["warnings"].push_back("drift error needs a fully observed state; skipped");
        } else {
          j["drift_mse"] = drift_mse(f.model, *truth_model, GridSpec::bounding_box(f.parts.train.pooled_states()));
        }
      }
      c.write(stem, ".json", j.dump(2) + "\n");
      out << "evaluate: R2 " << format_double(j["r_squared"].get<double>());
      if (j.contains("drift_mse")) out << ", drift MSE " << format_double(j["drift_mse"].get<double>());
      out << "\n";
    }
    c.manifest(stem, since(t0), json::array({c.seed}));
    return 0;
  }
};

struct ReportCmd {
  Command c;
  std::string data, cloud, title;
  std::vector<std::string> reports;
  std::size_t forecast_last = 1;
  bool alternate = true;

  explicit ReportCmd(CLI::App& root) : c(root, "report", "SVG scatter panels and a Markdown summary table") {
    c.knob("data", data, "Snapshot CSV: training clouds by time");
    c.knob("cloud", cloud, "Simulated forecast cloud CSV (from forecast)");
    c.knob("reports", reports, "Report JSON files for the summary table");
    c.knob("forecast-last", forecast_last, "Final snapshots treated as the forecast truth");
    c.toggle("alternate", alternate, "Plot only the alternating training snapshots");
  }

  int run(std::ostream& out) {
    const auto t0 = Clock::now();
    c.resolve();
    if (data.empty() && cloud.empty() && reports.empty()) throw UsageError("report needs --data, --cloud or --reports");

    std::vector<Panel> panels;
    std::optional<SnapshotDataset> truth_fc;
    if (!data.empty()) {
      const SnapshotDataset full = load_csv(data);
      const Parts p = make_parts(full, forecast_last, alternate);
      SnapshotDataset shown = p.train;
      shown.time_scale = {};
      for (auto& s : shown.snapshots) s.time = p.train.time_scale.to_raw(s.time);
      std::vector<Snapshot> all = shown.snapshots;
      if (p.forecast.size() > 0) {
        truth_fc = p.forecast;
        for (const auto& s : p.forecast.snapshots) all.push_back({p.train.time_scale.to_raw(s.time), s.states});
      }
      Panel panel{"snapshots by time", {}};
      for (std::size_t i = 0; i < all.size(); ++i)
        panel.groups.push_back({"t=" + format_double(all[i].time), time_color(i, all.size()), xy(all[i].states, all[i].time)});
      panels.push_back(std::move(panel));
    }
    if (!cloud.empty()) {
      const SnapshotDataset sim = load_csv(cloud, 1);
      Panel panel{"forecast cloud vs truth", {}};
      if (truth_fc) {
        if (truth_fc->dim_observed() != sim.dim_observed()) throw DimensionError("cloud and data dimensions differ");
        for (const auto& s : truth_fc->snapshots) {
          const double t = truth_fc->time_scale.to_raw(s.time);
          panel.groups.push_back({"truth t=" + format_double(t), "#222222", xy(s.states, t)});
        }
      }
      for (const auto& s : sim.snapshots) panel.groups.push_back({"model t=" + format_double(s.time), "#e07000", xy(s.states, s.time)});
      panels.push_back(std::move(panel));
    }
    if (!panels.empty()) c.write("report", ".svg", render_svg(panels));

    if (!reports.empty()) {
      std::ostringstream md;
      md << "| run | seeds | forecast MMD | forecast EMD | interp. MMD | interp. EMD | drift MSE | R2 |\n";
      md << "|---|---|---|---|---|---|---|---|\n";
      for (const auto& path : reports) {
        const json j = json::parse(read_file(path));
        const std::string label = j.contains("recipe") ? j["recipe"].get<std::string>() : fs::path(path).stem().string();
        md << report_row(label, j) << "\n";
      }
      c.write("report", ".md", md.str());
      out << md.str();
    }
    c.manifest("report", since(t0), json::array());
    return 0;
  }
};

struct GradcheckCmd {
  Command c;
  std::string family = "lv";
  double threshold = 1e-3, step = 1e-5;
  std::size_t trajectories = 50, samples = 100, snapshots = 3;
  std::vector<std::size_t> hidden{8, 8};

  explicit GradcheckCmd(CLI::App& root) : c(root, "gradcheck", "Compare loss gradients with finite differences", false) {
    c.knob("family", family, "Model family");
    c.knob("threshold", threshold, "Largest accepted relative error");
    c.knob("step", step, "Central-difference step on raw parameters");
    c.knob("trajectories", trajectories, "Simulated trajectories")->check(CLI::Range(2, 1 << 20));
    c.knob("samples", samples, "Observations per synthetic snapshot")->check(CLI::Range(2, 1 << 20));
    c.knob("snapshots", snapshots, "Synthetic snapshots")->check(CLI::Range(2, 100));
    c.knob("hidden", hidden, "Hidden widths for the semiparametric family");
  }

  int run(std::ostream& out) {
    const auto t0 = Clock::now();
    c.resolve();
    const Family fam = family_from_name(family);
    ExperimentRecipe r = make_recipe(recipe_for_family(family));
    r.samples = samples;
    const SnapshotDataset full = generate(r, c.seed).full;
    std::vector<Snapshot> first(full.snapshots.begin(), full.snapshots.begin() + static_cast<long>(std::min(snapshots, full.size())));
    SnapshotDataset small = make_dataset(std::move(first));
    small = with_observation(small, full.dim_state, full.observed_coords);
    const SnapshotDataset train = scale_times(small);

    const SdeModel model = initial_model(fam, train.dim_state, train.observed_coords, c.seed, &train, hidden);
    FitConfig cfg;
    cfg.trajectories = trajectories;
    cfg.substep = r.generation_substep / train.time_scale.factor;
    cfg.noise_mode = FitConfig::NoiseMode::frozen;
    cfg.seed = c.seed;
    const SnapMmdObjective obj(train, model, default_initial(train), cfg);
    const auto rep = ad::check_gradient(obj.frozen(c.seed), model.params.raw, step);

    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-14s %14s %14s %10s\n", "parameter", "analytic", "finite diff", "rel err");
    os << buf;
    for (std::size_t i = 0; i < rep.analytic.size(); ++i) {
      const bool kink = std::find(rep.non_differentiable.begin(), rep.non_differentiable.end(), i) != rep.non_differentiable.end();
      std::snprintf(buf, sizeof buf, "%-14s %14.6e %14.6e %10.2e%s\n", model.params.names[i].c_str(), rep.analytic[i],
                    rep.finite_difference[i], rep.relative_error[i], kink ? "  kink" : "");
      os << buf;
    }
    if (!rep.non_differentiable.empty()) {
      os << "non-differentiable coordinates (rectifier kinks):";
      for (auto i : rep.non_differentiable) os << " " << i;
      os << "\n";
    }
    const bool pass = rep.max_relative_error <= threshold;
    os << "max relative error " << format_double(rep.max_relative_error) << " (threshold " << format_double(threshold)
       << "): " << (pass ? "ok" : "FAILED") << "\n";
    out << os.str();
    if (!c.out.empty()) {
      json j{{"family", family},
             {"analytic", rep.analytic},
             {"finite_difference", rep.finite_difference},
             {"relative_error", rep.relative_error},
             {"non_differentiable", rep.non_differentiable},
             {"max_relative_error", rep.max_relative_error},
             {"threshold", threshold},
             {"pass", pass}};
      c.write("gradcheck", ".json", j.dump(2) + "\n");
      c.manifest("gradcheck", since(t0), json::array({c.seed}));
    }
    return pass ? 0 : 1;
  }
};

struct RecipeCmd {
  Command c;
  std::string name;
  std::size_t seeds = 0, first_seed = 1, samples = 0, score_trajectories = 200;
  bool list = false;

  explicit RecipeCmd(CLI::App& root) : c(root, "recipe", "Run a reproduction recipe over several seeds", false) {
    c.knob("name", name, "Recipe name or recipe JSON file");
    c.knob("seeds", seeds, "Number of seeds (0: the recipe's)");
    c.knob("first-seed", first_seed, "First seed of the run");
    c.knob("samples", samples, "Observations per snapshot (0: the recipe's)");
    c.knob("score-trajectories", score_trajectories, "Trajectories for scoring")->check(CLI::Range(2, 1 << 30));
    c.app()->add_flag("--list", list, "List recipe names and exit");
    c.fit_flags();
  }

  int run(std::ostream& out) {
    const auto t0 = Clock::now();
    if (list) {
      for (const auto& n : recipe_names()) out << n << "\n";
      return 0;
    }
    if (c.out.empty()) throw UsageError("recipe needs --out");
    // First pass finds the recipe; its fit settings then sit under the
    // config file and flags.
    c.resolve();
    if (name.empty()) throw UsageError("recipe needs --name");
    ExperimentRecipe r = load_recipe(name);
    if (samples > 0) r.samples = samples;
    c.resolve(recipe_fit_config(r));

    std::vector<std::uint64_t> ids;
    const std::size_t n = seeds > 0 ? seeds : r.seeds;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(first_seed + i);
    RunOptions o;
    o.score_trajectories = score_trajectories;
    o.threads = c.threads;
    const RecipeResult res = run_recipe(r, c.fit_config, ids, o);
    c.write("recipe", ".json", to_json(res).dump(2) + "\n");
    c.write("recipe", ".md", markdown_table({res}));
    c.manifest("recipe", since(t0), json(ids));
    out << markdown_table({res});
    return res.completed == res.seeds.size() ? 0 : 1;
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learn SDEs from snapshot data with a weighted MMD objective", "snapmmd"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SimulateCmd simulate_cmd(app);
  FitCmd fit_cmd(app);
  ScoreCmd forecast_cmd(app, ScoreCmd::Kind::forecast);
  ScoreCmd interpolate_cmd(app, ScoreCmd::Kind::interpolate);
  ScoreCmd evaluate_cmd(app, ScoreCmd::Kind::evaluate);
  ReportCmd report_cmd(app);
  GradcheckCmd gradcheck_cmd(app);
  RecipeCmd recipe_cmd(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate_cmd.c.app()->parsed()) return simulate_cmd.run(out);
    if (fit_cmd.c.app()->parsed()) return fit_cmd.run(out);
    if (forecast_cmd.c.app()->parsed()) return forecast_cmd.run(out);
    if (interpolate_cmd.c.app()->parsed()) return interpolate_cmd.run(out);
    if (evaluate_cmd.c.app()->parsed()) return evaluate_cmd.run(out);
    if (report_cmd.c.app()->parsed()) return report_cmd.run(out);
    if (gradcheck_cmd.c.app()->parsed()) return gradcheck_cmd.run(out);
    if (recipe_cmd.c.app()->parsed()) return recipe_cmd.run(out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace snapmmd
