#include "snapmmd/sde.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <thread>

#include "snapmmd/errors.hpp"

namespace snapmmd {

using ad::Var;

std::string family_name(Family f) {
  switch (f) {
    case Family::lotka_volterra: return "lv";
    case Family::repressilator3: return "repr3";
    case Family::repressilator_protein: return "repr_protein";
    case Family::lamb_oseen_vortex: return "vortex";
    case Family::semiparam_grn: return "semiparam";
    case Family::custom: return "custom";
  }
  return "custom";
}

std::vector<std::string> family_names() { return {"lv", "repr3", "repr_protein", "vortex", "semiparam"}; }

Family family_from_name(const std::string& name) {
  if (name == "lv") return Family::lotka_volterra;
  if (name == "repr3") return Family::repressilator3;
  if (name == "repr_protein") return Family::repressilator_protein;
  if (name == "vortex") return Family::lamb_oseen_vortex;
  if (name == "semiparam") return Family::semiparam_grn;
  std::string known;
  for (const auto& n : family_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown family '" + name + "'; known families: " + known);
}

// ---------------------------------------------------------------------------
// ParamVector

void ParamVector::push(std::string name, double natural_value, Transform t) {
  if (t == Transform::exp && !(natural_value > 0.0)) {
    throw ValidationError("parameter " + name + " must be positive, got " + std::to_string(natural_value));
  }
  names.push_back(std::move(name));
  transforms.push_back(t);
  raw.push_back(t == Transform::exp ? std::log(natural_value) : natural_value);
}

double ParamVector::natural(std::size_t i) const {
  return transforms[i] == Transform::exp ? std::exp(raw[i]) : raw[i];
}

std::vector<double> ParamVector::natural() const {
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = natural(i);
  return out;
}

void ParamVector::set_natural(std::size_t i, double value) {
  if (transforms[i] == Transform::exp) {
    if (!(value > 0.0)) throw ValidationError("parameter " + names[i] + " must be positive");
    raw[i] = std::log(value);
  } else {
    raw[i] = value;
  }
}

std::size_t ParamVector::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("no parameter named " + name);
  return static_cast<std::size_t>(it - names.begin());
}

// ---------------------------------------------------------------------------
// MLP

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  std::size_t in = input;
  for (std::size_t h : hidden) {
    n += h * in + h;
    in = h;
  }
  return n + output * in + output;
}

namespace {

// bias + sum_i w[i] * x[i] as a single record entry for Vars.
double affine(std::span<const double> w, std::span<const double> x, double bias) {
  double acc = bias;
  for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
  return acc;
}

Var affine(std::span<const Var> w, std::span<const Var> x, const Var& bias) {
  double acc = bias.value();
  ad::Tape* tape = bias.tape();
  thread_local std::vector<Var> parents;
  thread_local std::vector<double> partials;
  parents.clear();
  partials.clear();
  parents.push_back(bias);
  partials.push_back(1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += w[i].value() * x[i].value();
    if (!tape) tape = w[i].tape() ? w[i].tape() : x[i].tape();
    parents.push_back(w[i]);
    partials.push_back(x[i].value());
    parents.push_back(x[i]);
    partials.push_back(w[i].value());
  }
  if (!tape) return acc;
  return tape->record(acc, "affine", parents, partials);
}

}  // namespace

template <class T>
void MlpSpec::forward(std::span<const T> weights, std::span<const T> x, std::span<T> out) const {
  if (weights.size() != parameter_count()) throw DimensionError("MLP weight count mismatch");
  if (x.size() != input || out.size() != output) throw DimensionError("MLP input/output dimension mismatch");
  std::vector<T> cur(x.begin(), x.end());
  std::vector<T> next;
  std::size_t off = 0;
  const std::size_t layers = hidden.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = cur.size();
    const std::size_t width = l < hidden.size() ? hidden[l] : output;
    const std::span<const T> w = weights.subspan(off, width * in);
    const std::span<const T> b = weights.subspan(off + width * in, width);
    next.resize(width);
    for (std::size_t j = 0; j < width; ++j) {
      T z = affine(w.subspan(j * in, in), std::span<const T>(cur), b[j]);
      next[j] = l + 1 < layers ? ad::relu(z) : ad::sigmoid(z);
    }
    off += width * in + width;
    cur.swap(next);
  }
  std::copy(cur.begin(), cur.end(), out.begin());
}

template void MlpSpec::forward<double>(std::span<const double>, std::span<const double>, std::span<double>) const;
template void MlpSpec::forward<Var>(std::span<const Var>, std::span<const Var>, std::span<Var>) const;

// ---------------------------------------------------------------------------
// Family fields

namespace {

// beta / (1 + (x/k)^n) with the repression term taken as 0 for x <= 0, where
// Euler noise can push a concentration slightly negative.
template <class T>
T hill(const T& beta, const T& x, const T& k, const T& n) {
  if (ad::value_of(x) <= 0.0) return beta;
  return beta / (T(1.0) + ad::pow(x / k, n));
}

template <class T>
void check_dims(const SdeModel& m, std::span<const T> natural, std::span<const T> x, std::span<T> out) {
  if (x.size() != m.dim_state || out.size() != m.dim_state) {
    throw DimensionError(family_name(m.family) + " expects state dimension " + std::to_string(m.dim_state) + ", got " +
                         std::to_string(x.size()));
  }
  if (natural.size() != m.params.size()) throw DimensionError("parameter count mismatch");
}

}  // namespace

template <class T>
void SdeModel::drift(std::span<const T> p, std::span<const T> x, double t, std::span<T> out) const {
  check_dims(*this, p, x, out);
  switch (family) {
    case Family::lotka_volterra: {
      // p: alpha, beta, gamma, delta, sigma
      const T xy = x[0] * x[1];
      out[0] = p[0] * x[0] - p[1] * xy;
      out[1] = p[2] * xy - p[3] * x[1];
      return;
    }
    case Family::repressilator3: {
      // p: beta, n, k, gamma, sigma; gene i is repressed by gene i-1 (cyclic)
      for (std::size_t i = 0; i < 3; ++i) out[i] = hill(p[0], x[(i + 2) % 3], p[2], p[1]) - p[3] * x[i];
      return;
    }
    case Family::repressilator_protein: {
      // p: alpha, beta, n, k, gamma, beta_p, gamma_p, sigma; x = (mRNA 1..3, protein 1..3)
      for (std::size_t i = 0; i < 3; ++i) {
        out[i] = p[0] + hill(p[1], x[3 + (i + 2) % 3], p[3], p[2]) - p[4] * x[i];
        out[3 + i] = p[5] * x[i] - p[6] * x[3 + i];
      }
      return;
    }
    case Family::lamb_oseen_vortex: {
      // p: gamma, r_v, x0, y0, d, r_d, x0_d, y0_d, sigma
      const T dx = x[0] - p[2];
      const T dy = x[1] - p[3];
      const T s = (dx * dx + dy * dy) / (p[1] * p[1]);
      const T swirl = p[0] * ad::exprel(s) / p[1];
      out[0] = -(swirl * dy) + p[4] * (x[0] - p[6]) / p[5];
      out[1] = swirl * dx + p[4] * (x[1] - p[7]);
      return;
    }
    case Family::semiparam_grn: {
      const std::size_t d = dim_state;
      std::vector<T> f(d);
      mlp->forward(p.subspan(3 * d), x, std::span<T>(f));
      for (std::size_t i = 0; i < d; ++i) out[i] = p[i] * f[i] - p[d + i] * x[i];
      return;
    }
    case Family::custom: {
      if constexpr (std::is_same_v<T, double>) {
        custom->drift(p, x, t, out);
      } else {
        custom->drift_var(p, x, t, out);
      }
      return;
    }
  }
}

template <class T>
void SdeModel::diffusion(std::span<const T> p, std::span<const T> x, double t, std::span<T> out) const {
  check_dims(*this, p, x, out);
  switch (family) {
    case Family::lotka_volterra:
    case Family::repressilator3:
    case Family::repressilator_protein: {
      const T& sigma = p[p.size() - 1];
      for (std::size_t i = 0; i < dim_state; ++i) out[i] = sigma * x[i];
      return;
    }
    case Family::lamb_oseen_vortex:
      out[0] = p[8];
      out[1] = p[8];
      return;
    case Family::semiparam_grn: {
      const std::size_t d = dim_state;
      for (std::size_t i = 0; i < d; ++i) out[i] = p[2 * d + i] * x[i];
      return;
    }
    case Family::custom:
      if constexpr (std::is_same_v<T, double>) {
        custom->diffusion(p, x, t, out);
      } else {
        custom->diffusion_var(p, x, t, out);
      }
      return;
  }
}

template void SdeModel::drift<double>(std::span<const double>, std::span<const double>, double,
                                      std::span<double>) const;
template void SdeModel::drift<Var>(std::span<const Var>, std::span<const Var>, double, std::span<Var>) const;
template void SdeModel::diffusion<double>(std::span<const double>, std::span<const double>, double,
                                          std::span<double>) const;
template void SdeModel::diffusion<Var>(std::span<const Var>, std::span<const Var>, double, std::span<Var>) const;

namespace {

std::string describe(std::span<const double> x, const ParamVector& p) {
  std::string s = "state (";
  for (std::size_t i = 0; i < x.size(); ++i) s += (i ? ", " : "") + std::to_string(x[i]);
  s += ") params (";
  const auto nat = p.natural();
  for (std::size_t i = 0; i < std::min<std::size_t>(nat.size(), 12); ++i) {
    s += (i ? ", " : "") + p.names[i] + "=" + std::to_string(nat[i]);
  }
  return s + ")";
}

}  // namespace

std::vector<double> SdeModel::drift(std::span<const double> x, double t) const {
  const auto nat = params.natural();
  std::vector<double> out(x.size());
  drift<double>(nat, x, t, out);
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericalError("non-finite drift at " + describe(x, params));
  }
  return out;
}

std::vector<double> SdeModel::diffusion(std::span<const double> x, double t) const {
  const auto nat = params.natural();
  std::vector<double> out(x.size());
  diffusion<double>(nat, x, t, out);
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericalError("non-finite diffusion at " + describe(x, params));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Constructors

namespace {

SdeModel base_model(Family f, std::size_t dim) {
  SdeModel m;
  m.family = f;
  m.dim_state = dim;
  m.observed_coords.resize(dim);
  std::iota(m.observed_coords.begin(), m.observed_coords.end(), std::size_t{0});
  return m;
}

}  // namespace

SdeModel make_lotka_volterra(double alpha, double beta, double gamma, double delta, double sigma) {
  SdeModel m = base_model(Family::lotka_volterra, 2);
  m.params.push("alpha", alpha, Transform::exp);
  m.params.push("beta", beta, Transform::exp);
  m.params.push("gamma", gamma, Transform::exp);
  m.params.push("delta", delta, Transform::exp);
  m.params.push("sigma", sigma, Transform::exp);
  return m;
}

SdeModel make_repressilator3(double beta, double n, double k, double gamma, double sigma) {
  SdeModel m = base_model(Family::repressilator3, 3);
  m.params.push("beta", beta, Transform::exp);
  m.params.push("n", n, Transform::exp);
  m.params.push("k", k, Transform::exp);
  m.params.push("gamma", gamma, Transform::exp);
  m.params.push("sigma", sigma, Transform::exp);
  return m;
}

SdeModel make_repressilator_protein(double alpha, double beta, double n, double k, double gamma, double beta_p,
                                    double gamma_p, double sigma) {
  SdeModel m = base_model(Family::repressilator_protein, 6);
  m.observed_coords = {0, 1, 2};
  m.params.push("alpha", alpha, Transform::exp);
  m.params.push("beta", beta, Transform::exp);
  m.params.push("n", n, Transform::exp);
  m.params.push("k", k, Transform::exp);
  m.params.push("gamma", gamma, Transform::exp);
  m.params.push("beta_p", beta_p, Transform::exp);
  m.params.push("gamma_p", gamma_p, Transform::exp);
  m.params.push("sigma", sigma, Transform::exp);
  return m;
}

SdeModel make_vortex(const VortexParams& v) {
  SdeModel m = base_model(Family::lamb_oseen_vortex, 2);
  m.params.push("gamma", v.gamma, Transform::identity);
  m.params.push("r_v", v.r_v, Transform::exp);
  m.params.push("x0", v.x0, Transform::identity);
  m.params.push("y0", v.y0, Transform::identity);
  m.params.push("d", v.d, Transform::identity);
  m.params.push("r_d", v.r_d, Transform::exp);
  m.params.push("x0_d", v.x0_d, Transform::identity);
  m.params.push("y0_d", v.y0_d, Transform::identity);
  m.params.push("sigma", v.sigma, Transform::exp);
  return m;
}

SdeModel make_semiparam_grn(std::size_t dim, std::vector<std::size_t> hidden, std::span<const double> production,
                            std::span<const double> degradation, std::span<const double> volatility,
                            std::uint64_t seed) {
  if (dim == 0) throw ConfigError("semiparametric family needs a positive state dimension");
  if (production.size() != dim || degradation.size() != dim || volatility.size() != dim) {
    throw DimensionError("semiparametric rate vectors must have length " + std::to_string(dim));
  }
  SdeModel m = base_model(Family::semiparam_grn, dim);
  for (std::size_t i = 0; i < dim; ++i) m.params.push("M" + std::to_string(i + 1), production[i], Transform::exp);
  for (std::size_t i = 0; i < dim; ++i) m.params.push("L" + std::to_string(i + 1), degradation[i], Transform::exp);
  for (std::size_t i = 0; i < dim; ++i) m.params.push("G" + std::to_string(i + 1), volatility[i], Transform::exp);
  m.mlp = MlpSpec{dim, std::move(hidden), dim};

  std::mt19937_64 rng(seed);
  std::size_t in = dim;
  std::size_t layer = 0;
  auto add_layer = [&](std::size_t width) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t j = 0; j < width * in; ++j) m.params.push("w" + std::to_string(layer) + "_" + std::to_string(j), u(rng), Transform::identity);
    for (std::size_t j = 0; j < width; ++j) m.params.push("b" + std::to_string(layer) + "_" + std::to_string(j), u(rng), Transform::identity);
    in = width;
    ++layer;
  };
  for (std::size_t h : m.mlp->hidden) add_layer(h);
  add_layer(dim);
  return m;
}

SdeModel make_custom(std::shared_ptr<const CustomFamily> family, ParamVector params) {
  if (!family || !family->drift || !family->diffusion) throw ConfigError("custom family needs drift and diffusion");
  SdeModel m = base_model(Family::custom, family->dim);
  m.params = std::move(params);
  m.custom = std::move(family);
  return m;
}

SdeModel initial_model(Family family, std::size_t dim_state, std::vector<std::size_t> observed_coords,
                       std::uint64_t seed, const SnapshotDataset* data, std::vector<std::size_t> mlp_hidden) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) { return lo * std::exp(u01(rng) * std::log(hi / lo)); };
  auto rate = [&] { return log_uniform(0.05, 5.0); };
  auto vol = [&] { return log_uniform(0.01, 0.1); };

  SdeModel m;
  switch (family) {
    case Family::lotka_volterra:
      m = make_lotka_volterra(rate(), rate(), rate(), rate(), vol());
      break;
    case Family::repressilator3:
      m = make_repressilator3(rate(), rate(), rate(), rate(), vol());
      break;
    case Family::repressilator_protein: {
      const double alpha = rate(), beta = rate(), n = rate(), k = rate(), gamma = rate(), bp = rate(), gp = rate();
      m = make_repressilator_protein(alpha, beta, n, k, gamma, bp, gp, vol());
      break;
    }
    case Family::lamb_oseen_vortex: {
      VortexParams v;
      double cx = 0.0, cy = 0.0, spread = 1.0;
      if (data && data->size() > 0 && data->dim_observed() >= 2) {
        const Matrix pooled = data->pooled_states();
        cx = pooled.col(0).mean();
        cy = pooled.col(1).mean();
        const double var = ((pooled.col(0).array() - cx).square().mean() + (pooled.col(1).array() - cy).square().mean());
        spread = std::max(std::sqrt(var), 1e-3);
      }
      v.gamma = 0.1 * spread;
      v.r_v = spread;
      v.x0 = cx;
      v.y0 = cy;
      v.d = 0.0;
      v.r_d = spread;
      v.x0_d = cx;
      v.y0_d = cy;
      v.sigma = vol() * spread;
      m = make_vortex(v);
      break;
    }
    case Family::semiparam_grn: {
      std::vector<double> prod(dim_state), deg(dim_state), vols(dim_state);
      for (auto& x : prod) x = rate();
      for (auto& x : deg) x = rate();
      for (auto& x : vols) x = vol();
      m = make_semiparam_grn(dim_state, std::move(mlp_hidden), prod, deg, vols, rng());
      break;
    }
    case Family::custom:
      throw ConfigError("custom families have no default initialization");
  }
  if (m.dim_state != dim_state) {
    throw ConfigError(family_name(family) + " has state dimension " + std::to_string(m.dim_state) + ", requested " +
                      std::to_string(dim_state));
  }
  if (!observed_coords.empty()) {
    for (std::size_t c : observed_coords) {
      if (c >= dim_state) throw ConfigError("observed coordinate " + std::to_string(c) + " out of range");
    }
    m.observed_coords = std::move(observed_coords);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const SdeModel& model) {
  if (model.family == Family::custom) throw ConfigError("custom models cannot be serialized");
  nlohmann::json j;
  j["family"] = family_name(model.family);
  j["dim_state"] = model.dim_state;
  j["observed_coords"] = model.observed_coords;
  const std::size_t named = model.mlp ? 3 * model.dim_state : model.params.size();
  nlohmann::json nat = nlohmann::json::object();
  for (std::size_t i = 0; i < named; ++i) nat[model.params.names[i]] = model.params.natural(i);
  j["params_natural"] = nat;
  j["params_raw"] = model.params.raw;
  if (model.mlp) {
    j["mlp"] = {{"input", model.mlp->input},
                {"hidden", model.mlp->hidden},
                {"output", model.mlp->output},
                {"weights", std::vector<double>(model.params.raw.begin() + static_cast<std::ptrdiff_t>(named),
                                                model.params.raw.end())}};
  }
  return j;
}

SdeModel model_from_json(const nlohmann::json& j) {
  const Family family = family_from_name(j.at("family").get<std::string>());
  std::size_t dim = 0;
  switch (family) {
    case Family::lotka_volterra: dim = 2; break;
    case Family::repressilator3: dim = 3; break;
    case Family::repressilator_protein: dim = 6; break;
    case Family::lamb_oseen_vortex: dim = 2; break;
    default: dim = j.at("dim_state").get<std::size_t>();
  }
  std::vector<std::size_t> hidden = {32, 64, 32};
  if (j.contains("mlp")) hidden = j["mlp"].at("hidden").get<std::vector<std::size_t>>();
  SdeModel m = initial_model(family, dim, j.value("observed_coords", std::vector<std::size_t>{}), 0, nullptr, hidden);

  if (j.contains("params_raw")) {
    auto raw = j["params_raw"].get<std::vector<double>>();
    if (raw.size() != m.params.size()) throw ConfigError("params_raw has wrong length for " + family_name(family));
    m.params.raw = std::move(raw);
  } else {
    for (const auto& [name, value] : j.at("params_natural").items()) m.params.set_natural(m.params.index_of(name), value.get<double>());
    if (m.mlp) {
      const auto w = j["mlp"].at("weights").get<std::vector<double>>();
      const std::size_t named = 3 * dim;
      if (w.size() != m.params.size() - named) throw ConfigError("mlp weight count mismatch");
      std::copy(w.begin(), w.end(), m.params.raw.begin() + static_cast<std::ptrdiff_t>(named));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Initial distributions

InitialDistribution InitialDistribution::empirical(const Matrix& rows, std::size_t dim_state,
                                                   std::vector<std::size_t> observed, std::vector<double> fill) {
  InitialDistribution init;
  init.kind = Kind::empirical_resample;
  init.dim_state = dim_state;
  init.rows = rows;
  init.observed_coords = std::move(observed);
  init.fill = std::move(fill);
  init.validate();
  return init;
}

InitialDistribution InitialDistribution::uniform_box(std::vector<double> lo, std::vector<double> hi) {
  InitialDistribution init;
  init.kind = Kind::uniform_box;
  init.dim_state = lo.size();
  init.lo = std::move(lo);
  init.hi = std::move(hi);
  init.validate();
  return init;
}

InitialDistribution InitialDistribution::point_mass(std::vector<double> x) {
  InitialDistribution init;
  init.kind = Kind::point_mass;
  init.dim_state = x.size();
  init.point = std::move(x);
  init.validate();
  return init;
}

void InitialDistribution::validate() const {
  switch (kind) {
    case Kind::empirical_resample:
      if (rows.rows() == 0) throw ValidationError("empirical initial distribution has an empty snapshot");
      if (static_cast<std::size_t>(rows.cols()) != observed_coords.size()) throw DimensionError("initial rows/coords mismatch");
      if (fill.size() != dim_state - observed_coords.size()) {
        throw DimensionError("fill vector must have length " + std::to_string(dim_state - observed_coords.size()));
      }
      for (std::size_t c : observed_coords) {
        if (c >= dim_state) throw DimensionError("initial observed coordinate out of range");
      }
      break;
    case Kind::uniform_box:
      if (lo.size() != hi.size()) throw DimensionError("uniform box bounds differ in length");
      for (std::size_t i = 0; i < lo.size(); ++i) {
        if (!(lo[i] <= hi[i])) throw ValidationError("uniform box needs lo <= hi");
      }
      break;
    case Kind::point_mass:
      if (point.empty()) throw ValidationError("empty point mass");
      break;
  }
}

std::mt19937_64 trajectory_stream(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(purpose), 0x5eedu};
  return std::mt19937_64(seq);
}

std::vector<double> sample_initial_one(const InitialDistribution& init, std::size_t index, std::uint64_t seed) {
  auto rng = trajectory_stream(seed, index, 1);
  std::vector<double> x(init.dim_state);
  switch (init.kind) {
    case InitialDistribution::Kind::point_mass:
      x = init.point;
      break;
    case InitialDistribution::Kind::uniform_box:
      for (std::size_t c = 0; c < x.size(); ++c) {
        std::uniform_real_distribution<double> u(init.lo[c], init.hi[c]);
        x[c] = init.lo[c] == init.hi[c] ? init.lo[c] : u(rng);
      }
      break;
    case InitialDistribution::Kind::empirical_resample: {
      std::uniform_int_distribution<Eigen::Index> pick(0, init.rows.rows() - 1);
      const Eigen::Index r = pick(rng);
      std::vector<bool> observed(init.dim_state, false);
      for (std::size_t j = 0; j < init.observed_coords.size(); ++j) {
        x[init.observed_coords[j]] = init.rows(r, static_cast<Eigen::Index>(j));
        observed[init.observed_coords[j]] = true;
      }
      std::size_t f = 0;
      for (std::size_t c = 0; c < init.dim_state; ++c) {
        if (!observed[c]) x[c] = init.fill[f++];
      }
      break;
    }
  }
  return x;
}

Matrix sample_initial(const InitialDistribution& init, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("sample count must be at least 1");
  init.validate();
  Matrix out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(init.dim_state));
  for (std::size_t m = 0; m < count; ++m) {
    const auto x = sample_initial_one(init, m, seed);
    for (std::size_t c = 0; c < x.size(); ++c) out(m, c) = x[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Euler-Maruyama

TimeGrid build_grid(std::span<const double> out_times, double substep) {
  if (out_times.empty()) throw ConfigError("no output times");
  if (!(substep > 0.0)) throw ConfigError("substep must be positive");
  if (out_times.front() < 0.0) throw ConfigError("output times must be non-negative");
  for (std::size_t i = 1; i < out_times.size(); ++i) {
    if (!(out_times[i] > out_times[i - 1])) throw ConfigError("output times must be strictly increasing");
  }
  TimeGrid g;
  g.nodes.push_back(0.0);
  double prev = 0.0;
  for (double t : out_times) {
    if (t > prev) {
      const double span = t - prev;
      const auto steps = static_cast<std::size_t>(std::ceil(span / substep * (1.0 - 1e-12)));
      for (std::size_t s = 1; s < steps; ++s) g.nodes.push_back(prev + span * static_cast<double>(s) / static_cast<double>(steps));
      g.nodes.push_back(t);
    }
    g.record.push_back(g.nodes.size() - 1);
    prev = t;
  }
  return g;
}

namespace {

// Integrates one trajectory. Returns the first grid step whose state is
// non-finite (double path only; the Var path throws instead).
template <class T, class Record>
std::optional<std::size_t> euler_path(const SdeModel& model, std::span<const T> natural, std::vector<T> x,
                                      const TimeGrid& grid, double factor, std::mt19937_64& rng, Record&& record) {
  const std::size_t d = model.dim_state;
  std::vector<T> b(d), s(d);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t next = 0;
  while (next < grid.record.size() && grid.record[next] == 0) record(next++, x);
  for (std::size_t k = 0; k + 1 < grid.nodes.size(); ++k) {
    const double t = grid.nodes[k];
    const double dt = (grid.nodes[k + 1] - t) * factor;
    const double sq = std::sqrt(dt);
    model.drift<T>(natural, x, t, b);
    model.diffusion<T>(natural, x, t, s);
    for (std::size_t c = 0; c < d; ++c) {
      const double xi = normal(rng);
      x[c] = x[c] + b[c] * dt + s[c] * (sq * xi);
    }
    if constexpr (std::is_same_v<T, double>) {
      for (double v : x) {
        if (!std::isfinite(v)) return k + 1;
      }
    }
    while (next < grid.record.size() && grid.record[next] == k + 1) record(next++, x);
  }
  return std::nullopt;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    body(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
}

}  // namespace

bool TrajectoryBatch::any_diverged() const {
  return std::any_of(diverged_at.begin(), diverged_at.end(), [](const auto& d) { return d.has_value(); });
}

Matrix TrajectoryBatch::snapshot(std::size_t k, std::span<const std::size_t> coords, bool drop_diverged) const {
  std::vector<std::size_t> rows;
  for (std::size_t m = 0; m < count; ++m) {
    if (!drop_diverged || !diverged_at[m]) rows.push_back(m);
  }
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(coords.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < coords.size(); ++j) out(r, j) = at(rows[r], k, coords[j]);
  }
  return out;
}

Matrix TrajectoryBatch::snapshot(std::size_t k) const {
  std::vector<std::size_t> all(dim);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return snapshot(k, all);
}

TrajectoryBatch simulate(const SdeModel& model, const InitialDistribution& init, std::span<const double> out_times,
                         double substep, std::size_t count, std::uint64_t seed, const SimOptions& options) {
  if (count == 0) throw ConfigError("trajectory count must be at least 1");
  if (init.dim_state != model.dim_state) throw DimensionError("initial distribution dimension differs from model");
  init.validate();
  const TimeGrid grid = build_grid(out_times, substep);
  const auto natural = model.params.natural();

  TrajectoryBatch batch;
  batch.times.assign(out_times.begin(), out_times.end());
  batch.count = count;
  batch.dim = model.dim_state;
  batch.seed = seed;
  batch.states.assign(count * out_times.size() * model.dim_state, std::numeric_limits<double>::quiet_NaN());
  batch.diverged_at.resize(count);

  parallel_for(count, options.threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t m = lo; m < hi; ++m) {
      auto rng = trajectory_stream(seed, m, 0);
      auto x0 = sample_initial_one(init, m, seed);
      batch.diverged_at[m] = euler_path<double>(
          model, natural, std::move(x0), grid, options.time_factor, rng, [&](std::size_t k, const std::vector<double>& x) {
            std::copy(x.begin(), x.end(), batch.states.begin() + static_cast<std::ptrdiff_t>((m * out_times.size() + k) * batch.dim));
          });
    }
  });
  return batch;
}

std::vector<std::vector<Var>> simulate_on_tape(const SdeModel& model, std::span<const Var> natural,
                                               const InitialDistribution& init, std::span<const double> out_times,
                                               double substep, std::size_t count, std::uint64_t seed,
                                               const SimOptions& options) {
  if (count == 0) throw ConfigError("trajectory count must be at least 1");
  if (init.dim_state != model.dim_state) throw DimensionError("initial distribution dimension differs from model");
  init.validate();
  const TimeGrid grid = build_grid(out_times, substep);
  const std::size_t d = model.dim_state;
  std::vector<std::vector<Var>> out(out_times.size(), std::vector<Var>(count * d));
  for (std::size_t m = 0; m < count; ++m) {
    auto rng = trajectory_stream(seed, m, 0);
    const auto x0 = sample_initial_one(init, m, seed);
    euler_path<Var>(model, natural, std::vector<Var>(x0.begin(), x0.end()), grid, options.time_factor, rng,
                    [&](std::size_t k, const std::vector<Var>& x) {
                      std::copy(x.begin(), x.end(), out[k].begin() + static_cast<std::ptrdiff_t>(m * d));
                    });
  }
  return out;
}

}  // namespace snapmmd
