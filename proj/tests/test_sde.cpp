#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

#include "oracles.hpp"
#include "snapmmd/errors.hpp"
#include "snapmmd/sde.hpp"
#include "test_util.hpp"

using namespace snapmmd;
using ad::Var;

namespace {

std::vector<double> v(std::initializer_list<double> x) { return x; }

SdeModel constant_field(double drift, double vol, std::size_t dim = 1) {
  auto fam = std::make_shared<CustomFamily>();
  fam->dim = dim;
  fam->drift = [](std::span<const double> p, std::span<const double>, double, std::span<double> out) {
    for (auto& o : out) o = p[0];
  };
  fam->diffusion = [](std::span<const double> p, std::span<const double>, double, std::span<double> out) {
    for (auto& o : out) o = p[1];
  };
  fam->drift_var = [](std::span<const Var> p, std::span<const Var>, double, std::span<Var> out) {
    for (auto& o : out) o = p[0];
  };
  fam->diffusion_var = [](std::span<const Var> p, std::span<const Var>, double, std::span<Var> out) {
    for (auto& o : out) o = p[1];
  };
  ParamVector pv;
  pv.push("drift", drift, Transform::identity);
  pv.push("vol", vol, Transform::identity);
  return make_custom(fam, pv);
}

SdeModel ou(double theta, double sigma) {
  auto fam = std::make_shared<CustomFamily>();
  fam->name = "ou";
  fam->dim = 1;
  fam->drift = [](std::span<const double> p, std::span<const double> x, double, std::span<double> out) {
    out[0] = -p[0] * x[0];
  };
  fam->diffusion = [](std::span<const double> p, std::span<const double>, double, std::span<double> out) { out[0] = p[1]; };
  fam->drift_var = [](std::span<const Var> p, std::span<const Var> x, double, std::span<Var> out) { out[0] = -p[0] * x[0]; };
  fam->diffusion_var = [](std::span<const Var> p, std::span<const Var>, double, std::span<Var> out) { out[0] = p[1]; };
  ParamVector pv;
  pv.push("theta", theta, Transform::exp);
  pv.push("sigma", sigma, Transform::exp);
  return make_custom(fam, pv);
}

// Hand-written forward pass: relu hidden layers, sigmoid output.
std::vector<double> mlp_oracle(const std::vector<std::size_t>& widths, const std::vector<double>& w,
                               std::vector<double> x) {
  std::size_t off = 0;
  for (std::size_t l = 1; l < widths.size(); ++l) {
    std::vector<double> y(widths[l]);
    for (std::size_t j = 0; j < widths[l]; ++j) {
      double z = w[off + widths[l] * widths[l - 1] + j];
      for (std::size_t i = 0; i < widths[l - 1]; ++i) z += w[off + j * widths[l - 1] + i] * x[i];
      y[j] = l + 1 < widths.size() ? std::max(z, 0.0) : 1.0 / (1.0 + std::exp(-z));
    }
    off += widths[l] * widths[l - 1] + widths[l];
    x = y;
  }
  return x;
}

}  // namespace

TEST_CASE("family drifts at the reference parameters") {
  const auto lv = make_lotka_volterra(1.0, 0.4, 0.4, 0.1, 0.02);
  auto d = lv.drift(v({5.0, 4.0}));
  CHECK(d[0] == doctest::Approx(-3.0));
  CHECK(d[1] == doctest::Approx(7.6));
  auto s = lv.diffusion(v({5.0, 4.0}));
  CHECK(s[0] == doctest::Approx(0.1));
  CHECK(s[1] == doctest::Approx(0.08));
  CHECK(lv.diffusion(v({0.0, 0.0})) == v({0.0, 0.0}));

  const auto r3 = make_repressilator3(10.0, 3.0, 1.0, 1.0, 0.02);
  d = r3.drift(v({1.0, 1.0, 2.0}));
  CHECK(d[0] == doctest::Approx(10.0 / 9.0 - 1.0));
  CHECK(d[1] == doctest::Approx(4.0));
  CHECK(d[2] == doctest::Approx(3.0));
}

TEST_CASE("protein repressilator drift written out by hand") {
  const double a = 0.3, b = 10.0, n = 3.0, k = 1.2, g = 0.9, bp = 1.1, gp = 0.7;
  const auto m = make_repressilator_protein(a, b, n, k, g, bp, gp, 0.02);
  const std::vector<double> x{1.0, 2.0, 0.5, 0.4, 1.5, 2.5};
  const auto d = m.drift(x);
  const double* X = x.data();
  const double* Y = x.data() + 3;
  CHECK(d[0] == doctest::Approx(a + b / (1.0 + std::pow(Y[2] / k, n)) - g * X[0]));
  CHECK(d[1] == doctest::Approx(a + b / (1.0 + std::pow(Y[0] / k, n)) - g * X[1]));
  CHECK(d[2] == doctest::Approx(a + b / (1.0 + std::pow(Y[1] / k, n)) - g * X[2]));
  for (int i = 0; i < 3; ++i) CHECK(d[3 + i] == doctest::Approx(bp * X[i] - gp * Y[i]));
  const auto s = m.diffusion(x);
  for (int i = 0; i < 6; ++i) CHECK(s[i] == doctest::Approx(0.02 * x[i]));
  CHECK(m.observed_coords == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("vortex drift from the Lamb-Oseen profile") {
  VortexParams p;
  p.gamma = 0.8;
  p.r_v = 0.7;
  p.x0 = 0.1;
  p.y0 = -0.2;
  p.d = 0.05;
  p.r_d = 1.5;
  p.x0_d = 0.3;
  p.y0_d = 0.4;
  p.sigma = 0.3;
  const auto m = make_vortex(p);
  const std::vector<double> x{1.0, 0.5};
  const double dx = x[0] - p.x0, dy = x[1] - p.y0, r2 = dx * dx + dy * dy;
  const double swirl = p.gamma * p.r_v / r2 * (1.0 - std::exp(-r2 / (p.r_v * p.r_v)));
  const auto d = m.drift(x);
  CHECK(d[0] == doctest::Approx(-dy * swirl + p.d * (x[0] - p.x0_d) / p.r_d));
  CHECK(d[1] == doctest::Approx(dx * swirl + p.d * (x[1] - p.y0_d)));
  CHECK(m.diffusion(x) == v({0.3, 0.3}));
  // the core is regular
  const auto c = m.drift(v({p.x0, p.y0}));
  CHECK(std::isfinite(c[0]));
  CHECK(std::isfinite(c[1]));
}

TEST_CASE("semiparametric drift is M f(Y) - L Y with an MLP gate") {
  const std::vector<double> prod{1.0, 2.0}, deg{0.5, 0.25}, vol{0.1, 0.2};
  const auto m = make_semiparam_grn(2, {4, 3}, prod, deg, vol, 9);
  const std::vector<double> x{0.7, -0.3};
  const auto nat = m.params.natural();
  const std::vector<double> w(nat.begin() + 6, nat.end());
  REQUIRE(w.size() == m.mlp->parameter_count());
  const auto f = mlp_oracle({2, 4, 3, 2}, w, x);
  const auto d = m.drift(x);
  for (int i = 0; i < 2; ++i) {
    CHECK(d[i] == doctest::Approx(prod[i] * f[i] - deg[i] * x[i]));
    CHECK(f[i] > 0.0);
    CHECK(f[i] < 1.0);
  }
  const auto s = m.diffusion(x);
  CHECK(s[0] == doctest::Approx(0.1 * 0.7));
  CHECK(s[1] == doctest::Approx(0.2 * -0.3));
}

TEST_CASE("zero rates give zero drift") {
  auto lv = make_lotka_volterra(1.0, 1.0, 1.0, 1.0, 1.0);
  for (std::size_t i = 0; i < lv.params.size(); ++i) lv.params.raw[i] = -800.0;  // exp underflows to 0
  const auto d = lv.drift(v({3.0, 2.0}));
  CHECK(d[0] == 0.0);
  CHECK(d[1] == 0.0);
}

TEST_CASE("wrong state dimension is rejected") {
  const auto lv = make_lotka_volterra(1.0, 0.4, 0.4, 0.1, 0.02);
  CHECK_THROWS_AS(lv.drift(v({1.0, 2.0, 3.0})), DimensionError);
  CHECK_THROWS_AS(lv.diffusion(v({1.0})), DimensionError);
}

TEST_CASE("exp-transformed parameters stay positive and round-trip through json") {
  auto m = initial_model(Family::repressilator_protein, 6, {0, 1, 2}, 3);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (m.params.transforms[i] == Transform::exp) CHECK(m.params.natural(i) > 0.0);
  }
  const auto back = model_from_json(to_json(m));
  CHECK(back.params.raw == m.params.raw);
  CHECK(back.observed_coords == m.observed_coords);
  CHECK(back.family == m.family);

  const auto s = make_semiparam_grn(3, {5}, v({1, 1, 1}), v({1, 1, 1}), v({0.1, 0.1, 0.1}), 1);
  const auto sb = model_from_json(to_json(s));
  CHECK(sb.params.raw == s.params.raw);
  CHECK(sb.mlp->hidden == s.mlp->hidden);
}

TEST_CASE("unknown family lists the known ones") {
  try {
    family_from_name("bogus");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& n : family_names()) CHECK(msg.find(n) != std::string::npos);
  }
}

TEST_CASE("initial laws") {
  const auto pm = sample_initial(InitialDistribution::point_mass(v({1.0, 2.0})), 3, 1);
  CHECK(pm.rows() == 3);
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(pm.row(i) == Eigen::RowVector2d(1.0, 2.0));

  const auto box = sample_initial(InitialDistribution::uniform_box(v({5.0, 4.0}), v({5.1, 4.1})), 500, 2);
  CHECK(box.col(0).minCoeff() >= 5.0);
  CHECK(box.col(0).maxCoeff() <= 5.1);
  CHECK(box.col(1).minCoeff() >= 4.0);
  CHECK(box.col(1).maxCoeff() <= 4.1);

  const auto emp = InitialDistribution::empirical(test::matrix({{1.0, 2.0, 3.0}}), 6, {0, 1, 2}, v({0.0, 0.0, 0.0}));
  const auto e = sample_initial(emp, 4, 3);
  for (Eigen::Index i = 0; i < 4; ++i) {
    CHECK(e(i, 0) == 1.0);
    CHECK(e(i, 2) == 3.0);
    CHECK(e(i, 5) == 0.0);
  }
  CHECK_THROWS(InitialDistribution::empirical(Matrix(0, 3), 6, {0, 1, 2}, v({0, 0, 0})).validate());
  CHECK_THROWS(InitialDistribution::empirical(test::matrix({{1.0, 2.0, 3.0}}), 6, {0, 1, 2}, v({0})).validate());
  CHECK_THROWS(InitialDistribution::uniform_box(v({1.0}), v({0.0})).validate());
}

TEST_CASE("simulator closed-form cases") {
  const auto still = constant_field(0.0, 0.0);
  const auto b = simulate(still, InitialDistribution::point_mass(v({2.5})), v({0.3, 1.0, 2.0}), 0.1, 4, 7);
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t k = 0; k < 3; ++k) CHECK(b.at(m, k, 0) == 2.5);

  const auto unit = constant_field(1.0, 0.0);
  const auto u = simulate(unit, InitialDistribution::point_mass(v({0.0})), v({1.0}), 0.25, 2, 1);
  CHECK(u.at(0, 0, 0) == 1.0);
}

TEST_CASE("grid refinement puts every output time on the grid") {
  const auto g = build_grid(v({0.3, 1.0, 1.05}), 0.2);
  CHECK(g.nodes.front() == 0.0);
  for (std::size_t k = 0; k < 3; ++k) CHECK(g.nodes[g.record[k]] == doctest::Approx(v({0.3, 1.0, 1.05})[k]).epsilon(1e-15));
  for (std::size_t i = 1; i < g.nodes.size(); ++i) CHECK(g.nodes[i] - g.nodes[i - 1] <= 0.2 + 1e-15);
  CHECK_THROWS(build_grid(v({1.0, 0.5}), 0.1));
  CHECK_THROWS(build_grid(v({1.0}), 0.0));
}

TEST_CASE("simulation is deterministic and streams are disjoint") {
  const auto lv = make_lotka_volterra(1.0, 0.4, 0.4, 0.1, 0.02);
  const auto init = InitialDistribution::uniform_box(v({5.0, 4.0}), v({5.1, 4.1}));
  const auto t = v({0.5, 1.0, 2.0});
  const auto a = simulate(lv, init, t, 0.05, 10, 42);
  const auto b = simulate(lv, init, t, 0.05, 10, 42);
  CHECK(a == b);
  const auto c = simulate(lv, init, t, 0.05, 20, 42);
  for (std::size_t m = 0; m < 10; ++m)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t d = 0; d < 2; ++d) CHECK(a.at(m, k, d) == c.at(m, k, d));
  SimOptions par;
  par.threads = 3;
  CHECK(simulate(lv, init, t, 0.05, 20, 42, par) == c);
  CHECK_FALSE(simulate(lv, init, t, 0.05, 10, 43) == a);
}

TEST_CASE("divergence is flagged per trajectory") {
  const auto lv = make_lotka_volterra(50.0, 0.0001, 0.0001, 0.0001, 0.02);
  const auto b = simulate(lv, InitialDistribution::point_mass(v({1e307, 1.0})), v({1.0}), 0.5, 3, 1);
  CHECK(b.any_diverged());
  CHECK(b.diverged_at[0].has_value());
}

TEST_CASE("the taped simulator agrees with the plain one") {
  const auto lv = make_lotka_volterra(1.0, 0.4, 0.4, 0.1, 0.02);
  const auto init = InitialDistribution::uniform_box(v({5.0, 4.0}), v({5.1, 4.1}));
  const auto t = v({0.25, 0.5});
  const auto plain = simulate(lv, init, t, 0.05, 5, 9);
  ad::Tape tape;
  const auto raw = tape.variables(lv.params.raw);
  const auto nat = lv.params.to_natural<Var>(raw);
  const auto taped = simulate_on_tape(lv, nat, init, t, 0.05, 5, 9);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t m = 0; m < 5; ++m)
      for (std::size_t d = 0; d < 2; ++d) CHECK(taped[k][m * 2 + d].value() == plain.at(m, k, d));
}

TEST_CASE("pathwise derivative of constant drift is the elapsed time") {
  const auto m = constant_field(0.3, 0.2);
  ad::Tape tape;
  const auto p = tape.variables(m.params.raw);
  const auto out = simulate_on_tape(m, p, InitialDistribution::point_mass(v({1.0})), v({0.7, 1.9}), 0.1, 3, 5);
  for (std::size_t k = 0; k < 2; ++k) {
    const double T = k == 0 ? 0.7 : 1.9;
    for (std::size_t j = 0; j < 3; ++j) {
      const auto g = tape.gradient(out[k][j], std::span(p.data(), 1));
      CHECK(std::abs(g[0] - T) <= 1e-12);
    }
  }
}

TEST_CASE("time factor stretches raw increments") {
  const auto unit = constant_field(1.0, 0.0);
  SimOptions o;
  o.time_factor = 9.0;
  const auto b = simulate(unit, InitialDistribution::point_mass(v({0.0})), v({1.0}), 0.1, 1, 1, o);
  CHECK(b.at(0, 0, 0) == doctest::Approx(9.0).epsilon(1e-14));
}

TEST_CASE("OU moments at moderate sample size") {
  const auto m = ou(1.0, 0.5);
  const std::size_t M = 4000;
  const double h = 0.01;
  const auto b = simulate(m, InitialDistribution::point_mass(v({2.0})), v({1.0}), h, M, 17);
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < M; ++i) mean += b.at(i, 0, 0);
  mean /= M;
  for (std::size_t i = 0; i < M; ++i) sq += (b.at(i, 0, 0) - mean) * (b.at(i, 0, 0) - mean);
  const double var = sq / (M - 1);
  const double ev = oracle::ou_euler_var(1.0, 0.5, 1.0, h);
  CHECK(std::abs(mean - oracle::ou_euler_mean(1.0, 2.0, 1.0, h)) <= 4.0 * std::sqrt(ev / M));
  CHECK(std::abs(var - ev) <= 4.0 * ev * std::sqrt(2.0 / (M - 1)));
}
