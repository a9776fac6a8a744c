// One line per criterion; exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "snapmmd/dataset.hpp"
#include "snapmmd/evaluation.hpp"
#include "snapmmd/experiments.hpp"
#include "snapmmd/kernel.hpp"
#include "snapmmd/sde.hpp"
#include "snapmmd/training.hpp"
#include "test_util.hpp"

using namespace snapmmd;

namespace {

// Tolerances.
constexpr double kJointTol = 1e-10;
constexpr double kUnbiasedSe = 3.0;
constexpr double kGradRel = 1e-4;
constexpr double kOuSe = 3.0;
constexpr double kSlopeLo = 0.7, kSlopeHi = 1.3;
constexpr double kEmdTol = 1e-9;
constexpr double kLvForecastMmd = 0.05, kLvForecastEmd = 0.5, kLvInterpMmd = 0.06, kLvDrift = 0.01;
constexpr double kReprForecastMmd = 0.1, kReprR2 = 0.9;
constexpr double kProtForecastMmd = 0.05, kProtInterpEmd = 0.3;
constexpr double kR2Tol = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = s <= budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("[%s] %2d %s: %s (%.1fs of %.0fs)\n", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s, budget_s);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome joint_identity() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> atoms(1, 6), times(1, 4), dims(1, 3);
  std::uniform_real_distribution<double> ell(0.3, 2.0);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t T = times(rng), d = dims(rng);
    const double l = ell(rng);
    const auto h = oracle::random_simplex(rng, T);
    std::vector<TimedMeasure> f, g;
    // atoms in the product space: (state, time index) with mass h(t) w
    using Atom = std::pair<std::vector<double>, std::size_t>;
    std::vector<Atom> fa, ga;
    std::vector<double> fw, gw;
    for (std::size_t t = 0; t < T; ++t) {
      const auto p = oracle::random_points(rng, atoms(rng), d), q = oracle::random_points(rng, atoms(rng), d, 1.3);
      const auto wp = oracle::random_simplex(rng, p.size()), wq = oracle::random_simplex(rng, q.size());
      f.push_back({0.5 * static_cast<double>(t), {test::matrix(p), test::vec(wp)}});
      g.push_back({0.5 * static_cast<double>(t), {test::matrix(q), test::vec(wq)}});
      for (std::size_t i = 0; i < p.size(); ++i) fa.push_back({p[i], t}), fw.push_back(h[t] * wp[i]);
      for (std::size_t i = 0; i < q.size(); ++i) ga.push_back({q[i], t}), gw.push_back(h[t] * wq[i]);
    }
    const double direct_oracle = oracle::mmd_exact_generic(fa, fw, ga, gw, [l](const Atom& a, const Atom& b) {
      return a.second == b.second ? oracle::rbf(a.first, b.first, l) : 0.0;
    });
    const auto r = mmd_joint_factored(RbfKernel(l), f, g, h);
    worst = std::max({worst, std::abs(r.direct - r.factored), std::abs(direct_oracle - r.factored)});
  }
  return {worst <= kJointTol, fmt("max |direct - factored| = %.2e over 50 instances (tol %.0e)", worst, kJointTol)};
}

Outcome unbiasedness() {
  std::mt19937_64 rng(202);
  const auto p = oracle::random_points(rng, 5, 2), q = oracle::random_points(rng, 4, 2, 1.5);
  const auto wp = oracle::random_simplex(rng, 5), wq = oracle::random_simplex(rng, 4);
  const RbfKernel k(1.0);
  const double exact = mmd_exact(k, {test::matrix(p), test::vec(wp)}, {test::matrix(q), test::vec(wq)});
  const double exact_oracle = oracle::mmd_exact(p, wp, q, wq, 1.0);
  std::discrete_distribution<std::size_t> dp(wp.begin(), wp.end()), dq(wq.begin(), wq.end());
  const int R = 10000;
  const std::size_t N = 10, M = 8;
  double sum = 0.0, sq = 0.0;
  Matrix x(N, 2), y(M, 2);
  for (int r = 0; r < R; ++r) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto& a = p[dp(rng)];
      x(i, 0) = a[0], x(i, 1) = a[1];
    }
    for (std::size_t i = 0; i < M; ++i) {
      const auto& b = q[dq(rng)];
      y(i, 0) = b[0], y(i, 1) = b[1];
    }
    const double v = mmd_u(k, x, y);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / R;
  const double se = std::sqrt((sq / R - mean * mean) * R / (R - 1) / R);
  const bool ok = std::abs(mean - exact) <= kUnbiasedSe * se && std::abs(exact - exact_oracle) <= 1e-12;
  return {ok, fmt("mean mmd_u %.5f vs exact %.5f, |diff| = %.2f SE (tol %.0f SE)", mean, exact,
                  std::abs(mean - exact) / se, kUnbiasedSe)};
}

Outcome gradient() {
  const auto truth = make_lotka_volterra(1.0, 0.4, 0.4, 0.1, 0.02);
  const auto init_truth = InitialDistribution::uniform_box({5.0, 4.0}, {5.1, 4.1});
  const std::vector<double> t{0.0, 0.5, 1.0};
  const auto batch = simulate(truth, init_truth, t, 0.05, 200, 303);
  std::vector<Snapshot> snaps;
  for (std::size_t k = 0; k < t.size(); ++k) snaps.push_back({t[k], batch.snapshot(k)});
  const auto train = scale_times(make_dataset(std::move(snaps)));

  FitConfig cfg;
  cfg.trajectories = 50;
  cfg.substep = 0.1;
  cfg.noise_mode = FitConfig::NoiseMode::frozen;
  const auto model = make_lotka_volterra(0.8, 0.5, 0.3, 0.15, 0.05);
  const SnapMmdObjective obj(train, model, default_initial(train), cfg);
  const auto rep = ad::check_gradient(obj.frozen(7), model.params.raw, 1e-5);
  return {rep.max_relative_error <= kGradRel,
          fmt("max relative error %.2e over %zu raw parameters (tol %.0e)", rep.max_relative_error,
              rep.analytic.size(), kGradRel)};
}

SdeModel ou_model(double theta, double sigma) {
  auto fam = std::make_shared<CustomFamily>();
  fam->name = "ou";
  fam->dim = 1;
  fam->drift = [](std::span<const double> p, std::span<const double> x, double, std::span<double> out) {
    out[0] = -p[0] * x[0];
  };
  fam->diffusion = [](std::span<const double> p, std::span<const double>, double, std::span<double> out) { out[0] = p[1]; };
  fam->drift_var = [](std::span<const ad::Var> p, std::span<const ad::Var> x, double, std::span<ad::Var> out) {
    out[0] = -p[0] * x[0];
  };
  fam->diffusion_var = [](std::span<const ad::Var> p, std::span<const ad::Var>, double, std::span<ad::Var> out) {
    out[0] = p[1];
  };
  ParamVector pv;
  pv.push("theta", theta, Transform::exp);
  pv.push("sigma", sigma, Transform::exp);
  return make_custom(fam, pv);
}

std::pair<double, double> sample_moments(const TrajectoryBatch& b) {
  double m = 0.0, s = 0.0;
  for (std::size_t i = 0; i < b.count; ++i) m += b.at(i, 0, 0);
  m /= static_cast<double>(b.count);
  for (std::size_t i = 0; i < b.count; ++i) s += (b.at(i, 0, 0) - m) * (b.at(i, 0, 0) - m);
  return {m, s / static_cast<double>(b.count - 1)};
}

Outcome calibration() {
  const double theta = 1.0, x0 = 2.0, T = 1.0;
  const std::size_t M = 20000;
  const std::vector<double> out{T};
  const auto init = InitialDistribution::point_mass({x0});

  const double sigma = 0.5;
  const auto b = simulate(ou_model(theta, sigma), init, out, 1e-3, M, 404);
  const auto [mean, var] = sample_moments(b);
  const double em = oracle::ou_mean(theta, x0, T), ev = oracle::ou_var(theta, sigma, T);
  const double zm = std::abs(mean - em) / std::sqrt(ev / M);
  const double zv = std::abs(var - ev) / (ev * std::sqrt(2.0 / (M - 1)));

  // Weak error of E[X_T]; low volatility keeps the Monte-Carlo error well
  // below the smallest bias at M = 20000.
  const double quiet = 0.05;
  std::vector<double> hs{0.02, 0.01, 0.005}, errs;
  for (double h : hs) {
    const auto bh = simulate(ou_model(theta, quiet), init, out, h, M, 405);
    errs.push_back(std::abs(sample_moments(bh).first - em));
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double lx = std::log(hs[i]), ly = std::log(errs[i]);
    sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly;
  }
  const double slope = (3 * sxy - sx * sy) / (3 * sxx - sx * sx);
  const bool ok = zm <= kOuSe && zv <= kOuSe && slope >= kSlopeLo && slope <= kSlopeHi;
  return {ok, fmt("mean %.2f SE, variance %.2f SE off (tol %.0f); weak-error slope %.3f (want %.1f-%.1f)", zm, zv,
                  kOuSe, slope, kSlopeLo, kSlopeHi)};
}

Outcome emd_oracle() {
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<std::size_t> n(1, 6), d(1, 3);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t size = n(rng), dim = d(rng);
    const auto x = oracle::random_points(rng, size, dim), y = oracle::random_points(rng, size, dim, 1.7);
    worst = std::max(worst, std::abs(emd(test::matrix(x), test::matrix(y)) - oracle::assignment_brute(x, y)));
  }
  bool axioms = true;
  for (int rep = 0; rep < 50; ++rep) {
    const Matrix a = test::gaussian(rng, 6, 2), b = test::gaussian(rng, 6, 2, 0.0, 2.0), c = test::gaussian(rng, 6, 2, 1.0);
    const double ab = emd(a, b), ba = emd(b, a), ac = emd(a, c), bc = emd(b, c);
    axioms = axioms && std::abs(ab - ba) <= kEmdTol && ab > 0.0 && emd(a, a) == 0.0 && ac <= ab + bc + kEmdTol;
  }
  return {worst <= kEmdTol && axioms,
          fmt("max |emd - brute force| = %.2e over 200 instances (tol %.0e); metric axioms %s", worst, kEmdTol,
              axioms ? "hold" : "violated")};
}

RecipeResult run_named(const std::string& name) {
  const auto recipe = make_recipe(name);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= recipe.seeds; ++s) seeds.push_back(s);
  const auto res = run_recipe(recipe, recipe_fit_config(recipe), seeds);
  for (const auto& s : res.seeds) {
    if (!s.ok()) {
      std::printf("      %s seed %llu failed: %s\n", name.c_str(), static_cast<unsigned long long>(s.seed), s.error.c_str());
      continue;
    }
    std::printf("      %s seed %llu: R2 %.4f, forecast MMD %.4f EMD %.3f, interp MMD %.4f EMD %.3f", name.c_str(),
                static_cast<unsigned long long>(s.seed), s.fit->best_r2, s.forecast->mmd.mean, s.forecast->emd.mean,
                s.interpolation->mmd.mean, s.interpolation->emd.mean);
    if (s.drift_mse) std::printf(", drift MSE %.5f", *s.drift_mse);
    std::printf("\n");
  }
  std::fflush(stdout);
  return res;
}

bool all_done(const RecipeResult& r) { return r.completed == r.seeds.size(); }

Outcome lv_reproduction() {
  const auto r = run_named("lv");
  const bool ok = all_done(r) && r.forecast_mmd.mean <= kLvForecastMmd && r.forecast_emd.mean <= kLvForecastEmd &&
                  r.interpolation_mmd.mean <= kLvInterpMmd && r.drift_mse.mean <= kLvDrift;
  return {ok, fmt("%zu/%zu seeds; forecast MMD %.4f (<= %.2f), EMD %.3f (<= %.1f); interp MMD %.4f (<= %.2f); "
                  "drift MSE %.5f (<= %.2f)",
                  r.completed, r.seeds.size(), r.forecast_mmd.mean, kLvForecastMmd, r.forecast_emd.mean,
                  kLvForecastEmd, r.interpolation_mmd.mean, kLvInterpMmd, r.drift_mse.mean, kLvDrift)};
}

Outcome repr_reproduction() {
  const auto r = run_named("repr3");
  double worst_r2 = INFINITY;
  for (const auto& s : r.seeds)
    if (s.ok()) worst_r2 = std::min(worst_r2, s.fit->best_r2);
  const bool ok = all_done(r) && r.forecast_mmd.mean <= kReprForecastMmd && worst_r2 >= kReprR2;
  return {ok, fmt("%zu/%zu seeds; forecast MMD %.4f (<= %.1f); lowest final R2 %.4f (>= %.1f)", r.completed,
                  r.seeds.size(), r.forecast_mmd.mean, kReprForecastMmd, worst_r2, kReprR2)};
}

Outcome partial_reproduction() {
  const auto r = run_named("repr_protein");
  const bool ok = all_done(r) && r.forecast_mmd.mean <= kProtForecastMmd && r.interpolation_emd.mean <= kProtInterpEmd;
  return {ok, fmt("%zu/%zu seeds; forecast MMD %.4f (<= %.2f); interp EMD %.3f (<= %.1f)", r.completed,
                  r.seeds.size(), r.forecast_mmd.mean, kProtForecastMmd, r.interpolation_emd.mean, kProtInterpEmd)};
}

Outcome r2_sanity() {
  std::mt19937_64 rng(909);
  std::vector<Snapshot> snaps;
  for (std::size_t i = 0; i < 4; ++i) snaps.push_back({static_cast<double>(i), test::gaussian(rng, 3 + i, 2, 0.4 * i)});
  const auto ds = make_dataset(std::move(snaps));
  const RbfKernel k(1.0);
  std::vector<AtomicMeasure> emp;
  for (const auto& s : ds.snapshots) emp.push_back(AtomicMeasure::uniform(s.states));
  const auto bary = barycenter(ds);
  const double perfect = r_squared_exact(ds, emp, k);
  const double flat = r_squared_exact(ds, std::vector<AtomicMeasure>(ds.size(), bary), k);

  const auto w = weights(ds);
  auto residual = [&](const AtomicMeasure& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < emp.size(); ++i)
      s += w[i] * oracle::mmd_exact(test::rows(q.points), std::vector<double>(q.masses.data(), q.masses.data() + q.masses.size()),
                                    test::rows(emp[i].points),
                                    std::vector<double>(emp[i].masses.data(), emp[i].masses.data() + emp[i].masses.size()), 1.0);
    return s;
  };
  const double best = residual(bary);
  int beaten = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const AtomicMeasure q{bary.points, test::vec(oracle::random_simplex(rng, static_cast<std::size_t>(bary.points.rows())))};
    if (residual(q) < best - kR2Tol) ++beaten;
  }
  const bool ok = std::abs(perfect - 1.0) <= kR2Tol && std::abs(flat) <= kR2Tol && beaten == 0;
  return {ok, fmt("perfect model R2 = %.15f, barycenter R2 = %.1e; barycenter beaten by %d of 100 challengers", perfect,
                  flat, beaten)};
}

Outcome determinism() {
  const auto recipe = make_recipe("lv");
  const auto gen = generate(recipe, 11);
  const auto part = partition(recipe, gen.full);
  auto cfg = recipe_fit_config(recipe);
  cfg.max_epochs = 20;
  cfg.trajectories = 50;
  cfg.seed = 3;
  const auto start = make_lotka_volterra(0.8, 0.5, 0.3, 0.15, 0.05);
  const auto init = default_initial(part.train);
  const auto a = fit(part.train, start, init, cfg);
  const auto b = fit(part.train, start, init, cfg);
  const bool fit_same = to_json(a).dump() == to_json(b).dump() && a.model.params.raw == b.model.params.raw &&
                        a.loss_history == b.loss_history;

  const auto times = gen.full.raw_times();
  SimOptions one, three;
  three.threads = 3;
  const auto s1 = simulate(gen.truth, recipe.truth_initial, times, 0.5, 200, 77, one);
  const auto s2 = simulate(gen.truth, recipe.truth_initial, times, 0.5, 200, 77, three);
  const bool sim_same = s1 == s2 && to_csv(generate(recipe, 11).full) == to_csv(gen.full);
  return {fit_same && sim_same, fmt("fit bit-identical: %s; simulate bytes identical: %s", fit_same ? "yes" : "no",
                                    sim_same ? "yes" : "no")};
}

}  // namespace

int main() {
  run(1, "joint MMD factorization", 10, joint_identity);
  run(2, "U-statistic unbiasedness", 60, unbiasedness);
  run(3, "loss gradient vs finite differences", 60, gradient);
  run(4, "simulator calibration", 120, calibration);
  run(5, "EMD vs brute force", 30, emd_oracle);
  run(6, "Lotka-Volterra reproduction", 3 * 900, lv_reproduction);
  run(7, "repressilator reproduction", 3 * 900, repr_reproduction);
  run(8, "partial-observation reproduction", 3 * 900, partial_reproduction);
  run(9, "R2 endpoints and barycenter optimality", 10, r2_sanity);
  run(10, "determinism", 120, determinism);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
