#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "snapmmd/errors.hpp"
#include "snapmmd/kernel.hpp"
#include "test_util.hpp"

using namespace snapmmd;

TEST_CASE("rbf values") {
  const RbfKernel k(std::sqrt(2.0));
  const std::vector<double> a{1.0, 2.0}, b{1.0, 4.0};
  CHECK(rbf_eval(k, a, a) == 1.0);
  CHECK(rbf_eval(k, a, b) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  CHECK(rbf_eval(k, a, b) == rbf_eval(k, b, a));
  CHECK_THROWS_AS(rbf_eval(k, a, std::vector<double>{1.0}), DimensionError);
  CHECK_THROWS_AS(RbfKernel(0.0), ConfigError);
  CHECK_THROWS_AS(RbfKernel(-1.0), ConfigError);
}

TEST_CASE("rbf decreases monotonically with distance") {
  const RbfKernel k(0.8);
  const std::vector<double> o{0.0, 0.0};
  double prev = 1.0;
  for (int i = 1; i <= 100; ++i) {
    const double r = 0.05 * i;
    const double v = rbf_eval(k, o, std::vector<double>{r * 0.6, r * 0.8});
    CHECK(v < prev);
    CHECK(v > 0.0);
    prev = v;
  }
}

TEST_CASE("median heuristic examples") {
  CHECK(median_heuristic(test::column({0.0, 1.0, 3.0})) == 2.0);
  CHECK(median_heuristic(test::column({0.0, 1.0})) == 1.0);
  CHECK(median_heuristic(test::column({0.0, 0.0, 1.0})) == 1.0);
  // distances {1,3,6,2,5,3}: middle two are 3 and 3
  CHECK(median_heuristic(test::column({0.0, 1.0, 3.0, 6.0})) == 3.0);
  // distances {1,2,4,1,3,2}: sorted 1,1,2,2,3,4 -> 2
  CHECK(median_heuristic(test::column({0.0, 1.0, 2.0, 4.0})) == 2.0);
  CHECK_THROWS_AS(median_heuristic(test::column({2.0, 2.0, 2.0})), DegenerateError);
}

TEST_CASE("mmd_u examples") {
  const RbfKernel k(std::sqrt(2.0));
  CHECK(mmd_u(k, test::column({0.0, 0.0}), test::column({0.0, 0.0})) == 0.0);
  const auto x = test::column({0.0, 2.0});
  CHECK(mmd_u(k, x, x) == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-14));
  CHECK_THROWS_AS(mmd_u(k, test::column({0.0}), x), InsufficientDataError);
}

TEST_CASE("mmd_u matches the term-by-term oracle and ignores row order") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const auto x = oracle::random_points(rng, 7, 3);
    const auto y = oracle::random_points(rng, 5, 3, 1.5);
    const RbfKernel k(0.9);
    const double got = mmd_u(k, test::matrix(x), test::matrix(y));
    CHECK(got == doctest::Approx(oracle::mmd_u(x, y, 0.9)).epsilon(1e-12));
    auto xs = x;
    std::shuffle(xs.begin(), xs.end(), rng);
    auto ys = y;
    std::shuffle(ys.begin(), ys.end(), rng);
    CHECK(mmd_u(k, test::matrix(xs), test::matrix(ys)) == doctest::Approx(got).epsilon(1e-13));
  }
}

TEST_CASE("mmd_exact against the oracle and basic properties") {
  std::mt19937_64 rng(5);
  const RbfKernel k(1.3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto p = oracle::random_points(rng, 4, 2);
    const auto q = oracle::random_points(rng, 6, 2);
    const auto wp = oracle::random_simplex(rng, 4), wq = oracle::random_simplex(rng, 6);
    const AtomicMeasure P{test::matrix(p), test::vec(wp)}, Q{test::matrix(q), test::vec(wq)};
    const double got = mmd_exact(k, P, Q);
    CHECK(got == doctest::Approx(oracle::mmd_exact(p, wp, q, wq, 1.3)).epsilon(1e-12));
    CHECK(got > 0.0);
    CHECK(mmd_exact(k, Q, P) == doctest::Approx(got).epsilon(1e-13));
    CHECK(mmd_exact(k, P, P) == 0.0);
  }
  const std::vector<double> a{0.0, 1.0}, b{2.0, -1.0};
  const double kab = rbf_eval(k, a, b);
  CHECK(mmd_exact(k, AtomicMeasure::dirac(a), AtomicMeasure::dirac(b)) == doctest::Approx(2.0 * (1.0 - kab)));
}

TEST_CASE("atomic measures must carry unit mass") {
  AtomicMeasure m{test::column({0.0, 1.0}), test::vec({0.5, 0.6})};
  CHECK_THROWS_AS(m.validate(), ValidationError);
  m.masses = test::vec({-0.1, 1.1});
  CHECK_THROWS_AS(m.validate(), ValidationError);
}

TEST_CASE("duplicating atoms leaves the exact discrepancy unchanged") {
  std::mt19937_64 rng(8);
  const RbfKernel k(1.0);
  const auto p = oracle::random_points(rng, 5, 2), q = oracle::random_points(rng, 4, 2);
  auto p2 = p;
  p2.insert(p2.end(), p.begin(), p.end());
  const double base = mmd_exact(k, AtomicMeasure::uniform(test::matrix(p)), AtomicMeasure::uniform(test::matrix(q)));
  const double dup = mmd_exact(k, AtomicMeasure::uniform(test::matrix(p2)), AtomicMeasure::uniform(test::matrix(q)));
  CHECK(dup == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("joint discrepancy with the factored kernel") {
  const RbfKernel k(1.0);
  std::mt19937_64 rng(3);
  SUBCASE("identical laws give zero on both sides") {
    std::vector<TimedMeasure> f;
    for (double t : {0.0, 0.5, 1.0}) f.push_back({t, AtomicMeasure::uniform(test::matrix(oracle::random_points(rng, 3, 2)))});
    const std::vector<double> h{0.2, 0.3, 0.5};
    const auto r = mmd_joint_factored(k, f, f, h);
    CHECK(std::abs(r.direct) <= 1e-14);
    CHECK(std::abs(r.factored) <= 1e-14);
  }
  SUBCASE("one time with unit mass reduces to the per-time discrepancy") {
    const auto p = AtomicMeasure::uniform(test::matrix(oracle::random_points(rng, 4, 2)));
    const auto q = AtomicMeasure::uniform(test::matrix(oracle::random_points(rng, 5, 2)));
    const std::vector<TimedMeasure> f{{0.0, p}}, g{{0.0, q}};
    const std::vector<double> h{1.0};
    const auto r = mmd_joint_factored(k, f, g, h);
    CHECK(r.direct == doctest::Approx(mmd_exact(k, p, q)).epsilon(1e-12));
  }
  SUBCASE("mismatched time sets are rejected") {
    const auto p = AtomicMeasure::uniform(test::column({0.0, 1.0}));
    const std::vector<TimedMeasure> f{{0.0, p}}, g{{1.0, p}};
    const std::vector<double> h{1.0};
    CHECK_THROWS_AS(mmd_joint_factored(k, f, g, h), ValidationError);
  }
}
