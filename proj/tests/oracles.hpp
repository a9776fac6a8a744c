#pragma once

// Reference implementations written directly from the definitions, sharing
// no code with the library. Slow on purpose.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Points = std::vector<std::vector<double>>;

inline double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double rbf(const std::vector<double>& a, const std::vector<double>& b, double ell) {
  return std::exp(-sqdist(a, b) / (2.0 * ell * ell));
}

// The three-sum U-statistic, term by term.
inline double mmd_u(const Points& x, const Points& y, double ell) {
  const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      if (i != j) xx += rbf(x[i], x[j], ell);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (i != j) yy += rbf(y[i], y[j], ell);
  for (const auto& a : x)
    for (const auto& b : y) xy += rbf(a, b, ell);
  return xx / (n * (n - 1)) - 2.0 * xy / (n * m) + yy / (m * (m - 1));
}

// |mu_p - mu_q|^2 in the RKHS of a generic kernel over arbitrary atoms.
template <class Atom, class Kernel>
double mmd_exact_generic(const std::vector<Atom>& p, const std::vector<double>& wp, const std::vector<Atom>& q,
                         const std::vector<double>& wq, Kernel k) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p.size(); ++j) s += wp[i] * wp[j] * k(p[i], p[j]);
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j) s += wq[i] * wq[j] * k(q[i], q[j]);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j) s -= 2.0 * wp[i] * wq[j] * k(p[i], q[j]);
  return s;
}

inline double mmd_exact(const Points& p, const std::vector<double>& wp, const Points& q, const std::vector<double>& wq,
                        double ell) {
  return mmd_exact_generic(p, wp, q, wq, [ell](const auto& a, const auto& b) { return rbf(a, b, ell); });
}

// Optimal assignment cost by enumerating all permutations (mean matched
// distance). n <= 8.
inline double assignment_brute(const Points& x, const Points& y) {
  std::vector<std::size_t> perm(x.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) c += std::sqrt(sqdist(x[i], y[perm[i]]));
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(x.size());
}

// Uniform-mass transport between N and M points: replicate each x M/g times
// and each y N/g times (g = gcd) and solve the assignment by brute force.
inline double emd_brute(const Points& x, const Points& y) {
  const std::size_t g = std::gcd(x.size(), y.size());
  Points xr, yr;
  for (const auto& a : x)
    for (std::size_t r = 0; r < y.size() / g; ++r) xr.push_back(a);
  for (const auto& b : y)
    for (std::size_t r = 0; r < x.size() / g; ++r) yr.push_back(b);
  return assignment_brute(xr, yr);
}

inline Points random_points(std::mt19937_64& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  std::normal_distribution<double> z(0.0, scale);
  Points p(n, std::vector<double>(d));
  for (auto& row : p)
    for (auto& v : row) v = z(rng);
  return p;
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> w(n);
  double s = 0.0;
  for (auto& v : w) s += (v = e(rng));
  for (auto& v : w) v /= s;
  return w;
}

// Ornstein-Uhlenbeck dX = -theta X dt + sigma dW from x0.
inline double ou_mean(double theta, double x0, double t) { return x0 * std::exp(-theta * t); }
inline double ou_var(double theta, double sigma, double t) {
  return sigma * sigma / (2.0 * theta) * (1.0 - std::exp(-2.0 * theta * t));
}
// Euler recursion of the mean and variance at step h (exact for the scheme).
inline double ou_euler_mean(double theta, double x0, double t, double h) {
  return x0 * std::pow(1.0 - theta * h, std::round(t / h));
}
inline double ou_euler_var(double theta, double sigma, double t, double h) {
  double v = 0.0;
  const double a = 1.0 - theta * h;
  for (long k = 0; k < std::lround(t / h); ++k) v = a * a * v + sigma * sigma * h;
  return v;
}

}  // namespace oracle
