#include "snapmmd/kernel.hpp"

#include <algorithm>
#include <cmath>

#include "snapmmd/errors.hpp"

namespace snapmmd {

namespace {

inline double sq_dist(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return s;
}

void require_same_dim(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("dimension mismatch: " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  }
}

}  // namespace

RbfKernel::RbfKernel(double lengthscale) : lengthscale_(lengthscale), inv_two_l2_(0.0) {
  if (!(lengthscale > 0.0) || !std::isfinite(lengthscale)) throw ConfigError("RBF lengthscale must be positive");
  inv_two_l2_ = 1.0 / (2.0 * lengthscale * lengthscale);
}

double RbfKernel::operator()(std::span<const double> x, std::span<const double> y) const {
  if (x.size() != y.size()) throw DimensionError("kernel arguments have different dimensions");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return from_squared_distance(s);
}

double rbf_eval(const RbfKernel& k, std::span<const double> x, std::span<const double> y) { return k(x, y); }

AtomicMeasure AtomicMeasure::uniform(const Matrix& points) {
  if (points.rows() == 0) throw ValidationError("empty atomic measure");
  return {points, Vector::Constant(points.rows(), 1.0 / static_cast<double>(points.rows()))};
}

AtomicMeasure AtomicMeasure::dirac(std::span<const double> point) {
  Matrix p(1, static_cast<Eigen::Index>(point.size()));
  for (std::size_t c = 0; c < point.size(); ++c) p(0, c) = point[c];
  return {p, Vector::Ones(1)};
}

void AtomicMeasure::validate() const {
  if (masses.size() != points.rows()) throw DimensionError("atomic measure mass/point count mismatch");
  if ((masses.array() < 0.0).any()) throw ValidationError("negative mass in atomic measure");
  if (std::abs(masses.sum() - 1.0) > 1e-12) throw ValidationError("atomic measure masses do not sum to 1");
}

double median_heuristic(const Matrix& points) {
  const Eigen::Index n = points.rows();
  if (n < 2) throw InsufficientDataError("median heuristic needs at least 2 points");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) d.push_back(std::sqrt(sq_dist(points, i, points, j)));
  }
  const std::size_t m = d.size();
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(m / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (m % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  if (!(med > 0.0)) {
    if (*std::max_element(d.begin(), d.end()) == 0.0) throw DegenerateError("all points identical; supply a lengthscale");
    throw DegenerateError("median pairwise distance is zero; supply a lengthscale");
  }
  return med;
}

double offdiagonal_sum(const RbfKernel& k, const Matrix& x) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < x.rows(); ++j) s += k.from_squared_distance(sq_dist(x, i, x, j));
  }
  return 2.0 * s;
}

double cross_sum(const RbfKernel& k, const Matrix& x, const Matrix& y) {
  require_same_dim(x, y);
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.rows(); ++j) s += k.from_squared_distance(sq_dist(x, i, y, j));
  }
  return s;
}

double weighted_cross_sum(const RbfKernel& k, const Matrix& x, const Vector& a, const Matrix& y, const Vector& b) {
  require_same_dim(x, y);
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (a(i) == 0.0) continue;
    double row = 0.0;
    for (Eigen::Index j = 0; j < y.rows(); ++j) row += b(j) * k.from_squared_distance(sq_dist(x, i, y, j));
    s += a(i) * row;
  }
  return s;
}

double mmd_u(const RbfKernel& k, const Matrix& x, const Matrix& y) {
  require_same_dim(x, y);
  const double n = static_cast<double>(x.rows());
  const double m = static_cast<double>(y.rows());
  if (x.rows() < 2 || y.rows() < 2) throw InsufficientDataError("U-statistic MMD needs at least 2 samples per side");
  return offdiagonal_sum(k, x) / (n * (n - 1.0)) - 2.0 * cross_sum(k, x, y) / (n * m) +
         offdiagonal_sum(k, y) / (m * (m - 1.0));
}

double mmd_exact(const RbfKernel& k, const AtomicMeasure& p, const AtomicMeasure& q) {
  require_same_dim(p.points, q.points);
  const double v = weighted_cross_sum(k, p.points, p.masses, p.points, p.masses) -
                   2.0 * weighted_cross_sum(k, p.points, p.masses, q.points, q.masses) +
                   weighted_cross_sum(k, q.points, q.masses, q.points, q.masses);
  return std::max(v, 0.0);
}

JointMmd mmd_joint_factored(const RbfKernel& k, std::span<const TimedMeasure> f, std::span<const TimedMeasure> g,
                            std::span<const double> h) {
  if (f.size() != g.size() || f.size() != h.size()) throw DimensionError("time sets differ in size");
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i].time != g[i].time) throw ValidationError("mismatched time sets");
  }

  JointMmd out;
  for (std::size_t i = 0; i < f.size(); ++i) out.factored += h[i] * h[i] * mmd_exact(k, f[i].measure, g[i].measure);

  // Joint law over (state, time): atom (y, t) carries mass h(t) * mass(y | t).
  struct Atom {
    const double* y;
    double t;
    double mass;
  };
  auto flatten = [&](std::span<const TimedMeasure> side) {
    std::vector<Atom> atoms;
    for (std::size_t i = 0; i < side.size(); ++i) {
      const auto& m = side[i].measure;
      for (Eigen::Index r = 0; r < m.points.rows(); ++r) {
        atoms.push_back({m.points.row(r).data(), side[i].time, h[i] * m.masses(r)});
      }
    }
    return atoms;
  };
  const auto fa = flatten(f);
  const auto ga = flatten(g);
  const std::size_t d = f.empty() ? 0 : f[0].measure.dim();
  auto joint_kernel = [&](const Atom& a, const Atom& b) {
    if (a.t != b.t) return 0.0;
    return k(std::span<const double>(a.y, d), std::span<const double>(b.y, d));
  };
  auto sum = [&](const std::vector<Atom>& a, const std::vector<Atom>& b) {
    double s = 0.0;
    for (const auto& x : a) {
      for (const auto& y : b) s += x.mass * y.mass * joint_kernel(x, y);
    }
    return s;
  };
  out.direct = sum(fa, fa) - 2.0 * sum(fa, ga) + sum(ga, ga);
  if (std::abs(out.direct - out.factored) > 1e-10) {
    throw NumericalError("joint and factored MMD disagree: " + std::to_string(out.direct) + " vs " +
                         std::to_string(out.factored));
  }
  return out;
}

}  // namespace snapmmd
