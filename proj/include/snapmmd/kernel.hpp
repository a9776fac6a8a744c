#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "snapmmd/dataset.hpp"

namespace snapmmd {

// k(x, y) = exp(-|x - y|^2 / (2 l^2)).
class RbfKernel {
 public:
  explicit RbfKernel(double lengthscale);

  double lengthscale() const noexcept { return lengthscale_; }
  double from_squared_distance(double d2) const noexcept { return std::exp(-d2 * inv_two_l2_); }
  double operator()(std::span<const double> x, std::span<const double> y) const;

 private:
  double lengthscale_;
  double inv_two_l2_;
};

// Finite discrete law: rows of `points` with nonnegative `masses` summing to 1.
struct AtomicMeasure {
  Matrix points;
  Vector masses;

  static AtomicMeasure uniform(const Matrix& points);
  static AtomicMeasure dirac(std::span<const double> point);
  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(points.cols()); }
  void validate() const;
};

double rbf_eval(const RbfKernel& k, std::span<const double> x, std::span<const double> y);

// Median of the n(n-1)/2 pairwise Euclidean distances (mean of the middle two
// for an even count). Throws DegenerateError when every point coincides.
double median_heuristic(const Matrix& points);

// Unbiased U-statistic estimate of MMD^2; may be negative.
double mmd_u(const RbfKernel& k, const Matrix& x, const Matrix& y);

// Exact squared MMD between two discrete laws, clamped at 0.
double mmd_exact(const RbfKernel& k, const AtomicMeasure& p, const AtomicMeasure& q);

// Kernel sums shared by the estimators.
// sum_{i,j} a_i b_j k(x_i, y_j)
double weighted_cross_sum(const RbfKernel& k, const Matrix& x, const Vector& a, const Matrix& y, const Vector& b);
// sum_{i != j} k(x_i, x_j)
double offdiagonal_sum(const RbfKernel& k, const Matrix& x);
// sum_{i, j} k(x_i, y_j)
double cross_sum(const RbfKernel& k, const Matrix& x, const Matrix& y);

struct TimedMeasure {
  double time = 0.0;
  AtomicMeasure measure;
};

struct JointMmd {
  double direct = 0.0;    // joint-space MMD^2 with k((y,t),(y',t')) = k(y,y') [t == t']
  double factored = 0.0;  // sum_t h(t)^2 MMD^2(f(.|t), g(.|t))
};

// Evaluates both sides of the state-time decomposition; throws
// NumericalError if they differ by more than 1e-10.
JointMmd mmd_joint_factored(const RbfKernel& k, std::span<const TimedMeasure> f, std::span<const TimedMeasure> g,
                            std::span<const double> h);

}  // namespace snapmmd
