#pragma once

// Reverse-mode differentiation over a growth-only record.
//
// A Var is either a constant (no record entry) or a handle to a node on a
// Tape. Every primitive checks its result for finiteness and throws
// NumericalError naming the primitive; domain violations (division by zero,
// log of a non-positive value, negative base in pow) throw DomainError.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "snapmmd/errors.hpp"

namespace snapmmd::ad {

class Tape;

class Var {
 public:
  static constexpr std::uint32_t kConstant = std::numeric_limits<std::uint32_t>::max();

  Var() = default;
  Var(double value) : value_(value) {}  // NOLINT: implicit constants are intended

  double value() const noexcept { return value_; }
  bool is_constant() const noexcept { return index_ == kConstant; }
  std::uint32_t index() const noexcept { return index_; }
  Tape* tape() const noexcept { return tape_; }

  Var& operator+=(const Var& o);
  Var& operator-=(const Var& o);
  Var& operator*=(const Var& o);
  Var& operator/=(const Var& o);

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t index, double value) : value_(value), index_(index), tape_(tape) {}

  double value_ = 0.0;
  std::uint32_t index_ = kConstant;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Independent variable.
  Var variable(double value);
  std::vector<Var> variables(std::span<const double> values);

  // Node with one or two parents; constant parents are dropped.
  Var record(double value, const char* op, const Var& a, double da);
  Var record(double value, const char* op, const Var& a, double da, const Var& b, double db);
  // Node with an arbitrary parent list (fused kernels use this).
  Var record(double value, const char* op, std::span<const Var> parents, std::span<const double> partials);

  // Adjoints of every node with respect to `output`.
  std::vector<double> adjoints(const Var& output) const;
  // d output / d v for each v in `inputs`.
  std::vector<double> gradient(const Var& output, std::span<const Var> inputs) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t edge_count() const noexcept { return edges_.size(); }
  // Number of times a non-differentiable point (rectifier at 0, min/max tie)
  // was evaluated since construction or the last clear().
  std::size_t kinks() const noexcept { return kinks_; }
  void note_kink() noexcept { ++kinks_; }
  void clear();
  void reserve(std::size_t nodes, std::size_t edges);

 private:
  struct Node {
    std::uint32_t edge_begin;
    std::uint32_t edge_count;
  };
  struct Edge {
    std::uint32_t parent;
    double partial;
  };

  Var push(double value, const char* op);

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::size_t kinks_ = 0;
};

// Arithmetic.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);

// Elementary functions, each with a double overload so model code can be
// written once as a template over the scalar type.
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var tanh(const Var& x);
Var pow(const Var& base, const Var& exponent);
Var square(const Var& x);
Var relu(const Var& x);  // derivative at exactly 0 is 0
Var sigmoid(const Var& x);
Var min(const Var& a, const Var& b);
Var max(const Var& a, const Var& b);
// (1 - exp(-s)) / s with its limit 1 at s = 0.
Var exprel(const Var& s);
Var squared_norm(std::span<const Var> v);

inline double exp(double x) { return std::exp(x); }
inline double log(double x) { return std::log(x); }
inline double sqrt(double x) { return std::sqrt(x); }
inline double tanh(double x) { return std::tanh(x); }
inline double pow(double b, double e) { return b == 0.0 ? 0.0 : std::pow(b, e); }
inline double square(double x) { return x * x; }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double min(double a, double b) { return a < b ? a : b; }
inline double max(double a, double b) { return a > b ? a : b; }
double exprel(double s);
double squared_norm(std::span<const double> v);

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

// Objective over the raw (unconstrained) parameter vector. Implementations
// must be deterministic: any randomness is drawn from a seed captured by the
// closure, so repeated evaluations see identical noise.
using Objective = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGradient {
  double value = 0.0;
  std::vector<double> gradient;
};

ValueAndGradient value_and_grad(const Objective& objective, std::span<const double> raw);
std::vector<double> grad(const Objective& objective, std::span<const double> raw);
// Objective value only; still runs through a tape.
double evaluate(const Objective& objective, std::span<const double> raw);

struct GradientReport {
  std::vector<double> analytic;
  std::vector<double> finite_difference;
  std::vector<double> relative_error;
  // Coordinates where the objective hit a kink and the one-sided difference
  // quotients disagree; excluded from max_relative_error.
  std::vector<std::size_t> non_differentiable;
  double max_relative_error = 0.0;
};

GradientReport check_gradient(const Objective& objective, std::span<const double> raw, double fd_step = 1e-5);

}  // namespace snapmmd::ad
