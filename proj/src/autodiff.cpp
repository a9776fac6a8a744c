#include "snapmmd/autodiff.hpp"

#include <algorithm>
#include <string>

namespace snapmmd::ad {

namespace {

void require_finite(double value, const char* op) {
  if (!std::isfinite(value)) throw NumericalError(std::string("non-finite result in ") + op);
}

Tape* tape_of(const Var& a, const Var& b) {
  if (a.tape() && b.tape() && a.tape() != b.tape()) throw Error("operands recorded on different tapes");
  return a.tape() ? a.tape() : b.tape();
}

}  // namespace

Var& Var::operator+=(const Var& o) { return *this = *this + o; }
Var& Var::operator-=(const Var& o) { return *this = *this - o; }
Var& Var::operator*=(const Var& o) { return *this = *this * o; }
Var& Var::operator/=(const Var& o) { return *this = *this / o; }

Var Tape::push(double value, const char* op) {
  require_finite(value, op);
  if (nodes_.size() >= Var::kConstant - 1) throw Error("tape exceeds node capacity");
  nodes_.push_back({static_cast<std::uint32_t>(edges_.size()), 0});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1), value);
}

Var Tape::variable(double value) { return push(value, "variable"); }

std::vector<Var> Tape::variables(std::span<const double> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(variable(v));
  return out;
}

Var Tape::record(double value, const char* op, const Var& a, double da) {
  if (a.is_constant()) {
    require_finite(value, op);
    return Var(value);
  }
  require_finite(da, op);
  Var out = push(value, op);
  edges_.push_back({a.index(), da});
  nodes_.back().edge_count = 1;
  return out;
}

Var Tape::record(double value, const char* op, const Var& a, double da, const Var& b, double db) {
  if (a.is_constant()) return record(value, op, b, db);
  if (b.is_constant()) return record(value, op, a, da);
  require_finite(da, op);
  require_finite(db, op);
  Var out = push(value, op);
  edges_.push_back({a.index(), da});
  edges_.push_back({b.index(), db});
  nodes_.back().edge_count = 2;
  return out;
}

Var Tape::record(double value, const char* op, std::span<const Var> parents, std::span<const double> partials) {
  if (parents.size() != partials.size()) throw DimensionError("parent/partial count mismatch");
  Var out = push(value, op);
  std::uint32_t count = 0;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    if (parents[i].is_constant()) continue;
    if (parents[i].tape() != this) throw Error("operand recorded on a different tape");
    require_finite(partials[i], op);
    edges_.push_back({parents[i].index(), partials[i]});
    ++count;
  }
  nodes_.back().edge_count = count;
  return out;
}

std::vector<double> Tape::adjoints(const Var& output) const {
  std::vector<double> adj(nodes_.size(), 0.0);
  if (output.is_constant()) return adj;
  if (output.tape() != this) throw Error("output recorded on a different tape");
  adj[output.index()] = 1.0;
  for (std::size_t i = output.index() + 1; i-- > 0;) {
    const double a = adj[i];
    if (a == 0.0) continue;
    const Node& n = nodes_[i];
    for (std::uint32_t e = n.edge_begin; e < n.edge_begin + n.edge_count; ++e) {
      adj[edges_[e].parent] += edges_[e].partial * a;
    }
  }
  return adj;
}

std::vector<double> Tape::gradient(const Var& output, std::span<const Var> inputs) const {
  const auto adj = adjoints(output);
  std::vector<double> g(inputs.size(), 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].is_constant()) g[i] = adj[inputs[i].index()];
  }
  return g;
}

void Tape::clear() {
  nodes_.clear();
  edges_.clear();
  kinks_ = 0;
}

void Tape::reserve(std::size_t nodes, std::size_t edges) {
  nodes_.reserve(nodes);
  edges_.reserve(edges);
}

Var operator+(const Var& a, const Var& b) {
  Tape* t = tape_of(a, b);
  const double v = a.value() + b.value();
  if (!t) {
    require_finite(v, "add");
    return v;
  }
  return t->record(v, "add", a, 1.0, b, 1.0);
}

Var operator-(const Var& a, const Var& b) {
  Tape* t = tape_of(a, b);
  const double v = a.value() - b.value();
  if (!t) {
    require_finite(v, "sub");
    return v;
  }
  return t->record(v, "sub", a, 1.0, b, -1.0);
}

Var operator*(const Var& a, const Var& b) {
  Tape* t = tape_of(a, b);
  const double v = a.value() * b.value();
  if (!t) {
    require_finite(v, "mul");
    return v;
  }
  return t->record(v, "mul", a, b.value(), b, a.value());
}

Var operator/(const Var& a, const Var& b) {
  if (b.value() == 0.0) throw DomainError("division by zero in div");
  Tape* t = tape_of(a, b);
  const double inv = 1.0 / b.value();
  const double v = a.value() * inv;
  if (!t) {
    require_finite(v, "div");
    return v;
  }
  return t->record(v, "div", a, inv, b, -v * inv);
}

Var operator-(const Var& a) {
  if (!a.tape()) return -a.value();
  return a.tape()->record(-a.value(), "neg", a, -1.0);
}

namespace {

template <class F>
Var unary(const Var& x, const char* op, double value, F&& derivative) {
  if (!x.tape()) {
    require_finite(value, op);
    return value;
  }
  return x.tape()->record(value, op, x, derivative());
}

}  // namespace

Var exp(const Var& x) {
  const double v = std::exp(x.value());
  return unary(x, "exp", v, [&] { return v; });
}

Var log(const Var& x) {
  if (!(x.value() > 0.0)) throw DomainError("log of non-positive value");
  return unary(x, "log", std::log(x.value()), [&] { return 1.0 / x.value(); });
}

Var sqrt(const Var& x) {
  if (x.value() < 0.0) throw DomainError("sqrt of negative value");
  const double v = std::sqrt(x.value());
  if (v == 0.0 && x.tape()) throw DomainError("sqrt at zero is not differentiable");
  return unary(x, "sqrt", v, [&] { return 0.5 / v; });
}

Var tanh(const Var& x) {
  const double v = std::tanh(x.value());
  return unary(x, "tanh", v, [&] { return 1.0 - v * v; });
}

Var pow(const Var& base, const Var& exponent) {
  const double b = base.value();
  const double e = exponent.value();
  if (b < 0.0) throw DomainError("pow with negative base");
  if (b == 0.0) {
    if (e <= 0.0) throw DomainError("pow of zero with non-positive exponent");
    // Value 0; the base derivative is e * 0^(e-1), finite only for e >= 1.
    if (e < 1.0 && !base.is_constant()) throw DomainError("pow derivative undefined at zero base");
    const double db = e == 1.0 ? 1.0 : 0.0;
    Tape* t = tape_of(base, exponent);
    if (!t) return 0.0;
    return t->record(0.0, "pow", base, db, exponent, 0.0);
  }
  const double v = std::pow(b, e);
  Tape* t = tape_of(base, exponent);
  if (!t) {
    require_finite(v, "pow");
    return v;
  }
  return t->record(v, "pow", base, e * v / b, exponent, v * std::log(b));
}

Var square(const Var& x) {
  const double v = x.value() * x.value();
  return unary(x, "square", v, [&] { return 2.0 * x.value(); });
}

Var relu(const Var& x) {
  if (x.value() == 0.0 && x.tape()) x.tape()->note_kink();
  const bool on = x.value() > 0.0;
  return unary(x, "relu", on ? x.value() : 0.0, [&] { return on ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  const double v = sigmoid(x.value());
  return unary(x, "sigmoid", v, [&] { return v * (1.0 - v); });
}

Var min(const Var& a, const Var& b) {
  Tape* t = tape_of(a, b);
  if (a.value() == b.value() && t) t->note_kink();
  return a.value() <= b.value() ? a : b;
}

Var max(const Var& a, const Var& b) {
  Tape* t = tape_of(a, b);
  if (a.value() == b.value() && t) t->note_kink();
  return a.value() >= b.value() ? a : b;
}

double exprel(double s) {
  if (std::abs(s) < 1e-6) return 1.0 - s / 2.0 + s * s / 6.0;
  return -std::expm1(-s) / s;
}

Var exprel(const Var& s) {
  const double x = s.value();
  const double v = exprel(x);
  return unary(s, "exprel", v, [&] {
    if (std::abs(x) < 1e-4) return -0.5 + x / 3.0 - x * x / 8.0;
    return (std::exp(-x) - v) / x;
  });
}

double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

Var squared_norm(std::span<const Var> v) {
  Tape* t = nullptr;
  double s = 0.0;
  std::vector<double> partials(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += v[i].value() * v[i].value();
    partials[i] = 2.0 * v[i].value();
    if (v[i].tape()) t = v[i].tape();
  }
  if (!t) {
    require_finite(s, "squared_norm");
    return s;
  }
  return t->record(s, "squared_norm", v, partials);
}

ValueAndGradient value_and_grad(const Objective& objective, std::span<const double> raw) {
  Tape tape;
  const auto inputs = tape.variables(raw);
  const Var out = objective(tape, inputs);
  return {out.value(), tape.gradient(out, inputs)};
}

std::vector<double> grad(const Objective& objective, std::span<const double> raw) {
  return value_and_grad(objective, raw).gradient;
}

double evaluate(const Objective& objective, std::span<const double> raw) {
  Tape tape;
  const auto inputs = tape.variables(raw);
  return objective(tape, inputs).value();
}

GradientReport check_gradient(const Objective& objective, std::span<const double> raw, double fd_step) {
  if (!(fd_step > 0.0)) throw ConfigError("finite-difference step must be positive");
  GradientReport report;

  Tape tape;
  const auto inputs = tape.variables(raw);
  const Var out = objective(tape, inputs);
  const double f0 = out.value();
  report.analytic = tape.gradient(out, inputs);
  const bool kinked = tape.kinks() > 0;

  std::vector<double> x(raw.begin(), raw.end());
  const std::size_t n = x.size();
  report.finite_difference.resize(n);
  report.relative_error.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double orig = x[i];
    x[i] = orig + fd_step;
    const double fp = evaluate(objective, x);
    x[i] = orig - fd_step;
    const double fm = evaluate(objective, x);
    x[i] = orig;

    const double fd = (fp - fm) / (2.0 * fd_step);
    report.finite_difference[i] = fd;
    const double a = report.analytic[i];
    const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
    report.relative_error[i] = err;

    if (kinked) {
      const double forward = (fp - f0) / fd_step;
      const double backward = (f0 - fm) / fd_step;
      const double gap = std::abs(forward - backward) / std::max({std::abs(forward), std::abs(backward), 1e-8});
      if (gap > 1e-3) {
        report.non_differentiable.push_back(i);
        continue;
      }
    }
    report.max_relative_error = std::max(report.max_relative_error, err);
  }
  return report;
}

}  // namespace snapmmd::ad
