#pragma once

// Scalar reverse-mode differentiation.
//
// A Tape records every operation whose result depends on a tape variable.
// Values that never touched a tape are plain constants (tape pointer null)
// and cost nothing to record, so generic code can freely mix Var with
// double coefficients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffnea {

class Tape;

class Var {
 public:
  Var() = default;
  // Implicit on purpose: constants promote so that `T x = 0.0` works for T = Var.
  Var(double value) : value_(value) {  // NOLINT(google-explicit-constructor)
    if (!std::isfinite(value)) throw std::domain_error("Var: non-finite constant");
  }

  double value() const { return value_; }
  std::int32_t node() const { return node_; }
  const Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

 private:
  friend class Tape;
  Var(double value, std::int32_t node, Tape* tape) : value_(value), node_(node), tape_(tape) {}

  double value_ = 0.0;
  std::int32_t node_ = -1;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  struct Node {
    std::int32_t lhs;
    std::int32_t rhs;
    double dlhs;
    double drhs;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void reserve(std::size_t n) {
    nodes_.reserve(n);
  }

  // Leaf node; its adjoint after backward() is d(root)/d(value).
  Var variable(double value) {
    if (!std::isfinite(value)) throw std::domain_error("Tape::variable: non-finite value");
    return push(value, -1, 0.0, -1, 0.0);
  }

  std::size_t size() const { return nodes_.size(); }

  // Drops every node. Vars created before the call become dangling.
  void clear() {
    nodes_.clear();
    adjoints_.clear();
  }

  void zero_adjoints() { std::fill(adjoints_.begin(), adjoints_.end(), 0.0); }

  // Reverse sweep from root. Leaf adjoints accumulate across calls; interior
  // adjoints are recomputed on every call.
  void backward(const Var& root) {
    if (root.tape_ != this || root.node_ < 0 ||
        static_cast<std::size_t>(root.node_) >= nodes_.size()) {
      throw std::invalid_argument("Tape::backward: root is not a node of this tape");
    }
    adjoints_.resize(nodes_.size(), 0.0);
    const auto top = static_cast<std::size_t>(root.node_);
    for (std::size_t i = 0; i <= top; ++i) {
      if (!is_leaf(i)) adjoints_[i] = 0.0;
    }
    adjoints_[top] += 1.0;
    for (std::size_t k = top + 1; k-- > 0;) {
      const Node& n = nodes_[k];
      if (n.lhs < 0) continue;
      const double a = adjoints_[k];
      if (a == 0.0) continue;
      adjoints_[n.lhs] += n.dlhs * a;
      if (n.rhs >= 0) adjoints_[n.rhs] += n.drhs * a;
    }
  }

  double adjoint(const Var& v) const {
    if (v.tape_ != this) return 0.0;
    const auto i = static_cast<std::size_t>(v.node_);
    return i < adjoints_.size() ? adjoints_[i] : 0.0;
  }

  std::vector<double> gradient(std::span<const Var> leaves) const {
    std::vector<double> g(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) g[i] = adjoint(leaves[i]);
    return g;
  }

  // Records a result with one or two (possibly constant) operands.
  static Var record(double value, const Var& a, double da) {
    check_result(value);
    if (a.tape_ == nullptr) return Var(value);
    return a.tape_->push(value, a.node_, da, -1, 0.0);
  }

  static Var record(double value, const Var& a, double da, const Var& b, double db) {
    check_result(value);
    if (a.tape_ == nullptr && b.tape_ == nullptr) return Var(value);
    if (a.tape_ == nullptr) return b.tape_->push(value, b.node_, db, -1, 0.0);
    if (b.tape_ == nullptr) return a.tape_->push(value, a.node_, da, -1, 0.0);
    if (a.tape_ != b.tape_) throw std::logic_error("Var: operands recorded on different tapes");
    return a.tape_->push(value, a.node_, da, b.node_, db);
  }

 private:
  static void check_result(double value) {
    if (!std::isfinite(value)) throw std::domain_error("Var: operation produced a non-finite value");
  }

  bool is_leaf(std::size_t i) const { return nodes_[i].lhs < 0; }

  Var push(double value, std::int32_t lhs, double dlhs, std::int32_t rhs, double drhs) {
    if (!std::isfinite(dlhs) || !std::isfinite(drhs)) {
      throw std::domain_error("Var: operation has a non-finite local derivative");
    }
    nodes_.push_back({lhs, rhs, dlhs, drhs});
    return Var(value, static_cast<std::int32_t>(nodes_.size() - 1), this);
  }

  std::vector<Node> nodes_;
  std::vector<double> adjoints_;
};

inline Var operator+(const Var& a, const Var& b) {
  return Tape::record(a.value() + b.value(), a, 1.0, b, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return Tape::record(a.value() - b.value(), a, 1.0, b, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return Tape::record(a.value() * b.value(), a, b.value(), b, a.value());
}
inline Var operator/(const Var& a, const Var& b) {
  if (b.value() == 0.0) throw std::domain_error("Var: division by zero");
  const double inv = 1.0 / b.value();
  const double q = a.value() * inv;
  return Tape::record(q, a, inv, b, -q * inv);
}
inline Var operator-(const Var& a) { return Tape::record(-a.value(), a, -1.0); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }

inline Var sin(const Var& x) { return Tape::record(std::sin(x.value()), x, std::cos(x.value())); }
inline Var cos(const Var& x) { return Tape::record(std::cos(x.value()), x, -std::sin(x.value())); }
inline Var exp(const Var& x) {
  const double e = std::exp(x.value());
  return Tape::record(e, x, e);
}
inline Var log(const Var& x) {
  if (!(x.value() > 0.0)) throw std::domain_error("Var: log of non-positive value");
  return Tape::record(std::log(x.value()), x, 1.0 / x.value());
}
inline Var sqrt(const Var& x) {
  if (x.value() < 0.0) throw std::domain_error("Var: sqrt of negative value");
  const double s = std::sqrt(x.value());
  if (s == 0.0) {
    if (x.is_constant()) return Var(0.0);
    throw std::domain_error("Var: sqrt derivative undefined at 0");
  }
  return Tape::record(s, x, 0.5 / s);
}
inline Var square(const Var& x) { return Tape::record(x.value() * x.value(), x, 2.0 * x.value()); }

// Plain overloads so unqualified calls in generic code resolve for T = double.
inline double sin(double x) { return std::sin(x); }
inline double cos(double x) { return std::cos(x); }
inline double exp(double x) { return std::exp(x); }
inline double log(double x) { return std::log(x); }
inline double sqrt(double x) { return std::sqrt(x); }
inline double square(double x) { return x * x; }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline Var sigmoid(const Var& x) {
  const double s = sigmoid(x.value());
  return Tape::record(s, x, s * (1.0 - s));
}

inline double value(double x) { return x; }
inline double value(const Var& x) { return x.value(); }

// Central-difference check of the autodiff gradient of a scalar function.
// `f` must be callable with std::span<const double> and std::span<const Var>.
// Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
template <class F>
double grad_check(F&& f, std::span<const double> x, double eps) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(x.size());
  for (double xi : x) leaves.push_back(tape.variable(xi));
  const Var y = f(std::span<const Var>(leaves));

  std::vector<double> analytic(x.size(), 0.0);
  if (!y.is_constant()) {
    tape.backward(y);
    analytic = tape.gradient(leaves);
  }

  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(std::span<const double>(probe));
    probe[i] = x[i] - eps;
    const double down = f(std::span<const double>(probe));
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("grad_check: non-finite value at probe " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace diffnea
