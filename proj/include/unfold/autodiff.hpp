#pragma once

// Minimal reverse-mode scalar tape. Covers the handful of elementary
// operations the unfolded inference layers are built from.

#include <cmath>
#include <cstddef>
#include <vector>

#include "unfold/numerics.hpp"

namespace unfold::ad {

class Tape {
 public:
  struct Node {
    int a, b;        // parent indices, -1 when absent
    double wa, wb;   // local partials
  };

  int add(int a, double wa, int b, double wb) {
    nodes_.push_back({a, b, wa, wb});
    return static_cast<int>(nodes_.size()) - 1;
  }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t n) const { return nodes_[n]; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Value plus tape index. Default-constructed or double-constructed values are
/// constants that do not participate in differentiation.
class Rev {
 public:
  Rev() = default;
  Rev(double v) : v_(v) {}  // NOLINT: constants convert implicitly
  Rev(Tape* tape, double v, int index) : v_(v), idx_(index), tape_(tape) {}

  static Rev leaf(Tape& tape, double v) { return Rev(&tape, v, tape.add(-1, 0, -1, 0)); }

  double value() const { return v_; }
  int index() const { return idx_; }
  Tape* tape() const { return tape_; }

 private:
  double v_ = 0.0;
  int idx_ = -1;
  Tape* tape_ = nullptr;
};

namespace detail {
inline Rev make(Tape* tape, double v, const Rev& a, double wa, const Rev& b, double wb) {
  if (!tape) return Rev(v);
  return Rev(tape, v, tape->add(a.index(), wa, b.index(), wb));
}
inline Tape* tape_of(const Rev& a, const Rev& b) {
  return a.tape() ? a.tape() : b.tape();
}
}  // namespace detail

inline Rev operator+(const Rev& a, const Rev& b) {
  return detail::make(detail::tape_of(a, b), a.value() + b.value(), a, 1.0, b, 1.0);
}
inline Rev operator-(const Rev& a, const Rev& b) {
  return detail::make(detail::tape_of(a, b), a.value() - b.value(), a, 1.0, b, -1.0);
}
inline Rev operator-(const Rev& a) { return detail::make(a.tape(), -a.value(), a, -1.0, Rev(), 0.0); }
inline Rev operator*(const Rev& a, const Rev& b) {
  return detail::make(detail::tape_of(a, b), a.value() * b.value(), a, b.value(), b,
                      a.value());
}
inline Rev operator/(const Rev& a, const Rev& b) {
  const double inv = 1.0 / b.value();
  return detail::make(detail::tape_of(a, b), a.value() * inv, a, inv, b,
                      -a.value() * inv * inv);
}

inline Rev operator+(const Rev& a, double b) { return a + Rev(b); }
inline Rev operator+(double a, const Rev& b) { return Rev(a) + b; }
inline Rev operator-(const Rev& a, double b) { return a - Rev(b); }
inline Rev operator-(double a, const Rev& b) { return Rev(a) - b; }
inline Rev operator*(const Rev& a, double b) { return a * Rev(b); }
inline Rev operator*(double a, const Rev& b) { return Rev(a) * b; }
inline Rev operator/(const Rev& a, double b) { return a / Rev(b); }
inline Rev operator/(double a, const Rev& b) { return Rev(a) / b; }

inline Rev exp(const Rev& a) {
  const double e = std::exp(a.value());
  return detail::make(a.tape(), e, a, e, Rev(), 0.0);
}
inline Rev log(const Rev& a) {
  return detail::make(a.tape(), std::log(a.value()), a, 1.0 / a.value(), Rev(), 0.0);
}
inline Rev pow(const Rev& a, double p) {
  const double v = std::pow(a.value(), p);
  return detail::make(a.tape(), v, a, p * std::pow(a.value(), p - 1.0), Rev(), 0.0);
}
inline Rev sqrt(const Rev& a) { return pow(a, 0.5); }
inline Rev logistic(const Rev& a) {
  const double s = unfold::logistic(a.value());
  return detail::make(a.tape(), s, a, s * (1.0 - s), Rev(), 0.0);
}

/// Adjoints of every tape node with respect to `output`.
inline std::vector<double> gradient(const Tape& tape, const Rev& output) {
  std::vector<double> adj(tape.size(), 0.0);
  if (output.index() >= 0) adj[static_cast<std::size_t>(output.index())] = 1.0;
  for (std::size_t n = tape.size(); n-- > 0;) {
    const auto& nd = tape.node(n);
    const double a = adj[n];
    if (a == 0.0) continue;
    if (nd.a >= 0) adj[static_cast<std::size_t>(nd.a)] += nd.wa * a;
    if (nd.b >= 0) adj[static_cast<std::size_t>(nd.b)] += nd.wb * a;
  }
  return adj;
}

}  // namespace unfold::ad
