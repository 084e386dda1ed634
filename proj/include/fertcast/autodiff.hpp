#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fertcast/special.hpp"

// Reverse-mode automatic differentiation on an explicit tape. A Var records
// its value and the index of the tape node that produced it; nodes store up
// to two parent indices with the local partial derivatives. Gradients are
// obtained by a single reverse sweep. One tape per thread of execution; the
// tape is reused across evaluations via clear().

namespace fertcast::ad {

class Tape {
 public:
  struct Node {
    double w1, w2;
    std::int32_t p1, p2;
  };

  std::int32_t push_leaf() {
    nodes_.push_back({0.0, 0.0, -1, -1});
    return static_cast<std::int32_t>(nodes_.size()) - 1;
  }
  std::int32_t push1(double w, std::int32_t p) {
    nodes_.push_back({w, 0.0, p, -1});
    return static_cast<std::int32_t>(nodes_.size()) - 1;
  }
  std::int32_t push2(double w1, std::int32_t p1, double w2, std::int32_t p2) {
    nodes_.push_back({w1, w2, p1, p2});
    return static_cast<std::int32_t>(nodes_.size()) - 1;
  }

  void clear() { nodes_.clear(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }
  std::size_t size() const { return nodes_.size(); }

  // Adjoints of every node with respect to the node at `out`; adj is resized
  // as needed and fully overwritten.
  void gradient(std::int32_t out, std::vector<double>& adj) const {
    adj.assign(nodes_.size(), 0.0);
    if (out < 0) return;
    adj[static_cast<std::size_t>(out)] = 1.0;
    for (std::int32_t i = out; i >= 0; --i) {
      const double a = adj[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.p1 >= 0) adj[static_cast<std::size_t>(n.p1)] += n.w1 * a;
      if (n.p2 >= 0) adj[static_cast<std::size_t>(n.p2)] += n.w2 * a;
    }
  }

 private:
  std::vector<Node> nodes_;
};

struct Var {
  Tape* tape = nullptr;
  std::int32_t idx = -1;  // -1: constant (not on the tape)
  double val = 0.0;

  Var() = default;
  Var(double v) : tape(nullptr), idx(-1), val(v) {}  // implicit: constants
  Var(Tape* t, std::int32_t i, double v) : tape(t), idx(i), val(v) {}
};

inline Var leaf(Tape& t, double v) { return Var(&t, t.push_leaf(), v); }

inline double value(double x) { return x; }
inline double value(const Var& x) { return x.val; }

namespace detail {
inline Tape* tape_of(const Var& a, const Var& b) { return a.tape ? a.tape : b.tape; }
}  // namespace detail

// --- arithmetic ---

inline Var operator+(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.val + b.val);
  return Var(t, t->push2(1.0, a.idx, 1.0, b.idx), a.val + b.val);
}
inline Var operator+(const Var& a, double b) {
  if (!a.tape) return Var(a.val + b);
  return Var(a.tape, a.tape->push1(1.0, a.idx), a.val + b);
}
inline Var operator+(double a, const Var& b) { return b + a; }

inline Var operator-(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.val - b.val);
  return Var(t, t->push2(1.0, a.idx, -1.0, b.idx), a.val - b.val);
}
inline Var operator-(const Var& a, double b) {
  if (!a.tape) return Var(a.val - b);
  return Var(a.tape, a.tape->push1(1.0, a.idx), a.val - b);
}
inline Var operator-(double a, const Var& b) {
  if (!b.tape) return Var(a - b.val);
  return Var(b.tape, b.tape->push1(-1.0, b.idx), a - b.val);
}
inline Var operator-(const Var& a) { return 0.0 - a; }

inline Var operator*(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.val * b.val);
  return Var(t, t->push2(b.val, a.idx, a.val, b.idx), a.val * b.val);
}
inline Var operator*(const Var& a, double b) {
  if (!a.tape) return Var(a.val * b);
  return Var(a.tape, a.tape->push1(b, a.idx), a.val * b);
}
inline Var operator*(double a, const Var& b) { return b * a; }

inline Var operator/(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  const double inv = 1.0 / b.val;
  if (!t) return Var(a.val * inv);
  return Var(t, t->push2(inv, a.idx, -a.val * inv * inv, b.idx), a.val * inv);
}
inline Var operator/(const Var& a, double b) { return a * (1.0 / b); }
inline Var operator/(double a, const Var& b) {
  const double inv = 1.0 / b.val;
  if (!b.tape) return Var(a * inv);
  return Var(b.tape, b.tape->push1(-a * inv * inv, b.idx), a * inv);
}

inline Var& operator+=(Var& a, const Var& b) { a = a + b; return a; }
inline Var& operator+=(Var& a, double b) { a = a + b; return a; }
inline Var& operator-=(Var& a, const Var& b) { a = a - b; return a; }
inline Var& operator-=(Var& a, double b) { a = a - b; return a; }
inline Var& operator*=(Var& a, const Var& b) { a = a * b; return a; }
inline Var& operator*=(Var& a, double b) { a = a * b; return a; }

// --- elementary functions ---

inline Var exp(const Var& a) {
  const double e = std::exp(a.val);
  if (!a.tape) return Var(e);
  return Var(a.tape, a.tape->push1(e, a.idx), e);
}
inline Var log(const Var& a) {
  const double v = std::log(a.val);
  if (!a.tape) return Var(v);
  return Var(a.tape, a.tape->push1(1.0 / a.val, a.idx), v);
}
inline Var log1p(const Var& a) {
  const double v = std::log1p(a.val);
  if (!a.tape) return Var(v);
  return Var(a.tape, a.tape->push1(1.0 / (1.0 + a.val), a.idx), v);
}
inline Var sqrt(const Var& a) {
  const double v = std::sqrt(a.val);
  if (!a.tape) return Var(v);
  return Var(a.tape, a.tape->push1(0.5 / v, a.idx), v);
}
inline Var pow(const Var& a, double c) {
  const double v = std::pow(a.val, c);
  if (!a.tape) return Var(v);
  return Var(a.tape, a.tape->push1(c * std::pow(a.val, c - 1.0), a.idx), v);
}
inline Var lgamma(const Var& a) {
  const double v = std::lgamma(a.val);
  if (!a.tape) return Var(v);
  return Var(a.tape, a.tape->push1(fertcast::digamma(a.val), a.idx), v);
}

// logistic(x) = 1/(1+exp(-x)); single node, derivative s(1-s)
inline Var logistic(const Var& a) {
  const double s = fertcast::logistic(a.val);
  if (!a.tape) return Var(s);
  return Var(a.tape, a.tape->push1(s * (1.0 - s), a.idx), s);
}

// log(1+exp(x)); derivative logistic(x)
inline Var log1pexp(const Var& a) {
  const double v = fertcast::log1pexp(a.val);
  if (!a.tape) return Var(v);
  return Var(a.tape, a.tape->push1(fertcast::logistic(a.val), a.idx), v);
}

}  // namespace fertcast::ad
