#pragma once

// Reverse-mode differentiation over an explicit tape, the flat parameter
// vector the model is trained on, a central-difference checker, and the
// projected SGD update.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "minitx/error.hpp"

namespace minitx {

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Named, disjoint index ranges covering a flat parameter vector.
class Layout {
 public:
  void add(std::string name, std::size_t size) {
    if (find(name) != nullptr) throw Error("duplicate layout segment: " + name);
    segments_.push_back({std::move(name), size_, size});
    size_ += size;
  }

  std::size_t size() const { return size_; }
  const std::vector<Segment>& segments() const { return segments_; }

  const Segment* find(const std::string& name) const {
    for (const auto& s : segments_) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  const Segment& at(const std::string& name) const {
    const Segment* s = find(name);
    if (s == nullptr) throw Error("unknown layout segment: " + name);
    return *s;
  }

  /// Segment containing flat index `i`.
  const Segment& segment_of(std::size_t i) const {
    for (const auto& s : segments_) {
      if (i >= s.offset && i < s.offset + s.size) return s;
    }
    throw Error("index outside layout: " + std::to_string(i));
  }

  bool operator==(const Layout& other) const {
    if (size_ != other.size_ || segments_.size() != other.segments_.size()) return false;
    for (std::size_t k = 0; k < segments_.size(); ++k) {
      const auto& a = segments_[k];
      const auto& b = other.segments_[k];
      if (a.name != b.name || a.offset != b.offset || a.size != b.size) return false;
    }
    return true;
  }

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

/// Flat list of reals together with the layout naming its segments.
class ParamVector {
 public:
  ParamVector() : layout_(std::make_shared<Layout>()) {}

  explicit ParamVector(std::shared_ptr<const Layout> layout)
      : layout_(std::move(layout)), values_(layout_->size(), 0.0) {}

  ParamVector(std::shared_ptr<const Layout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->size()) {
      throw Error("parameter vector length " + std::to_string(values_.size()) +
                  " does not match layout size " + std::to_string(layout_->size()));
    }
  }

  /// Unnamed single-segment vector, handy for ad-hoc losses.
  static ParamVector plain(std::vector<double> values) {
    auto layout = std::make_shared<Layout>();
    layout->add("theta", values.size());
    return ParamVector(std::move(layout), std::move(values));
  }

  std::size_t size() const { return values_.size(); }
  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const { return layout_; }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> segment(const std::string& name) const {
    const auto& s = layout_->at(name);
    return std::span<const double>(values_).subspan(s.offset, s.size);
  }
  std::span<double> segment(const std::string& name) {
    const auto& s = layout_->at(name);
    return std::span<double>(values_).subspan(s.offset, s.size);
  }

  bool same_layout(const ParamVector& other) const {
    return layout_ == other.layout_ || *layout_ == *other.layout_;
  }

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> values_;
};

namespace ad {

class Tape;

/// Scalar that records the operations applied to it on a Tape. A Var without
/// a tape is a constant and contributes no edges.
class Var {
 public:
  Var() = default;
  Var(double constant) : value_(constant) {}  // NOLINT(google-explicit-constructor)

  double value() const { return value_; }
  std::uint32_t index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t index, double value) : tape_(tape), index_(index), value_(value) {}

  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
  double value_ = 0.0;
};

/// Append-only record of a scalar computation. Node i owns the edges
/// [edge_end_[i-1], edge_end_[i]) pointing to its parents with local partials.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Removes all nodes but keeps allocated capacity.
  void clear() {
    values_.clear();
    edge_end_.clear();
    parents_.clear();
    partials_.clear();
  }

  std::size_t size() const { return values_.size(); }

  Var variable(double value) { return emit(value); }

  /// Adds an edge to the node under construction. Constants are skipped.
  void edge(const Var& parent, double partial) {
    if (parent.tape_ == nullptr) return;
    parents_.push_back(parent.index_);
    partials_.push_back(partial);
  }

  /// Closes the node under construction with the edges added since the last
  /// emit.
  Var emit(double value) {
    const auto index = static_cast<std::uint32_t>(values_.size());
    values_.push_back(value);
    edge_end_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return Var(this, index, value);
  }

  double value(std::uint32_t node) const { return values_[node]; }

  /// Adjoints of every node with respect to `output`.
  std::vector<double> adjoints(const Var& output) const {
    std::vector<double> adj;
    adjoints(output, adj);
    return adj;
  }

  void adjoints(const Var& output, std::vector<double>& adj) const {
    adj.assign(values_.size(), 0.0);
    if (output.tape_ != this) return;
    adj[output.index_] = 1.0;
    for (std::size_t i = output.index_ + 1; i-- > 0;) {
      const double a = adj[i];
      if (a == 0.0) continue;
      const std::uint32_t begin = i == 0 ? 0 : edge_end_[i - 1];
      const std::uint32_t end = edge_end_[i];
      for (std::uint32_t e = begin; e < end; ++e) adj[parents_[e]] += a * partials_[e];
    }
  }

  /// Marks every node that `node` depends on, including itself.
  std::vector<bool> ancestors(std::uint32_t node) const {
    std::vector<bool> mark(values_.size(), false);
    mark[node] = true;
    for (std::size_t i = node + 1; i-- > 0;) {
      if (!mark[i]) continue;
      const std::uint32_t begin = i == 0 ? 0 : edge_end_[i - 1];
      for (std::uint32_t e = begin; e < edge_end_[i]; ++e) mark[parents_[e]] = true;
    }
    return mark;
  }

  /// First node whose value is NaN or infinite, or size() if none.
  std::size_t first_non_finite() const {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) return i;
    }
    return values_.size();
  }

 private:
  std::vector<double> values_;
  std::vector<std::uint32_t> edge_end_;
  std::vector<std::uint32_t> parents_;
  std::vector<double> partials_;
};

namespace detail {

inline Tape* common_tape(const Var& a, const Var& b) {
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta != nullptr && tb != nullptr && ta != tb) throw Error("operands recorded on different tapes");
  return ta != nullptr ? ta : tb;
}

}  // namespace detail

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

inline Var operator+(const Var& a, const Var& b) {
  Tape* t = detail::common_tape(a, b);
  if (t == nullptr) return Var(a.value() + b.value());
  t->edge(a, 1.0);
  t->edge(b, 1.0);
  return t->emit(a.value() + b.value());
}

inline Var operator-(const Var& a, const Var& b) {
  Tape* t = detail::common_tape(a, b);
  if (t == nullptr) return Var(a.value() - b.value());
  t->edge(a, 1.0);
  t->edge(b, -1.0);
  return t->emit(a.value() - b.value());
}

inline Var operator*(const Var& a, const Var& b) {
  Tape* t = detail::common_tape(a, b);
  if (t == nullptr) return Var(a.value() * b.value());
  t->edge(a, b.value());
  t->edge(b, a.value());
  return t->emit(a.value() * b.value());
}

inline Var operator/(const Var& a, const Var& b) {
  Tape* t = detail::common_tape(a, b);
  const double q = a.value() / b.value();
  if (t == nullptr) return Var(q);
  t->edge(a, 1.0 / b.value());
  t->edge(b, -q / b.value());
  return t->emit(q);
}

inline Var operator-(const Var& a) {
  if (a.is_constant()) return Var(-a.value());
  Tape* t = a.tape();
  t->edge(a, -1.0);
  return t->emit(-a.value());
}

inline Var operator+(const Var& a, double b) {
  if (a.is_constant()) return Var(a.value() + b);
  a.tape()->edge(a, 1.0);
  return a.tape()->emit(a.value() + b);
}
inline Var operator+(double a, const Var& b) { return b + a; }

inline Var operator-(const Var& a, double b) { return a + (-b); }

inline Var operator-(double a, const Var& b) {
  if (b.is_constant()) return Var(a - b.value());
  b.tape()->edge(b, -1.0);
  return b.tape()->emit(a - b.value());
}

inline Var operator*(const Var& a, double b) {
  if (a.is_constant()) return Var(a.value() * b);
  a.tape()->edge(a, b);
  return a.tape()->emit(a.value() * b);
}
inline Var operator*(double a, const Var& b) { return b * a; }

inline Var operator/(const Var& a, double b) { return a * (1.0 / b); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  if (a.is_constant()) return Var(e);
  a.tape()->edge(a, e);
  return a.tape()->emit(e);
}

inline Var log(const Var& a) {
  const double l = std::log(a.value());
  if (a.is_constant()) return Var(l);
  a.tape()->edge(a, 1.0 / a.value());
  return a.tape()->emit(l);
}

/// a^exponent for a constant real exponent.
inline Var pow(const Var& a, double exponent) {
  const double v = std::pow(a.value(), exponent);
  if (a.is_constant()) return Var(v);
  double d = 0.0;
  if (exponent == 0.0) {
    d = 0.0;
  } else if (exponent == 1.0) {
    d = 1.0;
  } else {
    d = exponent * std::pow(a.value(), exponent - 1.0);
  }
  a.tape()->edge(a, d);
  return a.tape()->emit(v);
}

/// Σ a_k, one node.
inline Var sum(std::span<const Var> a) {
  Tape* t = nullptr;
  double s = 0.0;
  for (const auto& x : a) {
    s += x.value();
    if (t == nullptr) t = x.tape();
  }
  if (t == nullptr) return Var(s);
  for (const auto& x : a) t->edge(x, 1.0);
  return t->emit(s);
}

/// Σ w_k x_k with constant x, one node.
inline Var dot(std::span<const Var> w, std::span<const double> x) {
  Tape* t = nullptr;
  double s = 0.0;
  const std::size_t n = std::min(w.size(), x.size());
  for (std::size_t k = 0; k < n; ++k) {
    s += w[k].value() * x[k];
    if (t == nullptr) t = w[k].tape();
  }
  if (t == nullptr) return Var(s);
  for (std::size_t k = 0; k < n; ++k) t->edge(w[k], x[k]);
  return t->emit(s);
}

inline Var dot(std::span<const double> x, std::span<const Var> w) { return dot(w, x); }

/// Σ a_k b_k, one node.
inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  Tape* t = nullptr;
  double s = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t k = 0; k < n; ++k) {
    s += a[k].value() * b[k].value();
    if (t == nullptr) t = a[k].tape() != nullptr ? a[k].tape() : b[k].tape();
  }
  if (t == nullptr) return Var(s);
  for (std::size_t k = 0; k < n; ++k) {
    t->edge(a[k], b[k].value());
    t->edge(b[k], a[k].value());
  }
  return t->emit(s);
}

// Plain double counterparts so templated model code reads the same for both
// scalar types.
inline double sum(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x;
  return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Gradient, finite-difference check, SGD step
// ---------------------------------------------------------------------------

/// Floor of the relative-error denominator, per unit of loss: coordinates
/// with |gradient| below 1e-4·max(1, |loss|) are compared on that scale.
inline constexpr double kGradCheckAbsFloor = 1e-4;

struct GradReport {
  ParamVector analytic;
  ParamVector numeric;
  double max_rel_err = 0.0;
};

namespace detail {

inline std::string segments_of(const Layout& layout, const std::vector<bool>& marked, std::size_t n_leaves) {
  std::set<std::string> names;
  for (std::size_t i = 0; i < n_leaves && i < marked.size(); ++i) {
    if (marked[i]) names.insert(layout.segment_of(i).name);
  }
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out.empty() ? "<none>" : out;
}

}  // namespace detail

/// Exact reverse-mode gradient of `loss` at `theta`. `loss` is called once
/// with a span of tape variables and must return an ad::Var. The tape is
/// cleared first and may be reused across calls to avoid reallocation.
/// Writes the loss value to `value_out` when given.
template <class Loss>
ParamVector gradient(Loss&& loss, const ParamVector& theta, ad::Tape& tape, double* value_out = nullptr) {
  tape.clear();
  std::vector<ad::Var> leaves;
  leaves.reserve(theta.size());
  for (double v : theta.values()) leaves.push_back(tape.variable(v));

  const ad::Var out = loss(std::span<const ad::Var>(leaves));
  if (value_out != nullptr) *value_out = out.value();

  const auto& layout = theta.layout();
  if (!std::isfinite(out.value())) {
    const std::size_t bad = tape.first_non_finite();
    std::string where = "<unknown>";
    if (bad < tape.size()) {
      where = detail::segments_of(layout, tape.ancestors(static_cast<std::uint32_t>(bad)), theta.size());
    }
    throw NumericError("non-finite intermediate value depending on parameter segment(s): " + where);
  }

  ParamVector grad(theta.layout_ptr());
  if (out.is_constant()) return grad;
  std::vector<double> adj;
  tape.adjoints(out, adj);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!std::isfinite(adj[i])) {
      throw NumericError("non-finite gradient in parameter segment " + layout.segment_of(i).name);
    }
    grad[i] = adj[i];
  }
  return grad;
}

template <class Loss>
ParamVector gradient(Loss&& loss, const ParamVector& theta, double* value_out = nullptr) {
  ad::Tape tape;
  return gradient(std::forward<Loss>(loss), theta, tape, value_out);
}

/// Compares the analytic gradient against coordinate-wise central
/// differences. `loss` must be callable with both std::span<const ad::Var>
/// and std::span<const double>.
template <class Loss>
GradReport fd_check(Loss&& loss, const ParamVector& theta, double step) {
  if (!(step > 0.0)) throw Error("fd_check: step must be positive");

  double value = 0.0;
  GradReport report{gradient(loss, theta, &value), ParamVector(theta.layout_ptr()), 0.0};
  const double floor = kGradCheckAbsFloor * std::max(1.0, std::abs(value));

  std::vector<double> probe(theta.values().begin(), theta.values().end());
  auto eval = [&]() {
    const double v = loss(std::span<const double>(probe));
    if (!std::isfinite(v)) throw NumericError("fd_check: loss is non-finite at a probe point");
    return v;
  };
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval();
    probe[i] = orig - step;
    const double down = eval();
    probe[i] = orig;
    report.numeric[i] = (up - down) / (2.0 * step);
  }

  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double a = report.analytic[i];
    const double n = report.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    report.max_rel_err = std::max(report.max_rel_err, std::abs(a - n) / denom);
  }
  return report;
}

/// theta - lr * grad, then clamps every coordinate of the named segments to
/// be nonnegative.
inline ParamVector sgd_step(const ParamVector& theta, const ParamVector& grad, double lr,
                            const std::set<std::string>& nonneg_segments = {}) {
  if (!(lr >= 0.0)) throw Error("sgd_step: learning rate must be nonnegative");
  if (!theta.same_layout(grad)) throw Error("sgd_step: parameter and gradient layouts differ");

  ParamVector next = theta;
  if (lr != 0.0) {
    for (std::size_t i = 0; i < next.size(); ++i) next[i] -= lr * grad[i];
  }
  for (const auto& name : nonneg_segments) {
    for (double& v : next.segment(name)) v = std::max(0.0, v);
  }
  return next;
}

}  // namespace minitx
