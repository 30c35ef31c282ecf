#pragma once

// Forward pass of the MiniTransformer: pairwise attention kernel with
// temporal decay, per-head transformed values, horizon-decayed cumulants and
// the linear output head. Everything is templated on the scalar type so the
// same code evaluates plain doubles or records onto an ad::Tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "minitx/autodiff.hpp"
#include "minitx/error.hpp"

namespace minitx {

/// One time point. x[0] is the constant element 1, x[1..p] are the variables.
struct Observation {
  std::vector<double> x;
  double t = 0.0;

  std::size_t p() const { return x.empty() ? 0 : x.size() - 1; }
  std::span<const double> variables() const { return std::span<const double>(x).subspan(1); }
};

inline Observation make_observation(std::span<const double> variables, double t) {
  Observation o;
  o.x.reserve(variables.size() + 1);
  o.x.push_back(1.0);
  o.x.insert(o.x.end(), variables.begin(), variables.end());
  o.t = t;
  return o;
}

/// Ordered observations of one individual.
struct Sequence {
  std::string id;
  std::vector<Observation> obs;

  std::size_t size() const { return obs.size(); }
  std::size_t p() const { return obs.empty() ? 0 : obs.front().p(); }
};

/// Throws if the observation/sequence invariants do not hold.
inline void validate(const Sequence& seq) {
  for (std::size_t i = 0; i < seq.obs.size(); ++i) {
    const auto& o = seq.obs[i];
    if (o.x.empty() || o.x[0] != 1.0) throw Error("sequence " + seq.id + ": constant element must be 1");
    if (o.p() != seq.p()) throw Error("sequence " + seq.id + ": inconsistent number of variables");
    if (!std::isfinite(o.t)) throw Error("sequence " + seq.id + ": non-finite timestamp");
    for (double v : o.x) {
      if (!std::isfinite(v)) throw Error("sequence " + seq.id + ": non-finite value");
    }
    if (i > 0 && !(o.t > seq.obs[i - 1].t)) {
      throw Error("sequence " + seq.id + ": timestamps must be strictly increasing");
    }
  }
}

template <class S>
struct HeadParamsT {
  std::vector<S> query;
  std::vector<S> key;
  std::vector<S> value;
};

/// Learnable quantities plus the fixed decay exponent gamma.
template <class S>
struct ModelParamsT {
  std::vector<HeadParamsT<S>> heads;
  std::vector<std::vector<S>> w_cum;  // C vectors of length H
  S w_dist{};
  S w_horizon{};
  double gamma = 5.0;
  std::vector<S> beta0;              // q
  std::vector<std::vector<S>> beta;  // q vectors of length C

  std::size_t p() const { return heads.empty() ? 0 : heads.front().query.size() - 1; }
  std::size_t n_heads() const { return heads.size(); }
  std::size_t n_cumulants() const { return w_cum.size(); }
  std::size_t q() const { return beta0.size(); }
};

using HeadParams = HeadParamsT<double>;
using ModelParams = ModelParamsT<double>;

/// Shape of a model: variables, heads, cumulants, outputs.
struct Dims {
  std::size_t p = 0;
  std::size_t heads = 0;
  std::size_t cumulants = 0;
  std::size_t q = 0;

  bool operator==(const Dims&) const = default;
};

template <class S>
Dims dims_of(const ModelParamsT<S>& m) {
  return {m.p(), m.n_heads(), m.n_cumulants(), m.q()};
}

inline void validate(const ModelParams& m) {
  const Dims d = dims_of(m);
  if (d.heads == 0 || d.cumulants == 0 || d.q == 0) throw Error("model needs at least one head, cumulant and output");
  if (!(m.gamma > 0.0)) throw Error("gamma must be positive");
  if (!(m.w_dist >= 0.0) || !(m.w_horizon >= 0.0)) throw Error("decay rates must be nonnegative");
  auto finite = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  for (const auto& h : m.heads) {
    if (h.query.size() != d.p + 1 || h.key.size() != d.p + 1 || h.value.size() != d.p + 1) {
      throw Error("head projections must have length p+1");
    }
    if (!finite(h.query) || !finite(h.key) || !finite(h.value)) throw Error("non-finite head parameter");
  }
  for (const auto& w : m.w_cum) {
    if (w.size() != d.heads || !finite(w)) throw Error("cumulant weights must be finite with length H");
  }
  if (m.beta.size() != d.q) throw Error("beta must have q rows");
  for (const auto& b : m.beta) {
    if (b.size() != d.cumulants || !finite(b)) throw Error("beta rows must be finite with length C");
  }
  if (!finite(m.beta0)) throw Error("non-finite intercept");
}

// ---------------------------------------------------------------------------
// Flat parameter layout
// ---------------------------------------------------------------------------

namespace seg {
inline std::string query(std::size_t h) { return "head" + std::to_string(h) + ".query"; }
inline std::string key(std::size_t h) { return "head" + std::to_string(h) + ".key"; }
inline std::string value(std::size_t h) { return "head" + std::to_string(h) + ".value"; }
inline std::string cum(std::size_t c) { return "cum" + std::to_string(c); }
inline std::string beta(std::size_t r) { return "out" + std::to_string(r) + ".beta"; }
inline const std::string kDist = "w_dist";
inline const std::string kHorizon = "w_horizon";
inline const std::string kBeta0 = "intercept";
}  // namespace seg

/// Deterministic segment order: per head query/key/value, cumulant mixing
/// vectors, the two decay rates, intercepts, per-output coefficients.
inline std::shared_ptr<const Layout> model_layout(const Dims& d) {
  auto layout = std::make_shared<Layout>();
  for (std::size_t h = 0; h < d.heads; ++h) {
    layout->add(seg::query(h), d.p + 1);
    layout->add(seg::key(h), d.p + 1);
    layout->add(seg::value(h), d.p + 1);
  }
  for (std::size_t c = 0; c < d.cumulants; ++c) layout->add(seg::cum(c), d.heads);
  layout->add(seg::kDist, 1);
  layout->add(seg::kHorizon, 1);
  layout->add(seg::kBeta0, d.q);
  for (std::size_t r = 0; r < d.q; ++r) layout->add(seg::beta(r), d.cumulants);
  return layout;
}

/// Decay segments that must stay nonnegative during training.
inline const std::set<std::string>& nonneg_segments() {
  static const std::set<std::string> names{seg::kDist, seg::kHorizon};
  return names;
}

template <class S>
ModelParamsT<S> unpack(std::span<const S> flat, const Dims& d, double gamma) {
  const std::size_t expected = model_layout(d)->size();
  if (flat.size() != expected) throw Error("flat parameter length does not match model dimensions");
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    std::vector<S> out(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                       flat.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return out;
  };
  ModelParamsT<S> m;
  m.gamma = gamma;
  m.heads.resize(d.heads);
  for (auto& h : m.heads) {
    h.query = take(d.p + 1);
    h.key = take(d.p + 1);
    h.value = take(d.p + 1);
  }
  m.w_cum.resize(d.cumulants);
  for (auto& w : m.w_cum) w = take(d.heads);
  m.w_dist = flat[pos++];
  m.w_horizon = flat[pos++];
  m.beta0 = take(d.q);
  m.beta.resize(d.q);
  for (auto& b : m.beta) b = take(d.cumulants);
  return m;
}

inline ModelParams unpack(const ParamVector& theta, const Dims& d, double gamma) {
  return unpack<double>(theta.values(), d, gamma);
}

inline ParamVector pack(const ModelParams& m) {
  const Dims d = dims_of(m);
  std::vector<double> flat;
  flat.reserve(model_layout(d)->size());
  auto put = [&](const std::vector<double>& v) { flat.insert(flat.end(), v.begin(), v.end()); };
  for (const auto& h : m.heads) {
    put(h.query);
    put(h.key);
    put(h.value);
  }
  for (const auto& w : m.w_cum) put(w);
  flat.push_back(m.w_dist);
  flat.push_back(m.w_horizon);
  put(m.beta0);
  for (const auto& b : m.beta) put(b);
  return ParamVector(model_layout(d), std::move(flat));
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void require_finite(const S& v, const char* what) {
  if (!std::isfinite(ad::value_of(v))) throw NumericError(std::string(what) + " is not finite");
}

template <class S>
std::span<const S> cspan(const std::vector<S>& v) {
  return std::span<const S>(v);
}

}  // namespace detail

/// Natural log of the attention kernel between observations xi and xl:
/// (xi·w_query)(xl·w_key) - (w_dist·|ti - tl|)^gamma.
template <class S>
S log_kernel(const Observation& xi, const Observation& xl, const HeadParamsT<S>& head, const S& w_dist,
             double gamma) {
  using ad::dot;
  using ad::pow;
  using std::pow;
  if (xi.x.size() != xl.x.size()) throw Error("log_kernel: observations differ in p");
  const S content = dot(detail::cspan(head.query), std::span<const double>(xi.x)) *
                    dot(detail::cspan(head.key), std::span<const double>(xl.x));
  const S decay = pow(w_dist * std::abs(xi.t - xl.t), gamma);
  const S out = content - decay;
  detail::require_finite(out, "log_kernel");
  return out;
}

/// Transformed values x̃ for every position and head, row-major T×H.
/// Row i is the attention-weighted mean of value projections over positions
/// 0..i, with the softmax taken in log space after subtracting the row max.
template <class S>
std::vector<S> transform_all(std::span<const Observation> obs, const ModelParamsT<S>& params) {
  using ad::dot;
  using ad::exp;
  using ad::pow;
  using ad::sum;
  using std::exp;
  using std::pow;

  const std::size_t T = obs.size();
  const std::size_t H = params.n_heads();
  std::vector<S> out(T * H);
  if (T == 0) return out;

  // (w·|Δt|)^γ = w^γ·|Δt|^γ for w ≥ 0; |Δt|^γ is data only.
  const S dist_g = pow(params.w_dist, params.gamma);
  std::vector<double> dt_g(T * T, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t l = 0; l < i; ++l) {
      dt_g[i * T + l] = std::pow(std::abs(obs[i].t - obs[l].t), params.gamma);
    }
  }

  std::vector<S> q(T), k(T), v(T), weights, contrib;
  std::vector<double> scores;
  weights.reserve(T);
  scores.reserve(T);
  for (std::size_t h = 0; h < H; ++h) {
    const auto& head = params.heads[h];
    for (std::size_t i = 0; i < T; ++i) {
      const std::span<const double> x(obs[i].x);
      q[i] = dot(detail::cspan(head.query), x);
      k[i] = dot(detail::cspan(head.key), x);
      v[i] = dot(detail::cspan(head.value), x);
    }
    for (std::size_t i = 0; i < T; ++i) {
      weights.clear();
      std::vector<S> logits;
      logits.reserve(i + 1);
      double shift = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l <= i; ++l) {
        S s = q[i] * k[l];
        if (l < i && dt_g[i * T + l] != 0.0) s = s - dist_g * dt_g[i * T + l];
        shift = std::max(shift, ad::value_of(s));
        logits.push_back(s);
      }
      if (!std::isfinite(shift)) throw NumericError("transform: non-finite attention score");
      for (std::size_t l = 0; l <= i; ++l) weights.push_back(exp(logits[l] - shift));
      const std::span<const S> w(weights);
      const S num = dot(w, std::span<const S>(v).first(i + 1));
      const S den = sum(w);
      out[i * H + h] = num / den;
    }
  }
  return out;
}

/// Transformed value of one head at position i (0-based) of `seq`.
template <class S>
S transform(const Sequence& seq, std::size_t i, const HeadParamsT<S>& head, const S& w_dist, double gamma) {
  if (i >= seq.size()) throw Error("transform: position out of range");
  ModelParamsT<S> one;
  one.heads = {head};
  one.w_dist = w_dist;
  one.gamma = gamma;
  const auto all = transform_all<S>(std::span<const Observation>(seq.obs).first(i + 1), one);
  return all[i];
}

/// Attention weights over positions 0..i for one head (plain doubles).
inline std::vector<double> attention_weights(const Sequence& seq, std::size_t i, const HeadParams& head,
                                             double w_dist, double gamma) {
  if (i >= seq.size()) throw Error("attention_weights: position out of range");
  std::vector<double> logits(i + 1);
  for (std::size_t l = 0; l <= i; ++l) logits[l] = log_kernel(seq.obs[i], seq.obs[l], head, w_dist, gamma);
  const double shift = *std::max_element(logits.begin(), logits.end());
  double den = 0.0;
  for (double& s : logits) den += (s = std::exp(s - shift));
  for (double& s : logits) s /= den;
  return logits;
}

/// Cumulants z_c = Σ_i (x̃_i·w_cum^(c))·exp(-(w_horizon·|t_pred - t_i|)^γ)
/// from a row-major T×H matrix of transformed values.
template <class S>
std::vector<S> cumulate(std::span<const S> xtilde, std::span<const double> times, double t_pred,
                        const ModelParamsT<S>& params) {
  using ad::dot;
  using ad::exp;
  using ad::pow;
  using std::exp;
  using std::pow;

  const std::size_t T = times.size();
  const std::size_t H = params.n_heads();
  if (xtilde.size() != T * H) throw Error("cumulate: transformed values do not match T×H");
  if (T > 0 && t_pred < times.back()) throw Error("cumulate: prediction time precedes the last observation");

  const S horizon_g = pow(params.w_horizon, params.gamma);
  std::vector<S> decay(T);
  for (std::size_t i = 0; i < T; ++i) {
    const double dg = std::pow(std::abs(t_pred - times[i]), params.gamma);
    decay[i] = dg == 0.0 ? S(1.0) : exp(horizon_g * (-dg));
  }

  std::vector<S> z(params.n_cumulants());
  std::vector<S> mixed(T);
  for (std::size_t c = 0; c < z.size(); ++c) {
    for (std::size_t i = 0; i < T; ++i) mixed[i] = dot(xtilde.subspan(i * H, H), detail::cspan(params.w_cum[c]));
    z[c] = dot(std::span<const S>(mixed), std::span<const S>(decay));
    detail::require_finite(z[c], "cumulant");
  }
  return z;
}

/// Output head ŷ_r = β0_r + z·β_r.
template <class S>
std::vector<S> output_head(std::span<const S> z, const ModelParamsT<S>& params) {
  using ad::dot;
  std::vector<S> y(params.q());
  for (std::size_t r = 0; r < y.size(); ++r) y[r] = params.beta0[r] + dot(z, detail::cspan(params.beta[r]));
  return y;
}

/// Predicts the q outputs at time t_pred from all observations of `obs`.
template <class S>
std::vector<S> predict(std::span<const Observation> obs, double t_pred, const ModelParamsT<S>& params) {
  if (obs.empty()) throw Error("predict: empty sequence");
  if (obs.front().p() != params.p()) throw Error("predict: sequence and model disagree on p");
  const auto xtilde = transform_all(obs, params);
  std::vector<double> times(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) times[i] = obs[i].t;
  const auto z = cumulate<S>(xtilde, times, t_pred, params);
  auto y = output_head<S>(z, params);
  for (const auto& v : y) detail::require_finite(v, "prediction");
  return y;
}

template <class S>
std::vector<S> predict(const Sequence& seq, double t_pred, const ModelParamsT<S>& params) {
  return predict<S>(std::span<const Observation>(seq.obs), t_pred, params);
}

/// Per-prefix cumulant vectors: row k (for target positions min_prefix..T,
/// 1-based) holds the cumulants built from observations 1..k-1 with the
/// horizon at t_k.
struct CumulantTrajectory {
  std::vector<std::vector<double>> rows;
  std::vector<double> times;
};

inline CumulantTrajectory cumulant_trajectory(const Sequence& seq, const ModelParams& params,
                                              std::size_t min_prefix) {
  if (min_prefix < 2) throw Error("cumulant_trajectory: min_prefix must be at least 2");
  CumulantTrajectory traj;
  const std::size_t T = seq.size();
  if (T < min_prefix) return traj;
  // Transformed values are causal, so one pass over the full sequence serves
  // every prefix.
  const auto xtilde = transform_all<double>(seq.obs, params);
  const std::size_t H = params.n_heads();
  std::vector<double> times(T);
  for (std::size_t i = 0; i < T; ++i) times[i] = seq.obs[i].t;
  for (std::size_t k = min_prefix - 1; k < T; ++k) {
    traj.rows.push_back(cumulate<double>(std::span<const double>(xtilde).first(k * H),
                                         std::span<const double>(times).first(k), times[k], params));
    traj.times.push_back(times[k]);
  }
  return traj;
}

/// Sum over every prefix target k (0-based k ≥ min_prefix-1) of the squared
/// error between the predicted and observed variables of observation k.
/// Equals batch_loss over expand_instances(seq) but shares the transformed
/// values across prefixes.
template <class S>
S prefix_loss(const Sequence& seq, const ModelParamsT<S>& params, std::size_t min_prefix) {
  using ad::dot;
  using ad::exp;
  using ad::pow;
  using ad::sum;
  using std::exp;
  using std::pow;

  const std::size_t T = seq.size();
  if (min_prefix < 2) throw Error("prefix_loss: min_prefix must be at least 2");
  if (T < min_prefix) return S(0.0);
  if (seq.p() != params.p()) throw Error("prefix_loss: sequence and model disagree on p");
  if (params.q() > seq.p()) throw Error("prefix_loss: more outputs than variables");

  const std::size_t H = params.n_heads();
  const std::size_t C = params.n_cumulants();
  // The last observation is only ever a target.
  const auto xtilde = transform_all<S>(std::span<const Observation>(seq.obs).first(T - 1), params);

  // mixed[i*C + c] = x̃_i·w_cum^(c), shared by all prefixes.
  std::vector<S> mixed(T * C);
  for (std::size_t i = 0; i + 1 < T; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      mixed[i * C + c] = dot(std::span<const S>(xtilde).subspan(i * H, H), detail::cspan(params.w_cum[c]));
    }
  }

  const S horizon_g = pow(params.w_horizon, params.gamma);
  std::vector<S> terms;
  std::vector<S> decay, column, z(C);
  for (std::size_t k = min_prefix - 1; k < T; ++k) {
    const double t_pred = seq.obs[k].t;
    decay.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      const double dg = std::pow(std::abs(t_pred - seq.obs[i].t), params.gamma);
      decay[i] = exp(horizon_g * (-dg));
    }
    column.resize(k);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < k; ++i) column[i] = mixed[i * C + c];
      z[c] = dot(std::span<const S>(column), std::span<const S>(decay));
    }
    const auto target = seq.obs[k].variables();
    for (std::size_t r = 0; r < params.q(); ++r) {
      const S resid = params.beta0[r] + dot(std::span<const S>(z), detail::cspan(params.beta[r])) - target[r];
      terms.push_back(resid * resid);
    }
  }
  return sum(std::span<const S>(terms));
}

}  // namespace minitx
