#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "minitx/minitx.hpp"

namespace testing_support {

using namespace minitx;

inline ModelParams random_model(const Dims& d, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> normal(0.0, scale);
  std::uniform_real_distribution<double> pos(0.05, 0.8);
  ModelParams m;
  m.gamma = 5.0;
  for (std::size_t h = 0; h < d.heads; ++h) {
    HeadParams head;
    for (std::size_t k = 0; k <= d.p; ++k) {
      head.query.push_back(normal(rng));
      head.key.push_back(normal(rng));
      head.value.push_back(normal(rng));
    }
    m.heads.push_back(head);
  }
  m.w_cum.assign(d.cumulants, std::vector<double>(d.heads));
  for (auto& w : m.w_cum) {
    for (double& v : w) v = normal(rng);
  }
  m.w_dist = pos(rng);
  m.w_horizon = pos(rng);
  for (std::size_t r = 0; r < d.q; ++r) {
    m.beta0.push_back(normal(rng));
    std::vector<double> b(d.cumulants);
    for (double& v : b) v = normal(rng);
    m.beta.push_back(b);
  }
  return m;
}

/// Binary or Gaussian variables, strictly increasing irregular times.
inline Sequence random_sequence(std::size_t p, std::size_t T, std::mt19937_64& rng, bool binary = false) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> gap(0.3, 1.5);
  Sequence s;
  s.id = "r";
  double t = 0.0;
  std::vector<double> v(p);
  for (std::size_t i = 0; i < T; ++i) {
    t += gap(rng);
    for (double& x : v) x = binary ? (coin(rng) ? 1.0 : 0.0) : normal(rng);
    s.obs.push_back(make_observation(v, t));
  }
  return s;
}

/// Exhaustive search over all pairs i1 < i2 <= i.
inline int brute_force_z(const std::vector<std::vector<double>>& h, std::size_t i, std::size_t j1, std::size_t j2,
                  std::size_t j3) {
  for (std::size_t i2 = 0; i2 <= i; ++i2) {
    for (std::size_t i1 = 0; i1 < i2; ++i1) {
      if (h[i1][j1 - 1] != 1.0 || h[i2][j2 - 1] != 1.0) continue;
      bool silent = true;
      for (std::size_t k = i2 + 1; k <= i; ++k) silent = silent && h[k][j3 - 1] == 0.0;
      if (silent) return 1;
    }
  }
  return 0;
}

inline double dotp(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

/// Prediction by literal summation of the model equations, without
/// log-space stabilization.
inline std::vector<double> direct_predict(const std::vector<Observation>& obs, double t_pred, const ModelParams& m) {
  const std::size_t T = obs.size(), H = m.heads.size(), C = m.w_cum.size();
  std::vector<std::vector<double>> xt(T, std::vector<double>(H));
  for (std::size_t h = 0; h < H; ++h) {
    const auto& hd = m.heads[h];
    for (std::size_t i = 0; i < T; ++i) {
      double num = 0.0, den = 0.0;
      for (std::size_t l = 0; l <= i; ++l) {
        const double g = std::exp(dotp(obs[i].x, hd.query) * dotp(obs[l].x, hd.key)) *
                         std::exp(-std::pow(m.w_dist * std::abs(obs[i].t - obs[l].t), m.gamma));
        num += g * dotp(obs[l].x, hd.value);
        den += g;
      }
      xt[i][h] = num / den;
    }
  }
  std::vector<double> z(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < T; ++i) {
      z[c] += dotp(xt[i], m.w_cum[c]) * std::exp(-std::pow(m.w_horizon * std::abs(t_pred - obs[i].t), m.gamma));
    }
  }
  std::vector<double> y(m.beta0.size());
  for (std::size_t r = 0; r < y.size(); ++r) y[r] = m.beta0[r] + dotp(m.beta[r], z);
  return y;
}

/// Visit-position contribution to ŷ_r without a preceding context minus the
/// contribution with it, using the full forward pass with decay switched off.
inline double forward_delta(const ModelParams& params, const Observation& context, const Observation& visit,
                            std::size_t r) {
  ModelParams m = params;
  m.w_dist = 0.0;
  m.w_horizon = 0.0;
  const std::size_t H = m.heads.size();
  auto contribution = [&](const std::vector<Observation>& obs) {
    const auto xt = transform_all<double>(obs, m);
    const std::size_t last = obs.size() - 1;
    double out = 0.0;
    for (std::size_t c = 0; c < m.w_cum.size(); ++c) {
      double inner = 0.0;
      for (std::size_t h = 0; h < H; ++h) inner += xt[last * H + h] * m.w_cum[c][h];
      out += m.beta[r - 1][c] * inner;
    }
    return out;
  };
  Observation c = context, v = visit;
  c.t = 0.0;
  v.t = 1.0;
  return contribution({v}) - contribution({c, v});
}

/// Model loss over all prefix instances of `seq`, usable with fd_check.
struct SequenceLoss {
  Sequence seq;
  Dims dims;
  double gamma;
  std::size_t min_prefix;

  template <class S>
  S operator()(std::span<const S> flat) const {
    const auto m = unpack<S>(flat, dims, gamma);
    const auto inst = expand_instances(seq, min_prefix);
    return batch_loss<S>(m, std::span<const TrainingInstance>(inst));
  }
};

}  // namespace testing_support
