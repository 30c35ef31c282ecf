#pragma once

// Synthetic binary sequences whose variable j3 fires only while a latent
// pattern holds: j1 active, later j2 active, j3 silent since.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "minitx/error.hpp"
#include "minitx/model.hpp"
#include "minitx/rng.hpp"

namespace minitx {

/// Variable indices j1, j2, j3 are 1-based, matching the dataset columns
/// v1..vp.
struct SimConfig {
  std::size_t p = 10;
  std::size_t j1 = 1;
  std::size_t j2 = 2;
  std::size_t j3 = 3;
  double p_noise = 0.7;
  double p_signal = 0.9;
  double p_stop = 0.2;
  std::size_t min_len = 3;
  std::size_t max_len = 50;
  std::uint64_t seed = 1;
};

inline void validate(const SimConfig& c) {
  auto prob = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!prob(c.p_noise) || !prob(c.p_signal) || !prob(c.p_stop)) throw Error("sim config: probabilities must be in [0,1]");
  for (std::size_t j : {c.j1, c.j2, c.j3}) {
    if (j < 1 || j > c.p) throw Error("sim config: pattern indices must be in 1..p");
  }
  if (c.j1 == c.j2 || c.j1 == c.j3 || c.j2 == c.j3) throw Error("sim config: pattern indices must be distinct");
  if (c.min_len < 3) throw Error("sim config: min_len must be at least 3");
  if (c.max_len < c.min_len) throw Error("sim config: max_len must be at least min_len");
}

struct LabeledSequence {
  Sequence seq;
  std::vector<int> z;  // latent state after each observation
};

/// Latent state at the last row of `history` (rows are the p variables of
/// each time point, 1-based indices j1..j3): 1 iff some i1 < i2 ≤ i has j1
/// active at i1, j2 active at i2 and j3 inactive at every i* in (i2, i].
inline int latent_state(const std::vector<std::vector<double>>& history, std::size_t j1, std::size_t j2,
                        std::size_t j3) {
  if (history.empty()) throw Error("latent_state: empty history");
  bool j1_seen = false;
  int z = 0;
  for (const auto& x : history) {
    const bool arm = x.at(j2 - 1) == 1.0 && j1_seen;
    z = ((z == 1 && x.at(j3 - 1) == 0.0) || arm) ? 1 : 0;
    j1_seen = j1_seen || x.at(j1 - 1) == 1.0;
  }
  return z;
}

/// Incremental form of latent_state used while generating.
class LatentTracker {
 public:
  LatentTracker(std::size_t j1, std::size_t j2, std::size_t j3) : j1_(j1), j2_(j2), j3_(j3) {}

  int push(std::span<const double> x) {
    const bool arm = x[j2_ - 1] == 1.0 && j1_seen_;
    z_ = ((z_ == 1 && x[j3_ - 1] == 0.0) || arm) ? 1 : 0;
    j1_seen_ = j1_seen_ || x[j1_ - 1] == 1.0;
    return z_;
  }

  int state() const { return z_; }

 private:
  std::size_t j1_, j2_, j3_;
  bool j1_seen_ = false;
  int z_ = 0;
};

inline LabeledSequence generate_sequence(const SimConfig& cfg, Rng& rng, std::string id = "0") {
  std::bernoulli_distribution noise(cfg.p_noise);
  std::bernoulli_distribution signal(cfg.p_signal);
  std::bernoulli_distribution stop(cfg.p_stop);

  LabeledSequence out;
  out.seq.id = std::move(id);
  LatentTracker tracker(cfg.j1, cfg.j2, cfg.j3);
  std::vector<double> x(cfg.p);
  for (std::size_t i = 0; i < cfg.max_len; ++i) {
    const int z_prev = tracker.state();
    for (std::size_t j = 1; j <= cfg.p; ++j) {
      if (j == cfg.j3) {
        // At the first time point there is no previous latent state.
        x[j - 1] = (i > 0 && z_prev == 1 && signal(rng)) ? 1.0 : 0.0;
      } else {
        x[j - 1] = noise(rng) ? 1.0 : 0.0;
      }
    }
    out.seq.obs.push_back(make_observation(x, static_cast<double>(i + 1)));
    out.z.push_back(tracker.push(x));
    if (i + 1 >= cfg.min_len && stop(rng)) break;
  }
  return out;
}

/// n independent sequences with ids "1".."n" from the config seed.
inline std::vector<LabeledSequence> generate_dataset(std::size_t n, const SimConfig& cfg) {
  validate(cfg);
  if (n == 0) throw Error("generate_dataset: n must be at least 1");
  Rng rng = make_rng(cfg.seed, Stream::kGenerate);
  std::vector<LabeledSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sequence(cfg, rng, std::to_string(i + 1)));
  return out;
}

inline std::vector<Sequence> sequences_of(const std::vector<LabeledSequence>& labeled) {
  std::vector<Sequence> out;
  out.reserve(labeled.size());
  for (const auto& l : labeled) out.push_back(l.seq);
  return out;
}

}  // namespace minitx
