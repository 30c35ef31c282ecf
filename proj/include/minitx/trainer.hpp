#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "minitx/autodiff.hpp"
#include "minitx/error.hpp"
#include "minitx/model.hpp"
#include "minitx/rng.hpp"

namespace minitx {

/// A prefix of a sequence and the observation that follows it.
struct TrainingInstance {
  std::vector<Observation> inputs;
  std::vector<double> target;
  double t_pred = 0.0;
};

/// One instance per target position k = min_prefix..T (1-based): inputs are
/// observations 1..k-1, the target is the variable part of observation k.
inline std::vector<TrainingInstance> expand_instances(const Sequence& seq, std::size_t min_prefix) {
  if (min_prefix < 2) throw Error("expand_instances: min_prefix must be at least 2");
  std::vector<TrainingInstance> out;
  for (std::size_t k = min_prefix - 1; k < seq.size(); ++k) {
    TrainingInstance inst;
    inst.inputs.assign(seq.obs.begin(), seq.obs.begin() + static_cast<std::ptrdiff_t>(k));
    const auto vars = seq.obs[k].variables();
    inst.target.assign(vars.begin(), vars.end());
    inst.t_pred = seq.obs[k].t;
    out.push_back(std::move(inst));
  }
  return out;
}

/// Σ over instances Σ_r (y_r - ŷ_r)². Only the first q target entries are
/// used when the model has fewer outputs than variables.
template <class S>
S batch_loss(const ModelParamsT<S>& params, std::span<const TrainingInstance> batch) {
  using ad::sum;
  if (batch.empty()) throw Error("batch_loss: empty batch");
  std::vector<S> terms;
  for (const auto& inst : batch) {
    if (inst.target.size() < params.q()) throw Error("batch_loss: target shorter than model output");
    const auto yhat = predict<S>(std::span<const Observation>(inst.inputs), inst.t_pred, params);
    for (std::size_t r = 0; r < yhat.size(); ++r) {
      const S resid = yhat[r] - inst.target[r];
      terms.push_back(resid * resid);
    }
  }
  return sum(std::span<const S>(terms));
}

struct TrainConfig {
  std::size_t heads = 12;
  std::size_t cumulants = 2;
  double gamma = 5.0;
  double learning_rate = 0.001;
  std::size_t epochs = 100;
  std::size_t individuals_per_batch = 1;
  std::size_t min_prefix = 3;
  std::uint64_t seed = 1;
  double init_scale = 0.1;
  double init_dist = 0.1;
  double init_horizon = 0.1;
};

inline void validate(const TrainConfig& c) {
  if (c.heads == 0 || c.cumulants == 0) throw Error("train config: heads and cumulants must be positive");
  if (!(c.gamma > 0.0)) throw Error("train config: gamma must be positive");
  if (!(c.learning_rate >= 0.0)) throw Error("train config: learning rate must be nonnegative");
  if (c.individuals_per_batch == 0) throw Error("train config: individuals_per_batch must be positive");
  if (c.min_prefix < 2) throw Error("train config: min_prefix must be at least 2");
  if (!(c.init_scale >= 0.0) || !(c.init_dist >= 0.0) || !(c.init_horizon >= 0.0)) throw Error("train config: init scales must be nonnegative");
}

struct FitResult {
  ModelParams params;
  std::vector<double> loss_history;  // mean loss per training instance, per epoch
  std::uint64_t seed = 0;
};

/// Normal(0, init_scale) draws for every weight vector and intercept; the
/// decay rates start at init_dist and init_horizon.
inline ModelParams init_params(const Dims& d, const TrainConfig& cfg) {
  Rng rng = make_rng(cfg.seed, Stream::kInit);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto layout = model_layout(d);
  ParamVector theta(layout);
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = cfg.init_scale * normal(rng);
  theta.segment(seg::kDist)[0] = cfg.init_dist;
  theta.segment(seg::kHorizon)[0] = cfg.init_horizon;
  return unpack(theta, d, cfg.gamma);
}

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss, const ModelParams& current)>;

/// Batched SGD on the summed squared error of all prefix instances. Each step
/// takes every instance of `individuals_per_batch` individuals, visited in a
/// seeded shuffled order per epoch.
inline FitResult fit(std::span<const Sequence> data, const TrainConfig& cfg, std::size_t q,
                     const EpochCallback& on_epoch = {}) {
  validate(cfg);
  if (data.empty()) throw Error("fit: empty dataset");
  const std::size_t p = data.front().p();
  if (q == 0 || q > p) throw Error("fit: q must be in 1..p");
  std::size_t total_instances = 0;
  for (const auto& s : data) {
    if (s.p() != p) throw Error("fit: sequences disagree on p");
    if (s.size() >= cfg.min_prefix) total_instances += s.size() - cfg.min_prefix + 1;
  }
  if (total_instances == 0) throw Error("fit: dataset yields no training instances");

  const Dims dims{p, cfg.heads, cfg.cumulants, q};
  ParamVector theta = pack(init_params(dims, cfg));

  FitResult result;
  result.seed = cfg.seed;
  result.loss_history.reserve(cfg.epochs);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = make_rng(cfg.seed, Stream::kShuffle);
  ad::Tape tape;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.individuals_per_batch, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.individuals_per_batch);
      bool any = false;
      for (std::size_t b = start; b < stop; ++b) any = any || data[order[b]].size() >= cfg.min_prefix;
      if (!any) continue;

      auto loss = [&](std::span<const ad::Var> flat) {
        const auto m = unpack<ad::Var>(flat, dims, cfg.gamma);
        std::vector<ad::Var> parts;
        for (std::size_t b = start; b < stop; ++b) parts.push_back(prefix_loss<ad::Var>(data[order[b]], m, cfg.min_prefix));
        return ad::sum(std::span<const ad::Var>(parts));
      };
      double value = 0.0;
      ParamVector grad;
      try {
        grad = gradient(loss, theta, tape, &value);
      } catch (const NumericError& e) {
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
      epoch_loss += value;
      theta = sgd_step(theta, grad, cfg.learning_rate, nonneg_segments());
    }
    const double mean = epoch_loss / static_cast<double>(total_instances);
    result.loss_history.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean, unpack(theta, dims, cfg.gamma));
  }
  result.params = unpack(theta, dims, cfg.gamma);
  return result;
}

}  // namespace minitx
