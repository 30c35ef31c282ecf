#pragma once

// Metrics and experiment drivers: simulation study, testing study, cumulant
// recovery and k-fold cross-validation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "minitx/baselines.hpp"
#include "minitx/context_test.hpp"
#include "minitx/error.hpp"
#include "minitx/model.hpp"
#include "minitx/rng.hpp"
#include "minitx/simgen.hpp"
#include "minitx/trainer.hpp"

namespace minitx {

inline double mse(std::span<const double> pred, std::span<const double> actual) {
  if (pred.size() != actual.size()) throw Error("mse: length mismatch");
  if (pred.empty()) throw Error("mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - actual[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

/// Squared error averaged over instances, separately for each coordinate.
inline std::vector<double> mse_per_variable(const std::vector<std::vector<double>>& preds,
                                            const std::vector<std::vector<double>>& actuals) {
  if (preds.size() != actuals.size()) throw Error("mse_per_variable: instance count mismatch");
  if (preds.empty()) throw Error("mse_per_variable: no instances");
  std::vector<double> out(preds.front().size(), 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != out.size() || actuals[i].size() != out.size()) {
      throw Error("mse_per_variable: length mismatch at instance " + std::to_string(i));
    }
    for (std::size_t j = 0; j < out.size(); ++j) {
      const double d = preds[i][j] - actuals[i][j];
      out[j] += d * d;
    }
  }
  for (double& v : out) v /= static_cast<double>(preds.size());
  return out;
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
inline double sample_sd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

/// Runs fn(0..n-1) on up to hardware_concurrency threads. Each index writes
/// only its own result slot, so output does not depend on scheduling. The
/// first exception (by index) is rethrown.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t max_threads = 0) {
  std::size_t workers = max_threads != 0 ? max_threads : std::max(1U, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Runs fn, prefixing any library error with `where` and keeping its type.
template <class Fn>
void with_context(const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const NumericError& e) {
    throw NumericError(where + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(where + ": " + e.what());
  } catch (const Error& e) {
    throw Error(where + ": " + e.what());
  }
}

using PredictFn = std::function<std::vector<double>(std::span<const Observation> prefix, double t_pred)>;

/// Per-variable MSE of predicting the last observation of every test
/// sequence from all earlier ones. Sequences shorter than 2 are skipped.
inline std::vector<double> evaluate_last(const PredictFn& predict_fn, std::span<const Sequence> test) {
  std::vector<std::vector<double>> preds, actuals;
  for (const auto& s : test) {
    if (s.size() < 2) continue;
    const auto prefix = std::span<const Observation>(s.obs).first(s.size() - 1);
    preds.push_back(predict_fn(prefix, s.obs.back().t));
    const auto v = s.obs.back().variables();
    actuals.emplace_back(v.begin(), v.end());
  }
  if (preds.empty()) throw Error("evaluate_last: no test sequence has two or more observations");
  return mse_per_variable(preds, actuals);
}

inline PredictFn model_predictor(ModelParams params) {
  return [params = std::move(params)](std::span<const Observation> prefix, double t_pred) {
    return predict<double>(prefix, t_pred, params);
  };
}

template <class P>
PredictFn baseline_predictor(P predictor) {
  return [predictor = std::move(predictor)](std::span<const Observation> prefix, double) {
    return predictor.predict(prefix);
  };
}

struct MetricRow {
  std::string approach;
  std::size_t n_train = 0;
  double mse_mean = 0.0;
  double mse_sd = 0.0;
  double target_mse_mean = 0.0;
  double target_mse_sd = 0.0;
  std::vector<double> mse_reps;
  std::vector<double> target_mse_reps;
};

inline void summarize(MetricRow& row) {
  row.mse_mean = mean_of(row.mse_reps);
  row.mse_sd = sample_sd(row.mse_reps);
  row.target_mse_mean = mean_of(row.target_mse_reps);
  row.target_mse_sd = sample_sd(row.target_mse_reps);
}

inline const std::vector<std::string>& sim_approaches() {
  static const std::vector<std::string> names{"Average", "Regression", "Informed", "MiniTransformer"};
  return names;
}

struct SimStudyConfig {
  std::vector<std::size_t> ns{100, 200, 500, 1000};
  std::size_t reps = 10;
  std::size_t test_n = 1000;
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0: hardware concurrency
};

/// Prediction study. Repetition r draws one training pool of max(ns)
/// sequences and one test set; the training set of size n is the first n
/// sequences of the pool, so every approach and every n within a repetition
/// sees the same draws. Rows are ordered by n, then approach.
inline std::vector<MetricRow> run_sim_study(const SimStudyConfig& study, const SimConfig& sim, const TrainConfig& tc,
                                            const std::function<void(const std::string&)>& log = {}) {
  validate(sim);
  validate(tc);
  if (study.ns.empty() || study.reps == 0) throw Error("run_sim_study: need at least one n_train and one repetition");
  const std::size_t n_max = *std::max_element(study.ns.begin(), study.ns.end());
  const std::size_t A = sim_approaches().size();
  const std::size_t N = study.ns.size();

  // cell[(rep * N + ni) * A + a] = per-variable MSE
  std::vector<std::vector<double>> cell(study.reps * N * A);
  std::mutex log_mutex;
  parallel_for(
      study.reps * N,
      [&](std::size_t job) {
        const std::size_t rep = job / N;
        const std::size_t ni = job % N;
        SimConfig train_cfg = sim;
        train_cfg.seed = derive_seed(study.seed, Stream::kTrainData, rep);
        SimConfig test_cfg = sim;
        test_cfg.seed = derive_seed(study.seed, Stream::kTestData, rep);
        const auto pool = sequences_of(generate_dataset(n_max, train_cfg));
        const auto test = sequences_of(generate_dataset(study.test_n, test_cfg));
        const std::span<const Sequence> train(pool.data(), study.ns[ni]);

        TrainConfig t = tc;
        t.seed = derive_seed(study.seed, Stream::kInit, rep);
        with_context("repetition " + std::to_string(rep) + ", n_train=" + std::to_string(study.ns[ni]), [&] {
          const PredictFn fns[] = {
              baseline_predictor(fit_average(train)),
              baseline_predictor(fit_regression(train)),
              baseline_predictor(fit_informed(train, sim.j2, sim.j3)),
              model_predictor(fit(train, t, sim.p).params),
          };
          for (std::size_t a = 0; a < A; ++a) cell[job * A + a] = evaluate_last(fns[a], test);
        });
        if (log) {
          std::lock_guard lock(log_mutex);
          log("rep " + std::to_string(rep) + " n=" + std::to_string(study.ns[ni]) + " done");
        }
      },
      study.threads);

  std::vector<MetricRow> rows;
  for (std::size_t ni = 0; ni < N; ++ni) {
    for (std::size_t a = 0; a < A; ++a) {
      MetricRow row;
      row.approach = sim_approaches()[a];
      row.n_train = study.ns[ni];
      for (std::size_t rep = 0; rep < study.reps; ++rep) {
        const auto& v = cell[(rep * N + ni) * A + a];
        row.mse_reps.push_back(mean_of(v));
        row.target_mse_reps.push_back(v[sim.j3 - 1]);
      }
      summarize(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

struct TestStudyConfig {
  std::size_t n = 50;
  std::size_t reps = 10;
  std::size_t sample_visits = 0;  // 0: enumerate all 2^p patterns
  std::uint64_t seed = 1;
  std::size_t threads = 0;
};

struct TestStudyResult {
  std::vector<Tail> tails;
  std::size_t target = 0;                             // 1-based
  std::vector<std::vector<std::vector<double>>> reps;  // [tail][rep][variable]
  std::vector<std::vector<double>> mean;               // [tail][variable]
  std::vector<std::vector<double>> sd;
};

/// Testing study: per repetition, simulate n sequences, fit the model
/// on all variables, build the Δ matrix for target j3 and compute p-values
/// under every requested tail convention from the same Δ and permutations.
inline TestStudyResult run_test_study(const TestStudyConfig& study, const SimConfig& sim, const TrainConfig& tc,
                                      const TestConfig& test_cfg, const std::vector<Tail>& tails) {
  validate(sim);
  validate(tc);
  if (study.reps == 0 || tails.empty()) throw Error("run_test_study: need at least one repetition and one tail");
  TestStudyResult out;
  out.tails = tails;
  out.target = sim.j3;
  out.reps.assign(tails.size(), std::vector<std::vector<double>>(study.reps));

  parallel_for(
      study.reps,
      [&](std::size_t rep) {
        SimConfig data_cfg = sim;
        data_cfg.seed = derive_seed(study.seed, Stream::kTrainData, rep);
        const auto data = sequences_of(generate_dataset(study.n, data_cfg));
        TrainConfig t = tc;
        t.seed = derive_seed(study.seed, Stream::kInit, rep);
        ModelParams params;
        with_context("repetition " + std::to_string(rep), [&] { params = fit(data, t, sim.p).params; });

        TestConfig cfg = test_cfg;
        if (cfg.context_base.empty()) cfg.context_base.assign(sim.p, 0.0);
        if (study.sample_visits == 0) {
          cfg.visits = enumerate_visits(sim.p);
        } else {
          Rng vrng = make_rng(study.seed, Stream::kVisits, rep);
          cfg.visits = sample_visits(sim.p, study.sample_visits, vrng);
        }
        const DeltaMatrix d = delta_matrix(params, cfg, sim.j3);
        const std::uint64_t perm_seed = derive_seed(study.seed, Stream::kPermute, rep);
        for (std::size_t k = 0; k < tails.size(); ++k) {
          const Eigen::VectorXd pv = permutation_pvalues(d.entries, cfg.permutations, tails[k], cfg.statistic, perm_seed);
          out.reps[k][rep].assign(pv.data(), pv.data() + pv.size());
        }
      },
      study.threads);

  for (std::size_t k = 0; k < tails.size(); ++k) {
    std::vector<double> m(sim.p), s(sim.p);
    for (std::size_t j = 0; j < sim.p; ++j) {
      std::vector<double> col;
      for (const auto& r : out.reps[k]) col.push_back(r[j]);
      m[j] = mean_of(col);
      s[j] = sample_sd(col);
    }
    out.mean.push_back(std::move(m));
    out.sd.push_back(std::move(s));
  }
  return out;
}

/// Pearson correlation, flagged degenerate when either side has zero variance.
struct Correlation {
  double value = 0.0;
  bool degenerate = false;
};

inline Correlation pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("pearson: length mismatch");
  if (a.size() < 2) return {0.0, true};
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return {0.0, true};
  return {sab / std::sqrt(saa * sbb), false};
}

struct TrajectoryPoint {
  std::string id;
  std::size_t position = 0;  // 1-based index of the prediction target
  double t = 0.0;
  int z = 0;                 // latent state after the last input observation
  std::vector<double> cumulants;
};

struct RecoveryReport {
  std::vector<double> correlation;  // per cumulant
  std::vector<bool> degenerate;
  std::vector<TrajectoryPoint> points;
};

/// Point-biserial correlation between each cumulant's per-prefix value and
/// the latent state. The cumulant row predicting position k summarizes
/// observations 1..k-1, so it is paired with z after observation k-1.
inline RecoveryReport cumulant_recovery(const ModelParams& params, const std::vector<LabeledSequence>& labeled,
                                        std::size_t min_prefix = 2) {
  RecoveryReport rep;
  const std::size_t C = params.n_cumulants();
  std::vector<std::vector<double>> values(C);
  std::vector<double> labels;
  for (const auto& l : labeled) {
    if (l.z.size() != l.seq.size()) throw Error("cumulant_recovery: latent states do not match sequence " + l.seq.id);
    const auto traj = cumulant_trajectory(l.seq, params, min_prefix);
    for (std::size_t r = 0; r < traj.rows.size(); ++r) {
      const std::size_t k = min_prefix - 1 + r;  // 0-based target position
      TrajectoryPoint pt{l.seq.id, k + 1, traj.times[r], l.z[k - 1], traj.rows[r]};
      for (std::size_t c = 0; c < C; ++c) values[c].push_back(traj.rows[r][c]);
      labels.push_back(static_cast<double>(pt.z));
      rep.points.push_back(std::move(pt));
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const Correlation r = pearson(values[c], labels);
    rep.correlation.push_back(r.value);
    rep.degenerate.push_back(r.degenerate);
  }
  return rep;
}

inline const std::vector<std::string>& cv_approaches() {
  static const std::vector<std::string> names{"Average", "Regression", "CarryForward", "MiniTransformer"};
  return names;
}

struct CVApproach {
  std::string approach;
  std::vector<double> fold_mse;
  std::vector<double> fold_target_mse;
  double mse_mean = 0.0, mse_sd = 0.0, target_mse_mean = 0.0, target_mse_sd = 0.0;
};

struct CVReport {
  std::size_t k = 0;
  std::size_t target = 0;               // 1-based
  std::vector<std::size_t> fold_of;     // per individual
  std::vector<CVApproach> approaches;
};

/// Seeded partition of n individuals into k folds of near-equal size.
inline std::vector<std::size_t> assign_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error("assign_folds: k must be at least 2");
  if (n < k) throw Error("assign_folds: fewer individuals than folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, Stream::kFolds);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = i % k;
  return fold;
}

inline CVReport run_cv(std::span<const Sequence> dataset, std::size_t k, const TrainConfig& tc, std::size_t target,
                       std::uint64_t seed, std::size_t threads = 0) {
  validate(tc);
  if (dataset.empty()) throw Error("run_cv: empty dataset");
  const std::size_t p = dataset.front().p();
  if (target < 1 || target > p) throw Error("run_cv: target out of range");
  CVReport rep;
  rep.k = k;
  rep.target = target;
  rep.fold_of = assign_folds(dataset.size(), k, seed);
  const std::size_t A = cv_approaches().size();
  std::vector<std::vector<double>> cell(k * A);

  parallel_for(
      k,
      [&](std::size_t f) {
        std::vector<Sequence> train, test;
        for (std::size_t i = 0; i < dataset.size(); ++i) (rep.fold_of[i] == f ? test : train).push_back(dataset[i]);
        TrainConfig t = tc;
        t.seed = derive_seed(seed, Stream::kInit, f);
        with_context("fold " + std::to_string(f), [&] {
          const PredictFn fns[] = {
              baseline_predictor(fit_average(train)),
              baseline_predictor(fit_regression(train)),
              baseline_predictor(CarryForwardPredictor{}),
              model_predictor(fit(train, t, p).params),
          };
          for (std::size_t a = 0; a < A; ++a) cell[f * A + a] = evaluate_last(fns[a], test);
        });
      },
      threads);

  for (std::size_t a = 0; a < A; ++a) {
    CVApproach row;
    row.approach = cv_approaches()[a];
    for (std::size_t f = 0; f < k; ++f) {
      row.fold_mse.push_back(mean_of(cell[f * A + a]));
      row.fold_target_mse.push_back(cell[f * A + a][target - 1]);
    }
    row.mse_mean = mean_of(row.fold_mse);
    row.mse_sd = sample_sd(row.fold_mse);
    row.target_mse_mean = mean_of(row.fold_target_mse);
    row.target_mse_sd = sample_sd(row.fold_target_mse);
    rep.approaches.push_back(std::move(row));
  }
  return rep;
}

}  // namespace minitx
