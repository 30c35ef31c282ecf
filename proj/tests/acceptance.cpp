// Acceptance checks. Prints one "criterion N: PASS|FAIL ..." line per
// criterion and exits nonzero if any requested criterion fails.
//
//   acceptance [--criterion N]... [--threads T] [--out-dir DIR]

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "minitx/minitx.hpp"
#include "support.hpp"

using namespace minitx;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Options {
  std::size_t threads = 0;
  fs::path out_dir = "acceptance_artifacts";
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string g(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::string in_band(const std::string& name, double v, double lo, double hi, bool& all) {
  const bool ok = v >= lo && v <= hi;
  all = all && ok;
  return name + "=" + g(v) + (ok ? " ok" : " OUT") + " [" + g(lo) + "," + g(hi) + "]";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MINITX_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const Options& opt, const std::string& name) {
  const fs::path d = opt.out_dir / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------------------
// 1, 2: simulation study

const std::vector<MetricRow>& sim_study(const Options& opt) {
  static std::vector<MetricRow> rows;
  static bool done = false;
  if (!done) {
    SimStudyConfig st;
    st.threads = opt.threads;
    const auto t0 = Clock::now();
    rows = run_sim_study(st, SimConfig{}, TrainConfig{});
    std::clog << "simulation study: " << g(seconds_since(t0)) << " s\n" << metric_table(rows, SimConfig{}.j3);
    done = true;
  }
  return rows;
}

const MetricRow& row_of(const std::vector<MetricRow>& rows, const std::string& approach, std::size_t n) {
  for (const auto& r : rows) {
    if (r.approach == approach && r.n_train == n) return r;
  }
  throw Error("no row for " + approach + " at n=" + std::to_string(n));
}

Outcome criterion1(const Options& opt) {
  const auto t0 = Clock::now();
  const auto& rows = sim_study(opt);
  const double secs = seconds_since(t0);
  fs::create_directories(opt.out_dir);
  save_metric_csv((opt.out_dir / "table1.csv").string(), rows);
  bool ok = true;
  std::vector<std::string> parts;
  for (std::size_t n : SimStudyConfig{}.ns) {
    const auto& avg = row_of(rows, "Average", n);
    parts.push_back(in_band("Average MSE(n=" + std::to_string(n) + ")", avg.mse_mean, 0.199, 0.219, ok));
  }
  parts.push_back(in_band("Regression MSE_j3(1000)", row_of(rows, "Regression", 1000).target_mse_mean, 0.14, 0.165, ok));
  parts.push_back(in_band("Informed MSE_j3(1000)", row_of(rows, "Informed", 1000).target_mse_mean, 0.145, 0.175, ok));
  const auto& mt = row_of(rows, "MiniTransformer", 1000);
  parts.push_back(in_band("MiniTransformer MSE(1000)", mt.mse_mean, 0.185, 0.205, ok));
  parts.push_back(in_band("MiniTransformer MSE_j3(1000)", mt.target_mse_mean, 0.045, 0.095, ok));
  parts.push_back(in_band("MiniTransformer MSE_j3(100)", row_of(rows, "MiniTransformer", 100).target_mse_mean, 0.08, 0.21, ok));
  parts.push_back(in_band("runtime_s", secs, 0.0, 1800.0, ok));
  std::string detail;
  for (const auto& p : parts) detail += (detail.empty() ? "" : "; ") + p;
  return {ok, detail};
}

Outcome criterion2(const Options& opt) {
  const auto& rows = sim_study(opt);
  bool ok = true;
  std::string detail;
  for (std::size_t n : SimStudyConfig{}.ns) {
    if (n < 200) continue;
    const auto& mt = row_of(rows, "MiniTransformer", n).target_mse_reps;
    const auto& reg = row_of(rows, "Regression", n).target_mse_reps;
    const auto& avg = row_of(rows, "Average", n).target_mse_reps;
    std::size_t held = 0;
    for (std::size_t r = 0; r < mt.size(); ++r) held += (mt[r] < reg[r] && reg[r] < avg[r]) ? 1 : 0;
    ok = ok && held == mt.size();
    detail += (detail.empty() ? "" : "; ") + ("n=" + std::to_string(n) + ": ordering holds in " + std::to_string(held) +
                                              "/" + std::to_string(mt.size()) + " reps (mean MT " +
                                              g(mean_of(mt)) + ", Reg " + g(mean_of(reg)) + ", Avg " + g(mean_of(avg)) + ")");
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 3, 4: testing studies

const std::vector<Tail> kAllTails{Tail::kPaper, Tail::kUpper, Tail::kTwoSided};

std::string pvals(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t j = 0; j < v.size(); ++j) s += (j ? " " : "") + g(v[j], 3);
  return s + "]";
}

Outcome criterion3(const Options& opt) {
  const auto t0 = Clock::now();
  SimConfig sim;
  sim.p = 4;
  TestStudyConfig st;
  st.n = 50;
  st.reps = 10;
  st.threads = opt.threads;
  const auto res = run_test_study(st, sim, TrainConfig{}, TestConfig{}, kAllTails);
  const double secs = seconds_since(t0);
  std::string detail, used;
  for (std::size_t k = 0; k < kAllTails.size(); ++k) {
    const auto& m = res.mean[k];
    const bool ok = m[0] <= 0.05 && m[1] <= 0.05 && m[2] <= 0.05 && m[3] >= 0.3;
    if (ok && used.empty()) used = to_string(kAllTails[k]);
    detail += (detail.empty() ? "" : "; ") + to_string(kAllTails[k]) + " mean p " + pvals(m) + (ok ? " ok" : "");
  }
  const bool in_time = secs <= 600.0;
  detail += "; convention=" + (used.empty() ? std::string("none reproduces the ordering") : used) +
            "; runtime_s=" + g(secs);
  return {!used.empty() && in_time, detail};
}

Outcome criterion4(const Options& opt) {
  SimConfig sim;
  TestStudyConfig st;
  st.n = 100;
  st.reps = 10;
  st.sample_visits = 8;
  st.threads = opt.threads;
  const auto res = run_test_study(st, sim, TrainConfig{}, TestConfig{}, kAllTails);
  std::string detail, used;
  for (std::size_t k = 0; k < kAllTails.size(); ++k) {
    const auto& m = res.mean[k];
    std::vector<std::size_t> order(m.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return m[a] < m[b]; });
    bool j3_first = true;
    for (std::size_t j = 0; j < m.size(); ++j) j3_first = j3_first && (j == sim.j3 - 1 || m[sim.j3 - 1] < m[j]);
    std::size_t among4 = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t j = order[i] + 1;
      among4 += (j == sim.j1 || j == sim.j2 || j == sim.j3) ? 1 : 0;
    }
    const bool ok = j3_first && among4 == 3;
    if (ok && used.empty()) used = to_string(kAllTails[k]);
    detail += (detail.empty() ? "" : "; ") + to_string(kAllTails[k]) + " mean p " + pvals(m) + " smallest=v" +
              std::to_string(order[0] + 1) + " pattern-in-top4=" + std::to_string(among4) + (ok ? " ok" : "");
  }
  detail += "; convention=" + (used.empty() ? std::string("none") : used);
  return {!used.empty(), detail};
}

// ---------------------------------------------------------------------------
// 5, 6: oracles

Outcome criterion5(const Options&) {
  std::mt19937_64 rng(20240501);
  std::uniform_int_distribution<std::size_t> P(1, 4), H(1, 3), C(1, 2), T(2, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = P(rng);
    const Dims d{p, H(rng), C(rng), std::uniform_int_distribution<std::size_t>(1, p)(rng)};
    const auto m = testing_support::random_model(d, rng);
    const auto seq = testing_support::random_sequence(p, T(rng), rng, trial % 2 == 0);
    testing_support::SequenceLoss loss{seq, d, m.gamma, 2};
    worst = std::max(worst, fd_check(loss, pack(m), 1e-5).max_rel_err);
  }
  return {worst < 1e-6, "max_rel_err=" + g(worst) + " over 100 configurations (threshold 1e-6)"};
}

Outcome criterion6(const Options&) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = 2 + trial % 5;
    const Dims d{p, std::size_t(1 + trial % 4), std::size_t(1 + trial % 3), p};
    const auto m = testing_support::random_model(d, rng);
    std::vector<double> base(p), visit(p);
    for (double& x : base) x = coin(rng) ? 1.0 : 0.0;
    for (double& x : visit) x = trial % 3 == 0 ? normal(rng) : (coin(rng) ? 1.0 : 0.0);
    const std::size_t j = 1 + trial % p;
    const Observation c = make_context(base, j, 1.0);
    const Observation v = make_observation(visit, 0.0);
    for (std::size_t r = 1; r <= d.q; ++r) {
      worst = std::max(worst, std::abs(delta_entry(m, c, v, r) - testing_support::forward_delta(m, c, v, r)));
    }
  }
  return {worst <= 1e-10, "max |delta_entry - forward difference|=" + g(worst) + " over 100 draws (threshold 1e-10)"};
}

// ---------------------------------------------------------------------------
// 7: generator

Outcome criterion7(const Options&) {
  SimConfig cfg;
  cfg.seed = 7;
  const auto data = generate_dataset(100000, cfg);
  double ones = 0.0, cells = 0.0, fired = 0.0, gated = 0.0;
  std::size_t short_seqs = 0;
  for (const auto& l : data) {
    if (l.seq.size() < 3) ++short_seqs;
    for (std::size_t i = 0; i < l.seq.size(); ++i) {
      const auto& x = l.seq.obs[i].x;
      for (std::size_t j = 1; j <= cfg.p; ++j) {
        if (j == cfg.j3) continue;
        ones += x[j];
        cells += 1.0;
      }
      if (i > 0 && l.z[i - 1] == 1) {
        gated += 1.0;
        fired += x[cfg.j3];
      }
    }
  }
  // per-variable means
  std::vector<double> var_mean(cfg.p, 0.0);
  double rows = 0.0;
  for (const auto& l : data) {
    for (const auto& o : l.seq.obs) {
      for (std::size_t j = 1; j <= cfg.p; ++j) var_mean[j - 1] += o.x[j];
      rows += 1.0;
    }
  }
  bool means_ok = true;
  double lo = 1.0, hi = 0.0;
  for (std::size_t j = 1; j <= cfg.p; ++j) {
    if (j == cfg.j3) continue;
    const double m = var_mean[j - 1] / rows;
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    means_ok = means_ok && std::abs(m - 0.7) <= 0.01;
  }
  const double gate = fired / gated;
  const bool gate_ok = std::abs(gate - 0.9) <= 0.01;

  std::size_t mismatches = 0, checked = 0;
  for (std::size_t s = 0; s < 10000; ++s) {
    const auto& l = data[s];
    std::vector<std::vector<double>> h;
    for (const auto& o : l.seq.obs) h.emplace_back(o.x.begin() + 1, o.x.end());
    for (std::size_t i = 0; i < h.size(); ++i, ++checked) {
      if (testing_support::brute_force_z(h, i, cfg.j1, cfg.j2, cfg.j3) != l.z[i]) ++mismatches;
    }
  }
  const bool ok = means_ok && gate_ok && short_seqs == 0 && mismatches == 0;
  return {ok, "non-j3 means in [" + g(lo) + "," + g(hi) + "] (pooled " + g(ones / cells) + "); P(j3=1|z=1)=" + g(gate) +
                  " over " + g(gated, 7) + " gated points; sequences shorter than 3: " + std::to_string(short_seqs) +
                  "; latent mismatches: " + std::to_string(mismatches) + "/" + std::to_string(checked)};
}

// ---------------------------------------------------------------------------
// 8: properties

bool cli_deterministic(const Options& opt, std::string& detail) {
  const fs::path a = fresh_dir(opt, "determinism_a"), b = fresh_dir(opt, "determinism_b");
  auto run_all = [&](const fs::path& d) {
    const std::string data = (d / "data.csv").string(), model = (d / "model.json").string();
    const std::vector<std::string> cmds{
        "simulate --n 60 --p 5 --seed 3 --out " + data,
        "train --data " + data + " --heads 3 --cumulants 2 --epochs 3 --seed 4 --out-model " + model,
        "predict --model " + model + " --data " + data + " --out " + (d / "pred.csv").string(),
        "context-test --model " + model + " --data " + data + " --visits sample:8 --M 200 --seed 5 --out " +
            (d / "ctx").string(),
        "trajectory --model " + model + " --data " + data + " --latent " + (d / "data_latent.csv").string() +
            " --out " + (d / "traj.csv").string(),
        "evaluate --mode sim --p 5 --ns 20,40 --reps 2 --test-n 50 --heads 2 --cumulants 1 --epochs 2 --seed 6 --out " +
            (d / "sim.csv").string(),
        "evaluate --mode test --p 4 --n 20 --reps 2 --M 100 --heads 2 --cumulants 1 --epochs 2 --seed 6 --out " +
            (d / "test.csv").string(),
        "evaluate --mode cv --data " + data + " --k 3 --heads 2 --cumulants 1 --epochs 2 --seed 6 --out " +
            (d / "cv.csv").string(),
    };
    for (const auto& c : cmds) {
      if (run_cli(c, d / "log.txt") != 0) throw Error("command failed: " + c + "\n" + slurp(d / "log.txt"));
    }
  };
  run_all(a);
  run_all(b);
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "log.txt") continue;
    ++files;
    const fs::path other = b / fs::relative(e.path(), a);
    same += slurp(e.path()) == slurp(other) ? 1 : 0;
  }
  detail = "CLI outputs identical " + std::to_string(same) + "/" + std::to_string(files);
  return files > 0 && same == files;
}

Outcome criterion8(const Options& opt) {
  std::mt19937_64 rng(8);
  double sum_err = 0.0, shift_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t p = 1 + trial % 6;
    const auto m = testing_support::random_model({p, 2, 1, p}, rng, 1.0);
    const auto seq = testing_support::random_sequence(p, 1 + trial % 9, rng, trial % 2 == 0);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto w = attention_weights(seq, i, m.heads[0], m.w_dist, m.gamma);
      double s = 0.0;
      for (double x : w) s += x;
      sum_err = std::max(sum_err, std::abs(s - 1.0));
      HeadParams shifted = m.heads[0];
      shifted.key[0] += 3.7;
      const auto w2 = attention_weights(seq, i, shifted, m.w_dist, m.gamma);
      for (std::size_t l = 0; l < w.size(); ++l) shift_err = std::max(shift_err, std::abs(w[l] - w2[l]));
    }
  }

  double null_delta = 0.0, null_p = 1.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto m = testing_support::random_model({4, 3, 2, 4}, rng);
    for (auto& h : m.heads) std::fill(h.value.begin(), h.value.end(), 0.0);
    TestConfig cfg;
    cfg.context_base.assign(4, 0.0);
    cfg.visits = enumerate_visits(4);
    cfg.permutations = 200;
    for (Tail t : kAllTails) {
      cfg.tail = t;
      const auto S = stat_matrix(m, cfg, {1, 2, 3, 4});
      std::vector<DeltaMatrix> ds;
      stat_matrix(m, cfg, {1}, &ds);
      null_delta = std::max(null_delta, ds[0].entries.cwiseAbs().maxCoeff());
      null_p = std::min(null_p, S.pvals.minCoeff());
    }
  }

  const fs::path dir = fresh_dir(opt, "roundtrip");
  double rt_err = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = testing_support::random_model({5, 4, 2, 5}, rng);
    const std::string path = (dir / "m.json").string();
    save_model(path, m);
    const auto back = load_model(path);
    for (int k = 0; k < 10; ++k) {
      const auto seq = testing_support::random_sequence(5, 2 + k % 5, rng, k % 2 == 0);
      const auto a = predict<double>(seq.obs, seq.obs.back().t + 1.0, m);
      const auto b = predict<double>(seq.obs, seq.obs.back().t + 1.0, back);
      for (std::size_t r = 0; r < a.size(); ++r) rt_err = std::max(rt_err, std::abs(a[r] - b[r]));
    }
  }

  std::string det;
  const bool det_ok = cli_deterministic(opt, det);
  const bool ok = sum_err <= 1e-12 && shift_err <= 1e-12 && null_delta == 0.0 && null_p == 1.0 && det_ok &&
                  rt_err <= 1e-15;
  return {ok, "max |sum w - 1|=" + g(sum_err) + "; shift max |dw|=" + g(shift_err) + "; null max |delta|=" +
                  g(null_delta) + ", min p=" + g(null_p) + "; " + det + "; save/load max |dy|=" + g(rt_err)};
}

// ---------------------------------------------------------------------------
// 9: cumulant recovery

Outcome criterion9(const Options&) {
  SimConfig sim;
  sim.seed = derive_seed(1, Stream::kTrainData, 0);
  const auto train = generate_dataset(1000, sim);
  const auto fitted = fit(sequences_of(train), TrainConfig{}, sim.p);
  SimConfig test_sim;
  test_sim.seed = derive_seed(1, Stream::kTestData, 0);
  const auto test = generate_dataset(1000, test_sim);
  const auto rep = cumulant_recovery(fitted.params, test);
  double best = 0.0;
  std::string detail;
  for (std::size_t c = 0; c < rep.correlation.size(); ++c) {
    best = std::max(best, std::abs(rep.correlation[c]));
    detail += "c" + std::to_string(c + 1) + " r=" + g(rep.correlation[c]) + (rep.degenerate[c] ? " (degenerate)" : "") + "; ";
  }
  return {best >= 0.5, detail + "max |r|=" + g(best) + " (threshold 0.5, soft criterion); w_dist=" +
                           g(fitted.params.w_dist) + " w_horizon=" + g(fitted.params.w_horizon)};
}

// ---------------------------------------------------------------------------
// 10: end-to-end pipelines on a synthetic 880-individual dataset

Outcome criterion10(const Options& opt) {
  const auto t0 = Clock::now();
  const fs::path dir = fresh_dir(opt, "pipeline");
  const std::string data = (dir / "cohort.csv").string(), model = (dir / "model.json").string();
  const std::string threads = " --threads " + std::to_string(opt.threads);
  const std::vector<std::string> cmds{
      "simulate --n 880 --p 10 --p-stop 0.067 --max-len 20 --seed 880 --out " + data,
      "evaluate --mode cv --data " + data + " --k 10 --target 3 --seed 880" + threads + " --out " +
          (dir / "cv.csv").string(),
      "train --data " + data + " --seed 880 --out-model " + model,
      "context-test --model " + model + " --data " + data + " --visits sample:8 --M 1000 --seed 880 --out " +
          (dir / "context").string(),
  };
  for (const auto& c : cmds) {
    if (run_cli(c, dir / "log.txt") != 0) return {false, "command failed: " + c + ": " + slurp(dir / "log.txt")};
  }
  const double secs = seconds_since(t0);
  const auto cohort = load_dataset(data);
  std::vector<std::size_t> lengths;
  for (const auto& s : cohort) lengths.push_back(s.size());
  std::nth_element(lengths.begin(), lengths.begin() + static_cast<std::ptrdiff_t>(lengths.size() / 2), lengths.end());
  const std::size_t median = lengths[lengths.size() / 2];
  std::vector<std::string> missing;
  for (const auto& f : {"cv.csv", "model.json", "context/pvalues.csv", "context/statistics.csv", "context/heatmap.svg"}) {
    if (!fs::exists(dir / f) || fs::file_size(dir / f) == 0) missing.push_back(f);
  }
  const bool ok = cohort.size() == 880 && cohort.front().p() == 10 && missing.empty() && secs <= 3600.0;
  std::string detail = "individuals=" + std::to_string(cohort.size()) + " p=" + std::to_string(cohort.front().p()) +
                       " median length=" + std::to_string(median) + "; runtime_s=" + g(secs) + "; artifacts in " +
                       dir.string();
  if (!missing.empty()) {
    detail += "; missing:";
    for (const auto& m : missing) detail += " " + m;
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> criteria;
  Options opt;
  std::string out_dir = opt.out_dir.string();
  app.add_option("--criterion", criteria, "criterion number (repeatable; default: all)")->check(CLI::Range(1, 10));
  app.add_option("--threads", opt.threads, "worker threads (0: all cores)");
  app.add_option("--out-dir", out_dir, "directory for artifacts");
  CLI11_PARSE(app, argc, argv);
  opt.out_dir = out_dir;
  if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  const std::map<int, std::function<Outcome(const Options&)>> checks{
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10},
  };
  bool all = true;
  for (int c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = checks.at(c)(opt);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << " (" << g(seconds_since(t0)) << " s) "
              << o.detail << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
