#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "minitx/minitx.hpp"

namespace fs = std::filesystem;
using namespace minitx;

namespace {

struct SimFlags {
  SimConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--p", cfg.p, "number of variables")->capture_default_str();
    app->add_option("--j1", cfg.j1, "first pattern variable (1-based)")->capture_default_str();
    app->add_option("--j2", cfg.j2, "second pattern variable (1-based)")->capture_default_str();
    app->add_option("--j3", cfg.j3, "signal variable (1-based)")->capture_default_str();
    app->add_option("--p-noise", cfg.p_noise, "activation probability of noise variables")->capture_default_str();
    app->add_option("--p-signal", cfg.p_signal, "activation probability of j3 while the pattern holds")->capture_default_str();
    app->add_option("--p-stop", cfg.p_stop, "termination probability per time point")->capture_default_str();
    app->add_option("--min-len", cfg.min_len, "minimum sequence length")->capture_default_str();
    app->add_option("--max-len", cfg.max_len, "maximum sequence length")->capture_default_str();
  }
};

struct TrainFlags {
  TrainConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--heads", cfg.heads, "attention heads H")->capture_default_str();
    app->add_option("--cumulants", cfg.cumulants, "cumulants C")->capture_default_str();
    app->add_option("--gamma", cfg.gamma, "decay exponent")->capture_default_str();
    app->add_option("--lr", cfg.learning_rate, "learning rate")->capture_default_str();
    app->add_option("--epochs", cfg.epochs, "training epochs")->capture_default_str();
    app->add_option("--batch-individuals", cfg.individuals_per_batch, "individuals per SGD step")->capture_default_str();
    app->add_option("--min-prefix", cfg.min_prefix, "shortest prefix+target length used for training")->capture_default_str();
    app->add_option("--init-scale", cfg.init_scale, "sd of the initial weights")->capture_default_str();
    app->add_option("--init-dist", cfg.init_dist, "initial w_dist")->capture_default_str();
    app->add_option("--init-horizon", cfg.init_horizon, "initial w_horizon")->capture_default_str();
  }
};

LoadOptions load_options(const std::optional<double>& binarize) { return LoadOptions{binarize}; }

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t pos = 0;
    const unsigned long v = std::stoul(item, &pos);
    if (pos != item.size()) throw Error("invalid list element: " + item);
    out.push_back(v);
  }
  if (out.empty()) throw Error("empty list: " + s);
  return out;
}

std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

void require_same_p(const ModelParams& m, const std::vector<Sequence>& data) {
  for (const auto& s : data) {
    if (s.p() != m.p()) {
      throw Error("model has p=" + std::to_string(m.p()) + " but sequence " + s.id + " has " + std::to_string(s.p()) +
                  " variables");
    }
  }
}

std::vector<std::string> var_labels(std::size_t n, const std::string& prefix = "v") {
  std::vector<std::string> out;
  for (std::size_t j = 1; j <= n; ++j) out.push_back(prefix + std::to_string(j));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MiniTransformer: attention-based prediction for short multivariate sequences"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;

  // simulate
  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset with latent states");
  SimFlags sim_flags;
  std::size_t sim_n = 1000;
  std::string sim_out, sim_latent;
  sim->add_option("--n", sim_n, "number of sequences")->capture_default_str();
  sim_flags.add(sim);
  sim->add_option("--seed", seed, "master seed")->capture_default_str();
  sim->add_option("--out", sim_out, "dataset CSV")->required();
  sim->add_option("--latent-out", sim_latent, "latent-state CSV (default: <out>_latent.csv)");

  // train
  auto* train = app.add_subcommand("train", "fit a model");
  TrainFlags train_flags;
  std::string train_data, train_model, train_loss;
  std::optional<double> binarize;
  std::size_t train_q = 0;
  train->add_option("--data", train_data, "dataset CSV")->required()->check(CLI::ExistingFile);
  train_flags.add(train);
  train->add_option("--q", train_q, "number of predicted variables, the first q (default: all)");
  train->add_option("--seed", seed, "master seed")->capture_default_str();
  train->add_option("--binarize", binarize, "map values >= threshold to 1, others to 0");
  train->add_option("--out-model", train_model, "model JSON")->required();
  train->add_option("--loss-out", train_loss, "loss history CSV (default: <model>_loss.csv)");

  // predict
  auto* pred = app.add_subcommand("predict", "predict the last observation of every sequence");
  std::string pred_model, pred_data, pred_out;
  pred->add_option("--model", pred_model, "model JSON")->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pred_data, "dataset CSV")->required()->check(CLI::ExistingFile);
  pred->add_option("--binarize", binarize, "map values >= threshold to 1, others to 0");
  pred->add_option("--out", pred_out, "prediction CSV (id,time,v1..vq)")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "simulation study, testing study or cross-validation");
  std::string mode = "sim", eval_out, eval_data, ns = "100,200,500,1000", visits_spec = "enumerate", tail_name = "paper";
  std::size_t reps = 10, test_n = 1000, k = 10, target = 3, n_test_study = 50, eval_M = 1000, threads = 0;
  SimFlags eval_sim;
  TrainFlags eval_train;
  eval->add_option("--mode", mode, "sim | test | cv")->check(CLI::IsMember({"sim", "test", "cv"}))->capture_default_str();
  eval_sim.add(eval);
  eval_train.add(eval);
  eval->add_option("--ns", ns, "training set sizes (sim)")->capture_default_str();
  eval->add_option("--reps", reps, "repetitions (sim, test)")->capture_default_str();
  eval->add_option("--test-n", test_n, "test set size (sim)")->capture_default_str();
  eval->add_option("--n", n_test_study, "sequences per repetition (test)")->capture_default_str();
  eval->add_option("--visits", visits_spec, "enumerate | sample:V (test)")->capture_default_str();
  eval->add_option("--M", eval_M, "permutations (test)")->capture_default_str();
  eval->add_option("--tail", tail_name, "paper | upper | two-sided (test)")->capture_default_str();
  eval->add_option("--data", eval_data, "dataset CSV (cv)");
  eval->add_option("--binarize", binarize, "map values >= threshold to 1, others to 0 (cv)");
  eval->add_option("--k", k, "folds (cv)")->capture_default_str();
  eval->add_option("--target", target, "target variable, 1-based (cv)")->capture_default_str();
  eval->add_option("--threads", threads, "worker threads (0: all cores)")->capture_default_str();
  eval->add_option("--seed", seed, "master seed")->capture_default_str();
  eval->add_option("--out", eval_out, "result CSV")->required();

  // context-test
  auto* ctx = app.add_subcommand("context-test", "permutation test for context effects");
  std::string ctx_model, ctx_data, ctx_targets, ctx_visits = "enumerate", ctx_tail = "paper", ctx_stat = "row-mean", ctx_out;
  std::size_t ctx_M = 1000;
  double ctx_delta = 1.0;
  ctx->add_option("--model", ctx_model, "model JSON")->required()->check(CLI::ExistingFile);
  ctx->add_option("--data", ctx_data, "dataset CSV, checked for consistency with the model")->check(CLI::ExistingFile);
  ctx->add_option("--targets", ctx_targets, "target variables, comma separated (default: all outputs)");
  ctx->add_option("--visits", ctx_visits, "enumerate | sample:V")->capture_default_str();
  ctx->add_option("--M", ctx_M, "permutations")->capture_default_str();
  ctx->add_option("--delta", ctx_delta, "context bump")->capture_default_str();
  ctx->add_option("--tail", ctx_tail, "paper | upper | two-sided")->capture_default_str();
  ctx->add_option("--statistic", ctx_stat, "row-mean | row-mean-square")->capture_default_str();
  ctx->add_option("--seed", seed, "master seed")->capture_default_str();
  ctx->add_option("--out", ctx_out, "output directory")->required();

  // trajectory
  auto* traj = app.add_subcommand("trajectory", "per-prefix cumulant values");
  std::string traj_model, traj_data, traj_out, traj_latent;
  std::size_t traj_min_prefix = 2;
  traj->add_option("--model", traj_model, "model JSON")->required()->check(CLI::ExistingFile);
  traj->add_option("--data", traj_data, "dataset CSV")->required()->check(CLI::ExistingFile);
  traj->add_option("--latent", traj_latent, "latent-state CSV; adds z and correlations")->check(CLI::ExistingFile);
  traj->add_option("--min-prefix", traj_min_prefix, "first target position")->capture_default_str();
  traj->add_option("--out", traj_out, "trajectory CSV")->required();

  CLI11_PARSE(app, argc, argv);

  auto visits_for = [](const std::string& spec, std::size_t p, std::uint64_t s) {
    if (spec == "enumerate") return enumerate_visits(p);
    if (spec.rfind("sample:", 0) == 0) {
      const std::size_t V = parse_list(spec.substr(7)).front();
      Rng rng = make_rng(s, Stream::kVisits);
      return sample_visits(p, V, rng);
    }
    throw Error("--visits must be 'enumerate' or 'sample:V'");
  };

  try {
    if (sim->parsed()) {
      SimConfig cfg = sim_flags.cfg;
      cfg.seed = seed;
      const auto data = generate_dataset(sim_n, cfg);
      save_dataset(sim_out, sequences_of(data));
      save_latent(sim_latent.empty() ? sibling(sim_out, "_latent.csv") : sim_latent, data);
    } else if (train->parsed()) {
      const auto data = load_dataset(train_data, load_options(binarize));
      TrainConfig cfg = train_flags.cfg;
      cfg.seed = seed;
      const std::size_t q = train_q == 0 ? data.front().p() : train_q;
      const auto result = fit(data, cfg, q, [&](std::size_t epoch, double loss, const ModelParams&) {
        if ((epoch + 1) % 10 == 0) std::clog << "epoch " << epoch + 1 << " loss " << loss << '\n';
      });
      save_model(train_model, result.params, seed, cfg);
      save_loss_history(train_loss.empty() ? sibling(train_model, "_loss.csv") : train_loss, result.loss_history);
    } else if (pred->parsed()) {
      const auto model = load_model(pred_model);
      const auto data = load_dataset(pred_data, load_options(binarize));
      require_same_p(model, data);
      std::vector<Sequence> out;
      for (const auto& s : data) {
        if (s.size() < 2) {
          std::clog << "skipping sequence " << s.id << ": fewer than two observations\n";
          continue;
        }
        const auto y = predict<double>(std::span<const Observation>(s.obs).first(s.size() - 1), s.obs.back().t, model);
        out.push_back(Sequence{s.id, {make_observation(y, s.obs.back().t)}});
      }
      save_dataset(pred_out, out);
    } else if (eval->parsed()) {
      TrainConfig tc = eval_train.cfg;
      if (mode == "sim") {
        SimStudyConfig study{parse_list(ns), reps, test_n, seed, threads};
        const auto rows = run_sim_study(study, eval_sim.cfg, tc, [](const std::string& m) { std::clog << m << '\n'; });
        save_metric_csv(eval_out, rows);
        std::cout << metric_table(rows, eval_sim.cfg.j3);
      } else if (mode == "test") {
        TestStudyConfig study;
        study.n = n_test_study;
        study.reps = reps;
        study.seed = seed;
        study.threads = threads;
        if (visits_spec != "enumerate") {
          if (visits_spec.rfind("sample:", 0) != 0) throw Error("--visits must be 'enumerate' or 'sample:V'");
          study.sample_visits = parse_list(visits_spec.substr(7)).front();
        }
        TestConfig test_cfg;
        test_cfg.permutations = eval_M;
        const Tail tail = parse_tail(tail_name);
        const auto res = run_test_study(study, eval_sim.cfg, tc, test_cfg, {tail});
        auto o = open_out(eval_out);
        o << "variable,mean_p,sd_p\n";
        std::vector<std::vector<std::string>> body;
        for (std::size_t j = 0; j < eval_sim.cfg.p; ++j) {
          o << 'v' << j + 1 << ',' << fmt(res.mean[0][j]) << ',' << fmt(res.sd[0][j]) << '\n';
          body.push_back({"v" + std::to_string(j + 1), pm(res.mean[0][j], res.sd[0][j], 4)});
        }
        finish(o, eval_out);
        std::cout << "tail: " << to_string(tail) << ", target v" << res.target << '\n'
                  << format_table({"variable", "p-value"}, body);
      } else {
        if (eval_data.empty()) throw Error("--mode cv requires --data");
        const auto data = load_dataset(eval_data, load_options(binarize));
        const auto rep = run_cv(data, k, tc, target, seed, threads);
        save_cv_csv(eval_out, rep);
        std::cout << cv_table(rep);
      }
    } else if (ctx->parsed()) {
      const auto model = load_model(ctx_model);
      if (!ctx_data.empty()) require_same_p(model, load_dataset(ctx_data));
      const std::size_t p = model.p();
      std::vector<std::size_t> targets;
      if (ctx_targets.empty()) {
        for (std::size_t r = 1; r <= model.q(); ++r) targets.push_back(r);
      } else {
        targets = parse_list(ctx_targets);
      }
      TestConfig cfg;
      cfg.context_base.assign(p, 0.0);
      cfg.delta = ctx_delta;
      cfg.visits = visits_for(ctx_visits, p, seed);
      cfg.permutations = ctx_M;
      cfg.statistic = parse_statistic(ctx_stat);
      cfg.tail = parse_tail(ctx_tail);
      cfg.seed = seed;
      std::vector<DeltaMatrix> deltas;
      const StatMatrix S = stat_matrix(model, cfg, targets, &deltas);

      fs::create_directories(ctx_out);
      const fs::path dir(ctx_out);
      std::vector<std::string> visit_labels;
      for (const auto& v : cfg.visits) {
        std::string code;
        for (double x : v) code += x == 1.0 ? '1' : '0';
        visit_labels.push_back("visit_" + code);
      }
      for (const auto& d : deltas) {
        save_matrix_csv((dir / ("delta_v" + std::to_string(d.target) + ".csv")).string(),
                        LabeledMatrix{"context", var_labels(p), visit_labels, d.entries});
      }
      std::vector<std::string> target_labels;
      for (auto r : targets) target_labels.push_back("v" + std::to_string(r));
      const LabeledMatrix stats{"context", var_labels(p), target_labels, S.entries};
      save_matrix_csv((dir / "statistics.csv").string(), stats);
      save_matrix_csv((dir / "pvalues.csv").string(), LabeledMatrix{"context", var_labels(p), target_labels, S.pvals});
      save_heatmap((dir / "heatmap.svg").string(), stats, "context effect (" + to_string(cfg.statistic) + ")");
      std::cout << "tail: " << to_string(cfg.tail) << ", V=" << cfg.visits.size() << ", M=" << cfg.permutations << '\n';
    } else if (traj->parsed()) {
      const auto model = load_model(traj_model);
      const auto data = load_dataset(traj_data);
      require_same_p(model, data);
      std::optional<RecoveryReport> rec;
      if (!traj_latent.empty()) rec = cumulant_recovery(model, load_latent(traj_latent, data), traj_min_prefix);
      auto o = open_out(traj_out);
      o << "id,position,time";
      for (std::size_t c = 1; c <= model.n_cumulants(); ++c) o << ",c" << c;
      if (rec) o << ",z";
      o << '\n';
      if (rec) {
        for (const auto& pt : rec->points) {
          o << pt.id << ',' << pt.position << ',' << fmt(pt.t);
          for (double v : pt.cumulants) o << ',' << fmt(v);
          o << ',' << pt.z << '\n';
        }
      } else {
        for (const auto& s : data) {
          const auto tr = cumulant_trajectory(s, model, traj_min_prefix);
          for (std::size_t r = 0; r < tr.rows.size(); ++r) {
            o << s.id << ',' << traj_min_prefix + r << ',' << fmt(tr.times[r]);
            for (double v : tr.rows[r]) o << ',' << fmt(v);
            o << '\n';
          }
        }
      }
      finish(o, traj_out);
      if (rec) {
        for (std::size_t c = 0; c < rec->correlation.size(); ++c) {
          std::cout << "c" << c + 1 << " correlation with z: " << fixed(rec->correlation[c])
                    << (rec->degenerate[c] ? " (zero variance)" : "") << '\n';
        }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
