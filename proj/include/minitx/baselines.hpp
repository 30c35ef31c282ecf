#pragma once

// Reference predictors: training mean, previous-time-point linear regression,
// the structure-informed conditional mean, and carry-forward.

#include <Eigen/Dense>

#include <cstddef>
#include <iostream>
#include <span>
#include <vector>

#include "minitx/error.hpp"
#include "minitx/model.hpp"

namespace minitx {

/// Per-variable mean over every observation of the training data.
struct AveragePredictor {
  std::vector<double> means;

  std::vector<double> predict(std::span<const Observation> /*prefix*/) const { return means; }
};

inline AveragePredictor fit_average(std::span<const Sequence> train) {
  AveragePredictor out;
  std::size_t count = 0;
  for (const auto& s : train) {
    for (const auto& o : s.obs) {
      if (out.means.empty()) out.means.assign(o.p(), 0.0);
      if (o.p() != out.means.size()) throw Error("fit_average: inconsistent p");
      const auto v = o.variables();
      for (std::size_t j = 0; j < v.size(); ++j) out.means[j] += v[j];
      ++count;
    }
  }
  if (count == 0) throw Error("fit_average: no observations");
  for (double& m : out.means) m /= static_cast<double>(count);
  return out;
}

/// One linear model per variable on the full previous observation (constant
/// element included as intercept). coef is (p+1)×p: column j predicts
/// variable j.
struct RegressionPredictor {
  Eigen::MatrixXd coef;

  std::vector<double> predict(std::span<const Observation> prefix) const {
    if (prefix.empty()) throw Error("regression predict: empty prefix");
    const auto& x = prefix.back().x;
    const Eigen::Map<const Eigen::RowVectorXd> row(x.data(), static_cast<Eigen::Index>(x.size()));
    const Eigen::RowVectorXd y = row * coef;
    return {y.data(), y.data() + y.size()};
  }
};

/// Pooled consecutive pairs (x_i -> x_{i+1}) of all sequences as a design
/// matrix (rows are x_i including the constant) and response matrix.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> transition_design(std::span<const Sequence> train) {
  std::size_t pairs = 0;
  std::size_t p = 0;
  for (const auto& s : train) {
    if (s.size() >= 2) pairs += s.size() - 1;
    if (!s.obs.empty()) p = s.p();
  }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(pairs), static_cast<Eigen::Index>(p + 1));
  Eigen::MatrixXd Y(static_cast<Eigen::Index>(pairs), static_cast<Eigen::Index>(p));
  Eigen::Index row = 0;
  for (const auto& s : train) {
    if (s.p() != p && !s.obs.empty()) throw Error("transition_design: inconsistent p");
    for (std::size_t i = 0; i + 1 < s.size(); ++i, ++row) {
      for (std::size_t k = 0; k <= p; ++k) X(row, static_cast<Eigen::Index>(k)) = s.obs[i].x[k];
      for (std::size_t j = 0; j < p; ++j) Y(row, static_cast<Eigen::Index>(j)) = s.obs[i + 1].x[j + 1];
    }
  }
  return {std::move(X), std::move(Y)};
}

/// Ordinary least squares per variable; rank-deficient designs get the
/// minimum-norm solution.
inline RegressionPredictor fit_regression(std::span<const Sequence> train) {
  auto [X, Y] = transition_design(train);
  if (X.rows() == 0) throw Error("fit_regression: no transition pairs");
  RegressionPredictor out;
  out.coef = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(X).solve(Y);
  return out;
}

/// Average predictor except for j3, whose prediction is the mean of the next
/// j3 value stratified by the current value of j2.
struct InformedPredictor {
  std::vector<double> means;
  std::size_t j2 = 0;  // 1-based
  std::size_t j3 = 0;  // 1-based
  double cond_mean_j3[2] = {0.0, 0.0};
  bool fell_back[2] = {false, false};

  std::vector<double> predict(std::span<const Observation> prefix) const {
    if (prefix.empty()) throw Error("informed predict: empty prefix");
    std::vector<double> y = means;
    const int stratum = prefix.back().x[j2] == 1.0 ? 1 : 0;
    y[j3 - 1] = cond_mean_j3[stratum];
    return y;
  }
};

inline InformedPredictor fit_informed(std::span<const Sequence> train, std::size_t j2, std::size_t j3) {
  InformedPredictor out;
  out.means = fit_average(train).means;
  const std::size_t p = out.means.size();
  if (j2 < 1 || j2 > p || j3 < 1 || j3 > p) throw Error("fit_informed: index out of range");
  out.j2 = j2;
  out.j3 = j3;
  double sum[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  for (const auto& s : train) {
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const int stratum = s.obs[i].x[j2] == 1.0 ? 1 : 0;
      sum[stratum] += s.obs[i + 1].x[j3];
      ++count[stratum];
    }
  }
  for (int k = 0; k < 2; ++k) {
    if (count[k] == 0) {
      out.cond_mean_j3[k] = out.means[j3 - 1];
      out.fell_back[k] = true;
      std::clog << "fit_informed: no transitions with previous j2=" << k << ", using the unconditional mean\n";
    } else {
      out.cond_mean_j3[k] = sum[k] / static_cast<double>(count[k]);
    }
  }
  return out;
}

/// Variables of the last observation of the prefix.
inline std::vector<double> carry_forward(std::span<const Observation> prefix) {
  if (prefix.empty()) throw Error("carry_forward: empty prefix");
  const auto v = prefix.back().variables();
  return {v.begin(), v.end()};
}

struct CarryForwardPredictor {
  std::vector<double> predict(std::span<const Observation> prefix) const { return carry_forward(prefix); }
};

}  // namespace minitx
