/*
 * Copyright 2026 The cohortfx Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Logistic regression by IRLS, least squares with HC1 errors, and L1
// regularisation paths by coordinate descent. Intercepts are always implicit:
// a DesignMatrix never contains a constant column for them.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "cohortfx/error.hpp"
#include "cohortfx/rng.hpp"

namespace cohortfx::glm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DesignMatrix {
  MatrixXd values;
  std::vector<std::string> names;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  void validate() const {
    if (static_cast<Eigen::Index>(names.size()) != values.cols())
      throw Error(fmt::format("design matrix has {} columns but {} names", values.cols(), names.size()));
    std::unordered_set<std::string> seen;
    for (const auto& n : names)
      if (!seen.insert(n).second) throw Error("design matrix: duplicate column name '" + n + "'");
    if (!values.allFinite()) throw Error("design matrix contains missing or non-finite values");
  }

  /// The same rows restricted to `keep` (indices into names).
  DesignMatrix select_columns(std::span<const std::size_t> keep) const {
    DesignMatrix out;
    out.values.resize(values.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) {
      out.values.col(static_cast<Eigen::Index>(j)) = values.col(static_cast<Eigen::Index>(keep[j]));
      out.names.push_back(names[keep[j]]);
    }
    return out;
  }

  DesignMatrix select_rows(std::span<const std::size_t> rows_) const {
    DesignMatrix out{MatrixXd(static_cast<Eigen::Index>(rows_.size()), values.cols()), names};
    for (std::size_t i = 0; i < rows_.size(); ++i)
      out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(rows_[i]));
    return out;
  }
};

/// [1 | X]
inline MatrixXd with_intercept(const MatrixXd& x) {
  MatrixXd out(x.rows(), x.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(x.cols()) = x;
  return out;
}

enum class Family { logistic, linear };

inline std::string_view family_name(Family f) { return f == Family::logistic ? "logistic" : "linear"; }

struct Convergence {
  int iterations = 0;
  double gradient_norm = 0.0;  // max-norm at the returned coefficients
  bool converged = false;
  std::vector<double> loglik_history;  // logistic: one entry per accepted iterate, starting at zero
};

struct FittedModel {
  Family family = Family::linear;
  std::vector<std::string> names;
  VectorXd coefficients;      // [intercept, beta_1..beta_p]
  VectorXd standard_errors;   // same layout; empty for the logistic family
  MatrixXd covariance;        // robust covariance (linear family)
  Convergence convergence;

  double intercept() const { return coefficients(0); }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t j = 0; j < names.size(); ++j)
      if (names[j] == name) return j + 1;
    throw Error("model has no coefficient named '" + std::string(name) + "'");
  }
  double coefficient(std::string_view name) const { return coefficients(static_cast<Eigen::Index>(index_of(name))); }
  double standard_error(std::string_view name) const {
    return standard_errors(static_cast<Eigen::Index>(index_of(name)));
  }
};

// ---------------------------------------------------------------------------
// Logistic likelihood pieces

inline double sigmoid(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  double e = std::exp(eta);
  return e / (1.0 + e);
}

/// log(1 + exp(eta)) without overflow.
inline double log1p_exp(double eta) {
  return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
}

/// Log-likelihood at coefficients [intercept, beta].
inline double logistic_loglik(const MatrixXd& x1, const VectorXd& y, const VectorXd& coef) {
  VectorXd eta = x1 * coef;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - log1p_exp(eta(i));
  return ll;
}

inline VectorXd logistic_gradient(const MatrixXd& x1, const VectorXd& y, const VectorXd& coef) {
  VectorXd eta = x1 * coef;
  VectorXd resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) resid(i) = y(i) - sigmoid(eta(i));
  return x1.transpose() * resid;
}

struct LogisticOptions {
  double tol = 1e-8;
  int max_iter = 50;
  double ridge = 0.0;               // penalty ridge/2 * |beta|^2, intercept unpenalised
  double separation_eta = 30.0;     // |linear index| beyond which fitted probabilities are degenerate
};

inline void check_binary(std::span<const double> y) {
  for (double v : y)
    if (v != 0.0 && v != 1.0) throw Error(fmt::format("logistic outcome must be 0/1, got {}", v));
}

/// Newton-Raphson (IRLS) with step halving. The log-likelihood is
/// non-decreasing over the recorded history, up to rounding once the
/// Newton decrement falls below 1e-10 relative.
inline FittedModel fit_logistic_irls(const DesignMatrix& x, std::span<const double> y,
                                     const LogisticOptions& opt = {}) {
  x.validate();
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw Error("fit_logistic_irls: y size mismatch");
  check_binary(y);
  const Eigen::Index n = x.rows(), k = x.cols() + 1;
  MatrixXd x1 = with_intercept(x.values);
  VectorXd yv = Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));

  VectorXd penalty_mask = VectorXd::Ones(k);
  penalty_mask(0) = 0.0;
  auto objective = [&](const VectorXd& b) {
    return logistic_loglik(x1, yv, b) - 0.5 * opt.ridge * b.cwiseProduct(penalty_mask).squaredNorm();
  };
  auto gradient = [&](const VectorXd& b) {
    return VectorXd(logistic_gradient(x1, yv, b) - opt.ridge * b.cwiseProduct(penalty_mask));
  };

  FittedModel fit;
  fit.family = Family::logistic;
  fit.names = x.names;
  VectorXd beta = VectorXd::Zero(k);
  double ll = objective(beta);
  fit.convergence.loglik_history.push_back(ll);

  VectorXd grad = gradient(beta);
  int iter = 0;
  for (; iter < opt.max_iter && grad.lpNorm<Eigen::Infinity>() > opt.tol; ++iter) {
    VectorXd eta = x1 * beta;
    VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double p = sigmoid(eta(i));
      w(i) = p * (1.0 - p);
    }
    MatrixXd hess = x1.transpose() * w.asDiagonal() * x1;
    hess.diagonal() += opt.ridge * penalty_mask;
    Eigen::LDLT<MatrixXd> ldlt(hess);
    if (ldlt.info() != Eigen::Success) throw SeparationError("logistic Hessian is singular");
    VectorXd step = ldlt.solve(grad);
    if (!step.allFinite())
      throw SeparationError("logistic Newton step is not finite; data may be separable (try ridge)");

    // Near the optimum the predicted gain g'H^-1 g / 2 drops below the
    // rounding noise of the log-likelihood, so comparisons stop being
    // informative; take the full Newton step there.
    const double decrement = 0.5 * grad.dot(step);
    const bool in_noise = decrement <= 1e-10 * std::max(1.0, std::abs(ll));
    double t = 1.0;
    VectorXd cand = beta + step;
    double ll_cand = objective(cand);
    int halvings = 0;
    while (!in_noise && !(ll_cand >= ll) && halvings < 40) {
      t *= 0.5;
      cand = beta + t * step;
      ll_cand = objective(cand);
      ++halvings;
    }
    if (!in_noise && !(ll_cand >= ll)) break;  // no ascent direction left at working precision
    beta = cand;
    ll = ll_cand;
    fit.convergence.loglik_history.push_back(ll);
    grad = gradient(beta);
  }
  fit.coefficients = beta;
  fit.convergence.iterations = iter;
  fit.convergence.gradient_norm = grad.lpNorm<Eigen::Infinity>();
  fit.convergence.converged = fit.convergence.gradient_norm <= opt.tol;

  double max_eta = (x1 * beta).cwiseAbs().maxCoeff();
  if (opt.ridge == 0.0 && max_eta > opt.separation_eta)
    throw SeparationError(fmt::format(
        "logistic fit degenerate (max |linear index| {:.1f}): classes are (quasi-)separated; "
        "consider the ridge option (e.g. 1e-6)",
        max_eta));
  if (!fit.convergence.converged)
    throw Error(fmt::format("logistic IRLS did not converge in {} iterations (gradient {:.3g})", iter,
                            fit.convergence.gradient_norm));
  return fit;
}

inline std::vector<double> predict_proba(const FittedModel& model, const DesignMatrix& x) {
  if (model.family != Family::logistic) throw Error("predict_proba requires a logistic model");
  if (x.names != model.names) throw Error("predict_proba: columns do not match the training design");
  x.validate();
  VectorXd eta = with_intercept(x.values) * model.coefficients;
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  std::vector<double> p(static_cast<std::size_t>(eta.size()));
  for (Eigen::Index i = 0; i < eta.size(); ++i) p[static_cast<std::size_t>(i)] = std::clamp(sigmoid(eta(i)), lo, hi);
  return p;
}

// ---------------------------------------------------------------------------
// Least squares

/// OLS with HC1 heteroskedasticity-robust covariance.
inline FittedModel fit_ols_robust(const DesignMatrix& x, std::span<const double> y) {
  x.validate();
  const Eigen::Index n = x.rows(), k = x.cols() + 1;
  if (static_cast<Eigen::Index>(y.size()) != n) throw Error("fit_ols_robust: y size mismatch");
  if (n <= k) throw Error(fmt::format("fit_ols_robust: {} rows for {} coefficients", n, k));

  MatrixXd x1 = with_intercept(x.values);
  VectorXd yv = Eigen::Map<const VectorXd>(y.data(), n);
  Eigen::ColPivHouseholderQR<MatrixXd> qr(x1);
  qr.setThreshold(1e-10);
  if (qr.rank() < k) {
    std::string cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index j = qr.rank(); j < k; ++j) {
      auto c = perm(j);
      if (!cols.empty()) cols += ", ";
      cols += c == 0 ? std::string("(intercept)") : x.names[static_cast<std::size_t>(c - 1)];
    }
    throw Error("fit_ols_robust: design is rank deficient; collinear columns: " + cols);
  }

  FittedModel fit;
  fit.family = Family::linear;
  fit.names = x.names;
  fit.coefficients = qr.solve(yv);
  VectorXd resid = yv - x1 * fit.coefficients;

  // (X'X)^-1 = P R^-1 R^-T P'
  MatrixXd r = qr.matrixR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
  MatrixXd rinv = r.template triangularView<Eigen::Upper>().solve(MatrixXd::Identity(k, k));
  MatrixXd bread_perm = rinv * rinv.transpose();
  MatrixXd bread = qr.colsPermutation() * bread_perm * qr.colsPermutation().transpose();
  MatrixXd meat = x1.transpose() * resid.array().square().matrix().asDiagonal() * x1;
  double hc1 = static_cast<double>(n) / static_cast<double>(n - k);
  fit.covariance = hc1 * bread * meat * bread;
  fit.standard_errors = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.convergence.converged = true;
  fit.convergence.gradient_norm = (x1.transpose() * resid).lpNorm<Eigen::Infinity>();
  return fit;
}

// ---------------------------------------------------------------------------
// L1 paths

struct LassoOptions {
  int n_lambda = 100;
  double lambda_min_ratio = 1e-3;
  std::vector<double> lambdas;  // explicit grid overrides n_lambda/ratio
  double tol = 1e-12;           // coordinate change threshold (standardised scale)
  double kkt_tol = 1e-9;        // outer stopping rule for the logistic family
  int max_sweeps = 200000;
  int max_outer = 500;
};

struct LassoPath {
  Family family = Family::linear;
  std::vector<std::string> names;            // retained (non-constant) predictors
  std::vector<std::string> dropped_constant;
  std::vector<double> lambdas;
  VectorXd center, scale;                    // standardisation used internally
  std::vector<VectorXd> beta_std;            // standardised-scale coefficients
  std::vector<double> intercept_std;
  std::vector<VectorXd> beta;                // original-scale coefficients
  std::vector<double> intercept;
  double lambda_max = 0.0;
  std::vector<std::string> warnings;

  std::vector<std::string> active_set(std::size_t index) const {
    std::vector<std::string> out;
    for (Eigen::Index j = 0; j < beta_std[index].size(); ++j)
      if (beta_std[index](j) != 0.0) out.push_back(names[static_cast<std::size_t>(j)]);
    return out;
  }
};

inline double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

struct Standardized {
  MatrixXd z;
  VectorXd center, scale;
  std::vector<std::size_t> kept;
  std::vector<std::string> dropped;
};

/// Centres each column and scales it to unit population variance; constant
/// columns are removed.
inline Standardized standardize(const DesignMatrix& x) {
  Standardized s;
  const Eigen::Index n = x.rows();
  std::vector<double> means, sds;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double m = x.values.col(j).mean();
    double sd = std::sqrt((x.values.col(j).array() - m).square().sum() / static_cast<double>(n));
    if (sd <= 1e-12 * std::max(1.0, std::abs(m))) {
      s.dropped.push_back(x.names[static_cast<std::size_t>(j)]);
      continue;
    }
    s.kept.push_back(static_cast<std::size_t>(j));
    means.push_back(m);
    sds.push_back(sd);
  }
  const auto p = static_cast<Eigen::Index>(s.kept.size());
  s.z.resize(n, p);
  s.center.resize(p);
  s.scale.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    auto sj = static_cast<std::size_t>(j);
    s.center(j) = means[sj];
    s.scale(j) = sds[sj];
    s.z.col(j) = (x.values.col(static_cast<Eigen::Index>(s.kept[sj])).array() - means[sj]) / sds[sj];
  }
  return s;
}

namespace detail {

// Coordinate descent for (1/2n) sum_i w_i r_i^2 + lambda |beta|_1, where
// r = target - b0 - Z beta. Works on gradients c = A'W r / n of the augmented
// design A = [1 | Z] and updates them with lazily built Gram columns, so a
// coordinate step costs O(p) instead of O(n).
class GramCd {
 public:
  GramCd(const MatrixXd& z, const VectorXd* w, bool fit_intercept)
      : z_(z), w_(w ? *w : VectorXd::Ones(z.rows())), off_(fit_intercept ? 1 : 0) {
    const Eigen::Index dim = z.cols() + off_;
    cols_.resize(static_cast<std::size_t>(dim));
    have_.assign(static_cast<std::size_t>(dim), 0);
    diag_.resize(dim);
    const auto n = static_cast<double>(z.rows());
    if (off_) diag_(0) = w_.sum() / n;
    for (Eigen::Index j = 0; j < z.cols(); ++j) diag_(j + off_) = z.col(j).cwiseAbs2().dot(w_) / n;
  }

  /// Minimises from the given start; resid must equal target - b0 - Z beta on
  /// entry and is kept consistent. Returns the number of sweeps.
  int solve(VectorXd& resid, double& b0, VectorXd& beta, double lambda, double tol, int max_sweeps) {
    const Eigen::Index p = z_.cols(), dim = p + off_;
    VectorXd coef(dim);
    if (off_) coef(0) = b0;
    coef.tail(p) = beta;
    const VectorXd start = coef;
    int sweeps = 0;
    for (int refresh = 0; refresh < 4 && sweeps < max_sweeps; ++refresh) {
      VectorXd c = gradient(resid);
      bool changed_any = false;
      bool full = true;
      while (sweeps < max_sweeps) {
        double max_change = 0.0;
        for (Eigen::Index k = 0; k < dim; ++k) {
          if (!full && coef(k) == 0.0 && k >= off_) continue;
          double v = diag_(k);
          if (!(v > 0.0)) continue;
          double old = coef(k);
          double upd = k < off_ ? old + c(k) / v : soft_threshold(c(k) + v * old, lambda) / v;
          double delta = upd - old;
          if (delta == 0.0) continue;
          c -= delta * column(k);
          coef(k) = upd;
          max_change = std::max(max_change, std::abs(delta) * std::sqrt(v));
        }
        ++sweeps;
        if (max_change >= tol) {
          changed_any = true;
          full = false;
          continue;
        }
        if (full) break;
        full = true;  // active set settled: confirm with a sweep over every coordinate
      }
      VectorXd delta = coef - (refresh == 0 ? start : last_);
      last_ = coef;
      if (off_) resid.array() -= delta(0);
      resid -= z_ * delta.tail(p);
      if (!changed_any) break;
    }
    if (off_) b0 = coef(0);
    beta = coef.tail(p);
    return sweeps;
  }

 private:
  VectorXd gradient(const VectorXd& resid) const {
    const auto n = static_cast<double>(z_.rows());
    VectorXd wr = w_.cwiseProduct(resid);
    VectorXd c(z_.cols() + off_);
    if (off_) c(0) = wr.sum() / n;
    c.tail(z_.cols()) = z_.transpose() * wr / n;
    return c;
  }

  const VectorXd& column(Eigen::Index k) {
    auto sk = static_cast<std::size_t>(k);
    if (!have_[sk]) {
      const auto n = static_cast<double>(z_.rows());
      VectorXd wa = k < off_ ? w_ : VectorXd(w_.cwiseProduct(z_.col(k - off_)));
      VectorXd g(z_.cols() + off_);
      if (off_) g(0) = wa.sum() / n;
      g.tail(z_.cols()) = z_.transpose() * wa / n;
      cols_[sk] = std::move(g);
      have_[sk] = 1;
    }
    return cols_[sk];
  }

  const MatrixXd& z_;
  VectorXd w_;
  Eigen::Index off_;
  std::vector<VectorXd> cols_;
  std::vector<char> have_;
  VectorXd diag_;
  VectorXd last_;
};

inline double logistic_penalised_objective(const MatrixXd& z, const VectorXd& y, double b0, const VectorXd& beta,
                                           double lambda) {
  VectorXd eta = (z * beta).array() + b0;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) nll -= y(i) * eta(i) - log1p_exp(eta(i));
  return nll / static_cast<double>(z.rows()) + lambda * beta.lpNorm<1>();
}

}  // namespace detail

/// Maximum KKT violation of a standardised-scale solution: intercept score,
/// |g_j| - lambda for zero coefficients, |g_j - lambda sign(b_j)| otherwise.
inline double lasso_kkt_residual(const MatrixXd& z, const VectorXd& y, Family family, double b0,
                                 const VectorXd& beta, double lambda) {
  const auto n = static_cast<double>(z.rows());
  VectorXd eta = (z * beta).array() + b0;
  VectorXd r(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    r(i) = y(i) - (family == Family::logistic ? sigmoid(eta(i)) : eta(i));
  double worst = std::abs(r.sum() / n);
  VectorXd g = z.transpose() * r / n;
  for (Eigen::Index j = 0; j < g.size(); ++j) {
    double v = beta(j) == 0.0 ? std::max(0.0, std::abs(g(j)) - lambda)
                              : std::abs(g(j) - lambda * (beta(j) > 0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

/// Geometric grid of n points from lambda_max down to lambda_max * ratio.
inline std::vector<double> lambda_grid(double lambda_max, int n, double ratio) {
  std::vector<double> out;
  if (n == 1) return {lambda_max};
  for (int i = 0; i < n; ++i)
    out.push_back(lambda_max * std::pow(ratio, static_cast<double>(i) / static_cast<double>(n - 1)));
  return out;
}

/// lambda_max: the smallest penalty whose solution is all zero.
inline double lasso_lambda_max(const MatrixXd& z, const VectorXd& y) {
  if (z.cols() == 0) return 0.0;
  VectorXd yc = y.array() - y.mean();
  return (z.transpose() * yc).cwiseAbs().maxCoeff() / static_cast<double>(z.rows());
}

inline LassoPath fit_lasso_path(const DesignMatrix& x, std::span<const double> y, Family family,
                                const LassoOptions& opt = {}) {
  x.validate();
  const Eigen::Index n = x.rows();
  if (static_cast<Eigen::Index>(y.size()) != n) throw Error("fit_lasso_path: y size mismatch");
  if (family == Family::logistic) check_binary(y);
  VectorXd yv = Eigen::Map<const VectorXd>(y.data(), n);

  Standardized st = standardize(x);
  LassoPath path;
  path.family = family;
  for (auto j : st.kept) path.names.push_back(x.names[j]);
  path.dropped_constant = st.dropped;
  for (const auto& d : st.dropped) path.warnings.push_back("constant column '" + d + "' dropped");
  path.center = st.center;
  path.scale = st.scale;
  path.lambda_max = lasso_lambda_max(st.z, yv);
  path.lambdas = opt.lambdas.empty() ? lambda_grid(path.lambda_max, opt.n_lambda, opt.lambda_min_ratio) : opt.lambdas;

  const Eigen::Index p = st.z.cols();
  const double ybar = yv.mean();
  VectorXd beta = VectorXd::Zero(p);

  if (family == Family::linear) {
    double b0 = 0.0;
    VectorXd resid = yv.array() - ybar;
    detail::GramCd cd(st.z, nullptr, false);
    for (double lambda : path.lambdas) {
      cd.solve(resid, b0, beta, lambda, opt.tol, opt.max_sweeps);
      path.beta_std.push_back(beta);
      path.intercept_std.push_back(ybar);
    }
  } else {
    if (ybar <= 0.0 || ybar >= 1.0) throw Error("fit_lasso_path: logistic outcome has a single class");
    double b0 = std::log(ybar / (1.0 - ybar));
    for (double lambda : path.lambdas) {
      for (int outer = 0; outer < opt.max_outer; ++outer) {
        VectorXd eta = (st.z * beta).array() + b0;
        VectorXd w(n), target(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          double pr = sigmoid(eta(i));
          w(i) = std::max(pr * (1.0 - pr), 1e-5);
          target(i) = eta(i) + (yv(i) - pr) / w(i);
        }
        double nb0 = b0;
        VectorXd nbeta = beta;
        VectorXd resid = target - eta;
        detail::GramCd cd(st.z, &w, true);
        cd.solve(resid, nb0, nbeta, lambda, opt.tol, opt.max_sweeps);

        // Backtrack along the proximal-Newton direction if the objective rose.
        double f_old = detail::logistic_penalised_objective(st.z, yv, b0, beta, lambda);
        double f_new = detail::logistic_penalised_objective(st.z, yv, nb0, nbeta, lambda);
        double t = 1.0;
        for (int h = 0; h < 30 && f_new > f_old + 1e-15 * std::abs(f_old); ++h) {
          t *= 0.5;
          f_new = detail::logistic_penalised_objective(st.z, yv, b0 + t * (nb0 - b0),
                                                       beta + t * (nbeta - beta), lambda);
        }
        b0 += t * (nb0 - b0);
        beta += t * (nbeta - beta);
        if (lasso_kkt_residual(st.z, yv, family, b0, beta, lambda) <= opt.kkt_tol) break;
      }
      path.beta_std.push_back(beta);
      path.intercept_std.push_back(b0);
    }
  }

  for (std::size_t k = 0; k < path.lambdas.size(); ++k) {
    VectorXd b = path.beta_std[k].cwiseQuotient(path.scale);
    path.beta.push_back(b);
    path.intercept.push_back(path.intercept_std[k] - b.dot(path.center));
  }
  return path;
}

/// Linear predictor of path point `index` on an original-scale design with
/// the same columns the path was fitted on (constant columns included).
inline VectorXd lasso_linear_predictor(const LassoPath& path, std::size_t index, const DesignMatrix& x) {
  VectorXd eta = VectorXd::Constant(x.rows(), path.intercept[index]);
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(path.names.size()); ++j) {
    auto it = std::find(x.names.begin(), x.names.end(), path.names[static_cast<std::size_t>(j)]);
    if (it == x.names.end()) throw Error("lasso_linear_predictor: missing column " + path.names[static_cast<std::size_t>(j)]);
    eta += path.beta[index](j) * x.values.col(it - x.names.begin());
  }
  return eta;
}

// ---------------------------------------------------------------------------
// Cross-validation

enum class CvRule { min, one_se };

struct CvOptions {
  int folds = 10;
  CvRule rule = CvRule::min;
  std::uint64_t seed = 1;
  LassoOptions lasso;
};

struct CvResult {
  std::vector<double> lambdas;
  std::vector<double> cv_mean;  // mean held-out loss per grid point
  std::vector<double> cv_se;
  std::vector<int> fold_of;     // fold index per row
  std::size_t index_min = 0;
  std::size_t index_selected = 0;
  double lambda = 0.0;
  std::vector<std::string> active_set;
  LassoPath full_path;
};

/// Deterministic fold labels. Logistic outcomes are stratified so every
/// fold sees both classes; that needs at least `folds` rows of each class.
inline std::vector<int> make_folds(std::span<const double> y, Family family, int folds, std::uint64_t seed) {
  if (folds < 2) throw Error("cv: need at least 2 folds");
  const std::size_t n = y.size();
  if (n < static_cast<std::size_t>(folds)) throw Error("cv: fewer rows than folds");
  auto eng = rng::substream(seed, rng::kFoldStreams);
  std::vector<int> fold(n, 0);
  auto deal = [&](std::vector<std::size_t> idx, int offset) {
    std::shuffle(idx.begin(), idx.end(), eng);
    for (std::size_t i = 0; i < idx.size(); ++i) fold[idx[i]] = static_cast<int>((i + static_cast<std::size_t>(offset)) % static_cast<std::size_t>(folds));
    return static_cast<int>((idx.size() + static_cast<std::size_t>(offset)) % static_cast<std::size_t>(folds));
  };
  if (family == Family::logistic) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < n; ++i) (y[i] == 1.0 ? pos : neg).push_back(i);
    if (pos.size() < static_cast<std::size_t>(folds) || neg.size() < static_cast<std::size_t>(folds))
      throw Error(fmt::format("cv: cannot stratify {} folds with {} positive / {} negative rows", folds,
                              pos.size(), neg.size()));
    int off = deal(std::move(pos), 0);
    deal(std::move(neg), off);
  } else {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    deal(std::move(all), 0);
  }
  return fold;
}

inline CvResult cv_select_lambda(const DesignMatrix& x, std::span<const double> y, Family family,
                                 const CvOptions& opt = {}) {
  CvResult res;
  res.full_path = fit_lasso_path(x, y, family, opt.lasso);
  res.lambdas = res.full_path.lambdas;
  res.fold_of = make_folds(y, family, opt.folds, opt.seed);
  const std::size_t grid = res.lambdas.size();

  LassoOptions fold_opt = opt.lasso;
  fold_opt.lambdas = res.lambdas;
  std::vector<std::vector<double>> fold_loss(static_cast<std::size_t>(opt.folds), std::vector<double>(grid, 0.0));
  for (int f = 0; f < opt.folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < y.size(); ++i) (res.fold_of[i] == f ? test : train).push_back(i);
    std::vector<double> ytr, yte;
    for (auto i : train) ytr.push_back(y[i]);
    for (auto i : test) yte.push_back(y[i]);
    DesignMatrix xtr = x.select_rows(train), xte = x.select_rows(test);
    LassoPath fp = fit_lasso_path(xtr, ytr, family, fold_opt);
    for (std::size_t k = 0; k < grid; ++k) {
      VectorXd eta = lasso_linear_predictor(fp, k, xte);
      double loss = 0.0;
      for (Eigen::Index i = 0; i < eta.size(); ++i) {
        double yi = yte[static_cast<std::size_t>(i)];
        if (family == Family::linear) {
          loss += (yi - eta(i)) * (yi - eta(i));
        } else {
          loss += 2.0 * (log1p_exp(eta(i)) - yi * eta(i));  // deviance
        }
      }
      fold_loss[static_cast<std::size_t>(f)][k] = loss / static_cast<double>(test.size());
    }
  }
  res.cv_mean.assign(grid, 0.0);
  res.cv_se.assign(grid, 0.0);
  const auto nf = static_cast<double>(opt.folds);
  for (std::size_t k = 0; k < grid; ++k) {
    double m = 0.0;
    for (const auto& fl : fold_loss) m += fl[k];
    m /= nf;
    double v = 0.0;
    for (const auto& fl : fold_loss) v += (fl[k] - m) * (fl[k] - m);
    res.cv_mean[k] = m;
    res.cv_se[k] = std::sqrt(v / (nf - 1.0) / nf);
  }
  res.index_min = static_cast<std::size_t>(std::min_element(res.cv_mean.begin(), res.cv_mean.end()) - res.cv_mean.begin());
  res.index_selected = res.index_min;
  if (opt.rule == CvRule::one_se) {
    double bound = res.cv_mean[res.index_min] + res.cv_se[res.index_min];
    for (std::size_t k = 0; k <= res.index_min; ++k) {
      if (res.cv_mean[k] <= bound) {
        res.index_selected = k;
        break;
      }
    }
  }
  res.lambda = res.lambdas[res.index_selected];
  res.active_set = res.full_path.active_set(res.index_selected);
  return res;
}

}  // namespace cohortfx::glm
