#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "carlab/allocation.hpp"
#include "carlab/engine.hpp"
#include "carlab/errors.hpp"
#include "carlab/normal.hpp"
#include "carlab/random.hpp"

namespace carlab {

// Observed two-treatment data. t[i] = 1 for treatment, 0 for control.
// x_obs holds the working-model covariates (n x p, p may be 0); phi holds
// the balancing features when they are available at analysis.
struct TrialDataset {
  Eigen::VectorXd y;
  std::vector<int> t;
  Eigen::MatrixXd x_obs;
  std::optional<Eigen::MatrixXd> phi;

  std::size_t size() const { return static_cast<std::size_t>(y.size()); }
  std::size_t covariates() const { return static_cast<std::size_t>(x_obs.cols()); }

  void validate() const {
    const auto n = y.size();
    if (static_cast<Eigen::Index>(t.size()) != n)
      throw ValidationError("dataset: assignment vector length differs from y");
    if (x_obs.rows() != n && !(x_obs.cols() == 0))
      throw ValidationError("dataset: covariate matrix row count differs from y");
    if (phi && phi->rows() != n) throw ValidationError("dataset: feature matrix row count differs from y");
    for (int v : t)
      if (v != 0 && v != 1) throw ValidationError("dataset: assignments must be 0 or 1");
  }
};

// Engine arm 0 is "treatment" (T_i = 1), arm 1 is control.
inline int treatment_indicator(std::size_t arm) { return arm == 0 ? 1 : 0; }

struct FitResult {
  Eigen::VectorXd theta;  // (mu1, mu0, beta_1..beta_p)
  double tau_hat = 0.0;
  Eigen::VectorXd residuals;
  double sigma_e2 = 0.0;
  Eigen::MatrixXd gram_inv;  // (sum Xd_i' Xd_i)^{-1}
  std::vector<int> t;
  std::size_t n = 0, p = 0;
  std::size_t n1 = 0, n0 = 0;

  // L (sum Xd'Xd)^{-1} L' with L = (1, -1, 0, ..., 0).
  double contrast_variance_factor() const {
    return gram_inv(0, 0) - 2.0 * gram_inv(0, 1) + gram_inv(1, 1);
  }
};

enum class VarianceMethod { Reg, Boot, Mb, Mbj, Mbb };

inline std::string method_name(VarianceMethod m) {
  switch (m) {
  case VarianceMethod::Reg: return "reg";
  case VarianceMethod::Boot: return "boot";
  case VarianceMethod::Mb: return "mb";
  case VarianceMethod::Mbj: return "mbj";
  case VarianceMethod::Mbb: return "mbb";
  }
  return "?";
}

// An estimate of sigma_tau^2, the limit variance of sqrt(n)(tau_hat - tau)/2.
struct VarianceEstimate {
  double value = 0.0;
  VarianceMethod method = VarianceMethod::Reg;
  std::size_t block_length = 0;
  std::size_t resamples = 0;
};

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  bool reject = false;
  std::string method;
};

inline TestResult make_test_result(double statistic, double alpha, std::string method) {
  TestResult r;
  r.statistic = statistic;
  r.p_value = two_sided_p_value(statistic);
  r.reject = std::fabs(statistic) >= two_sided_critical(alpha);
  r.method = std::move(method);
  return r;
}

// Default block length floor(sqrt(n)).
inline std::size_t default_block_length(std::size_t n) {
  return static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
}

inline std::size_t cube_root_block_length(std::size_t n) {
  auto l = static_cast<std::size_t>(std::floor(std::cbrt(static_cast<double>(n))));
  // cbrt of a perfect cube may land just below the integer
  while ((l + 1) * (l + 1) * (l + 1) <= n) ++l;
  return l;
}

namespace detail {

inline constexpr double kMinReciprocalCondition = 1e-12;

inline void design_row(const TrialDataset& d, Eigen::Index i, Eigen::Ref<Eigen::VectorXd> row) {
  row(0) = d.t[i];
  row(1) = 1 - d.t[i];
  for (Eigen::Index j = 0; j < d.x_obs.cols(); ++j) row(2 + j) = d.x_obs(i, j);
}

inline Eigen::MatrixXd design_matrix(const TrialDataset& d) {
  const Eigen::Index n = d.y.size(), k = d.x_obs.cols() + 2;
  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd row(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    design_row(d, i, row);
    X.row(i) = row.transpose();
  }
  return X;
}

// Solves G theta = b for a symmetric positive definite G, guarding on the
// reciprocal condition number.
inline Eigen::LLT<Eigen::MatrixXd> spd_factor(const Eigen::MatrixXd& G, const std::string& what) {
  Eigen::LLT<Eigen::MatrixXd> llt(G);
  if (llt.info() != Eigen::Success) throw FitError(what + ": design Gram matrix is not positive definite");
  const double rc = llt.rcond();
  if (!(rc > kMinReciprocalCondition))
    throw FitError(what + ": design Gram matrix is ill-conditioned (rcond " + std::to_string(rc) + ")");
  return llt;
}

// tau_hat from sufficient statistics of a (sub)sample.
inline double tau_from_normal_equations(const Eigen::MatrixXd& G, const Eigen::VectorXd& b,
                                        const std::string& what) {
  if (!(G(0, 0) > 0.5) || !(G(1, 1) > 0.5)) throw FitError(what + ": an arm is empty");
  const auto llt = spd_factor(G, what);
  const Eigen::VectorXd theta = llt.solve(b);
  return theta(0) - theta(1);
}

inline void check_block_length(std::size_t l, std::size_t n) {
  if (l < 1 || l >= n)
    throw ValidationError("block length must satisfy 1 <= l < n (l = " + std::to_string(l) +
                          ", n = " + std::to_string(n) + ")");
}

inline double sample_variance(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

} // namespace detail

// Least squares fit of the working model Y = T mu1 + (1 - T) mu0 + X_obs beta + e.
inline FitResult lse_fit(const TrialDataset& data) {
  data.validate();
  const std::size_t n = data.size(), p = data.covariates();
  FitResult f;
  f.n = n;
  f.p = p;
  f.t = data.t;
  for (int v : data.t) (v == 1 ? f.n1 : f.n0) += 1;
  if (f.n1 == 0 || f.n0 == 0) throw FitError("lse_fit: an arm is empty");
  if (n <= p + 2) throw FitError("lse_fit: need more than p + 2 observations");

  if (p == 0) {
    // Two-sample closed form.
    double s1 = 0.0, s0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) (data.t[i] ? s1 : s0) += data.y(i);
    const double m1 = s1 / static_cast<double>(f.n1), m0 = s0 / static_cast<double>(f.n0);
    f.theta = Eigen::Vector2d(m1, m0);
    f.residuals.resize(n);
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      f.residuals(i) = data.y(i) - (data.t[i] ? m1 : m0);
      sse += f.residuals(i) * f.residuals(i);
    }
    f.sigma_e2 = sse / static_cast<double>(n - 2);
    f.gram_inv = Eigen::Matrix2d::Zero();
    f.gram_inv(0, 0) = 1.0 / static_cast<double>(f.n1);
    f.gram_inv(1, 1) = 1.0 / static_cast<double>(f.n0);
    f.tau_hat = m1 - m0;
    return f;
  }

  const Eigen::MatrixXd X = detail::design_matrix(data);
  const Eigen::MatrixXd G = X.transpose() * X;
  const auto llt = detail::spd_factor(G, "lse_fit");
  f.theta = llt.solve(X.transpose() * data.y);
  f.residuals = data.y - X * f.theta;
  // One step of iterative refinement on the normal equations.
  f.theta += llt.solve(X.transpose() * f.residuals);
  f.residuals = data.y - X * f.theta;
  f.gram_inv = llt.solve(Eigen::MatrixXd::Identity(p + 2, p + 2));
  f.sigma_e2 = f.residuals.squaredNorm() / static_cast<double>(n - p - 2);
  f.tau_hat = f.theta(0) - f.theta(1);
  return f;
}

// Traditional test: tau_hat / (sigma_e sqrt(L G^{-1} L')).
inline TestResult t_ls(const FitResult& fit, double alpha = 0.05) {
  const double se = std::sqrt(fit.sigma_e2 * fit.contrast_variance_factor());
  double z = 0.0;
  if (fit.tau_hat != 0.0) {
    if (!(se > 0.0)) throw FitError("t_ls: zero residual variance with non-zero effect");
    z = fit.tau_hat / se;
  }
  return make_test_result(z, alpha, "T_ls");
}

// Regresses the working-model residuals on phi and returns
// sum(zeta^2) / (n - p - 2). The projection uses a rank-revealing QR, so
// collinear feature blocks (marginal indicators, empty strata) are handled
// by dropping aliased columns.
inline VarianceEstimate sigma_tau_reg(const FitResult& fit, const Eigen::MatrixXd& phi) {
  if (static_cast<std::size_t>(phi.rows()) != fit.n)
    throw ValidationError("sigma_tau_reg: feature matrix has wrong row count");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(phi.rows(), phi.cols());
  qr.setThreshold(1e-10);
  qr.compute(phi);
  const auto rank = qr.rank();
  if (rank == 0) throw FitError("sigma_tau_reg: feature matrix has rank 0");
  // Project onto the span of the first `rank` columns of Q.
  Eigen::VectorXd qtr = qr.householderQ().adjoint() * fit.residuals;
  qtr.head(rank).setZero();
  const Eigen::VectorXd zeta = qr.householderQ() * qtr;
  return {zeta.squaredNorm() / static_cast<double>(fit.n - fit.p - 2), VarianceMethod::Reg, 0, 0};
}

// Moving block estimator
//   1 / (n - l + 1 - (p + 2)) * sum_{i=0}^{n-l} (sum_{j=i+1}^{i+l} r_j / sqrt(l))^2
// with r_j = (2 T_j - 1) * residual_j from the full-sample fit.
inline VarianceEstimate sigma_tau_mb(const FitResult& fit, std::size_t l) {
  const std::size_t n = fit.n;
  detail::check_block_length(l, n);
  const double denom = static_cast<double>(n) - static_cast<double>(l) + 1.0 -
                       static_cast<double>(fit.p + 2);
  if (!(denom > 0.0)) throw ValidationError("sigma_tau_mb: block length too large for p");
  std::vector<double> r(n);
  for (std::size_t j = 0; j < n; ++j) r[j] = (2.0 * fit.t[j] - 1.0) * fit.residuals(j);
  double window = 0.0;
  for (std::size_t j = 0; j < l; ++j) window += r[j];
  double total = window * window;
  for (std::size_t i = 1; i + l <= n; ++i) {
    window += r[i + l - 1] - r[i - 1];
    total += window * window;
  }
  return {total / (static_cast<double>(l) * denom), VarianceMethod::Mb, l, 0};
}

// Moving block jackknife. Each of the n - l + 1 leave-block-out fits is
// obtained by downdating the full-sample normal equations by the block's
// contribution; this is the same least squares solution as refitting.
// Returns sigma_tau^2 = n * sigma_mbj^2 / 4.
inline VarianceEstimate sigma_tau_mbj(const TrialDataset& data, std::size_t l) {
  data.validate();
  const std::size_t n = data.size();
  detail::check_block_length(l, n);
  const Eigen::MatrixXd X = detail::design_matrix(data);
  const Eigen::MatrixXd G = X.transpose() * X;
  const Eigen::VectorXd b = X.transpose() * data.y;
  const auto k = X.cols();

  std::vector<double> taus;
  taus.reserve(n - l + 1);
  Eigen::MatrixXd Gw(k, k);
  Eigen::VectorXd bw(k);
  for (std::size_t i = 0; i + l <= n; ++i) {
    const auto block = X.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l));
    Gw.noalias() = G - block.transpose() * block;
    bw.noalias() = b - block.transpose() * data.y.segment(static_cast<Eigen::Index>(i),
                                                          static_cast<Eigen::Index>(l));
    taus.push_back(detail::tau_from_normal_equations(
        Gw, bw, "sigma_tau_mbj (window dropping units " + std::to_string(i + 1) + ".." +
                    std::to_string(i + l) + ")"));
  }
  double mean = 0.0;
  for (double v : taus) mean += v;
  mean /= static_cast<double>(taus.size());
  double ss = 0.0;
  for (double v : taus) ss += (v - mean) * (v - mean);
  const double nl = static_cast<double>(n - l);
  const double var_mbj = (nl / static_cast<double>(l)) * ss / nl;
  return {static_cast<double>(n) * var_mbj / 4.0, VarianceMethod::Mbj, l, 0};
}

// Moving block bootstrap. m = floor(n / l); blocks starting at I(0..m),
// uniform on {0..n-l}, are concatenated and truncated to n observations.
// A resample with an empty arm is redrawn up to 100 times.
// Returns sigma_tau^2 = n * Var*(tau*) / 4.
inline VarianceEstimate sigma_tau_mbb(const TrialDataset& data, std::size_t l, std::size_t B,
                                      Rng& rng) {
  data.validate();
  const std::size_t n = data.size();
  detail::check_block_length(l, n);
  if (B < 2) throw ValidationError("sigma_tau_mbb: need at least 2 bootstrap resamples");
  const Eigen::MatrixXd X = detail::design_matrix(data);
  const auto k = X.cols();
  const std::size_t m = n / l;

  std::vector<double> taus;
  taus.reserve(B);
  Eigen::MatrixXd G(k, k);
  Eigen::VectorXd b(k);
  for (std::size_t rep = 0; rep < B; ++rep) {
    bool done = false;
    for (int attempt = 0; attempt < 100 && !done; ++attempt) {
      G.setZero();
      b.setZero();
      std::size_t filled = 0;
      for (std::size_t blk = 0; blk <= m && filled < n; ++blk) {
        const std::size_t start = rng.uniform_index(n - l + 1);
        const std::size_t take = std::min(l, n - filled);
        const auto rows = X.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(take));
        G.noalias() += rows.transpose() * rows;
        b.noalias() += rows.transpose() *
                       data.y.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(take));
        filled += take;
      }
      if (G(0, 0) < 0.5 || G(1, 1) < 0.5) continue;
      taus.push_back(detail::tau_from_normal_equations(G, b, "sigma_tau_mbb resample"));
      done = true;
    }
    if (!done) throw FitError("sigma_tau_mbb: 100 consecutive resamples had an empty arm");
  }
  return {static_cast<double>(n) * detail::sample_variance(taus) / 4.0, VarianceMethod::Mbb, l, B};
}

// Rerandomization bootstrap: resample units with replacement, rerun the
// covariate-adaptive procedure on the resampled features to obtain new
// assignments, refit the working model. The value is n * v_B / 4 where
// v_B = Var*(tau*) is the bootstrap variance of tau_hat.
inline VarianceEstimate sigma_tau_bootstrap(const TrialDataset& data, const AllocationPolicy& policy,
                                            std::size_t B, Rng& rng) {
  data.validate();
  if (!data.phi) throw ValidationError("sigma_tau_bootstrap: balancing features are required");
  if (B < 2) throw ValidationError("sigma_tau_bootstrap: need at least 2 bootstrap resamples");
  validate(policy, 2);
  const std::size_t n = data.size();
  const Eigen::MatrixXd& phi = *data.phi;
  const auto q = static_cast<std::size_t>(phi.cols());
  const auto k = data.x_obs.cols() + 2;

  std::vector<double> taus;
  taus.reserve(B);
  std::vector<std::size_t> idx(n);
  std::vector<double> phi_row(q);
  Eigen::MatrixXd G(k, k);
  Eigen::VectorXd b(k), row(k);
  for (std::size_t rep = 0; rep < B; ++rep) {
    bool done = false;
    for (int attempt = 0; attempt < 100 && !done; ++attempt) {
      for (auto& i : idx) i = rng.uniform_index(n);
      TrialState state(2, q);
      G.setZero();
      b.setZero();
      for (std::size_t i = 0; i < n; ++i) {
        const auto src = static_cast<Eigen::Index>(idx[i]);
        for (std::size_t c = 0; c < q; ++c) phi_row[c] = phi(src, static_cast<Eigen::Index>(c));
        const int ti = treatment_indicator(assign_next(state, phi_row, policy, rng).treatment);
        row(0) = ti;
        row(1) = 1 - ti;
        for (Eigen::Index j = 0; j < data.x_obs.cols(); ++j) row(2 + j) = data.x_obs(src, j);
        G.noalias() += row * row.transpose();
        b.noalias() += row * data.y(src);
      }
      if (G(0, 0) < 0.5 || G(1, 1) < 0.5) continue;
      taus.push_back(detail::tau_from_normal_equations(G, b, "sigma_tau_bootstrap resample"));
      done = true;
    }
    if (!done) throw FitError("sigma_tau_bootstrap: 100 consecutive resamples had an empty arm");
  }
  const double v_b = detail::sample_variance(taus);
  return {static_cast<double>(n) * v_b / 4.0, VarianceMethod::Boot, 0, B};
}

enum class AdjustMode { Gram, Direct };

// Adjusted test. Gram mode: tau_hat / (sigma_tau sqrt(L G^{-1} L'));
// direct mode: sqrt(n) tau_hat / (2 sigma_tau). With sigma_tau^2 = n v / 4
// the direct mode equals tau_hat / sqrt(v).
inline TestResult adjusted_test(const FitResult& fit, const VarianceEstimate& v,
                                AdjustMode mode = AdjustMode::Gram, double alpha = 0.05) {
  if (!(v.value >= 0.0)) throw ValidationError("adjusted_test: variance estimate must be >= 0");
  const std::string name = "T_" + method_name(v.method);
  if (fit.tau_hat == 0.0) return make_test_result(0.0, alpha, name);
  if (v.value == 0.0) throw FitError("adjusted_test: zero variance estimate with non-zero effect");
  double z;
  if (mode == AdjustMode::Gram) z = fit.tau_hat / std::sqrt(v.value * fit.contrast_variance_factor());
  else z = std::sqrt(static_cast<double>(fit.n)) * fit.tau_hat / (2.0 * std::sqrt(v.value));
  return make_test_result(z, alpha, name);
}

struct LogisticFit {
  Eigen::VectorXd coef;
  Eigen::VectorXd se;
  double deviance = 0.0;
  int iterations = 0;

  double wald(Eigen::Index j) const { return coef(j) / se(j); }
};

// Logistic regression by iteratively reweighted least squares. Stops when the
// relative deviance change drops below 1e-10, fails after 50 iterations or on
// separation.
inline LogisticFit logistic_fit(const Eigen::VectorXd& y, const Eigen::MatrixXd& design) {
  const auto n = y.size(), k = design.cols();
  if (design.rows() != n) throw ValidationError("logistic_fit: design row count differs from y");
  double ysum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) throw ValidationError("logistic_fit: responses must be 0 or 1");
    ysum += y(i);
  }
  if (ysum == 0.0 || ysum == static_cast<double>(n))
    throw FitError("logistic_fit: all responses identical (separation)");

  auto deviance_of = [&](const Eigen::VectorXd& eta) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      // -2 log-likelihood, stable form
      const double e = eta(i);
      const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
      dev += 2.0 * (log1pexp - y(i) * e);
    }
    return dev;
  };

  LogisticFit fit;
  fit.coef = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(n), mu(n), w(n), z(n);
  double dev = deviance_of(eta);
  Eigen::MatrixXd XtWX(k, k);
  bool converged = false;
  for (int it = 1; it <= 50; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      mu(i) = 1.0 / (1.0 + std::exp(-eta(i)));
      w(i) = mu(i) * (1.0 - mu(i));
      if (w(i) < 1e-12) throw FitError("logistic_fit: fitted probabilities at 0 or 1 (separation)");
      z(i) = eta(i) + (y(i) - mu(i)) / w(i);
    }
    XtWX.noalias() = design.transpose() * w.asDiagonal() * design;
    const auto llt = detail::spd_factor(XtWX, "logistic_fit");
    fit.coef = llt.solve(design.transpose() * w.cwiseProduct(z));
    eta.noalias() = design * fit.coef;
    const double new_dev = deviance_of(eta);
    fit.iterations = it;
    const bool small = std::fabs(new_dev - dev) / (std::fabs(new_dev) + 0.1) < 1e-10;
    dev = new_dev;
    if (small) {
      converged = true;
      break;
    }
  }
  if (!converged) throw FitError("logistic_fit: IRLS did not converge in 50 iterations");
  for (Eigen::Index i = 0; i < n; ++i) {
    mu(i) = 1.0 / (1.0 + std::exp(-eta(i)));
    w(i) = mu(i) * (1.0 - mu(i));
  }
  XtWX.noalias() = design.transpose() * w.asDiagonal() * design;
  const auto llt = detail::spd_factor(XtWX, "logistic_fit");
  const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
  fit.se = cov.diagonal().cwiseSqrt();
  fit.deviance = dev;
  return fit;
}

// Wald test of the (T - 1/2) coefficient in a logistic model with an
// intercept, the contrast, and the given covariate columns. The tested
// coefficient is mu1 - mu0.
inline TestResult logistic_treatment_test(const Eigen::VectorXd& y, const std::vector<int>& t,
                                          const Eigen::MatrixXd& covariates, double alpha,
                                          std::string name) {
  const auto n = y.size();
  const auto p = covariates.cols();
  if (static_cast<Eigen::Index>(t.size()) != n || (p > 0 && covariates.rows() != n))
    throw ValidationError("logistic_treatment_test: inconsistent lengths");
  Eigen::MatrixXd design(n, p + 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = t[i] - 0.5;
    for (Eigen::Index j = 0; j < p; ++j) design(i, 2 + j) = covariates(i, j);
  }
  const auto fit = logistic_fit(y, design);
  return make_test_result(fit.wald(1), alpha, std::move(name));
}

} // namespace carlab
