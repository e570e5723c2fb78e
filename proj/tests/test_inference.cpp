#include <cmath>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "carlab/errors.hpp"
#include "carlab/inference.hpp"
#include "carlab/random.hpp"

using namespace carlab;

namespace {

TrialDataset make_data(std::vector<double> y, std::vector<int> t, Eigen::MatrixXd x = Eigen::MatrixXd()) {
  TrialDataset d;
  d.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  d.t = std::move(t);
  d.x_obs = x.size() ? x : Eigen::MatrixXd(static_cast<Eigen::Index>(y.size()), 0);
  return d;
}

TrialDataset synthetic_data(Rng& rng, std::size_t n, std::size_t p, double sigma = 1.0) {
  TrialDataset d;
  d.y.resize(static_cast<Eigen::Index>(n));
  d.t.resize(n);
  d.x_obs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < n; ++i) {
    d.t[i] = static_cast<int>(rng.uniform_index(2));
    double mean = d.t[i] ? 0.5 : 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      const double v = rng.normal(1.0, 1.0);
      d.x_obs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      mean += v * static_cast<double>(j + 1);
    }
    d.y(static_cast<Eigen::Index>(i)) = mean + sigma * rng.normal();
  }
  return d;
}

// Dense oracle: solve the working model by Householder QR on the full design.
Eigen::VectorXd qr_theta(const TrialDataset& d) {
  const auto n = d.y.size(), p = d.x_obs.cols();
  Eigen::MatrixXd X(n, p + 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = d.t[static_cast<std::size_t>(i)];
    X(i, 1) = 1 - d.t[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < p; ++j) X(i, 2 + j) = d.x_obs(i, j);
  }
  return X.householderQr().solve(d.y);
}

TrialDataset drop_rows(const TrialDataset& d, std::size_t from, std::size_t count) {
  TrialDataset r;
  const auto n = static_cast<std::size_t>(d.y.size());
  const auto m = static_cast<Eigen::Index>(n - count);
  r.y.resize(m);
  r.x_obs.resize(m, d.x_obs.cols());
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= from && i < from + count) continue;
    r.y(k) = d.y(static_cast<Eigen::Index>(i));
    r.x_obs.row(k) = d.x_obs.row(static_cast<Eigen::Index>(i));
    r.t.push_back(d.t[i]);
    ++k;
  }
  return r;
}

} // namespace

TEST(Inference, TwoSampleExample) {
  const auto d = make_data({1, 2, 3, 4}, {1, 1, 0, 0});
  const auto f = lse_fit(d);
  EXPECT_DOUBLE_EQ(f.tau_hat, -2.0);
  EXPECT_DOUBLE_EQ(f.sigma_e2, 0.5);
  EXPECT_DOUBLE_EQ(f.contrast_variance_factor(), 1.0);
  const auto r = t_ls(f);
  EXPECT_NEAR(r.statistic, -2.8284271247461903, 1e-14);
  EXPECT_TRUE(r.reject);
  EXPECT_EQ(r.method, "T_ls");
}

TEST(Inference, FitErrors) {
  EXPECT_THROW(lse_fit(make_data({1, 2, 3}, {1, 1, 1})), FitError);
  EXPECT_THROW(lse_fit(make_data({1, 3}, {1, 0})), FitError);
  EXPECT_THROW(lse_fit(make_data({1, 2, 3}, {1, 2, 0})), ValidationError);
  Eigen::MatrixXd x(4, 1);
  x << 1, 1, 0, 0;
  // covariate collinear with the arm indicators
  EXPECT_THROW(lse_fit(make_data({1, 2, 3, 5}, {1, 1, 0, 0}, x)), FitError);
}

TEST(Inference, MatchesDenseQrOracle) {
  Rng rng(1);
  for (std::size_t p : {0u, 1u, 3u}) {
    const auto d = synthetic_data(rng, 60, p);
    const auto f = lse_fit(d);
    const auto th = qr_theta(d);
    for (Eigen::Index j = 0; j < th.size(); ++j) EXPECT_NEAR(f.theta(j), th(j), 1e-10);
  }
}

TEST(Inference, ResidualsOrthogonalToDesign) {
  Rng rng(2);
  const auto d = synthetic_data(rng, 200, 3, 2.0);
  const auto f = lse_fit(d);
  double s1 = 0, s0 = 0;
  Eigen::VectorXd sx = Eigen::VectorXd::Zero(3);
  for (std::size_t i = 0; i < 200; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    (d.t[i] ? s1 : s0) += f.residuals(ii);
    sx += f.residuals(ii) * d.x_obs.row(ii).transpose();
  }
  EXPECT_LE(std::fabs(s1), 1e-8);
  EXPECT_LE(std::fabs(s0), 1e-8);
  EXPECT_LE(sx.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Inference, MovingBlockWithUnitBlocksIsResidualVariance) {
  Rng rng(3);
  const auto d = synthetic_data(rng, 50, 2);
  const auto f = lse_fit(d);
  EXPECT_NEAR(sigma_tau_mb(f, 1).value, f.sigma_e2, 1e-12 * f.sigma_e2);
}

TEST(Inference, MovingBlockEnumeration) {
  const auto d = make_data({1.0, 4.0, 2.5, 0.5, 3.0, 6.0}, {1, 0, 1, 0, 0, 1});
  const auto f = lse_fit(d);
  std::vector<double> r(6);
  for (std::size_t j = 0; j < 6; ++j) r[j] = (d.t[j] ? 1.0 : -1.0) * f.residuals(static_cast<Eigen::Index>(j));
  double total = 0.0;
  for (std::size_t i = 0; i + 2 <= 6; ++i) total += (r[i] + r[i + 1]) * (r[i] + r[i + 1]) / 2.0;
  const double want = total / (6.0 - 2.0 + 1.0 - 2.0);
  const auto v = sigma_tau_mb(f, 2);
  EXPECT_NEAR(v.value, want, 1e-13);
  EXPECT_EQ(v.block_length, 2u);
  EXPECT_THROW(sigma_tau_mb(f, 0), ValidationError);
  EXPECT_THROW(sigma_tau_mb(f, 6), ValidationError);
}

// Oracle: refit the working model from scratch on each leave-block-out sample.
TEST(Inference, MovingBlockJackknifeMatchesRefits) {
  Rng rng(4);
  for (auto [n, l, p] : {std::tuple{6, 2, 0}, std::tuple{12, 3, 1}, std::tuple{40, 6, 2}}) {
    auto d = synthetic_data(rng, static_cast<std::size_t>(n), static_cast<std::size_t>(p));
    // alternating arms keep both present in every window-deleted sample
    for (int i = 0; i < n; ++i) d.t[static_cast<std::size_t>(i)] = i % 2;
    std::vector<double> taus;
    for (int i = 0; i + l <= n; ++i)
      taus.push_back(lse_fit(drop_rows(d, static_cast<std::size_t>(i), static_cast<std::size_t>(l))).tau_hat);
    double mean = 0.0, ss = 0.0;
    for (double v : taus) mean += v;
    mean /= static_cast<double>(taus.size());
    for (double v : taus) ss += (v - mean) * (v - mean);
    const double var_mbj = (static_cast<double>(n - l) / l) * ss / static_cast<double>(n - l);
    const double want = n * var_mbj / 4.0;
    EXPECT_NEAR(sigma_tau_mbj(d, static_cast<std::size_t>(l)).value, want, 1e-9 * want) << n << "," << l;
  }
}

TEST(Inference, RegressionEstimator) {
  const auto d = make_data({1.0, 4.0, 2.5, 0.5, 3.0, 6.0}, {1, 0, 1, 0, 0, 1});
  const auto f = lse_fit(d);
  // residuals lie in the span of phi: perfect fit
  EXPECT_NEAR(sigma_tau_reg(f, f.residuals).value, 0.0, 1e-25);
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(6, 1);
  const double mean = f.residuals.mean();
  const double want = (f.residuals.array() - mean).square().sum() / (6.0 - 2.0);
  EXPECT_NEAR(sigma_tau_reg(f, ones).value, want, 1e-13);
  // collinear columns are tolerated
  Eigen::MatrixXd dup(6, 2);
  dup << ones, 2.0 * ones;
  EXPECT_NEAR(sigma_tau_reg(f, dup).value, want, 1e-13);
  EXPECT_THROW(sigma_tau_reg(f, Eigen::MatrixXd::Zero(6, 1)), FitError);
  EXPECT_THROW(sigma_tau_reg(f, Eigen::MatrixXd::Ones(5, 1)), ValidationError);
}

TEST(Inference, ResamplingDeterminismAndDegenerateData) {
  Rng data_rng(5);
  auto d = synthetic_data(data_rng, 100, 1);
  d.phi = Eigen::MatrixXd::Ones(100, 1);
  Rng a(9), b(9);
  EXPECT_EQ(sigma_tau_mbb(d, 10, 50, a).value, sigma_tau_mbb(d, 10, 50, b).value);
  const AllocationPolicy pol = policy::EfronBiasedCoin{0.9};
  EXPECT_EQ(sigma_tau_bootstrap(d, pol, 50, a).value, sigma_tau_bootstrap(d, pol, 50, b).value);

  auto flat = d;
  flat.y.setConstant(3.0);
  Rng c(1);
  EXPECT_NEAR(sigma_tau_mbb(flat, 10, 50, c).value, 0.0, 1e-20);
  EXPECT_NEAR(sigma_tau_bootstrap(flat, pol, 50, c).value, 0.0, 1e-20);
  EXPECT_NEAR(sigma_tau_mb(lse_fit(flat), 10).value, 0.0, 1e-20);
  EXPECT_THROW(sigma_tau_mbb(d, 10, 1, c), ValidationError);
  d.phi.reset();
  EXPECT_THROW(sigma_tau_bootstrap(d, pol, 50, c), ValidationError);
}

TEST(Inference, AdjustedTestModes) {
  const auto f = lse_fit(make_data({1, 2, 3, 4}, {1, 1, 0, 0}));
  // Var(tau_hat) = 0.5 so sigma_tau^2 = n * 0.5 / 4 = 0.5.
  const VarianceEstimate v{0.5, VarianceMethod::Boot, 0, 10};
  const auto r = adjusted_test(f, v, AdjustMode::Direct);
  EXPECT_NEAR(r.statistic, -2.8284271247461903, 1e-14);
  EXPECT_EQ(r.method, "T_boot");
  EXPECT_THROW(adjusted_test(f, VarianceEstimate{-1.0}), ValidationError);
  EXPECT_THROW(adjusted_test(f, VarianceEstimate{0.0}), FitError);
}

TEST(Inference, GramModeWithResidualVarianceIsTraditionalTest) {
  Rng rng(6);
  for (int it = 0; it < 100; ++it) {
    const auto f = lse_fit(synthetic_data(rng, 30 + rng.uniform_index(50), rng.uniform_index(4)));
    const VarianceEstimate v{f.sigma_e2, VarianceMethod::Reg, 0, 0};
    ASSERT_EQ(adjusted_test(f, v, AdjustMode::Gram).statistic, t_ls(f).statistic);
  }
}

TEST(Inference, LogisticSaturatedExample) {
  Eigen::VectorXd y(8);
  y << 1, 1, 1, 0, 1, 0, 0, 0;
  const std::vector<int> t{1, 1, 1, 1, 0, 0, 0, 0};
  Eigen::MatrixXd design(8, 2);
  for (int i = 0; i < 8; ++i) design.row(i) << 1.0, t[static_cast<std::size_t>(i)] - 0.5;
  const auto fit = logistic_fit(y, design);
  EXPECT_NEAR(fit.coef(1), 2.0 * std::log(3.0), 1e-8);
  EXPECT_NEAR(fit.coef(0), 0.0, 1e-8);
  EXPECT_NEAR(fit.se(1), std::sqrt(8.0 / 3.0), 1e-8);
  const auto r = logistic_treatment_test(y, t, Eigen::MatrixXd(8, 0), 0.05, "T_logi");
  EXPECT_NEAR(r.statistic, 2.0 * std::log(3.0) / std::sqrt(8.0 / 3.0), 1e-8);
  EXPECT_FALSE(r.reject);
}

TEST(Inference, LogisticSeparationIsFitError) {
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(6);
  EXPECT_THROW(logistic_treatment_test(ones, {1, 0, 1, 0, 1, 0}, Eigen::MatrixXd(6, 0), 0.05, "T_logi"),
               FitError);
  Eigen::VectorXd y(6);
  y << 1, 1, 1, 0, 0, 0;
  EXPECT_THROW(logistic_treatment_test(y, {1, 1, 1, 0, 0, 0}, Eigen::MatrixXd(6, 0), 0.05, "T_logi"),
               FitError);
}

TEST(Inference, BlockLengthRules) {
  EXPECT_EQ(default_block_length(500), 22u);
  EXPECT_EQ(default_block_length(400), 20u);
  EXPECT_EQ(cube_root_block_length(500), 7u);
  EXPECT_EQ(cube_root_block_length(1000), 10u);
  EXPECT_EQ(cube_root_block_length(27), 3u);
}

// On iid data with a correctly specified model every estimator targets
// sigma_tau^2 = sigma^2.
TEST(Inference, EstimatorsAgreeOnIidData) {
  Rng rng(7);
  const std::size_t n = 4000;
  auto d = synthetic_data(rng, n, 2, 2.0);
  d.phi = d.x_obs;
  const auto f = lse_fit(d);
  const std::size_t l = default_block_length(n);
  EXPECT_NEAR(f.sigma_e2, 4.0, 0.3);
  EXPECT_NEAR(sigma_tau_reg(f, *d.phi).value, 4.0, 0.3);
  EXPECT_NEAR(sigma_tau_mb(f, l).value, 4.0, 0.8);
  EXPECT_NEAR(sigma_tau_mbj(d, l).value, 4.0, 0.8);
  Rng b(8);
  EXPECT_NEAR(sigma_tau_mbb(d, l, 300, b).value, 4.0, 1.0);
}
