#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "carlab/errors.hpp"
#include "carlab/features.hpp"
#include "carlab/random.hpp"

namespace carlab {

// Covariate distributions of the simulation designs.
//
//   S1  X1 ~ N(0,1), X2, X3 ~ N(1,1) independent
//   S2  X1 ~ N(0,1), X2 ~ N(1,1), X3 = X1 X2
//   S3  X1 ~ N(0,1), X2 ~ N(1,1), X3 = exp(X1 - X2) - 1
//   S4  X1 ~ Bernoulli(0.5), X2 ~ N(1,1), X3 = exp(X1 - X2) - 1
//   S5  as S3 with X3 unobserved
//   S6  as S4 with X3 unobserved
//   Normal             independent N(means[j], sds[j]^2)
//   NormalInteraction  X1, X2 independent normal, X3 = X1 X2
struct CovariateSetting {
  enum class Kind { S1, S2, S3, S4, S5, S6, Normal, NormalInteraction };

  Kind kind = Kind::S1;
  std::vector<double> means;
  std::vector<double> sds;

  static CovariateSetting standard(Kind k) { return {k, {}, {}}; }
  static CovariateSetting normal(std::vector<double> means, std::vector<double> sds) {
    return {Kind::Normal, std::move(means), std::move(sds)};
  }
  static CovariateSetting normal_interaction(std::vector<double> means, std::vector<double> sds) {
    return {Kind::NormalInteraction, std::move(means), std::move(sds)};
  }

  std::size_t dimension() const { return kind == Kind::Normal ? means.size() : 3; }

  // X3 is hidden from both randomization and analysis in S5 and S6.
  std::vector<bool> observed_mask() const {
    std::vector<bool> mask(dimension(), true);
    if (kind == Kind::S5 || kind == Kind::S6) mask[2] = false;
    return mask;
  }

  bool has_binary_x1() const { return kind == Kind::S4 || kind == Kind::S6; }

  void validate() const {
    if (kind == Kind::Normal || kind == Kind::NormalInteraction) {
      const std::size_t want = kind == Kind::Normal ? means.size() : 2;
      if (means.empty() || means.size() != want || sds.size() != want)
        throw ValidationError(kind == Kind::Normal
                                  ? "normal covariates: means and sds must have equal non-zero length"
                                  : "normal_interaction covariates: exactly two means and sds required");
      for (double s : sds)
        if (!(s > 0.0)) throw ValidationError("normal covariates: sds must be positive");
    }
  }
};

inline std::string setting_name(CovariateSetting::Kind k) {
  static constexpr std::array names{"S1", "S2", "S3", "S4", "S5", "S6", "normal", "normal_interaction"};
  return names[static_cast<std::size_t>(k)];
}

// Completes a covariate vector from the independently drawn components. For
// S1 x3 is the N(1,1) draw; for every other three-covariate setting x3 is
// ignored and derived from (x1, x2).
inline CovariateVector derive_covariates(const CovariateSetting& setting, double x1, double x2,
                                         double x3) {
  using K = CovariateSetting::Kind;
  double derived = x3;
  switch (setting.kind) {
  case K::S1: break;
  case K::S2:
  case K::NormalInteraction: derived = x1 * x2; break;
  case K::S3:
  case K::S4:
  case K::S5:
  case K::S6: derived = std::exp(x1 - x2) - 1.0; break;
  case K::Normal: throw ValidationError("derive_covariates: not defined for generic normal settings");
  }
  return CovariateVector({x1, x2, derived}, setting.observed_mask());
}

inline CovariateVector gen_covariates(const CovariateSetting& setting, Rng& rng) {
  using K = CovariateSetting::Kind;
  if (setting.kind == K::Normal) {
    std::vector<double> v(setting.means.size());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = rng.normal(setting.means[j], setting.sds[j]);
    return CovariateVector(std::move(v), setting.observed_mask());
  }
  if (setting.kind == K::NormalInteraction) {
    const double x1 = rng.normal(setting.means[0], setting.sds[0]);
    const double x2 = rng.normal(setting.means[1], setting.sds[1]);
    return derive_covariates(setting, x1, x2, 0.0);
  }
  const double x1 = setting.has_binary_x1() ? (rng.bernoulli(0.5) ? 1.0 : 0.0) : rng.normal();
  const double x2 = rng.normal(1.0, 1.0);
  const double x3 = setting.kind == K::S1 ? rng.normal(1.0, 1.0) : 0.0;
  return derive_covariates(setting, x1, x2, x3);
}

// Response models. mu1 is not stored: it is mu0 + delta / sqrt(n) under the
// local alternative.
struct ResponseModel {
  enum class Kind { Linear, Heteroscedastic, Logistic };

  Kind kind = Kind::Linear;
  double mu0 = 0.0;
  std::vector<double> beta{1.0, 1.0, 1.0};
  double sigma_eps = 2.0;
  double gamma1 = 1.0;
  double gamma2 = 1.0;

  // Y = mu_t + sum beta_j X_j + eps, eps ~ N(0, 2^2)
  static ResponseModel linear() { return {Kind::Linear, 0.0, {1.0, 1.0, 1.0}, 2.0, 1.0, 1.0}; }
  // Y = mu_t + sum beta_j X_j + g_t(X1, X2)(1 + eps), eps ~ N(0, 1)
  static ResponseModel heteroscedastic() {
    return {Kind::Heteroscedastic, 0.0, {1.0, 1.0, 1.0}, 1.0, 1.0, 1.0};
  }
  // P(Y = 1) = h(mu_t + X beta')
  static ResponseModel logistic() { return {Kind::Logistic, 0.0, {-1.0, 1.0, 2.0}, 0.0, 1.0, 1.0}; }

  void validate(std::size_t covariates) const {
    if (beta.size() != covariates)
      throw ValidationError("response model: beta has " + std::to_string(beta.size()) +
                            " entries for " + std::to_string(covariates) + " covariates");
    if (kind != Kind::Logistic && !(sigma_eps > 0.0))
      throw ValidationError("response model: sigma_eps must be positive");
    if (kind == Kind::Heteroscedastic && covariates < 2)
      throw ValidationError("heteroscedastic model needs at least two covariates");
  }
};

inline std::string response_name(ResponseModel::Kind k) {
  switch (k) {
  case ResponseModel::Kind::Linear: return "setting1";
  case ResponseModel::Kind::Heteroscedastic: return "setting2";
  case ResponseModel::Kind::Logistic: return "logistic";
  }
  return "?";
}

struct LocalAlternative {
  double delta = 0.0;

  double mu1(double mu0, std::size_t n) const {
    return mu0 + delta / std::sqrt(static_cast<double>(n));
  }
};

inline double logistic_function(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// g_1 = exp(g2 x2 - g1 x1 - 2), g_0 = exp(g2 x2 + g1 x1 - 2).
inline double heteroscedastic_g(const ResponseModel& m, double x1, double x2, bool treated) {
  const double sign = treated ? -1.0 : 1.0;
  return std::exp(m.gamma2 * x2 + sign * m.gamma1 * x1 - 2.0);
}

// Linear predictor mu_t + sum beta_j X_j.
inline double linear_predictor(const ResponseModel& m, const CovariateVector& x, std::size_t t,
                               double mu1) {
  double eta = t == 1 ? mu1 : m.mu0;
  for (std::size_t j = 0; j < m.beta.size(); ++j) eta += m.beta[j] * x.values.at(j);
  return eta;
}

// Continuous response for a given standardized noise draw eps.
inline double response_with_noise(const ResponseModel& m, const CovariateVector& x, std::size_t t,
                                  double mu1, double eps) {
  const double eta = linear_predictor(m, x, t, mu1);
  switch (m.kind) {
  case ResponseModel::Kind::Linear: return eta + m.sigma_eps * eps;
  case ResponseModel::Kind::Heteroscedastic:
    return eta + heteroscedastic_g(m, x.values[0], x.values[1], t == 1) * (1.0 + m.sigma_eps * eps);
  case ResponseModel::Kind::Logistic: break;
  }
  throw DomainError("response_with_noise: logistic responses are binary");
}

// t = 1 is treatment, t = 0 control.
inline double gen_response(const ResponseModel& m, const CovariateVector& x, std::size_t t,
                           std::size_t n, const LocalAlternative& alt, Rng& rng) {
  if (t > 1) throw DomainError("gen_response: two-treatment responses only");
  const double mu1 = alt.mu1(m.mu0, n);
  if (m.kind == ResponseModel::Kind::Logistic)
    return rng.uniform() < logistic_function(linear_predictor(m, x, t, mu1)) ? 1.0 : 0.0;
  return response_with_noise(m, x, t, mu1, rng.normal());
}

} // namespace carlab
