#pragma once

#include <cmath>

#include "carlab/errors.hpp"
#include "carlab/normal.hpp"

namespace carlab {

// Limit variances of the two-treatment analysis.
//   sigma_tau2 = sigma_eps2 + sigma_m2  (variance of sqrt(n)(tau_hat - tau) / 2)
//   sigma_e2   = limit of the working-model residual variance
struct AsymptoticParams {
  double sigma_eps2 = 0.0;
  double sigma_m2 = 0.0;
  double sigma_e2 = 0.0;

  double sigma_tau2() const { return sigma_eps2 + sigma_m2; }

  void validate() const {
    if (!(sigma_eps2 >= 0.0) || !(sigma_m2 >= 0.0))
      throw ValidationError("asymptotic params: variances must be non-negative");
    if (!(sigma_tau2() > 0.0)) throw ValidationError("asymptotic params: sigma_tau must be positive");
    if (!(sigma_e2 > 0.0)) throw ValidationError("asymptotic params: sigma_e must be positive");
    if (sigma_e2 < sigma_eps2) throw ValidationError("asymptotic params: sigma_e2 < sigma_eps2");
  }
};

struct PowerPair {
  double traditional = 0.0;  // T_LS
  double adjusted = 0.0;     // T_adj
};

// P(|Delta + Z| >= c) for Z ~ N(0, 1).
inline double two_sided_exceedance(double shift, double c) {
  return normal_sf(c - shift) + normal_cdf(-c - shift);
}

// Local-alternative rejection rates, Delta = |delta| / (2 sigma_tau):
//   T_LS  : P(|Delta + Z| >= u_{alpha/2} sigma_e / sigma_tau)
//   T_adj : P(|Delta + Z| >= u_{alpha/2})
inline PowerPair theoretical_power(double delta, const AsymptoticParams& params, double alpha = 0.05) {
  params.validate();
  const double sigma_tau = std::sqrt(params.sigma_tau2());
  const double sigma_e = std::sqrt(params.sigma_e2);
  const double shift = std::fabs(delta) / (2.0 * sigma_tau);
  const double u = two_sided_critical(alpha);
  return {two_sided_exceedance(shift, u * sigma_e / sigma_tau), two_sided_exceedance(shift, u)};
}

} // namespace carlab
