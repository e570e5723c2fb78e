#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "carlab/errors.hpp"
#include "carlab/normal.hpp"

namespace carlab {

namespace policy {

struct CompleteRandomization {};

// Efron's biased coin on the two-treatment imbalance difference.
struct EfronBiasedCoin {
  double rho = 0.9;
};

// l(x) = 1 - Phi(clamp(x, -D, D)) on the two-treatment imbalance difference.
struct TwoTreatmentContinuous {
  double D = 3.0;
};

// Treatment ranked t-th by potential imbalance receives kappa[t].
struct PocockSimonRank {
  std::vector<double> kappa{0.8, 0.1, 0.1};
};

// Normalized 1 - Phi(clamp(x_t, -K0, K0)) on deviations from the mean imbalance.
struct MultiContinuous {
  double K0 = 3.0;
};

} // namespace policy

using AllocationPolicy =
    std::variant<policy::CompleteRandomization, policy::EfronBiasedCoin,
                 policy::TwoTreatmentContinuous, policy::PocockSimonRank, policy::MultiContinuous>;

inline std::string policy_name(const AllocationPolicy& p) {
  return std::visit(
      [](const auto& v) -> std::string {
        using P = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<P, policy::CompleteRandomization>) return "complete";
        else if constexpr (std::is_same_v<P, policy::EfronBiasedCoin>) return "efron";
        else if constexpr (std::is_same_v<P, policy::TwoTreatmentContinuous>) return "continuous";
        else if constexpr (std::is_same_v<P, policy::PocockSimonRank>) return "pocock_simon";
        else return "multi_continuous";
      },
      p);
}

// Checks parameter bounds. treatments = 0 skips the arity checks.
inline void validate(const AllocationPolicy& p, std::size_t treatments = 0) {
  std::visit(
      [&](const auto& v) {
        using P = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<P, policy::EfronBiasedCoin>) {
          if (!(v.rho > 0.5 && v.rho < 1.0))
            throw ValidationError("efron: rho must satisfy 0.5 < rho < 1, got " +
                                  std::to_string(v.rho));
          if (treatments != 0 && treatments != 2)
            throw ValidationError("efron: biased coin is defined for two treatments only");
        } else if constexpr (std::is_same_v<P, policy::TwoTreatmentContinuous>) {
          if (!(v.D > 0.0) || !std::isfinite(v.D))
            throw ValidationError("continuous: D must be positive");
          if (treatments != 0 && treatments != 2)
            throw ValidationError("continuous: two-treatment allocation used with " +
                                  std::to_string(treatments) + " treatments");
        } else if constexpr (std::is_same_v<P, policy::PocockSimonRank>) {
          const auto& k = v.kappa;
          if (k.size() < 2) throw ValidationError("pocock_simon: kappa needs at least 2 entries");
          if (treatments != 0 && k.size() != treatments)
            throw ValidationError("pocock_simon: kappa length " + std::to_string(k.size()) +
                                  " differs from treatment count " + std::to_string(treatments));
          double sum = 0.0;
          for (std::size_t i = 0; i < k.size(); ++i) {
            if (!(k[i] > 0.0)) throw ValidationError("pocock_simon: kappa entries must be positive");
            if (i > 0 && k[i] > k[i - 1])
              throw ValidationError("pocock_simon: kappa must be non-increasing");
            sum += k[i];
          }
          if (std::fabs(sum - 1.0) > 1e-12) throw ValidationError("pocock_simon: kappa must sum to 1");
          if (!(k.front() > k.back()))
            throw ValidationError("pocock_simon: kappa_1 must exceed kappa_T");
        } else if constexpr (std::is_same_v<P, policy::MultiContinuous>) {
          if (!(v.K0 > 0.0) || !std::isfinite(v.K0))
            throw ValidationError("multi_continuous: K0 must be positive");
        }
      },
      p);
}

namespace detail {
inline void check_finite(std::span<const double> xs, const char* what) {
  for (double x : xs)
    if (std::isnan(x)) throw DomainError(std::string(what) + ": NaN input");
}
} // namespace detail

// Probability of treatment 1 given diff = Imb^(1) - Imb^(2).
inline double efron_two_treatment(double diff, double rho) {
  if (std::isnan(diff)) throw DomainError("efron: NaN imbalance difference");
  if (!(rho > 0.5 && rho < 1.0)) throw ValidationError("efron: rho must satisfy 0.5 < rho < 1");
  if (diff < 0.0) return rho;
  if (diff > 0.0) return 1.0 - rho;
  return 0.5;
}

// Probability of treatment 1: 1 - Phi(clamp(diff, -D, D)). Each sign is
// evaluated from the upper tail so that l(x) + l(-x) == 1 in floating point.
inline double continuous_two_treatment(double diff, double D) {
  if (std::isnan(diff)) throw DomainError("continuous: NaN imbalance difference");
  if (!(D > 0.0)) throw ValidationError("continuous: D must be positive");
  const double c = std::clamp(diff, -D, D);
  if (c >= 0.0) return normal_sf(c);
  return 1.0 - normal_sf(-c);
}

// Rank-based allocation; tied treatments share the mean kappa of the ranks they occupy.
inline std::vector<double> pocock_simon_multi(std::span<const double> imbalances,
                                              std::span<const double> kappa) {
  detail::check_finite(imbalances, "pocock_simon");
  const std::size_t T = imbalances.size();
  if (kappa.size() != T)
    throw DomainError("pocock_simon: " + std::to_string(T) + " imbalances but " +
                      std::to_string(kappa.size()) + " kappa values");
  std::vector<std::size_t> order(T);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return imbalances[a] < imbalances[b]; });
  std::vector<double> p(T);
  std::size_t start = 0;
  while (start < T) {
    std::size_t end = start + 1;
    while (end < T && imbalances[order[end]] == imbalances[order[start]]) ++end;
    double mean = 0.0;
    for (std::size_t r = start; r < end; ++r) mean += kappa[r];
    mean /= static_cast<double>(end - start);
    for (std::size_t r = start; r < end; ++r) p[order[r]] = mean;
    start = end;
  }
  return p;
}

inline std::vector<double> continuous_multi(std::span<const double> deviations, double K0) {
  detail::check_finite(deviations, "multi_continuous");
  if (!(K0 > 0.0)) throw ValidationError("multi_continuous: K0 must be positive");
  std::vector<double> w(deviations.size());
  double total = 0.0;
  for (std::size_t t = 0; t < w.size(); ++t) {
    w[t] = continuous_two_treatment(deviations[t], K0);
    total += w[t];
  }
  for (double& x : w) x /= total;
  return w;
}

inline std::vector<double> complete_randomization(std::size_t treatments) {
  if (treatments < 2) throw DomainError("complete randomization needs at least 2 treatments");
  return std::vector<double>(treatments, 1.0 / static_cast<double>(treatments));
}

// Maps the potential imbalances Imb^(t) (multi-treatment scale, one per
// treatment) to an assignment probability vector.
//
// Two-treatment policies see 2 * (Imb^(1) - Imb^(2)), which is the
// difference of the two-treatment measure ||sum (2T_i - 1) phi_i||^2.
// PocockSimonRank ranks the raw imbalances; MultiContinuous sees the
// deviations Imb^(t) - mean(Imb).
inline std::vector<double> allocation_probabilities(const AllocationPolicy& policy,
                                                    std::span<const double> imbalances) {
  detail::check_finite(imbalances, "allocation");
  const std::size_t T = imbalances.size();
  return std::visit(
      [&](const auto& v) -> std::vector<double> {
        using P = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<P, policy::CompleteRandomization>) {
          return complete_randomization(T);
        } else if constexpr (std::is_same_v<P, policy::EfronBiasedCoin> ||
                             std::is_same_v<P, policy::TwoTreatmentContinuous>) {
          if (T != 2)
            throw DomainError(policy_name(policy) + ": requires exactly two treatments, got " +
                              std::to_string(T));
          const double diff = 2.0 * (imbalances[0] - imbalances[1]);
          double p1;
          if constexpr (std::is_same_v<P, policy::EfronBiasedCoin>) p1 = efron_two_treatment(diff, v.rho);
          else p1 = continuous_two_treatment(diff, v.D);
          return {p1, 1.0 - p1};
        } else if constexpr (std::is_same_v<P, policy::PocockSimonRank>) {
          return pocock_simon_multi(imbalances, v.kappa);
        } else {
          const double mean =
              std::accumulate(imbalances.begin(), imbalances.end(), 0.0) / static_cast<double>(T);
          std::vector<double> dev(T);
          for (std::size_t t = 0; t < T; ++t) dev[t] = imbalances[t] - mean;
          return continuous_multi(dev, v.K0);
        }
      },
      policy);
}

} // namespace carlab
