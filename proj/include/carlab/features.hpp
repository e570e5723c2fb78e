#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "carlab/errors.hpp"

namespace carlab {

// Covariates of one unit. observed[j] marks whether X_j is available to the
// analysis working model; randomization may use every coordinate.
struct CovariateVector {
  std::vector<double> values;
  std::vector<bool> observed;

  CovariateVector() = default;
  explicit CovariateVector(std::vector<double> v)
      : values(std::move(v)), observed(values.size(), true) {}
  CovariateVector(std::vector<double> v, std::vector<bool> mask)
      : values(std::move(v)), observed(std::move(mask)) {
    validate();
  }

  std::size_t size() const { return values.size(); }

  void validate() const {
    if (observed.size() != values.size())
      throw ValidationError("CovariateVector: observed mask length differs from values");
    for (double v : values)
      if (!std::isfinite(v)) throw DomainError("CovariateVector: non-finite covariate value");
  }
};

using FeatureVector = std::vector<double>;

// Level index of value for strictly increasing thresholds t_1 < ... < t_k:
// value <= t_1 -> 0, value >= t_k -> k, and in between the number of
// thresholds <= value. With thresholds (0, 2) this is
// d(X) = 1{0 < X < 2} + 2 * 1{X >= 2}.
inline std::size_t discretize(double value, std::span<const double> thresholds) {
  if (std::isnan(value)) throw DomainError("discretize: NaN value");
  if (thresholds.empty()) throw ValidationError("discretize: no thresholds");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i - 1] < thresholds[i]))
      throw ValidationError("discretize: thresholds must be strictly increasing");
  const std::size_t k = thresholds.size();
  if (value <= thresholds.front()) return 0;
  if (value >= thresholds.back()) return k;
  std::size_t level = 1;
  while (level < k - 1 && value > thresholds[level]) ++level;
  return level;
}

// A discrete coordinate used by the indicator-based feature maps. Either the
// raw value must equal one of `levels`, or, when `thresholds` is non-empty,
// the value is discretized first and the levels are 0..thresholds.size().
struct DiscreteCoord {
  std::size_t index = 0;
  std::vector<double> levels;
  std::vector<double> thresholds;

  static DiscreteCoord raw(std::size_t index, std::vector<double> levels) {
    return {index, std::move(levels), {}};
  }
  static DiscreteCoord binned(std::size_t index, std::vector<double> thresholds) {
    std::vector<double> levels(thresholds.size() + 1);
    for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = static_cast<double>(i);
    return {index, std::move(levels), std::move(thresholds)};
  }

  std::size_t level_count() const { return levels.size(); }

  std::size_t level_of(std::span<const double> x) const {
    if (index >= x.size()) throw DomainError("feature map: coordinate index out of range");
    if (!thresholds.empty()) return discretize(x[index], thresholds);
    const double v = x[index];
    for (std::size_t l = 0; l < levels.size(); ++l)
      if (levels[l] == v) return l;
    throw DomainError("feature map: covariate X" + std::to_string(index + 1) + " = " +
                      std::to_string(v) + " is not a declared level");
  }
};

namespace feature {

// One-hot over the joint stratum of all coordinates.
struct Stratified {
  std::vector<DiscreteCoord> coords;
};

// Pocock-Simon marginal indicators, sqrt(w_t) at the observed level of each coordinate.
struct Marginal {
  std::vector<DiscreteCoord> coords;
  std::vector<double> weights;
};

// Hu-Hu: (sqrt(w0); marginal block with sqrt(w_m,t); stratum block with sqrt(w_s)).
struct HuHu {
  std::vector<DiscreteCoord> coords;
  double w0 = 1.0;
  std::vector<double> wm;
  double ws = 1.0;
};

struct Constant {
  double value = 1.0;
  double weight = 1.0;
};
struct Identity {
  std::size_t j = 0;
  double weight = 1.0;
};
struct Product {
  std::size_t j = 0, k = 0;
  double weight = 1.0;
};
struct Power {
  std::size_t j = 0;
  int degree = 1;
  double weight = 1.0;
};
// sqrt(weight) * 1{X_j == level}
struct Indicator {
  std::size_t j = 0;
  double level = 0.0;
  double weight = 1.0;
};

using Term = std::variant<Constant, Identity, Product, Power, Indicator>;

struct Composite {
  std::vector<Term> terms;
};

} // namespace feature

using FeatureMapSpec =
    std::variant<feature::Stratified, feature::Marginal, feature::HuHu, feature::Composite>;

namespace detail {

inline void validate_coords(const std::vector<DiscreteCoord>& coords, std::size_t p_total) {
  if (coords.empty()) throw ValidationError("feature map: no coordinates");
  for (const auto& c : coords) {
    if (p_total != 0 && c.index >= p_total)
      throw ValidationError("feature map: coordinate index " + std::to_string(c.index) +
                            " >= covariate count " + std::to_string(p_total));
    if (c.levels.empty()) throw ValidationError("feature map: empty level list");
    for (std::size_t i = 1; i < c.thresholds.size(); ++i)
      if (!(c.thresholds[i - 1] < c.thresholds[i]))
        throw ValidationError("feature map: thresholds must be strictly increasing");
    if (!c.thresholds.empty() && c.levels.size() != c.thresholds.size() + 1)
      throw ValidationError("feature map: binned coordinate needs thresholds+1 levels");
    for (std::size_t a = 0; a < c.levels.size(); ++a) {
      if (!std::isfinite(c.levels[a])) throw ValidationError("feature map: non-finite level");
      for (std::size_t b = a + 1; b < c.levels.size(); ++b)
        if (c.levels[a] == c.levels[b]) throw ValidationError("feature map: duplicate level");
    }
  }
}

inline std::size_t stratum_count(const std::vector<DiscreteCoord>& coords) {
  std::size_t n = 1;
  for (const auto& c : coords) n *= c.level_count();
  return n;
}

inline std::size_t marginal_count(const std::vector<DiscreteCoord>& coords) {
  std::size_t n = 0;
  for (const auto& c : coords) n += c.level_count();
  return n;
}

// Lexicographic stratum index; the first coordinate is the most significant.
inline std::size_t stratum_index(const std::vector<DiscreteCoord>& coords,
                                 std::span<const double> x) {
  std::size_t idx = 0;
  for (const auto& c : coords) idx = idx * c.level_count() + c.level_of(x);
  return idx;
}

inline void check_index(std::size_t j, std::size_t p_total) {
  if (p_total != 0 && j >= p_total)
    throw ValidationError("feature map: term references X" + std::to_string(j + 1) +
                          " beyond covariate count " + std::to_string(p_total));
}

inline double eval_term(const feature::Term& term, std::span<const double> x) {
  auto at = [&](std::size_t j) {
    if (j >= x.size()) throw DomainError("feature map: term index out of range");
    return x[j];
  };
  return std::visit(
      [&](const auto& t) -> double {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, feature::Constant>) {
          return t.weight * t.value;
        } else if constexpr (std::is_same_v<T, feature::Identity>) {
          return t.weight * at(t.j);
        } else if constexpr (std::is_same_v<T, feature::Product>) {
          return t.weight * at(t.j) * at(t.k);
        } else if constexpr (std::is_same_v<T, feature::Power>) {
          return t.weight * std::pow(at(t.j), t.degree);
        } else {
          return at(t.j) == t.level ? std::sqrt(t.weight) : 0.0;
        }
      },
      term);
}

} // namespace detail

// Checks every invariant of the spec. p_total = 0 skips the coordinate range check.
inline void validate(const FeatureMapSpec& spec, std::size_t p_total = 0) {
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, feature::Stratified>) {
          detail::validate_coords(s.coords, p_total);
        } else if constexpr (std::is_same_v<S, feature::Marginal>) {
          detail::validate_coords(s.coords, p_total);
          if (s.weights.size() != s.coords.size())
            throw ValidationError("marginal feature map: one weight per coordinate required");
          for (double w : s.weights)
            if (!(w > 0.0) || !std::isfinite(w))
              throw ValidationError("marginal feature map: weights must be positive");
        } else if constexpr (std::is_same_v<S, feature::HuHu>) {
          detail::validate_coords(s.coords, p_total);
          if (s.wm.size() != s.coords.size())
            throw ValidationError("Hu-Hu feature map: one marginal weight per coordinate required");
          double total = s.w0 + s.ws;
          if (!(s.w0 >= 0.0) || !(s.ws >= 0.0))
            throw ValidationError("Hu-Hu feature map: weights must be non-negative");
          for (double w : s.wm) {
            if (!(w >= 0.0)) throw ValidationError("Hu-Hu feature map: weights must be non-negative");
            total += w;
          }
          if (total == 0.0) throw ValidationError("Hu-Hu feature map: all weights are zero");
        } else {
          if (s.terms.empty()) throw ValidationError("composite feature map: no terms");
          for (const auto& term : s.terms) {
            std::visit(
                [&](const auto& t) {
                  using T = std::decay_t<decltype(t)>;
                  if (!std::isfinite(t.weight))
                    throw ValidationError("composite feature map: non-finite weight");
                  if constexpr (std::is_same_v<T, feature::Identity> ||
                                std::is_same_v<T, feature::Power>) {
                    detail::check_index(t.j, p_total);
                  } else if constexpr (std::is_same_v<T, feature::Product>) {
                    detail::check_index(t.j, p_total);
                    detail::check_index(t.k, p_total);
                  } else if constexpr (std::is_same_v<T, feature::Indicator>) {
                    detail::check_index(t.j, p_total);
                    if (!(t.weight > 0.0))
                      throw ValidationError("composite feature map: indicator weight must be positive");
                  } else {
                    if (!std::isfinite(t.value))
                      throw ValidationError("composite feature map: non-finite constant");
                  }
                },
                term);
          }
        }
      },
      spec);
}

// Output dimension q.
inline std::size_t feature_dim(const FeatureMapSpec& spec) {
  validate(spec);
  return std::visit(
      [](const auto& s) -> std::size_t {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, feature::Stratified>) {
          return detail::stratum_count(s.coords);
        } else if constexpr (std::is_same_v<S, feature::Marginal>) {
          return detail::marginal_count(s.coords);
        } else if constexpr (std::is_same_v<S, feature::HuHu>) {
          return 1 + detail::marginal_count(s.coords) + detail::stratum_count(s.coords);
        } else {
          return s.terms.size();
        }
      },
      spec);
}

// Writes phi(x) into out, which must have length feature_dim(spec). The spec
// is assumed valid; call validate() once up front.
inline void apply_feature_map_into(const FeatureMapSpec& spec, std::span<const double> x,
                                   std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, feature::Stratified>) {
          out[detail::stratum_index(s.coords, x)] = 1.0;
        } else if constexpr (std::is_same_v<S, feature::Marginal>) {
          std::size_t offset = 0;
          for (std::size_t t = 0; t < s.coords.size(); ++t) {
            out[offset + s.coords[t].level_of(x)] = std::sqrt(s.weights[t]);
            offset += s.coords[t].level_count();
          }
        } else if constexpr (std::is_same_v<S, feature::HuHu>) {
          out[0] = std::sqrt(s.w0);
          std::size_t offset = 1;
          for (std::size_t t = 0; t < s.coords.size(); ++t) {
            out[offset + s.coords[t].level_of(x)] = std::sqrt(s.wm[t]);
            offset += s.coords[t].level_count();
          }
          out[offset + detail::stratum_index(s.coords, x)] = std::sqrt(s.ws);
        } else {
          for (std::size_t i = 0; i < s.terms.size(); ++i)
            out[i] = detail::eval_term(s.terms[i], x);
        }
      },
      spec);
  for (double v : out)
    if (!std::isfinite(v)) throw DomainError("feature map: non-finite feature value");
}

inline FeatureVector apply_feature_map(const FeatureMapSpec& spec, std::span<const double> x) {
  FeatureVector out(feature_dim(spec));
  for (double v : x)
    if (!std::isfinite(v)) throw DomainError("feature map: non-finite covariate value");
  apply_feature_map_into(spec, x, out);
  return out;
}

inline FeatureVector apply_feature_map(const FeatureMapSpec& spec, const CovariateVector& x) {
  x.validate();
  validate(spec, x.size());
  return apply_feature_map(spec, std::span<const double>(x.values));
}

// (1, X_{j1}, ..., X_{jk}) or, without the constant, (X_{j1}, ..., X_{jk}).
inline FeatureMapSpec linear_features(std::span<const std::size_t> coords, bool intercept = true) {
  feature::Composite c;
  if (intercept) c.terms.emplace_back(feature::Constant{});
  for (std::size_t j : coords) c.terms.emplace_back(feature::Identity{j});
  return c;
}

} // namespace carlab
