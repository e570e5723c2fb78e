#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "carlab/allocation.hpp"
#include "carlab/errors.hpp"
#include "carlab/features.hpp"
#include "carlab/random.hpp"

namespace carlab {

struct AssignmentRecord {
  std::size_t unit = 0;
  std::size_t treatment = 0;
  std::vector<double> probabilities;
};

struct HistoryEntry {
  std::size_t treatment = 0;
  FeatureVector features;
};

// Sequential trial state: Lambda^(t) = sum_i (T_i^(t) - 1/T) phi(X_i), stored
// row-major as a T x q matrix, plus per-arm counts.
class TrialState {
public:
  TrialState(std::size_t treatments, std::size_t dim, bool keep_history = false)
      : T_(treatments), q_(dim), lambda_(treatments * dim, 0.0), counts_(treatments, 0),
        keep_history_(keep_history) {
    if (treatments < 2) throw ValidationError("trial needs at least 2 treatments");
    if (dim < 1) throw ValidationError("trial needs feature dimension >= 1");
  }

  std::size_t treatments() const { return T_; }
  std::size_t dim() const { return q_; }
  std::size_t units() const { return n_; }
  const std::vector<std::size_t>& counts() const { return counts_; }
  std::span<const double> lambda(std::size_t t) const { return {lambda_.data() + t * q_, q_}; }
  const std::vector<HistoryEntry>& history() const { return history_; }
  bool keeps_history() const { return keep_history_; }

  // Current Imb_n = sum_t ||Lambda^(t)||^2.
  double imbalance() const {
    double s = 0.0;
    for (double v : lambda_) s += v * v;
    return s;
  }

  // Imb^(t) for a hypothetical assignment of the next unit to each arm t:
  // ||Lambda||^2 + (1 - 1/T) ||phi||^2 + 2 <Lambda^(t), phi>.
  std::vector<double> potential_imbalances(std::span<const double> phi) const {
    check_dim(phi);
    double phi2 = 0.0;
    for (double v : phi) phi2 += v * v;
    const double common = imbalance() + (1.0 - 1.0 / static_cast<double>(T_)) * phi2;
    std::vector<double> out(T_);
    for (std::size_t t = 0; t < T_; ++t) {
      const double* row = lambda_.data() + t * q_;
      double dot = 0.0;
      for (std::size_t k = 0; k < q_; ++k) dot += row[k] * phi[k];
      out[t] = common + 2.0 * dot;
    }
    return out;
  }

  // Records the assignment of a unit with features phi to arm t.
  void commit(std::size_t t, std::span<const double> phi) {
    check_dim(phi);
    if (t >= T_) throw DomainError("commit: treatment index out of range");
    const double inv_T = 1.0 / static_cast<double>(T_);
    for (std::size_t s = 0; s < T_; ++s) {
      const double coef = (s == t ? 1.0 : 0.0) - inv_T;
      double* row = lambda_.data() + s * q_;
      for (std::size_t k = 0; k < q_; ++k) row[k] += coef * phi[k];
    }
    ++counts_[t];
    ++n_;
    if (keep_history_) history_.push_back({t, FeatureVector(phi.begin(), phi.end())});
  }

private:
  void check_dim(std::span<const double> phi) const {
    if (phi.size() != q_)
      throw DomainError("feature vector has length " + std::to_string(phi.size()) +
                        ", trial expects " + std::to_string(q_));
  }

  std::size_t T_;
  std::size_t q_;
  std::size_t n_ = 0;
  std::vector<double> lambda_;
  std::vector<std::size_t> counts_;
  bool keep_history_;
  std::vector<HistoryEntry> history_;
};

inline TrialState new_trial(std::size_t treatments, std::size_t dim, bool keep_history = false) {
  return TrialState(treatments, dim, keep_history);
}

// Inverse-CDF draw: the first arm whose cumulative probability exceeds u.
inline std::size_t sample_index(std::span<const double> probabilities, double u) {
  double cum = 0.0;
  for (std::size_t t = 0; t + 1 < probabilities.size(); ++t) {
    cum += probabilities[t];
    if (u < cum) return t;
  }
  return probabilities.size() - 1;
}

// Assigns the next unit using a caller-supplied uniform draw u in [0, 1).
inline AssignmentRecord assign_with_uniform(TrialState& state, std::span<const double> phi,
                                            const AllocationPolicy& policy, double u) {
  std::vector<double> probs;
  if (std::holds_alternative<policy::CompleteRandomization>(policy)) {
    if (phi.size() != state.dim()) throw DomainError("feature vector length mismatch");
    probs = complete_randomization(state.treatments());
  } else {
    probs = allocation_probabilities(policy, state.potential_imbalances(phi));
  }
  const std::size_t t = sample_index(probs, u);
  AssignmentRecord rec{state.units(), t, std::move(probs)};
  state.commit(t, phi);
  return rec;
}

inline AssignmentRecord assign_next(TrialState& state, std::span<const double> phi,
                                    const AllocationPolicy& policy, Rng& rng) {
  return assign_with_uniform(state, phi, policy, rng.uniform());
}

// Normalized imbalance metrics of a finished trial.
struct ImbalanceMetrics {
  double imb0 = 0.0;
  std::vector<double> imb;  // one per requested covariate
};

// Streaming accumulator of sum_i (T_i^(t) - 1/T) Z_i per arm for Z = 1 and
// each tracked covariate, plus sum_i Z_i^2 for the normalization.
class ImbalanceAccumulator {
public:
  ImbalanceAccumulator(std::size_t treatments, std::size_t covariates)
      : T_(treatments), k_(covariates), sums_(treatments * (covariates + 1), 0.0),
        squares_(covariates, 0.0) {
    if (treatments < 2) throw ValidationError("imbalance metrics need at least 2 treatments");
  }

  void add(std::size_t t, std::span<const double> z) {
    if (z.size() != k_) throw DomainError("imbalance accumulator: covariate count mismatch");
    if (t >= T_) throw DomainError("imbalance accumulator: treatment index out of range");
    const double inv_T = 1.0 / static_cast<double>(T_);
    for (std::size_t s = 0; s < T_; ++s) {
      const double coef = (s == t ? 1.0 : 0.0) - inv_T;
      double* row = sums_.data() + s * (k_ + 1);
      row[0] += coef;
      for (std::size_t j = 0; j < k_; ++j) row[j + 1] += coef * z[j];
    }
    for (std::size_t j = 0; j < k_; ++j) squares_[j] += z[j] * z[j];
    ++n_;
  }

  std::size_t units() const { return n_; }

  // Imb_0 / (1 - 1/T) and Imb_j / ((1 - 1/T) * mean(Z_j^2)). For T = 2 these
  // equal |sum (2T_i - 1)|^2 and |sum (2T_i - 1) Z_i|^2 / mean(Z^2).
  ImbalanceMetrics metrics() const {
    const double scale = 1.0 - 1.0 / static_cast<double>(T_);
    ImbalanceMetrics m;
    m.imb.resize(k_);
    for (std::size_t c = 0; c <= k_; ++c) {
      double total = 0.0;
      for (std::size_t s = 0; s < T_; ++s) {
        const double v = sums_[s * (k_ + 1) + c];
        total += v * v;
      }
      if (c == 0) {
        m.imb0 = total / scale;
      } else {
        const double mean_sq = squares_[c - 1] / static_cast<double>(n_);
        if (!(mean_sq > 0.0))
          throw DomainError("imbalance metric undefined: covariate " + std::to_string(c) +
                            " has zero mean square");
        m.imb[c - 1] = total / (scale * mean_sq);
      }
    }
    return m;
  }

private:
  std::size_t T_;
  std::size_t k_;
  std::size_t n_ = 0;
  std::vector<double> sums_;
  std::vector<double> squares_;
};

// Normalized metrics from a complete history. covariates[i] holds unit i's
// covariate vector; columns selects the covariates J.
inline ImbalanceMetrics imbalance_metrics(std::span<const std::size_t> assignments,
                                          std::size_t treatments,
                                          std::span<const std::vector<double>> covariates,
                                          std::span<const std::size_t> columns) {
  if (assignments.size() != covariates.size())
    throw DomainError("imbalance_metrics: assignment and covariate counts differ");
  if (assignments.empty()) throw DomainError("imbalance_metrics: empty history");
  ImbalanceAccumulator acc(treatments, columns.size());
  std::vector<double> z(columns.size());
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    for (std::size_t j = 0; j < columns.size(); ++j) {
      if (columns[j] >= covariates[i].size()) throw DomainError("imbalance_metrics: column out of range");
      z[j] = covariates[i][columns[j]];
    }
    acc.add(assignments[i], z);
  }
  return acc.metrics();
}

} // namespace carlab
