#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "carlab/datagen.hpp"
#include "carlab/engine.hpp"
#include "carlab/errors.hpp"
#include "carlab/features.hpp"
#include "carlab/harness/analysis.hpp"
#include "carlab/harness/config.hpp"
#include "carlab/harness/table.hpp"
#include "carlab/inference.hpp"
#include "carlab/random.hpp"

namespace carlab {

// --threads, else CARLAB_THREADS, else the hardware concurrency.
inline std::size_t resolve_threads(std::size_t requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CARLAB_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Calls work(r) for r in [0, count) on up to `threads` workers, worker w taking
// r = w, w + threads, ... The first exception is rethrown after all workers stop.
inline void parallel_for(std::size_t count, std::size_t threads,
                         const std::function<void(std::size_t)>& work) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t r = 0; r < count; ++r) work(r);
    return;
  }
  std::exception_ptr first;
  std::mutex mu;
  std::atomic<bool> stop{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t r = w; r < count && !stop.load(); r += threads) {
        try {
          work(r);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
          stop = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

namespace experiment_detail {

// Stream tags for seed derivation within a replicate.
inline constexpr std::uint64_t kCovariateStream = 0;
inline constexpr std::uint64_t kProcedureStream = 1000;
inline constexpr std::uint64_t kTestStream = 1000000;

inline std::vector<CovariateVector> draw_covariates(const ExperimentSpec& spec, Rng& rng) {
  std::vector<CovariateVector> xs;
  xs.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) xs.push_back(gen_covariates(spec.setting, rng));
  return xs;
}

// Runs the units through a procedure and returns the engine arm of each unit.
inline std::vector<std::size_t> randomize(const ExperimentSpec& spec, const Procedure& proc,
                                          const std::vector<CovariateVector>& xs, Rng& rng,
                                          Eigen::MatrixXd* phi_out = nullptr) {
  const std::size_t q = proc.features ? feature_dim(*proc.features) : 1;
  TrialState state(spec.treatments, q);
  FeatureVector phi(q, 1.0);
  std::vector<std::size_t> arms(xs.size());
  if (phi_out && proc.features) phi_out->resize(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(q));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (proc.features) {
      apply_feature_map_into(*proc.features, xs[i].values, phi);
      if (phi_out)
        for (std::size_t k = 0; k < q; ++k) (*phi_out)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = phi[k];
    }
    arms[i] = assign_next(state, phi, proc.policy, rng).treatment;
  }
  return arms;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

// Mean and standard error sd / sqrt(R) over the given values, in order.
inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe out;
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return out;
}

} // namespace experiment_detail

struct RunOptions {
  std::size_t threads = 0;  // 0: resolve_threads()
  std::optional<std::uint64_t> seed;  // overrides the config seed
  double max_failure_fraction = 0.01;
};

// Normalized imbalance metrics per procedure. Every replicate draws one
// covariate sample shared by all procedures; each procedure has its own
// allocation stream.
inline ResultTable run_imbalance_experiment(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  using namespace experiment_detail;
  if (spec.kind != ExperimentKind::Imbalance)
    throw ValidationError("run_imbalance_experiment: spec kind is not imbalance");
  const std::uint64_t seed = opt.seed.value_or(spec.seed);
  const std::size_t R = spec.replicates, K = spec.procedures.size(), J = spec.imbalance_columns.size();

  // slots[(r * K + k)]: metrics, or empty on failure
  std::vector<std::vector<double>> slots(R * K);
  std::vector<std::string> errors(R * K);
  parallel_for(R, resolve_threads(opt.threads), [&](std::size_t r) {
    const std::uint64_t seed_r = derive_seed(seed, r);
    Rng cov_rng(derive_seed(seed_r, kCovariateStream));
    const auto xs = draw_covariates(spec, cov_rng);
    std::vector<std::vector<double>> z(spec.n, std::vector<double>(J));
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t j = 0; j < J; ++j) z[i][j] = xs[i].values[spec.imbalance_columns[j]];
    for (std::size_t k = 0; k < K; ++k) {
      Rng rng(derive_seed(seed_r, kProcedureStream + k));
      const auto arms = randomize(spec, spec.procedures[k], xs, rng);
      try {
        const auto m = imbalance_metrics(arms, spec.treatments, z, spec.imbalance_columns);
        auto& s = slots[r * K + k];
        s.push_back(m.imb0);
        s.insert(s.end(), m.imb.begin(), m.imb.end());
      } catch (const DomainError& e) {
        errors[r * K + k] = e.what();
      }
    }
  });

  ResultTable table;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t failures = 0;
    std::string first_error;
    for (std::size_t r = 0; r < R; ++r)
      if (slots[r * K + k].empty()) {
        if (!failures) first_error = errors[r * K + k];
        ++failures;
      }
    const std::string& name = spec.procedures[k].name;
    if (static_cast<double>(failures) > opt.max_failure_fraction * static_cast<double>(R)) {
      table.failed_cells.push_back({"imbalance " + name, failures, R, first_error});
      continue;
    }
    table.excluded_replicates += failures;
    for (std::size_t c = 0; c <= J; ++c) {
      std::vector<double> v;
      v.reserve(R);
      for (std::size_t r = 0; r < R; ++r)
        if (!slots[r * K + k].empty()) v.push_back(slots[r * K + k][c]);
      const auto ms = mean_se(v);
      const std::string metric =
          c == 0 ? "Imb0" : "Imb" + std::to_string(spec.imbalance_columns[c - 1] + 1);
      table.rows.push_back({"imbalance", name, "", "", "", metric, ms.mean, ms.se, v.size()});
    }
  }
  return table;
}

// Rejection rates per (delta, procedure, working model, test). Covariates,
// response noise and assignments of a replicate are shared across the delta
// grid, so power curves are coupled within a replicate.
inline ResultTable run_power_experiment(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  using namespace experiment_detail;
  if (spec.kind != ExperimentKind::Power)
    throw ValidationError("run_power_experiment: spec kind is not power");
  if (spec.treatments != 2) throw ValidationError("run_power_experiment: two treatments required");
  const std::uint64_t seed = opt.seed.value_or(spec.seed);
  const std::size_t R = spec.replicates, Dn = spec.deltas.size(), K = spec.procedures.size(),
                    W = spec.working_models.size(), NT = spec.tests.size();
  const std::size_t cells = Dn * K * W * NT;
  auto cell_index = [&](std::size_t d, std::size_t k, std::size_t w, std::size_t t) {
    return ((d * K + k) * W + w) * NT + t;
  };
  // A test applies to a procedure unless it needs features the procedure lacks.
  auto applies = [&](std::size_t k, std::size_t t) {
    return !(test_needs_phi(spec.tests[t]) && !spec.procedures[k].features);
  };

  // outcome[r * cells + c]: 1 reject, 0 accept, -1 failure
  std::vector<signed char> outcome(R * cells, 0);
  std::vector<std::string> errors(R * cells);
  const std::size_t p = spec.setting.dimension();
  const std::size_t l = spec.block_length();
  const bool logistic = spec.response.kind == ResponseModel::Kind::Logistic;

  parallel_for(R, resolve_threads(opt.threads), [&](std::size_t r) {
    const std::uint64_t seed_r = derive_seed(seed, r);
    Rng cov_rng(derive_seed(seed_r, kCovariateStream));
    const auto xs = draw_covariates(spec, cov_rng);
    std::vector<double> noise(spec.n);
    for (auto& e : noise) e = logistic ? cov_rng.uniform() : cov_rng.normal();

    Eigen::MatrixXd x_all(static_cast<Eigen::Index>(spec.n), static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t j = 0; j < p; ++j)
        x_all(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = xs[i].values[j];

    for (std::size_t k = 0; k < K; ++k) {
      const Procedure& proc = spec.procedures[k];
      Rng alloc_rng(derive_seed(seed_r, kProcedureStream + k));
      Eigen::MatrixXd phi;
      const auto arms = randomize(spec, proc, xs, alloc_rng, &phi);
      std::vector<int> t(spec.n);
      for (std::size_t i = 0; i < spec.n; ++i) t[i] = treatment_indicator(arms[i]);

      for (std::size_t d = 0; d < Dn; ++d) {
        const double mu1 = LocalAlternative{spec.deltas[d]}.mu1(spec.response.mu0, spec.n);
        Eigen::VectorXd y(static_cast<Eigen::Index>(spec.n));
        for (std::size_t i = 0; i < spec.n; ++i) {
          const auto ti = static_cast<std::size_t>(t[i]);
          y(static_cast<Eigen::Index>(i)) =
              logistic ? (noise[i] < logistic_function(linear_predictor(spec.response, xs[i], ti, mu1)) ? 1.0 : 0.0)
                       : response_with_noise(spec.response, xs[i], ti, mu1, noise[i]);
        }
        for (std::size_t w = 0; w < W; ++w) {
          const auto& cols = spec.working_models[w].columns;
          TrialDataset data;
          data.y = y;
          data.t = t;
          data.x_obs.resize(static_cast<Eigen::Index>(spec.n), static_cast<Eigen::Index>(cols.size()));
          for (std::size_t j = 0; j < cols.size(); ++j)
            data.x_obs.col(static_cast<Eigen::Index>(j)) = x_all.col(static_cast<Eigen::Index>(cols[j]));
          if (proc.features && spec.phi_observable) data.phi = phi;

          std::optional<FitResult> fit;
          std::string fit_error;
          try {
            fit = lse_fit(data);
          } catch (const std::exception& e) {
            fit_error = e.what();
          }
          AnalysisOptions aopt;
          aopt.alpha = spec.alpha;
          aopt.block_length = l;
          aopt.bootstrap_size = spec.bootstrap_size;
          aopt.policy = proc.policy;
          aopt.oracle_covariates = &x_all;
          for (std::size_t ti = 0; ti < NT; ++ti) {
            if (!applies(k, ti)) continue;
            const std::size_t c = cell_index(d, k, w, ti);
            if (!fit && spec.tests[ti] != TestKind::Logi && spec.tests[ti] != TestKind::Oracle) {
              outcome[r * cells + c] = -1;
              errors[r * cells + c] = fit_error;
              continue;
            }
            Rng test_rng(derive_seed(seed_r, kTestStream + c));
            try {
              const FitResult& f = fit ? *fit : FitResult{};
              outcome[r * cells + c] = run_test(spec.tests[ti], data, f, aopt, test_rng).reject ? 1 : 0;
            } catch (const FitError& e) {
              outcome[r * cells + c] = -1;
              errors[r * cells + c] = e.what();
            } catch (const DomainError& e) {
              outcome[r * cells + c] = -1;
              errors[r * cells + c] = e.what();
            }
          }
        }
      }
    }
  });

  ResultTable table;
  for (std::size_t d = 0; d < Dn; ++d)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t ti = 0; ti < NT; ++ti) {
          if (!applies(k, ti)) continue;
          const std::size_t c = cell_index(d, k, w, ti);
          std::size_t rejects = 0, ok = 0, failures = 0;
          std::string first_error;
          for (std::size_t r = 0; r < R; ++r) {
            const auto o = outcome[r * cells + c];
            if (o < 0) {
              if (!failures) first_error = errors[r * cells + c];
              ++failures;
            } else {
              ++ok;
              rejects += static_cast<std::size_t>(o);
            }
          }
          const std::string delta = format_fixed(spec.deltas[d], 4);
          const std::string desc = "delta=" + delta + " procedure=" + spec.procedures[k].name +
                                   " model=" + spec.working_models[w].name + " test=" + test_name(spec.tests[ti]);
          if (static_cast<double>(failures) > opt.max_failure_fraction * static_cast<double>(R) || ok == 0) {
            table.failed_cells.push_back({desc, failures, R, first_error});
            continue;
          }
          table.excluded_replicates += failures;
          const double v = static_cast<double>(rejects) / static_cast<double>(ok);
          table.rows.push_back({"power", spec.procedures[k].name, spec.working_models[w].name,
                                test_name(spec.tests[ti]), delta, "rejection_rate", v,
                                rate_standard_error(v, ok), ok});
        }
  return table;
}

inline ResultTable run_experiment(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  return spec.kind == ExperimentKind::Imbalance ? run_imbalance_experiment(spec, opt)
                                                : run_power_experiment(spec, opt);
}

} // namespace carlab
