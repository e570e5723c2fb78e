// Acceptance run: one PASS/FAIL line per criterion. Exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "carlab/carlab.hpp"

using namespace carlab;

namespace {

struct Check {
  std::string what;
  bool ok = false;
};

struct Criterion {
  std::string id;
  std::string title;
  std::vector<Check> checks;

  void expect(bool ok, std::string what) { checks.push_back({std::move(what), ok}); }
  bool passed() const {
    for (const auto& c : checks)
      if (!c.ok) return false;
    return !checks.empty();
  }
};

int failures = 0;

void report(const Criterion& c, double seconds) {
  const bool ok = c.passed();
  std::printf("%s %s: %s (%zu checks, %.1fs)\n", ok ? "PASS" : "FAIL", c.id.c_str(), c.title.c_str(),
              c.checks.size(), seconds);
  for (const auto& ch : c.checks)
    if (!ch.ok) std::printf("    failed: %s\n", ch.what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void run_criterion(const std::string& id, const std::string& title, const std::function<void(Criterion&)>& body) {
  Criterion c{id, title, {}};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.expect(false, std::string("exception: ") + e.what());
  }
  report(c, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

std::string fmt(double v, int d = 4) { return format_fixed(v, d); }

ResultTable run(const std::string& config) {
  const auto spec = load_config(config);
  auto table = run_experiment(spec);
  if (!table.failed_cells.empty())
    throw FitError("cell aborted: " + table.failed_cells.front().description + ": " +
                   table.failed_cells.front().first_error);
  return table;
}

double value(const ResultTable& t, const std::string& proc, const std::string& metric, const std::string& wm = "",
             const std::string& test = "", const std::string& delta = "") {
  const auto* r = t.find(proc, metric, wm, test, delta);
  if (!r) throw ValidationError("missing row " + proc + "/" + metric + "/" + wm + "/" + test + "/" + delta);
  return r->value;
}

double rate(const ResultTable& t, const std::string& proc, const std::string& wm, const std::string& test,
            double delta = 0.0) {
  return value(t, proc, "rejection_rate", wm, test, fmt(delta));
}

std::string imbalance_config(const std::string& setting, std::size_t n, std::size_t T, const std::string& procs) {
  return "kind = imbalance\nn = " + std::to_string(n) + "\ntreatments = " + std::to_string(T) +
         "\nreplicates = 1000\nsetting = " + setting + "\nprocedures = " + procs + "\n";
}

const std::vector<std::string> kCar{"phi-CAR-BC", "phi-CAR-Con"};
const std::vector<std::string> kAdaptive{"SR", "PS", "phi-CAR-BC", "phi-CAR-Con"};
const std::vector<std::string> kAll{"CR", "SR", "PS", "phi-CAR-BC", "phi-CAR-Con"};
const std::vector<std::string> kWm{"W1", "W2", "W3"};

// Brute-force potential imbalance from per-arm feature sums.
double brute_potential(const std::vector<std::vector<double>>& arm_sums, const std::vector<double>& total,
                       const FeatureVector& phi, std::size_t chosen) {
  const std::size_t T = arm_sums.size();
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < phi.size(); ++k) {
      const double in_t = arm_sums[t][k] + (t == chosen ? phi[k] : 0.0);
      const double lam = in_t - (total[k] + phi[k]) / static_cast<double>(T);
      s += lam * lam;
    }
  return s;
}

void property_suite(Criterion& c) {
  Rng rng(424242);
  // Incremental vs brute force over 10^3 trajectories.
  double worst = 0.0;
  for (int traj = 0; traj < 1000; ++traj) {
    const std::size_t T = 2 + rng.uniform_index(3), q = 1 + rng.uniform_index(10), n = 1 + rng.uniform_index(200);
    const AllocationPolicy pol = T == 2 ? AllocationPolicy{policy::TwoTreatmentContinuous{3.0}}
                                        : AllocationPolicy{policy::MultiContinuous{3.0}};
    auto s = new_trial(T, q);
    std::vector<std::vector<double>> sums(T, std::vector<double>(q, 0.0));
    std::vector<double> total(q, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      FeatureVector phi(q);
      for (auto& v : phi) v = rng.normal(0.3, 1.7);
      const auto pot = s.potential_imbalances(phi);
      for (std::size_t t = 0; t < T; ++t) {
        const double b = brute_potential(sums, total, phi, t);
        worst = std::max(worst, std::fabs(pot[t] - b) / std::max(1.0, b));
      }
      const std::size_t a = assign_next(s, phi, pol, rng).treatment;
      for (std::size_t k = 0; k < q; ++k) {
        sums[a][k] += phi[k];
        total[k] += phi[k];
      }
    }
  }
  c.expect(worst <= 1e-9, "incremental vs brute force max rel error " + std::to_string(worst));

  // LSE orthogonality and mb(l=1) == sigma_e^2.
  double ortho = 0.0, mb_gap = 0.0;
  for (int it = 0; it < 50; ++it) {
    const std::size_t n = 100 + rng.uniform_index(400), p = rng.uniform_index(4);
    TrialDataset d;
    d.y.resize(static_cast<Eigen::Index>(n));
    d.t.resize(n);
    d.x_obs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      d.t[i] = static_cast<int>(rng.uniform_index(2));
      d.y(ii) = 2.0 * rng.normal() + d.t[i];
      for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(p); ++j) {
        d.x_obs(ii, j) = rng.normal(1.0, 1.0);
        d.y(ii) += d.x_obs(ii, j);
      }
    }
    const auto f = lse_fit(d);
    double s1 = 0.0, s0 = 0.0;
    Eigen::VectorXd sx = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      (d.t[i] ? s1 : s0) += f.residuals(ii);
      if (p) sx += f.residuals(ii) * d.x_obs.row(ii).transpose();
    }
    ortho = std::max({ortho, std::fabs(s1), std::fabs(s0), p ? sx.cwiseAbs().maxCoeff() : 0.0});
    mb_gap = std::max(mb_gap, std::fabs(sigma_tau_mb(f, 1).value - f.sigma_e2) / f.sigma_e2);
  }
  c.expect(ortho <= 1e-8, "LSE orthogonality residual " + std::to_string(ortho));
  c.expect(mb_gap <= 1e-12, "mb(l=1) vs sigma_e^2 relative gap " + std::to_string(mb_gap));

  // Allocation invariants over 10^4 random inputs.
  bool simplex = true, monotone = true, symmetric = true;
  for (int it = 0; it < 10000; ++it) {
    const std::size_t T = 2 + rng.uniform_index(4);
    std::vector<double> imb(T);
    for (auto& v : imb) v = it % 2 ? 40.0 * rng.uniform() : static_cast<double>(rng.uniform_index(3));
    std::vector<AllocationPolicy> pols{policy::CompleteRandomization{}, policy::MultiContinuous{3.0}};
    if (T == 2) {
      pols.push_back(policy::EfronBiasedCoin{0.9});
      pols.push_back(policy::TwoTreatmentContinuous{3.0});
    } else {
      std::vector<double> k(T, 0.2 / static_cast<double>(T - 1));
      k[0] = 0.8;
      pols.push_back(policy::PocockSimonRank{k});
    }
    std::vector<double> rev(imb.rbegin(), imb.rend());
    for (const auto& pol : pols) {
      const auto p = allocation_probabilities(pol, imb);
      const auto pr = allocation_probabilities(pol, rev);
      double sum = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        simplex = simplex && p[t] >= 0.0;
        sum += p[t];
        symmetric = symmetric && std::fabs(pr[T - 1 - t] - p[t]) <= 1e-13;
        for (std::size_t u = 0; u < T; ++u)
          if (imb[t] > imb[u]) monotone = monotone && p[t] <= p[u] + 1e-15;
      }
      simplex = simplex && std::fabs(sum - 1.0) <= 1e-12;
    }
  }
  c.expect(simplex, "allocation probabilities on the simplex");
  c.expect(monotone, "allocation probabilities non-increasing in imbalance");
  c.expect(symmetric, "allocation probabilities permutation-equivariant");
}

} // namespace

int main() {
  std::printf("carlab acceptance, threads=%zu\n", resolve_threads());

  run_criterion("criterion 1", "imbalance under CR, S1, n=500", [](Criterion& c) {
    const auto t = run(imbalance_config("S1", 500, 2, "CR"));
    for (const char* m : {"Imb0", "Imb1", "Imb2", "Imb3"}) {
      const double v = value(t, "CR", m);
      c.expect(std::fabs(v - 500.0) <= 40.0, std::string(m) + " = " + fmt(v, 2) + " not in 500 +- 40");
    }
  });

  run_criterion("criterion 2", "imbalance under phi-CAR-BC, S1, bounded in n", [](Criterion& c) {
    const auto t500 = run(imbalance_config("S1", 500, 2, "phi-CAR-BC"));
    const auto t200 = run(imbalance_config("S1", 200, 2, "phi-CAR-BC"));
    const double i0 = value(t500, "phi-CAR-BC", "Imb0");
    c.expect(i0 < 10.0, "Imb0 = " + fmt(i0, 3) + " not < 10");
    for (const char* m : {"Imb1", "Imb2", "Imb3"}) {
      const double v = value(t500, "phi-CAR-BC", m);
      c.expect(v < 12.0, std::string(m) + " = " + fmt(v, 3) + " not < 12");
    }
    const double ratio = i0 / value(t200, "phi-CAR-BC", "Imb0");
    c.expect(ratio < 2.0, "Imb0 ratio n=500/n=200 = " + fmt(ratio, 3) + " not < 2");
  });

  run_criterion("criterion 3", "PS balances margins but not X3 within strata", [](Criterion& c) {
    const auto t = run(imbalance_config("S1", 500, 2, "PS"));
    const double i0 = value(t, "PS", "Imb0"), i3 = value(t, "PS", "Imb3");
    c.expect(i0 < 6.0, "Imb0 = " + fmt(i0, 3) + " not < 6");
    c.expect(i3 >= 50.0 && i3 <= 95.0, "Imb3 = " + fmt(i3, 2) + " not in [50, 95]");
  });

  run_criterion("criterion 4", "unobserved covariate imbalance grows with n, S5", [](Criterion& c) {
    const auto t500 = run(imbalance_config("S5", 500, 2, "phi-CAR-BC, phi-CAR-Con"));
    const auto t200 = run(imbalance_config("S5", 200, 2, "phi-CAR-BC, phi-CAR-Con"));
    for (const auto& p : kCar) {
      const double a = value(t500, p, "Imb3"), b = value(t200, p, "Imb3");
      c.expect(a > 150.0, p + " Imb3(n=500) = " + fmt(a, 2) + " not > 150");
      c.expect(a > 2.0 * b, p + " Imb3(n=500) = " + fmt(a, 2) + " not > 2 x Imb3(n=200) = " + fmt(b, 2));
    }
  });

  run_criterion("criterion 5", "three treatments, S1, n=500", [](Criterion& c) {
    const auto t = run(imbalance_config("S1", 500, 3, "CR, phi-CAR-Con"));
    const double con = value(t, "phi-CAR-Con", "Imb0");
    c.expect(con < 10.0, "phi-CAR-Con Imb0 = " + fmt(con, 3) + " not < 10");
    for (const char* m : {"Imb0", "Imb1", "Imb2", "Imb3"}) {
      const double v = value(t, "CR", m);
      c.expect(std::fabs(v - 500.0) <= 40.0, std::string("CR ") + m + " = " + fmt(v, 2) + " not in 500 +- 40");
    }
  });

  // Setting 1, n=500, R=2000: shared by criteria 6 to 9.
  ResultTable s1;
  std::string s1_error;
  {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      s1 = run("kind = power\nn = 500\nreplicates = 2000\nsetting = S1\nresponse = setting1\n"
               "procedures = CR, SR, PS, phi-CAR-BC, phi-CAR-Con\ndeltas = 0, 5, 10, 15\n"
               "tests = T_ls, T_reg\n");
    } catch (const std::exception& e) {
      s1_error = e.what();
    }
    std::printf("    (setting 1 power run, R=2000: %.1fs)\n",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  auto with_s1 = [&](const std::function<void(Criterion&)>& body) {
    return [&, body](Criterion& c) {
      if (!s1_error.empty()) throw FitError(s1_error);
      body(c);
    };
  };

  run_criterion("criterion 6", "type I error of T_ls under W3", with_s1([&](Criterion& c) {
    for (const auto& p : kAll) {
      const double v = rate(s1, p, "W3", "T_ls");
      c.expect(std::fabs(v - 0.05) <= 0.015, p + " T_ls W3 = " + fmt(v) + " not in 0.05 +- 0.015");
    }
  }));

  run_criterion("criterion 7", "T_ls conservative under W1", with_s1([&](Criterion& c) {
    for (const auto& p : kAdaptive) {
      const double v = rate(s1, p, "W1", "T_ls");
      c.expect(v < 0.035, p + " T_ls W1 = " + fmt(v) + " not < 0.035");
    }
  }));

  run_criterion("criterion 8", "T_reg restores size and power under W1, phi-CAR-BC", with_s1([&](Criterion& c) {
    const double v0 = rate(s1, "phi-CAR-BC", "W1", "T_reg", 0.0);
    const double v10 = rate(s1, "phi-CAR-BC", "W1", "T_reg", 10.0);
    const double oracle = theoretical_power(10.0, AsymptoticParams{4.0, 0.0, 7.0}).adjusted;
    c.expect(std::fabs(v0 - 0.05) <= 0.02, "T_reg delta=0 = " + fmt(v0) + " not in 0.05 +- 0.02");
    c.expect(std::fabs(v10 - 0.705) <= 0.04, "T_reg delta=10 = " + fmt(v10) + " not in 0.705 +- 0.04");
    c.expect(std::fabs(oracle - 0.7054) <= 5e-5, "oracle power " + fmt(oracle, 6) + " != 0.7054");
  }));

  run_criterion("criterion 9", "T_reg matches the analytic power oracle", with_s1([&](Criterion& c) {
    const AsymptoticParams params{4.0, 0.0, 4.0};
    for (const auto& p : kCar)
      for (const auto& w : kWm)
        for (double d : {0.0, 5.0, 10.0, 15.0}) {
          const double th = theoretical_power(d, params).adjusted;
          const double v = rate(s1, p, w, "T_reg", d);
          const double se = rate_standard_error(th, 2000);
          c.expect(std::fabs(v - th) <= 3.0 * se, p + " " + w + " delta=" + fmt(d, 0) + ": " + fmt(v) +
                                                      " vs oracle " + fmt(th) + " (3 SE = " + fmt(3 * se) + ")");
        }
  }));

  run_criterion("criterion 10", "moving block estimators under W3", [](Criterion& c) {
    const auto t = run("kind = power\nn = 500\nreplicates = 1000\nsetting = S1\nresponse = setting1\n"
                       "procedures = SR, PS, phi-CAR-BC, phi-CAR-Con\ndeltas = 0\nworking_models = W3\n"
                       "tests = T_mb, T_mbj\n");
    for (const auto& p : kAdaptive)
      for (const char* test : {"T_mb", "T_mbj"}) {
        const double v = rate(t, p, "W3", test);
        c.expect(v >= 0.04 && v <= 0.08, p + " " + test + " W3 = " + fmt(v) + " not in [0.04, 0.08]");
      }
  });

  run_criterion("criterion 11", "heteroscedastic Setting 2", [](Criterion& c) {
    const auto t = run("kind = power\nn = 500\nreplicates = 1000\nsetting = S1\nresponse = setting2\n"
                       "procedures = CR, SR, PS, phi-CAR-BC, phi-CAR-Con\ndeltas = 0\ntests = T_ls, T_reg\n");
    for (const auto& p : kAll) {
      const double v = rate(t, p, "W3", "T_ls");
      c.expect(std::fabs(v - 0.043) <= 0.02, p + " T_ls W3 = " + fmt(v) + " not in 0.043 +- 0.02");
    }
    for (const auto& p : kCar)
      for (const auto& w : kWm) {
        const double v = rate(t, p, w, "T_reg");
        c.expect(std::fabs(v - 0.044) <= 0.02, p + " T_reg " + w + " = " + fmt(v) + " not in 0.044 +- 0.02");
      }
  });

  run_criterion("criterion 12", "oracle and property suite", property_suite);

  run_criterion("bootstrap family", "T_boot and T_mbb under W1 at R=200, B=200", [](Criterion& c) {
    const auto t = run("kind = power\nn = 500\nreplicates = 200\nsetting = S1\nresponse = setting1\n"
                       "procedures = SR, PS, phi-CAR-BC, phi-CAR-Con\ndeltas = 0\nworking_models = W1\n"
                       "tests = T_boot, T_mbb\nbootstrap_size = 200\n");
    // Reference rates at delta = 0, W1: (T_boot, T_mbb).
    const std::vector<std::pair<double, double>> table{{0.051, 0.038}, {0.054, 0.037}, {0.053, 0.030}, {0.053, 0.038}};
    for (std::size_t i = 0; i < kAdaptive.size(); ++i) {
      const double b = rate(t, kAdaptive[i], "W1", "T_boot");
      const double m = rate(t, kAdaptive[i], "W1", "T_mbb");
      c.expect(std::fabs(b - table[i].first) <= 0.04,
               kAdaptive[i] + " T_boot W1 = " + fmt(b) + " not within 0.04 of " + fmt(table[i].first, 3));
      c.expect(std::fabs(m - table[i].second) <= 0.04,
               kAdaptive[i] + " T_mbb W1 = " + fmt(m) + " not within 0.04 of " + fmt(table[i].second, 3));
    }
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
