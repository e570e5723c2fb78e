#pragma once

#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "carlab/allocation.hpp"
#include "carlab/errors.hpp"
#include "carlab/harness/config.hpp"
#include "carlab/inference.hpp"
#include "carlab/random.hpp"

namespace carlab {

struct AnalysisOptions {
  double alpha = 0.05;
  std::size_t block_length = 0;  // 0: floor(sqrt(n))
  std::size_t bootstrap_size = 500;
  // Randomization policy re-run by T_boot.
  std::optional<AllocationPolicy> policy;
  // Covariates of the true model, used by T_oracle; defaults to x_obs.
  const Eigen::MatrixXd* oracle_covariates = nullptr;
};

// Runs one test on a fitted dataset. rng is consumed only by T_boot and T_mbb.
inline TestResult run_test(TestKind kind, const TrialDataset& data, const FitResult& fit,
                           const AnalysisOptions& opt, Rng& rng) {
  const std::size_t l = opt.block_length ? opt.block_length : default_block_length(data.size());
  switch (kind) {
  case TestKind::Ls: return t_ls(fit, opt.alpha);
  case TestKind::Reg:
    if (!data.phi) throw ValidationError("T_reg: balancing features are not available");
    return adjusted_test(fit, sigma_tau_reg(fit, *data.phi), AdjustMode::Gram, opt.alpha);
  case TestKind::Boot:
    if (!opt.policy) throw ValidationError("T_boot: no randomization policy given");
    return adjusted_test(fit, sigma_tau_bootstrap(data, *opt.policy, opt.bootstrap_size, rng),
                         AdjustMode::Direct, opt.alpha);
  case TestKind::Mb: return adjusted_test(fit, sigma_tau_mb(fit, l), AdjustMode::Gram, opt.alpha);
  case TestKind::Mbj: return adjusted_test(fit, sigma_tau_mbj(data, l), AdjustMode::Direct, opt.alpha);
  case TestKind::Mbb:
    return adjusted_test(fit, sigma_tau_mbb(data, l, opt.bootstrap_size, rng), AdjustMode::Direct,
                         opt.alpha);
  case TestKind::Logi: return logistic_treatment_test(data.y, data.t, data.x_obs, opt.alpha, "T_logi");
  case TestKind::Oracle:
    return logistic_treatment_test(data.y, data.t,
                                   opt.oracle_covariates ? *opt.oracle_covariates : data.x_obs,
                                   opt.alpha, "T_oracle");
  }
  throw ValidationError("run_test: unknown test");
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(config_detail::trim(cur));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
} // namespace detail

// Reads a dataset with a header row. Columns: y, t, x1..xp, phi1..phiq
// (x and phi columns optional, in any order). t is 1 for treatment, 0 control.
inline TrialDataset read_dataset_csv(std::istream& in, const std::string& source = "data") {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  long y_col = -1, t_col = -1;
  std::vector<std::pair<std::size_t, std::size_t>> x_cols, phi_cols;  // (index, column)
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string h = config_detail::lower(header[c]);
    auto numbered = [&](const std::string& prefix) -> std::optional<std::size_t> {
      if (h.rfind(prefix, 0) != 0 || h.size() == prefix.size()) return std::nullopt;
      std::size_t v = 0;
      for (char ch : h.substr(prefix.size())) {
        if (ch < '0' || ch > '9') return std::nullopt;
        v = v * 10 + static_cast<std::size_t>(ch - '0');
      }
      return v;
    };
    if (h == "y") y_col = static_cast<long>(c);
    else if (h == "t") t_col = static_cast<long>(c);
    else if (auto k = numbered("phi")) phi_cols.emplace_back(*k, c);
    else if (auto j = numbered("x")) x_cols.emplace_back(*j, c);
    else throw ValidationError(source + ": unknown column '" + header[c] + "'");
  }
  if (y_col < 0 || t_col < 0) throw ValidationError(source + ": columns y and t are required");
  std::sort(x_cols.begin(), x_cols.end());
  std::sort(phi_cols.begin(), phi_cols.end());

  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (config_detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw ValidationError(source + ": line " + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " fields");
    std::vector<double> row(fields.size());
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const config_detail::Entry e{fields[c], lineno};
      row[c] = config_detail::to_double(header[c], e, fields[c]);
    }
    rows.push_back(std::move(row));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  TrialDataset d;
  d.y.resize(n);
  d.t.resize(rows.size());
  d.x_obs.resize(n, static_cast<Eigen::Index>(x_cols.size()));
  if (!phi_cols.empty()) d.phi = Eigen::MatrixXd(n, static_cast<Eigen::Index>(phi_cols.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    d.y(i) = r[static_cast<std::size_t>(y_col)];
    const double tv = r[static_cast<std::size_t>(t_col)];
    if (tv != 0.0 && tv != 1.0)
      throw ValidationError(source + ": line " + std::to_string(i + 2) + ": t must be 0 or 1");
    d.t[static_cast<std::size_t>(i)] = static_cast<int>(tv);
    for (std::size_t j = 0; j < x_cols.size(); ++j) d.x_obs(i, static_cast<Eigen::Index>(j)) = r[x_cols[j].second];
    for (std::size_t k = 0; k < phi_cols.size(); ++k)
      (*d.phi)(i, static_cast<Eigen::Index>(k)) = r[phi_cols[k].second];
  }
  d.validate();
  return d;
}

inline TrialDataset read_dataset_csv_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + path);
  return read_dataset_csv(f, path);
}

} // namespace carlab
