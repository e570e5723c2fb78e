#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "carlab/carlab.hpp"

namespace fs = std::filesystem;
using namespace carlab;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitCellFailure = 3;

void report_failures(const ResultTable& table) {
  if (table.excluded_replicates)
    std::cerr << "carlab: " << table.excluded_replicates
              << " replicate results excluded after fit failures\n";
  for (const auto& f : table.failed_cells)
    std::cerr << "carlab: cell aborted (" << f.description << "): " << f.failures << " of "
              << f.replicates << " replicates failed; first error: " << f.first_error << "\n";
}

int run(const std::string& config, const std::string& out_dir, std::optional<std::uint64_t> seed,
        std::size_t threads, ExperimentKind expected) {
  const ExperimentSpec spec = load_config_file(config);
  if (spec.kind != expected)
    throw ValidationError("config: key 'kind': is " + kind_name(spec.kind) + ", but the '" +
                          kind_name(expected) + "' command was used");
  RunOptions opt;
  opt.threads = threads;
  opt.seed = seed;
  const ResultTable table = run_experiment(spec, opt);
  fs::create_directories(out_dir);
  const fs::path path = fs::path(out_dir) / (kind_name(spec.kind) + ".csv");
  write_table(table, path.string());
  report_failures(table);
  std::cout << path.string() << "\n";
  return table.failed_cells.empty() ? 0 : kExitCellFailure;
}

AllocationPolicy parse_policy(const std::string& text) {
  const std::string v = config_detail::lower(text);
  if (v == "efron") return policy::EfronBiasedCoin{};
  if (v == "continuous") return policy::TwoTreatmentContinuous{};
  if (v == "complete") return policy::CompleteRandomization{};
  throw ValidationError("--policy: expected efron, continuous or complete, got '" + text + "'");
}

int analyze(const std::string& data_path, const std::string& tests_arg, const std::string& out,
            const std::string& policy, double alpha, std::size_t block, std::size_t B,
            std::uint64_t seed) {
  const TrialDataset data = read_dataset_csv_file(data_path);
  const config_detail::Entry e{tests_arg, 0};
  std::vector<TestKind> tests;
  for (const auto& name : config_detail::split_list("--tests", e)) {
    auto t = parse_test_name(name);
    if (!t) throw ValidationError("--tests: unknown test '" + name + "'");
    tests.push_back(*t);
  }
  if (tests.empty()) throw ValidationError("--tests: no tests given");
  AnalysisOptions opt;
  opt.alpha = alpha;
  opt.block_length = block;
  opt.bootstrap_size = B;
  if (!policy.empty()) opt.policy = parse_policy(policy);
  for (TestKind t : tests) {
    if (test_needs_phi(t) && !data.phi)
      throw ValidationError("--tests: " + test_name(t) + " needs phi columns in the data");
    if (t == TestKind::Boot && !opt.policy)
      throw ValidationError("--tests: T_boot needs --policy");
  }
  const FitResult fit = lse_fit(data);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + out);
  f << "test,statistic,p_value,reject\n";
  for (std::size_t i = 0; i < tests.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const TestResult r = run_test(tests[i], data, fit, opt, rng);
    f << test_name(tests[i]) << ',' << format_fixed(r.statistic, 6) << ','
      << format_fixed(r.p_value, 6) << ',' << (r.reject ? 1 : 0) << '\n';
  }
  if (!f) throw std::runtime_error("write failed for " + out);
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"carlab: covariate-adaptive randomization experiments"};
  app.require_subcommand(1);

  std::string config, out_dir, data, tests, out, policy;
  std::optional<std::uint64_t> seed;
  std::uint64_t analyze_seed = 1;
  std::size_t threads = 0, block = 0, B = 500;
  double alpha = 0.05;

  auto* imb = app.add_subcommand("imbalance", "run an imbalance experiment");
  auto* pow = app.add_subcommand("power", "run a type I error / power experiment");
  for (auto* sub : {imb, pow}) {
    sub->add_option("--config", config, "experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--threads", threads, "worker threads (default: CARLAB_THREADS or all cores)");
  }

  auto* ana = app.add_subcommand("analyze", "run tests on one observed dataset");
  ana->add_option("--data", data, "CSV with columns y, t, x1..xp, phi1..phiq")->required()->check(CLI::ExistingFile);
  ana->add_option("--tests", tests, "comma-separated tests, e.g. T_ls,T_reg")->required();
  ana->add_option("--out", out, "output CSV")->required();
  ana->add_option("--policy", policy, "policy re-run by T_boot: efron, continuous, complete");
  ana->add_option("--alpha", alpha, "significance level")->check(CLI::Range(0.0, 1.0));
  ana->add_option("--block-length", block, "block length (default floor(sqrt(n)))");
  ana->add_option("--bootstrap-size", B, "bootstrap resamples");
  ana->add_option("--seed", analyze_seed, "seed for the resampling tests");

  auto* val = app.add_subcommand("validate-config", "check a config file");
  val->add_option("config", config, "config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*imb) return run(config, out_dir, seed, threads, ExperimentKind::Imbalance);
    if (*pow) return run(config, out_dir, seed, threads, ExperimentKind::Power);
    if (*ana) return analyze(data, tests, out, policy, alpha, block, B, analyze_seed);
    if (*val) {
      const ExperimentSpec spec = load_config_file(config);
      std::cout << config << ": ok (" << kind_name(spec.kind) << ", " << spec.procedures.size()
                << " procedures)\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "carlab: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "carlab: " << e.what() << "\n";
    return kExitCellFailure;
  }
  return 0;
}
