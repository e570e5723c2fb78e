#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carlab/allocation.hpp"
#include "carlab/datagen.hpp"
#include "carlab/errors.hpp"
#include "carlab/features.hpp"
#include "carlab/inference.hpp"

namespace carlab {

enum class ExperimentKind { Imbalance, Power };

enum class TestKind { Ls, Reg, Boot, Mb, Mbj, Mbb, Logi, Oracle };

inline std::string test_name(TestKind k) {
  switch (k) {
  case TestKind::Ls: return "T_ls";
  case TestKind::Reg: return "T_reg";
  case TestKind::Boot: return "T_boot";
  case TestKind::Mb: return "T_mb";
  case TestKind::Mbj: return "T_mbj";
  case TestKind::Mbb: return "T_mbb";
  case TestKind::Logi: return "T_logi";
  case TestKind::Oracle: return "T_oracle";
  }
  return "?";
}

// Tests whose statistic needs the balancing features at analysis time.
inline bool test_needs_phi(TestKind k) { return k == TestKind::Reg || k == TestKind::Boot; }

inline std::optional<TestKind> parse_test_name(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s.rfind("t_", 0) == 0) s = s.substr(2);
  static const std::map<std::string, TestKind> names{
      {"ls", TestKind::Ls},   {"reg", TestKind::Reg},     {"boot", TestKind::Boot},
      {"mb", TestKind::Mb},   {"mbj", TestKind::Mbj},     {"mbb", TestKind::Mbb},
      {"logi", TestKind::Logi}, {"oracle", TestKind::Oracle}};
  auto it = names.find(s);
  if (it == names.end()) return std::nullopt;
  return it->second;
}

// A randomization procedure. CR carries no feature map.
struct Procedure {
  std::string name;
  AllocationPolicy policy;
  std::optional<FeatureMapSpec> features;
};

// Working-model covariates as 0-based indices into the covariate vector.
struct WorkingModel {
  std::string name;
  std::vector<std::size_t> columns;
};

enum class BlockRule { Sqrt, Cbrt, Fixed };

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::Imbalance;
  std::size_t n = 0;
  std::size_t treatments = 2;
  std::size_t replicates = 0;
  std::uint64_t seed = 20240101;
  CovariateSetting setting;
  std::vector<double> thresholds{0.0, 2.0};
  std::vector<Procedure> procedures;
  // Defaults shared by the builtin procedures.
  double rho = 0.9;
  double D = 3.0;
  std::vector<double> kappa{0.8, 0.1, 0.1};
  double K0 = 3.0;

  ResponseModel response = ResponseModel::linear();
  std::vector<double> deltas{0.0};
  std::vector<WorkingModel> working_models;
  std::vector<TestKind> tests;
  BlockRule block_rule = BlockRule::Sqrt;
  std::size_t block_fixed = 0;
  std::size_t bootstrap_size = 500;
  double alpha = 0.05;
  bool phi_observable = true;
  // 0-based covariates tracked by the imbalance metrics.
  std::vector<std::size_t> imbalance_columns;

  std::size_t block_length() const {
    switch (block_rule) {
    case BlockRule::Sqrt: return default_block_length(n);
    case BlockRule::Cbrt: return cube_root_block_length(n);
    case BlockRule::Fixed: return block_fixed;
    }
    return 0;
  }
};

inline std::string kind_name(ExperimentKind k) {
  return k == ExperimentKind::Imbalance ? "imbalance" : "power";
}

namespace config_detail {

struct Entry {
  std::string value;
  std::size_t line = 0;  // 0 for the JSON form
};

struct Section {
  std::string name;
  std::size_t line = 0;
  std::map<std::string, Entry> entries;
};

struct RawConfig {
  std::map<std::string, Entry> top;
  std::vector<Section> procedures;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline std::string where(const std::string& key, const Entry& e) {
  std::string w = "config: ";
  if (e.line) w += "line " + std::to_string(e.line) + ": ";
  return w + "key '" + key + "': ";
}

[[noreturn]] inline void fail(const std::string& key, const Entry& e, const std::string& msg) {
  throw ValidationError(where(key, e) + msg);
}

inline std::vector<std::string> split_list(const std::string& key, const Entry& e) {
  std::string v = trim(e.value);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') fail(key, e, "unterminated list");
    v = v.substr(1, v.size() - 2);
  }
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) fail(key, e, "empty list element");
    out.push_back(item);
  }
  if (!v.empty() && v.back() == ',') fail(key, e, "empty list element");
  return out;
}

inline double to_double(const std::string& key, const Entry& e, const std::string& text) {
  double v = 0.0;
  const char* b = text.data();
  const char* end = b + text.size();
  if (b != end && *b == '+') ++b;
  auto [p, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v))
    fail(key, e, "expected a finite number, got '" + text + "'");
  return v;
}

inline std::uint64_t to_uint(const std::string& key, const Entry& e, const std::string& text) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size())
    fail(key, e, "expected a non-negative integer, got '" + text + "'");
  return v;
}

inline bool to_bool(const std::string& key, const Entry& e) {
  const std::string v = lower(trim(e.value));
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  fail(key, e, "expected true or false, got '" + e.value + "'");
}

inline std::vector<double> to_doubles(const std::string& key, const Entry& e) {
  std::vector<double> out;
  for (const auto& s : split_list(key, e)) out.push_back(to_double(key, e, s));
  return out;
}

// "x2" or "2" -> 1 (0-based).
inline std::size_t to_covariate(const std::string& key, const Entry& e, std::string s) {
  s = lower(s);
  if (!s.empty() && s.front() == 'x') s = s.substr(1);
  const auto v = to_uint(key, e, s);
  if (v < 1) fail(key, e, "covariates are numbered from 1");
  return static_cast<std::size_t>(v - 1);
}

inline std::vector<std::size_t> to_covariates(const std::string& key, const Entry& e) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(key, e)) out.push_back(to_covariate(key, e, s));
  return out;
}

inline RawConfig parse_lines(const std::string& text) {
  RawConfig raw;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  Section* section = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (line.front() == '[' && eq == std::string::npos) {
      if (line.back() != ']')
        throw ValidationError("config: line " + std::to_string(lineno) + ": malformed section header");
      const std::string head = trim(line.substr(1, line.size() - 2));
      if (lower(head) == "experiment") {
        section = nullptr;
        continue;
      }
      if (lower(head).rfind("procedure ", 0) != 0)
        throw ValidationError("config: line " + std::to_string(lineno) + ": unknown section '" +
                              head + "'");
      const std::string name = trim(head.substr(10));
      if (name.empty())
        throw ValidationError("config: line " + std::to_string(lineno) + ": procedure section needs a name");
      for (const auto& s : raw.procedures)
        if (s.name == name)
          throw ValidationError("config: line " + std::to_string(lineno) + ": procedure '" + name +
                                "' defined twice");
      raw.procedures.push_back({name, lineno, {}});
      section = &raw.procedures.back();
      continue;
    }
    if (eq == std::string::npos)
      throw ValidationError("config: line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ValidationError("config: line " + std::to_string(lineno) + ": missing key");
    auto& target = section ? section->entries : raw.top;
    if (target.count(key))
      throw ValidationError("config: line " + std::to_string(lineno) + ": key '" + key +
                            "' given twice");
    target[key] = {value, lineno};
  }
  return raw;
}

inline std::string json_scalar(const std::string& key, const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) {
    std::ostringstream os;
    os.precision(17);
    os << v.get<double>();
    return os.str();
  }
  throw ValidationError("config: key '" + key + "': unsupported JSON value");
}

inline std::string json_value(const std::string& key, const nlohmann::json& v) {
  if (!v.is_array()) return json_scalar(key, v);
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i].is_array() || v[i].is_object())
      throw ValidationError("config: key '" + key + "': nested lists are not allowed");
    if (i) out += ", ";
    out += json_scalar(key, v[i]);
  }
  return "[" + out + "]";
}

// JSON form: the same keys at the top level; lists become arrays; a
// "[procedure NAME]" section becomes an object under the key "procedure NAME".
inline RawConfig parse_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("config: JSON form must be an object");
  RawConfig raw;
  for (const auto& [key, v] : doc.items()) {
    if (v.is_object()) {
      if (lower(key).rfind("procedure ", 0) != 0)
        throw ValidationError("config: key '" + key + "': only procedure sections may be objects");
      Section s{trim(key.substr(10)), 0, {}};
      for (const auto& [k2, v2] : v.items()) s.entries[k2] = {json_value(k2, v2), 0};
      raw.procedures.push_back(std::move(s));
    } else {
      raw.top[key] = {json_value(key, v), 0};
    }
  }
  return raw;
}

inline CovariateSetting::Kind parse_setting(const std::string& key, const Entry& e) {
  using K = CovariateSetting::Kind;
  static const std::map<std::string, K> names{
      {"s1", K::S1}, {"s2", K::S2}, {"s3", K::S3}, {"s4", K::S4}, {"s5", K::S5}, {"s6", K::S6},
      {"normal", K::Normal}, {"normal_interaction", K::NormalInteraction}};
  auto it = names.find(lower(trim(e.value)));
  if (it == names.end())
    fail(key, e, "unknown setting '" + e.value + "' (S1..S6, normal, normal_interaction)");
  return it->second;
}

inline ResponseModel parse_response(const std::string& key, const Entry& e) {
  const std::string v = lower(trim(e.value));
  if (v == "setting1" || v == "linear") return ResponseModel::linear();
  if (v == "setting2" || v == "heteroscedastic") return ResponseModel::heteroscedastic();
  if (v == "logistic") return ResponseModel::logistic();
  fail(key, e, "unknown response '" + e.value + "' (setting1, setting2, logistic)");
}

// Discrete coordinates used by SR, PS and HH: the given covariates,
// discretized, except a binary X1 which enters with its raw levels.
inline std::vector<DiscreteCoord> discrete_coords(const ExperimentSpec& spec,
                                                  const std::vector<std::size_t>& cols) {
  std::vector<DiscreteCoord> coords;
  for (std::size_t j : cols) {
    if (j == 0 && spec.setting.has_binary_x1()) coords.push_back(DiscreteCoord::raw(0, {0.0, 1.0}));
    else coords.push_back(DiscreteCoord::binned(j, spec.thresholds));
  }
  return coords;
}

inline std::vector<std::size_t> observed_columns(const ExperimentSpec& spec) {
  std::vector<std::size_t> cols;
  const auto mask = spec.setting.observed_mask();
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) cols.push_back(j);
  return cols;
}

// Discrete-procedure / default-CAR policy: Efron for two arms, Pocock-Simon otherwise.
inline AllocationPolicy discrete_policy(const ExperimentSpec& spec) {
  if (spec.treatments == 2) return policy::EfronBiasedCoin{spec.rho};
  return policy::PocockSimonRank{spec.kappa};
}

inline AllocationPolicy continuous_policy(const ExperimentSpec& spec) {
  if (spec.treatments == 2) return policy::TwoTreatmentContinuous{spec.D};
  return policy::MultiContinuous{spec.K0};
}

inline std::optional<Procedure> builtin_procedure(const ExperimentSpec& spec, const std::string& name) {
  const auto obs = observed_columns(spec);
  if (name == "CR") return Procedure{name, policy::CompleteRandomization{}, std::nullopt};
  if (name == "SR")
    return Procedure{name, discrete_policy(spec), feature::Stratified{discrete_coords(spec, obs)}};
  if (name == "PS")
    return Procedure{name, discrete_policy(spec),
                     feature::Marginal{discrete_coords(spec, obs), std::vector<double>(obs.size(), 1.0)}};
  if (name == "HH")
    return Procedure{name, discrete_policy(spec),
                     feature::HuHu{discrete_coords(spec, obs), 1.0, std::vector<double>(obs.size(), 1.0), 1.0}};
  if (name == "phi-CAR-BC") return Procedure{name, discrete_policy(spec), linear_features(obs, true)};
  if (name == "phi-CAR-Con") return Procedure{name, continuous_policy(spec), linear_features(obs, true)};
  if (name == "phi-CAR-Ma") return Procedure{name, discrete_policy(spec), linear_features(obs, false)};
  return std::nullopt;
}

inline feature::Term parse_term(const std::string& key, const Entry& e, const std::string& raw) {
  const std::string t = lower(raw);
  try {
    if (auto p = t.find("=="); p != std::string::npos)
      return feature::Indicator{to_covariate(key, e, trim(t.substr(0, p))), to_double(key, e, trim(t.substr(p + 2))), 1.0};
    if (auto p = t.find('*'); p != std::string::npos)
      return feature::Product{to_covariate(key, e, trim(t.substr(0, p))), to_covariate(key, e, trim(t.substr(p + 1))), 1.0};
    if (auto p = t.find('^'); p != std::string::npos) {
      const auto deg = to_uint(key, e, trim(t.substr(p + 1)));
      if (deg < 1) fail(key, e, "power degree must be >= 1");
      return feature::Power{to_covariate(key, e, trim(t.substr(0, p))), static_cast<int>(deg), 1.0};
    }
    if (!t.empty() && t.front() == 'x') return feature::Identity{to_covariate(key, e, t), 1.0};
    return feature::Constant{to_double(key, e, t), 1.0};
  } catch (const ValidationError&) {
    fail(key, e, "cannot parse feature term '" + raw + "'");
  }
}

inline Procedure parse_procedure_section(const ExperimentSpec& spec, const Section& s) {
  static const std::set<std::string> allowed{"policy", "rho", "D", "kappa", "K0", "features",
                                             "columns", "weights", "w0", "ws", "terms"};
  for (const auto& [k, e] : s.entries)
    if (!allowed.count(k)) fail("procedure " + s.name + "." + k, e, "unknown key");
  auto get = [&](const std::string& k) -> const Entry* {
    auto it = s.entries.find(k);
    return it == s.entries.end() ? nullptr : &it->second;
  };
  auto qual = [&](const std::string& k) { return "procedure " + s.name + "." + k; };
  const Entry header{"", s.line};

  const Entry* pe = get("policy");
  if (!pe) fail(qual("policy"), header, "missing");
  const std::string pname = lower(trim(pe->value));
  AllocationPolicy pol;
  if (pname == "complete") pol = policy::CompleteRandomization{};
  else if (pname == "efron")
    pol = policy::EfronBiasedCoin{get("rho") ? to_double(qual("rho"), *get("rho"), trim(get("rho")->value)) : spec.rho};
  else if (pname == "continuous")
    pol = policy::TwoTreatmentContinuous{get("D") ? to_double(qual("D"), *get("D"), trim(get("D")->value)) : spec.D};
  else if (pname == "pocock_simon")
    pol = policy::PocockSimonRank{get("kappa") ? to_doubles(qual("kappa"), *get("kappa")) : spec.kappa};
  else if (pname == "multi_continuous")
    pol = policy::MultiContinuous{get("K0") ? to_double(qual("K0"), *get("K0"), trim(get("K0")->value)) : spec.K0};
  else
    fail(qual("policy"), *pe,
         "unknown policy '" + pe->value + "' (complete, efron, continuous, pocock_simon, multi_continuous)");
  try {
    validate(pol, spec.treatments);
  } catch (const ValidationError& err) {
    fail(qual("policy"), *pe, err.what());
  }

  Procedure proc{s.name, pol, std::nullopt};
  const Entry* fe = get("features");
  if (pname == "complete") {
    if (fe) fail(qual("features"), *fe, "complete randomization takes no feature map");
    return proc;
  }
  if (!fe) fail(qual("features"), header, "missing");
  const std::vector<std::size_t> cols =
      get("columns") ? to_covariates(qual("columns"), *get("columns")) : observed_columns(spec);
  const std::string fname = lower(trim(fe->value));
  auto weights = [&](std::size_t count) {
    if (!get("weights")) return std::vector<double>(count, 1.0);
    return to_doubles(qual("weights"), *get("weights"));
  };
  auto scalar = [&](const std::string& k, double dflt) {
    return get(k) ? to_double(qual(k), *get(k), trim(get(k)->value)) : dflt;
  };
  if (fname == "linear") proc.features = linear_features(cols, true);
  else if (fname == "linear_no_intercept") proc.features = linear_features(cols, false);
  else if (fname == "stratified") proc.features = feature::Stratified{discrete_coords(spec, cols)};
  else if (fname == "marginal") proc.features = feature::Marginal{discrete_coords(spec, cols), weights(cols.size())};
  else if (fname == "huhu")
    proc.features = feature::HuHu{discrete_coords(spec, cols), scalar("w0", 1.0), weights(cols.size()), scalar("ws", 1.0)};
  else if (fname == "composite") {
    const Entry* te = get("terms");
    if (!te) fail(qual("terms"), header, "required for a composite feature map");
    feature::Composite c;
    for (const auto& t : split_list(qual("terms"), *te)) c.terms.push_back(parse_term(qual("terms"), *te, t));
    proc.features = c;
  } else {
    fail(qual("features"), *fe,
         "unknown feature map '" + fe->value + "' (linear, linear_no_intercept, stratified, marginal, huhu, composite)");
  }
  try {
    validate(*proc.features, spec.setting.dimension());
  } catch (const ValidationError& err) {
    fail(qual("features"), *fe, err.what());
  }
  const auto mask = spec.setting.observed_mask();
  for (std::size_t j : cols)
    if (j >= mask.size() || !mask[j])
      fail(qual("columns"), get("columns") ? *get("columns") : *fe,
           "covariate X" + std::to_string(j + 1) + " is not observed at randomization");
  return proc;
}

} // namespace config_detail

// Parses and validates an experiment description. Text starting with '{' is
// read as the JSON form.
inline ExperimentSpec load_config(const std::string& text) {
  using namespace config_detail;
  const std::string head = trim(text);
  RawConfig raw = !head.empty() && head.front() == '{' ? parse_json(head) : parse_lines(text);

  static const std::set<std::string> allowed{
      "kind", "n", "treatments", "replicates", "seed", "setting", "means", "sds", "procedures",
      "rho", "D", "kappa", "K0", "response", "mu0", "beta", "sigma_eps", "gamma1", "gamma2",
      "deltas", "working_models", "tests", "block_length", "bootstrap_size", "alpha",
      "phi_observable", "imbalance_columns", "thresholds"};
  for (const auto& [k, e] : raw.top)
    if (!allowed.count(k) && k.rfind("working_model.", 0) != 0) fail(k, e, "unknown key");

  auto get = [&](const std::string& k) -> const Entry* {
    auto it = raw.top.find(k);
    return it == raw.top.end() ? nullptr : &it->second;
  };
  auto require = [&](const std::string& k) -> const Entry& {
    const Entry* e = get(k);
    if (!e) throw ValidationError("config: key '" + k + "': missing");
    return *e;
  };
  auto num = [&](const std::string& k) { return to_double(k, *get(k), trim(get(k)->value)); };
  auto uint = [&](const std::string& k) { return to_uint(k, *get(k), trim(get(k)->value)); };

  ExperimentSpec spec;
  {
    const Entry& e = require("kind");
    const std::string v = lower(trim(e.value));
    if (v == "imbalance") spec.kind = ExperimentKind::Imbalance;
    else if (v == "power") spec.kind = ExperimentKind::Power;
    else fail("kind", e, "must be imbalance or power, got '" + e.value + "'");
  }
  require("n");
  spec.n = uint("n");
  if (spec.n < 10) fail("n", *get("n"), "must be >= 10");
  require("replicates");
  spec.replicates = uint("replicates");
  if (spec.replicates < 1) fail("replicates", *get("replicates"), "must be >= 1");
  if (get("seed")) spec.seed = uint("seed");
  if (get("treatments")) {
    spec.treatments = uint("treatments");
    if (spec.treatments < 2) fail("treatments", *get("treatments"), "must be >= 2");
  }

  spec.setting.kind = parse_setting("setting", require("setting"));
  {
    using K = CovariateSetting::Kind;
    const bool generic = spec.setting.kind == K::Normal || spec.setting.kind == K::NormalInteraction;
    if (generic) {
      const std::size_t dflt = spec.setting.kind == K::Normal ? 3 : 2;
      spec.setting.means = get("means") ? to_doubles("means", *get("means")) : std::vector<double>(dflt, 0.0);
      spec.setting.sds = get("sds") ? to_doubles("sds", *get("sds")) : std::vector<double>(spec.setting.means.size(), 1.0);
      try {
        spec.setting.validate();
      } catch (const ValidationError& err) {
        fail(get("means") ? "means" : "setting", get("means") ? *get("means") : *get("setting"), err.what());
      }
    } else {
      for (const char* k : {"means", "sds"})
        if (get(k)) fail(k, *get(k), "only allowed with the normal and normal_interaction settings");
    }
  }
  const std::size_t p = spec.setting.dimension();

  if (get("thresholds")) {
    spec.thresholds = to_doubles("thresholds", *get("thresholds"));
    if (spec.thresholds.empty()) fail("thresholds", *get("thresholds"), "must not be empty");
    for (std::size_t i = 1; i < spec.thresholds.size(); ++i)
      if (!(spec.thresholds[i] > spec.thresholds[i - 1]))
        fail("thresholds", *get("thresholds"), "must be strictly increasing");
  }
  if (get("rho")) spec.rho = num("rho");
  if (get("D")) spec.D = num("D");
  if (get("K0")) spec.K0 = num("K0");
  if (get("kappa")) spec.kappa = to_doubles("kappa", *get("kappa"));
  try {
    validate(AllocationPolicy{policy::EfronBiasedCoin{spec.rho}});
  } catch (const ValidationError& err) {
    fail("rho", *get("rho"), err.what());
  }
  try {
    validate(AllocationPolicy{policy::TwoTreatmentContinuous{spec.D}});
  } catch (const ValidationError& err) {
    fail("D", *get("D"), err.what());
  }
  try {
    validate(AllocationPolicy{policy::MultiContinuous{spec.K0}});
  } catch (const ValidationError& err) {
    fail("K0", *get("K0"), err.what());
  }
  if (spec.treatments > 2) {
    if (!get("kappa") && spec.treatments != 3)
      throw ValidationError("config: key 'kappa': required when treatments > 3");
    try {
      validate(AllocationPolicy{policy::PocockSimonRank{spec.kappa}}, spec.treatments);
    } catch (const ValidationError& err) {
      fail("kappa", get("kappa") ? *get("kappa") : *get("treatments"), err.what());
    }
  } else if (get("kappa")) {
    try {
      validate(AllocationPolicy{policy::PocockSimonRank{spec.kappa}});
    } catch (const ValidationError& err) {
      fail("kappa", *get("kappa"), err.what());
    }
  }

  // Procedures: builtin names or [procedure NAME] sections.
  {
    const Entry& e = require("procedures");
    const auto names = split_list("procedures", e);
    if (names.empty()) fail("procedures", e, "at least one procedure is required");
    std::set<std::string> seen;
    for (const auto& name : names) {
      if (!seen.insert(name).second) fail("procedures", e, "procedure '" + name + "' listed twice");
      auto sec = std::find_if(raw.procedures.begin(), raw.procedures.end(),
                              [&](const Section& s) { return s.name == name; });
      if (sec != raw.procedures.end()) {
        spec.procedures.push_back(parse_procedure_section(spec, *sec));
      } else if (auto b = builtin_procedure(spec, name)) {
        spec.procedures.push_back(std::move(*b));
      } else {
        fail("procedures", e,
             "unknown procedure '" + name + "' (builtins: CR, SR, PS, HH, phi-CAR-BC, phi-CAR-Con, phi-CAR-Ma)");
      }
    }
    for (const auto& s : raw.procedures)
      if (!seen.count(s.name))
        throw ValidationError("config: procedure '" + s.name + "' is defined but not listed in 'procedures'");
  }

  if (get("imbalance_columns")) {
    spec.imbalance_columns = to_covariates("imbalance_columns", *get("imbalance_columns"));
    for (std::size_t j : spec.imbalance_columns)
      if (j >= p)
        fail("imbalance_columns", *get("imbalance_columns"),
             "covariate X" + std::to_string(j + 1) + " does not exist (setting has " + std::to_string(p) + ")");
  } else {
    for (std::size_t j = 0; j < p; ++j) spec.imbalance_columns.push_back(j);
  }

  static const std::set<std::string> power_only{
      "response", "mu0", "beta", "sigma_eps", "gamma1", "gamma2", "deltas", "working_models",
      "tests", "block_length", "bootstrap_size", "alpha", "phi_observable"};
  if (spec.kind == ExperimentKind::Imbalance) {
    for (const auto& [k, e] : raw.top)
      if (power_only.count(k) || k.rfind("working_model.", 0) == 0)
        fail(k, e, "only allowed when kind = power");
    return spec;
  }

  if (spec.treatments != 2) fail("treatments", *get("treatments"), "power experiments need exactly 2 treatments");
  if (get("imbalance_columns")) fail("imbalance_columns", *get("imbalance_columns"), "only allowed when kind = imbalance");

  if (get("response")) spec.response = parse_response("response", *get("response"));
  if (get("mu0")) spec.response.mu0 = num("mu0");
  if (get("beta")) spec.response.beta = to_doubles("beta", *get("beta"));
  if (get("sigma_eps")) spec.response.sigma_eps = num("sigma_eps");
  if (get("gamma1")) spec.response.gamma1 = num("gamma1");
  if (get("gamma2")) spec.response.gamma2 = num("gamma2");
  if (spec.response.kind == ResponseModel::Kind::Logistic && get("sigma_eps"))
    fail("sigma_eps", *get("sigma_eps"), "not used by the logistic response");
  if (spec.response.kind != ResponseModel::Kind::Heteroscedastic)
    for (const char* k : {"gamma1", "gamma2"})
      if (get(k)) fail(k, *get(k), "only used by the setting2 response");
  try {
    spec.response.validate(p);
  } catch (const ValidationError& err) {
    const char* k = get("beta") ? "beta" : get("response") ? "response" : "setting";
    fail(k, *get(k), err.what());
  }

  if (get("deltas")) {
    spec.deltas = to_doubles("deltas", *get("deltas"));
    if (spec.deltas.empty()) fail("deltas", *get("deltas"), "must not be empty");
  }
  if (get("alpha")) {
    spec.alpha = num("alpha");
    if (!(spec.alpha > 0.0 && spec.alpha < 1.0)) fail("alpha", *get("alpha"), "must be in (0, 1)");
  }
  if (get("phi_observable")) spec.phi_observable = to_bool("phi_observable", *get("phi_observable"));
  if (get("bootstrap_size")) {
    spec.bootstrap_size = uint("bootstrap_size");
    if (spec.bootstrap_size < 2) fail("bootstrap_size", *get("bootstrap_size"), "must be >= 2");
  }
  if (get("block_length")) {
    const Entry& e = *get("block_length");
    const std::string v = lower(trim(e.value));
    if (v == "sqrt") spec.block_rule = BlockRule::Sqrt;
    else if (v == "cbrt") spec.block_rule = BlockRule::Cbrt;
    else {
      spec.block_rule = BlockRule::Fixed;
      spec.block_fixed = to_uint("block_length", e, v);
      if (spec.block_fixed < 1 || spec.block_fixed >= spec.n)
        fail("block_length", e, "must be sqrt, cbrt or an integer in [1, n)");
    }
  }

  {
    const Entry& e = require("tests");
    std::set<TestKind> seen;
    for (const auto& name : split_list("tests", e)) {
      auto t = parse_test_name(name);
      if (!t) fail("tests", e, "unknown test '" + name + "' (T_ls, T_reg, T_boot, T_mb, T_mbj, T_mbb, T_logi, T_oracle)");
      if (!seen.insert(*t).second) fail("tests", e, "test '" + name + "' listed twice");
      if (test_needs_phi(*t) && !spec.phi_observable)
        fail("tests", e, test_name(*t) + " needs the balancing features, but phi_observable = false");
      if ((*t == TestKind::Logi || *t == TestKind::Oracle) &&
          spec.response.kind != ResponseModel::Kind::Logistic)
        fail("tests", e, test_name(*t) + " needs a binary (logistic) response");
      spec.tests.push_back(*t);
    }
    if (spec.tests.empty()) fail("tests", e, "at least one test is required");
  }

  // Working models: W1 = none, W2 = X1, W3 = every observed covariate,
  // or explicit working_model.NAME = x1, x2 definitions.
  {
    const auto obs = observed_columns(spec);
    std::map<std::string, std::pair<std::vector<std::size_t>, const Entry*>> defs;
    defs["W1"] = {{}, nullptr};
    defs["W2"] = {{0}, nullptr};
    defs["W3"] = {obs, nullptr};
    for (const auto& [k, e] : raw.top) {
      if (k.rfind("working_model.", 0) != 0) continue;
      const std::string name = k.substr(14);
      if (name.empty()) fail(k, e, "working model needs a name");
      defs[name] = {to_covariates(k, e), &e};
    }
    const Entry dflt{"W1, W2, W3", 0};
    const Entry& e = get("working_models") ? *get("working_models") : dflt;
    std::set<std::string> seen;
    for (const auto& name : split_list("working_models", e)) {
      auto it = defs.find(name);
      if (it == defs.end()) fail("working_models", e, "working model '" + name + "' is not defined");
      if (!seen.insert(name).second) fail("working_models", e, "working model '" + name + "' listed twice");
      const auto mask = spec.setting.observed_mask();
      const std::string src = it->second.second ? "working_model." + name : "working_models";
      const Entry& where_e = it->second.second ? *it->second.second : e;
      std::set<std::size_t> uniq;
      for (std::size_t j : it->second.first) {
        if (j >= p) fail(src, where_e, "covariate X" + std::to_string(j + 1) + " does not exist");
        if (!mask[j]) fail(src, where_e, "covariate X" + std::to_string(j + 1) + " is not observed");
        if (!uniq.insert(j).second) fail(src, where_e, "covariate X" + std::to_string(j + 1) + " repeated");
      }
      if (it->second.first.size() + 2 + 1 > spec.n)
        fail(src, where_e, "too many covariates for n = " + std::to_string(spec.n));
      spec.working_models.push_back({name, it->second.first});
    }
    if (spec.working_models.empty()) fail("working_models", e, "at least one working model is required");
    for (const auto& [k, entry] : raw.top)
      if (k.rfind("working_model.", 0) == 0 && !seen.count(k.substr(14)))
        fail(k, entry, "defined but not listed in 'working_models'");
  }

  for (const auto& wm : spec.working_models) {
    const std::size_t need = wm.columns.size() + 2 + spec.block_length();
    if ((std::find(spec.tests.begin(), spec.tests.end(), TestKind::Mb) != spec.tests.end()) && need >= spec.n + 1)
      throw ValidationError("config: key 'block_length': too large for working model " + wm.name);
  }
  return spec;
}

inline ExperimentSpec load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("config: cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return load_config(ss.str());
}

} // namespace carlab
