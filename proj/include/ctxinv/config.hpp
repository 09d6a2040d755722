#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxinv/dynamics.hpp"
#include "ctxinv/errors.hpp"
#include "ctxinv/lab.hpp"

namespace ctxinv {

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"prop1", "prop2", "prop3", "theorem1", "filter", "augment", "qk-only"};
  return names;
}

struct ExperimentConfig {
  std::string experiment = "prop1";
  LabConfig lab;
  Trainable trainable{true, false};
  std::optional<double> eta;  // nullopt: auto
  int steps = 50;
  double keep_fraction = 0.5;
  bool plots = true;
  std::vector<std::pair<std::string, std::vector<std::string>>> sweep;  // in declaration order

  std::uint64_t seed() const { return lab.seed; }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

inline int parse_count(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < 0 || x > 1'000'000) throw ConfigError("key '" + key + "': out of range");
  return static_cast<int>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline Trainable parse_trainable(const std::string& key, const std::string& v) {
  Trainable t{false, false};
  std::string spelled = v;  // "KQ+V" is accepted so the set can appear in a sweep list
  std::replace(spelled.begin(), spelled.end(), '+', ',');
  std::string_view rest = spelled;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string part = trim(rest.substr(0, comma));
    if (part == "KQ") {
      t.kq = true;
    } else if (part == "V") {
      t.v = true;
    } else {
      throw ConfigError("key '" + key + "': expected KQ, V or KQ,V, got '" + v + "'");
    }
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
  }
  if (!t.kq && !t.v) throw ConfigError("key '" + key + "': empty trainable set");
  return t;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<nlohmann::json(const ExperimentConfig&)>;

struct KeySpec {
  Setter set;
  Getter get;
};

// clang-format off
inline const std::vector<std::pair<std::string, KeySpec>>& key_table() {
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<std::pair<std::string, KeySpec>> table{
    {"experiment", {[](C& c, S k, S v) {
        if (std::find(experiment_names().begin(), experiment_names().end(), v) == experiment_names().end())
          throw ConfigError("key '" + k + "': unknown experiment '" + v + "'");
        c.experiment = v; },
      [](const C& c) { return nlohmann::json(c.experiment); }}},
    {"seed", {[](C& c, S k, S v) {
        const long long x = parse_int(k, v);
        if (x < 0) throw ConfigError("key '" + k + "': must be >= 0");
        c.lab.seed = static_cast<std::uint64_t>(x); },
      [](const C& c) { return nlohmann::json(c.lab.seed); }}},
    {"K_S", {[](C& c, S k, S v) { c.lab.params.num_subjects = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.num_subjects); }}},
    {"K_A", {[](C& c, S k, S v) { c.lab.params.num_answers = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.num_answers); }}},
    {"d", {[](C& c, S k, S v) { c.lab.params.dim = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.dim); }}},
    {"delta_C", {[](C& c, S k, S v) { c.lab.params.delta_C = parse_double(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.delta_C); }}},
    {"delta_M", {[](C& c, S k, S v) { c.lab.params.delta_M = parse_double(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.delta_M); }}},
    {"o_c", {[](C& c, S k, S v) { c.lab.params.o_c = parse_double(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.o_c); }}},
    {"o_r", {[](C& c, S k, S v) { c.lab.params.o_r = parse_double(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.o_r); }}},
    {"delta_S", {[](C& c, S k, S v) { c.lab.params.delta_S = parse_double(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.params.delta_S); }}},
    {"n_C", {[](C& c, S k, S v) { c.lab.counts.n_C = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.counts.n_C); }}},
    {"n_CS", {[](C& c, S k, S v) { c.lab.counts.n_CS = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.counts.n_CS); }}},
    {"n_S_seen", {[](C& c, S k, S v) { c.lab.counts.n_S_seen = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.counts.n_S_seen); }}},
    {"n_S_unseen", {[](C& c, S k, S v) { c.lab.counts.n_S_unseen = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.counts.n_S_unseen); }}},
    {"n_test", {[](C& c, S k, S v) { c.lab.n_test = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.n_test); }}},
    {"s_points", {[](C& c, S k, S v) { c.lab.n_spare = parse_count(k, v); },
      [](const C& c) { return nlohmann::json(c.lab.n_spare); }}},
    {"aug_ratio", {[](C& c, S k, S v) {
        const double x = parse_double(k, v);
        if (x < 0.0) throw ConfigError("key '" + k + "': must be >= 0");
        c.lab.aug_ratio = x; },
      [](const C& c) { return nlohmann::json(c.lab.aug_ratio); }}},
    {"keep_fraction", {[](C& c, S k, S v) {
        const double x = parse_double(k, v);
        if (!(x > 0.0 && x <= 1.0)) throw ConfigError("key '" + k + "': must be in (0, 1]");
        c.keep_fraction = x; },
      [](const C& c) { return nlohmann::json(c.keep_fraction); }}},
    {"trainable", {[](C& c, S k, S v) { c.trainable = parse_trainable(k, v); },
      [](const C& c) { return nlohmann::json(to_string(c.trainable)); }}},
    {"eta", {[](C& c, S k, S v) {
        if (v == "auto") { c.eta.reset(); return; }
        const double x = parse_double(k, v);
        if (x < 0.0) throw ConfigError("key '" + k + "': must be >= 0 or auto");
        c.eta = x; },
      [](const C& c) { return c.eta ? nlohmann::json(*c.eta) : nlohmann::json("auto"); }}},
    {"steps", {[](C& c, S k, S v) {
        const int x = parse_count(k, v);
        if (x < 1) throw ConfigError("key '" + k + "': must be >= 1");
        c.steps = x; },
      [](const C& c) { return nlohmann::json(c.steps); }}},
    {"plots", {[](C& c, S k, S v) { c.plots = parse_bool(k, v); },
      [](const C& c) { return nlohmann::json(c.plots); }}},
  };
  return table;
}
// clang-format on

inline const KeySpec* find_key(const std::string& key) {
  for (const auto& [name, spec] : key_table())
    if (name == key) return &spec;
  return nullptr;
}

}  // namespace detail

inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto* spec = detail::find_key(key);
  if (!spec) throw ConfigError("unknown key '" + key + "'");
  spec->set(cfg, key, value);
}

/// Re-checks everything that depends on more than one key.
inline void validate_config(const ExperimentConfig& cfg) {
  cfg.lab.params.validate();
  if (cfg.experiment == "theorem1" && cfg.steps < 2) throw ConfigError("key 'steps': theorem1 needs steps >= 2");
}

/// Flat `key = value` lines; `#` starts a comment. `sweep.<key> = a, b, c`
/// declares a swept parameter.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::map<std::string, int> seen;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": missing key");
    if (seen[key]++) throw ConfigError("key '" + key + "' given twice");

    if (key.rfind("sweep.", 0) == 0) {
      const std::string target = key.substr(6);
      if (!detail::find_key(target)) throw ConfigError("unknown key '" + target + "' in '" + key + "'");
      if (target == "experiment") throw ConfigError("key '" + key + "': the experiment cannot be swept");
      std::vector<std::string> values;
      std::string_view rest = value;
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        const std::string v = detail::trim(rest.substr(0, comma));
        if (!v.empty()) values.push_back(v);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      }
      if (values.empty()) throw ConfigError("key '" + key + "': empty sweep range");
      for (const auto& v : values) {
        ExperimentConfig probe;
        apply_setting(probe, target, v);  // type-check every value now
      }
      cfg.sweep.emplace_back(target, std::move(values));
      continue;
    }
    apply_setting(cfg, key, value);
  }
  cfg.lab.params.n = cfg.lab.counts.n_C + cfg.lab.counts.n_CS;
  return cfg;
}

/// Every key with its resolved value, for provenance in summaries.
inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, spec] : detail::key_table()) out[name] = spec.get(cfg);
  if (!cfg.sweep.empty()) {
    nlohmann::json sweep = nlohmann::json::object();
    for (const auto& [k, vs] : cfg.sweep) sweep[k] = vs;
    out["sweep"] = sweep;
  }
  return out;
}

}  // namespace ctxinv
