#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "crab/backend.hpp"
#include "crab/control.hpp"
#include "crab/errors.hpp"
#include "crab/lattice.hpp"
#include "crab/observables.hpp"
#include "crab/pulse.hpp"

namespace crab {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "crab 1.0.0";

// ---------------------------------------------------------------------------
// Configuration.
//
// A run config is a JSON object; every key has a default (see
// default_config()) and unknown keys are rejected. Times are in hbar/U,
// energies in U, control values in J/U.

inline json default_config() {
  return json::parse(R"({
    "experiment": "optimize",
    "output_dir": "runs/default",
    "model": {
      "n_sites": 8,
      "trap_curvature": 0.0,
      "interaction": 1.0,
      "n_max": 4,
      "filling": 1.0
    },
    "control": {
      "guess": "exponential",
      "start_ratio": 0.52,
      "end_ratio": 0.0024,
      "t_total": 50.0,
      "n_modes": 4,
      "sin_coeffs": null,
      "cos_coeffs": null,
      "freq_jitter": null,
      "table": null,
      "pulse_from": null
    },
    "backend": {
      "kind": "exact",
      "dt": 0.01,
      "m_max": 64,
      "svd_cutoff": 1e-12,
      "abort_discarded": 0.01,
      "max_states": 4000000
    },
    "optimizer": {
      "budget": 2000,
      "rho_halt": 0.001,
      "restarts": 0,
      "seed": 1,
      "optimize_frequencies": false,
      "simplex_step": 0.1,
      "spread_tolerance": 1e-10,
      "objective": "residual_energy_per_site",
      "workers": 1,
      "time_limit": null
    },
    "observables": {
      "defect_reference": "filling"
    },
    "robustness": {
      "delta_n": [-2, -1, 0, 1, 2]
    },
    "baselines": {
      "random_amplitude": 0.2,
      "transfer_n_sites": null,
      "transfer_budget": 200
    },
    "convergence": {
      "mode": "axes",
      "m_values": [16, 32, 64, 100],
      "dt_values": [0.01, 0.003, 0.001],
      "n_max_values": [3, 4, 5]
    }
  })");
}

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"optimize", "evaluate-pulse", "robustness-sweep",
                                              "baseline-guesses", "convergence-study"};
  return names;
}

// Overlay `user` on `base`, refusing keys that `base` does not define.
inline void merge_config(json& base, const json& user, const std::string& path = "") {
  if (!user.is_object()) throw ConfigError("config" + path + " must be a JSON object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) merge_config(slot, it.value(), key);
    else slot = it.value();
  }
}

// `--set a.b.c=value`; the value is parsed as JSON when possible, otherwise
// taken as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &cfg;
  std::stringstream ss(key);
  std::string part, walked;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    walked += (walked.empty() ? "" : ".") + parts[i];
    if (!node->is_object() || !node->contains(parts[i]))
      throw ConfigError("unknown config key '" + walked + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw ConfigError("cannot override section '" + key + "'");
  *node = std::move(value);
}

struct ControlConfig {
  GuessKind guess = GuessKind::exponential;
  double start_ratio = 0.52;
  double end_ratio = 2.4e-3;
  double t_total = 50.0;
  int n_modes = 4;
  std::optional<std::vector<double>> sin_coeffs, cos_coeffs, freq_jitter;
  std::vector<std::pair<double, double>> table;
  std::optional<std::string> pulse_from;
};

struct RunConfig {
  std::string experiment = "optimize";
  std::string output_dir;
  LatticeParams model;
  ControlConfig control;
  BackendSettings backend;
  OptimizerSettings optimizer;
  MeritKind objective = MeritKind::residual_energy_per_site;
  std::uint64_t seed = 1;
  std::optional<double> time_limit;
  DefectReference defect_reference = DefectReference::filling;
  std::vector<int> delta_n;
  double random_amplitude = 0.2;
  std::optional<int> transfer_n_sites;
  int transfer_budget = 200;
  std::string convergence_mode = "axes";
  std::vector<int> m_values;
  std::vector<double> dt_values;
  std::vector<int> n_max_values;
  json snapshot;  // fully resolved config, the source of the hash
};

namespace detail {

template <class T>
T take(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field ") + section + "." + key + " has the wrong type");
  }
}

template <class T>
std::optional<T> take_optional(const json& j, const char* section, const char* key) {
  if (j.at(section).at(key).is_null()) return std::nullopt;
  return take<T>(j, section, key);
}

inline double take_threshold(const json& j) {
  const json& v = j.at("optimizer").at("rho_halt");
  if (v.is_null()) return std::numeric_limits<double>::infinity();
  if (v.is_string() && (v == "inf" || v == "infinity"))
    return std::numeric_limits<double>::infinity();
  if (!v.is_number()) throw ConfigError("optimizer.rho_halt must be a number, null or \"inf\"");
  return v.get<double>();
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace detail

inline RunConfig parse_config(const json& resolved) {
  using detail::require;
  using detail::take;
  using detail::take_optional;
  RunConfig c;
  c.snapshot = resolved;
  try {
    c.experiment = resolved.at("experiment").get<std::string>();
    c.output_dir = resolved.at("output_dir").get<std::string>();
  } catch (const json::exception&) {
    throw ConfigError("experiment and output_dir must be strings");
  }
  require(std::find(experiment_names().begin(), experiment_names().end(), c.experiment) !=
              experiment_names().end(),
          "unknown experiment '" + c.experiment + "'");

  c.model.n_sites = take<int>(resolved, "model", "n_sites");
  const json& trap = resolved.at("model").at("trap_curvature");
  if (trap.is_string() && trap == "default") c.model.trap_curvature = default_trap_curvature(c.model.n_sites);
  else c.model.trap_curvature = take<double>(resolved, "model", "trap_curvature");
  c.model.interaction = take<double>(resolved, "model", "interaction");
  c.model.n_max = take<int>(resolved, "model", "n_max");
  c.model.filling = take<double>(resolved, "model", "filling");
  require(c.model.interaction == 1.0, "model.interaction is the energy unit and must be 1");
  try {
    c.model.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }

  ControlConfig& k = c.control;
  try {
    k.guess = guess_kind_from_string(take<std::string>(resolved, "control", "guess"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("control.guess: ") + e.what());
  }
  k.start_ratio = take<double>(resolved, "control", "start_ratio");
  k.end_ratio = take<double>(resolved, "control", "end_ratio");
  k.t_total = take<double>(resolved, "control", "t_total");
  k.n_modes = take<int>(resolved, "control", "n_modes");
  k.sin_coeffs = take_optional<std::vector<double>>(resolved, "control", "sin_coeffs");
  k.cos_coeffs = take_optional<std::vector<double>>(resolved, "control", "cos_coeffs");
  k.freq_jitter = take_optional<std::vector<double>>(resolved, "control", "freq_jitter");
  k.pulse_from = take_optional<std::string>(resolved, "control", "pulse_from");
  if (auto t = take_optional<std::vector<std::vector<double>>>(resolved, "control", "table")) {
    for (const auto& row : *t) {
      require(row.size() == 2, "control.table rows must be [time, ratio] pairs");
      k.table.emplace_back(row[0], row[1]);
    }
  }
  require(k.start_ratio > 0.0 && k.end_ratio > 0.0, "control boundary ratios must be positive");
  require(k.t_total > 0.0, "control.t_total must be positive");
  require(k.n_modes >= 0, "control.n_modes must be nonnegative");
  for (const auto* v : {&k.sin_coeffs, &k.cos_coeffs, &k.freq_jitter})
    if (*v)
      require(static_cast<int>((*v)->size()) == k.n_modes,
              "control coefficient vectors must have n_modes entries");
  if (k.freq_jitter)
    for (double r : *k.freq_jitter) require(r >= 0.0 && r <= 1.0, "control.freq_jitter entries must lie in [0, 1]");
  if (k.guess == GuessKind::custom_table) require(k.table.size() >= 2, "custom-table guess needs control.table");

  c.backend.kind = [&] {
    try {
      return backend_kind_from_string(take<std::string>(resolved, "backend", "kind"));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("backend.kind: ") + e.what());
    }
  }();
  c.backend.dt = take<double>(resolved, "backend", "dt");
  c.backend.m_max = take<int>(resolved, "backend", "m_max");
  c.backend.svd_cutoff = take<double>(resolved, "backend", "svd_cutoff");
  c.backend.abort_discarded = take<double>(resolved, "backend", "abort_discarded");
  c.backend.max_states = take<std::size_t>(resolved, "backend", "max_states");
  require(c.backend.dt > 0.0, "backend.dt must be positive");
  require(c.backend.m_max >= 1, "backend.m_max must be >= 1");
  require(c.backend.svd_cutoff >= 0.0, "backend.svd_cutoff must be nonnegative");
  require(c.backend.abort_discarded > 0.0, "backend.abort_discarded must be positive");
  {
    const double steps = k.t_total / c.backend.dt;
    require(std::abs(steps - std::round(steps)) <= 1e-6,
            "control.t_total must be an integer multiple of backend.dt");
  }

  OptimizerSettings& o = c.optimizer;
  o.budget = take<int>(resolved, "optimizer", "budget");
  o.rho_halt = detail::take_threshold(resolved);
  o.restarts = take<int>(resolved, "optimizer", "restarts");
  o.optimize_frequencies = take<bool>(resolved, "optimizer", "optimize_frequencies");
  o.simplex_step = take<double>(resolved, "optimizer", "simplex_step");
  o.spread_tolerance = take<double>(resolved, "optimizer", "spread_tolerance");
  o.workers = take<int>(resolved, "optimizer", "workers");
  c.seed = take<std::uint64_t>(resolved, "optimizer", "seed");
  c.time_limit = take_optional<double>(resolved, "optimizer", "time_limit");
  try {
    c.objective = merit_kind_from_string(take<std::string>(resolved, "optimizer", "objective"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("optimizer.objective: ") + e.what());
  }
  require(o.rho_halt > 0.0, "optimizer.rho_halt must be positive");
  require(o.restarts >= 0, "optimizer.restarts must be nonnegative");
  require(o.simplex_step > 0.0, "optimizer.simplex_step must be positive");
  require(o.workers >= 1, "optimizer.workers must be >= 1");
  if (c.time_limit) require(*c.time_limit > 0.0, "optimizer.time_limit must be positive");
  if (c.experiment == "optimize") {
    require(k.n_modes >= 1, "optimize needs control.n_modes >= 1");
    const int dim = (o.optimize_frequencies ? 3 : 2) * k.n_modes;
    require(o.budget >= dim + 1, "optimizer.budget must be at least dimension + 1 = " +
                                     std::to_string(dim + 1));
  }

  const std::string ref = take<std::string>(resolved, "observables", "defect_reference");
  require(ref == "filling" || ref == "final_ground_state",
          "observables.defect_reference must be filling or final_ground_state");
  c.defect_reference = ref == "filling" ? DefectReference::filling : DefectReference::final_ground_state;

  c.delta_n = take<std::vector<int>>(resolved, "robustness", "delta_n");
  if (c.experiment == "robustness-sweep")
    for (int d : c.delta_n)
      require(c.model.n_sites + d >= 2, "robustness.delta_n gives a lattice with fewer than 2 sites");
  c.random_amplitude = take<double>(resolved, "baselines", "random_amplitude");
  c.transfer_n_sites = take_optional<int>(resolved, "baselines", "transfer_n_sites");
  c.transfer_budget = take<int>(resolved, "baselines", "transfer_budget");
  if (c.transfer_n_sites) require(*c.transfer_n_sites >= 2, "baselines.transfer_n_sites must be >= 2");
  c.convergence_mode = take<std::string>(resolved, "convergence", "mode");
  require(c.convergence_mode == "axes" || c.convergence_mode == "grid",
          "convergence.mode must be axes or grid");
  c.m_values = take<std::vector<int>>(resolved, "convergence", "m_values");
  c.dt_values = take<std::vector<double>>(resolved, "convergence", "dt_values");
  c.n_max_values = take<std::vector<int>>(resolved, "convergence", "n_max_values");
  for (double dt : c.dt_values) require(dt > 0.0 && dt <= k.t_total, "convergence.dt_values must lie in (0, t_total]");
  return c;
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// Defaults, then the file, then key=value overrides.
inline RunConfig load_config(const std::optional<fs::path>& file,
                             const std::vector<std::string>& overrides = {}) {
  json cfg = default_config();
  if (file) merge_config(cfg, read_json_file(*file));
  for (const auto& o : overrides) apply_override(cfg, o);
  return parse_config(cfg);
}

// FNV-1a over the canonical serialization (keys sorted). The output
// directory is where results land, not what they are, so it is left out.
inline std::string config_hash(const json& snapshot) {
  json content = snapshot;
  if (content.is_object()) content.erase("output_dir");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : content.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Text tables.

inline std::string fmt(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (std::isnan(x)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline double parse_number(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

class TableWriter {
 public:
  TableWriter(const fs::path& path, const std::string& hash, const std::vector<std::string>& columns)
      : out_(path) {
    if (!out_) throw Error("cannot write '" + path.string() + "'");
    out_ << "# config_hash: " << hash << '\n' << '#';
    for (const auto& c : columns) out_ << ' ' << c;
    out_ << '\n';
  }

  TableWriter& cell(const std::string& s) {
    if (!first_) out_ << '\t';
    out_ << s;
    first_ = false;
    return *this;
  }
  TableWriter& cell(double x) { return cell(fmt(x)); }
  TableWriter& cell(int x) { return cell(std::to_string(x)); }
  void end_row() {
    out_ << '\n';
    first_ = true;
  }

 private:
  std::ofstream out_;
  bool first_ = true;
};

struct Table {
  std::string hash;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    throw Error("table has no column '" + name + "'");
  }
};

inline Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  Table t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# config_hash: ", 0) == 0) {
      t.hash = line.substr(15);
    } else if (line.rfind("#", 0) == 0) {
      std::stringstream ss(line.substr(1));
      std::string c;
      t.columns.clear();
      while (ss >> c) t.columns.push_back(c);
    } else if (!line.empty()) {
      std::vector<std::string> row;
      std::stringstream ss(line);
      std::string c;
      while (std::getline(ss, c, '\t')) row.push_back(c);
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

// Throws when a data file was produced under a different configuration.
inline void verify_hash(const fs::path& path, const std::string& expected) {
  const Table t = read_table(path);
  if (t.hash != expected)
    throw ConfigError("config hash mismatch in '" + path.string() + "': file has " + t.hash +
                      ", expected " + expected);
}

// ---------------------------------------------------------------------------
// Run records.

inline json pulse_to_json(const PulseSpec& s) {
  json g = {{"kind", to_string(s.guess.kind())},
            {"start", s.guess.start()},
            {"end", s.guess.end()},
            {"t_total", s.guess.t_total()}};
  if (s.guess.kind() == GuessKind::custom_table) {
    json rows = json::array();
    for (const auto& [t, c] : s.guess.table()) rows.push_back({t, c});
    g["table"] = rows;
  }
  return {{"guess", g},
          {"t_total", s.t_total},
          {"n_modes", s.n_modes},
          {"sin_coeffs", s.sin_coeffs},
          {"cos_coeffs", s.cos_coeffs},
          {"freq_jitter", s.freq_jitter},
          {"frequencies", s.frequencies()},
          {"rng_seed", s.rng_seed}};
}

inline PulseSpec pulse_from_json(const json& j) {
  const json& g = j.at("guess");
  const GuessKind kind = guess_kind_from_string(g.at("kind").get<std::string>());
  PulseSpec s;
  if (kind == GuessKind::custom_table) {
    std::vector<std::pair<double, double>> table;
    for (const auto& row : g.at("table")) table.emplace_back(row.at(0).get<double>(), row.at(1).get<double>());
    s.guess = GuessPulse::from_table(std::move(table));
  } else {
    s.guess = GuessPulse(kind, g.at("start").get<double>(), g.at("end").get<double>(),
                         g.at("t_total").get<double>());
  }
  s.t_total = j.at("t_total").get<double>();
  s.n_modes = j.at("n_modes").get<int>();
  s.sin_coeffs = j.at("sin_coeffs").get<std::vector<double>>();
  s.cos_coeffs = j.at("cos_coeffs").get<std::vector<double>>();
  s.freq_jitter = j.at("freq_jitter").get<std::vector<double>>();
  s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  s.validate_shape();
  return s;
}

inline json profile_to_json(const SiteProfile& p) {
  return {{"occupations", p.occupations}, {"fluctuations", p.fluctuations}, {"filling", p.filling}};
}

inline SiteProfile profile_from_json(const json& j) {
  SiteProfile p;
  p.occupations = j.at("occupations").get<std::vector<double>>();
  p.fluctuations = j.at("fluctuations").get<std::vector<double>>();
  p.filling = j.at("filling").get<double>();
  p.n_sites = static_cast<int>(p.occupations.size());
  return p;
}

inline json merit_to_json(const FigureOfMerit& f) {
  return {{"kind", to_string(f.kind)},
          {"value", f.value},
          {"defect_density", f.defect_density},
          {"residual_energy_per_site", f.residual_energy},
          {"final_energy", f.final_energy},
          {"clamped", f.clamped},
          {"timed_out", f.timed_out},
          {"discarded_weight", f.discarded_weight}};
}

struct RunRecord {
  json config_snapshot;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  std::string experiment;
  std::vector<TraceRow> trace;
  std::optional<PulseSpec> best_pulse;
  std::optional<FigureOfMerit> best_merit;
  std::optional<SiteProfile> final_profile;
  std::string stop_reason;
  json extra = json::object();  // experiment-specific summary
};

// Exit status of the command-line tool.
inline int exit_status(const RunRecord& r) {
  if (r.stop_reason == to_string(StopReason::halted)) return 2;
  if (r.stop_reason == to_string(StopReason::budget)) return 3;
  return 0;
}

inline json number_or_string(double x) {
  if (std::isfinite(x)) return x;
  return fmt(x);
}

inline void write_record_json(const RunRecord& r, const fs::path& dir) {
  json j = {{"version", r.version},
            {"experiment", r.experiment},
            {"config_hash", r.config_hash},
            {"seed", r.seed},
            {"config", r.config_snapshot},
            {"evaluations", r.trace.size()},
            {"stop_reason", r.stop_reason},
            {"summary", r.extra}};
  if (r.best_pulse) j["best_pulse"] = pulse_to_json(*r.best_pulse);
  if (r.best_merit) {
    json m = merit_to_json(*r.best_merit);
    for (const char* key : {"value", "defect_density", "residual_energy_per_site", "final_energy"})
      m[key] = number_or_string(m[key].get<double>());
    j["best_merit"] = m;
  }
  if (r.final_profile) j["final_profile"] = profile_to_json(*r.final_profile);
  std::ofstream out(dir / "run.json");
  if (!out) throw Error("cannot write run.json in '" + dir.string() + "'");
  out << j.dump(2) << '\n';
}

inline void write_trace(const RunRecord& r, const fs::path& dir, int n_params) {
  std::vector<std::string> cols{"index", "restart", "value", "best_value",
                                "rho", "dE_per_site", "clamped", "timed_out"};
  for (int i = 0; i < n_params; ++i) cols.push_back("x" + std::to_string(i));
  TableWriter t(dir / "trace.tsv", r.config_hash, cols);
  for (const auto& row : r.trace) {
    t.cell(row.index).cell(row.restart).cell(row.value).cell(row.best_value);
    t.cell(row.defect_density).cell(row.residual_energy);
    t.cell(row.clamped ? 1 : 0).cell(row.timed_out ? 1 : 0);
    for (double x : row.parameters) t.cell(x);
    t.end_row();
  }
  TableWriter w(dir / "timing.tsv", r.config_hash, {"index", "wall_seconds"});
  for (const auto& row : r.trace) {
    w.cell(row.index).cell(row.wall_seconds);
    w.end_row();
  }
}

inline void write_pulse_table(const fs::path& path, const std::string& hash,
                              const SampledPulse& p, const TimeGrid& grid) {
  TableWriter t(path, hash, {"t", "J_over_U", "V_over_Er"});
  for (int k = 0; k <= grid.n_steps; ++k) {
    t.cell(grid.node(k)).cell(p.nodes[k]).cell(ratio_to_depth_quiet(p.nodes[k]));
    t.end_row();
  }
}

inline void write_profile_table(const fs::path& path, const std::string& hash, const SiteProfile& p) {
  TableWriter t(path, hash, {"site", "n", "dn2"});
  for (int i = 0; i < p.n_sites; ++i) {
    t.cell(i + 1).cell(p.occupations[i]).cell(p.fluctuations[i]);
    t.end_row();
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

inline void write_plot_stubs(const fs::path& dir, const std::string& experiment) {
  if (experiment == "optimize" || experiment == "evaluate-pulse") {
    write_text(dir / "pulse.gp",
               "# gnuplot pulse.gp\n"
               "set terminal pngcairo size 900,650\n"
               "set output 'pulse.png'\n"
               "set multiplot layout 2,1\n"
               "set xlabel 't [hbar/U]'\n"
               "set ylabel 'V/E_r'\n"
               "plot 'best_pulse.tsv' using 1:3 with lines title 'optimized'\n"
               "set ylabel 'J/U'\n"
               "set logscale y\n"
               "plot 'best_pulse.tsv' using 1:2 with lines title 'J/U'\n"
               "unset logscale y\n"
               "set xlabel 'site'\n"
               "set ylabel '<n_i>'\n"
               "unset multiplot\n"
               "set output 'profile.png'\n"
               "plot 'profile.tsv' using 1:2 with linespoints title '<n_i>', \\\n"
               "     'profile.tsv' using 1:3 with linespoints title '<dn_i^2>'\n");
  }
  if (experiment == "optimize") {
    write_text(dir / "defects.gp",
               "# gnuplot defects.gp\n"
               "set terminal pngcairo size 900,500\n"
               "set output 'defects.png'\n"
               "set logscale y\n"
               "set xlabel 'evaluation'\n"
               "set ylabel 'rho'\n"
               "plot 'trace.tsv' using 1:5 with points pt 7 ps 0.4 title 'rho', \\\n"
               "     'trace.tsv' using 1:4 with lines title 'best dE/N'\n");
  }
  if (experiment == "robustness-sweep") {
    write_text(dir / "robustness.gp",
               "# gnuplot robustness.gp\n"
               "set terminal pngcairo size 700,500\n"
               "set output 'robustness.png'\n"
               "set logscale y\n"
               "set xlabel 'Delta N'\n"
               "set ylabel 'rho'\n"
               "plot 'robustness.tsv' using 1:3 with linespoints pt 7 title 'rho'\n");
  }
  if (experiment == "baseline-guesses") {
    write_text(dir / "baselines.gp",
               "# gnuplot baselines.gp\n"
               "set terminal pngcairo size 700,500\n"
               "set output 'baselines.png'\n"
               "set style data histograms\n"
               "set logscale y\n"
               "set ylabel 'rho'\n"
               "plot 'baselines.tsv' using 2:xtic(1) title 'rho'\n");
  }
}

// ---------------------------------------------------------------------------
// Experiments.

inline int worker_count(const RunConfig& c) {
  if (const char* env = std::getenv("CRAB_WORKERS")) {
    const int w = std::atoi(env);
    if (w >= 1) return w;
    warn("ignoring CRAB_WORKERS='" + std::string(env) + "'");
  }
  return c.optimizer.workers;
}

inline GuessPulse make_guess(const ControlConfig& k) {
  if (k.guess == GuessKind::custom_table) {
    GuessPulse g = GuessPulse::from_table(k.table);
    if (std::abs(g.t_total() - k.t_total) > 1e-12 * k.t_total)
      throw ConfigError("control.table must end at control.t_total");
    return g;
  }
  return GuessPulse(k.guess, k.start_ratio, k.end_ratio, k.t_total);
}

// Pulse under test: loaded from a previous run, or assembled from the
// control section (missing coefficients are zero, missing jitter is drawn
// from the seed).
inline PulseSpec make_pulse(const RunConfig& c) {
  if (c.control.pulse_from) {
    fs::path p = *c.control.pulse_from;
    if (fs::is_directory(p)) p /= "run.json";
    const json rec = read_json_file(p);
    if (!rec.contains("best_pulse")) throw ConfigError("'" + p.string() + "' holds no best_pulse");
    return pulse_from_json(rec.at("best_pulse"));
  }
  const int m = c.control.n_modes;
  PulseSpec s = PulseSpec::uncorrected(make_guess(c.control), m, c.seed);
  if (c.control.sin_coeffs) s.sin_coeffs = *c.control.sin_coeffs;
  if (c.control.cos_coeffs) s.cos_coeffs = *c.control.cos_coeffs;
  if (c.control.freq_jitter) s.freq_jitter = *c.control.freq_jitter;
  s.validate_shape();
  return s;
}

inline Objective make_objective(const RunConfig& c, const LatticeParams& model,
                                const BackendSettings& backend, const GuessPulse& guess) {
  return Objective(make_backend(model, backend), guess, c.objective, c.defect_reference,
                   c.time_limit);
}

inline LatticeParams resized(const LatticeParams& p, int n_sites) {
  LatticeParams q = p;
  q.n_sites = n_sites;
  q.validate();
  return q;
}

class Harness {
 public:
  explicit Harness(RunConfig config) : c_(std::move(config)), hash_(config_hash(c_.snapshot)) {}

  const RunConfig& config() const { return c_; }
  const std::string& hash() const { return hash_; }

  RunRecord run() {
    dir_ = c_.output_dir;
    fs::create_directories(dir_);
    {
      std::ofstream cfg(dir_ / "config.json");
      cfg << c_.snapshot.dump(2) << '\n';
    }
    RunRecord r;
    r.config_snapshot = c_.snapshot;
    r.config_hash = hash_;
    r.seed = c_.seed;
    r.experiment = c_.experiment;
    r.stop_reason = "completed";
    if (c_.experiment == "optimize") run_optimize(r);
    else if (c_.experiment == "evaluate-pulse") run_evaluate(r);
    else if (c_.experiment == "robustness-sweep") run_robustness(r);
    else if (c_.experiment == "baseline-guesses") run_baselines(r);
    else run_convergence(r);
    write_record_json(r, dir_);
    write_plot_stubs(dir_, c_.experiment);
    return r;
  }

 private:
  void record_pulse(RunRecord& r, const PulseSpec& spec, const FigureOfMerit& f, double dt) {
    r.best_pulse = spec;
    r.best_merit = f;
    r.final_profile = f.profile;
    const TimeGrid grid = TimeGrid::with_step(spec.t_total, dt);
    write_pulse_table(dir_ / "best_pulse.tsv", hash_, render_pulse(spec, grid), grid);
    write_profile_table(dir_ / "profile.tsv", hash_, f.profile);
  }

  void run_optimize(RunRecord& r) {
    const PulseSpec initial = make_pulse(c_);
    const Objective obj = make_objective(c_, c_.model, c_.backend, initial.guess);
    OptimizerSettings s = c_.optimizer;
    s.workers = worker_count(c_);
    s.on_row = [](const TraceRow& row) {
      if ((row.index + 1) % 100 == 0)
        std::cerr << "evaluation " << row.index + 1 << ": best " << fmt(row.best_value) << ", rho "
                  << fmt(row.defect_density) << '\n';
    };
    OptimizeResult res = optimize(initial, obj, s);
    r.trace = std::move(res.trace);
    r.stop_reason = to_string(res.reason);
    r.extra = {{"restarts_used", res.restarts_used},
               {"initial_defect_density", r.trace.empty() ? json() : number_or_string(r.trace.front().defect_density)},
               {"target_energy", obj.target_energy()},
               {"halted_at_index", res.reason == StopReason::halted ? json(r.trace.back().index) : json()}};
    record_pulse(r, res.best, res.best_merit, c_.backend.dt);
    write_trace(r, dir_, static_cast<int>(pack_parameters(initial, s.optimize_frequencies).size()));
  }

  void run_evaluate(RunRecord& r) {
    const PulseSpec spec = make_pulse(c_);
    const Objective obj = make_objective(c_, c_.model, c_.backend, spec.guess);
    const FigureOfMerit f = obj.evaluate(spec);
    r.extra = {{"target_energy", obj.target_energy()},
               {"target_defect_density", defect_density(obj.target_profile())}};
    record_pulse(r, spec, f, c_.backend.dt);
  }

  void run_robustness(RunRecord& r) {
    const PulseSpec spec = make_pulse(c_);
    const int n0 = c_.model.n_sites;
    TableWriter t(dir_ / "robustness.tsv", hash_,
                  {"delta_n", "n_sites", "rho", "dE_per_site", "extrapolated", "status"});
    json rows = json::array();
    for (int d : c_.delta_n) {
      const int n = n0 + d;
      const bool extrapolated = std::abs(d) > 0.2 * n0 + 1e-12;
      if (extrapolated) warn("robustness row delta_n = " + std::to_string(d) + " is an extrapolation");
      double rho = std::numeric_limits<double>::quiet_NaN(), de = rho;
      std::string status = "ok";
      try {
        const Objective obj = make_objective(c_, resized(c_.model, n), c_.backend, spec.guess);
        const FigureOfMerit f = obj.evaluate(spec);
        rho = f.defect_density;
        de = f.residual_energy;
        if (f.timed_out) status = "timed-out";
      } catch (const CapacityError& e) {
        status = "capacity-error";
      } catch (const DomainError& e) {
        status = "domain-error";
      }
      t.cell(d).cell(n).cell(rho).cell(de).cell(extrapolated ? 1 : 0).cell(status);
      t.end_row();
      rows.push_back({{"delta_n", d}, {"n_sites", n}, {"rho", number_or_string(rho)},
                      {"dE_per_site", number_or_string(de)}, {"status", status}});
    }
    r.best_pulse = spec;
    r.extra = {{"rows", rows}};
  }

  void run_baselines(RunRecord& r) {
    const int m = std::max(1, c_.control.n_modes);
    ControlConfig k = c_.control;
    std::vector<std::pair<std::string, PulseSpec>> pulses;
    k.guess = GuessKind::exponential;
    pulses.emplace_back("exponential", PulseSpec::uncorrected(make_guess(k), m, c_.seed));
    k.guess = GuessKind::linear;
    pulses.emplace_back("linear", PulseSpec::uncorrected(make_guess(k), m, c_.seed));
    {
      PulseSpec s = pulses.front().second;
      const auto a = uniform_vector(2 * m, derive_seed(c_.seed, 0x7261), -c_.random_amplitude,
                                    c_.random_amplitude);
      std::copy(a.begin(), a.begin() + m, s.sin_coeffs.begin());
      std::copy(a.begin() + m, a.end(), s.cos_coeffs.begin());
      pulses.emplace_back("random-correction", s);
    }
    const int n_small = c_.transfer_n_sites.value_or(std::max(2, c_.model.n_sites - 4));
    if (c_.control.pulse_from) {
      pulses.emplace_back("transferred", make_pulse(c_));
    } else {
      const Objective small = make_objective(c_, resized(c_.model, n_small), c_.backend,
                                             pulses.front().second.guess);
      OptimizerSettings s = c_.optimizer;
      s.workers = worker_count(c_);
      s.budget = std::max(c_.transfer_budget, 2 * m + 1);
      pulses.emplace_back("transferred", optimize(pulses.front().second, small, s).best);
    }

    const Objective obj = make_objective(c_, c_.model, c_.backend, pulses.front().second.guess);
    const Objective obj_linear = make_objective(c_, c_.model, c_.backend, pulses[1].second.guess);
    TableWriter t(dir_ / "baselines.tsv", hash_, {"guess", "rho", "dE_per_site", "clamped"});
    json rows = json::array();
    for (const auto& [name, spec] : pulses) {
      const FigureOfMerit f = (name == "linear" ? obj_linear : obj).evaluate(spec);
      t.cell(name).cell(f.defect_density).cell(f.residual_energy).cell(f.clamped ? 1 : 0);
      t.end_row();
      rows.push_back({{"guess", name}, {"rho", number_or_string(f.defect_density)},
                      {"dE_per_site", number_or_string(f.residual_energy)}});
    }
    r.extra = {{"rows", rows}, {"transfer_n_sites", n_small}};
  }

  // Requested steps that do not divide T are rounded to the nearest whole
  // number of steps; the table records the step actually used.
  static double whole_step(double t_total, double dt) {
    return t_total / std::max(1.0, std::round(t_total / dt));
  }

  void run_convergence(RunRecord& r) {
    if (c_.backend.kind != BackendKind::mps)
      throw ConfigError("convergence-study needs backend.kind = mps");
    const PulseSpec spec = make_pulse(c_);
    struct Cell {
      int m;
      double dt;
      int n_max;
    };
    std::vector<Cell> cells;
    const Cell ref{c_.backend.m_max, c_.backend.dt, c_.model.n_max};
    auto add = [&](Cell x) {
      for (const auto& y : cells)
        if (y.m == x.m && y.dt == x.dt && y.n_max == x.n_max) return;
      cells.push_back(x);
    };
    if (c_.convergence_mode == "grid") {
      for (int m : c_.m_values)
        for (double dt : c_.dt_values)
          for (int nm : c_.n_max_values) add({m, whole_step(spec.t_total, dt), nm});
    } else {
      for (int m : c_.m_values) add({m, ref.dt, ref.n_max});
      for (double dt : c_.dt_values) add({ref.m, whole_step(spec.t_total, dt), ref.n_max});
      for (int nm : c_.n_max_values) add({ref.m, ref.dt, nm});
    }
    TableWriter t(dir_ / "convergence.tsv", hash_,
                  {"m_max", "dt", "n_max", "rho", "dE_per_site", "discarded_weight", "status"});
    json rows = json::array();
    for (const Cell& x : cells) {
      BackendSettings b = c_.backend;
      b.m_max = x.m;
      b.dt = x.dt;
      LatticeParams p = c_.model;
      p.n_max = x.n_max;
      double rho = std::numeric_limits<double>::quiet_NaN(), de = rho, disc = rho;
      std::string status = "ok";
      try {
        const Objective obj = make_objective(c_, p, b, spec.guess);
        const FigureOfMerit f = obj.evaluate(spec);
        rho = f.defect_density;
        de = f.residual_energy;
        disc = f.discarded_weight;
      } catch (const TruncationOverflowError&) {
        status = "truncation-overflow";
      } catch (const DomainError&) {
        status = "domain-error";
      }
      t.cell(x.m).cell(x.dt).cell(x.n_max).cell(rho).cell(de).cell(disc).cell(status);
      t.end_row();
      rows.push_back({{"m_max", x.m}, {"dt", x.dt}, {"n_max", x.n_max},
                      {"rho", number_or_string(rho)}, {"dE_per_site", number_or_string(de)},
                      {"status", status}});
    }
    r.best_pulse = spec;
    r.extra = {{"rows", rows}};
  }

  RunConfig c_;
  std::string hash_;
  fs::path dir_;
};

// Reads run.json back; trace rows come from trace.tsv when present.
inline RunRecord load_record(const fs::path& dir) {
  const json j = read_json_file(dir / "run.json");
  RunRecord r;
  r.version = j.at("version").get<std::string>();
  r.experiment = j.at("experiment").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_snapshot = j.at("config");
  r.stop_reason = j.at("stop_reason").get<std::string>();
  r.extra = j.at("summary");
  if (config_hash(r.config_snapshot) != r.config_hash)
    throw ConfigError("run.json config does not match its recorded hash");
  if (j.contains("best_pulse")) r.best_pulse = pulse_from_json(j.at("best_pulse"));
  if (j.contains("final_profile")) r.final_profile = profile_from_json(j.at("final_profile"));
  if (fs::exists(dir / "trace.tsv")) {
    const Table t = read_table(dir / "trace.tsv");
    if (t.hash != r.config_hash) throw ConfigError("trace.tsv config hash differs from run.json");
    for (const auto& row : t.rows) {
      TraceRow tr;
      tr.index = std::stoi(row.at(0));
      tr.restart = std::stoi(row.at(1));
      tr.value = parse_number(row.at(2));
      tr.best_value = parse_number(row.at(3));
      tr.defect_density = parse_number(row.at(4));
      tr.residual_energy = parse_number(row.at(5));
      tr.clamped = row.at(6) == "1";
      tr.timed_out = row.at(7) == "1";
      for (std::size_t i = 8; i < row.size(); ++i) tr.parameters.push_back(parse_number(row[i]));
      r.trace.push_back(std::move(tr));
    }
  }
  return r;
}

}  // namespace crab
