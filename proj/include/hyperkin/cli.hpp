#pragma once

// Experiment orchestration behind the `hyperkin` command-line tool: strict
// config resolution, dispatch, CSV emission and run manifests. Kept free of
// the argument parser so the same entry point is testable in-process.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hyperkin/conditions.hpp"
#include "hyperkin/coupling.hpp"
#include "hyperkin/error.hpp"
#include "hyperkin/estimate.hpp"
#include "hyperkin/model.hpp"
#include "hyperkin/operator_lab.hpp"

#ifndef HYPERKIN_VERSION
#define HYPERKIN_VERSION "0.0.0"
#endif

namespace hyperkin::cli {

inline constexpr const char* kVersion = HYPERKIN_VERSION;

// ---------------------------------------------------------------------------
// CSV

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string fmt(bool b) { return b ? "true" : "false"; }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    row.resize(header.size());
    rows.push_back(std::move(row));
  }

  std::string str() const {
    std::string s;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) s += ',';
        s += csv_escape(cells[i]);
      }
      s += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s;
  }
};

/// name, value, stderr, n, seed and then every meta key seen, sorted.
inline Csv reports_csv(const std::vector<EstimateReport>& reports) {
  std::set<std::string> keys;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.meta) keys.insert(k);
  Csv csv;
  csv.header = {"name", "value", "stderr", "n", "seed"};
  csv.header.insert(csv.header.end(), keys.begin(), keys.end());
  for (const auto& r : reports) {
    std::vector<std::string> row{r.name, fmt(r.value), fmt(r.stderr_), std::to_string(r.n), std::to_string(r.seed)};
    for (const auto& k : keys) {
      auto it = r.meta.find(k);
      row.push_back(it == r.meta.end() ? "" : fmt(it->second));
    }
    csv.add(std::move(row));
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Config schema
//
// A config is one JSON object with flat keys. `system` is either
// {"preset": name, "params": {...}} or the explicit system object written by
// to_json. Every other key is a scalar, a flat array or null; null means
// "derive" (zero start, required value, ...). Keys not listed for the
// command are rejected before anything runs.

inline Json default_system() { return {{"preset", "kinetic_fp"}, {"params", {{"d", 1}}}}; }

inline std::vector<double> uniform_grid(double a, double b, double h) {
  std::vector<double> g;
  for (int i = 0; a + i * h <= b + 1e-12; ++i) g.push_back(a + i * h);
  return g;
}

inline Json observable_defaults() {
  return {{"observable", "bounded_tanh"}, {"observable_index", 0},     {"observable_scale", 1.0},
          {"observable_shift", 0.0},      {"observable_normal", nullptr}, {"observable_threshold", 0.0}};
}

/// Defaults per command; the key set is also the schema.
inline Json command_defaults(const std::string& command) {
  Json d;
  if (command == "check-conditions") {
    d = {{"r_points", 2001}, {"sample_pairs", 1000}, {"radius", 2.0}, {"t0", 1.0}};
  } else if (command == "simulate") {
    d = {{"dt", 1e-3}, {"T", 10.0}, {"xi", nullptr}, {"scheme", "auto"}, {"every", 1}};
  } else if (command == "coupling-demo") {
    d = {{"dt", 1e-3}, {"t0", 1.0}, {"xi", nullptr}, {"eta", nullptr}};
  } else if (command == "estimate-stationary") {
    d = {{"dt", 1e-3}, {"T", 200.0}, {"burn_in", 20.0}, {"chains", 256}};
  } else if (command == "exp-moment") {
    d = {{"epsilon", 0.1}, {"dt", 5e-3}, {"T", 10.0}, {"n_paths", 4000}};
  } else if (command == "estimate-decay") {
    d = {{"dt", 1e-2},      {"t_grid", uniform_grid(0.0, 6.0, 0.5)}, {"outer_n", 400}, {"inner_n", 1000},
         {"burn_in", 20.0}, {"thin", 1000},                          {"mode", "variance"}};
    d.update(observable_defaults());
    d["observable"] = "coord_x";
  } else if (command == "harnack-audit") {
    d = {{"dt", 1e-3},       {"t0", 1.0},         {"n_paths", 20000}, {"xi", nullptr},
         {"eta", nullptr},   {"direction", nullptr}, {"gaps", {0.25, 0.5, 1.0, 2.0}}};
    d.update(observable_defaults());
  } else if (command == "operator-lab") {
    d = {{"n", 4}, {"chains", 20}, {"trials", 500}, {"p", 2.0}, {"q", 4.0}, {"n_max", 50}, {"restarts", 64},
         {"operator", nullptr}};
    return d;  // no system
  } else {
    throw InvalidInput("unknown command '" + command + "'");
  }
  d["system"] = default_system();
  return d;
}

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"check-conditions", "simulate",      "coupling-demo",
                                          "estimate-stationary", "estimate-decay", "exp-moment",
                                          "harnack-audit",    "operator-lab",  "list-presets"};
  return c;
}

struct Invocation {
  std::string command;
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  unsigned threads = 1;
  Json overrides = Json::object();  // command-specific flags, e.g. operator-lab --n
};

/// A manifest is accepted wherever a config is: its "config" member is used.
inline Json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open config file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw InvalidInput("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("toolkit_version") && j.contains("config")) return j.at("config");
  return j;
}

/// Defaults overlaid by the config and then by flags; unknown keys rejected.
inline Json resolve_config(const std::string& command, const Json& user, const Invocation& inv) {
  if (!user.is_object()) throw InvalidInput("config must be a JSON object");
  Json r = command_defaults(command);
  r["seed"] = 0;
  for (const auto& [k, v] : user.items()) {
    if (k == "command") {
      if (!v.is_string() || v.get<std::string>() != command)
        throw InvalidInput("config is for command '" + v.dump() + "', not '" + command + "'");
      continue;
    }
    if (!r.contains(k)) throw InvalidInput("unknown config key '" + k + "' for " + command);
    r[k] = v;
  }
  for (const auto& [k, v] : inv.overrides.items()) {
    if (!r.contains(k)) throw InvalidInput("option '" + k + "' does not apply to " + command);
    r[k] = v;
  }
  if (inv.seed) r["seed"] = *inv.seed;
  if (!r["seed"].is_number_unsigned() && !(r["seed"].is_number_integer() && r["seed"].get<std::int64_t>() >= 0))
    throw InvalidInput("seed must be a nonnegative integer");
  r["command"] = command;
  return r;
}

namespace detail {

inline double num(const Json& c, const std::string& k) {
  const Json& v = c.at(k);
  if (!v.is_number()) throw InvalidInput("'" + k + "' must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw InvalidInput("'" + k + "' must be finite");
  return x;
}

inline double positive(const Json& c, const std::string& k) {
  const double x = num(c, k);
  if (!(x > 0.0)) throw InvalidInput("'" + k + "' must be positive");
  return x;
}

inline int integer(const Json& c, const std::string& k, int lo = 1) {
  const Json& v = c.at(k);
  if (!v.is_number_integer()) throw InvalidInput("'" + k + "' must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x < lo || x > 1000000000) throw InvalidInput("'" + k + "' out of range");
  return static_cast<int>(x);
}

inline std::string str(const Json& c, const std::string& k) {
  const Json& v = c.at(k);
  if (!v.is_string()) throw InvalidInput("'" + k + "' must be a string");
  return v.get<std::string>();
}

inline std::vector<double> numbers(const Json& v, const std::string& k) {
  if (!v.is_array()) throw InvalidInput("'" + k + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw InvalidInput("'" + k + "' must be an array of numbers");
    out.push_back(e.get<double>());
    if (!std::isfinite(out.back())) throw InvalidInput("'" + k + "' entries must be finite");
  }
  return out;
}

inline SystemSpec system_of(const Json& c) {
  const Json& s = c.at("system");
  if (!s.is_object()) throw InvalidInput("'system' must be an object");
  if (s.contains("preset")) {
    for (const auto& [k, v] : s.items())
      if (k != "preset" && k != "params") throw InvalidInput("unknown key '" + k + "' in system preset reference");
    return build_preset(str(s, "preset"), s.value("params", Json::object()));
  }
  return system_from_json(s);
}

/// Stacked (x, y) of length m + d; null gives the origin.
inline std::optional<StatePair> state_of(const Json& c, const std::string& k, const SystemSpec& spec,
                                         bool zero_if_null = true) {
  const Json& v = c.at(k);
  if (v.is_null()) {
    if (!zero_if_null) return std::nullopt;
    return StatePair{Vector::Zero(spec.m()), Vector::Zero(spec.d())};
  }
  const auto xs = numbers(v, k);
  if (static_cast<int>(xs.size()) != spec.m() + spec.d())
    throw InvalidInput("'" + k + "' must have m + d = " + std::to_string(spec.m() + spec.d()) + " entries");
  const Vector u = Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  return StatePair::split(u, spec.m());
}

inline Observable observable_of(const Json& c, const SystemSpec& spec) {
  const std::string kind = str(c, "observable");
  Observable f;
  if (kind == "coord_x") f.kind = ObservableKind::coord_x;
  else if (kind == "coord_y") f.kind = ObservableKind::coord_y;
  else if (kind == "quadratic") f.kind = ObservableKind::quadratic;
  else if (kind == "bounded_tanh") f.kind = ObservableKind::bounded_tanh;
  else if (kind == "indicator_halfspace") f.kind = ObservableKind::indicator_halfspace;
  else if (kind == "constant") f.kind = ObservableKind::constant;
  else throw InvalidInput("unknown observable '" + kind + "'");
  f.index = integer(c, "observable_index", 0);
  f.scale = num(c, "observable_scale");
  f.shift = num(c, "observable_shift");
  f.threshold = num(c, "observable_threshold");
  if (!c.at("observable_normal").is_null()) {
    const auto n = numbers(c.at("observable_normal"), "observable_normal");
    f.normal = Eigen::Map<const Vector>(n.data(), static_cast<Eigen::Index>(n.size()));
  }
  f.validate(spec);
  return f;
}

inline std::uint64_t seed_of(const Json& c) { return c.at("seed").get<std::uint64_t>(); }

inline FiniteMarkovOperator operator_of(const Json& j) {
  if (!j.is_object()) throw InvalidInput("'operator' must be an object with P and mu");
  for (const auto& [k, v] : j.items())
    if (k != "P" && k != "mu" && k != "n") throw InvalidInput("unknown key '" + k + "' in operator");
  if (!j.contains("P") || !j.contains("mu")) throw InvalidInput("operator needs 'P' and 'mu'");
  const auto mu = numbers(j.at("mu"), "mu");
  const auto n = static_cast<Eigen::Index>(mu.size());
  if (n < 1) throw InvalidInput("operator mu must be nonempty");
  if (j.contains("n") && j.at("n") != Json(n)) throw InvalidInput("operator n does not match mu");
  std::vector<double> flat;
  const Json& P = j.at("P");
  if (P.is_array() && !P.empty() && P.front().is_array()) {
    for (const auto& row : P) {
      const auto r = numbers(row, "P");
      if (static_cast<Eigen::Index>(r.size()) != n) throw InvalidInput("operator P rows must have length n");
      flat.insert(flat.end(), r.begin(), r.end());
    }
  } else {
    flat = numbers(P, "P");  // row-major
  }
  if (static_cast<Eigen::Index>(flat.size()) != n * n) throw InvalidInput("operator P must be n x n");
  FiniteMarkovOperator op;
  op.mu = Eigen::Map<const Vector>(mu.data(), n);
  op.P = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(flat.data(), n, n);
  const ConditionReport v = validate_operator(op);
  if (!v.holds) {
    std::string msg = "operator is not a valid Markov operator:";
    for (const auto& [k, x] : v.witnesses) msg += " " + k + "=" + fmt(x);
    throw InvalidInput(msg);
  }
  return op;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each parses and validates its whole config before computing,
// then returns the CSV; audited inequalities that fail are reported through
// `failure` after the CSV is complete.

struct CommandResult {
  Csv csv;
  std::optional<std::string> failure;
};

inline CommandResult cmd_check_conditions(const Json& c, unsigned) {
  const SystemSpec spec = detail::system_of(c);
  const int r_points = detail::integer(c, "r_points", 3);
  const int pairs = detail::integer(c, "sample_pairs");
  const double radius = detail::positive(c, "radius");
  const double t0 = detail::positive(c, "t0");
  const auto reports = conditions_for(spec, detail::seed_of(c), r_points, pairs, radius, t0);
  CommandResult res;
  res.csv.header = {"condition_id", "holds", "witness", "value", "notes"};
  for (const auto& r : reports) {
    if (r.witnesses.empty()) res.csv.add({r.condition_id, fmt(r.holds), "", "", r.notes});
    for (const auto& [k, v] : r.witnesses) res.csv.add({r.condition_id, fmt(r.holds), k, fmt(v), r.notes});
  }
  return res;
}

inline std::vector<std::string> state_header(const SystemSpec& spec, const std::string& px, const std::string& py) {
  std::vector<std::string> h;
  for (int i = 0; i < spec.m(); ++i) h.push_back(px + std::to_string(i));
  for (int i = 0; i < spec.d(); ++i) h.push_back(py + std::to_string(i));
  return h;
}

inline void append_state(std::vector<std::string>& row, const Vector& x, const Vector& y) {
  for (Eigen::Index i = 0; i < x.size(); ++i) row.push_back(fmt(x(i)));
  for (Eigen::Index i = 0; i < y.size(); ++i) row.push_back(fmt(y(i)));
}

inline CommandResult cmd_simulate(const Json& c, unsigned) {
  const SystemSpec spec = detail::system_of(c);
  const double dt = detail::positive(c, "dt"), T = detail::positive(c, "T");
  const int n = step_count(dt, T);
  const int every = detail::integer(c, "every");
  const StatePair xi = *detail::state_of(c, "xi", spec);
  const std::string s = detail::str(c, "scheme");
  Scheme scheme = default_scheme(spec);
  if (s == "euler_maruyama") scheme = Scheme::euler_maruyama;
  else if (s == "exponential_splitting") scheme = Scheme::exponential_splitting;
  else if (s != "auto") throw InvalidInput("scheme must be auto, euler_maruyama or exponential_splitting");
  CommandResult res;
  res.csv.header = {"t"};
  for (auto& h : state_header(spec, "x", "y")) res.csv.header.push_back(h);
  integrate_visit(spec, xi, dt, n, StreamId{detail::seed_of(c), 0, 0}, scheme,
                  [&](int k, const Vector& x, const Vector& y) {
                    if (k % every != 0 && k != n) return;
                    std::vector<std::string> row{fmt(k * dt)};
                    append_state(row, x, y);
                    res.csv.add(std::move(row));
                  });
  return res;
}

inline CommandResult cmd_coupling_demo(const Json& c, unsigned) {
  const SystemSpec spec = detail::system_of(c);
  const double dt = detail::positive(c, "dt"), t0 = detail::positive(c, "t0");
  const StatePair xi = *detail::state_of(c, "xi", spec);
  const auto eta = detail::state_of(c, "eta", spec, false);
  if (!eta) throw InvalidInput("coupling-demo needs 'eta'");
  const CouplingTranscript tr = simulate_control_coupling(spec, xi, *eta, t0, dt, StreamId{detail::seed_of(c), 0, 0});
  CommandResult res;
  res.csv.header = {"t"};
  for (auto& h : state_header(spec, "x", "y")) res.csv.header.push_back(h);
  for (auto& h : state_header(spec, "xbar", "ybar")) res.csv.header.push_back(h);
  for (int i = 0; i < spec.d(); ++i) res.csv.header.push_back("psi" + std::to_string(i));
  res.csv.header.push_back("log_weight");
  res.csv.header.push_back("terminal_gap");
  const std::size_t n = tr.path.states.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<std::string> row{fmt(tr.path.grid[k])};
    append_state(row, tr.path.states[k].x, tr.path.states[k].y);
    append_state(row, tr.bar_path.states[k].x, tr.bar_path.states[k].y);
    for (int i = 0; i < spec.d(); ++i) row.push_back(k < tr.psi.size() ? fmt(tr.psi[k](i)) : "");
    if (k + 1 == n) {
      row.push_back(fmt(tr.log_weight));
      row.push_back(fmt(tr.terminal_gap));
    }
    res.csv.add(std::move(row));
  }
  return res;
}

inline CommandResult cmd_estimate_stationary(const Json& c, unsigned) {
  const SystemSpec spec = detail::system_of(c);
  const double dt = detail::positive(c, "dt"), T = detail::positive(c, "T"), burn = detail::num(c, "burn_in");
  const int chains = detail::integer(c, "chains");
  const std::uint64_t seed = detail::seed_of(c);
  const ErgodicReport er = ergodic_moments(spec, dt, T, burn, seed, chains);
  std::vector<EstimateReport> reps = er.entries;
  const auto meta = er.entries.front().meta;
  reps.push_back({"stationary", er.stationary ? 1.0 : 0.0, 0.0, er.samples, seed, meta});
  reps.push_back({"batch_drift_ratio", er.drift_ratio, 0.0, er.samples, seed, meta});
  double mr = 0.0;
  if (is_hurwitz(full_drift_matrix(spec), &mr)) {
    const Matrix S = stationary_covariance_linear(spec);
    for (Eigen::Index i = 0; i < S.rows(); ++i)
      for (Eigen::Index j = 0; j < S.cols(); ++j)
        reps.push_back({"lyapunov_cov_" + std::to_string(i) + "_" + std::to_string(j), S(i, j), 0.0, 0, seed, {}});
  }
  reps.push_back({"max_real_eigenvalue", mr, 0.0, 0, seed, {}});
  CommandResult res;
  res.csv = reports_csv(reps);
  return res;
}

inline CommandResult cmd_exp_moment(const Json& c, unsigned) {
  const SystemSpec spec = detail::system_of(c);
  const double eps = detail::num(c, "epsilon"), dt = detail::positive(c, "dt"), T = detail::positive(c, "T");
  const int n_paths = detail::integer(c, "n_paths", 2);
  const std::uint64_t seed = detail::seed_of(c);
  const ExpMomentCurve curve = exp_moment_curve(spec, eps, dt, T, n_paths, seed);
  std::vector<EstimateReport> reps = curve.checkpoints;
  const std::map<std::string, double> meta{{"epsilon", eps}, {"dt", dt}, {"T", T}};
  reps.push_back({"bounded", curve.bounded ? 1.0 : 0.0, 0.0, n_paths, seed, meta});
  reps.push_back({"diverged", curve.diverged ? 1.0 : 0.0, 0.0, n_paths, seed, meta});
  reps.push_back({"safe_epsilon", curve.safe_epsilon, 0.0, n_paths, seed, meta});
  reps.push_back({"tail_value", curve.tail_value, 0.0, n_paths, seed, meta});
  if (is_hurwitz(full_drift_matrix(spec))) {
    // E exp(eps |u|^2) for u ~ N(0, S) is det(I - 2 eps S)^{-1/2} when finite
    const Matrix S = stationary_covariance_linear(spec);
    if (2.0 * eps * lambda_max(S) < 1.0) {
      const Matrix I = Matrix::Identity(S.rows(), S.cols());
      reps.push_back({"gaussian_limit", 1.0 / std::sqrt((I - 2.0 * eps * S).determinant()), 0.0, 0, seed, meta});
    }
  }
  CommandResult res;
  res.csv = reports_csv(reps);
  return res;
}

inline CommandResult cmd_estimate_decay(const Json& c, unsigned threads) {
  const SystemSpec spec = detail::system_of(c);
  const Observable f = detail::observable_of(c, spec);
  const double dt = detail::positive(c, "dt");
  const auto grid = detail::numbers(c.at("t_grid"), "t_grid");
  DecayOptions opt;
  opt.burn_in = detail::num(c, "burn_in");
  opt.thin = detail::integer(c, "thin");
  opt.threads = threads;
  const std::string mode = detail::str(c, "mode");
  if (mode == "entropy") opt.mode = DecayMode::entropy;
  else if (mode != "variance") throw InvalidInput("mode must be variance or entropy");
  const int outer = detail::integer(c, "outer_n"), inner = detail::integer(c, "inner_n");
  const std::uint64_t seed = detail::seed_of(c);
  const DecayFit fit = decay_fit(spec, f, grid, outer, inner, dt, seed, opt);
  std::vector<EstimateReport> reps;
  for (const auto& p : fit.curve)
    reps.push_back({mode == "entropy" ? "entropy_curve" : "variance_curve", p.value, p.stderr_, outer, seed,
                    {{"t", p.t}, {"inner_bias", p.inner_bias}, {"dt", dt}, {"inner_n", inner}, {"outer_n", outer}}});
  reps.push_back(fit.rate);
  reps.push_back(fit.prefactor);
  auto meta = fit.rate.meta;
  reps.push_back({"residual_ok", fit.residual_ok ? 1.0 : 0.0, 0.0, outer, seed, meta});
  CommandResult res;
  res.csv = reports_csv(reps);
  return res;
}

inline CommandResult cmd_harnack_audit(const Json& c, unsigned threads) {
  const SystemSpec spec = detail::system_of(c);
  const Observable f = detail::observable_of(c, spec);
  if (!f.bounded()) throw InvalidInput("harnack-audit needs a bounded observable");
  const double dt = detail::positive(c, "dt"), t0 = detail::positive(c, "t0");
  const int n_paths = detail::integer(c, "n_paths", 2);
  const StatePair xi = *detail::state_of(c, "xi", spec);
  const auto eta = detail::state_of(c, "eta", spec, false);
  const auto dir = detail::state_of(c, "direction", spec, false);
  const std::uint64_t seed = detail::seed_of(c);
  if (eta && dir) throw InvalidInput("give either 'eta' or 'direction' with 'gaps', not both");
  std::vector<HarnackReport> runs;
  std::optional<HarnackScan> scan;
  if (eta) {
    runs.push_back(harnack_audit(spec, f, xi, *eta, t0, n_paths, dt, seed, threads));
  } else {
    if (!dir) throw InvalidInput("harnack-audit needs 'eta' or 'direction'");
    const auto gaps = detail::numbers(c.at("gaps"), "gaps");
    scan = harnack_gap_scan(spec, f, xi, *dir, gaps, t0, n_paths, dt, seed, threads);
    runs = scan->runs;
  }
  std::vector<EstimateReport> reps;
  bool all_hold = true;
  for (const auto& r : runs) {
    auto tagged = [&](EstimateReport e) {
      e.meta["gap"] = r.gap;
      return e;
    };
    reps.push_back(tagged(r.L));
    reps.push_back(tagged(r.R2));
    reps.push_back(tagged(r.F2));
    reps.push_back(tagged(r.mean_weight));
    auto meta = r.L.meta;
    meta["gap"] = r.gap;
    reps.push_back({"chain_holds", r.chain_holds ? 1.0 : 0.0, r.combined_se, n_paths, r.L.seed, meta});
    reps.push_back({"ess", r.ess, 0.0, n_paths, r.L.seed, meta});
    reps.push_back({"c0_hat", r.c0, 0.0, n_paths, r.L.seed, meta});
    reps.push_back({"c0_exact", r.gap > 0.0 ? r.exact_log_r2 / (r.gap * r.gap) : 0.0, 0.0, 0, r.L.seed, meta});
    all_hold = all_hold && r.chain_holds;
  }
  if (scan) {
    const std::map<std::string, double> meta{{"t0", t0}, {"dt", dt}, {"n_paths", n_paths}};
    reps.push_back({"c0_min", scan->c0_min, 0.0, n_paths, seed, meta});
    reps.push_back({"c0_max", scan->c0_max, 0.0, n_paths, seed, meta});
    reps.push_back({"c0_stable", scan->stable ? 1.0 : 0.0, 0.0, n_paths, seed, meta});
  }
  CommandResult res;
  res.csv = reports_csv(reps);
  if (!all_hold) res.failure = "Cauchy-Schwarz chain failed beyond 3 combined standard errors";
  return res;
}

inline CommandResult cmd_operator_lab(const Json& c, unsigned threads) {
  const int n = detail::integer(c, "n", 2);
  const int chains = detail::integer(c, "chains");
  const int trials = detail::integer(c, "trials");
  const double p = detail::num(c, "p"), q = detail::num(c, "q");
  if (!(q > p && p > 1.0)) throw InvalidInput("operator-lab needs q > p > 1");
  const int n_max = detail::integer(c, "n_max");
  const std::uint64_t seed = detail::seed_of(c);
  NormOptions nopt;
  nopt.restarts = detail::integer(c, "restarts", 0);
  nopt.threads = threads;
  std::vector<FiniteMarkovOperator> ops;
  if (!c.at("operator").is_null()) {
    ops.push_back(detail::operator_of(c.at("operator")));
  } else {
    for (int i = 0; i < chains; ++i) ops.push_back(random_reversible_chain(n, seed, static_cast<std::uint64_t>(i)));
  }

  CommandResult res;
  res.csv.header = {"index", "n",         "norm2_gap",  "delta",         "norm_converged", "prop_bound",
                    "gap_bound_holds", "power", "power_norm", "entropy_status", "entropy_norm_pq", "entropy_max_excess",
                    "entropy_violations", "l2_max_excess"};
  int failures = 0;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const FiniteMarkovOperator& op = ops[i];
    nopt.seed = seed + i;
    const NormResult nr = norm_2_to_4(op, nopt);
    const double delta = std::pow(nr.value, 4);
    const double gap = norm2_gap(op);
    std::vector<std::string> row{std::to_string(i), std::to_string(op.n()), fmt(gap), fmt(delta), fmt(nr.converged)};
    std::optional<FiniteMarkovOperator> certified;
    if (delta < 2.0 - 1e-9) {
      const double b = prop_p_bound(delta);
      const bool ok = gap * gap <= b + 1e-9;
      failures += ok ? 0 : 1;
      row.push_back(fmt(b));
      row.push_back(fmt(ok));
      const PowerResult pw = hypercontractive_power(op, n_max, nopt);
      row.push_back(pw.n ? std::to_string(*pw.n) : "none");
      row.push_back(fmt(pw.final_norm));
      if (pw.n) {
        FiniteMarkovOperator Q{op.P, op.mu};
        for (int k = 1; k < *pw.n; ++k) Q.P = Q.P * op.P;
        Q.P = Q.P.array().colwise() / Q.P.rowwise().sum().array();
        certified = Q;
      }
    } else {
      row.insert(row.end(), {"", "", "", ""});
    }
    // the audit runs on the operator itself if it meets the premise, else on its hypercontractive power
    const double npq = norm_p_to_q(op, p, q, nopt).value;
    if (npq <= 1.0 + 1e-9) certified = op;
    if (certified) {
      const ConditionReport a = entropy_contraction_audit(*certified, p, q, trials, seed + i, nopt);
      failures += a.holds ? 0 : 1;
      row.push_back(a.holds ? "holds" : "violated");
      row.push_back(fmt(a.witness("norm_p_to_q")));
      row.push_back(fmt(a.witness("max_excess")));
      row.push_back(fmt(a.witness("violations") + a.witness("violations_l2")));
      row.push_back(fmt(a.witness("max_excess_l2")));
    } else {
      row.insert(row.end(), {"skipped", fmt(npq), "", "", ""});
    }
    res.csv.add(std::move(row));
  }
  if (failures) res.failure = std::to_string(failures) + " operator inequality check(s) failed";
  return res;
}

inline std::string presets_table() {
  std::string s;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %-12s %s\n", "preset", "provenance", "description");
  s += buf;
  for (const auto& p : preset_catalog()) {
    std::snprintf(buf, sizeof buf, "%-18s %-12s %s\n", p.name.c_str(), p.provenance.c_str(), p.description.c_str());
    s += buf;
  }
  return s;
}

inline CommandResult dispatch(const std::string& command, const Json& c, unsigned threads) {
  if (command == "check-conditions") return cmd_check_conditions(c, threads);
  if (command == "simulate") return cmd_simulate(c, threads);
  if (command == "coupling-demo") return cmd_coupling_demo(c, threads);
  if (command == "estimate-stationary") return cmd_estimate_stationary(c, threads);
  if (command == "exp-moment") return cmd_exp_moment(c, threads);
  if (command == "estimate-decay") return cmd_estimate_decay(c, threads);
  if (command == "harnack-audit") return cmd_harnack_audit(c, threads);
  if (command == "operator-lab") return cmd_operator_lab(c, threads);
  throw InvalidInput("unknown command '" + command + "'");
}

/// One JSON line on the error stream.
inline void error_record(std::ostream& err, const std::string& kind, int code, const std::string& message) {
  err << Json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << '\n';
}

inline std::string manifest_path(const std::string& out) { return out + ".manifest.json"; }

/// Runs one command; returns the process exit status. The CSV goes to
/// inv.out (with a manifest beside it) or to `out` when no path is given.
inline int run(const Invocation& inv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const auto start = std::chrono::steady_clock::now();
  try {
    if (inv.command == "list-presets") {
      const std::string table = presets_table();
      if (inv.out) {
        std::ofstream f(*inv.out, std::ios::binary);
        if (!f) throw InvalidInput("cannot write '" + *inv.out + "'");
        f << table;
      } else {
        out << table;
      }
      return 0;
    }
    if (inv.threads < 1) throw InvalidInput("threads must be >= 1");
    const Json user = inv.config_path ? load_config_file(*inv.config_path) : Json::object();
    const Json config = resolve_config(inv.command, user, inv);
    CommandResult res;
    try {
      res = dispatch(inv.command, config, inv.threads);
    } catch (const Json::exception& e) {
      throw InvalidInput(std::string("config value has the wrong type: ") + e.what());
    }
    const std::string text = res.csv.str();
    if (inv.out) {
      std::ofstream f(*inv.out, std::ios::binary);
      if (!f) throw InvalidInput("cannot write '" + *inv.out + "'");
      f << text;
      f.close();
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const Json manifest{{"toolkit_version", kVersion},
                          {"command", inv.command},
                          {"config", config},
                          {"threads", inv.threads},
                          {"seed_expansion", "per-path stream key = splitmix64 over (master seed, path index, "
                                             "estimator tag); mt19937_64 per stream"},
                          {"output", *inv.out},
                          {"wall_time_seconds", wall}};
      std::ofstream m(manifest_path(*inv.out), std::ios::binary);
      m << manifest.dump(2) << '\n';
    } else {
      out << text;
    }
    if (res.failure) throw AssertionFailure(*res.failure);
    return 0;
  } catch (const Error& e) {
    error_record(err, e.kind(), e.exit_code(), e.what());
    return e.exit_code();
  } catch (const Json::exception& e) {
    error_record(err, "config", 2, e.what());
    return 2;
  } catch (const std::exception& e) {
    error_record(err, "internal", 1, e.what());
    return 1;
  }
}

}  // namespace hyperkin::cli
