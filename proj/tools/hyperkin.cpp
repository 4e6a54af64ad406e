#include <CLI11.hpp>

#include <iostream>

#include "hyperkin/cli.hpp"

namespace cli = hyperkin::cli;

int main(int argc, char** argv) {
  CLI::App app{"Coupling, Harnack and decay experiments for stochastic Hamiltonian systems"};
  app.set_version_flag("--version", std::string(cli::kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config, out;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  app.add_option("--config", config, "JSON config (or a run manifest)");
  auto* seed_opt = app.add_option("--seed", seed, "master seed, overrides the config");
  app.add_option("--out", out, "CSV output path; a manifest is written beside it");
  app.add_option("--threads", threads, "worker threads (results do not depend on this)")->check(CLI::PositiveNumber);

  const char* help[] = {
      "verdicts and witnesses for every applicable condition",
      "one Euler-Maruyama / splitting path",
      "one control-coupling transcript with its Girsanov weight",
      "ergodic mean and covariance against the Lyapunov solution",
      "variance (or entropy) decay rate by nested Monte Carlo",
      "exponential moment curve from the origin",
      "Cauchy-Schwarz audit of the Harnack inequality over a gap scan",
      "norms, gap bound and entropy contraction on finite Markov operators",
      "available presets",
  };
  int op_n = 0, op_trials = 0;
  std::string op_file;
  std::size_t i = 0;
  for (const auto& name : cli::commands()) {
    auto* sub = app.add_subcommand(name, help[i++]);
    if (name == "operator-lab") {
      sub->add_option("--n", op_n, "states per random chain");
      sub->add_option("--trials", op_trials, "random trials per entropy audit");
      sub->add_option("--operator", op_file, "JSON file with row-major P and mu");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    cli::error_record(std::cerr, "config", 2, e.what());
    return 2;
  }

  cli::Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  if (!config.empty()) inv.config_path = config;
  if (seed_opt->count()) inv.seed = seed;
  if (!out.empty()) inv.out = out;
  inv.threads = threads;
  try {
    if (op_n) inv.overrides["n"] = op_n;
    if (op_trials) inv.overrides["trials"] = op_trials;
    if (!op_file.empty()) {
      std::ifstream f(op_file);
      if (!f) throw hyperkin::InvalidInput("cannot open operator file '" + op_file + "'");
      inv.overrides["operator"] = hyperkin::Json::parse(f);
    }
  } catch (const hyperkin::Error& e) {
    cli::error_record(std::cerr, e.kind(), e.exit_code(), e.what());
    return e.exit_code();
  } catch (const hyperkin::Json::exception& e) {
    cli::error_record(std::cerr, "config", 2, e.what());
    return 2;
  }
  return cli::run(inv);
}
