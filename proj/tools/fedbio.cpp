// fedbio: run, sweep and verify federated bilevel experiments.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error,
// 3 runtime failure.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedbio/config.hpp"
#include "fedbio/runner.hpp"
#include "fedbio/verification.hpp"

namespace {

constexpr int kExitVerifyFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config_path;
  std::string out_path;
  std::vector<std::string> overrides;
  std::vector<std::string> positional;
  int threads = 1;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool timing = false;
  int verbosity = 0;
};

void add_common(CLI::App& app, CommonArgs& a) {
  app.add_option("--config", a.config_path, "Experiment config file");
  app.add_option("--out", a.out_path, "Output CSV (default: stdout)");
  app.add_option("--set", a.overrides, "Override a config key, section.key=value")
      ->allow_extra_args(false);
  app.add_option("--threads", a.threads, "Threads for client phases")->check(CLI::Range(1, 1024));
  app.add_option("--seed", a.seed, "Seed for problem generation and the federation");
  app.add_flag("--timing", a.timing, "Record wall-clock milliseconds");
  app.add_flag("-v,--verbose", a.verbosity, "Print a run summary to stderr");
  app.add_option("assignments", a.positional, "Further section.key=value overrides");
}

fedbio::Config load_config(const CommonArgs& a) {
  fedbio::Config cfg =
      a.config_path.empty() ? fedbio::Config{} : fedbio::Config::load(a.config_path);
  for (const auto& s : a.overrides) cfg.set(s);
  for (const auto& s : a.positional) cfg.set(s);
  if (a.seed_given) {
    cfg.set("federation.seed", std::to_string(a.seed));
    cfg.set("problem.seed", std::to_string(a.seed));
  }
  if (a.timing) cfg.set("run.timing", "true");
  return cfg;
}

void emit(const std::string& out_path, const std::string& content) {
  if (out_path.empty()) {
    std::cout << content;
  } else {
    fedbio::write_file_atomic(out_path, content);
  }
}

void print_summary(const fedbio::ExperimentResult& r) {
  const auto& hp = r.hp;
  std::cerr << "eta=" << hp.eta << " gamma=" << hp.gamma << " tau=" << hp.tau
            << " c_nu=" << hp.c_nu << " c_omega=" << hp.c_omega << " c_u=" << hp.c_u
            << " r=" << hp.r << " b=" << hp.b << " b1=" << hp.b1
            << " delta=" << hp.schedule.delta << " u0=" << hp.schedule.u0 << "\n";
  const auto s = fedbio::complexity_counters(r, {1e-2, 1e-4, 1e-6, 1e-8});
  std::cerr << "per-client oracle calls: grad_f_x=" << s.grad_f_x << " grad_f_y=" << s.grad_f_y
            << " grad_g_y=" << s.grad_g_y << " jvp=" << s.jvp << " hvp=" << s.hvp << "\n";
  for (const auto& [eps, round] : s.rounds_to_eps) {
    std::cerr << "rounds to grad_norm_sq <= " << eps << ": "
              << (round ? std::to_string(*round) : std::string("not reached")) << "\n";
  }
  if (r.clamp_warnings > 0) {
    std::cerr << "warning: momentum weight clamped at zero " << r.clamp_warnings << " times\n";
  }
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size() || v < 0) throw fedbio::ConfigError("--q-sweep: bad entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw fedbio::ConfigError("--q-sweep: empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated bilevel optimization simulator"};
  app.require_subcommand(1);

  CommonArgs run_args;
  auto* run = app.add_subcommand("run", "Run one experiment and write its metrics CSV");
  add_common(*run, run_args);

  CommonArgs sweep_args;
  std::string vary;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of a config key");
  add_common(*sweep, sweep_args);
  sweep->add_option("--vary", vary, "key=v1,v2,... to sweep")->required();

  std::string q_sweep = "0,5,10,20";
  std::uint64_t verify_seed = 1;
  auto* verify = app.add_subcommand("verify", "Check hypergradient oracles against each other");
  verify->add_option("--q-sweep", q_sweep, "Comma-separated Neumann lengths");
  verify->add_option("--seed", verify_seed, "Seed for the generated instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  run_args.seed_given = run->count("--seed") > 0;
  sweep_args.seed_given = sweep->count("--seed") > 0;

  try {
    if (*run) {
      const fedbio::Config cfg = load_config(run_args);
      fedbio::ExperimentSpec spec = fedbio::spec_from_config(cfg);
      spec.federation.threads = run_args.threads;
      const auto result = fedbio::run_experiment(spec);
      std::ostringstream csv;
      fedbio::write_csv(result.rows, csv);
      emit(run_args.out_path, csv.str());
      if (run_args.verbosity > 0) print_summary(result);
      return 0;
    }
    if (*sweep) {
      const fedbio::Config cfg = load_config(sweep_args);
      const auto eq = vary.find('=');
      if (eq == std::string::npos) throw fedbio::ConfigError("--vary: expected key=v1,v2,...");
      std::vector<std::string> values;
      std::stringstream ss(vary.substr(eq + 1));
      std::string item;
      while (std::getline(ss, item, ',')) values.push_back(item);
      const auto runs = fedbio::run_sweep(cfg, vary.substr(0, eq), values, sweep_args.threads);
      std::ostringstream csv;
      fedbio::write_sweep_csv(runs, csv);
      emit(sweep_args.out_path, csv.str());
      return 0;
    }
    fedbio::VerifyOptions opts;
    opts.q_sweep = parse_int_list(q_sweep);
    opts.seed = verify_seed;
    const auto results = fedbio::run_verification(opts, std::cout);
    for (const auto& r : results) {
      if (!r.passed) return kExitVerifyFailed;
    }
    return 0;
  } catch (const fedbio::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
