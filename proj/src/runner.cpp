#include "fedbio/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace fedbio {
namespace {

const std::set<std::string> kCommonProblemKeys = {"problem.family", "problem.seed",
                                                  "problem.load", "problem.save"};
const std::set<std::string> kQuadraticKeys = {"problem.p",    "problem.d",    "problem.q",
                                              "problem.sigma", "problem.zeta", "problem.mu",
                                              "problem.L",    "problem.lower"};
const std::set<std::string> kCleaningKeys = {
    "problem.classes",     "problem.samples_per_client", "problem.val_per_client",
    "problem.test_per_client", "problem.feature_dim",    "problem.rho",
    "problem.lambda",      "problem.separation"};
const std::set<std::string> kHyperRepKeys = {
    "problem.tasks_per_client", "problem.n_way",     "problem.k_shot", "problem.k_query",
    "problem.input_dim",        "problem.embed_dim", "problem.lambda", "problem.noise"};
const std::set<std::string> kAlgoKeys = {
    "algo.kind",   "algo.b",      "algo.b1",         "algo.eta",        "algo.gamma",
    "algo.tau",    "algo.c_nu",   "algo.c_omega",    "algo.c_u",        "algo.r",
    "algo.delta",  "algo.u0",     "algo.neumann_q",  "algo.neumann_tau", "algo.literal_u_update",
    "algo.c_eta",  "algo.c_gamma"};
const std::set<std::string> kFederationKeys = {
    "federation.M",    "federation.I",    "federation.rounds", "federation.clients_per_round",
    "federation.seed", "federation.shared_client_streams", "federation.average_momenta"};
const std::set<std::string> kRunKeys = {"run.eval_every", "run.timing"};

int to_int(const Config& cfg, const std::string& key, long long fallback, long long lo) {
  const long long v = cfg.get_int(key, fallback);
  if (v < lo || v > 1'000'000'000) {
    throw ConfigError(key + ": value " + std::to_string(v) + " out of range");
  }
  return static_cast<int>(v);
}

LowerLevel parse_lower(const std::string& s) {
  if (s == "shared") return LowerLevel::Shared;
  if (s == "local") return LowerLevel::Local;
  throw ConfigError("problem.lower: expected 'shared' or 'local', got '" + s + "'");
}

void apply_algo_override(HyperParams& hp, const Config& c, const std::string& key) {
  const std::string name = key.substr(5);
  if (name == "kind" || name == "b") return;
  if (name == "b1") {
    hp.b1 = static_cast<std::size_t>(to_int(c, key, 1, 1));
  } else if (name == "eta") {
    hp.eta = c.get_double(key, 0);
  } else if (name == "gamma") {
    hp.gamma = c.get_double(key, 0);
  } else if (name == "tau") {
    hp.tau = c.get_double(key, 0);
  } else if (name == "c_nu") {
    hp.c_nu = c.get_double(key, 0);
  } else if (name == "c_omega") {
    hp.c_omega = c.get_double(key, 0);
  } else if (name == "c_u") {
    hp.c_u = c.get_double(key, 0);
  } else if (name == "r") {
    hp.r = c.get_double(key, 0);
  } else if (name == "delta") {
    hp.schedule.delta = c.get_double(key, 0);
  } else if (name == "u0") {
    hp.schedule.u0 = c.get_double(key, 0);
  } else if (name == "neumann_q") {
    hp.neumann.Q = to_int(c, key, 0, 0);
  } else if (name == "neumann_tau") {
    hp.neumann.tau = c.get_double(key, 0);
  } else if (name == "literal_u_update") {
    hp.literal_u_update = c.get_bool(key, false);
  } else if (name == "c_eta") {
    hp.c_eta = c.get_double(key, 0);
  } else if (name == "c_gamma") {
    hp.c_gamma = c.get_double(key, 0);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string opt(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) {
    return fmt_double(*v);
  } else {
    return std::to_string(*v);
  }
}

}  // namespace

ExperimentSpec spec_from_config(const Config& c) {
  ExperimentSpec spec;
  ProblemSpec& p = spec.problem;
  p.family = c.get_string("problem.family", "quadratic");
  const std::set<std::string>* family_keys = nullptr;
  if (p.family == "quadratic") {
    family_keys = &kQuadraticKeys;
  } else if (p.family == "data_cleaning") {
    family_keys = &kCleaningKeys;
  } else if (p.family == "hyperrep") {
    family_keys = &kHyperRepKeys;
  } else {
    throw ConfigError("problem.family: unknown family '" + p.family + "'");
  }
  for (const auto& key : c.keys()) {
    const bool known = kCommonProblemKeys.count(key) || family_keys->count(key) ||
                       kAlgoKeys.count(key) || kFederationKeys.count(key) || kRunKeys.count(key);
    if (!known) {
      const bool other_family = kQuadraticKeys.count(key) || kCleaningKeys.count(key) ||
                                kHyperRepKeys.count(key);
      throw ConfigError(other_family ? "config key '" + key + "' does not apply to family '" +
                                           p.family + "'"
                                     : "unknown config key '" + key + "'");
    }
  }

  FederationConfig& f = spec.federation;
  f.M = to_int(c, "federation.M", 4, 1);
  f.I = to_int(c, "federation.I", 1, 1);
  f.rounds = to_int(c, "federation.rounds", 10, 0);
  f.clients_per_round = to_int(c, "federation.clients_per_round", 0, 0);
  f.seed = c.get_u64("federation.seed", 0);
  f.shared_client_streams = c.get_bool("federation.shared_client_streams", false);
  f.average_momenta = c.get_bool("federation.average_momenta", true);
  try {
    f.algo = parse_algo(c.get_string("algo.kind", "fedbioacc"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("algo.kind: ") + e.what());
  }
  if (f.S() > f.M) throw ConfigError("federation.clients_per_round: exceeds federation.M");

  spec.b = static_cast<std::size_t>(to_int(c, "algo.b", 1, 1));
  for (const auto& key : c.keys()) {
    if (kAlgoKeys.count(key)) spec.algo_overrides[key] = c.raw(key);
  }
  // Validate override values now so errors name the key before any work.
  {
    HyperParams probe;
    for (const auto& [key, value] : spec.algo_overrides) apply_algo_override(probe, c, key);
  }
  spec.eval_every = to_int(c, "run.eval_every", 1, 1);
  spec.timing = c.get_bool("run.timing", false);

  p.load_path = c.get_string("problem.load", "");
  p.save_path = c.get_string("problem.save", "");
  const std::uint64_t seed = c.get_u64("problem.seed", 0);
  if (p.family == "quadratic") {
    auto& q = p.quadratic;
    q.seed = seed;
    q.clients = f.M;
    q.p = to_int(c, "problem.p", q.p, 1);
    q.d = to_int(c, "problem.d", q.d, 1);
    q.q = to_int(c, "problem.q", q.q, 0);
    q.sigma = c.get_double("problem.sigma", q.sigma);
    q.zeta = c.get_double("problem.zeta", q.zeta);
    q.mu = c.get_double("problem.mu", q.mu);
    q.L = c.get_double("problem.L", q.L);
    q.lower = parse_lower(c.get_string("problem.lower", is_local(f.algo) ? "local" : "shared"));
  } else if (p.family == "data_cleaning") {
    auto& d = p.cleaning;
    d.seed = seed;
    d.clients = f.M;
    d.classes = to_int(c, "problem.classes", d.classes, 2);
    d.samples_per_client = to_int(c, "problem.samples_per_client", d.samples_per_client, 1);
    d.val_per_client = to_int(c, "problem.val_per_client", d.val_per_client, 1);
    d.test_per_client = to_int(c, "problem.test_per_client", d.test_per_client, 1);
    d.feature_dim = to_int(c, "problem.feature_dim", d.feature_dim, 1);
    d.rho = c.get_double("problem.rho", d.rho);
    d.lambda = c.get_double("problem.lambda", d.lambda);
    d.separation = c.get_double("problem.separation", d.separation);
  } else {
    auto& h = p.hyperrep;
    h.seed = seed;
    h.clients = f.M;
    h.tasks_per_client = to_int(c, "problem.tasks_per_client", h.tasks_per_client, 1);
    h.n_way = to_int(c, "problem.n_way", h.n_way, 2);
    h.k_shot = to_int(c, "problem.k_shot", h.k_shot, 1);
    h.k_query = to_int(c, "problem.k_query", h.k_query, 1);
    h.input_dim = to_int(c, "problem.input_dim", h.input_dim, 1);
    h.embed_dim = to_int(c, "problem.embed_dim", h.embed_dim, 1);
    h.lambda = c.get_double("problem.lambda", h.lambda);
    h.noise = c.get_double("problem.noise", h.noise);
  }
  return spec;
}

ProblemSet build_problem(const ExperimentSpec& spec) {
  const ProblemSpec& p = spec.problem;
  ProblemSet set;
  if (!p.load_path.empty()) {
    set = load_problem_set(p.load_path);
    if (set.family != p.family) {
      throw ConfigError("problem.load: file holds family '" + set.family + "', config says '" +
                        p.family + "'");
    }
  } else if (p.family == "quadratic") {
    set = make_quadratic(p.quadratic);
  } else if (p.family == "data_cleaning") {
    set = make_data_cleaning(p.cleaning);
  } else {
    set = make_hyperrep(p.hyperrep);
  }
  if (!p.save_path.empty()) save_problem_set(set, p.save_path);
  return set;
}

HyperParams build_hyperparams(const ExperimentSpec& spec, const ProblemSet& set) {
  const auto& f = spec.federation;
  HyperParams hp = preset_hyperparams(set.family, f.algo, set.constants, f.M, spec.b, f.I);
  Config c;
  for (const auto& [key, value] : spec.algo_overrides) c.set(key, value);
  for (const auto& [key, value] : spec.algo_overrides) apply_algo_override(hp, c, key);
  return hp;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  return run_experiment(spec, build_problem(spec));
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const ProblemSet& set) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult result;
  result.hp = build_hyperparams(spec, set);
  result.M = spec.federation.M;
  Federation fed(set, spec.federation, result.hp);
  auto record = [&] {
    MetricsRow row = fed.evaluate();
    if (spec.timing) {
      row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - start)
                        .count();
    }
    result.rows.push_back(row);
  };
  record();
  for (int r = 1; r <= spec.federation.rounds; ++r) {
    fed.run_round();
    if (r % spec.eval_every == 0 || r == spec.federation.rounds) record();
  }
  result.counts = fed.server().counts;
  result.clamp_warnings = fed.server().clamp_warnings;
  return result;
}

std::string csv_line(const MetricsRow& row) {
  std::string s;
  s += std::to_string(row.round) + ',';
  s += std::to_string(row.iter) + ',';
  s += opt(row.alpha) + ',';
  s += opt(row.grad_norm_sq) + ',';
  s += opt(row.lower_gap) + ',';
  s += opt(row.u_gap) + ',';
  s += opt(row.val_error) + ',';
  s += std::to_string(row.comm_scalars) + ',';
  s += std::to_string(row.samples_per_client) + ',';
  s += opt(row.wall_ms);
  return s;
}

void write_csv(const std::vector<MetricsRow>& rows, std::ostream& out) {
  out << kCsvHeader << '\n';
  for (const auto& row : rows) out << csv_line(row) << '\n';
}

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error("cannot rename onto '" + path + "': " + ec.message());
  }
}

ComplexitySummary complexity_counters(const ExperimentResult& result,
                                      const std::vector<double>& eps) {
  if (result.rows.empty()) throw std::invalid_argument("complexity_counters: empty trace");
  ComplexitySummary s;
  const double m = static_cast<double>(std::max(result.M, 1));
  s.grad_f_x = static_cast<double>(result.counts.grad_f_x) / m;
  s.grad_f_y = static_cast<double>(result.counts.grad_f_y) / m;
  s.grad_g_y = static_cast<double>(result.counts.grad_g_y) / m;
  s.jvp = static_cast<double>(result.counts.jvp) / m;
  s.hvp = static_cast<double>(result.counts.hvp) / m;
  s.samples = static_cast<double>(result.counts.samples) / m;
  for (double e : eps) {
    std::optional<std::int64_t> hit;
    for (const auto& row : result.rows) {
      if (row.grad_norm_sq && *row.grad_norm_sq <= e) {
        hit = row.round;
        break;
      }
    }
    s.rounds_to_eps.emplace_back(e, hit);
  }
  return s;
}

std::vector<SweepRun> run_sweep(const Config& base, const std::string& key,
                                const std::vector<std::string>& values, int threads) {
  if (values.empty()) throw ConfigError("sweep: no values for '" + key + "'");
  std::vector<SweepRun> runs;
  for (const auto& v : values) {
    Config c = base;
    c.set(key, v);
    ExperimentSpec spec = spec_from_config(c);
    spec.federation.threads = threads;
    runs.push_back({key + "=" + v, run_experiment(spec)});
  }
  return runs;
}

void write_sweep_csv(const std::vector<SweepRun>& runs, std::ostream& out) {
  out << "sweep," << kCsvHeader << '\n';
  for (const auto& run : runs) {
    for (const auto& row : run.result.rows) out << run.label << ',' << csv_line(row) << '\n';
  }
}

}  // namespace fedbio
