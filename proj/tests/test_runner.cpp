#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedbio/config.hpp"
#include "fedbio/runner.hpp"

using namespace fedbio;
namespace fs = std::filesystem;

namespace {

Config base_config() {
  return Config::parse(R"(
[problem]
family = quadratic
seed = 3
p = 4
d = 3
sigma = 0.5
zeta = 0.5

[algo]
kind = fedbio
b = 2

[federation]
M = 3
I = 2
rounds = 5
seed = 9
)");
}

std::string csv_of(const ExperimentResult& r) {
  std::ostringstream out;
  write_csv(r.rows, out);
  return out.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fedbio_runner_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, ParsesSectionsCommentsAndQuotes) {
  const auto c = Config::parse(R"(
# leading comment
top = 1
[problem]
family = "data_cleaning"   # trailing
rho=0.8
[federation]
  M = 10
name = "a # not a comment"
)");
  EXPECT_EQ(c.raw("top"), "1");
  EXPECT_EQ(c.get_string("problem.family", ""), "data_cleaning");
  EXPECT_DOUBLE_EQ(c.get_double("problem.rho", 0), 0.8);
  EXPECT_EQ(c.get_int("federation.M", 0), 10);
  EXPECT_EQ(c.raw("federation.name"), "a # not a comment");
  EXPECT_EQ(c.get_int("federation.I", 7), 7);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(Config::parse("[a]\nx = 1\nx = 2\n"), ConfigError);
  EXPECT_THROW(Config::parse("just words\n"), ConfigError);
  EXPECT_THROW(Config::parse("[open\n"), ConfigError);
  EXPECT_THROW(Config::parse("x = \"unterminated\n"), ConfigError);
  EXPECT_THROW(Config::parse("x =\n"), ConfigError);
  EXPECT_THROW(Config::parse("bad key = 1\n"), ConfigError);
  try {
    Config::parse("a = 1\n\nb c\n", "exp.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("exp.toml:3"), std::string::npos) << e.what();
  }
}

TEST(Config, TypedGettersValidate) {
  auto c = Config::parse("a = 1.5\nb = 12x\nc = -3\nd = yes\n");
  EXPECT_THROW(c.get_int("a", 0), ConfigError);
  EXPECT_THROW(c.get_double("b", 0), ConfigError);
  EXPECT_THROW(c.get_u64("c", 0), ConfigError);
  EXPECT_THROW(c.get_bool("d", false), ConfigError);
  c.set("d=true");
  EXPECT_TRUE(c.get_bool("d", false));
  c.set("a", "2");
  EXPECT_EQ(c.get_int("a", 0), 2);
  EXPECT_THROW(c.set("no_equals_sign"), ConfigError);
}

TEST(Config, MissingFileNamesThePath) {
  try {
    Config::load("/nonexistent/dir/exp.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/exp.toml"), std::string::npos);
  }
}

TEST(Spec, RejectsUnknownAndForeignKeys) {
  auto c = base_config();
  c.set("problem.colour", "blue");
  try {
    spec_from_config(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("problem.colour"), std::string::npos);
  }
  c = base_config();
  c.set("problem.rho", "0.5");
  try {
    spec_from_config(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("does not apply"), std::string::npos) << e.what();
  }
  c = base_config();
  c.set("problem.family", "mnist");
  EXPECT_THROW(spec_from_config(c), ConfigError);
  c = base_config();
  c.set("algo.kind", "sgd");
  EXPECT_THROW(spec_from_config(c), ConfigError);
  c = base_config();
  c.set("federation.clients_per_round", "4");
  EXPECT_THROW(spec_from_config(c), ConfigError);
  c = base_config();
  c.set("algo.eta", "fast");
  EXPECT_THROW(spec_from_config(c), ConfigError);
  c = base_config();
  c.set("federation.M", "0");
  EXPECT_THROW(spec_from_config(c), ConfigError);
}

TEST(Spec, OverridesReachHyperparameters) {
  auto c = base_config();
  c.set("algo.eta", "0.125");
  c.set("algo.neumann_q", "7");
  c.set("algo.delta", "2.5");
  const auto spec = spec_from_config(c);
  const auto set = build_problem(spec);
  const auto hp = build_hyperparams(spec, set);
  EXPECT_EQ(hp.eta, 0.125);
  EXPECT_EQ(hp.neumann.Q, 7);
  EXPECT_EQ(hp.schedule.delta, 2.5);
  EXPECT_EQ(hp.b, 2u);
  EXPECT_EQ(hp.I, 2);
  EXPECT_EQ(set.num_clients(), 3u);
  EXPECT_EQ(set.dim_x(), 4);
}

TEST(Spec, LocalAlgorithmsDefaultToLocalLowers) {
  auto c = base_config();
  c.set("algo.kind", "fedbio_local");
  const auto spec = spec_from_config(c);
  EXPECT_EQ(spec.problem.quadratic.lower, LowerLevel::Local);
  EXPECT_NO_THROW(run_experiment(spec));
  c.set("problem.lower", "shared");
  EXPECT_THROW(run_experiment(spec_from_config(c)), std::invalid_argument);
}

// ---------------------------------------------------------------- traces

TEST(Run, ZeroRoundsGivesOneRow) {
  auto c = base_config();
  c.set("federation.rounds", "0");
  const auto r = run_experiment(spec_from_config(c));
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].round, 0);
  EXPECT_EQ(r.rows[0].iter, 0);
  EXPECT_EQ(r.rows[0].comm_scalars, 0u);
}

TEST(Run, EvaluationCadence) {
  auto c = base_config();
  c.set("federation.rounds", "7");
  c.set("run.eval_every", "3");
  const auto r = run_experiment(spec_from_config(c));
  std::vector<std::int64_t> rounds;
  for (const auto& row : r.rows) rounds.push_back(row.round);
  EXPECT_EQ(rounds, (std::vector<std::int64_t>{0, 3, 6, 7}));
  EXPECT_EQ(r.rows.back().iter, 14);
}

TEST(Run, DeterministicPerSeed) {
  for (const char* kind : {"fedbioacc", "fedbio", "fedavg"}) {
    auto c = base_config();
    c.set("algo.kind", kind);
    const auto a = csv_of(run_experiment(spec_from_config(c)));
    const auto b = csv_of(run_experiment(spec_from_config(c)));
    EXPECT_EQ(a, b) << kind;
    c.set("federation.seed", "10");
    EXPECT_NE(a, csv_of(run_experiment(spec_from_config(c)))) << kind;
  }
}

TEST(Run, CountersAreMonotoneAndConsistent) {
  auto c = base_config();
  c.set("federation.rounds", "6");
  c.set("algo.kind", "fedbioacc");
  const auto spec = spec_from_config(c);
  const auto r = run_experiment(spec);
  const auto per_round = exchange_size(sync_fields(AlgoKind::FedBiOAcc), 4, 3) * (3 + 3);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    EXPECT_EQ(row.comm_scalars, static_cast<std::uint64_t>(row.round) * per_round);
    if (i > 0) {
      EXPECT_GE(row.round, r.rows[i - 1].round);
      EXPECT_GE(row.samples_per_client, r.rows[i - 1].samples_per_client);
    }
  }
  // First batch b1 = I b, then 5 sub-batches of b per local step.
  EXPECT_EQ(r.rows.back().samples_per_client, 5u * 4u + 6u * 2u * 5u * 2u);
}

TEST(Run, ReplayFromSavedProblemIsIdentical) {
  const auto path = scratch("replay.bin");
  fs::remove(path);
  auto c = base_config();
  c.set("problem.save", path.string());
  const auto first = csv_of(run_experiment(spec_from_config(c)));
  ASSERT_TRUE(fs::exists(path));
  auto replay = base_config();
  replay.set("problem.load", path.string());
  replay.set("problem.seed", "12345");  // ignored when loading
  EXPECT_EQ(csv_of(run_experiment(spec_from_config(replay))), first);

  replay.set("problem.family", "hyperrep");
  replay.set("algo.kind", "fedbio_local");
  EXPECT_THROW(run_experiment(spec_from_config(replay)), ConfigError);
}

// ---------------------------------------------------------------- CSV

TEST(Csv, HeaderAndEmptyFields) {
  MetricsRow row;
  row.round = 2;
  row.iter = 10;
  row.grad_norm_sq = 0.25;
  row.comm_scalars = 480;
  row.samples_per_client = 33;
  EXPECT_EQ(csv_line(row), "2,10,,0.25,,,,480,33,");
  row.alpha = 0.1;
  row.wall_ms = 17;
  EXPECT_EQ(csv_line(row), "2,10,0.10000000000000001,0.25,,,,480,33,17");

  std::ostringstream out;
  write_csv({row, row}, out);
  const std::string s = out.str();
  EXPECT_EQ(s.substr(0, s.find('\n')),
            "round,iter,alpha,grad_norm_sq,lower_gap,u_gap,val_error,comm_scalars,"
            "samples_per_client,wall_ms");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 3);
  EXPECT_EQ(s.find('\r'), std::string::npos);
}

TEST(Csv, DoublesRoundTrip) {
  MetricsRow row;
  row.grad_norm_sq = 1.0 / 3.0;
  row.lower_gap = 6.02214076e23;
  row.u_gap = 5e-324;
  const std::string line = csv_line(row);
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) cols.push_back(f);
  EXPECT_EQ(std::stod(cols[3]), *row.grad_norm_sq);
  EXPECT_EQ(std::stod(cols[4]), *row.lower_gap);
}

TEST(Csv, WallClockOnlyWhenTimed) {
  auto c = base_config();
  auto r = run_experiment(spec_from_config(c));
  for (const auto& row : r.rows) EXPECT_FALSE(row.wall_ms.has_value());
  c.set("run.timing", "true");
  r = run_experiment(spec_from_config(c));
  for (const auto& row : r.rows) EXPECT_TRUE(row.wall_ms.has_value());
}

TEST(Csv, ColumnsFollowAlgorithm) {
  auto c = base_config();
  const auto fedbio = run_experiment(spec_from_config(c)).rows.back();
  EXPECT_FALSE(fedbio.alpha.has_value());
  EXPECT_TRUE(fedbio.u_gap.has_value());
  EXPECT_FALSE(fedbio.val_error.has_value());
  c.set("algo.kind", "fedbioacc");
  const auto acc = run_experiment(spec_from_config(c)).rows.back();
  EXPECT_TRUE(acc.alpha.has_value());
}

TEST(AtomicWrite, WritesAndReplaces) {
  const auto path = scratch("atomic.csv");
  write_file_atomic(path.string(), "first\n");
  EXPECT_EQ(slurp(path), "first\n");
  write_file_atomic(path.string(), "second\n");
  EXPECT_EQ(slurp(path), "second\n");
  fs::path tmp = path;
  tmp += ".tmp";
  EXPECT_FALSE(fs::exists(tmp));
  EXPECT_THROW(write_file_atomic("/nonexistent/dir/out.csv", "x"), std::runtime_error);
}

// ---------------------------------------------------------------- complexity

TEST(Complexity, PerStepOracleCounts) {
  auto c = base_config();
  c.set("federation.rounds", "4");
  const int steps = 4 * 2;
  auto r = run_experiment(spec_from_config(c));
  auto s = complexity_counters(r, {});
  EXPECT_EQ(s.grad_f_x, steps);
  EXPECT_EQ(s.grad_f_y, steps);
  EXPECT_EQ(s.grad_g_y, steps);
  EXPECT_EQ(s.jvp, steps);
  EXPECT_EQ(s.hvp, steps);

  // Old and new point per step, plus one evaluation of each at init.
  c.set("algo.kind", "fedbioacc");
  r = run_experiment(spec_from_config(c));
  s = complexity_counters(r, {});
  EXPECT_EQ(s.grad_f_x, 2 * steps + 1);
  EXPECT_EQ(s.grad_f_y, 2 * steps + 1);
  EXPECT_EQ(s.grad_g_y, 2 * steps + 1);
  EXPECT_EQ(s.jvp, 2 * steps + 1);
  EXPECT_EQ(s.hvp, 2 * steps + 1);

  c.set("algo.kind", "fedavg");
  r = run_experiment(spec_from_config(c));
  s = complexity_counters(r, {});
  EXPECT_EQ(s.grad_g_y, steps);
  EXPECT_EQ(s.grad_f_x, 0);
}

TEST(Complexity, RoundsToEpsilon) {
  ExperimentResult r;
  r.M = 1;
  // grad_norm_sq = 1 / round^2: quadrupling eps halves the rounds needed.
  for (int k = 1; k <= 4096; ++k) {
    MetricsRow row;
    row.round = k;
    row.grad_norm_sq = 1.0 / (double(k) * k);
    r.rows.push_back(row);
  }
  const std::vector<double> eps = {1e-6, 4e-6, 1.6e-5, 6.4e-5, 1e-9};
  const auto s = complexity_counters(r, eps);
  ASSERT_EQ(s.rounds_to_eps.size(), eps.size());
  for (std::size_t i = 0; i + 2 < eps.size(); ++i) {
    const double ratio = double(*s.rounds_to_eps[i].second) / *s.rounds_to_eps[i + 1].second;
    EXPECT_NEAR(ratio, 2.0, 0.01);
  }
  EXPECT_EQ(*s.rounds_to_eps[0].second, 1000);
  EXPECT_FALSE(s.rounds_to_eps.back().second.has_value());
  EXPECT_THROW(complexity_counters(ExperimentResult{}, eps), std::invalid_argument);
}

// ---------------------------------------------------------------- sweeps

TEST(Sweep, OneLabelledTracePerValue) {
  auto c = base_config();
  c.set("problem.zeta", "1.0");
  const auto runs = run_sweep(c, "federation.I", {"1", "5", "10"}, 2);
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_EQ(runs[0].label, "federation.I=1");
  EXPECT_EQ(runs[2].label, "federation.I=10");
  EXPECT_EQ(runs[1].result.rows.back().iter, 25);
  std::ostringstream out;
  write_sweep_csv(runs, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, std::string("sweep,") + kCsvHeader);
  int n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.rfind("federation.I=", 0), 0u);
    ++n;
  }
  EXPECT_EQ(n, 3 * 6);
  EXPECT_THROW(run_sweep(c, "federation.I", {}), ConfigError);
}

// ---------------------------------------------------------------- head to head

TEST(HeadToHead, DeterministicQuadraticAtTheoremSteps) {
  // sigma = 0: the momentum corrections vanish and FedBiOAcc differs from
  // FedBiO only through alpha_t < 1, so the two finish nearly level.
  auto c = Config::parse(R"(
[problem]
family = quadratic
seed = 11
zeta = 0
sigma = 0
[algo]
b = 1000
[federation]
M = 4
I = 5
rounds = 200
seed = 11
[run]
eval_every = 200
)");
  c.set("algo.kind", "fedbio");
  const double fedbio = *run_experiment(spec_from_config(c)).rows.back().grad_norm_sq;
  c.set("algo.kind", "fedbioacc");
  const double acc = *run_experiment(spec_from_config(c)).rows.back().grad_norm_sq;
  EXPECT_LE(acc, 1.01 * fedbio);
  EXPECT_LE(acc, 1e-5);
}

TEST(HeadToHead, NoisyLabelsHurtFedAvg) {
  auto c = Config::parse(R"(
[problem]
family = data_cleaning
seed = 1
rho = 0.95
[algo]
b = 8
[federation]
M = 10
I = 5
rounds = 200
seed = 1
[run]
eval_every = 200
)");
  c.set("algo.kind", "fedavg");
  const double fedavg = *run_experiment(spec_from_config(c)).rows.back().val_error;
  c.set("algo.kind", "fedbioacc");
  const double acc = *run_experiment(spec_from_config(c)).rows.back().val_error;
  EXPECT_GE(fedavg, acc);
}
