#pragma once

// Experiment orchestration: config -> problem -> federation -> metrics trace.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedbio/algorithms.hpp"
#include "fedbio/config.hpp"
#include "fedbio/federation.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {

struct ProblemSpec {
  std::string family = "quadratic";
  QuadraticConfig quadratic;
  DataCleaningConfig cleaning;
  HyperRepConfig hyperrep;
  std::string load_path;  // replay a saved problem instead of generating
  std::string save_path;  // save the generated problem
};

struct ExperimentSpec {
  ProblemSpec problem;
  FederationConfig federation;
  std::size_t b = 1;
  // Raw algo.* settings applied on top of the family preset.
  std::map<std::string, std::string> algo_overrides;
  int eval_every = 1;
  bool timing = false;
};

/// Builds a spec, rejecting unknown keys and keys that do not apply to the
/// chosen problem family. Errors are ConfigError naming the key.
ExperimentSpec spec_from_config(const Config& cfg);

ProblemSet build_problem(const ExperimentSpec& spec);
HyperParams build_hyperparams(const ExperimentSpec& spec, const ProblemSet& set);

struct ExperimentResult {
  std::vector<MetricsRow> rows;
  HyperParams hp;
  OracleCounts counts;  // summed over clients
  std::uint64_t clamp_warnings = 0;
  int M = 0;
};

/// Evaluates at round 0, every eval_every rounds and after the last round.
ExperimentResult run_experiment(const ExperimentSpec& spec);
ExperimentResult run_experiment(const ExperimentSpec& spec, const ProblemSet& set);

inline constexpr const char* kCsvHeader =
    "round,iter,alpha,grad_norm_sq,lower_gap,u_gap,val_error,comm_scalars,samples_per_client,"
    "wall_ms";

/// Header plus one LF-terminated line per row; absent values are empty.
void write_csv(const std::vector<MetricsRow>& rows, std::ostream& out);
std::string csv_line(const MetricsRow& row);

/// Writes `content` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& content);

struct ComplexitySummary {
  // Per-client oracle calls over the whole run.
  double grad_f_x = 0;
  double grad_f_y = 0;
  double grad_g_y = 0;
  double jvp = 0;
  double hvp = 0;
  double samples = 0;
  // First evaluated round with grad_norm_sq <= eps; absent if never.
  std::vector<std::pair<double, std::optional<std::int64_t>>> rounds_to_eps;
};

ComplexitySummary complexity_counters(const ExperimentResult& result,
                                      const std::vector<double>& eps);

struct SweepRun {
  std::string label;  // "key=value"
  ExperimentResult result;
};

/// One experiment per value of `key`, everything else from `base`.
std::vector<SweepRun> run_sweep(const Config& base, const std::string& key,
                                const std::vector<std::string>& values, int threads = 1);

/// The run CSV with a leading `sweep` column holding each row's label.
void write_sweep_csv(const std::vector<SweepRun>& runs, std::ostream& out);

}  // namespace fedbio
