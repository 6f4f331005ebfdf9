#pragma once

// Oracle-agreement checks run by `fedbio verify` and by the test suites.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedbio/hypergrad.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// grad h for a shared quadratic lower from dense factorizations:
///   mean_m (grad_x f^(m) - Jbar Hbar^{-1} grad_y f^(m)) at y_x.
/// Throws std::invalid_argument unless every client has a quadratic lower.
Vector closed_form_quadratic_hypergradient(const ProblemSet& set, const Vector& x);

/// grad h through the federated quadratic subproblem: full-batch gradient
/// descent on l(u) = mean_m [1/2 u^T H_m u - grad_y f^(m)^T u] at y_x, then
/// mean_m assemble_client_direction(u).
Vector subproblem_pathway_hypergradient(const ProblemSet& set, const Vector& x,
                                        double tol = 1e-14, int max_iter = 200000);

struct NeumannSweepRow {
  int Q = 0;
  std::size_t client = 0;
  double bias = 0.0;
  double G1 = 0.0;
  std::optional<double> ratio;  // bias(Q+1) / bias(Q)
  double expected_ratio = 0.0;  // 1 - tau * mu
};

/// Per-client bias of the full-batch Neumann estimator against the client's
/// exact local implicit gradient at (x, y), for each Q in `qs`.
std::vector<NeumannSweepRow> neumann_bias_sweep(const ProblemSet& set, const Vector& x,
                                                const Vector& y, double tau,
                                                const std::vector<int>& qs);

/// Exact hypergradient vs closed form (1e-10) and central differences (1e-5).
CheckResult check_fd_agreement(const ProblemSet& set, const Vector& x,
                               const std::string& label);

/// Measured bias <= G1 and decay ratio within 10% of 1 - tau * mu.
CheckResult check_neumann_bias(const std::vector<NeumannSweepRow>& rows);

/// ||naive average - grad h|| >= 0.1 ||grad h|| and the subproblem pathway
/// recovers grad h to 1e-8.
CheckResult check_naive_averaging_bias(const ProblemSet& set, const Vector& x);

/// The heterogeneous instance used to exhibit naive-averaging bias.
ProblemSet naive_bias_instance(std::uint64_t seed = 3);

struct VerifyOptions {
  std::vector<int> q_sweep = {0, 5, 10, 20};
  std::uint64_t seed = 1;
  int fd_instances = 5;
};

/// Runs the suites, printing the Neumann table and one line per check.
std::vector<CheckResult> run_verification(const VerifyOptions& opts, std::ostream& out);

}  // namespace fedbio
