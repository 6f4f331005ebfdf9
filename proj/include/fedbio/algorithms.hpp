#pragma once

// Per-client local-step kernels of the federated bilevel algorithms.
//
// Kernels are pure state -> state functions. All randomness comes from the
// RngStream passed in, so a client step is reproducible regardless of which
// thread runs it or in which order.

#include <cstdint>
#include <string>

#include "fedbio/hypergrad.hpp"
#include "fedbio/numerics.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {

enum class AlgoKind { FedBiO, FedBiOAcc, FedBiOLocal, FedBiOAccLocal, FedAvg };

std::string to_string(AlgoKind kind);
/// Accepts "fedbio", "fedbioacc", "fedbio_local", "fedbioacc_local", "fedavg".
AlgoKind parse_algo(const std::string& name);

/// Local variants solve per-client lower problems.
bool is_local(AlgoKind kind);
/// Whether the step size follows the alpha_t schedule (momentum methods).
bool uses_schedule(AlgoKind kind);

struct Schedule {
  double delta = 1.0;
  double u0 = 0.0;
};

/// alpha_t = delta / (u0 + t)^(1/3), t >= 1.
double alpha(const Schedule& schedule, std::int64_t t);

struct HyperParams {
  // Step sizes. The momentum methods scale them by alpha_t; FedBiO,
  // FedBiO-Local and FedAvg use them as fixed rates.
  double eta = 0.01;
  double gamma = 0.05;
  double tau = 0.05;
  double c_nu = 1.0;
  double c_omega = 1.0;
  double c_u = 1.0;
  double r = 1.0;
  int I = 1;
  std::size_t b = 1;
  std::size_t b1 = 1;
  Schedule schedule;
  NeumannParams neumann;
  // Alg. 4 carries an update of u driven by a q that is never refreshed.
  // Off by default; when on, the update runs but cannot change anything.
  bool literal_u_update = false;
  // Accepted for the data-cleaning preset; no algorithm reads them.
  double c_eta = 0.0;
  double c_gamma = 0.0;

  /// Throws std::invalid_argument on non-positive sizes/steps or I < 1.
  void validate() const;
};

/// Momentum constants, projection radius and first batch from the
/// convergence theorem; step sizes and schedule as documented in README.
HyperParams default_hyperparams(const ProblemConstants& constants, int M, std::size_t b, int I);

/// default_hyperparams overlaid with the per-family experiment settings
/// (data_cleaning, hyperrep); other families get the defaults unchanged.
HyperParams preset_hyperparams(const std::string& family, AlgoKind kind,
                               const ProblemConstants& constants, int M, std::size_t b, int I);

struct OracleCounts {
  std::uint64_t grad_f_x = 0;
  std::uint64_t grad_f_y = 0;
  std::uint64_t grad_g_y = 0;
  std::uint64_t hvp = 0;
  std::uint64_t jvp = 0;
  std::uint64_t samples = 0;

  OracleCounts& operator+=(const OracleCounts& o);
};

struct ClientState {
  Vector x;
  Vector y;
  Vector u;
  Vector nu;
  Vector omega;
  Vector q;
  // Point before the last advance; read by the two-phase local kernel.
  Vector x_prev;
  Vector y_prev;
  std::int64_t t = 1;
  OracleCounts counts;
  std::uint64_t clamp_warnings = 0;
};

/// Fresh state at (x0, y0) with u = 0 and zero momenta.
ClientState initial_state(const Vector& x0, const Vector& y0);

// Minibatch tags below the per-step stream.
namespace batch_tag {
inline constexpr std::uint64_t kY = 1;
inline constexpr std::uint64_t kF1 = 2;
inline constexpr std::uint64_t kG1 = 3;
inline constexpr std::uint64_t kF2 = 4;
inline constexpr std::uint64_t kG2 = 5;
inline constexpr std::uint64_t kNeumann = 6;
}  // namespace batch_tag

/// 1 - c * alpha^2, clamped at zero. A clamp increments `warnings`.
double momentum_weight(double c, double a, std::uint64_t& warnings);

/// Momenta at the shared initial point from batches of size b1.
/// Global-lower methods fill omega, nu and q; local ones omega and nu.
ClientState init_momenta(ClientState state, const ClientProblem& problem, const HyperParams& hp,
                         AlgoKind kind, const RngStream& stream);

/// FedBiOAcc: variable step on the current momenta, then STORM refresh of
/// omega, nu and q, each fresh/old pair sharing one minibatch.
ClientState fedbioacc_local_step(ClientState state, const ClientProblem& problem,
                                 const HyperParams& hp, const RngStream& stream);

/// FedBiO: plain stochastic steps in y, x and u.
ClientState fedbio_local_step(ClientState state, const ClientProblem& problem,
                              const HyperParams& hp, const RngStream& stream);

/// FedBiO-Local: y step on grad_y g, x step on the Neumann estimate.
ClientState fedbio_locallower_step(ClientState state, const ClientProblem& problem,
                                   const HyperParams& hp, const RngStream& stream);

/// FedBiOAcc-Local splits at the averaging of x: the variables move first,
/// then momenta are refreshed at the (possibly averaged) new point against
/// the previous one.
ClientState fedbioacc_locallower_advance(ClientState state, const HyperParams& hp);
ClientState fedbioacc_locallower_refresh(ClientState state, const ClientProblem& problem,
                                         const HyperParams& hp, const RngStream& stream);
/// advance + refresh, for steps without synchronization.
ClientState fedbioacc_locallower_step(ClientState state, const ClientProblem& problem,
                                      const HyperParams& hp, const RngStream& stream);

/// One SGD step on the lower (training) objective at fixed x, step gamma.
ClientState fedavg_step(ClientState state, const ClientProblem& problem, const HyperParams& hp,
                        const RngStream& stream);

}  // namespace fedbio
