#pragma once

// Deterministic client/server simulator.
//
// A round runs I local steps on each sampled client, then averages the
// algorithm's synchronized vectors over the sampled clients and broadcasts
// the mean to every client. Client phases may run on several threads; every
// client step draws from its own keyed stream, so results do not depend on
// the thread count.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fedbio/algorithms.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {

struct FederationConfig {
  int M = 4;
  int I = 1;
  int rounds = 10;
  int clients_per_round = 0;  // S; 0 means M
  std::uint64_t seed = 0;
  AlgoKind algo = AlgoKind::FedBiOAcc;
  // Every client draws from client 0's streams (homogeneity experiments).
  bool shared_client_streams = false;
  // FedBiOAcc only: averaging omega, nu and q at sync. Off only for ablation.
  bool average_momenta = true;
  int threads = 1;

  int S() const { return clients_per_round == 0 ? M : clients_per_round; }
  void validate() const;
};

/// Bit flags naming the vectors averaged at a sync.
namespace sync_field {
inline constexpr unsigned kX = 1;
inline constexpr unsigned kY = 2;
inline constexpr unsigned kU = 4;
inline constexpr unsigned kNu = 8;
inline constexpr unsigned kOmega = 16;
inline constexpr unsigned kQ = 32;
}  // namespace sync_field

/// Vectors averaged at each sync. FedBiOAcc-Local averages x before its
/// momentum refresh and nu after it; both are included here.
unsigned sync_fields(AlgoKind kind, bool average_momenta = true);

/// Scalars in one upload (or one download) of the given field set.
std::uint64_t exchange_size(unsigned fields, Index p, Index d);

/// Uniform sample of S distinct client ids without replacement, sorted
/// ascending. Deterministic in (seed, round).
std::vector<int> sample_clients(const FederationConfig& cfg, int round_idx);

struct ServerState {
  Vector x;
  Vector y;
  Vector u;
  Vector nu;
  Vector omega;
  Vector q;
  int round = 0;
  std::int64_t t = 1;  // next local step index
  std::uint64_t comm_scalars = 0;
  std::uint64_t samples_total = 0;
  std::uint64_t clamp_warnings = 0;
  OracleCounts counts;  // summed over clients
};

struct MetricsRow {
  std::int64_t round = 0;
  std::int64_t iter = 0;
  std::optional<double> alpha;
  std::optional<double> grad_norm_sq;
  std::optional<double> lower_gap;
  std::optional<double> u_gap;
  std::optional<double> val_error;
  std::uint64_t comm_scalars = 0;
  std::uint64_t samples_per_client = 0;
  std::optional<std::int64_t> wall_ms;
};

class Federation {
 public:
  /// Initializes all clients at (x0, y0) and, for the momentum methods,
  /// their momenta from a first batch of size hp.b1.
  Federation(const ProblemSet& set, const FederationConfig& cfg, const HyperParams& hp);

  void run_round();

  const ServerState& server() const { return server_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const FederationConfig& config() const { return cfg_; }
  const HyperParams& hyperparams() const { return hp_; }
  const ProblemSet& problems() const { return set_; }

  /// Exact-oracle metrics at the current client means.
  MetricsRow evaluate() const;

 private:
  RngStream step_stream(int client, std::int64_t t) const;
  void local_phase(const std::vector<int>& sampled);
  void refresh_phase(const std::vector<int>& sampled);
  void synchronize(const std::vector<int>& sampled, unsigned fields);
  void update_server();

  ProblemSet set_;
  FederationConfig cfg_;
  HyperParams hp_;
  std::vector<ClientState> clients_;
  ServerState server_;
};

/// Runs fn(i) for i in [0, n) on up to `threads` threads. Exceptions are
/// rethrown on the caller, lowest index first.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace fedbio
