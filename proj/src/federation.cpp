#include "fedbio/federation.hpp"

#include <algorithm>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>

namespace fedbio {
namespace {

Vector* field(ClientState& s, unsigned f) {
  switch (f) {
    case sync_field::kX: return &s.x;
    case sync_field::kY: return &s.y;
    case sync_field::kU: return &s.u;
    case sync_field::kNu: return &s.nu;
    case sync_field::kOmega: return &s.omega;
    case sync_field::kQ: return &s.q;
  }
  throw std::logic_error("bad sync field");
}

Vector* field(ServerState& s, unsigned f) {
  switch (f) {
    case sync_field::kX: return &s.x;
    case sync_field::kY: return &s.y;
    case sync_field::kU: return &s.u;
    case sync_field::kNu: return &s.nu;
    case sync_field::kOmega: return &s.omega;
    case sync_field::kQ: return &s.q;
  }
  throw std::logic_error("bad sync field");
}

constexpr unsigned kAllFields[] = {sync_field::kX,  sync_field::kY,     sync_field::kU,
                                   sync_field::kNu, sync_field::kOmega, sync_field::kQ};

}  // namespace

void FederationConfig::validate() const {
  if (M < 1) throw std::invalid_argument("federation.M must be >= 1");
  if (I < 1) throw std::invalid_argument("federation.I must be >= 1");
  if (rounds < 0) throw std::invalid_argument("federation.rounds must be >= 0");
  if (S() < 1 || S() > M) {
    throw std::invalid_argument("federation.clients_per_round must be in [1, M]");
  }
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

unsigned sync_fields(AlgoKind kind, bool average_momenta) {
  using namespace sync_field;
  switch (kind) {
    case AlgoKind::FedBiOAcc:
      return average_momenta ? (kX | kY | kU | kNu | kOmega | kQ) : (kX | kY | kU);
    case AlgoKind::FedBiO: return kX | kY | kU;
    case AlgoKind::FedBiOLocal: return kX;
    case AlgoKind::FedBiOAccLocal: return average_momenta ? (kX | kNu) : kX;
    case AlgoKind::FedAvg: return kY;
  }
  return 0;
}

std::uint64_t exchange_size(unsigned fields, Index p, Index d) {
  using namespace sync_field;
  std::uint64_t n = 0;
  if (fields & kX) n += static_cast<std::uint64_t>(p);
  if (fields & kNu) n += static_cast<std::uint64_t>(p);
  for (unsigned f : {kY, kU, kOmega, kQ}) {
    if (fields & f) n += static_cast<std::uint64_t>(d);
  }
  return n;
}

std::vector<int> sample_clients(const FederationConfig& cfg, int round_idx) {
  const int M = cfg.M;
  const int S = cfg.S();
  if (S > M) throw std::invalid_argument("sample_clients: S > M");
  if (S < 1) throw std::invalid_argument("sample_clients: no clients sampled");
  std::vector<int> ids(static_cast<std::size_t>(M));
  std::iota(ids.begin(), ids.end(), 0);
  if (S == M) return ids;
  // Partial Fisher-Yates on a per-round stream.
  const RngStream stream(cfg.seed,
                         StreamKey{0, static_cast<std::uint64_t>(round_idx),
                                   purpose::kClientSampling});
  for (int i = 0; i < S; ++i) {
    const auto j = i + static_cast<int>(stream.below(static_cast<std::uint64_t>(i),
                                                     static_cast<std::uint64_t>(M - i)));
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  ids.resize(static_cast<std::size_t>(S));
  std::sort(ids.begin(), ids.end());
  return ids;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

Federation::Federation(const ProblemSet& set, const FederationConfig& cfg, const HyperParams& hp)
    : set_(set), cfg_(cfg), hp_(hp) {
  cfg_.validate();
  hp_.validate();
  if (static_cast<std::size_t>(cfg_.M) != set_.num_clients()) {
    throw std::invalid_argument("federation.M = " + std::to_string(cfg_.M) +
                                " but the problem has " + std::to_string(set_.num_clients()) +
                                " clients");
  }
  if (is_local(cfg_.algo) && set_.lower != LowerLevel::Local) {
    throw std::invalid_argument(to_string(cfg_.algo) + " needs per-client lower problems");
  }
  if (!is_local(cfg_.algo) && cfg_.algo != AlgoKind::FedAvg && set_.lower != LowerLevel::Shared) {
    throw std::invalid_argument(to_string(cfg_.algo) + " needs a shared lower problem");
  }
  if (hp_.I != cfg_.I) throw std::invalid_argument("hyperparameter I differs from federation.I");
  if (is_local(cfg_.algo)) validate_neumann(hp_.neumann, set_.constants);

  clients_.assign(static_cast<std::size_t>(cfg_.M), initial_state(set_.x0, set_.y0));
  if (uses_schedule(cfg_.algo)) {
    parallel_for(clients_.size(), cfg_.threads, [&](std::size_t m) {
      const int sm = cfg_.shared_client_streams ? 0 : static_cast<int>(m);
      const RngStream stream(cfg_.seed,
                             StreamKey{static_cast<std::uint64_t>(sm), 0, purpose::kInit});
      clients_[m] = init_momenta(std::move(clients_[m]), *set_.clients[m], hp_, cfg_.algo, stream);
    });
  }
  update_server();
}

RngStream Federation::step_stream(int client, std::int64_t t) const {
  const int c = cfg_.shared_client_streams ? 0 : client;
  return RngStream(cfg_.seed, StreamKey{static_cast<std::uint64_t>(c),
                                        static_cast<std::uint64_t>(t), purpose::kStep});
}

void Federation::local_phase(const std::vector<int>& sampled) {
  parallel_for(sampled.size(), cfg_.threads, [&](std::size_t k) {
    const int m = sampled[k];
    ClientState s = std::move(clients_[static_cast<std::size_t>(m)]);
    const ClientProblem& p = *set_.clients[static_cast<std::size_t>(m)];
    for (int i = 1; i <= cfg_.I; ++i) {
      const RngStream stream = step_stream(m, s.t);
      switch (cfg_.algo) {
        case AlgoKind::FedBiOAcc: s = fedbioacc_local_step(std::move(s), p, hp_, stream); break;
        case AlgoKind::FedBiO: s = fedbio_local_step(std::move(s), p, hp_, stream); break;
        case AlgoKind::FedBiOLocal:
          s = fedbio_locallower_step(std::move(s), p, hp_, stream);
          break;
        case AlgoKind::FedBiOAccLocal:
          // The last step stops before its refresh; x is averaged in between.
          s = i < cfg_.I ? fedbioacc_locallower_step(std::move(s), p, hp_, stream)
                         : fedbioacc_locallower_advance(std::move(s), hp_);
          break;
        case AlgoKind::FedAvg: s = fedavg_step(std::move(s), p, hp_, stream); break;
      }
    }
    clients_[static_cast<std::size_t>(m)] = std::move(s);
  });
}

void Federation::refresh_phase(const std::vector<int>& sampled) {
  parallel_for(sampled.size(), cfg_.threads, [&](std::size_t k) {
    const auto m = static_cast<std::size_t>(sampled[k]);
    clients_[m] = fedbioacc_locallower_refresh(std::move(clients_[m]), *set_.clients[m], hp_,
                                               step_stream(sampled[k], clients_[m].t));
  });
}

void Federation::synchronize(const std::vector<int>& sampled, unsigned fields) {
  std::vector<const Vector*> parts(sampled.size());
  for (unsigned f : kAllFields) {
    if (!(fields & f)) continue;
    for (std::size_t k = 0; k < sampled.size(); ++k) {
      parts[k] = field(clients_[static_cast<std::size_t>(sampled[k])], f);
    }
    const Vector mean = pairwise_mean(parts);
    for (auto& c : clients_) *field(c, f) = mean;
  }
  const std::uint64_t n = exchange_size(fields, set_.dim_x(), set_.dim_y());
  server_.comm_scalars += n * static_cast<std::uint64_t>(sampled.size()) +
                          n * static_cast<std::uint64_t>(cfg_.M);
}

void Federation::run_round() {
  const auto sampled = sample_clients(cfg_, server_.round);
  const std::int64_t t_end = server_.t + cfg_.I;
  local_phase(sampled);
  if (cfg_.algo == AlgoKind::FedBiOAccLocal) {
    synchronize(sampled, sync_field::kX);
    refresh_phase(sampled);
    if (cfg_.average_momenta) synchronize(sampled, sync_field::kNu);
  } else {
    synchronize(sampled, sync_fields(cfg_.algo, cfg_.average_momenta));
  }
  // Stragglers skip the round; their clocks still advance with the server.
  for (auto& c : clients_) c.t = t_end;
  ++server_.round;
  server_.t = t_end;
  update_server();
}

void Federation::update_server() {
  std::vector<const Vector*> parts(clients_.size());
  for (unsigned f : kAllFields) {
    for (std::size_t m = 0; m < clients_.size(); ++m) parts[m] = field(clients_[m], f);
    *field(server_, f) = pairwise_mean(parts);
  }
  server_.counts = OracleCounts{};
  server_.clamp_warnings = 0;
  for (const auto& c : clients_) {
    server_.counts += c.counts;
    server_.clamp_warnings += c.clamp_warnings;
  }
  server_.samples_total = server_.counts.samples;
}

MetricsRow Federation::evaluate() const {
  MetricsRow row;
  row.round = server_.round;
  row.iter = server_.t - 1;
  if (uses_schedule(cfg_.algo)) row.alpha = alpha(hp_.schedule, server_.t);
  row.comm_scalars = server_.comm_scalars;
  row.samples_per_client = server_.samples_total / static_cast<std::uint64_t>(cfg_.M);

  const Vector& xbar = server_.x;
  std::optional<HypergradResult> exact;
  try {
    exact = exact_hypergradient(set_, xbar);
  } catch (const SolverError&) {
    exact.reset();
  }
  if (exact) {
    row.grad_norm_sq = exact->grad.squaredNorm();
    if (set_.lower == LowerLevel::Shared) {
      row.lower_gap = (server_.y - exact->y_star.front()).squaredNorm();
    } else {
      double gap = 0.0;
      for (std::size_t m = 0; m < clients_.size(); ++m) {
        gap += (clients_[m].y - exact->y_star[m]).squaredNorm();
      }
      row.lower_gap = gap / static_cast<double>(clients_.size());
    }
    if (cfg_.algo == AlgoKind::FedBiO || cfg_.algo == AlgoKind::FedBiOAcc) {
      row.u_gap = (server_.u - exact->u_star.front()).squaredNorm();
    }
  }

  double err = 0.0;
  bool have_err = true;
  for (std::size_t m = 0; m < clients_.size() && have_err; ++m) {
    // The trained model for shared lowers; the fitted local heads otherwise.
    const Vector* y = &server_.y;
    if (set_.lower == LowerLevel::Local) {
      if (!exact) {
        have_err = false;
        break;
      }
      y = &exact->y_star[m];
    }
    const auto e = set_.clients[m]->validation_error(xbar, *y);
    if (!e) {
      have_err = false;
      break;
    }
    err += *e;
  }
  if (have_err) row.val_error = err / static_cast<double>(clients_.size());
  return row;
}

}  // namespace fedbio
