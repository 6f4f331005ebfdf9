#include "fedbio/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fedbio {
namespace {

// Counting wrapper around one client's oracles.
class Oracle {
 public:
  Oracle(const ClientProblem& p, OracleCounts& c) : p_(p), c_(c) {}

  Batch draw(Level level, std::size_t size, const RngStream& stream) {
    c_.samples += size;
    return p_.draw(level, size, stream);
  }
  Vector gy(const Vector& x, const Vector& y, const Batch& b) {
    ++c_.grad_g_y;
    return p_.grad_g_y(x, y, b);
  }
  Vector direction(const Vector& x, const Vector& y, const Vector& u, const Batch& f,
                   const Batch& g) {
    ++c_.grad_f_x;
    ++c_.jvp;
    return assemble_client_direction(p_, x, y, u, f, g);
  }
  Vector subproblem(const Vector& x, const Vector& y, const Vector& u, const Batch& g,
                    const Batch& f) {
    ++c_.hvp;
    ++c_.grad_f_y;
    return quadratic_subproblem_grad(p_, x, y, u, g, f);
  }
  NeumannBatches neumann_batches(int Q, std::size_t size, const RngStream& stream) {
    c_.samples += size * static_cast<std::size_t>(Q + 2);
    return NeumannBatches::draw(p_, Q, size, stream);
  }
  Vector neumann(const Vector& x, const Vector& y, const NeumannParams& np,
                 const NeumannBatches& b) {
    ++c_.grad_f_x;
    ++c_.grad_f_y;
    ++c_.jvp;
    c_.hvp += static_cast<std::uint64_t>(np.Q);
    return neumann_hypergrad(p_, x, y, np, b);
  }

 private:
  const ClientProblem& p_;
  OracleCounts& c_;
};

// fresh + w * (old_momentum - fresh_at_old_point); w == 0 returns fresh as is.
Vector storm(Vector fresh, double w, const Vector& momentum, const Vector& fresh_old) {
  if (w != 0.0) fresh += w * (momentum - fresh_old);
  return fresh;
}

struct StepBatches {
  Batch y, f1, g1, f2, g2;
};

StepBatches draw_step_batches(Oracle& o, std::size_t b, const RngStream& s) {
  StepBatches sb;
  sb.y = o.draw(Level::Lower, b, s.child(batch_tag::kY));
  sb.f1 = o.draw(Level::Upper, b, s.child(batch_tag::kF1));
  sb.g1 = o.draw(Level::Lower, b, s.child(batch_tag::kG1));
  sb.f2 = o.draw(Level::Upper, b, s.child(batch_tag::kF2));
  sb.g2 = o.draw(Level::Lower, b, s.child(batch_tag::kG2));
  return sb;
}

void require_finite(const ClientState& s) {
  if (!all_finite(s.x) || !all_finite(s.y) || !all_finite(s.u) || !all_finite(s.nu) ||
      !all_finite(s.omega) || !all_finite(s.q)) {
    throw std::runtime_error("client state became non-finite at t = " + std::to_string(s.t) +
                             "; try smaller algo.eta / algo.gamma");
  }
}

}  // namespace

std::string to_string(AlgoKind kind) {
  switch (kind) {
    case AlgoKind::FedBiO: return "fedbio";
    case AlgoKind::FedBiOAcc: return "fedbioacc";
    case AlgoKind::FedBiOLocal: return "fedbio_local";
    case AlgoKind::FedBiOAccLocal: return "fedbioacc_local";
    case AlgoKind::FedAvg: return "fedavg";
  }
  return "?";
}

AlgoKind parse_algo(const std::string& name) {
  for (auto k : {AlgoKind::FedBiO, AlgoKind::FedBiOAcc, AlgoKind::FedBiOLocal,
                 AlgoKind::FedBiOAccLocal, AlgoKind::FedAvg}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown algorithm '" + name + "'");
}

bool is_local(AlgoKind kind) {
  return kind == AlgoKind::FedBiOLocal || kind == AlgoKind::FedBiOAccLocal;
}

bool uses_schedule(AlgoKind kind) {
  return kind == AlgoKind::FedBiOAcc || kind == AlgoKind::FedBiOAccLocal;
}

double alpha(const Schedule& schedule, std::int64_t t) {
  const double base = schedule.u0 + static_cast<double>(t);
  if (!(base > 0.0)) throw std::invalid_argument("alpha: u0 + t must be > 0");
  return schedule.delta / std::cbrt(base);
}

void HyperParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("hyperparameter ") + name + " must be >= 0");
    }
  };
  positive(eta, "eta");
  positive(gamma, "gamma");
  positive(tau, "tau");
  positive(c_nu, "c_nu");
  positive(c_omega, "c_omega");
  positive(c_u, "c_u");
  if (!(r > 0.0)) throw std::invalid_argument("hyperparameter r must be > 0");
  if (I < 1) throw std::invalid_argument("hyperparameter I must be >= 1");
  if (b < 1 || b1 < 1) throw std::invalid_argument("batch sizes must be >= 1");
  if (neumann.Q < 0) throw std::invalid_argument("Neumann Q must be >= 0");
  if (!(neumann.tau > 0.0)) throw std::invalid_argument("Neumann tau must be > 0");
}

HyperParams default_hyperparams(const ProblemConstants& k, int M, std::size_t b, int I) {
  if (M < 1 || b < 1 || I < 1) throw std::invalid_argument("default_hyperparams: M, b, I >= 1");
  const double bm = static_cast<double>(b) * M;
  HyperParams hp;
  hp.I = I;
  hp.b = b;
  hp.b1 = static_cast<std::size_t>(I) * b;
  hp.c_nu = 64.0 / (9.0 * bm) + 2.0 / (3.0 * bm * bm);
  hp.c_omega = 48.0 * 48.0 / (bm * k.mu * k.mu) + 2.0 / (3.0 * bm * bm);
  hp.c_u = hp.c_omega;
  hp.r = k.C_f / k.mu;

  hp.gamma = 0.5 * std::min(1.0 / (2.0 * k.L), 1.0);
  hp.tau = 0.5 * std::min(1.0 / (2.0 * k.L), 0.5);
  hp.eta = 0.5 * std::min(k.mu * hp.gamma, 1.0);

  // alpha_1 is the largest value keeping c * alpha_t^2 <= 1; the offset keeps
  // the same I^3 kappa^2 and c^(3/2) shape as the theorem.
  const double c_max = std::max({hp.c_nu, hp.c_omega, hp.c_u});
  const double alpha1 = std::min(1.0, 1.0 / std::sqrt(c_max));
  const double i3 = static_cast<double>(I) * I * I;
  hp.schedule.u0 = std::max({2.0, 256.0 * i3 * k.kappa * k.kappa, std::pow(c_max, 1.5)});
  hp.schedule.delta = alpha1 * std::cbrt(hp.schedule.u0 + 1.0);
  // Rounding in delta / cbrt can leave c * alpha_1^2 a few ulps above 1.
  for (double a = alpha(hp.schedule, 1); 1.0 - c_max * a * a < 0.0; a = alpha(hp.schedule, 1)) {
    hp.schedule.delta = std::nextafter(hp.schedule.delta, 0.0);
  }

  hp.neumann.Q = 10;
  hp.neumann.tau = 0.5 / k.L;
  return hp;
}

HyperParams preset_hyperparams(const std::string& family, AlgoKind kind,
                               const ProblemConstants& k, int M, std::size_t b, int I) {
  HyperParams hp = default_hyperparams(k, M, b, I);
  if (family == "data_cleaning") {
    if (kind == AlgoKind::FedBiOAcc) {
      hp.schedule = {30.0, 10000.0};
      hp.tau = 0.01;
      hp.eta = 200.0;
      hp.gamma = 1.0;
      hp.c_eta = 0.2;
      hp.c_gamma = 0.2;
      hp.c_nu = hp.c_omega = hp.c_u = 0.2;
    } else if (kind == AlgoKind::FedBiO) {
      hp.gamma = 0.5;
      hp.eta = 1000.0;
      hp.tau = 0.01;
    } else if (kind == AlgoKind::FedAvg) {
      hp.gamma = 0.5;
    }
  } else if (family == "hyperrep") {
    if (kind == AlgoKind::FedBiOAccLocal || kind == AlgoKind::FedBiOAcc) {
      hp.schedule = {2.0, 10000.0};
      hp.tau = 0.5;
      hp.eta = 1.0;
      hp.gamma = 0.4;
    } else {
      hp.gamma = 0.4;
      hp.eta = 1.0;
      hp.tau = 0.5;
    }
  }
  return hp;
}

OracleCounts& OracleCounts::operator+=(const OracleCounts& o) {
  grad_f_x += o.grad_f_x;
  grad_f_y += o.grad_f_y;
  grad_g_y += o.grad_g_y;
  hvp += o.hvp;
  jvp += o.jvp;
  samples += o.samples;
  return *this;
}

ClientState initial_state(const Vector& x0, const Vector& y0) {
  ClientState s;
  s.x = x0;
  s.y = y0;
  s.u = Vector::Zero(y0.size());
  s.nu = Vector::Zero(x0.size());
  s.omega = Vector::Zero(y0.size());
  s.q = Vector::Zero(y0.size());
  s.x_prev = x0;
  s.y_prev = y0;
  return s;
}

double momentum_weight(double c, double a, std::uint64_t& warnings) {
  const double w = 1.0 - c * a * a;
  if (w < 0.0) {
    ++warnings;
    return 0.0;
  }
  return w;
}

ClientState init_momenta(ClientState s, const ClientProblem& problem, const HyperParams& hp,
                         AlgoKind kind, const RngStream& stream) {
  Oracle o(problem, s.counts);
  const Batch by = o.draw(Level::Lower, hp.b1, stream.child(batch_tag::kY));
  s.omega = o.gy(s.x, s.y, by);
  if (is_local(kind)) {
    const auto nb = o.neumann_batches(hp.neumann.Q, hp.b1, stream.child(batch_tag::kNeumann));
    s.nu = o.neumann(s.x, s.y, hp.neumann, nb);
    return s;
  }
  const Batch f1 = o.draw(Level::Upper, hp.b1, stream.child(batch_tag::kF1));
  const Batch g1 = o.draw(Level::Lower, hp.b1, stream.child(batch_tag::kG1));
  const Batch f2 = o.draw(Level::Upper, hp.b1, stream.child(batch_tag::kF2));
  const Batch g2 = o.draw(Level::Lower, hp.b1, stream.child(batch_tag::kG2));
  s.nu = o.direction(s.x, s.y, s.u, f1, g1);
  s.q = o.subproblem(s.x, s.y, s.u, g2, f2);
  return s;
}

ClientState fedbioacc_local_step(ClientState s, const ClientProblem& problem,
                                 const HyperParams& hp, const RngStream& stream) {
  const double a = alpha(hp.schedule, s.t);
  Vector yh = s.y - (hp.gamma * a) * s.omega;
  Vector xh = s.x - (hp.eta * a) * s.nu;
  Vector uh = project_ball(s.u - (hp.tau * a) * s.q, hp.r);

  Oracle o(problem, s.counts);
  const StepBatches sb = draw_step_batches(o, hp.b, stream);
  const double w_omega = momentum_weight(hp.c_omega, a, s.clamp_warnings);
  const double w_nu = momentum_weight(hp.c_nu, a, s.clamp_warnings);
  const double w_u = momentum_weight(hp.c_u, a, s.clamp_warnings);

  s.omega = storm(o.gy(xh, yh, sb.y), w_omega, s.omega, o.gy(s.x, s.y, sb.y));
  s.nu = storm(o.direction(xh, yh, uh, sb.f1, sb.g1), w_nu, s.nu,
               o.direction(s.x, s.y, s.u, sb.f1, sb.g1));
  s.q = storm(o.subproblem(xh, yh, uh, sb.g2, sb.f2), w_u, s.q,
              o.subproblem(s.x, s.y, s.u, sb.g2, sb.f2));
  s.x = std::move(xh);
  s.y = std::move(yh);
  s.u = std::move(uh);
  ++s.t;
  require_finite(s);
  return s;
}

ClientState fedbio_local_step(ClientState s, const ClientProblem& problem, const HyperParams& hp,
                              const RngStream& stream) {
  Oracle o(problem, s.counts);
  const StepBatches sb = draw_step_batches(o, hp.b, stream);
  s.omega = o.gy(s.x, s.y, sb.y);
  s.nu = o.direction(s.x, s.y, s.u, sb.f1, sb.g1);
  // tau * grad_y f + (I - tau H) u, written as u - tau * (H u - grad_y f).
  s.q = o.subproblem(s.x, s.y, s.u, sb.g2, sb.f2);
  s.y -= hp.gamma * s.omega;
  s.x -= hp.eta * s.nu;
  s.u = project_ball(s.u - hp.tau * s.q, hp.r);
  ++s.t;
  require_finite(s);
  return s;
}

ClientState fedbio_locallower_step(ClientState s, const ClientProblem& problem,
                                   const HyperParams& hp, const RngStream& stream) {
  Oracle o(problem, s.counts);
  const Batch by = o.draw(Level::Lower, hp.b, stream.child(batch_tag::kY));
  const auto nb = o.neumann_batches(hp.neumann.Q, hp.b, stream.child(batch_tag::kNeumann));
  s.omega = o.gy(s.x, s.y, by);
  s.nu = o.neumann(s.x, s.y, hp.neumann, nb);
  s.y -= hp.gamma * s.omega;
  s.x -= hp.eta * s.nu;
  ++s.t;
  require_finite(s);
  return s;
}

ClientState fedbioacc_locallower_advance(ClientState s, const HyperParams& hp) {
  const double a = alpha(hp.schedule, s.t);
  s.x_prev = s.x;
  s.y_prev = s.y;
  s.y -= (hp.gamma * a) * s.omega;
  s.x -= (hp.eta * a) * s.nu;
  if (hp.literal_u_update) s.u -= (hp.tau * a) * s.q;
  return s;
}

ClientState fedbioacc_locallower_refresh(ClientState s, const ClientProblem& problem,
                                         const HyperParams& hp, const RngStream& stream) {
  const double a = alpha(hp.schedule, s.t);
  Oracle o(problem, s.counts);
  const Batch by = o.draw(Level::Lower, hp.b, stream.child(batch_tag::kY));
  const auto nb = o.neumann_batches(hp.neumann.Q, hp.b, stream.child(batch_tag::kNeumann));
  const double w_omega = momentum_weight(hp.c_omega, a, s.clamp_warnings);
  const double w_nu = momentum_weight(hp.c_nu, a, s.clamp_warnings);
  s.omega = storm(o.gy(s.x, s.y, by), w_omega, s.omega, o.gy(s.x_prev, s.y_prev, by));
  s.nu = storm(o.neumann(s.x, s.y, hp.neumann, nb), w_nu, s.nu,
               o.neumann(s.x_prev, s.y_prev, hp.neumann, nb));
  ++s.t;
  require_finite(s);
  return s;
}

ClientState fedbioacc_locallower_step(ClientState s, const ClientProblem& problem,
                                      const HyperParams& hp, const RngStream& stream) {
  return fedbioacc_locallower_refresh(fedbioacc_locallower_advance(std::move(s), hp), problem, hp,
                                      stream);
}

ClientState fedavg_step(ClientState s, const ClientProblem& problem, const HyperParams& hp,
                        const RngStream& stream) {
  Oracle o(problem, s.counts);
  const Batch by = o.draw(Level::Lower, hp.b, stream.child(batch_tag::kY));
  s.omega = o.gy(s.x, s.y, by);
  s.y -= hp.gamma * s.omega;
  ++s.t;
  require_finite(s);
  return s;
}

}  // namespace fedbio
