#include "fedbio/hypergrad.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fedbio {
namespace {

// Sub-stream tags for the Neumann sub-batches.
constexpr std::uint64_t kTagF = 1;
constexpr std::uint64_t kTagG = 2;
constexpr std::uint64_t kTagHessianBase = 16;

}  // namespace

void validate_neumann(const NeumannParams& params, const ProblemConstants& constants) {
  if (params.Q < 0) throw std::invalid_argument("Neumann: Q must be >= 0");
  if (!(params.tau > 0.0)) throw std::invalid_argument("Neumann: tau must be > 0");
  if (!(params.tau < 1.0 / constants.L)) {
    throw std::invalid_argument("Neumann: tau = " + std::to_string(params.tau) +
                                " violates tau < 1/L = " + std::to_string(1.0 / constants.L));
  }
}

BiasBound neumann_bias_bound(const ProblemConstants& k, const NeumannParams& params,
                             std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("neumann_bias_bound: batch size must be > 0");
  const double q1 = params.Q + 1.0;
  const double q2 = params.Q + 2.0;
  const double cf2 = k.C_f * k.C_f;
  const double l2 = k.L * k.L;
  const double tau2 = params.tau * params.tau;
  BiasBound bound;
  bound.G1 = k.kappa * std::pow(1.0 - params.tau * k.mu, q1) * k.C_f;
  bound.G2_sq = (2.0 * cf2 + 12.0 * cf2 * l2 * tau2 * q1 * q1 +
                 4.0 * cf2 * l2 * q2 * q1 * q1 * tau2 * tau2 * k.sigma * k.sigma) /
                static_cast<double>(batch_size);
  return bound;
}

NeumannBatches NeumannBatches::full(int Q) {
  NeumannBatches b;
  b.f = Batch::all();
  b.g = Batch::all();
  b.hessian.assign(static_cast<std::size_t>(Q), Batch::all());
  return b;
}

NeumannBatches NeumannBatches::draw(const ClientProblem& problem, int Q,
                                    std::size_t batch_size, const RngStream& stream) {
  NeumannBatches b;
  b.f = problem.draw(Level::Upper, batch_size, stream.child(kTagF));
  b.g = problem.draw(Level::Lower, batch_size, stream.child(kTagG));
  b.hessian.reserve(static_cast<std::size_t>(Q));
  for (int j = 1; j <= Q; ++j) {
    b.hessian.push_back(problem.draw(Level::Lower, batch_size,
                                     stream.child(kTagHessianBase + static_cast<std::uint64_t>(j))));
  }
  return b;
}

Vector neumann_hypergrad(const ClientProblem& problem, const Vector& x, const Vector& y,
                         const NeumannParams& params, const NeumannBatches& batches) {
  if (params.Q < 0 || static_cast<int>(batches.hessian.size()) != params.Q) {
    throw std::invalid_argument("neumann_hypergrad: need exactly Q Hessian batches");
  }
  const Vector v0 = problem.grad_f_y(x, y, batches.f);
  // Running product p_k = (I - tau H_{Q-k+1}) ... (I - tau H_Q) v0; the sum
  // starts with the empty product (identity).
  Vector sum = v0;
  Vector p = v0;
  for (int j = params.Q; j >= 1; --j) {
    p -= params.tau * problem.hvp_gyy(x, y, p, batches.hessian[static_cast<std::size_t>(j - 1)]);
    sum += p;
  }
  return problem.grad_f_x(x, y, batches.f) - params.tau * problem.jvp_gxy(x, y, sum, batches.g);
}

Vector assemble_client_direction(const ClientProblem& problem, const Vector& x, const Vector& y,
                                 const Vector& u, const Batch& f_batch, const Batch& g_batch) {
  if (u.size() != problem.dim_y()) {
    throw std::invalid_argument("assemble_client_direction: u has wrong dimension");
  }
  return problem.grad_f_x(x, y, f_batch) - problem.jvp_gxy(x, y, u, g_batch);
}

Vector quadratic_subproblem_grad(const ClientProblem& problem, const Vector& x, const Vector& y,
                                 const Vector& u, const Batch& g_batch, const Batch& f_batch) {
  if (u.size() != problem.dim_y()) {
    throw std::invalid_argument("quadratic_subproblem_grad: u has wrong dimension");
  }
  return problem.hvp_gyy(x, y, u, g_batch) - problem.grad_f_y(x, y, f_batch);
}

Vector central_difference(const std::function<double(const Vector&)>& fn, const Vector& x,
                          double step) {
  if (!(step > 0.0)) throw std::invalid_argument("central_difference: step must be > 0");
  Vector grad(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = fn(probe);
    probe[i] = x[i] - step;
    const double down = fn(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

Vector finite_diff_hypergrad(const ProblemSet& set, const Vector& x, double step) {
  return central_difference([&](const Vector& z) { return upper_value(set, z); }, x, step);
}

Vector naive_averaged_hypergradient(const ProblemSet& set, const Vector& x) {
  const auto ys = lower_solutions(set, x);
  Vector acc = Vector::Zero(set.dim_x());
  for (std::size_t m = 0; m < set.num_clients(); ++m) {
    acc += local_implicit_gradient(*set.clients[m], x, ys[m]);
  }
  return acc / static_cast<double>(set.num_clients());
}

double relative_error(const Vector& a, const Vector& b, double floor) {
  return (a - b).norm() / std::max(b.norm(), floor);
}

}  // namespace fedbio
