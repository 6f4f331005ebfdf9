#pragma once

// Stochastic hypergradient building blocks shared by the algorithms, plus a
// finite-difference oracle for validation.

#include <functional>
#include <vector>

#include "fedbio/numerics.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {

/// Truncated Neumann series for the inverse lower Hessian:
///   H^{-1} ~= tau * sum_{k=0}^{Q} (I - tau H)^k.
struct NeumannParams {
  int Q = 10;
  double tau = 0.1;
};

/// Throws std::invalid_argument unless Q >= 0 and 0 < tau < 1/L.
void validate_neumann(const NeumannParams& params, const ProblemConstants& constants);

/// Bias (G1) and variance (G2^2) bounds of the Neumann estimator.
struct BiasBound {
  double G1 = 0.0;
  double G2_sq = 0.0;
};

BiasBound neumann_bias_bound(const ProblemConstants& constants, const NeumannParams& params,
                             std::size_t batch_size);

/// Mutually independent sub-batches of one Neumann estimate: xi_f feeds both
/// upper gradients, xi_g the JVP, and hessian[j-1] the j-th HVP factor.
struct NeumannBatches {
  Batch f;
  Batch g;
  std::vector<Batch> hessian;

  static NeumannBatches full(int Q);
  static NeumannBatches draw(const ClientProblem& problem, int Q, std::size_t batch_size,
                             const RngStream& stream);
};

/// Neumann-series estimate of the local hypergradient
///   grad_x f - tau * JVP( sum_{q=-1}^{Q-1} prod_{j=Q-q}^{Q} (I - tau H_j) grad_y f ),
/// the empty product at q = -1 being the identity. Uses exactly Q HVPs.
Vector neumann_hypergrad(const ClientProblem& problem, const Vector& x, const Vector& y,
                         const NeumannParams& params, const NeumannBatches& batches);

/// grad_x f^(m)(x, y; f_batch) - JVP(x, y; g_batch) u.
Vector assemble_client_direction(const ClientProblem& problem, const Vector& x, const Vector& y,
                                 const Vector& u, const Batch& f_batch, const Batch& g_batch);

/// Gradient of the quadratic subproblem l(u):
///   HVP(x, y; g_batch) u - grad_y f^(m)(x, y; f_batch).
Vector quadratic_subproblem_grad(const ClientProblem& problem, const Vector& x, const Vector& y,
                                 const Vector& u, const Batch& g_batch, const Batch& f_batch);

inline constexpr double kFiniteDiffStep = 1e-5;

/// Central differences of a scalar function, coordinate by coordinate.
Vector central_difference(const std::function<double(const Vector&)>& fn, const Vector& x,
                          double step = kFiniteDiffStep);

/// Central-difference gradient of h(x) = 1/M sum_m f^(m)(x, y_x^(m)); every
/// evaluation re-solves the lower problem(s).
Vector finite_diff_hypergrad(const ProblemSet& set, const Vector& x,
                             double step = kFiniteDiffStep);

/// Average of the clients' local implicit gradients Phi^(m)(x, y_x) at the
/// shared lower solution. Differs from grad h(x) under heterogeneity.
Vector naive_averaged_hypergradient(const ProblemSet& set, const Vector& x);

/// Relative error ||a - b|| / max(||b||, floor).
double relative_error(const Vector& a, const Vector& b, double floor = 1e-300);

}  // namespace fedbio
