#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fedbio/problems.hpp"

namespace fedbio {
namespace {

constexpr double kStationarity = 1e-10;
constexpr double kNewtonTarget = 1e-12;
constexpr int kNewtonMaxIter = 100;

int cg_cap(Index d) { return static_cast<int>(10 * d); }

// Damped Newton-CG on a strongly convex objective given its value, gradient
// and Hessian-vector product. Returns the minimizer or throws SolverError.
template <typename Value, typename Grad, typename Hvp>
Vector newton_minimize(Vector y, Value&& value, Grad&& grad, Hvp&& hvp) {
  Vector g = grad(y);
  double gnorm = g.norm();
  for (int it = 0; it < kNewtonMaxIter && gnorm > kNewtonTarget; ++it) {
    // Forcing term min(0.1, sqrt(||g||)) gives superlinear convergence.
    const double forcing = std::min(0.1, std::sqrt(gnorm));
    Vector step;
    try {
      step = conjugate_gradient([&](const Vector& v) { return hvp(y, v); }, g,
                                std::max(forcing, 1e-14), cg_cap(y.size()))
                 .solution;
    } catch (const SolverError&) {
      step = g;
    }
    const double f0 = value(y);
    const double slope = -g.dot(step);
    double t = 1.0;
    Vector trial = y - step;
    while (value(trial) > f0 + 1e-4 * t * slope && t > 1e-10) {
      t *= 0.5;
      trial = y - t * step;
    }
    Vector g_trial = grad(trial);
    // Near the optimum the value test is lost in rounding; accept any step
    // that reduces the gradient instead.
    if (t <= 1e-10 && g_trial.norm() >= gnorm) break;
    y = std::move(trial);
    g = std::move(g_trial);
    gnorm = g.norm();
  }
  if (!(gnorm <= kStationarity)) {
    throw SolverError("lower-level solve failed: ||grad_y g|| = " + std::to_string(gnorm));
  }
  return y;
}

bool all_quadratic(const ProblemSet& set) {
  return std::all_of(set.clients.begin(), set.clients.end(),
                     [](const ClientPtr& c) { return c->quadratic_lower().has_value(); });
}

Vector uniform_in_ball(RngCursor& rng, Index dim) {
  Vector dir = rng.normal_vector(dim);
  const double radius = std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
  return dir * (radius / dir.norm());
}

double power_iteration_norm(const LinearOperator& op, Index dim, RngCursor& rng) {
  Vector v = rng.normal_vector(dim);
  v.normalize();
  double estimate = 0.0;
  for (int i = 0; i < 200; ++i) {
    Vector w = op(v);
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    if (std::abs(n - estimate) <= 1e-10 * n) {
      estimate = n;
      break;
    }
    estimate = n;
    v = w / n;
  }
  return estimate;
}

}  // namespace

Vector mean_grad_g_y(const ProblemSet& set, const Vector& x, const Vector& y) {
  Vector acc = Vector::Zero(y.size());
  for (const auto& c : set.clients) acc += c->grad_g_y(x, y);
  return acc / static_cast<double>(set.num_clients());
}

Vector mean_hvp_gyy(const ProblemSet& set, const Vector& x, const Vector& y, const Vector& v) {
  Vector acc = Vector::Zero(v.size());
  for (const auto& c : set.clients) acc += c->hvp_gyy(x, y, v);
  return acc / static_cast<double>(set.num_clients());
}

Vector exact_lower_solution(const ProblemSet& set, const Vector& x) {
  if (set.clients.empty()) throw std::invalid_argument("exact_lower_solution: no clients");
  if (set.num_clients() == 1) return exact_local_lower_solution(*set.clients.front(), x);
  if (all_quadratic(set)) {
    const Index d = set.dim_y();
    Matrix H = Matrix::Zero(d, d);
    Matrix J = Matrix::Zero(set.dim_x(), d);
    Vector b = Vector::Zero(d);
    for (const auto& c : set.clients) {
      const auto q = *c->quadratic_lower();
      H += q.H;
      J += q.J;
      b += q.b;
    }
    const double inv_m = 1.0 / static_cast<double>(set.num_clients());
    H *= inv_m;
    J *= inv_m;
    b *= inv_m;
    const auto ldlt = H.ldlt();
    Vector y = -ldlt.solve(J.transpose() * x + b);
    // One step of iterative refinement against the oracle's own gradient.
    y -= ldlt.solve(mean_grad_g_y(set, x, y));
    const double res = mean_grad_g_y(set, x, y).norm();
    if (!(res <= kStationarity)) {
      throw SolverError("exact_lower_solution: residual " + std::to_string(res));
    }
    return y;
  }
  const double inv_m = 1.0 / static_cast<double>(set.num_clients());
  return newton_minimize(
      Vector::Zero(set.dim_y()),
      [&](const Vector& y) {
        double v = 0.0;
        for (const auto& c : set.clients) v += c->g_value(x, y);
        return v * inv_m;
      },
      [&](const Vector& y) { return mean_grad_g_y(set, x, y); },
      [&](const Vector& y, const Vector& v) { return mean_hvp_gyy(set, x, y, v); });
}

Vector exact_local_lower_solution(const ClientProblem& client, const Vector& x) {
  const auto grad = [&](const Vector& y) { return client.grad_g_y(x, y); };
  const auto hvp = [&](const Vector& y, const Vector& v) { return client.hvp_gyy(x, y, v); };
  if (auto closed = client.lower_closed_form(x)) {
    Vector y = std::move(*closed);
    if (grad(y).norm() <= kStationarity) return y;
    // Refine with Newton steps (exact for quadratic lowers).
    for (int i = 0; i < 3 && grad(y).norm() > kStationarity; ++i) {
      y -= conjugate_gradient([&](const Vector& v) { return hvp(y, v); }, grad(y), 1e-14,
                              cg_cap(y.size()))
               .solution;
    }
    const double res = grad(y).norm();
    if (!(res <= kStationarity)) {
      throw SolverError("exact_local_lower_solution: residual " + std::to_string(res));
    }
    return y;
  }
  return newton_minimize(
      Vector::Zero(client.dim_y()), [&](const Vector& y) { return client.g_value(x, y); }, grad,
      hvp);
}

std::vector<Vector> lower_solutions(const ProblemSet& set, const Vector& x) {
  if (set.lower == LowerLevel::Shared) {
    return std::vector<Vector>(set.num_clients(), exact_lower_solution(set, x));
  }
  std::vector<Vector> out;
  out.reserve(set.num_clients());
  for (const auto& c : set.clients) out.push_back(exact_local_lower_solution(*c, x));
  return out;
}

Vector lower_solution_by_gradient_descent(const ProblemSet& set, const Vector& x, double tol,
                                          int max_iter) {
  const double step = 1.0 / set.constants.L;
  Vector y = Vector::Zero(set.dim_y());
  for (int it = 0; it < max_iter; ++it) {
    const Vector g = mean_grad_g_y(set, x, y);
    if (g.norm() <= tol) return y;
    y -= step * g;
  }
  throw SolverError("lower_solution_by_gradient_descent: iteration cap reached");
}

HypergradResult exact_hypergradient(const ProblemSet& set, const Vector& x) {
  HypergradResult res;
  const std::size_t m_count = set.num_clients();
  const double inv_m = 1.0 / static_cast<double>(m_count);
  res.y_star = lower_solutions(set, x);
  res.grad = Vector::Zero(set.dim_x());
  if (set.lower == LowerLevel::Shared) {
    const Vector& y = res.y_star.front();
    Vector rhs = Vector::Zero(set.dim_y());
    for (const auto& c : set.clients) rhs += c->grad_f_y(x, y);
    rhs *= inv_m;
    auto cg = conjugate_gradient([&](const Vector& v) { return mean_hvp_gyy(set, x, y, v); },
                                 rhs, kCgTolerance, cg_cap(set.dim_y()));
    res.cg_iterations = cg.iterations;
    for (const auto& c : set.clients) {
      res.grad += c->grad_f_x(x, y) - c->jvp_gxy(x, y, cg.solution);
    }
    res.u_star.assign(m_count, cg.solution);
  } else {
    for (std::size_t m = 0; m < m_count; ++m) {
      const auto& c = *set.clients[m];
      const Vector& y = res.y_star[m];
      auto cg = conjugate_gradient([&](const Vector& v) { return c.hvp_gyy(x, y, v); },
                                   c.grad_f_y(x, y), kCgTolerance, cg_cap(set.dim_y()));
      res.cg_iterations += cg.iterations;
      res.grad += c.grad_f_x(x, y) - c.jvp_gxy(x, y, cg.solution);
      res.u_star.push_back(std::move(cg.solution));
    }
  }
  res.grad *= inv_m;
  return res;
}

double upper_value(const ProblemSet& set, const Vector& x) {
  const auto ys = lower_solutions(set, x);
  double total = 0.0;
  for (std::size_t m = 0; m < set.num_clients(); ++m) total += set.clients[m]->f_value(x, ys[m]);
  return total / static_cast<double>(set.num_clients());
}

Vector local_implicit_gradient(const ClientProblem& client, const Vector& x, const Vector& y) {
  auto cg = conjugate_gradient([&](const Vector& v) { return client.hvp_gyy(x, y, v); },
                               client.grad_f_y(x, y), kCgTolerance, cg_cap(client.dim_y()));
  return client.grad_f_x(x, y) - client.jvp_gxy(x, y, cg.solution);
}

ProblemConstants measure_constants(const ProblemSet& set, double sigma, int probes,
                                   std::uint64_t seed) {
  ProblemConstants k;
  k.sigma = sigma;
  RngCursor rng(RngStream(seed, StreamKey{0, 0, purpose::kProbe}));
  double mu = std::numeric_limits<double>::infinity();
  double L = 0.0;
  for (const auto& c : set.clients) {
    if (auto q = c->quadratic_lower()) {
      const Eigen::SelfAdjointEigenSolver<Matrix> eig(q->H);
      mu = std::min(mu, eig.eigenvalues().minCoeff());
      L = std::max(L, eig.eigenvalues().maxCoeff());
      L = std::max(L, Eigen::JacobiSVD<Matrix>(q->J).singularValues()(0));
      // f is quadratic too: its Hessian norm via power iteration on (x, y).
      const Index p = c->dim_x();
      const Index d = c->dim_y();
      const Vector zx = Vector::Zero(p);
      const Vector zy = Vector::Zero(d);
      const auto f_hess = [&](const Vector& v) {
        const Vector vx = v.head(p);
        const Vector vy = v.tail(d);
        Vector out(p + d);
        out.head(p) = c->grad_f_x(vx, vy) - c->grad_f_x(zx, zy);
        out.tail(d) = c->grad_f_y(vx, vy) - c->grad_f_y(zx, zy);
        return out;
      };
      L = std::max(L, power_iteration_norm(f_hess, p + d, rng));
    } else {
      const auto bound = c->strong_convexity_bound();
      if (!bound) throw std::invalid_argument("measure_constants: unknown strong convexity");
      mu = std::min(mu, *bound);
      L = std::max(L, power_iteration_norm(
                          [&](const Vector& v) { return c->hvp_gyy(set.x0, set.y0, v); },
                          c->dim_y(), rng));
    }
  }
  double cf = 0.0;
  const Index p = set.dim_x();
  const Index d = set.dim_y();
  for (int i = 0; i < probes; ++i) {
    const Vector offset = uniform_in_ball(rng, p + d);
    const Vector x = set.x0 + offset.head(p);
    const Vector y = set.y0 + offset.tail(d);
    for (const auto& c : set.clients) {
      const double n =
          std::sqrt(c->grad_f_x(x, y).squaredNorm() + c->grad_f_y(x, y).squaredNorm());
      cf = std::max(cf, n);
    }
  }
  k.mu = mu;
  k.L = std::max(L, mu);
  k.C_f = std::max(cf, 1e-12);
  k.kappa = k.L / k.mu;
  return k;
}

}  // namespace fedbio
