#include "fedbio/verification.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace fedbio {
namespace {

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c);
  return buf;
}

Vector offset_point(const Vector& base, std::uint64_t seed, std::uint64_t tag, double radius) {
  Vector v = gaussian(RngStream(seed, StreamKey{tag, 0, purpose::kProbe}), base.size(), 1.0);
  return base + v * (radius / std::max(v.norm(), 1e-300));
}

}  // namespace

Vector closed_form_quadratic_hypergradient(const ProblemSet& set, const Vector& x) {
  if (set.lower != LowerLevel::Shared) {
    throw std::invalid_argument("closed form needs a shared lower problem");
  }
  const Index d = set.dim_y();
  Matrix H = Matrix::Zero(d, d);
  Matrix J = Matrix::Zero(set.dim_x(), d);
  Vector b = Vector::Zero(d);
  for (const auto& c : set.clients) {
    const auto q = c->quadratic_lower();
    if (!q) throw std::invalid_argument("closed form needs quadratic lower problems");
    H += q->H;
    J += q->J;
    b += q->b;
  }
  const double inv_m = 1.0 / static_cast<double>(set.num_clients());
  H *= inv_m;
  J *= inv_m;
  b *= inv_m;
  const Eigen::PartialPivLU<Matrix> lu(H);
  const Vector y = -lu.solve(J.transpose() * x + b);
  Vector fx = Vector::Zero(set.dim_x());
  Vector fy = Vector::Zero(d);
  for (const auto& c : set.clients) {
    fx += c->grad_f_x(x, y);
    fy += c->grad_f_y(x, y);
  }
  return (fx - J * lu.solve(fy)) * inv_m;
}

Vector subproblem_pathway_hypergradient(const ProblemSet& set, const Vector& x, double tol,
                                        int max_iter) {
  const auto ys = lower_solutions(set, x);
  const double inv_m = 1.0 / static_cast<double>(set.num_clients());
  const double step = 1.0 / set.constants.L;
  Vector u = Vector::Zero(set.dim_y());
  auto grad_l = [&](const Vector& v) {
    Vector g = Vector::Zero(v.size());
    for (std::size_t m = 0; m < set.num_clients(); ++m) {
      g += quadratic_subproblem_grad(*set.clients[m], x, ys[m], v, Batch::all(), Batch::all());
    }
    return Vector(g * inv_m);
  };
  Vector g = grad_l(u);
  const double g0 = std::max(g.norm(), 1e-300);
  int it = 0;
  for (; it < max_iter && g.norm() > tol * g0; ++it) {
    u -= step * g;
    g = grad_l(u);
  }
  if (it == max_iter) throw SolverError("subproblem pathway: gradient descent did not converge");
  Vector out = Vector::Zero(set.dim_x());
  for (std::size_t m = 0; m < set.num_clients(); ++m) {
    out += assemble_client_direction(*set.clients[m], x, ys[m], u, Batch::all(), Batch::all());
  }
  return out * inv_m;
}

std::vector<NeumannSweepRow> neumann_bias_sweep(const ProblemSet& set, const Vector& x,
                                                const Vector& y, double tau,
                                                const std::vector<int>& qs) {
  validate_neumann({0, tau}, set.constants);
  std::vector<NeumannSweepRow> rows;
  for (std::size_t m = 0; m < set.num_clients(); ++m) {
    const auto& c = *set.clients[m];
    const Vector exact = local_implicit_gradient(c, x, y);
    auto bias = [&](int Q) {
      return (neumann_hypergrad(c, x, y, {Q, tau}, NeumannBatches::full(Q)) - exact).norm();
    };
    for (int Q : qs) {
      NeumannSweepRow row;
      row.Q = Q;
      row.client = m;
      row.bias = bias(Q);
      row.G1 = neumann_bias_bound(set.constants, {Q, tau}, 1).G1;
      if (row.bias > 0.0) row.ratio = bias(Q + 1) / row.bias;
      row.expected_ratio = 1.0 - tau * set.constants.mu;
      rows.push_back(row);
    }
  }
  return rows;
}

CheckResult check_fd_agreement(const ProblemSet& set, const Vector& x, const std::string& label) {
  CheckResult r;
  r.name = "fd-agreement " + label;
  const Vector exact = exact_hypergradient(set, x).grad;
  const Vector fd = finite_diff_hypergrad(set, x);
  const double fd_err = relative_error(exact, fd);
  double cf_err = 0.0;
  const bool quadratic = set.lower == LowerLevel::Shared && set.family == "quadratic";
  if (quadratic) cf_err = relative_error(exact, closed_form_quadratic_hypergradient(set, x));
  r.passed = fd_err <= 1e-5 && cf_err <= 1e-10;
  r.detail = quadratic ? fmt("fd rel err %.2e, closed-form rel err %.2e", fd_err, cf_err)
                       : fmt("fd rel err %.2e", fd_err);
  return r;
}

CheckResult check_neumann_bias(const std::vector<NeumannSweepRow>& rows) {
  CheckResult r;
  r.name = "neumann-bias";
  r.passed = !rows.empty();
  double worst_bound = 0.0;
  double worst_ratio = 0.0;
  for (const auto& row : rows) {
    worst_bound = std::max(worst_bound, row.bias / row.G1);
    if (row.bias > row.G1) r.passed = false;
    if (row.ratio) {
      const double dev = std::abs(*row.ratio - row.expected_ratio) / row.expected_ratio;
      worst_ratio = std::max(worst_ratio, dev);
      if (dev > 0.1) r.passed = false;
    }
  }
  r.detail = fmt("max bias/G1 %.3f, max decay-ratio deviation %.3f", worst_bound, worst_ratio);
  return r;
}

CheckResult check_naive_averaging_bias(const ProblemSet& set, const Vector& x) {
  CheckResult r;
  r.name = "naive-averaging-bias";
  const Vector grad = exact_hypergradient(set, x).grad;
  const double gap = (naive_averaged_hypergradient(set, x) - grad).norm() / grad.norm();
  const double pathway = relative_error(subproblem_pathway_hypergradient(set, x), grad);
  r.passed = gap >= 0.1 && pathway <= 1e-8;
  r.detail = fmt("naive rel gap %.3f, subproblem pathway rel err %.2e", gap, pathway);
  return r;
}

ProblemSet naive_bias_instance(std::uint64_t seed) {
  QuadraticConfig cfg;
  cfg.seed = seed;
  cfg.clients = 4;
  cfg.p = 5;
  cfg.d = 5;
  cfg.zeta = 2.0;
  return make_quadratic(cfg);
}

std::vector<CheckResult> run_verification(const VerifyOptions& opts, std::ostream& out) {
  std::vector<CheckResult> results;

  for (int i = 0; i < opts.fd_instances; ++i) {
    QuadraticConfig cfg;
    cfg.seed = opts.seed + static_cast<std::uint64_t>(i);
    cfg.clients = 2 + i % 4;
    cfg.p = 3 + i % 3;
    cfg.d = 4 + i % 4;
    cfg.zeta = 0.5;
    const ProblemSet set = make_quadratic(cfg);
    const Vector x = offset_point(set.x0, cfg.seed, 1, 1.0);
    results.push_back(check_fd_agreement(set, x, "quadratic#" + std::to_string(i)));
  }
  {
    HyperRepConfig cfg;
    cfg.seed = opts.seed;
    cfg.clients = 3;
    cfg.tasks_per_client = 2;
    const ProblemSet set = make_hyperrep(cfg);
    results.push_back(check_fd_agreement(set, set.x0, "hyperrep"));
  }

  {
    QuadraticConfig cfg;
    cfg.seed = opts.seed;
    cfg.zeta = 0.5;
    cfg.lower = LowerLevel::Local;
    const ProblemSet set = make_quadratic(cfg);
    const double tau = 0.1 / set.constants.L;
    const Vector x = offset_point(set.x0, opts.seed, 2, 0.5);
    const Vector y = offset_point(set.y0, opts.seed, 3, 0.5);
    const auto rows = neumann_bias_sweep(set, x, y, tau, opts.q_sweep);
    out << "Q   client  bias          G1            ratio     1-tau*mu\n";
    for (const auto& row : rows) {
      char line[160];
      std::snprintf(line, sizeof line, "%-3d %-7zu %-13.6e %-13.6e %-9s %.6f\n", row.Q, row.client,
                    row.bias, row.G1,
                    row.ratio ? fmt("%.6f", *row.ratio).c_str() : "-", row.expected_ratio);
      out << line;
    }
    results.push_back(check_neumann_bias(rows));
  }

  {
    const ProblemSet set = naive_bias_instance();
    const Vector x = offset_point(set.x0, 3, 4, 1.0);
    results.push_back(check_naive_averaging_bias(set, x));
  }

  for (const auto& r : results) {
    out << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  (" << r.detail << ")\n";
  }
  return results;
}

}  // namespace fedbio
