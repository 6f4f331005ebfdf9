#pragma once

// Per-client stochastic bilevel oracles and the three problem families.
//
// Every client m exposes an upper objective f^(m)(x, y) and a lower objective
// g^(m)(x, y) together with first-order gradients and the two second-order
// products needed for implicit differentiation:
//   hvp_gyy(x, y, v) = d^2g/dy^2 * v      (d-vector)
//   jvp_gxy(x, y, v) = d^2g/dxdy * v      (p-vector)
// Stochastic variants average per-sample oracles over a Batch; sampling is
// with replacement.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedbio/numerics.hpp"

namespace fedbio {

enum class Level { Upper, Lower };

/// Sample identifiers for one stochastic oracle call. `full` selects the
/// noise-free / all-data oracle and ignores `ids`.
struct Batch {
  std::vector<std::uint64_t> ids;
  bool full = false;

  static Batch all() {
    Batch b;
    b.full = true;
    return b;
  }
  std::size_t size() const { return ids.size(); }
};

class BinaryWriter;
class BinaryReader;

class ClientProblem {
 public:
  virtual ~ClientProblem() = default;

  virtual Index dim_x() const = 0;
  virtual Index dim_y() const = 0;

  /// Draws `size` sample ids with replacement for the objective at `level`.
  virtual Batch draw(Level level, std::size_t size, const RngStream& stream) const = 0;

  virtual Vector grad_f_x(const Vector& x, const Vector& y, const Batch& batch) const = 0;
  virtual Vector grad_f_y(const Vector& x, const Vector& y, const Batch& batch) const = 0;
  virtual Vector grad_g_y(const Vector& x, const Vector& y, const Batch& batch) const = 0;
  virtual Vector hvp_gyy(const Vector& x, const Vector& y, const Vector& v,
                         const Batch& batch) const = 0;
  virtual Vector jvp_gxy(const Vector& x, const Vector& y, const Vector& v,
                         const Batch& batch) const = 0;

  /// Full-batch objective values.
  virtual double f_value(const Vector& x, const Vector& y) const = 0;
  virtual double g_value(const Vector& x, const Vector& y) const = 0;

  /// Classification error on held-out data, for the ML families.
  virtual std::optional<double> validation_error(const Vector& /*x*/,
                                                 const Vector& /*y*/) const {
    return std::nullopt;
  }

  /// argmin_y g^(m)(x, y) when the family has a closed form.
  virtual std::optional<Vector> lower_closed_form(const Vector& /*x*/) const {
    return std::nullopt;
  }

  /// (H, J, b) with grad_y g = H y + J^T x + b, when g is quadratic.
  struct QuadraticLower {
    Matrix H;
    Matrix J;
    Vector b;
  };
  virtual std::optional<QuadraticLower> quadratic_lower() const { return std::nullopt; }

  /// Certified lower bound on the strong convexity of g^(m) in y, when known
  /// without computation (e.g. from an L2 term).
  virtual std::optional<double> strong_convexity_bound() const { return std::nullopt; }

  virtual std::string family() const = 0;
  virtual void write(BinaryWriter& out) const = 0;

  Vector grad_f_x(const Vector& x, const Vector& y) const { return grad_f_x(x, y, Batch::all()); }
  Vector grad_f_y(const Vector& x, const Vector& y) const { return grad_f_y(x, y, Batch::all()); }
  Vector grad_g_y(const Vector& x, const Vector& y) const { return grad_g_y(x, y, Batch::all()); }
  Vector hvp_gyy(const Vector& x, const Vector& y, const Vector& v) const {
    return hvp_gyy(x, y, v, Batch::all());
  }
  Vector jvp_gxy(const Vector& x, const Vector& y, const Vector& v) const {
    return jvp_gxy(x, y, v, Batch::all());
  }
};

using ClientPtr = std::shared_ptr<const ClientProblem>;

/// Whether all clients share one lower problem g = mean_m g^(m), or each
/// client has its own lower problem.
enum class LowerLevel { Shared, Local };

struct ProblemConstants {
  double mu = 1.0;
  double L = 1.0;
  double C_f = 1.0;
  double kappa = 1.0;
  double sigma = 0.0;
};

struct ProblemSet {
  std::string family;
  LowerLevel lower = LowerLevel::Shared;
  std::vector<ClientPtr> clients;
  ProblemConstants constants;
  Vector x0;
  Vector y0;

  std::size_t num_clients() const { return clients.size(); }
  Index dim_x() const { return clients.front()->dim_x(); }
  Index dim_y() const { return clients.front()->dim_y(); }
};

// ---------------------------------------------------------------------------
// Synthetic quadratic family
//
//   f^(m)(x, y) = 1/2 ||A_m x + B_m y - c_m||^2
//   g^(m)(x, y) = 1/2 y^T H_m y + x^T J_m y + b_m^T y
//
// Client matrices are a shared base plus zeta-scaled Gaussian perturbations.
// Each stochastic sample adds sigma-scaled Gaussian noise to the gradients and
// to the matrices used by the HVP/JVP products.

struct QuadraticConfig {
  std::uint64_t seed = 0;
  int clients = 4;
  Index p = 5;
  Index d = 5;
  Index q = 0;  // rows of A_m/B_m; 0 means p + d
  double sigma = 0.0;
  double zeta = 0.0;
  double mu = 1.0;   // smallest eigenvalue of the base lower Hessian
  double L = 10.0;   // largest eigenvalue of the base lower Hessian
  LowerLevel lower = LowerLevel::Shared;
};

ProblemSet make_quadratic(const QuadraticConfig& cfg);

// ---------------------------------------------------------------------------
// Data cleaning: sample-weight learning for a linear softmax classifier.
//
//   g^(m)(x, y) = 1/N_m sum_n s(x_{m,n}) CE(y; noisy train sample n) + lambda/2 ||y||^2
//   f^(m)(x, y) = mean CE(y; clean validation sample of class m)
//
// with s the logistic function. x holds one weight logit per training sample
// of every client; y is the flattened (classes x (features+1)) weight matrix.

struct DataCleaningConfig {
  std::uint64_t seed = 0;
  int clients = 10;
  int classes = 10;
  int samples_per_client = 200;
  int val_per_client = 50;
  int test_per_client = 100;
  int feature_dim = 10;
  double rho = 0.0;
  double lambda = 1e-3;
  double separation = 1.5;  // distance scale between class means
};

ProblemSet make_data_cleaning(const DataCleaningConfig& cfg);

/// Fraction of training labels (over all clients) that differ from the true
/// class; exposed for generator checks.
double corrupted_label_fraction(const ProblemSet& set);

// ---------------------------------------------------------------------------
// Hyper-representation: shared linear embedding x, per-task ridge heads y.
//
//   g^(m)(x, y) = sum_t [ 1/n_tr sum_i 1/2 ||W_t E a_i - t_i||^2 + lambda/2 ||W_t||^2 ]
//   f^(m)(x, y) = 1/T sum_t 1/n_val sum_i 1/2 ||W_t E a_i - t_i||^2
//
// x = vec(E) with E (embed_dim x input_dim); y stacks vec(W_t), W_t
// (n_way x embed_dim). Targets come from a planted embedding and planted
// per-task heads, so the data are exactly linearly representable.

struct HyperRepConfig {
  std::uint64_t seed = 0;
  int clients = 4;
  int tasks_per_client = 4;
  int n_way = 5;
  int k_shot = 5;
  int k_query = 15;
  int input_dim = 8;
  int embed_dim = 4;
  double lambda = 0.1;
  double noise = 0.0;
};

ProblemSet make_hyperrep(const HyperRepConfig& cfg);

/// Builds a hyper-representation client from explicit task data; used for
/// symmetry checks. Each task is (train inputs, train targets, val inputs,
/// val targets), inputs row-major by sample.
struct HyperRepTask {
  Matrix train_inputs;
  Matrix train_targets;
  Matrix val_inputs;
  Matrix val_targets;
};
ClientPtr make_hyperrep_client(std::vector<HyperRepTask> tasks, int embed_dim, double lambda);

/// Planted quantities of a generated hyper-representation set, for recovery
/// checks: the planted embedding and, per client, the planted task heads.
struct HyperRepPlant {
  Matrix embedding;
  std::vector<std::vector<Matrix>> heads;
};
HyperRepPlant hyperrep_plant(const HyperRepConfig& cfg);

// ---------------------------------------------------------------------------
// Exact solutions on full-batch oracles.

/// Full-batch lower objective/gradients averaged over clients (shared lower).
Vector mean_grad_g_y(const ProblemSet& set, const Vector& x, const Vector& y);
Vector mean_hvp_gyy(const ProblemSet& set, const Vector& x, const Vector& y, const Vector& v);

/// y_x for the shared lower problem. Closed form for quadratic lowers,
/// damped Newton-CG otherwise. Throws SolverError if stationarity 1e-10 is
/// not reached.
Vector exact_lower_solution(const ProblemSet& set, const Vector& x);

/// y_x^(m) for a single client's own lower problem.
Vector exact_local_lower_solution(const ClientProblem& client, const Vector& x);

/// Lower solutions for every client: all equal to the shared solution for
/// LowerLevel::Shared, per-client otherwise.
std::vector<Vector> lower_solutions(const ProblemSet& set, const Vector& x);

/// Plain gradient descent on the shared lower problem with step 1/L; an
/// independent cross-check for the primary solver.
Vector lower_solution_by_gradient_descent(const ProblemSet& set, const Vector& x, double tol,
                                          int max_iter);

struct HypergradResult {
  Vector grad;                  // grad h(x)
  std::vector<Vector> y_star;   // per client (all equal for a shared lower)
  std::vector<Vector> u_star;   // per client (all equal for a shared lower)
  int cg_iterations = 0;
};

inline constexpr double kCgTolerance = 1e-10;

/// Hypergradient of h(x) = 1/M sum_m f^(m)(x, y_x).
/// Shared lower: solves Hbar u* = mean grad_y f at y_x by CG and returns
/// mean_m (grad_x f^(m) - J_m u*). Local lower: each client solves its own
/// system and the local hypergradients are averaged.
HypergradResult exact_hypergradient(const ProblemSet& set, const Vector& x);

/// h(x) = 1/M sum_m f^(m)(x, y_x^(m)).
double upper_value(const ProblemSet& set, const Vector& x);

/// Local hypergradient Phi^(m)(x, y) = grad_x f - J H^{-1} grad_y f of one
/// client, at an arbitrary y, via CG on that client's own Hessian.
Vector local_implicit_gradient(const ClientProblem& client, const Vector& x, const Vector& y);

/// Measures (mu, L, C_f) from the generated set: mu and L from the lower
/// Hessians, C_f as the largest full gradient norm of any f^(m) over
/// `probes` random points in the unit ball around (x0, y0).
ProblemConstants measure_constants(const ProblemSet& set, double sigma, int probes = 100,
                                   std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Binary container for exact replay: magic "FBLV1", little-endian u64 sizes,
// raw IEEE-754 doubles (matrices column-major).

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);
  void vec(const Vector& v);
  void mat(const Matrix& m);

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}
  std::uint64_t u64();
  double f64();
  std::string str();
  Vector vec();
  Matrix mat();

 private:
  void read(char* dst, std::size_t n);
  std::istream& in_;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_problem_set(const ProblemSet& set, const std::string& path);
ProblemSet load_problem_set(const std::string& path);
void write_problem_set(const ProblemSet& set, std::ostream& out);
ProblemSet read_problem_set(std::istream& in);

}  // namespace fedbio
