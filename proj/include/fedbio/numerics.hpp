#pragma once

// Dense linear algebra aliases and keyed, counter-based random streams.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>

#include <Eigen/Dense>

namespace fedbio {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Returns a*x + y. Throws std::invalid_argument on dimension mismatch.
Vector axpy(double a, const Vector& x, const Vector& y);

/// Euclidean projection onto the closed ball of radius r centred at the origin.
Vector project_ball(const Vector& u, double r);

bool all_finite(const Vector& v);

/// Mean of equally sized vectors using pairwise (cascade) summation.
/// The summation tree depends only on the count, so a fixed input order
/// gives a bit-stable result.
Vector pairwise_mean(std::span<const Vector* const> vectors);

/// Identifies an independent random stream. Purpose tags separate the
/// draws a client makes for different reasons at the same step.
struct StreamKey {
  std::uint64_t client = 0;
  std::uint64_t step = 0;
  std::uint64_t purpose = 0;
};

namespace purpose {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kStep = 2;
inline constexpr std::uint64_t kClientSampling = 3;
inline constexpr std::uint64_t kGenerator = 4;
inline constexpr std::uint64_t kSampleNoise = 5;
inline constexpr std::uint64_t kProbe = 6;
inline constexpr std::uint64_t kTest = 7;
}  // namespace purpose

/// Counter-based generator: every draw is a pure function of
/// (seed, key, counter), so draws never depend on call order or threading.
class RngStream {
 public:
  RngStream(std::uint64_t seed, StreamKey key);

  /// Independent sub-stream identified by `tag`.
  RngStream child(std::uint64_t tag) const;

  std::uint64_t bits(std::uint64_t counter) const;
  /// Uniform in the open interval (0, 1).
  double uniform(std::uint64_t counter) const;
  /// Standard normal (Box-Muller, consumes counters 2c and 2c+1).
  double normal(std::uint64_t counter) const;
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t counter, std::uint64_t n) const;

  std::uint64_t state() const { return state_; }

 private:
  explicit RngStream(std::uint64_t state) : state_(state) {}
  std::uint64_t state_;
};

/// Sequential reader over a stream: hands out consecutive counters.
class RngCursor {
 public:
  explicit RngCursor(RngStream stream) : stream_(stream) {}

  std::uint64_t bits() { return stream_.bits(next_++); }
  double uniform() { return stream_.uniform(next_++); }
  double normal() { return stream_.normal(next_++); }
  std::uint64_t below(std::uint64_t n) { return stream_.below(next_++, n); }
  Vector normal_vector(Index dim, double sigma = 1.0);
  Matrix normal_matrix(Index rows, Index cols, double sigma = 1.0);

 private:
  RngStream stream_;
  std::uint64_t next_ = 0;
};

/// i.i.d. N(0, sigma^2) vector drawn from counters 0..dim-1 of `stream`.
Vector gaussian(const RngStream& stream, Index dim, double sigma);

/// Random orthogonal matrix (QR of a Gaussian matrix with sign fix).
Matrix random_orthogonal(RngCursor& rng, Index n);

using LinearOperator = std::function<Vector(const Vector&)>;

struct CgResult {
  Vector solution;
  int iterations = 0;
  double relative_residual = 0.0;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Conjugate gradient for a symmetric positive definite operator.
/// Stops when ||r|| <= rel_tol * ||b||. Throws SolverError on a
/// non-positive curvature direction or when max_iter is exhausted.
CgResult conjugate_gradient(const LinearOperator& apply, const Vector& rhs, double rel_tol,
                            int max_iter);

}  // namespace fedbio
