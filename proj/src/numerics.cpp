#include "fedbio/numerics.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace fedbio {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t splitmix64(std::uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t combine(std::uint64_t h, std::uint64_t word) {
  return splitmix64(h ^ splitmix64(word + 0x632be59bd9b4e019ULL));
}

Vector pairwise_sum(std::span<const Vector* const> v) {
  if (v.size() == 1) return *v[0];
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

}  // namespace

Vector axpy(double a, const Vector& x, const Vector& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("axpy: dimension mismatch (" + std::to_string(x.size()) +
                                " vs " + std::to_string(y.size()) + ")");
  }
  return a * x + y;
}

Vector project_ball(const Vector& u, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("project_ball: radius must be positive");
  const double norm = u.norm();
  if (norm <= r) return u;
  Vector out = u * (r / norm);
  // Rounding in the scale can leave the norm a few ulps above r.
  while (out.norm() > r) out *= (1.0 - 0x1p-52);
  return out;
}

bool all_finite(const Vector& v) { return v.allFinite(); }

Vector pairwise_mean(std::span<const Vector* const> vectors) {
  if (vectors.empty()) throw std::invalid_argument("pairwise_mean: no vectors");
  const Index dim = vectors.front()->size();
  for (const Vector* v : vectors) {
    if (v->size() != dim) throw std::invalid_argument("pairwise_mean: dimension mismatch");
  }
  return pairwise_sum(vectors) / static_cast<double>(vectors.size());
}

RngStream::RngStream(std::uint64_t seed, StreamKey key)
    : state_(combine(combine(combine(splitmix64(seed), key.client), key.step), key.purpose)) {}

RngStream RngStream::child(std::uint64_t tag) const {
  return RngStream(combine(state_ ^ 0xd1b54a32d192ed03ULL, tag));
}

std::uint64_t RngStream::bits(std::uint64_t counter) const {
  return splitmix64(state_ ^ splitmix64(counter * kGolden + 1));
}

double RngStream::uniform(std::uint64_t counter) const {
  // 53 random mantissa bits, shifted by half an ulp to exclude 0.
  return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1p-53;
}

double RngStream::normal(std::uint64_t counter) const {
  const double u1 = uniform(2 * counter);
  const double u2 = uniform(2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t counter, std::uint64_t n) const {
  if (n == 0) throw std::invalid_argument("RngStream::below: empty range");
  // Lemire's multiply-shift; bias is < n / 2^64, negligible for our sizes.
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(bits(counter)) * n) >> 64);
}

Vector RngCursor::normal_vector(Index dim, double sigma) {
  Vector v(dim);
  for (Index i = 0; i < dim; ++i) v[i] = sigma * normal();
  return v;
}

Matrix RngCursor::normal_matrix(Index rows, Index cols, double sigma) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = sigma * normal();
  }
  return m;
}

Vector gaussian(const RngStream& stream, Index dim, double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian: sigma must be non-negative");
  if (dim < 0) throw std::invalid_argument("gaussian: negative dimension");
  Vector v(dim);
  for (Index i = 0; i < dim; ++i) {
    v[i] = sigma == 0.0 ? 0.0 : sigma * stream.normal(static_cast<std::uint64_t>(i));
  }
  return v;
}

Matrix random_orthogonal(RngCursor& rng, Index n) {
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

CgResult conjugate_gradient(const LinearOperator& apply, const Vector& rhs, double rel_tol,
                            int max_iter) {
  CgResult res;
  res.solution = Vector::Zero(rhs.size());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return res;

  Vector r = rhs;
  Vector p = r;
  double rr = r.squaredNorm();
  const double target = rel_tol * rhs_norm;
  while (res.iterations < max_iter) {
    const Vector ap = apply(p);
    const double curvature = p.dot(ap);
    if (!(curvature > 0.0)) {
      throw SolverError("conjugate_gradient: non-positive curvature (operator not PD)");
    }
    const double step = rr / curvature;
    res.solution += step * p;
    r -= step * ap;
    ++res.iterations;
    double rr_new = r.squaredNorm();
    if (std::sqrt(rr_new) <= target) {
      // The recursive residual drifts on hard systems; confirm and restart.
      r = rhs - apply(res.solution);
      rr_new = r.squaredNorm();
      if (std::sqrt(rr_new) <= target) break;
      p = r;
      rr = rr_new;
      continue;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  const double true_res = (rhs - apply(res.solution)).norm();
  res.relative_residual = true_res / rhs_norm;
  if (res.relative_residual > rel_tol) {
    throw SolverError("conjugate_gradient: stagnated at relative residual " +
                      std::to_string(res.relative_residual) + " after " +
                      std::to_string(res.iterations) + " iterations");
  }
  return res;
}

}  // namespace fedbio
