#include <cmath>
#include <stdexcept>

#include "clients.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {
namespace {

enum OracleTag : std::uint64_t { kFx = 1, kFy = 2, kGy = 3, kHvp = 4, kJvp = 5 };

class QuadraticClient final : public ClientProblem {
 public:
  QuadraticClient(Matrix A, Matrix B, Vector c, Matrix H, Matrix J, Vector b, double sigma,
                  std::uint64_t noise_seed)
      : A_(std::move(A)),
        B_(std::move(B)),
        c_(std::move(c)),
        H_(std::move(H)),
        J_(std::move(J)),
        b_(std::move(b)),
        sigma_(sigma),
        noise_seed_(noise_seed) {}

  Index dim_x() const override { return A_.cols(); }
  Index dim_y() const override { return B_.cols(); }

  Batch draw(Level /*level*/, std::size_t size, const RngStream& stream) const override {
    Batch batch;
    batch.ids.resize(size);
    for (std::size_t i = 0; i < size; ++i) batch.ids[i] = stream.bits(i);
    return batch;
  }

  Vector grad_f_x(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    Vector g = A_.transpose() * residual(x, y);
    add_vector_noise(g, kFx, batch);
    return g;
  }

  Vector grad_f_y(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    Vector g = B_.transpose() * residual(x, y);
    add_vector_noise(g, kFy, batch);
    return g;
  }

  Vector grad_g_y(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    Vector g = H_ * y + J_.transpose() * x + b_;
    add_vector_noise(g, kGy, batch);
    return g;
  }

  Vector hvp_gyy(const Vector& x, const Vector& y, const Vector& v,
                 const Batch& batch) const override {
    check(x, y);
    if (v.size() != dim_y()) throw std::invalid_argument("hvp_gyy: v has wrong dimension");
    Vector out = H_ * v;
    if (noisy(batch)) {
      // Symmetric noise matrix S = (G + G^T) / 2 per sample.
      const Index d = dim_y();
      Vector acc = Vector::Zero(d);
      for (std::uint64_t id : batch.ids) {
        const Matrix G = noise_matrix(kHvp, id, d, d);
        acc += 0.5 * (G + G.transpose()) * v;
      }
      out += (sigma_ / static_cast<double>(batch.size())) * acc;
    }
    return out;
  }

  Vector jvp_gxy(const Vector& x, const Vector& y, const Vector& v,
                 const Batch& batch) const override {
    check(x, y);
    if (v.size() != dim_y()) throw std::invalid_argument("jvp_gxy: v has wrong dimension");
    Vector out = J_ * v;
    if (noisy(batch)) {
      Vector acc = Vector::Zero(dim_x());
      for (std::uint64_t id : batch.ids) acc += noise_matrix(kJvp, id, dim_x(), dim_y()) * v;
      out += (sigma_ / static_cast<double>(batch.size())) * acc;
    }
    return out;
  }

  double f_value(const Vector& x, const Vector& y) const override {
    return 0.5 * residual(x, y).squaredNorm();
  }

  double g_value(const Vector& x, const Vector& y) const override {
    return 0.5 * y.dot(H_ * y) + x.dot(J_ * y) + b_.dot(y);
  }

  std::optional<Vector> lower_closed_form(const Vector& x) const override {
    return Vector(-H_.ldlt().solve(J_.transpose() * x + b_));
  }

  std::optional<QuadraticLower> quadratic_lower() const override {
    return QuadraticLower{H_, J_, b_};
  }

  std::string family() const override { return "quadratic"; }

  void write(BinaryWriter& out) const override {
    out.mat(A_);
    out.mat(B_);
    out.vec(c_);
    out.mat(H_);
    out.mat(J_);
    out.vec(b_);
    out.f64(sigma_);
    out.u64(noise_seed_);
  }

 private:
  void check(const Vector& x, const Vector& y) const {
    if (x.size() != dim_x() || y.size() != dim_y()) {
      throw std::invalid_argument("quadratic oracle: dimension mismatch");
    }
  }

  Vector residual(const Vector& x, const Vector& y) const { return A_ * x + B_ * y - c_; }

  bool noisy(const Batch& batch) const {
    if (batch.full || sigma_ == 0.0) return false;
    if (batch.ids.empty()) throw std::invalid_argument("quadratic oracle: empty batch");
    return true;
  }

  RngStream sample_stream(std::uint64_t tag, std::uint64_t id) const {
    return RngStream(noise_seed_, StreamKey{tag, id, purpose::kSampleNoise});
  }

  void add_vector_noise(Vector& g, std::uint64_t tag, const Batch& batch) const {
    if (!noisy(batch)) return;
    Vector acc = Vector::Zero(g.size());
    for (std::uint64_t id : batch.ids) acc += gaussian(sample_stream(tag, id), g.size(), 1.0);
    g += (sigma_ / static_cast<double>(batch.size())) * acc;
  }

  Matrix noise_matrix(std::uint64_t tag, std::uint64_t id, Index rows, Index cols) const {
    RngCursor rng(sample_stream(tag, id));
    return rng.normal_matrix(rows, cols);
  }

  Matrix A_, B_;
  Vector c_;
  Matrix H_, J_;
  Vector b_;
  double sigma_;
  std::uint64_t noise_seed_;
};

Matrix symmetric_noise(RngCursor& rng, Index n) {
  const Matrix g = rng.normal_matrix(n, n);
  return 0.5 * (g + g.transpose());
}

}  // namespace

ProblemSet make_quadratic(const QuadraticConfig& cfg) {
  if (cfg.clients < 1 || cfg.p < 1 || cfg.d < 1) {
    throw std::invalid_argument("make_quadratic: clients, p and d must be >= 1");
  }
  if (cfg.sigma < 0.0 || cfg.zeta < 0.0) {
    throw std::invalid_argument("make_quadratic: sigma and zeta must be non-negative");
  }
  if (!(cfg.mu > 0.0) || cfg.L < cfg.mu) {
    throw std::invalid_argument("make_quadratic: need 0 < mu <= L");
  }
  const Index p = cfg.p;
  const Index d = cfg.d;
  const Index q = cfg.q > 0 ? cfg.q : p + d;
  RngCursor rng(RngStream(cfg.seed, StreamKey{0, 0, purpose::kGenerator}));

  const double row_scale = 1.0 / std::sqrt(static_cast<double>(q));
  const Matrix A0 = rng.normal_matrix(q, p, row_scale);
  const Matrix B0 = rng.normal_matrix(q, d, row_scale);
  const Vector c0 = rng.normal_vector(q);
  const Matrix Q = random_orthogonal(rng, d);
  Vector spectrum(d);
  for (Index i = 0; i < d; ++i) {
    spectrum[i] = d == 1 ? cfg.mu
                         : cfg.mu + (cfg.L - cfg.mu) * static_cast<double>(i) /
                                        static_cast<double>(d - 1);
  }
  const Matrix H0 = Q * spectrum.asDiagonal() * Q.transpose();
  const double coupling_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Matrix J0 = rng.normal_matrix(p, d, coupling_scale);
  const Vector b0 = rng.normal_vector(d);
  const std::uint64_t noise_seed = rng.bits();

  ProblemSet set;
  set.family = "quadratic";
  set.lower = cfg.lower;
  for (int m = 0; m < cfg.clients; ++m) {
    RngCursor crng(RngStream(cfg.seed, StreamKey{static_cast<std::uint64_t>(m) + 1, 0,
                                                 purpose::kGenerator}));
    const double z = cfg.zeta;
    Matrix A = A0 + z * crng.normal_matrix(q, p, row_scale);
    Matrix B = B0 + z * crng.normal_matrix(q, d, row_scale);
    Vector c = c0 + z * crng.normal_vector(q);
    Matrix H = H0 + z * coupling_scale * symmetric_noise(crng, d);
    Matrix J = J0 + z * crng.normal_matrix(p, d, coupling_scale);
    Vector b = b0 + z * crng.normal_vector(d);
    // Shift so that every client Hessian keeps lambda_min >= mu.
    const double lmin = Eigen::SelfAdjointEigenSolver<Matrix>(H).eigenvalues().minCoeff();
    if (lmin < cfg.mu) H.diagonal().array() += cfg.mu - lmin;
    set.clients.push_back(std::make_shared<QuadraticClient>(
        std::move(A), std::move(B), std::move(c), std::move(H), std::move(J), std::move(b),
        cfg.sigma, noise_seed));
  }
  set.x0 = Vector::Zero(p);
  set.y0 = Vector::Zero(d);
  set.constants = measure_constants(set, cfg.sigma, 100, cfg.seed);
  return set;
}

namespace detail {

ClientPtr read_quadratic_client(BinaryReader& in) {
  Matrix A = in.mat();
  Matrix B = in.mat();
  Vector c = in.vec();
  Matrix H = in.mat();
  Matrix J = in.mat();
  Vector b = in.vec();
  const double sigma = in.f64();
  const std::uint64_t noise_seed = in.u64();
  if (A.rows() != B.rows() || A.rows() != c.size() || H.rows() != H.cols() ||
      H.rows() != B.cols() || J.rows() != A.cols() || J.cols() != H.rows() ||
      b.size() != H.rows()) {
    throw FormatError("quadratic client: inconsistent dimensions");
  }
  return std::make_shared<QuadraticClient>(std::move(A), std::move(B), std::move(c),
                                           std::move(H), std::move(J), std::move(b), sigma,
                                           noise_seed);
}

}  // namespace detail
}  // namespace fedbio
