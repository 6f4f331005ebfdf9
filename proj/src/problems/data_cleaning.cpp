#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "clients.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {
namespace {

using detail::logistic;

struct LabeledSet {
  Matrix features;  // samples x (feature_dim + 1), last column is the bias input
  std::vector<int> labels;
};

class DataCleaningClient final : public ClientProblem {
 public:
  DataCleaningClient(LabeledSet train, std::vector<int> true_labels, LabeledSet val,
                     LabeledSet test, Index x_offset, Index x_dim, int classes, double lambda)
      : train_(std::move(train)),
        true_labels_(std::move(true_labels)),
        val_(std::move(val)),
        test_(std::move(test)),
        x_offset_(x_offset),
        x_dim_(x_dim),
        classes_(classes),
        lambda_(lambda) {}

  Index dim_x() const override { return x_dim_; }
  Index dim_y() const override { return classes_ * train_.features.cols(); }

  Batch draw(Level level, std::size_t size, const RngStream& stream) const override {
    const auto n = static_cast<std::uint64_t>(level == Level::Upper ? val_.labels.size()
                                                                    : train_.labels.size());
    Batch batch;
    batch.ids.resize(size);
    for (std::size_t i = 0; i < size; ++i) batch.ids[i] = stream.below(i, n);
    return batch;
  }

  Vector grad_f_x(const Vector& x, const Vector& y, const Batch&) const override {
    check(x, y);
    return Vector::Zero(x_dim_);
  }

  Vector grad_f_y(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    const auto W = weights(y);
    Matrix grad = Matrix::Zero(W.rows(), W.cols());
    for_each_sample(val_, batch, [&](Index n, double coef) {
      const auto a = val_.features.row(n).transpose();
      Vector p = softmax(W * a);
      p[val_.labels[n]] -= 1.0;
      grad.noalias() += coef * p * a.transpose();
    });
    return flatten(grad);
  }

  Vector grad_g_y(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    const auto W = weights(y);
    Matrix grad = lambda_ * W;
    for_each_sample(train_, batch, [&](Index n, double coef) {
      const auto a = train_.features.row(n).transpose();
      Vector p = softmax(W * a);
      p[train_.labels[n]] -= 1.0;
      grad.noalias() += (coef * logistic(x[x_offset_ + n])) * p * a.transpose();
    });
    return flatten(grad);
  }

  Vector hvp_gyy(const Vector& x, const Vector& y, const Vector& v,
                 const Batch& batch) const override {
    check(x, y);
    if (v.size() != dim_y()) throw std::invalid_argument("hvp_gyy: v has wrong dimension");
    const auto W = weights(y);
    const auto V = weights(v);
    Matrix out = lambda_ * V;
    for_each_sample(train_, batch, [&](Index n, double coef) {
      const auto a = train_.features.row(n).transpose();
      const Vector p = softmax(W * a);
      const Vector dz = V * a;
      const Vector dp = p.cwiseProduct(dz) - p * p.dot(dz);
      out.noalias() += (coef * logistic(x[x_offset_ + n])) * dp * a.transpose();
    });
    return flatten(out);
  }

  Vector jvp_gxy(const Vector& x, const Vector& y, const Vector& v,
                 const Batch& batch) const override {
    check(x, y);
    if (v.size() != dim_y()) throw std::invalid_argument("jvp_gxy: v has wrong dimension");
    const auto W = weights(y);
    const auto V = weights(v);
    Vector out = Vector::Zero(x_dim_);
    for_each_sample(train_, batch, [&](Index n, double coef) {
      const auto a = train_.features.row(n).transpose();
      Vector p = softmax(W * a);
      p[train_.labels[n]] -= 1.0;
      const double s = logistic(x[x_offset_ + n]);
      out[x_offset_ + n] += coef * s * (1.0 - s) * p.dot(V * a);
    });
    return out;
  }

  double f_value(const Vector& x, const Vector& y) const override {
    check(x, y);
    const auto W = weights(y);
    double total = 0.0;
    for_each_sample(val_, Batch::all(), [&](Index n, double coef) {
      total += coef * cross_entropy(W * val_.features.row(n).transpose(), val_.labels[n]);
    });
    return total;
  }

  double g_value(const Vector& x, const Vector& y) const override {
    check(x, y);
    const auto W = weights(y);
    double total = 0.5 * lambda_ * y.squaredNorm();
    for_each_sample(train_, Batch::all(), [&](Index n, double coef) {
      total += coef * logistic(x[x_offset_ + n]) *
               cross_entropy(W * train_.features.row(n).transpose(), train_.labels[n]);
    });
    return total;
  }

  std::optional<double> validation_error(const Vector& x, const Vector& y) const override {
    check(x, y);
    const auto W = weights(y);
    const Matrix scores = test_.features * W.transpose();
    Index wrong = 0;
    for (Index n = 0; n < scores.rows(); ++n) {
      Index best = 0;
      scores.row(n).maxCoeff(&best);
      if (best != test_.labels[n]) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(scores.rows());
  }

  std::optional<double> strong_convexity_bound() const override { return lambda_; }

  std::string family() const override { return "data_cleaning"; }

  void write(BinaryWriter& out) const override {
    write_set(out, train_);
    write_labels(out, true_labels_);
    write_set(out, val_);
    write_set(out, test_);
    out.u64(static_cast<std::uint64_t>(x_offset_));
    out.u64(static_cast<std::uint64_t>(x_dim_));
    out.u64(static_cast<std::uint64_t>(classes_));
    out.f64(lambda_);
  }

  static ClientPtr read(BinaryReader& in) {
    LabeledSet train = read_set(in);
    std::vector<int> truth = read_labels(in);
    LabeledSet val = read_set(in);
    LabeledSet test = read_set(in);
    const auto offset = static_cast<Index>(in.u64());
    const auto x_dim = static_cast<Index>(in.u64());
    const auto classes = static_cast<int>(in.u64());
    const double lambda = in.f64();
    if (offset + train.features.rows() > x_dim || truth.size() != train.labels.size()) {
      throw FormatError("data cleaning client: inconsistent layout");
    }
    return std::make_shared<DataCleaningClient>(std::move(train), std::move(truth),
                                                std::move(val), std::move(test), offset, x_dim,
                                                classes, lambda);
  }

  const std::vector<int>& noisy_labels() const { return train_.labels; }
  const std::vector<int>& true_labels() const { return true_labels_; }

 private:
  Eigen::Map<const Matrix> weights(const Vector& y) const {
    return {y.data(), classes_, train_.features.cols()};
  }

  static Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

  static Vector softmax(const Vector& z) {
    Vector e = (z.array() - z.maxCoeff()).exp();
    return e / e.sum();
  }

  static double cross_entropy(const Vector& z, int label) {
    const double zmax = z.maxCoeff();
    return zmax + std::log((z.array() - zmax).exp().sum()) - z[label];
  }

  template <typename Fn>
  static void for_each_sample(const LabeledSet& set, const Batch& batch, Fn&& fn) {
    const auto n = static_cast<Index>(set.labels.size());
    if (batch.full) {
      const double coef = 1.0 / static_cast<double>(n);
      for (Index i = 0; i < n; ++i) fn(i, coef);
      return;
    }
    if (batch.ids.empty()) throw std::invalid_argument("data cleaning oracle: empty batch");
    const double coef = 1.0 / static_cast<double>(batch.size());
    for (std::uint64_t id : batch.ids) {
      if (id >= static_cast<std::uint64_t>(n)) {
        throw std::out_of_range("data cleaning oracle: sample id out of range");
      }
      fn(static_cast<Index>(id), coef);
    }
  }

  void check(const Vector& x, const Vector& y) const {
    if (x.size() != x_dim_ || y.size() != dim_y()) {
      throw std::invalid_argument("data cleaning oracle: dimension mismatch");
    }
  }

  static void write_labels(BinaryWriter& out, const std::vector<int>& labels) {
    out.u64(labels.size());
    for (int l : labels) out.u64(static_cast<std::uint64_t>(l));
  }
  static std::vector<int> read_labels(BinaryReader& in) {
    std::vector<int> labels(in.u64());
    for (int& l : labels) l = static_cast<int>(in.u64());
    return labels;
  }
  static void write_set(BinaryWriter& out, const LabeledSet& s) {
    out.mat(s.features);
    write_labels(out, s.labels);
  }
  static LabeledSet read_set(BinaryReader& in) {
    LabeledSet s;
    s.features = in.mat();
    s.labels = read_labels(in);
    if (static_cast<Index>(s.labels.size()) != s.features.rows()) {
      throw FormatError("data cleaning client: label count mismatch");
    }
    return s;
  }

  LabeledSet train_;
  std::vector<int> true_labels_;
  LabeledSet val_;
  LabeledSet test_;
  Index x_offset_;
  Index x_dim_;
  int classes_;
  double lambda_;
};

Matrix draw_features(RngCursor& rng, const Matrix& means, const std::vector<int>& labels) {
  const Index dim = means.cols();
  Matrix out(static_cast<Index>(labels.size()), dim + 1);
  for (Index n = 0; n < out.rows(); ++n) {
    for (Index j = 0; j < dim; ++j) out(n, j) = means(labels[n], j) + rng.normal();
    out(n, dim) = 1.0;
  }
  return out;
}

}  // namespace

ProblemSet make_data_cleaning(const DataCleaningConfig& cfg) {
  if (cfg.clients < 1 || cfg.classes < 2 || cfg.samples_per_client < 1 ||
      cfg.val_per_client < 1 || cfg.test_per_client < 1 || cfg.feature_dim < 1) {
    throw std::invalid_argument("make_data_cleaning: counts must be positive (classes >= 2)");
  }
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0)) {
    throw std::invalid_argument("make_data_cleaning: rho must lie in [0, 1]");
  }
  if (cfg.classes > cfg.clients) {
    throw std::invalid_argument(
        "make_data_cleaning: single-class validation split needs classes <= clients");
  }
  if (!(cfg.lambda > 0.0)) throw std::invalid_argument("make_data_cleaning: lambda must be > 0");

  RngCursor rng(RngStream(cfg.seed, StreamKey{0, 0, purpose::kGenerator}));
  const Matrix means = rng.normal_matrix(cfg.classes, cfg.feature_dim,
                                         cfg.separation / std::sqrt(2.0));
  const Index n_train = cfg.samples_per_client;
  const Index x_dim = n_train * cfg.clients;

  ProblemSet set;
  set.family = "data_cleaning";
  set.lower = LowerLevel::Shared;
  for (int m = 0; m < cfg.clients; ++m) {
    RngCursor crng(RngStream(cfg.seed, StreamKey{static_cast<std::uint64_t>(m) + 1, 0,
                                                 purpose::kGenerator}));
    std::vector<int> truth(static_cast<std::size_t>(n_train));
    for (int& l : truth) l = static_cast<int>(crng.below(cfg.classes));
    LabeledSet train;
    train.features = draw_features(crng, means, truth);
    train.labels = truth;
    // Resample the labels of exactly floor(rho * N) randomly chosen samples.
    std::vector<Index> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    const auto n_flip = static_cast<Index>(std::floor(cfg.rho * static_cast<double>(n_train)));
    for (Index i = 0; i < n_flip; ++i) {
      const auto j = i + static_cast<Index>(crng.below(static_cast<std::uint64_t>(n_train - i)));
      std::swap(order[i], order[j]);
      train.labels[order[i]] = static_cast<int>(crng.below(cfg.classes));
    }
    const int own_class = m % cfg.classes;
    LabeledSet val;
    val.labels.assign(static_cast<std::size_t>(cfg.val_per_client), own_class);
    val.features = draw_features(crng, means, val.labels);
    LabeledSet test;
    test.labels.assign(static_cast<std::size_t>(cfg.test_per_client), own_class);
    test.features = draw_features(crng, means, test.labels);
    set.clients.push_back(std::make_shared<DataCleaningClient>(
        std::move(train), std::move(truth), std::move(val), std::move(test), m * n_train, x_dim,
        cfg.classes, cfg.lambda));
  }
  set.x0 = Vector::Zero(x_dim);
  set.y0 = Vector::Zero(set.dim_y());
  set.constants = measure_constants(set, 0.0, 20, cfg.seed);
  return set;
}

double corrupted_label_fraction(const ProblemSet& set) {
  std::size_t wrong = 0;
  std::size_t total = 0;
  for (const auto& c : set.clients) {
    const auto* dc = dynamic_cast<const DataCleaningClient*>(c.get());
    if (dc == nullptr) throw std::invalid_argument("corrupted_label_fraction: not data cleaning");
    for (std::size_t i = 0; i < dc->true_labels().size(); ++i) {
      wrong += dc->true_labels()[i] != dc->noisy_labels()[i] ? 1 : 0;
    }
    total += dc->true_labels().size();
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

namespace detail {
ClientPtr read_data_cleaning_client(BinaryReader& in) { return DataCleaningClient::read(in); }
}  // namespace detail

}  // namespace fedbio
