#include <cmath>
#include <stdexcept>

#include "clients.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {
namespace {

class HyperRepClient final : public ClientProblem {
 public:
  HyperRepClient(std::vector<HyperRepTask> tasks, int embed_dim, double lambda)
      : tasks_(std::move(tasks)), embed_dim_(embed_dim), lambda_(lambda) {
    if (tasks_.empty()) throw std::invalid_argument("hyperrep client: no tasks");
    n_way_ = tasks_.front().train_targets.cols();
    input_dim_ = tasks_.front().train_inputs.cols();
    for (const auto& t : tasks_) {
      if (t.train_inputs.rows() < 1 || t.val_inputs.rows() < 1 ||
          t.train_inputs.rows() != t.train_targets.rows() ||
          t.val_inputs.rows() != t.val_targets.rows() || t.train_inputs.cols() != input_dim_ ||
          t.val_inputs.cols() != input_dim_ || t.train_targets.cols() != n_way_ ||
          t.val_targets.cols() != n_way_) {
        throw std::invalid_argument("hyperrep client: inconsistent task shapes");
      }
      train_start_.push_back(train_pool_);
      val_start_.push_back(val_pool_);
      train_pool_ += t.train_inputs.rows();
      val_pool_ += t.val_inputs.rows();
    }
  }

  Index dim_x() const override { return embed_dim_ * input_dim_; }
  Index dim_y() const override { return static_cast<Index>(tasks_.size()) * head_size(); }

  Batch draw(Level level, std::size_t size, const RngStream& stream) const override {
    const auto n = static_cast<std::uint64_t>(level == Level::Upper ? val_pool_ : train_pool_);
    Batch batch;
    batch.ids.resize(size);
    for (std::size_t i = 0; i < size; ++i) batch.ids[i] = stream.below(i, n);
    return batch;
  }

  Vector grad_f_x(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    const auto E = embedding(x);
    Matrix grad = Matrix::Zero(E.rows(), E.cols());
    for_each(Level::Upper, batch, [&](std::size_t t, Index i, double coef) {
      const auto a = tasks_[t].val_inputs.row(i).transpose();
      const auto W = head(y, t);
      const Vector r = W * (E * a) - tasks_[t].val_targets.row(i).transpose();
      grad.noalias() += coef * (W.transpose() * r) * a.transpose();
    });
    return flatten(grad);
  }

  Vector grad_f_y(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    const auto E = embedding(x);
    Vector out = Vector::Zero(dim_y());
    for_each(Level::Upper, batch, [&](std::size_t t, Index i, double coef) {
      const auto a = tasks_[t].val_inputs.row(i).transpose();
      const Vector z = E * a;
      const Vector r = head(y, t) * z - tasks_[t].val_targets.row(i).transpose();
      head(out, t).noalias() += coef * r * z.transpose();
    });
    return out;
  }

  Vector grad_g_y(const Vector& x, const Vector& y, const Batch& batch) const override {
    check(x, y);
    const auto E = embedding(x);
    Vector out = lambda_ * y;
    for_each(Level::Lower, batch, [&](std::size_t t, Index i, double coef) {
      const auto a = tasks_[t].train_inputs.row(i).transpose();
      const Vector z = E * a;
      const Vector r = head(y, t) * z - tasks_[t].train_targets.row(i).transpose();
      head(out, t).noalias() += coef * r * z.transpose();
    });
    return out;
  }

  Vector hvp_gyy(const Vector& x, const Vector& y, const Vector& v,
                 const Batch& batch) const override {
    check(x, y);
    if (v.size() != dim_y()) throw std::invalid_argument("hvp_gyy: v has wrong dimension");
    const auto E = embedding(x);
    Vector out = lambda_ * v;
    for_each(Level::Lower, batch, [&](std::size_t t, Index i, double coef) {
      const Vector z = E * tasks_[t].train_inputs.row(i).transpose();
      head(out, t).noalias() += coef * (head(v, t) * z) * z.transpose();
    });
    return out;
  }

  Vector jvp_gxy(const Vector& x, const Vector& y, const Vector& v,
                 const Batch& batch) const override {
    check(x, y);
    if (v.size() != dim_y()) throw std::invalid_argument("jvp_gxy: v has wrong dimension");
    const auto E = embedding(x);
    Matrix out = Matrix::Zero(E.rows(), E.cols());
    for_each(Level::Lower, batch, [&](std::size_t t, Index i, double coef) {
      const auto a = tasks_[t].train_inputs.row(i).transpose();
      const Vector z = E * a;
      const auto W = head(y, t);
      const auto V = head(v, t);
      const Vector r = W * z - tasks_[t].train_targets.row(i).transpose();
      out.noalias() += coef * (W.transpose() * (V * z) + V.transpose() * r) * a.transpose();
    });
    return flatten(out);
  }

  double f_value(const Vector& x, const Vector& y) const override {
    check(x, y);
    const auto E = embedding(x);
    double total = 0.0;
    for_each(Level::Upper, Batch::all(), [&](std::size_t t, Index i, double coef) {
      const Vector r = head(y, t) * (E * tasks_[t].val_inputs.row(i).transpose()) -
                       tasks_[t].val_targets.row(i).transpose();
      total += coef * 0.5 * r.squaredNorm();
    });
    return total;
  }

  double g_value(const Vector& x, const Vector& y) const override {
    check(x, y);
    const auto E = embedding(x);
    double total = 0.5 * lambda_ * y.squaredNorm();
    for_each(Level::Lower, Batch::all(), [&](std::size_t t, Index i, double coef) {
      const Vector r = head(y, t) * (E * tasks_[t].train_inputs.row(i).transpose()) -
                       tasks_[t].train_targets.row(i).transpose();
      total += coef * 0.5 * r.squaredNorm();
    });
    return total;
  }

  std::optional<double> validation_error(const Vector& x, const Vector& y) const override {
    check(x, y);
    const auto E = embedding(x);
    Index wrong = 0;
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      const Matrix scores = tasks_[t].val_inputs * E.transpose() * head(y, t).transpose();
      for (Index i = 0; i < scores.rows(); ++i) {
        Index predicted = 0;
        Index truth = 0;
        scores.row(i).maxCoeff(&predicted);
        tasks_[t].val_targets.row(i).maxCoeff(&truth);
        wrong += predicted != truth ? 1 : 0;
      }
    }
    return static_cast<double>(wrong) / static_cast<double>(val_pool_);
  }

  std::optional<Vector> lower_closed_form(const Vector& x) const override {
    if (x.size() != dim_x()) throw std::invalid_argument("hyperrep: x has wrong dimension");
    const auto E = embedding(x);
    Vector y(dim_y());
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      const Matrix Z = tasks_[t].train_inputs * E.transpose();  // n x k
      const double inv_n = 1.0 / static_cast<double>(Z.rows());
      Matrix gram = inv_n * Z.transpose() * Z;
      gram.diagonal().array() += lambda_;
      const Matrix cross = inv_n * tasks_[t].train_targets.transpose() * Z;  // n_way x k
      const Matrix W = gram.ldlt().solve(cross.transpose()).transpose();
      head(y, t) = W;
    }
    return y;
  }

  std::optional<double> strong_convexity_bound() const override { return lambda_; }

  std::string family() const override { return "hyperrep"; }

  void write(BinaryWriter& out) const override {
    out.u64(tasks_.size());
    for (const auto& t : tasks_) {
      out.mat(t.train_inputs);
      out.mat(t.train_targets);
      out.mat(t.val_inputs);
      out.mat(t.val_targets);
    }
    out.u64(static_cast<std::uint64_t>(embed_dim_));
    out.f64(lambda_);
  }

 private:
  Index head_size() const { return n_way_ * embed_dim_; }

  Eigen::Map<const Matrix> embedding(const Vector& x) const {
    return {x.data(), embed_dim_, input_dim_};
  }
  Eigen::Map<const Matrix> head(const Vector& y, std::size_t t) const {
    return {y.data() + static_cast<Index>(t) * head_size(), n_way_, embed_dim_};
  }
  Eigen::Map<Matrix> head(Vector& y, std::size_t t) const {
    return {y.data() + static_cast<Index>(t) * head_size(), n_way_, embed_dim_};
  }
  static Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

  // Full batch: lower weights 1/n_t per task (sum over tasks), upper weights
  // 1/(T n_t) (mean over tasks). A sampled id indexes the pooled samples and
  // is reweighted so the batch mean is unbiased for the full-batch value.
  template <typename Fn>
  void for_each(Level level, const Batch& batch, Fn&& fn) const {
    const bool upper = level == Level::Upper;
    const double task_scale = upper ? 1.0 / static_cast<double>(tasks_.size()) : 1.0;
    const auto rows = [&](std::size_t t) {
      return upper ? tasks_[t].val_inputs.rows() : tasks_[t].train_inputs.rows();
    };
    if (batch.full) {
      for (std::size_t t = 0; t < tasks_.size(); ++t) {
        const double coef = task_scale / static_cast<double>(rows(t));
        for (Index i = 0; i < rows(t); ++i) fn(t, i, coef);
      }
      return;
    }
    if (batch.ids.empty()) throw std::invalid_argument("hyperrep oracle: empty batch");
    const Index pool = upper ? val_pool_ : train_pool_;
    const auto& starts = upper ? val_start_ : train_start_;
    for (std::uint64_t id : batch.ids) {
      if (id >= static_cast<std::uint64_t>(pool)) {
        throw std::out_of_range("hyperrep oracle: sample id out of range");
      }
      const auto flat = static_cast<Index>(id);
      std::size_t t = starts.size() - 1;
      while (starts[t] > flat) --t;
      const double coef = task_scale * static_cast<double>(pool) /
                          (static_cast<double>(rows(t)) * static_cast<double>(batch.size()));
      fn(t, flat - starts[t], coef);
    }
  }

  void check(const Vector& x, const Vector& y) const {
    if (x.size() != dim_x() || y.size() != dim_y()) {
      throw std::invalid_argument("hyperrep oracle: dimension mismatch");
    }
  }

  std::vector<HyperRepTask> tasks_;
  Index embed_dim_;
  double lambda_;
  Index n_way_ = 0;
  Index input_dim_ = 0;
  Index train_pool_ = 0;
  Index val_pool_ = 0;
  std::vector<Index> train_start_;
  std::vector<Index> val_start_;
};

struct Generated {
  HyperRepPlant plant;
  std::vector<std::vector<HyperRepTask>> tasks;
};

Generated generate(const HyperRepConfig& cfg) {
  if (cfg.clients < 1 || cfg.tasks_per_client < 1 || cfg.n_way < 1 || cfg.k_shot < 1 ||
      cfg.k_query < 1 || cfg.input_dim < 1 || cfg.embed_dim < 1) {
    throw std::invalid_argument("make_hyperrep: all counts must be >= 1");
  }
  if (!(cfg.lambda > 0.0) || cfg.noise < 0.0) {
    throw std::invalid_argument("make_hyperrep: need lambda > 0 and noise >= 0");
  }
  RngCursor rng(RngStream(cfg.seed, StreamKey{0, 0, purpose::kGenerator}));
  Generated out;
  out.plant.embedding =
      rng.normal_matrix(cfg.embed_dim, cfg.input_dim, 1.0 / std::sqrt(double(cfg.input_dim)));
  const auto sample = [&](RngCursor& r, const Matrix& head, int count, Matrix& inputs,
                          Matrix& targets) {
    inputs = r.normal_matrix(count, cfg.input_dim);
    targets = inputs * out.plant.embedding.transpose() * head.transpose();
    if (cfg.noise > 0.0) targets += r.normal_matrix(count, cfg.n_way, cfg.noise);
  };
  for (int m = 0; m < cfg.clients; ++m) {
    RngCursor crng(RngStream(cfg.seed, StreamKey{static_cast<std::uint64_t>(m) + 1, 0,
                                                 purpose::kGenerator}));
    std::vector<HyperRepTask> tasks;
    std::vector<Matrix> heads;
    for (int t = 0; t < cfg.tasks_per_client; ++t) {
      Matrix head =
          crng.normal_matrix(cfg.n_way, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.embed_dim)));
      HyperRepTask task;
      sample(crng, head, cfg.n_way * cfg.k_shot, task.train_inputs, task.train_targets);
      sample(crng, head, cfg.n_way * cfg.k_query, task.val_inputs, task.val_targets);
      tasks.push_back(std::move(task));
      heads.push_back(std::move(head));
    }
    out.tasks.push_back(std::move(tasks));
    out.plant.heads.push_back(std::move(heads));
  }
  return out;
}

}  // namespace

ClientPtr make_hyperrep_client(std::vector<HyperRepTask> tasks, int embed_dim, double lambda) {
  return std::make_shared<HyperRepClient>(std::move(tasks), embed_dim, lambda);
}

ProblemSet make_hyperrep(const HyperRepConfig& cfg) {
  Generated gen = generate(cfg);
  ProblemSet set;
  set.family = "hyperrep";
  set.lower = LowerLevel::Local;
  for (auto& tasks : gen.tasks) {
    set.clients.push_back(make_hyperrep_client(std::move(tasks), cfg.embed_dim, cfg.lambda));
  }
  RngCursor rng(RngStream(cfg.seed, StreamKey{0, 1, purpose::kGenerator}));
  set.x0 = rng.normal_vector(set.dim_x(), 1.0 / std::sqrt(double(cfg.input_dim)));
  set.y0 = Vector::Zero(set.dim_y());
  set.constants = measure_constants(set, 0.0, 20, cfg.seed);
  return set;
}

HyperRepPlant hyperrep_plant(const HyperRepConfig& cfg) { return generate(cfg).plant; }

namespace detail {

ClientPtr read_hyperrep_client(BinaryReader& in) {
  std::vector<HyperRepTask> tasks(in.u64());
  for (auto& t : tasks) {
    t.train_inputs = in.mat();
    t.train_targets = in.mat();
    t.val_inputs = in.mat();
    t.val_targets = in.mat();
  }
  const auto embed_dim = static_cast<int>(in.u64());
  const double lambda = in.f64();
  try {
    return make_hyperrep_client(std::move(tasks), embed_dim, lambda);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
}

}  // namespace detail
}  // namespace fedbio
