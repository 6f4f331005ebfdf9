#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <thread>
#include <vector>

#include "fedbio/numerics.hpp"

using namespace fedbio;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(Axpy, HandExamples) {
  EXPECT_EQ(axpy(0.0, vec({1, 2}), vec({3, 4})), vec({3, 4}));
  EXPECT_EQ(axpy(1.0, vec({1, 1}), vec({0, 0})), vec({1, 1}));
  EXPECT_EQ(axpy(2.0, vec({1, -1}), vec({1, 1})), vec({3, -1}));
}

TEST(Axpy, DimensionMismatchThrows) {
  EXPECT_THROW(axpy(1.0, vec({1, 2}), vec({1, 2, 3})), std::invalid_argument);
}

TEST(ProjectBall, Examples) {
  EXPECT_EQ(project_ball(vec({3, 4}), 10.0), vec({3, 4}));
  EXPECT_EQ(project_ball(vec({3, 4}), 5.0), vec({3, 4}));
  const Vector p = project_ball(vec({6, 8}), 5.0);
  EXPECT_NEAR(p[0], 3.0, 1e-15);
  EXPECT_NEAR(p[1], 4.0, 1e-15);
}

TEST(ProjectBall, RejectsNonPositiveRadius) {
  EXPECT_THROW(project_ball(vec({1}), 0.0), std::invalid_argument);
  EXPECT_THROW(project_ball(vec({1}), -1.0), std::invalid_argument);
}

TEST(ProjectBall, IdempotentAndBounded) {
  std::mt19937_64 gen(42);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(-12.0, 6.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const Index n = 1 + trial % 17;
    Vector u(n);
    for (Index i = 0; i < n; ++i) u[i] = nd(gen) * std::pow(10.0, ud(gen));
    const double r = std::pow(10.0, ud(gen));
    const Vector p = project_ball(u, r);
    EXPECT_LE(p.norm(), r * (1.0 + std::ldexp(1.0, -40)));
    EXPECT_EQ(project_ball(p, r), p) << "trial " << trial;
  }
}

TEST(PairwiseMean, MatchesNaiveMean) {
  std::vector<Vector> vs;
  for (int i = 0; i < 13; ++i) vs.push_back(Vector::Constant(3, double(i)));
  std::vector<const Vector*> ptrs;
  for (auto& v : vs) ptrs.push_back(&v);
  const Vector m = pairwise_mean(ptrs);
  for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(m[i], 6.0);
}

TEST(PairwiseMean, PermutationChangesLittle) {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> nd;
  std::vector<Vector> vs(37, Vector(20));
  for (auto& v : vs) {
    for (Index i = 0; i < v.size(); ++i) v[i] = nd(gen) * std::exp(3 * nd(gen));
  }
  std::vector<const Vector*> ptrs;
  for (auto& v : vs) ptrs.push_back(&v);
  const Vector base = pairwise_mean(ptrs);
  for (int k = 0; k < 20; ++k) {
    std::shuffle(ptrs.begin(), ptrs.end(), gen);
    const Vector m = pairwise_mean(ptrs);
    EXPECT_LE((m - base).norm(), 1e-12 * base.norm());
  }
  // Fixed order is bit-stable.
  EXPECT_EQ(pairwise_mean(ptrs), pairwise_mean(ptrs));
}

TEST(PairwiseMean, Errors) {
  std::vector<const Vector*> none;
  EXPECT_THROW(pairwise_mean(none), std::invalid_argument);
  Vector a(2), b(3);
  std::vector<const Vector*> mixed{&a, &b};
  EXPECT_THROW(pairwise_mean(mixed), std::invalid_argument);
}

TEST(Rng, SameKeySameDraws) {
  const RngStream a(5, {1, 2, 3});
  const RngStream b(5, {1, 2, 3});
  for (std::uint64_t c = 0; c < 100; ++c) {
    EXPECT_EQ(a.bits(c), b.bits(c));
    EXPECT_EQ(a.normal(c), b.normal(c));
  }
  EXPECT_EQ(gaussian(a, 50, 1.0), gaussian(b, 50, 1.0));
}

TEST(Rng, DistinctKeysDiffer) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t seed : {0ull, 1ull}) {
    for (std::uint64_t c = 0; c < 4; ++c) {
      for (std::uint64_t s = 0; s < 4; ++s) {
        for (std::uint64_t p = 0; p < 4; ++p) {
          seen.insert(RngStream(seed, {c, s, p}).bits(0));
        }
      }
    }
  }
  EXPECT_EQ(seen.size(), 2u * 64u);
  const RngStream base(9, {0, 0, 0});
  EXPECT_NE(base.child(1).bits(0), base.child(2).bits(0));
  EXPECT_NE(base.child(1).bits(0), base.bits(0));
}

TEST(Rng, GaussianZeroSigmaIsZero) {
  EXPECT_EQ(gaussian(RngStream(1, {}), 3, 0.0), Vector::Zero(3));
  EXPECT_THROW(gaussian(RngStream(1, {}), 3, -1.0), std::invalid_argument);
}

TEST(Rng, GaussianMomentsOverManyDraws) {
  const int n = 100000;
  const Vector v = gaussian(RngStream(2024, {0, 0, purpose::kTest}), n, 1.0);
  const double mean = v.mean();
  const double var = (v.array() - mean).square().sum() / (n - 1);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.02);
  const Vector w = gaussian(RngStream(2024, {0, 0, purpose::kTest}), n, 3.0);
  EXPECT_NEAR((w.array() - w.mean()).square().sum() / (n - 1), 9.0, 0.18);
}

TEST(Rng, UniformAndBelow) {
  const RngStream s(3, {4, 5, 6});
  std::vector<int> hist(7, 0);
  for (std::uint64_t c = 0; c < 70000; ++c) {
    const double u = s.uniform(c);
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = s.below(c, 7);
    ASSERT_LT(k, 7u);
    ++hist[k];
  }
  for (int h : hist) EXPECT_NEAR(h, 10000, 400);
  EXPECT_THROW(s.below(0, 0), std::invalid_argument);
}

TEST(Rng, ThreadIndependent) {
  const RngStream s(77, {1, 1, purpose::kTest});
  const Vector serial = gaussian(s, 1000, 1.0);
  std::vector<Vector> results(4);
  std::vector<std::thread> ts;
  for (int i = 0; i < 4; ++i) ts.emplace_back([&, i] { results[i] = gaussian(s, 1000, 1.0); });
  for (auto& t : ts) t.join();
  for (const auto& r : results) EXPECT_EQ(r, serial);
}

TEST(RandomOrthogonal, IsOrthogonal) {
  RngCursor rng(RngStream(1, {}));
  for (Index n : {1, 2, 5, 20}) {
    const Matrix Q = random_orthogonal(rng, n);
    EXPECT_LE((Q.transpose() * Q - Matrix::Identity(n, n)).norm(), 1e-12);
  }
}

TEST(ConjugateGradient, SolvesSpdSystem) {
  RngCursor rng(RngStream(11, {}));
  const Matrix G = rng.normal_matrix(15, 15);
  const Matrix A = G * G.transpose() + Matrix::Identity(15, 15);
  const Vector b = rng.normal_vector(15);
  const auto r = conjugate_gradient([&](const Vector& v) { return Vector(A * v); }, b, 1e-12, 150);
  EXPECT_LE((A * r.solution - b).norm(), 1e-11 * b.norm());
  EXPECT_LE(r.relative_residual, 1e-12);
  EXPECT_GT(r.iterations, 0);
}

TEST(ConjugateGradient, ZeroRhsReturnsZero) {
  const auto r = conjugate_gradient([](const Vector& v) { return v; }, Vector::Zero(4), 1e-10, 10);
  EXPECT_EQ(r.solution, Vector::Zero(4));
}

TEST(ConjugateGradient, IndefiniteOperatorFails) {
  const Matrix A = vec({1.0, -1.0}).asDiagonal();
  EXPECT_THROW(conjugate_gradient([&](const Vector& v) { return Vector(A * v); }, vec({0, 1}),
                                  1e-10, 10),
               SolverError);
}

TEST(ConjugateGradient, IterationCapFails) {
  Vector d(50);
  for (Index i = 0; i < 50; ++i) d[i] = 1.0 + i * i;
  const Matrix A = d.asDiagonal();
  EXPECT_THROW(conjugate_gradient([&](const Vector& v) { return Vector(A * v); },
                                  Vector::Ones(50), 1e-14, 3),
               SolverError);
}
