#include <gtest/gtest.h>

#include <atomic>
#include <set>

#include "fedbio/federation.hpp"
#include "fedbio/hypergrad.hpp"
#include "test_support.hpp"

using namespace fedbio;
using namespace fedbio::testing;

namespace {

constexpr AlgoKind kAll[] = {AlgoKind::FedBiOAcc, AlgoKind::FedBiO, AlgoKind::FedBiOLocal,
                             AlgoKind::FedBiOAccLocal, AlgoKind::FedAvg};

ProblemSet quadratic_for(AlgoKind kind, int M, double sigma = 0.5, double zeta = 0.5,
                         Index p = 4, Index d = 3, std::uint64_t seed = 12) {
  QuadraticConfig c;
  c.seed = seed;
  c.clients = M;
  c.p = p;
  c.d = d;
  c.sigma = sigma;
  c.zeta = zeta;
  c.lower = is_local(kind) ? LowerLevel::Local : LowerLevel::Shared;
  return make_quadratic(c);
}

FederationConfig config_for(AlgoKind kind, int M, int I, int S = 0) {
  FederationConfig cfg;
  cfg.M = M;
  cfg.I = I;
  cfg.clients_per_round = S;
  cfg.algo = kind;
  cfg.seed = 21;
  return cfg;
}

HyperParams hp_for(const ProblemSet& set, const FederationConfig& cfg, std::size_t b = 3) {
  auto hp = default_hyperparams(set.constants, cfg.M, b, cfg.I);
  hp.neumann.Q = 8;
  return hp;
}

bool states_equal(const ClientState& a, const ClientState& b) {
  return a.x == b.x && a.y == b.y && a.u == b.u && a.nu == b.nu && a.omega == b.omega &&
         a.q == b.q && a.t == b.t;
}

const Vector& field_of(const ClientState& s, unsigned f) {
  switch (f) {
    case sync_field::kX: return s.x;
    case sync_field::kY: return s.y;
    case sync_field::kU: return s.u;
    case sync_field::kNu: return s.nu;
    case sync_field::kOmega: return s.omega;
    default: return s.q;
  }
}

}  // namespace

// ---------------------------------------------------------------- sampling

TEST(Sampling, UniformOverRounds) {
  FederationConfig cfg;
  cfg.M = 10;
  cfg.clients_per_round = 1;
  cfg.seed = 4;
  std::vector<int> hits(10, 0);
  for (int r = 0; r < 10000; ++r) {
    const auto s = sample_clients(cfg, r);
    ASSERT_EQ(s.size(), 1u);
    ++hits[static_cast<std::size_t>(s[0])];
  }
  for (int h : hits) EXPECT_NEAR(h, 1000, 100);
}

TEST(Sampling, DistinctSortedDeterministic) {
  FederationConfig cfg;
  cfg.M = 9;
  cfg.clients_per_round = 4;
  cfg.seed = 8;
  std::set<std::vector<int>> seen;
  for (int r = 0; r < 200; ++r) {
    const auto s = sample_clients(cfg, r);
    ASSERT_EQ(s.size(), 4u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::set<int>(s.begin(), s.end()).size(), 4u);
    EXPECT_EQ(s, sample_clients(cfg, r));
    seen.insert(s);
  }
  EXPECT_GT(seen.size(), 50u);
}

TEST(Sampling, FullParticipationTakesEveryone) {
  FederationConfig cfg;
  cfg.M = 5;
  EXPECT_EQ(sample_clients(cfg, 3), (std::vector<int>{0, 1, 2, 3, 4}));
  cfg.clients_per_round = 5;
  EXPECT_EQ(sample_clients(cfg, 7), (std::vector<int>{0, 1, 2, 3, 4}));
}

// ---------------------------------------------------------------- sync

TEST(Sync, FieldsPerAlgorithm) {
  using namespace sync_field;
  EXPECT_EQ(sync_fields(AlgoKind::FedBiOAcc), kX | kY | kU | kNu | kOmega | kQ);
  EXPECT_EQ(sync_fields(AlgoKind::FedBiOAcc, false), kX | kY | kU);
  EXPECT_EQ(sync_fields(AlgoKind::FedBiO), kX | kY | kU);
  EXPECT_EQ(sync_fields(AlgoKind::FedBiOLocal), kX);
  EXPECT_EQ(sync_fields(AlgoKind::FedBiOAccLocal), kX | kNu);
  EXPECT_EQ(sync_fields(AlgoKind::FedAvg), kY);
  EXPECT_EQ(exchange_size(sync_fields(AlgoKind::FedBiOAcc), 10, 10), 60u);
  EXPECT_EQ(exchange_size(kX | kY, 7, 2), 9u);
}

TEST(Sync, ClientsAgreeExactlyAfterEveryRound) {
  for (auto kind : kAll) {
    for (int S : {0, 2}) {
      const auto set = quadratic_for(kind, 4);
      const auto cfg = config_for(kind, 4, 3, S);
      Federation fed(set, cfg, hp_for(set, cfg));
      const unsigned fields = sync_fields(kind);
      for (int r = 0; r < 6; ++r) {
        fed.run_round();
        for (unsigned f : {sync_field::kX, sync_field::kY, sync_field::kU, sync_field::kNu,
                           sync_field::kOmega, sync_field::kQ}) {
          if (!(fields & f)) continue;
          for (const auto& c : fed.clients()) {
            ASSERT_EQ(field_of(c, f), field_of(fed.clients().front(), f))
                << to_string(kind) << " S=" << S << " field " << f << " round " << r;
          }
        }
        for (const auto& c : fed.clients()) EXPECT_EQ(c.t, fed.server().t);
      }
    }
  }
}

TEST(Sync, CommunicationPerRound) {
  {
    const auto set = quadratic_for(AlgoKind::FedBiOAcc, 4, 0.5, 0.5, 10, 10);
    const auto cfg = config_for(AlgoKind::FedBiOAcc, 4, 2);
    Federation fed(set, cfg, hp_for(set, cfg));
    EXPECT_EQ(fed.server().comm_scalars, 0u);
    fed.run_round();
    EXPECT_EQ(fed.server().comm_scalars, 480u);
    fed.run_round();
    fed.run_round();
    EXPECT_EQ(fed.server().comm_scalars, 1440u);
  }
  {
    // FedBiOAcc-Local: x, then nu, each up from the sampled and down to all.
    const auto set = quadratic_for(AlgoKind::FedBiOAccLocal, 4, 0.5, 0.5, 6, 3);
    const auto cfg = config_for(AlgoKind::FedBiOAccLocal, 4, 2, 3);
    Federation fed(set, cfg, hp_for(set, cfg));
    fed.run_round();
    EXPECT_EQ(fed.server().comm_scalars, 6u * 7u + 6u * 7u);
  }
  {
    const auto set = quadratic_for(AlgoKind::FedAvg, 4, 0.5, 0.5, 6, 3);
    const auto cfg = config_for(AlgoKind::FedAvg, 4, 5);
    Federation fed(set, cfg, hp_for(set, cfg));
    fed.run_round();
    EXPECT_EQ(fed.server().comm_scalars, 3u * 8u);
  }
}

TEST(Sync, StragglersReceiveTheBroadcast) {
  const auto set = quadratic_for(AlgoKind::FedBiO, 5);
  const auto cfg = config_for(AlgoKind::FedBiO, 5, 2, 2);
  Federation fed(set, cfg, hp_for(set, cfg));
  const auto before = fed.clients();
  const auto sampled = sample_clients(cfg, 0);
  fed.run_round();
  for (int m = 0; m < 5; ++m) {
    const auto& c = fed.clients()[static_cast<std::size_t>(m)];
    EXPECT_EQ(c.x, fed.clients().front().x);
    EXPECT_LE((c.x - fed.server().x).norm(), 1e-15);
    EXPECT_EQ(c.t, 3);
    const bool in = std::find(sampled.begin(), sampled.end(), m) != sampled.end();
    const auto& b = before[static_cast<std::size_t>(m)];
    if (in) {
      EXPECT_EQ(c.counts.grad_f_x, 2u);
    } else {
      EXPECT_EQ(c.counts.grad_f_x, b.counts.grad_f_x);
    }
  }
}

// ---------------------------------------------------------------- reference

// One round by hand: each sampled client steps I times on its own stream,
// then the synced fields are averaged over the sampled clients.
TEST(Reference, RoundMatchesHandRolledLoop) {
  for (auto kind : {AlgoKind::FedBiOAcc, AlgoKind::FedBiO, AlgoKind::FedBiOLocal,
                    AlgoKind::FedAvg}) {
    for (int S : {0, 2}) {
      const auto set = quadratic_for(kind, 4);
      const auto cfg = config_for(kind, 4, 1, S);
      const auto hp = hp_for(set, cfg);
      Federation fed(set, cfg, hp);
      std::vector<ClientState> ref = fed.clients();
      for (int r = 0; r < 4; ++r) {
        const auto sampled = sample_clients(cfg, r);
        for (int m : sampled) {
          auto& s = ref[static_cast<std::size_t>(m)];
          const auto& p = *set.clients[static_cast<std::size_t>(m)];
          const RngStream st(cfg.seed, {static_cast<std::uint64_t>(m),
                                        static_cast<std::uint64_t>(s.t), purpose::kStep});
          switch (kind) {
            case AlgoKind::FedBiOAcc: s = fedbioacc_local_step(s, p, hp, st); break;
            case AlgoKind::FedBiO: s = fedbio_local_step(s, p, hp, st); break;
            case AlgoKind::FedBiOLocal: s = fedbio_locallower_step(s, p, hp, st); break;
            default: s = fedavg_step(s, p, hp, st); break;
          }
        }
        const unsigned fields = sync_fields(kind);
        for (unsigned f : {sync_field::kX, sync_field::kY, sync_field::kU, sync_field::kNu,
                           sync_field::kOmega, sync_field::kQ}) {
          if (!(fields & f)) continue;
          std::vector<const Vector*> parts;
          for (int m : sampled) parts.push_back(&field_of(ref[static_cast<std::size_t>(m)], f));
          const Vector mean = pairwise_mean(parts);
          for (auto& c : ref) {
            switch (f) {
              case sync_field::kX: c.x = mean; break;
              case sync_field::kY: c.y = mean; break;
              case sync_field::kU: c.u = mean; break;
              case sync_field::kNu: c.nu = mean; break;
              case sync_field::kOmega: c.omega = mean; break;
              default: c.q = mean; break;
            }
          }
        }
        for (auto& c : ref) c.t = r + 2;
        fed.run_round();
        for (std::size_t m = 0; m < ref.size(); ++m) {
          ASSERT_TRUE(states_equal(fed.clients()[m], ref[m]))
              << to_string(kind) << " S=" << S << " round " << r << " client " << m;
        }
      }
    }
  }
}

TEST(Reference, ThreadCountDoesNotChangeResults) {
  for (auto kind : kAll) {
    const auto set = quadratic_for(kind, 6);
    auto cfg = config_for(kind, 6, 3, 4);
    const auto hp = hp_for(set, cfg);
    cfg.threads = 1;
    Federation a(set, cfg, hp);
    cfg.threads = 4;
    Federation b(set, cfg, hp);
    for (int r = 0; r < 5; ++r) {
      a.run_round();
      b.run_round();
    }
    for (std::size_t m = 0; m < 6; ++m) {
      EXPECT_TRUE(states_equal(a.clients()[m], b.clients()[m])) << to_string(kind);
    }
    EXPECT_EQ(a.server().comm_scalars, b.server().comm_scalars);
    EXPECT_EQ(a.server().counts.samples, b.server().counts.samples);
  }
}

TEST(Reference, HomogeneousClientsMakeLocalStepsIrrelevant) {
  // Identical clients on shared streams: averaging is the identity, so the
  // sync period cannot matter and M clients behave like one.
  for (auto kind : {AlgoKind::FedBiOAcc, AlgoKind::FedBiO}) {
    const auto set4 = quadratic_for(kind, 4, 0.5, 0.0);
    const auto set1 = quadratic_for(kind, 1, 0.5, 0.0);
    auto c5 = config_for(kind, 4, 5);
    auto c1 = config_for(kind, 4, 1);
    auto single = config_for(kind, 1, 5);
    c5.shared_client_streams = c1.shared_client_streams = true;
    auto hp = hp_for(set4, c5);
    Federation a(set4, c5, hp);
    hp.I = 1;
    Federation b(set4, c1, hp);
    hp.I = 5;
    Federation c(set1, single, hp);
    for (int r = 0; r < 4; ++r) a.run_round();
    for (int r = 0; r < 20; ++r) b.run_round();
    for (int r = 0; r < 4; ++r) c.run_round();
    EXPECT_EQ(a.server().x, b.server().x) << to_string(kind);
    EXPECT_EQ(a.server().y, b.server().y) << to_string(kind);
    EXPECT_EQ(a.server().x, c.server().x) << to_string(kind);
    EXPECT_EQ(a.server().u, c.server().u) << to_string(kind);
  }
}

TEST(Reference, IdenticalClientsStayIdentical) {
  for (auto kind : kAll) {
    const auto set = quadratic_for(kind, 3, 0.4, 0.0);
    auto cfg = config_for(kind, 3, 4);
    cfg.shared_client_streams = true;
    Federation fed(set, cfg, hp_for(set, cfg));
    for (int r = 0; r < 3; ++r) fed.run_round();
    for (const auto& c : fed.clients()) {
      EXPECT_TRUE(states_equal(c, fed.clients().front())) << to_string(kind);
    }
  }
}

// ---------------------------------------------------------------- variance

TEST(Variance, AveragedFreshGradientScalesAsOneOverBS) {
  const double sigma = 0.8;
  const std::size_t b = 4;
  const auto set = quadratic_for(AlgoKind::FedBiO, 8, sigma, 0.5, 6, 3);
  const Vector x = Vector::Constant(6, 0.2);
  const Vector y = Vector::Constant(3, -0.1);
  for (int S : {1, 2, 4, 8}) {
    Vector full = Vector::Zero(6);
    for (int m = 0; m < S; ++m) full += set.clients[static_cast<std::size_t>(m)]->grad_f_x(x, y);
    full /= S;
    const int draws = 10000;
    double sq = 0.0;
    for (int k = 0; k < draws; ++k) {
      Vector avg = Vector::Zero(6);
      for (int m = 0; m < S; ++m) {
        const auto& p = *set.clients[static_cast<std::size_t>(m)];
        const RngStream st(99, {static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(k),
                                purpose::kStep});
        avg += p.grad_f_x(x, y, p.draw(Level::Upper, b, st.child(batch_tag::kF1)));
      }
      avg /= S;
      sq += (avg - full).squaredNorm();
    }
    const double per_component = sq / (draws * 6.0);
    const double expected = sigma * sigma / static_cast<double>(b * static_cast<std::size_t>(S));
    EXPECT_NEAR(per_component / expected, 1.0, 0.2) << "S=" << S;
  }
}

// ---------------------------------------------------------------- metrics

TEST(Evaluate, ZeroAtTheStationaryPoint) {
  auto set = quadratic_for(AlgoKind::FedBiO, 3, 0.0, 0.5);
  // The hypergradient of a quadratic is affine: solve A x = -c from columns.
  const Index p = set.dim_x();
  const Vector c = exact_hypergradient(set, Vector::Zero(p)).grad;
  Matrix A(p, p);
  for (Index i = 0; i < p; ++i) {
    A.col(i) = exact_hypergradient(set, Vector::Unit(p, i)).grad - c;
  }
  const Vector xs = A.lu().solve(-c);
  set.x0 = xs;
  set.y0 = exact_lower_solution(set, xs);
  const auto cfg = config_for(AlgoKind::FedBiO, 3, 1);
  Federation fed(set, cfg, hp_for(set, cfg));
  const auto row = fed.evaluate();
  ASSERT_TRUE(row.grad_norm_sq.has_value());
  EXPECT_LE(*row.grad_norm_sq, 1e-12);
  EXPECT_LE(*row.lower_gap, 1e-20);
  ASSERT_TRUE(row.u_gap.has_value());
  EXPECT_FALSE(row.alpha.has_value());
  EXPECT_EQ(row.round, 0);
  EXPECT_EQ(row.iter, 0);
}

TEST(Evaluate, ColumnsTrackAlgorithmAndFamily) {
  const auto set = quadratic_for(AlgoKind::FedBiOAccLocal, 2);
  const auto cfg = config_for(AlgoKind::FedBiOAccLocal, 2, 3);
  Federation fed(set, cfg, hp_for(set, cfg));
  fed.run_round();
  const auto row = fed.evaluate();
  ASSERT_TRUE(row.alpha.has_value());
  EXPECT_EQ(*row.alpha, alpha(fed.hyperparams().schedule, 4));
  EXPECT_EQ(row.iter, 3);
  EXPECT_EQ(row.round, 1);
  EXPECT_FALSE(row.u_gap.has_value());
  EXPECT_FALSE(row.val_error.has_value());
  EXPECT_TRUE(row.lower_gap.has_value());

  DataCleaningConfig dc;
  dc.clients = 2;
  dc.classes = 2;
  dc.samples_per_client = 20;
  dc.val_per_client = 10;
  dc.test_per_client = 10;
  dc.feature_dim = 3;
  dc.rho = 0.5;
  const auto dset = make_data_cleaning(dc);
  const auto dcfg = config_for(AlgoKind::FedAvg, 2, 2);
  Federation dfed(dset, dcfg, hp_for(dset, dcfg));
  dfed.run_round();
  const auto drow = dfed.evaluate();
  ASSERT_TRUE(drow.val_error.has_value());
  EXPECT_GE(*drow.val_error, 0.0);
  EXPECT_LE(*drow.val_error, 1.0);
  EXPECT_EQ(drow.samples_per_client, 2u * 3u);
}

// ---------------------------------------------------------------- errors

TEST(Errors, InvalidConfigurationsThrow) {
  const auto shared = quadratic_for(AlgoKind::FedBiO, 3);
  const auto local = quadratic_for(AlgoKind::FedBiOLocal, 3);
  auto cfg = config_for(AlgoKind::FedBiO, 3, 1);
  const auto hp = hp_for(shared, cfg);
  EXPECT_THROW(Federation(local, cfg, hp), std::invalid_argument);
  cfg.algo = AlgoKind::FedBiOAccLocal;
  EXPECT_THROW(Federation(shared, cfg, hp), std::invalid_argument);
  cfg = config_for(AlgoKind::FedBiO, 4, 1);
  EXPECT_THROW(Federation(shared, cfg, hp), std::invalid_argument);
  cfg = config_for(AlgoKind::FedBiO, 3, 2);
  EXPECT_THROW(Federation(shared, cfg, hp), std::invalid_argument);  // I mismatch
  cfg = config_for(AlgoKind::FedBiO, 3, 1, 4);
  EXPECT_THROW(Federation(shared, cfg, hp), std::invalid_argument);
  cfg = config_for(AlgoKind::FedBiO, 3, 1);
  cfg.threads = 0;
  EXPECT_THROW(Federation(shared, cfg, hp), std::invalid_argument);
  // FedAvg runs on either lower structure.
  cfg = config_for(AlgoKind::FedAvg, 3, 1);
  EXPECT_NO_THROW(Federation(local, cfg, hp));
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(103);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, RethrowsLowestFailingIndex) {
  for (int threads : {1, 4}) {
    std::atomic<int> ran{0};
    try {
      parallel_for(20, threads, [&](std::size_t i) {
        ++ran;
        if (i == 7) throw std::runtime_error("seven");
        if (i == 13) throw std::runtime_error("thirteen");
      });
      FAIL() << "no exception";
    } catch (const std::runtime_error& e) {
      EXPECT_STREQ(e.what(), "seven");
    }
    if (threads > 1) EXPECT_EQ(ran.load(), 20);
  }
}
