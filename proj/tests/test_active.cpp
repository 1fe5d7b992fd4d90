#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fedppd/active.hpp"
#include "oracle.hpp"

using namespace fedppd;

namespace {

struct ActiveSetup {
  FederationConfig cfg;
  Dataset pool;
  std::vector<std::vector<std::size_t>> client_rows;
  Matrix unlabeled;
  Dataset test;
};

ActiveSetup active_setup(std::uint64_t seed = 5) {
  ActiveSetup s;
  const Dataset all = gen_synthetic({3, 4, 150, 0.4}, seed);
  PartitionRequest req;
  req.clients = 3;
  req.sizes = {80};
  req.server_unlabeled = 20;
  req.test_size = 90;
  const PartitionPlan plan = partition(all.labels, all.classes, req, seed);
  s.pool = all;
  s.client_rows = plan.clients;
  s.unlabeled = select_rows(all.features, plan.server_unlabeled);
  s.test = all.subset(plan.test);
  s.cfg.teacher = ModelSpec{4, {8}, 3, Role::teacher};
  s.cfg.student = ModelSpec{4, {8}, 3, Role::student};
  s.cfg.local_epochs = 2;
  s.cfg.sgld.burn_in = 2;
  s.cfg.seed = seed;
  return s;
}

}  // namespace

TEST(Active, SelectBatchOrderAndTies) {
  const std::vector<double> s{0.1, 0.7, 0.3, 0.7, 0.0};
  EXPECT_EQ(select_batch(s, 3), (std::vector<std::size_t>{1, 3, 2}));
  EXPECT_EQ(select_batch(s, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(select_batch(s, 0).size(), 0u);
  EXPECT_EQ(select_batch(s, 99).size(), 5u);
  EXPECT_TRUE(select_batch(std::vector<double>{}, 3).empty());
}

TEST(Active, SelectBatchPicksTheHighestScores) {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> s(1 + rng.index(40));
    for (double& v : s) v = static_cast<double>(rng.index(10));
    const std::size_t b = rng.index(s.size() + 2);
    const auto picks = select_batch(s, b);
    std::vector<double> sorted = s;
    std::sort(sorted.rbegin(), sorted.rend());
    for (std::size_t i = 0; i < picks.size(); ++i) EXPECT_EQ(s[picks[i]], sorted[i]);
    EXPECT_EQ(std::set<std::size_t>(picks.begin(), picks.end()).size(), picks.size());
  }
}

TEST(Active, UniformPredictionHasMaximalEntropy) {
  EXPECT_NEAR(predictive_entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-15);
  EXPECT_GT(predictive_entropy(std::vector<double>{0.5, 0.5, 0.0}),
            predictive_entropy(std::vector<double>{0.9, 0.05, 0.05}));
}

TEST(Active, RandomSelectionIsAPartialPermutation) {
  Rng a(3);
  Rng b(3);
  const auto p = select_random(20, 7, a);
  EXPECT_EQ(p, select_random(20, 7, b));
  EXPECT_EQ(p.size(), 7u);
  EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 7u);
  for (std::size_t v : p) EXPECT_LT(v, 20u);
  EXPECT_EQ(select_random(4, 10, a).size(), 4u);
}

TEST(Active, AcquireMovesRows) {
  ClientPools p;
  p.labeled = {1, 5};
  p.unlabeled = {0, 2, 3, 4, 6};
  acquire(p, std::vector<std::size_t>{3, 0});
  EXPECT_EQ(p.labeled, (std::vector<std::size_t>{0, 1, 4, 5}));
  EXPECT_EQ(p.unlabeled, (std::vector<std::size_t>{2, 3, 6}));
  ASSERT_EQ(p.history.size(), 1u);
  EXPECT_EQ(p.history[0], (std::vector<std::size_t>{4, 0}));
  EXPECT_NO_THROW(p.check(7));
  EXPECT_THROW(p.check(8), ProtocolError);
  EXPECT_THROW(acquire(p, std::vector<std::size_t>{1, 1}), ArgumentError);
  EXPECT_THROW(acquire(p, std::vector<std::size_t>{3}), ArgumentError);
  p.unlabeled.push_back(1);
  EXPECT_THROW(p.check(8), ProtocolError);
}

TEST(Active, MakePoolsSplitsEachClient) {
  const std::vector<std::vector<std::size_t>> rows{{0, 1, 2, 3, 4}, {5, 6, 7, 8}};
  const auto pools = make_pools(rows, 2, 9);
  ASSERT_EQ(pools.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(pools[k].labeled.size(), 2u);
    pools[k].check(rows[k].size());
    std::vector<std::size_t> all = pools[k].labeled;
    all.insert(all.end(), pools[k].unlabeled.begin(), pools[k].unlabeled.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, rows[k]);
  }
  EXPECT_THROW(make_pools(rows, 4, 9), ArgumentError);
  EXPECT_THROW(make_pools(rows, 0, 9), ArgumentError);
}

TEST(Active, LoopKeepsPoolInvariantsAndGrowsLabels) {
  ActiveSetup st = active_setup();
  ActiveConfig ac;
  ac.rounds = 3;
  ac.budget = 10;
  ac.initial_labeled = 20;
  ac.fed_rounds = 1;
  for (Acquisition acq : {Acquisition::entropy, Acquisition::random}) {
    ac.acquisition = acq;
    const auto pools = make_pools(st.client_rows, ac.initial_labeled, st.cfg.seed);
    const ActiveResult r = run_active_loop(ac, st.cfg, st.pool, pools, st.unlabeled, st.test);
    ASSERT_EQ(r.curve.size(), 4u);
    for (std::size_t i = 0; i < r.curve.size(); ++i) {
      EXPECT_EQ(r.curve[i].active_round, i);
      EXPECT_DOUBLE_EQ(r.curve[i].labeled_per_client, 20.0 + 10.0 * static_cast<double>(i));
      EXPECT_EQ(r.curve[i].acquisition, to_string(acq));
    }
    EXPECT_EQ(r.records.size(), 4u);
    for (std::size_t k = 0; k < r.pools.size(); ++k) {
      r.pools[k].check(st.client_rows[k].size());
      EXPECT_EQ(r.pools[k].history.size(), 3u);
    }
  }
}

TEST(Active, EntropyPicksTheMostUncertainRows) {
  ActiveSetup st = active_setup();
  ActiveConfig ac;
  ac.rounds = 1;
  ac.budget = 5;
  ac.initial_labeled = 20;
  ac.fed_rounds = 1;
  const auto pools = make_pools(st.client_rows, ac.initial_labeled, st.cfg.seed);
  GlobalModels g;
  const ActiveResult r = run_active_loop(ac, st.cfg, st.pool, pools, st.unlabeled, st.test,
                                         [&](const RunRecord& rec, const GlobalModels& m) {
                                           if (rec.round == 0) g = m;
                                         });
  for (std::size_t k = 0; k < pools.size(); ++k) {
    const Matrix x = select_rows(st.pool.features, pools[k].unlabeled);
    const std::vector<double> h = row_entropies(predict_proba(st.cfg.student, g.student, x));
    std::vector<double> sorted = h;
    std::sort(sorted.rbegin(), sorted.rend());
    const auto& got = r.pools[k].history[0];
    ASSERT_EQ(got.size(), 5u);
    for (std::size_t i = 0; i < got.size(); ++i) {
      const auto pos = std::find(pools[k].unlabeled.begin(), pools[k].unlabeled.end(), got[i]) -
                       pools[k].unlabeled.begin();
      EXPECT_EQ(h[static_cast<std::size_t>(pos)], sorted[i]);
    }
  }
}

TEST(Active, RandomAcquisitionIgnoresTheModel) {
  ActiveSetup st = active_setup();
  ActiveConfig ac;
  ac.rounds = 2;
  ac.budget = 7;
  ac.initial_labeled = 20;
  ac.fed_rounds = 1;
  ac.acquisition = Acquisition::random;
  const auto pools = make_pools(st.client_rows, ac.initial_labeled, st.cfg.seed);
  const ActiveResult a = run_active_loop(ac, st.cfg, st.pool, pools, st.unlabeled, st.test);
  FederationConfig other = st.cfg;
  other.local_epochs = 1;
  other.sgld.step_size *= 3.0;
  const ActiveResult b = run_active_loop(ac, other, st.pool, pools, st.unlabeled, st.test);
  for (std::size_t k = 0; k < pools.size(); ++k) EXPECT_EQ(a.pools[k].history, b.pools[k].history);
}

TEST(Active, StopsWhenPoolsAreEmpty) {
  ActiveSetup st = active_setup();
  ActiveConfig ac;
  ac.rounds = 10;
  ac.budget = 100;
  ac.initial_labeled = 70;
  ac.fed_rounds = 1;
  const auto pools = make_pools(st.client_rows, ac.initial_labeled, st.cfg.seed);
  const ActiveResult r = run_active_loop(ac, st.cfg, st.pool, pools, st.unlabeled, st.test);
  EXPECT_EQ(r.curve.size(), 2u);
  for (const ClientPools& p : r.pools) EXPECT_TRUE(p.unlabeled.empty());
}

TEST(Active, CurveCsvLayout) {
  const std::vector<CurvePoint> c{{0, 20.0, "entropy", 3, 0.5}};
  EXPECT_EQ(curve_csv(c), "active_round,labeled_per_client,acquisition,seed,test_accuracy\n0,20,entropy,3,0.5\n");
}
