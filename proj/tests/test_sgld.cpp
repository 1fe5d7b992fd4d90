#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fedppd/sgld.hpp"
#include "oracle.hpp"

using namespace fedppd;
using fedppd::oracle::ChainResult;
using fedppd::oracle::ConjugateGaussian;
using fedppd::oracle::random_matrix;
using fedppd::oracle::run_conjugate_chain;

TEST(Sgld, HandExample) {
  // log_joint = -theta^2 / 2 at theta = 1 has gradient -1.
  std::vector<double> theta{1.0};
  const std::vector<double> g{-theta[0]};
  langevin_update(theta, g, 0.1, nullptr);
  EXPECT_DOUBLE_EQ(theta[0], 0.95);
}

TEST(Sgld, StepSchedule) {
  SgldConfig c;
  c.step_size = 0.1;
  EXPECT_EQ(c.step_at(0), 0.1);
  EXPECT_EQ(c.step_at(1000), 0.1);
  c.decay_tau = 10.0;
  c.decay_kappa = 0.5;
  EXPECT_DOUBLE_EQ(c.step_at(0), 0.1);
  EXPECT_DOUBLE_EQ(c.step_at(30), 0.1 / 2.0);
  c.decay_kappa = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.decay_kappa = 0.5;
  c.step_size = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Sgld, ZeroNoiseMatchesPlainGradientAscentBitwise) {
  Rng rng(4);
  const ModelSpec s{5, {7}, 3, Role::teacher};
  const ParamVector start = init_params(s, rng);
  const Matrix x = random_matrix(40, 5, rng);
  std::vector<int> y(40);
  for (int& v : y) v = static_cast<int>(rng.index(3));

  ParamVector a = start;
  ParamVector b = start;
  const double alpha = 1e-3;
  for (std::size_t t = 0; t < 25; ++t) {
    const std::size_t lo = (t * 8) % 40;
    std::vector<std::size_t> rows{lo, lo + 1, lo + 2, lo + 3, lo + 4, lo + 5, lo + 6, lo + 7};
    const Matrix xb = select_rows(x, rows);
    std::vector<int> yb;
    for (std::size_t r : rows) yb.push_back(y[r]);
    a = sgld_step(s, std::move(a), xb, yb, alpha, PriorHyper{0.0}, 40, nullptr);
    const auto vg = log_joint_and_grad(s, b, xb, yb, PriorHyper{0.0}, 40);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += (alpha / 2.0) * vg.grad[i];
  }
  EXPECT_EQ(a, b);
  EXPECT_NE(a, start);
}

TEST(Sgld, InjectedNoiseVarianceMatchesStepSize) {
  const double alpha = 0.03;
  std::vector<double> params(100000, 0.0);
  const std::vector<double> zero(params.size(), 0.0);
  Rng rng(12);
  langevin_update(params, zero, alpha, &rng);
  const double var = oracle::sample_var(params);
  EXPECT_NEAR(var / alpha, 1.0, 0.05);
  EXPECT_NEAR(oracle::sample_mean(params), 0.0, 5.0 * std::sqrt(alpha / 1e5));
}

TEST(Sgld, NonFiniteGradientIsRejected) {
  std::vector<double> theta{1.0};
  const std::vector<double> g{std::nan("")};
  EXPECT_THROW(langevin_update(theta, g, 0.1, nullptr), NumericError);
}

TEST(Sgld, ConjugatePosteriorMoments) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ChainResult r = run_conjugate_chain(seed);
    const double mu = r.model.posterior_mean();
    const double var = r.model.posterior_var();
    const double sd = std::sqrt(var);
    EXPECT_LT(std::abs(oracle::sample_mean(r.samples) - mu), 0.05 * sd) << "seed " << seed;
    EXPECT_LT(std::abs(oracle::sample_var(r.samples) / var - 1.0), 0.2) << "seed " << seed;
    EXPECT_LT(oracle::ks_normal(r.samples, mu, sd), 0.1) << "seed " << seed;
  }
}

TEST(Sgld, MapTrackerKeepsStrictImprovements) {
  MapTracker t;
  EXPECT_TRUE(t.empty());
  EXPECT_THROW(t.best(), ArgumentError);
  const ParamVector a(std::vector<double>{1.0});
  const ParamVector b(std::vector<double>{2.0});
  const ParamVector c(std::vector<double>{3.0});
  EXPECT_TRUE(t.offer(-5.0, a));
  EXPECT_EQ(t.best(), a);
  EXPECT_TRUE(t.offer(-2.0, b));
  EXPECT_FALSE(t.offer(-3.0, c));
  EXPECT_EQ(t.best(), b);
  EXPECT_EQ(t.best_log_joint(), -2.0);
  EXPECT_FALSE(t.offer(-2.0, c));
  EXPECT_EQ(t.best(), b);
}

TEST(Sgld, FirstOfferIsAcceptedEvenAtMinusInfinity) {
  MapTracker t;
  const ParamVector a(std::vector<double>{1.0});
  EXPECT_TRUE(t.offer(-std::numeric_limits<double>::infinity(), a));
  EXPECT_FALSE(t.empty());
}

TEST(Sgld, SeededChainIsReproducible) {
  const ChainResult a = run_conjugate_chain(9);
  const ChainResult b = run_conjugate_chain(9);
  EXPECT_EQ(a.samples, b.samples);
}
