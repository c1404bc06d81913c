#include <numbers>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "scanflow/drift.hpp"
#include "selector_oracle.hpp"
#include "support.hpp"

using namespace scanflow;

TEST(Quantile, InterpolatesAtNMinusOneQ) {
  std::vector<double> v{10, 1, 9, 2, 8, 3, 7, 4, 6, 5};
  EXPECT_EQ(quantile(v, 0.8), 8.2);
  EXPECT_EQ(quantile(v, 0.0), 1.0);
  EXPECT_EQ(quantile(v, 1.0), 10.0);
  EXPECT_EQ(quantile(v, 0.5), 5.5);
  EXPECT_EQ(quantile({3.5}, 0.37), 3.5);
  EXPECT_THROW(quantile({}, 0.5), EmptyInput);
  EXPECT_THROW(quantile({1, 2}, 1.5), InvalidConfig);
}

TEST(Quantile, MatchesOracleOnRandomVectors) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0, 10);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng() % 50);
    for (auto& x : v) x = g(rng);
    double q = std::uniform_real_distribution<double>(0, 1)(rng);
    EXPECT_EQ(quantile(v, q), test::oracle_quantile(v, q));
  }
}

TEST(Kde, SinglePointPeak) {
  Kde k({0.0}, 1.0);
  EXPECT_NEAR(k(0.0), 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-9);
  EXPECT_NEAR(k(0.0), 0.398942280401, 1e-12);
  Kde wide({0.0}, 2.0);
  EXPECT_NEAR(wide(0.0), 0.5 * 0.398942280401, 1e-12);
}

TEST(Kde, NonnegativeAndIntegratesToOne) {
  std::mt19937_64 rng(1);
  std::gamma_distribution<double> g(2.0, 5.0);
  std::vector<double> pts(100);
  for (auto& p : pts) p = g(rng);
  for (double h : {0.3, 1.0, 4.0}) {
    Kde k(pts, h);
    double lo = *std::min_element(pts.begin(), pts.end()) - 8 * h;
    double hi = *std::max_element(pts.begin(), pts.end()) + 8 * h;
    const int steps = 20000;
    double dx = (hi - lo) / steps, area = 0, prev = k(lo);
    for (int i = 1; i <= steps; ++i) {
      double cur = k(lo + i * dx);
      EXPECT_GE(cur, 0.0);
      area += 0.5 * (prev + cur) * dx;
      prev = cur;
    }
    EXPECT_NEAR(area, 1.0, 1e-2) << "h=" << h;
  }
}

TEST(Kde, BadBandwidthRejected) {
  EXPECT_THROW(Kde({1.0}, 0.0), InvalidBandwidth);
  EXPECT_THROW(Kde({1.0}, -1.0), InvalidBandwidth);
  EXPECT_THROW(Kde({1.0}, NAN), InvalidBandwidth);
  EXPECT_THROW(Kde({}, 1.0), EmptyInput);
}

TEST(Selector, ConfigValidation) {
  SelectorConfig c;
  EXPECT_NO_THROW(validate(c));
  c.initial_quantile_high = 0.5;
  EXPECT_THROW(validate(c), InvalidConfig);
  c = {};
  c.n_critical = 0;
  EXPECT_THROW(validate(c), InvalidConfig);
  c = {};
  c.width = 0;
  EXPECT_THROW(validate(c), InvalidConfig);
  c = {};
  c.bandwidth = -1;
  EXPECT_THROW(validate(c), InvalidBandwidth);
}

TEST(Selector, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 500; ++t) {
    auto c = test::random_oracle_case(rng);
    SelectorConfig cfg;
    cfg.n_critical = c.n_critical;
    cfg.bandwidth = c.h;
    auto rep = select_critical(c.train, c.test, cfg);
    ASSERT_EQ(rep.indices, test::oracle_select(c)) << "case " << t;
  }
}

TEST(Selector, ReportInvariants) {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 200; ++t) {
    auto c = test::random_oracle_case(rng);
    SelectorConfig cfg;
    cfg.n_critical = c.n_critical;
    auto rep = select_critical(c.train, c.test, cfg);
    EXPECT_LE(rep.size(), cfg.n_critical);
    EXPECT_EQ(std::set<std::size_t>(rep.indices.begin(), rep.indices.end()).size(), rep.size());
    for (std::size_t i = 0; i < rep.size(); ++i) {
      EXPECT_LT(rep.indices[i], c.test.size());
      double l = c.test[rep.indices[i]];
      EXPECT_EQ(rep.losses[i], l);
      EXPECT_TRUE(l > rep.thresholds.high || l < rep.thresholds.low);
      if (i) {
        EXPECT_GE(rep.densities[i - 1], rep.densities[i]);
      }
    }
    for (std::size_t k = 1; k < rep.trials.size(); ++k) {
      EXPECT_LE(rep.trials[k].high, rep.trials[k - 1].high);
      EXPECT_GE(rep.trials[k].low, rep.trials[k - 1].low);
      EXPECT_NEAR(rep.trials[k].quantile_high, rep.trials[k - 1].quantile_high - 0.1, 1e-12);
    }
    EXPECT_LE(rep.trials.size(), 3u);
    EXPECT_EQ(rep.flagged, rep.trials.back().flagged);
  }
}

TEST(Selector, SameDistributionGivesExactlyNFromTails) {
  std::vector<double> train(100);
  for (std::size_t i = 0; i < 100; ++i) train[i] = static_cast<double>(i);
  SelectorConfig cfg;
  cfg.n_critical = 5;
  auto rep = select_critical(train, train, cfg);
  ASSERT_EQ(rep.size(), 5u);
  EXPECT_EQ(rep.trials.size(), 1u);
  for (double l : rep.losses) EXPECT_TRUE(l > 79.2 || l < 19.8);
  EXPECT_EQ(rep.indices, test::oracle_select({train, train, 5, std::nullopt}));
}

TEST(Selector, ConstantTrainLossesFlagAllOrNone) {
  std::vector<double> train(50, 3.0);
  SelectorConfig cfg;
  cfg.n_critical = 4;
  auto none = select_critical(train, std::vector<double>(10, 3.0), cfg);
  EXPECT_TRUE(none.empty());
  EXPECT_EQ(none.trials.size(), 3u);
  EXPECT_EQ(none.trials[0].low, none.trials[0].high);
  auto all = select_critical(train, {1, 5, 7, 2}, cfg);
  EXPECT_EQ(all.flagged, 4u);
  EXPECT_EQ(all.size(), 4u);
}

TEST(Selector, FewerFlaggedThanRequestedNoPadding) {
  std::vector<double> train(100);
  for (std::size_t i = 0; i < 100; ++i) train[i] = static_cast<double>(i);
  SelectorConfig cfg;
  cfg.n_critical = 50;
  auto rep = select_critical(train, {50, 51, 200, -4}, cfg);
  EXPECT_EQ(rep.size(), 2u);
  EXPECT_EQ(rep.trials.size(), 3u);
}

TEST(Selector, SingleFlaggedUsesFallbackBandwidth) {
  std::vector<double> train(100);
  for (std::size_t i = 0; i < 100; ++i) train[i] = static_cast<double>(i);
  SelectorConfig cfg;
  cfg.n_critical = 1;
  auto rep = select_critical(train, {50, 500}, cfg);
  ASSERT_EQ(rep.size(), 1u);
  EXPECT_EQ(rep.bandwidth, kFallbackBandwidth);
  EXPECT_NEAR(rep.densities[0], 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-12);
}

TEST(Selector, StochasticModeIsSeededSubset) {
  std::mt19937_64 rng(5);
  auto c = test::random_oracle_case(rng);
  SelectorConfig cfg;
  cfg.n_critical = 10;
  cfg.stochastic = true;
  cfg.seed = 3;
  auto a = select_critical(c.train, c.test, cfg);
  auto b = select_critical(c.train, c.test, cfg);
  EXPECT_EQ(a.indices, b.indices);
  cfg.stochastic = false;
  auto det = select_critical(c.train, c.test, cfg);
  EXPECT_EQ(a.size(), det.size());
}

namespace {

struct Digits {
  Dataset train, test;
};

const Digits& digits() {
  static Digits d = [] {
    auto base = load_idx_dataset(std::filesystem::path(SCANFLOW_DATA_DIR) / "digits8-images-idx3-ubyte",
                                 std::filesystem::path(SCANFLOW_DATA_DIR) / "digits8-labels-idx1-ubyte");
    auto [a, b] = split(base, 1200, 500, 0);
    return Digits{synthesize_digits(a, 600, 1), synthesize_digits(b, 300, 2)};
  }();
  return d;
}

}  // namespace

TEST(DriftChecker, CleanTestFlagsAboutFortyPercent) {
  SelectorConfig cfg;
  cfg.n_critical = 10;
  DriftDetector det(nn::autoencoder_small(), {10, 32, 0.0005, 0}, cfg);
  auto rep = det.check(digits().train, digits().test);
  double frac = static_cast<double>(rep.trials[0].flagged) / static_cast<double>(digits().test.size());
  EXPECT_NEAR(frac, 0.4, 0.1);
  EXPECT_EQ(rep.samples.dim(0), rep.size());
  // Cached: a second check does not retrain.
  det.check(digits().train, digits().test);
  EXPECT_EQ(det.trainings(), 1u);
}

TEST(DriftChecker, GaussianCorruptionFlagsHighSide) {
  SelectorConfig cfg;
  cfg.n_critical = 50;
  DriftDetector det(nn::autoencoder_small(), {10, 32, 0.0005, 0}, cfg);
  auto noisy = corrupt(digits().test, {CorruptionKind::kGaussianNoise, 5, 1});
  auto rep = det.check(digits().train, noisy);
  std::size_t above = 0, flagged = 0;
  for (double l : rep.test_losses) {
    if (l > rep.thresholds.high) ++above;
    if (l > rep.thresholds.high || l < rep.thresholds.low) ++flagged;
  }
  EXPECT_GE(static_cast<double>(above), 0.8 * static_cast<double>(flagged));
}

// A test set made only of corrupted digits, all four kinds mixed.
TEST(DriftChecker, SelectedLossesAboveUnselectedOnCorruptedSet) {
  SelectorConfig cfg;
  cfg.n_critical = 50;
  DriftDetector det(nn::autoencoder_small(), {10, 32, 0.0005, 0}, cfg);
  const auto& t = digits().test;
  Dataset mixed;
  for (std::size_t k = 0; k < std::size(kAllCorruptions); ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = k; i < t.size(); i += std::size(kAllCorruptions)) rows.push_back(i);
    auto part = corrupt(t.subset(rows), {kAllCorruptions[k], 5, k});
    mixed = mixed.size() ? concat(mixed, part) : part;
  }
  auto rep = det.check(digits().train, mixed);
  std::set<std::size_t> sel(rep.indices.begin(), rep.indices.end());
  ASSERT_EQ(sel.size(), 50u);
  double s = 0, u = 0;
  for (std::size_t i = 0; i < rep.test_losses.size(); ++i) (sel.contains(i) ? s : u) += rep.test_losses[i];
  EXPECT_GT(s / sel.size(), u / (rep.test_losses.size() - sel.size()));
}

TEST(DriftChecker, ErrorsAndLogging) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  LocalTracker tr(st);
  SelectorConfig cfg;
  cfg.n_critical = 5;
  Dataset empty{Tensor<float>({0, 28, 28}), std::nullopt, "empty"};
  DriftDetector det(nn::autoencoder_small(), {1, 32, 0.0005, 0}, cfg);
  EXPECT_THROW(det.check(digits().train, empty), EmptyInput);
  auto rep = det.check(digits().train, digits().test);
  log_report(tr, "r", "checker", rep);
  auto m = st.gather_log({"r", "checker", "drift/selected"});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(std::get<double>(m[0].value), 5.0);
  auto arts = st.gather_log({"r", "checker", std::nullopt, MetaKind::kArtifactRef});
  EXPECT_EQ(arts.size(), 2u);
  Dataset small{Tensor<float>({3, 8, 8}), std::nullopt, "small"};
  EXPECT_THROW(det.check(digits().train, small), ShapeError);
}

TEST(DriftChecker, CorruptedCopiesReconstructWorseInMedian) {
  SelectorConfig cfg;
  DriftDetector det(nn::autoencoder_small(), {10, 32, 0.0005, 0}, cfg);
  auto& ae = det.autoencoder(digits().train);
  auto noisy = corrupt(digits().train, {CorruptionKind::kGaussianNoise, 5, 2});
  auto clean_l = nn::reconstruction_losses(ae, digits().train.batch());
  auto noisy_l = nn::reconstruction_losses(ae, noisy.batch());
  EXPECT_LE(quantile(clean_l, 0.5), quantile(noisy_l, 0.5));
}
