#include <gtest/gtest.h>

#include <limits>
#include <set>

#include "stvg/sim_harness.hpp"

namespace stvg {
namespace {

TEST(MakeEpisode, DeterministicAndInsideFrame) {
  EpisodeConfig cfg;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto a = make_episode(cfg, s, "e");
    const auto b = make_episode(cfg, s, "e");
    EXPECT_EQ(a.gt, b.gt);
    EXPECT_EQ(a.track, b.track);
    ASSERT_EQ(a.track.size(), 40u);
    for (const auto& box : a.track) {
      EXPECT_GE(box.x1, 0.0);
      EXPECT_GE(box.y1, 0.0);
      EXPECT_LE(box.x2, cfg.dims.width);
      EXPECT_LE(box.y2, cfg.dims.height);
      EXPECT_GT(box.area(), 0.0);
    }
    EXPECT_GE(a.gt.gt_span.length(), cfg.min_span);
    EXPECT_LE(a.gt.gt_span.length(), cfg.max_span);
    EXPECT_LT(a.gt.gt_span.end, 40);
  }
  EXPECT_NE(make_episode(cfg, 1).gt, make_episode(cfg, 2).gt);
}

TEST(MakeEpisode, RejectsInconsistentConfig) {
  EpisodeConfig cfg;
  cfg.max_span = 50;
  EXPECT_THROW(make_episode(cfg, 1), std::invalid_argument);
}

TEST(PerturbGroundTruth, ZeroMagnitudeIsExact) {
  const auto ep = make_episode({}, 3);
  const std::string s = perturb_ground_truth(ep.gt, 0.0, 99);
  EXPECT_EQ(s, serialize_output({ep.gt.gt_span, ep.gt.gt_tube, ep.gt.gt_tube}));
  EXPECT_EQ(total_reward(s, ep.gt).total, kOptimalTotalReward);
}

TEST(PerturbGroundTruth, WellFormedAndInsideVideo) {
  for (std::uint64_t e = 0; e < 20; ++e) {
    const auto ep = make_episode({}, e);
    for (double m : {0.05, 0.3, 1.0, 3.0}) {
      const auto r = parse_output(perturb_ground_truth(ep.gt, m, e * 7 + 1));
      ASSERT_TRUE(r.ok());
      EXPECT_EQ(check_consistency(r.value()), 1);
      EXPECT_GE(r.value().span.start, 0);
      EXPECT_LT(r.value().span.end, ep.length);
    }
  }
  EXPECT_THROW(perturb_ground_truth(make_episode({}, 1).gt, -0.1, 0), std::invalid_argument);
}

TEST(PerturbGroundTruth, LargeMagnitudeGivesDisjointSpan) {
  // A 6-frame span at the start of a 40-frame video: magnitude 3 shifts it by
  // at least 9 frames.
  GroundTruthSample gt = make_episode({}, 5).gt;
  gt.gt_span = {0, 5};
  gt.gt_tube.span = gt.gt_span;
  gt.gt_tube.boxes.resize(6, gt.gt_tube.boxes.front());
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto b = total_reward(perturb_ground_truth(gt, 3.0, s), gt);
    ASSERT_TRUE(b.parse_ok);
    EXPECT_EQ(b.r_t, 0.0);
    EXPECT_EQ(b.r_s, 0.0);
  }
}

TEST(MonotonicityProbe, Examples) {
  const auto ep = make_episode({}, 11);
  const std::vector<double> mags = {0.0, 0.1, 0.3, 0.6};
  const auto report = reward_monotonicity_probe(ep.gt, mags, 200, 1);
  ASSERT_EQ(report.rows.size(), 4u);
  EXPECT_TRUE(report.inversions.empty());
  for (std::size_t i = 1; i < report.rows.size(); ++i) EXPECT_LE(report.rows[i].mean, report.rows[i - 1].mean);

  const std::vector<double> zero = {0.0};
  const auto z = reward_monotonicity_probe(ep.gt, zero, 200);
  EXPECT_EQ(z.rows[0].mean, kOptimalTotalReward);
  EXPECT_EQ(z.rows[0].stddev, 0.0);

  EXPECT_TRUE(reward_monotonicity_probe(ep.gt, {}, 200).rows.empty());
  const std::vector<double> unsorted = {0.3, 0.1};
  EXPECT_THROW(reward_monotonicity_probe(ep.gt, unsorted, 10), std::invalid_argument);
}

TEST(MonotonicityProbe, HoldsAcrossEpisodes) {
  const std::vector<double> mags = {0.0, 0.05, 0.1, 0.2, 0.4, 0.8};
  for (std::uint64_t e = 0; e < 10; ++e) {
    const auto report = reward_monotonicity_probe(make_episode({}, e).gt, mags, 200, e);
    EXPECT_TRUE(report.inversions.empty()) << "episode " << e;
  }
}

TEST(ToyPolicy, ProbabilitiesNormalize) {
  const PolicyGrid grid{6, 1, 8.0, 3};
  ToyPolicy p(1, grid);
  Rng rng(4);
  for (double& t : p.parameters()) t = rng.uniform(-2.0, 2.0);
  double total = 0.0;
  for (std::int64_t s = 0; s < 6; ++s)
    for (std::int64_t e = 0; e < 6; ++e)
      for (std::size_t k = 0; k < grid.offset_bins(); ++k)
        for (std::size_t j = 0; j < 3; ++j) total += std::exp(p.log_prob(0, {s, e, k, j}));
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(ToyPolicy, ExactGroundTruthReachable) {
  HarnessConfig cfg;
  const auto grid = cfg.grid();
  for (const auto& ep : make_episodes(cfg)) {
    const ToyAction best{ep.gt.gt_span.start, ep.gt.gt_span.end, grid.center_offset(), grid.refine_bins - 1};
    EXPECT_EQ(total_reward(serialize_output(build_candidate(ep, grid, best)), ep.gt).total, kOptimalTotalReward);
  }
}

TEST(ToyPolicy, InvertedSpanFailsFormat) {
  const auto ep = make_episode({}, 2);
  const PolicyGrid grid;
  const auto b = total_reward(serialize_output(build_candidate(ep, grid, {9, 4, 0, 0})), ep.gt);
  EXPECT_FALSE(b.parse_ok);
  EXPECT_EQ(b.total, 0.0);
}

TEST(Rollout, DeterministicPolicyGivesDegenerateGroup) {
  const auto ep = make_episode({}, 8);
  const PolicyGrid grid;
  ToyPolicy p(1, grid);
  p.make_deterministic(0, {ep.gt.gt_span.start + 1, ep.gt.gt_span.end, 2, 1});
  const auto r = rollout(p, p, ep, 0, 8, 123);
  ASSERT_EQ(r.outputs.size(), 8u);
  EXPECT_EQ(std::set<std::string>(r.outputs.begin(), r.outputs.end()).size(), 1u);
  for (double a : group_advantages(r.group.rollouts.rewards)) EXPECT_EQ(a, 0.0);
}

TEST(Rollout, SeededGroupIsReproducible) {
  const auto ep = make_episode({}, 8);
  const ToyPolicy p(1, PolicyGrid{});
  const auto a = rollout(p, p, ep, 0, 8, 77);
  const auto b = rollout(p, p, ep, 0, 8, 77);
  EXPECT_EQ(a.outputs, b.outputs);
  EXPECT_EQ(a.group.rollouts.rewards, b.group.rollouts.rewards);
  EXPECT_EQ(a.group.rollouts.logp, b.group.rollouts.logp);
  EXPECT_EQ(a.group.actions, b.group.actions);
  EXPECT_NE(a.outputs, rollout(p, p, ep, 0, 8, 78).outputs);
  EXPECT_THROW(rollout(p, p, ep, 0, 1, 1), GroupSizeError);
}

TEST(Rollout, DefaultGroupSizeIsEight) {
  HarnessConfig cfg;
  EXPECT_EQ(cfg.grpo.group_size, 8u);
  EXPECT_EQ(cfg.reward.lambda_k, 0.5);
  EXPECT_EQ(cfg.grpo.delta, 1e-6);
}

// Enumerates every action and scores its serialized output.
ExpectedReward brute_force_expectation(const ToyPolicy& p, const SyntheticEpisode& ep, const RewardConfig& cfg) {
  const PolicyGrid& grid = p.grid();
  ExpectedReward e;
  for (std::int64_t s = 0; s < grid.episode_length; ++s)
    for (std::int64_t t = 0; t < grid.episode_length; ++t)
      for (std::size_t k = 0; k < grid.offset_bins(); ++k)
        for (std::size_t j = 0; j < grid.refine_bins; ++j) {
          const ToyAction a{s, t, k, j};
          const double w = std::exp(p.log_prob(0, a));
          const ParsedOutput cand = build_candidate(ep, grid, a);
          const auto b = total_reward(serialize_output(cand), ep.gt, cfg);
          e.total += w * b.total;
          e.r_t += w * b.r_t;
          e.r_spa_think += w * b.r_spa_think;
          e.r_spa_pred += w * b.r_spa_pred;
          e.r_k += w * b.r_k;
          if (b.parse_ok) e.viou += w * viou({"", cand.span, cand.pred}, ep.gt);
        }
  return e;
}

TEST(ExpectedReward, MatchesEnumeration) {
  EpisodeConfig ec;
  ec.length = 10;
  ec.min_span = 2;
  ec.max_span = 6;
  const PolicyGrid grid{10, 1, 12.0, 3};
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto ep = make_episode(ec, seed);
    ToyPolicy p(1, grid);
    Rng rng(seed);
    for (double& t : p.parameters()) t = rng.uniform(-1.5, 1.5);
    for (const RewardConfig cfg : {RewardConfig{}, RewardConfig{0.0, SpatialTerm::GiouOnly},
                                   RewardConfig{2.0, SpatialTerm::L1Only}}) {
      const auto fast = expected_reward(p, 0, ep, cfg);
      const auto slow = brute_force_expectation(p, ep, cfg);
      EXPECT_NEAR(fast.total, slow.total, 1e-10);
      EXPECT_NEAR(fast.r_t, slow.r_t, 1e-10);
      EXPECT_NEAR(fast.r_spa_think, slow.r_spa_think, 1e-10);
      EXPECT_NEAR(fast.r_spa_pred, slow.r_spa_pred, 1e-10);
      EXPECT_NEAR(fast.r_k, slow.r_k, 1e-10);
      EXPECT_NEAR(fast.viou, slow.viou, 1e-10);
    }
  }
}

HarnessConfig short_config() {
  HarnessConfig cfg;
  cfg.episodes = 2;
  cfg.iterations = 40;
  cfg.groups_per_episode = 2;
  cfg.eval_every = 10;
  return cfg;
}

TEST(RunTraining, ZeroLearningRateKeepsCurveFlat) {
  auto cfg = short_config();
  cfg.grpo.learning_rate = 0.0;
  const auto r = run_training(cfg);
  ASSERT_EQ(r.curve.size(), 5u);
  for (const auto& p : r.curve) EXPECT_EQ(p.expected_total, r.curve.front().expected_total);
}

TEST(RunTraining, DeterministicPerSeed) {
  const auto cfg = short_config();
  const auto a = run_training(cfg);
  const auto b = run_training(cfg);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].stats.objective, b.log[i].stats.objective);
    EXPECT_EQ(a.log[i].stats.grad_norm, b.log[i].stats.grad_norm);
  }
  EXPECT_EQ(a.final_expected.total, b.final_expected.total);
  auto other = cfg;
  other.seed = 2;
  EXPECT_NE(run_training(other).final_expected.total, a.final_expected.total);
}

TEST(RunTraining, ImprovesExpectedReward) {
  const auto r = run_training(short_config());
  EXPECT_GT(r.final_expected.total, r.curve.front().expected_total + 0.5);
  EXPECT_EQ(r.greedy_breakdowns.size(), 2u);
  EXPECT_EQ(r.greedy_metrics.n_samples, 2u);
  EXPECT_EQ(r.log.size(), 40u);
  EXPECT_TRUE(r.drawdown_ok);
}

TEST(RunTraining, OnIterationSeesEveryRecord) {
  std::size_t seen = 0;
  run_training(short_config(), [&](const IterationLog& l) { EXPECT_EQ(l.iteration, ++seen); });
  EXPECT_EQ(seen, 40u);
}

TEST(RunTraining, RejectsInvalidConfig) {
  auto cfg = short_config();
  cfg.episodes = 0;
  EXPECT_THROW(run_training(cfg), std::invalid_argument);
  cfg = short_config();
  cfg.grpo.group_size = 1;
  EXPECT_THROW(run_training(cfg), GroupSizeError);
}

TEST(RunTraining, DivergenceIsReported) {
  auto cfg = short_config();
  cfg.grpo.learning_rate = std::numeric_limits<double>::infinity();
  EXPECT_THROW(run_training(cfg), TrainingDivergedError);
}

}  // namespace
}  // namespace stvg
