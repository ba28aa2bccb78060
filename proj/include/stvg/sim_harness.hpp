#pragma once

// Desk-scale validation rig. Synthetic episodes carry one moving box and an
// annotated span; a tabular categorical policy picks a span, a box offset for
// the think tube and a refinement strength that pulls the pred tube back
// toward the observed track. Because every choice is discrete, log-probs are
// exact and the expected reward can be enumerated.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stvg/geometry.hpp"
#include "stvg/grpo.hpp"
#include "stvg/metrics.hpp"
#include "stvg/output_parser.hpp"
#include "stvg/random.hpp"
#include "stvg/reward.hpp"

namespace stvg {

struct EpisodeConfig {
  std::int64_t length{40};
  FrameDims dims{336, 252};
  double min_box_side{48.0};
  double max_box_side{112.0};
  double max_speed{2.5};  // pixels per frame along each axis
  std::int64_t min_span{6};
  std::int64_t max_span{20};
};

/// One video/query pair: the object's full track plus the annotated span.
struct SyntheticEpisode {
  std::int64_t length{0};
  std::vector<BoundingBox> track;  // one box per frame, frames [0, length)
  GroundTruthSample gt;
};

inline SyntheticEpisode make_episode(const EpisodeConfig& cfg, std::uint64_t seed,
                                     const std::string& id = "episode") {
  if (cfg.length < 1 || cfg.min_span < 1 || cfg.min_span > cfg.max_span || cfg.max_span > cfg.length) {
    throw std::invalid_argument("episode config has inconsistent lengths");
  }
  Rng rng(seed);
  const double W = cfg.dims.width;
  const double H = cfg.dims.height;
  const double w = rng.uniform(cfg.min_box_side, cfg.max_box_side);
  const double h = rng.uniform(cfg.min_box_side, cfg.max_box_side);
  const double vx = rng.uniform(-cfg.max_speed, cfg.max_speed);
  const double vy = rng.uniform(-cfg.max_speed, cfg.max_speed);
  const double travel = static_cast<double>(cfg.length - 1);
  // Pick the start so the whole trajectory stays inside the frame.
  const double cx_lo = w / 2 + std::max(0.0, -vx * travel);
  const double cx_hi = W - w / 2 - std::max(0.0, vx * travel);
  const double cy_lo = h / 2 + std::max(0.0, -vy * travel);
  const double cy_hi = H - h / 2 - std::max(0.0, vy * travel);
  if (cx_lo > cx_hi || cy_lo > cy_hi) throw std::invalid_argument("frame too small for episode motion");
  const double cx = rng.uniform(cx_lo, cx_hi);
  const double cy = rng.uniform(cy_lo, cy_hi);

  SyntheticEpisode ep;
  ep.length = cfg.length;
  ep.track.reserve(static_cast<std::size_t>(cfg.length));
  for (std::int64_t f = 0; f < cfg.length; ++f) {
    const double x = cx + vx * static_cast<double>(f);
    const double y = cy + vy * static_cast<double>(f);
    ep.track.push_back(canonicalize_box({x - w / 2, y - h / 2, x + w / 2, y + h / 2}, cfg.dims));
  }
  const std::int64_t span_len = rng.integer(cfg.min_span, cfg.max_span);
  const std::int64_t span_start = rng.integer(0, cfg.length - span_len);
  ep.gt.sample_id = id;
  ep.gt.gt_span = {span_start, span_start + span_len - 1};
  ep.gt.gt_tube.span = ep.gt.gt_span;
  ep.gt.gt_tube.boxes.assign(ep.track.begin() + span_start, ep.track.begin() + span_start + span_len);
  ep.gt.dims = cfg.dims;
  ep.gt.query = id;
  ep.gt.num_frames = cfg.length;
  validate(ep.gt);
  return ep;
}

struct PolicyGrid {
  std::int64_t episode_length{40};
  int offset_radius{1};       // offsets on a (2r+1)^2 grid
  double offset_step{16.0};   // pixels per offset cell
  std::size_t refine_bins{5};  // strengths 0, 1/(R-1), ..., 1

  std::size_t offset_bins() const {
    const auto side = static_cast<std::size_t>(2 * offset_radius + 1);
    return side * side;
  }
  std::size_t center_offset() const { return offset_bins() / 2; }

  double offset_dx(std::size_t k) const {
    const auto side = static_cast<std::size_t>(2 * offset_radius + 1);
    return offset_step * (static_cast<double>(k % side) - offset_radius);
  }
  double offset_dy(std::size_t k) const {
    const auto side = static_cast<std::size_t>(2 * offset_radius + 1);
    return offset_step * (static_cast<double>(k / side) - offset_radius);
  }
  double refine_strength(std::size_t j) const {
    return refine_bins < 2 ? 1.0 : static_cast<double>(j) / static_cast<double>(refine_bins - 1);
  }
};

struct ToyAction {
  std::int64_t start{0};
  std::int64_t end{0};
  std::size_t offset{0};
  std::size_t refine{0};

  friend bool operator==(const ToyAction&, const ToyAction&) = default;
};

/// Frames covered by an action's boxes. An inverted action (start > end)
/// still emits its literal "[start,end]" and fails the format check.
inline TemporalSpan action_span(const ToyAction& a) {
  return {std::min(a.start, a.end), std::max(a.start, a.end)};
}

inline BoundingBox think_box(const SyntheticEpisode& ep, const PolicyGrid& grid, std::int64_t frame,
                             std::size_t offset) {
  const BoundingBox& t = ep.track[static_cast<std::size_t>(frame)];
  const double dx = grid.offset_dx(offset);
  const double dy = grid.offset_dy(offset);
  return canonicalize_box({t.x1 + dx, t.y1 + dy, t.x2 + dx, t.y2 + dy}, ep.gt.dims);
}

/// Affine refinement: blend the think box toward the track box.
inline BoundingBox refine_box(const BoundingBox& think, const BoundingBox& track, double strength) {
  const double keep = 1.0 - strength;
  return {keep * think.x1 + strength * track.x1, keep * think.y1 + strength * track.y1,
          keep * think.x2 + strength * track.x2, keep * think.y2 + strength * track.y2};
}

inline ParsedOutput build_candidate(const SyntheticEpisode& ep, const PolicyGrid& grid, const ToyAction& a) {
  ParsedOutput out;
  const TemporalSpan frames = action_span(a);
  out.span = {a.start, a.end};
  out.think.span = frames;
  out.pred.span = frames;
  const double rho = grid.refine_strength(a.refine);
  for (std::int64_t f = frames.start; f <= frames.end; ++f) {
    const BoundingBox think = think_box(ep, grid, f, a.offset);
    out.think.boxes.push_back(think);
    out.pred.boxes.push_back(
        canonicalize_box(refine_box(think, ep.track[static_cast<std::size_t>(f)], rho), ep.gt.dims));
  }
  return out;
}

namespace detail {

inline void log_softmax(std::span<const double> z, std::span<double> out) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
}

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.size());
  log_softmax(z, p);
  for (double& v : p) v = std::exp(v);
  return p;
}

inline std::size_t sample_index(std::span<const double> probs, double u) {
  double c = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    c += probs[i];
    if (u < c) return i;
  }
  // u landed in the rounding gap above the cumulative sum.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

inline std::size_t argmax(std::span<const double> z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

}  // namespace detail

/// Tabular factorized categorical policy. Per context (episode): logits over
/// the two span endpoints and the think offset. Shared across contexts: logits
/// over refinement strength.
class ToyPolicy {
 public:
  using Action = ToyAction;

  ToyPolicy() = default;
  ToyPolicy(std::size_t contexts, const PolicyGrid& grid)
      : grid_(grid),
        contexts_(contexts),
        L_(static_cast<std::size_t>(grid.episode_length)),
        K_(grid.offset_bins()),
        R_(std::max<std::size_t>(grid.refine_bins, 1)),
        theta_(contexts * (2 * L_ + K_) + R_, 0.0) {
    if (grid.episode_length < 1) throw std::invalid_argument("episode_length must be positive");
  }

  const PolicyGrid& grid() const { return grid_; }
  std::size_t contexts() const { return contexts_; }
  std::size_t parameter_count() const { return theta_.size(); }
  std::span<double> parameters() { return theta_; }
  std::span<const double> parameters() const { return theta_; }

  std::span<const double> start_logits(std::size_t c) const { return block(c, 0, L_); }
  std::span<const double> end_logits(std::size_t c) const { return block(c, L_, L_); }
  std::span<const double> offset_logits(std::size_t c) const { return block(c, 2 * L_, K_); }
  std::span<const double> refine_logits() const {
    return std::span<const double>(theta_).subspan(contexts_ * (2 * L_ + K_), R_);
  }

  double log_prob(std::size_t c, const ToyAction& a) const {
    return factor_logp(start_logits(c), static_cast<std::size_t>(a.start)) +
           factor_logp(end_logits(c), static_cast<std::size_t>(a.end)) +
           factor_logp(offset_logits(c), a.offset) + factor_logp(refine_logits(), a.refine);
  }

  /// grad += w * d log pi(a | c) / d theta.
  void add_log_prob_gradient(std::size_t c, const ToyAction& a, double w, std::span<double> grad) const {
    const std::size_t base = c * (2 * L_ + K_);
    factor_grad(start_logits(c), static_cast<std::size_t>(a.start), w, grad.subspan(base, L_));
    factor_grad(end_logits(c), static_cast<std::size_t>(a.end), w, grad.subspan(base + L_, L_));
    factor_grad(offset_logits(c), a.offset, w, grad.subspan(base + 2 * L_, K_));
    factor_grad(refine_logits(), a.refine, w, grad.subspan(contexts_ * (2 * L_ + K_), R_));
  }

  ToyAction sample(std::size_t c, Rng& rng) const {
    ToyAction a;
    a.start = static_cast<std::int64_t>(detail::sample_index(detail::softmax(start_logits(c)), rng.uniform()));
    a.end = static_cast<std::int64_t>(detail::sample_index(detail::softmax(end_logits(c)), rng.uniform()));
    a.offset = detail::sample_index(detail::softmax(offset_logits(c)), rng.uniform());
    a.refine = detail::sample_index(detail::softmax(refine_logits()), rng.uniform());
    return a;
  }

  ToyAction greedy(std::size_t c) const {
    return {static_cast<std::int64_t>(detail::argmax(start_logits(c))),
            static_cast<std::int64_t>(detail::argmax(end_logits(c))), detail::argmax(offset_logits(c)),
            detail::argmax(refine_logits())};
  }

  /// Puts (numerically) all mass of context c and the refinement factor on `a`.
  void make_deterministic(std::size_t c, const ToyAction& a, double margin = 1e3) {
    const auto set = [&](std::size_t offset, std::size_t n, std::size_t hot) {
      for (std::size_t i = 0; i < n; ++i) theta_[offset + i] = (i == hot) ? margin : 0.0;
    };
    const std::size_t base = c * (2 * L_ + K_);
    set(base, L_, static_cast<std::size_t>(a.start));
    set(base + L_, L_, static_cast<std::size_t>(a.end));
    set(base + 2 * L_, K_, a.offset);
    set(contexts_ * (2 * L_ + K_), R_, a.refine);
  }

 private:
  std::span<const double> block(std::size_t c, std::size_t offset, std::size_t n) const {
    return std::span<const double>(theta_).subspan(c * (2 * L_ + K_) + offset, n);
  }

  static double factor_logp(std::span<const double> z, std::size_t idx) {
    std::vector<double> lp(z.size());
    detail::log_softmax(z, lp);
    return lp.at(idx);
  }

  static void factor_grad(std::span<const double> z, std::size_t idx, double w, std::span<double> g) {
    const auto p = detail::softmax(z);
    for (std::size_t i = 0; i < p.size(); ++i) g[i] -= w * p[i];
    g[idx] += w;
  }

  PolicyGrid grid_;
  std::size_t contexts_{0};
  std::size_t L_{0};
  std::size_t K_{0};
  std::size_t R_{0};
  std::vector<double> theta_;
};

static_assert(DifferentiablePolicy<ToyPolicy>);

/// A sampled group with everything needed for both scoring and the update.
struct ToyRollout {
  PolicyGroup<ToyAction> group;
  std::vector<std::string> outputs;
  std::vector<RewardBreakdown> breakdowns;
};

/// Samples n responses from `policy` for context c, scoring each output string
/// with the full reward. `reference` supplies the KL anchor log-probs.
inline ToyRollout rollout(const ToyPolicy& policy, const ToyPolicy& reference, const SyntheticEpisode& ep,
                          std::size_t context, std::size_t n, std::uint64_t seed,
                          const RewardConfig& reward_cfg = {}) {
  if (n < 2) throw GroupSizeError("rollout needs n >= 2");
  Rng rng(seed);
  ToyRollout out;
  out.group.context = context;
  RolloutGroup& g = out.group.rollouts;
  g.group_id = ep.gt.sample_id;
  for (std::size_t i = 0; i < n; ++i) {
    const ToyAction a = policy.sample(context, rng);
    out.group.actions.push_back(a);
    out.outputs.push_back(serialize_output(build_candidate(ep, policy.grid(), a)));
    out.breakdowns.push_back(total_reward(out.outputs.back(), ep.gt, reward_cfg));
    g.rewards.push_back(out.breakdowns.back().total);
    const double lp = policy.log_prob(context, a);
    g.logp.push_back(lp);
    g.logp_old.push_back(lp);
    g.logp_ref.push_back(reference.log_prob(context, a));
  }
  return out;
}

/// Reward components averaged under a policy's action distribution.
struct ExpectedReward {
  double total{0.0};
  double r_t{0.0};
  double r_spa_think{0.0};
  double r_spa_pred{0.0};
  double r_k{0.0};
  double viou{0.0};  // of the pred tube

  double refinement_gap() const { return r_spa_pred - r_spa_think; }
};

/// Exact expectation over the full candidate grid for one context. Per-frame
/// spatial terms are tabulated once per (offset, strength) and reduced with
/// prefix sums, so this is cheap enough to call during training.
inline ExpectedReward expected_reward(const ToyPolicy& policy, std::size_t context, const SyntheticEpisode& ep,
                                      const RewardConfig& cfg = {}) {
  const PolicyGrid& grid = policy.grid();
  const auto p_start = detail::softmax(policy.start_logits(context));
  const auto p_end = detail::softmax(policy.end_logits(context));
  const auto p_off = detail::softmax(policy.offset_logits(context));
  const auto p_ref = detail::softmax(policy.refine_logits());
  const std::size_t K = p_off.size();
  const std::size_t R = p_ref.size();
  const TemporalSpan gs = ep.gt.gt_span;
  const auto gl = static_cast<std::size_t>(gs.length());

  // prefix[k][f] and prefix_pred[k*R + j][f] over GT-span frames.
  std::vector<std::vector<double>> think_prefix(K, std::vector<double>(gl + 1, 0.0));
  std::vector<std::vector<double>> pred_prefix(K * R, std::vector<double>(gl + 1, 0.0));
  std::vector<std::vector<double>> iou_prefix(K * R, std::vector<double>(gl + 1, 0.0));
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < gl; ++i) {
      const std::int64_t f = gs.start + static_cast<std::int64_t>(i);
      const BoundingBox& gt_box = ep.gt.gt_tube.boxes[i];
      const BoundingBox think = think_box(ep, grid, f, k);
      think_prefix[k][i + 1] = think_prefix[k][i] + spatial_frame_term(think, gt_box, ep.gt.dims, cfg);
      for (std::size_t j = 0; j < R; ++j) {
        const BoundingBox pred = canonicalize_box(
            refine_box(think, ep.track[static_cast<std::size_t>(f)], grid.refine_strength(j)), ep.gt.dims);
        auto& pp = pred_prefix[k * R + j];
        pp[i + 1] = pp[i] + spatial_frame_term(pred, gt_box, ep.gt.dims, cfg);
        auto& ip = iou_prefix[k * R + j];
        ip[i + 1] = ip[i] + box_iou(pred, gt_box);
      }
    }
  }

  ExpectedReward e;
  for (std::size_t s = 0; s < p_start.size(); ++s) {
    for (std::size_t l = 0; l < p_end.size(); ++l) {
      const double w_span = p_start[s] * p_end[l];
      if (w_span == 0.0 || s > l) continue;  // inverted spans score 0
      const TemporalSpan span{static_cast<std::int64_t>(s), static_cast<std::int64_t>(l)};
      const double r_t = temporal_iou(span, gs);
      e.r_t += w_span * r_t;
      const auto inter = temporal_intersection(span, gs);
      if (!inter) {
        e.total += w_span * (2.0 + r_t);
        continue;
      }
      const auto a = static_cast<std::size_t>(inter->start - gs.start);
      const auto b = static_cast<std::size_t>(inter->end - gs.start) + 1;
      const double count = static_cast<double>(b - a);
      const double uni = static_cast<double>(span.length() + gs.length()) - count;
      for (std::size_t k = 0; k < K; ++k) {
        const double think = (think_prefix[k][b] - think_prefix[k][a]) / count;
        for (std::size_t j = 0; j < R; ++j) {
          const double w = w_span * p_off[k] * p_ref[j];
          const double pred = (pred_prefix[k * R + j][b] - pred_prefix[k * R + j][a]) / count;
          const double r_k = think_reward(pred, think);
          e.r_spa_think += w * think;
          e.r_spa_pred += w * pred;
          e.r_k += w * r_k;
          e.viou += w * (iou_prefix[k * R + j][b] - iou_prefix[k * R + j][a]) / uni;
          e.total += w * (2.0 + r_t + think + pred + cfg.lambda_k * r_k);
        }
      }
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Ground-truth perturbation probes

/// A well-formed output near the ground truth: the span is shifted and
/// stretched, and both tubes are jittered, all in proportion to `magnitude`
/// (relative to span length and box size). Magnitude 0 reproduces the ground
/// truth exactly.
inline std::string perturb_ground_truth(const GroundTruthSample& gt, double magnitude, std::uint64_t seed) {
  if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) {
    throw std::invalid_argument("perturbation magnitude must be finite and non-negative");
  }
  ParsedOutput out;
  if (magnitude == 0.0) {
    out.span = gt.gt_span;
    out.think = gt.gt_tube;
    out.pred = gt.gt_tube;
    return serialize_output(out);
  }
  Rng rng(seed);
  const std::int64_t len = gt.gt_span.length();
  const double scale = magnitude * static_cast<double>(len);
  auto shift = static_cast<std::int64_t>(std::llround(scale * (0.5 + 0.5 * rng.uniform())));
  const auto stretch = static_cast<std::int64_t>(std::llround(scale * (rng.uniform() - 0.5)));
  const std::int64_t new_len = std::max<std::int64_t>(1, len + stretch);
  const std::int64_t limit = gt.num_frames > 0 ? gt.num_frames : std::numeric_limits<std::int64_t>::max() / 4;
  bool forward = rng.coin();
  // Prefer the direction that keeps the span inside the video.
  if (forward && gt.gt_span.start + shift + new_len > limit) forward = false;
  if (!forward && gt.gt_span.start - shift < 0 && gt.gt_span.start + shift + new_len <= limit) forward = true;
  std::int64_t start = gt.gt_span.start + (forward ? shift : -shift);
  start = std::clamp<std::int64_t>(start, 0, limit - 1);
  out.span = {start, std::min(start + new_len - 1, limit - 1)};
  out.think.span = out.span;
  out.pred.span = out.span;

  const auto jitter = [&](const BoundingBox& b) {
    const double w = std::max(b.width(), 1.0);
    const double h = std::max(b.height(), 1.0);
    BoundingBox j{b.x1 + magnitude * w * rng.uniform(-1.0, 1.0), b.y1 + magnitude * h * rng.uniform(-1.0, 1.0),
                  b.x2 + magnitude * w * rng.uniform(-1.0, 1.0), b.y2 + magnitude * h * rng.uniform(-1.0, 1.0)};
    return canonicalize_box(j, gt.dims);
  };
  for (std::int64_t f = out.span.start; f <= out.span.end; ++f) {
    const BoundingBox& base = gt.gt_tube.at_frame(std::clamp(f, gt.gt_span.start, gt.gt_span.end));
    out.think.boxes.push_back(jitter(base));
    out.pred.boxes.push_back(jitter(base));
  }
  return serialize_output(out);
}

struct ProbeRow {
  double magnitude{0.0};
  double mean{0.0};
  double stddev{0.0};
  std::size_t samples{0};
};

struct ProbeReport {
  std::vector<ProbeRow> rows;
  // Index i flags rows[i+1].mean exceeding rows[i].mean by more than twice the
  // standard error of the difference.
  std::vector<std::size_t> inversions;
};

inline ProbeReport reward_monotonicity_probe(const GroundTruthSample& gt, std::span<const double> magnitudes,
                                             std::size_t seeds, std::uint64_t base_seed = 0,
                                             const RewardConfig& cfg = {}) {
  if (!std::is_sorted(magnitudes.begin(), magnitudes.end())) {
    throw std::invalid_argument("magnitudes must be sorted ascending");
  }
  ProbeReport report;
  for (std::size_t m = 0; m < magnitudes.size(); ++m) {
    std::vector<double> totals;
    totals.reserve(seeds);
    for (std::size_t s = 0; s < seeds; ++s) {
      const std::string out = perturb_ground_truth(gt, magnitudes[m], mix_seed(base_seed, m, s));
      totals.push_back(total_reward(out, gt, cfg).total);
    }
    report.rows.push_back({magnitudes[m], mean(totals), population_stddev(totals), totals.size()});
  }
  for (std::size_t i = 0; i + 1 < report.rows.size(); ++i) {
    const ProbeRow& a = report.rows[i];
    const ProbeRow& b = report.rows[i + 1];
    const auto se2 = [](const ProbeRow& r) {
      return r.samples > 0 ? r.stddev * r.stddev / static_cast<double>(r.samples) : 0.0;
    };
    if (b.mean - a.mean > 2.0 * std::sqrt(se2(a) + se2(b))) report.inversions.push_back(i);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Training

struct HarnessConfig {
  std::size_t episodes{5};
  EpisodeConfig episode;
  int offset_radius{2};
  double offset_step{8.0};
  std::size_t refine_bins{5};
  std::size_t iterations{500};
  std::size_t updates_per_batch{1};
  // Rollout groups drawn per episode per iteration.
  std::size_t groups_per_episode{4};
  std::size_t eval_every{50};
  // Allowed drop of the expected reward below its best-so-far value.
  double drawdown_tolerance{0.25};
  std::uint64_t seed{1};
  RewardConfig reward;
  // The toy policy has a few hundred logits, so it takes far larger steps
  // than an LLM fine-tune.
  GrpoConfig grpo{0.2, 0.04, 1e-6, 2.0, 8};

  PolicyGrid grid() const { return {episode.length, offset_radius, offset_step, refine_bins}; }
};

struct IterationLog {
  std::size_t iteration{0};
  StepStats stats;
};

struct CurvePoint {
  std::size_t iteration{0};
  double expected_total{0.0};
};

struct TrainingReport {
  std::vector<IterationLog> log;
  std::vector<CurvePoint> curve;  // exact expected reward, mean over episodes
  ExpectedReward final_expected;  // mean over episodes
  std::vector<ExpectedReward> per_episode;
  std::vector<RewardBreakdown> greedy_breakdowns;
  MetricsReport greedy_metrics;
  double best_expected{0.0};
  double max_drawdown{0.0};
  bool drawdown_ok{true};
};

struct TrainingDivergedError : std::runtime_error {
  TrainingDivergedError(std::size_t it, const std::string& what)
      : std::runtime_error("training diverged at iteration " + std::to_string(it) + ": " + what),
        iteration(it) {}
  std::size_t iteration;
};

inline std::vector<SyntheticEpisode> make_episodes(const HarnessConfig& cfg) {
  std::vector<SyntheticEpisode> eps;
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    eps.push_back(make_episode(cfg.episode, mix_seed(cfg.seed, 0xE9150DEULL, e), "episode-" + std::to_string(e)));
  }
  return eps;
}

inline ExpectedReward mean_expected_reward(const ToyPolicy& policy, std::span<const SyntheticEpisode> eps,
                                           const RewardConfig& cfg, std::vector<ExpectedReward>* per_episode = nullptr) {
  ExpectedReward m;
  const double inv = 1.0 / static_cast<double>(eps.size());
  for (std::size_t e = 0; e < eps.size(); ++e) {
    const ExpectedReward r = expected_reward(policy, e, eps[e], cfg);
    if (per_episode) per_episode->push_back(r);
    m.total += inv * r.total;
    m.r_t += inv * r.r_t;
    m.r_spa_think += inv * r.r_spa_think;
    m.r_spa_pred += inv * r.r_spa_pred;
    m.r_k += inv * r.r_k;
    m.viou += inv * r.viou;
  }
  return m;
}

/// rollout -> advantages -> GRPO step, repeated; a pure function of `cfg`.
/// `on_iteration`, when given, sees every log record as it is produced.
inline TrainingReport run_training(const HarnessConfig& cfg,
                                   const std::function<void(const IterationLog&)>& on_iteration = {}) {
  cfg.grpo.validate();
  if (cfg.episodes == 0) throw std::invalid_argument("harness needs at least one episode");
  const auto episodes = make_episodes(cfg);
  const PolicyGrid grid = cfg.grid();
  ToyPolicy policy(episodes.size(), grid);
  const ToyPolicy reference = policy;

  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const ToyAction optimal{episodes[e].gt.gt_span.start, episodes[e].gt.gt_span.end, grid.center_offset(), 0};
    const auto best = total_reward(serialize_output(build_candidate(episodes[e], grid, optimal)), episodes[e].gt,
                                   cfg.reward);
    if (best.total != kOptimalTotalReward) {
      throw std::logic_error("exact ground truth is not reachable by the policy grid");
    }
  }

  TrainingReport report;
  const auto evaluate = [&](std::size_t it) {
    const double v = mean_expected_reward(policy, episodes, cfg.reward).total;
    report.curve.push_back({it, v});
    report.best_expected = std::max(report.best_expected, v);
    report.max_drawdown = std::max(report.max_drawdown, report.best_expected - v);
  };
  evaluate(0);

  const std::size_t per_episode = std::max<std::size_t>(cfg.groups_per_episode, 1);
  std::vector<PolicyGroup<ToyAction>> groups(episodes.size() * per_episode);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (std::size_t e = 0; e < episodes.size(); ++e) {
      for (std::size_t q = 0; q < per_episode; ++q) {
        groups[e * per_episode + q] =
            rollout(policy, reference, episodes[e], e, cfg.grpo.group_size,
                    mix_seed(cfg.seed, it + 1, e * per_episode + q), cfg.reward)
                .group;
      }
    }
    IterationLog entry{it + 1, {}};
    for (std::size_t u = 0; u < std::max<std::size_t>(cfg.updates_per_batch, 1); ++u) {
      StepStats s;
      try {
        s = toy_policy_step(policy, std::span<const PolicyGroup<ToyAction>>(groups), cfg.grpo);
      } catch (const NonFiniteGradientError& e) {
        throw TrainingDivergedError(it + 1, e.what());
      }
      if (u == 0) entry.stats = s;
      if (!std::isfinite(s.objective)) throw TrainingDivergedError(it + 1, "non-finite objective");
      const auto theta = policy.parameters();
      if (!std::all_of(theta.begin(), theta.end(), [](double v) { return std::isfinite(v); })) {
        throw TrainingDivergedError(it + 1, "non-finite policy parameters (grad norm " +
                                                std::to_string(s.grad_norm) + ")");
      }
    }
    report.log.push_back(entry);
    if (on_iteration) on_iteration(entry);
    if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 && it + 1 != cfg.iterations) evaluate(it + 1);
  }
  evaluate(cfg.iterations);
  report.drawdown_ok = report.max_drawdown <= cfg.drawdown_tolerance;

  report.final_expected = mean_expected_reward(policy, episodes, cfg.reward, &report.per_episode);
  std::vector<PredictionRecord> preds;
  std::vector<GroundTruthSample> truth;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const ParsedOutput cand = build_candidate(episodes[e], grid, policy.greedy(e));
    report.greedy_breakdowns.push_back(total_reward(serialize_output(cand), episodes[e].gt, cfg.reward));
    preds.push_back({episodes[e].gt.sample_id, cand.span, cand.pred});
    truth.push_back(episodes[e].gt);
  }
  report.greedy_metrics = aggregate(preds, truth);
  return report;
}

}  // namespace stvg
