#pragma once

// The five-part grounding reward: format, consistency, temporal IoU, spatial
// (GIoU minus normalized L1 over the temporal overlap, for both the think and
// pred tubes) and the think-improvement bonus, summed with weight lambda_k on
// the last term.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "stvg/geometry.hpp"
#include "stvg/output_parser.hpp"

namespace stvg {

struct GroundTruthSample {
  std::string sample_id;
  TemporalSpan gt_span;
  Tube gt_tube;
  FrameDims dims;
  std::string query;
  // Video length in sampled frames; 0 when unknown.
  std::int64_t num_frames{0};
  // Free-form dataset tag, e.g. "declarative" / "interrogative".
  std::string tag;

  friend bool operator==(const GroundTruthSample&, const GroundTruthSample&) = default;
};

/// Throws std::invalid_argument naming the first broken invariant.
inline void validate(const GroundTruthSample& gt) {
  const auto bad = [&](const std::string& what) {
    throw std::invalid_argument("sample '" + gt.sample_id + "': " + what);
  };
  if (!gt.dims.valid()) bad("frame dimensions must be positive");
  if (!gt.gt_span.valid()) bad("span must satisfy 0 <= t_s <= t_e");
  if (!(gt.gt_tube.span == gt.gt_span)) bad("tube span differs from sample span");
  if (!gt.gt_tube.aligned()) bad("tube needs exactly one box per span frame");
  if (gt.num_frames > 0 && gt.gt_span.end >= gt.num_frames) bad("span exceeds video length");
  for (const BoundingBox& b : gt.gt_tube.boxes) {
    if (!b.is_finite() || !(canonicalize_box(b, gt.dims) == b)) bad("box is not canonical");
  }
}

enum class SpatialTerm {
  Combined,  // GIoU - L1
  GiouOnly,  // GIoU
  L1Only,    // 1 - L1, so every variant peaks at 1 per frame
};

struct RewardConfig {
  double lambda_k{0.5};
  SpatialTerm spatial_term{SpatialTerm::Combined};
  // Clamp each per-frame spatial term below at 0.
  bool clamp_spatial{false};
};

struct RewardBreakdown {
  double r_f{0.0};
  double r_c{0.0};
  double r_t{0.0};
  double r_spa_think{0.0};
  double r_spa_pred{0.0};
  double r_s{0.0};
  double r_k{0.0};
  double total{0.0};
  bool parse_ok{false};
  std::optional<ParseFailure> failure;
};

/// IoU of two inclusive frame sets.
inline double temporal_iou(const TemporalSpan& a, const TemporalSpan& b) {
  const std::int64_t inter =
      std::max<std::int64_t>(0, std::min(a.end, b.end) - std::max(a.start, b.start) + 1);
  const std::int64_t uni = a.length() + b.length() - inter;
  if (uni <= 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double temporal_reward(const TemporalSpan& pred, const TemporalSpan& gt) {
  return temporal_iou(pred, gt);
}

inline std::optional<TemporalSpan> temporal_intersection(const TemporalSpan& pred,
                                                         const TemporalSpan& gt) {
  const TemporalSpan inter{std::max(pred.start, gt.start), std::min(pred.end, gt.end)};
  if (inter.start > inter.end) return std::nullopt;
  return inter;
}

inline double spatial_frame_term(const BoundingBox& box, const BoundingBox& gt_box,
                                 const FrameDims& dims, const RewardConfig& cfg = {}) {
  double term = 0.0;
  switch (cfg.spatial_term) {
    case SpatialTerm::Combined:
      term = box_giou(box, gt_box) - box_l1(box, gt_box, dims);
      break;
    case SpatialTerm::GiouOnly:
      term = box_giou(box, gt_box);
      break;
    case SpatialTerm::L1Only:
      term = 1.0 - box_l1(box, gt_box, dims);
      break;
  }
  return cfg.clamp_spatial ? std::max(term, 0.0) : term;
}

/// Mean per-frame spatial term over `inter`, indexing both tubes by absolute
/// frame id. Throws AlignmentError if either tube misses a frame of `inter`.
inline double spatial_stream_reward(const Tube& tube, const GroundTruthSample& gt,
                                    const TemporalSpan& inter, const RewardConfig& cfg = {}) {
  double sum = 0.0;
  for (std::int64_t f = inter.start; f <= inter.end; ++f) {
    sum += spatial_frame_term(tube.at_frame(f), gt.gt_tube.at_frame(f), gt.dims, cfg);
  }
  return sum / static_cast<double>(inter.length());
}

struct SpatialReward {
  double think{0.0};
  double pred{0.0};
  double total{0.0};
};

inline SpatialReward spatial_reward(const ParsedOutput& p, const GroundTruthSample& gt,
                                    const RewardConfig& cfg = {}) {
  if (check_consistency(p) == 0) return {};
  const auto inter = temporal_intersection(p.span, gt.gt_span);
  if (!inter) return {};
  SpatialReward r;
  r.think = spatial_stream_reward(p.think, gt, *inter, cfg);
  r.pred = spatial_stream_reward(p.pred, gt, *inter, cfg);
  r.total = r.think + r.pred;
  return r;
}

inline double think_reward(double r_spa_pred, double r_spa_think) {
  return std::max(r_spa_pred - r_spa_think, 0.0);
}

inline double combine_reward(const RewardBreakdown& b, double lambda_k) {
  return b.r_f + b.r_c + b.r_t + b.r_s + lambda_k * b.r_k;
}

/// Scores an already-parsed output (boxes expected clamped to gt.dims).
inline RewardBreakdown score_parsed(const ParseResult& parsed, const GroundTruthSample& gt,
                                    const RewardConfig& cfg = {}) {
  if (cfg.lambda_k < 0.0) throw std::invalid_argument("lambda_k must be non-negative");
  RewardBreakdown b;
  if (!parsed) {
    b.failure = parsed.failure();
    return b;
  }
  const ParsedOutput& p = parsed.value();
  b.parse_ok = true;
  b.r_f = 1.0;
  b.r_c = check_consistency(p);
  b.r_t = temporal_reward(p.span, gt.gt_span);
  const SpatialReward s = spatial_reward(p, gt, cfg);
  b.r_spa_think = s.think;
  b.r_spa_pred = s.pred;
  b.r_s = s.total;
  b.r_k = b.r_c > 0.0 ? think_reward(s.pred, s.think) : 0.0;
  b.total = combine_reward(b, cfg.lambda_k);
  return b;
}

/// Total reward of one raw output against one ground truth. Total over every
/// input string: a parse failure yields the all-zero breakdown.
inline RewardBreakdown total_reward(std::string_view raw, const GroundTruthSample& gt,
                                    const RewardConfig& cfg = {}) {
  return score_parsed(parse_output(raw, gt.dims), gt, cfg);
}

/// Largest total any output can reach: each of format, consistency and
/// temporal gives 1, each spatial stream gives at most 1, and the think bonus
/// is 0 when both streams are perfect. Holds for lambda_k <= 1; above that a
/// deliberately bad think tube can buy more bonus than it costs.
inline constexpr double kOptimalTotalReward = 5.0;

}  // namespace stvg
