#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stvg/geometry.hpp"
#include "stvg/metrics.hpp"
#include "stvg/output_parser.hpp"
#include "stvg/reward.hpp"

namespace stvg::test {

inline GroundTruthSample make_gt(TemporalSpan span, std::vector<BoundingBox> boxes, FrameDims dims = {100, 100},
                                 std::string id = "s") {
  GroundTruthSample g;
  g.sample_id = std::move(id);
  g.gt_span = span;
  g.gt_tube = {span, std::move(boxes)};
  g.dims = dims;
  return g;
}

inline GroundTruthSample constant_gt(TemporalSpan span, BoundingBox box, FrameDims dims = {100, 100},
                                     std::string id = "s") {
  return make_gt(span, std::vector<BoundingBox>(static_cast<std::size_t>(span.length()), box), dims, std::move(id));
}

inline ParsedOutput output_for(const GroundTruthSample& g) { return {g.gt_span, g.gt_tube, g.gt_tube}; }

// Unit pixels [x, x+1) x [y, y+1) covered by an integer box.
inline bool covers(const BoundingBox& b, int x, int y) { return x >= b.x1 && x + 1 <= b.x2 && y >= b.y1 && y + 1 <= b.y2; }

/// IoU by counting unit pixels on an integer grid of side n.
inline double pixel_iou(const BoundingBox& a, const BoundingBox& b, int n) {
  long inter = 0;
  long uni = 0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const bool ia = covers(a, x, y);
      const bool ib = covers(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Random parseable output; box counts sometimes disagree with the span.
inline ParsedOutput random_output(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int64_t> start(0, 500);
  std::uniform_int_distribution<std::int64_t> len(1, 12);
  std::uniform_real_distribution<double> coord(-50.0, 2000.0);
  std::uniform_int_distribution<int> mode(0, 3);
  ParsedOutput p;
  p.span.start = start(rng);
  p.span.end = p.span.start + len(rng) - 1;
  p.think.span = p.pred.span = p.span;
  // Counts may disagree with the span: round trip holds for any parseable output.
  const auto n = static_cast<std::size_t>(mode(rng) == 0 ? len(rng) : p.span.length());
  const auto m = static_cast<std::size_t>(mode(rng) == 0 ? len(rng) : p.span.length());
  const auto box = [&] {
    double c[4];
    for (double& v : c) {
      v = coord(rng);
      if (mode(rng) == 0) v = std::round(v);
    }
    return BoundingBox{std::min(c[0], c[2]), std::min(c[1], c[3]), std::max(c[0], c[2]), std::max(c[1], c[3])};
  };
  for (std::size_t i = 0; i < n; ++i) p.think.boxes.push_back(box());
  for (std::size_t i = 0; i < m; ++i) p.pred.boxes.push_back(box());
  return p;
}

/// A few random byte-level edits biased toward the output grammar.
inline std::string mutate(std::string s, std::mt19937_64& rng) {
  static const std::string alphabet = "<>/[],.-+e0123456789 timethink_bboxpred_bbox\n\t";
  std::uniform_int_distribution<int> op(0, 3);
  const int edits = 1 + static_cast<int>(rng() % 4);
  for (int k = 0; k < edits; ++k) {
    const std::size_t at = s.empty() ? 0 : rng() % (s.size() + 1);
    switch (op(rng)) {
      case 0:
        if (!s.empty() && at < s.size()) s.erase(at, 1 + rng() % 3);
        break;
      case 1:
        s.insert(at, 1, alphabet[rng() % alphabet.size()]);
        break;
      case 2:
        if (at < s.size()) s[at] = static_cast<char>(rng() & 0xFF);
        break;
      default: {
        const std::size_t from = s.empty() ? 0 : rng() % s.size();
        s.insert(at, s.substr(from, rng() % 12));
      }
    }
  }
  return s;
}

struct RandomPair {
  PredictionRecord pred;
  GroundTruthSample gt;
};

inline RandomPair random_pair(std::mt19937_64& rng, int grid) {
  const auto span = [&] {
    const auto s = static_cast<std::int64_t>(rng() % 20);
    return TemporalSpan{s, s + static_cast<std::int64_t>(rng() % 10)};
  };
  const auto box = [&] {
    const auto c = [&] { return double(rng() % static_cast<unsigned>(grid + 1)); };
    return canonicalize_box({c(), c(), c(), c()}, {grid, grid});
  };
  const TemporalSpan ps = span();
  const TemporalSpan gs = span();
  RandomPair r;
  r.pred = {"p", ps, {ps, {}}};
  for (std::int64_t f = ps.start; f <= ps.end; ++f) r.pred.pred_tube.boxes.push_back(box());
  std::vector<BoundingBox> gb;
  for (std::int64_t f = gs.start; f <= gs.end; ++f) gb.push_back(box());
  r.gt = make_gt(gs, gb, {grid, grid}, "p");
  return r;
}

/// "p/q" or a plain number, as written by the Python oracles.
inline double fraction(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) return std::stod(s);
  return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
}

}  // namespace stvg::test
