#pragma once

// Grounding metrics: mean temporal IoU, mean tube IoU (vIoU) and the share of
// samples whose vIoU exceeds each threshold R.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "stvg/geometry.hpp"
#include "stvg/reward.hpp"

namespace stvg {

struct PredictionRecord {
  std::string sample_id;
  TemporalSpan pred_span;
  Tube pred_tube;
};

struct ReportingError : std::runtime_error {
  explicit ReportingError(std::vector<std::string> ids)
      : std::runtime_error(describe(ids)), missing_ids(std::move(ids)) {}
  std::vector<std::string> missing_ids;

 private:
  static std::string describe(const std::vector<std::string>& ids) {
    std::string s = "no ground truth for sample id(s):";
    for (const auto& id : ids) s += " " + id;
    return s;
  }
};

inline const std::vector<double> kDefaultThresholds = {0.3, 0.5};

struct MetricsReport {
  double m_tiou{0.0};
  double m_viou{0.0};
  // threshold -> fraction of samples with vIoU strictly above it
  std::map<double, double> viou_at;
  std::size_t n_samples{0};
};

/// Same function as the temporal reward.
inline double tiou(const TemporalSpan& pred, const TemporalSpan& gt) { return temporal_iou(pred, gt); }

/// Sum of per-frame box IoU over the frames both tubes cover, divided by the
/// number of frames either tube covers.
inline double viou(const PredictionRecord& pred, const GroundTruthSample& gt) {
  const auto inter = temporal_intersection(pred.pred_span, gt.gt_span);
  if (!inter) return 0.0;
  double sum = 0.0;
  for (std::int64_t f = inter->start; f <= inter->end; ++f) {
    sum += box_iou(pred.pred_tube.at_frame(f), gt.gt_tube.at_frame(f));
  }
  const std::int64_t uni = pred.pred_span.length() + gt.gt_span.length() - inter->length();
  return sum / static_cast<double>(uni);
}

struct SampleScore {
  std::string sample_id;
  double tiou{0.0};
  double viou{0.0};
};

inline SampleScore score_sample(const PredictionRecord& pred, const GroundTruthSample& gt) {
  return {pred.sample_id, tiou(pred.pred_span, gt.gt_span), viou(pred, gt)};
}

inline MetricsReport aggregate_scores(std::span<const SampleScore> scores,
                                      std::span<const double> thresholds = kDefaultThresholds) {
  MetricsReport report;
  report.n_samples = scores.size();
  for (double r : thresholds) report.viou_at[r] = 0.0;
  if (scores.empty()) return report;
  const double inv = 1.0 / static_cast<double>(scores.size());
  // Sums run over sorted values so the result is independent of batch order.
  std::vector<double> t_vals;
  std::vector<double> v_vals;
  std::map<double, std::size_t> above;
  for (const SampleScore& s : scores) {
    t_vals.push_back(s.tiou);
    v_vals.push_back(s.viou);
    for (double r : thresholds) {
      if (s.viou > r) ++above[r];
    }
  }
  std::sort(t_vals.begin(), t_vals.end());
  std::sort(v_vals.begin(), v_vals.end());
  double t_sum = 0.0;
  double v_sum = 0.0;
  for (double t : t_vals) t_sum += t;
  for (double v : v_vals) v_sum += v;
  report.m_tiou = t_sum * inv;
  report.m_viou = v_sum * inv;
  for (const auto& [r, count] : above) report.viou_at[r] = static_cast<double>(count) * inv;
  return report;
}

/// Scores every prediction against the ground truth with the same sample id.
/// Throws ReportingError listing prediction ids with no ground truth.
inline MetricsReport aggregate(std::span<const PredictionRecord> preds,
                               std::span<const GroundTruthSample> truth,
                               std::span<const double> thresholds = kDefaultThresholds) {
  std::unordered_map<std::string, const GroundTruthSample*> by_id;
  for (const auto& gt : truth) by_id.emplace(gt.sample_id, &gt);
  std::vector<std::string> missing;
  std::vector<SampleScore> scores;
  scores.reserve(preds.size());
  for (const auto& p : preds) {
    const auto it = by_id.find(p.sample_id);
    if (it == by_id.end()) {
      missing.push_back(p.sample_id);
      continue;
    }
    scores.push_back(score_sample(p, *it->second));
  }
  if (!missing.empty()) throw ReportingError(std::move(missing));
  return aggregate_scores(scores, thresholds);
}

/// Plain-text table in the usual column order, values in percent.
inline std::string format_table(const MetricsReport& r) {
  std::vector<std::pair<std::string, double>> cols = {{"m_tIoU", r.m_tiou}, {"m_vIoU", r.m_viou}};
  for (const auto& [t, v] : r.viou_at) {
    char name[32];
    std::snprintf(name, sizeof(name), "vIoU@%g", t);
    cols.emplace_back(name, v);
  }
  std::string header;
  std::string values;
  for (const auto& [name, v] : cols) {
    char cell[32];
    std::snprintf(cell, sizeof(cell), "%.1f", 100.0 * v);
    const std::size_t w = std::max<std::size_t>(name.size(), 6) + 2;
    header += std::string(w - name.size(), ' ') + name;
    values += std::string(w - std::string(cell).size(), ' ') + cell;
  }
  return header + "\n" + values + "\n";
}

}  // namespace stvg
