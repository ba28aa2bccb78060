#pragma once

// Annotation and prediction file ingestion, batch scoring and metric
// evaluation. Frames are the only time base past this layer: seconds and
// source-video frame numbers are converted to sampled-frame indices on load.
// File layouts are documented in docs/file_formats.md.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include <json.hpp>

#include "stvg/geometry.hpp"
#include "stvg/metrics.hpp"
#include "stvg/output_parser.hpp"
#include "stvg/reward.hpp"

namespace stvg {

using Json = nlohmann::json;

/// Bad input data (as opposed to bad usage). Carries the record index and the
/// offending field when known.
struct DataError : std::runtime_error {
  DataError(const std::string& what, std::optional<std::size_t> rec = std::nullopt, std::string fld = {})
      : std::runtime_error(describe(what, rec, fld)), record(rec), field(std::move(fld)) {}
  std::optional<std::size_t> record;
  std::string field;

 private:
  static std::string describe(const std::string& what, std::optional<std::size_t> rec, const std::string& fld) {
    std::string s;
    if (rec) s += "record " + std::to_string(*rec) + ": ";
    if (!fld.empty()) s += "field '" + fld + "': ";
    return s + what;
  }
};

inline constexpr double kDefaultFps = 2.0;

enum class AnnotationFormat { Native, Hcstvg, Vidstg };

inline AnnotationFormat parse_annotation_format(std::string_view tag) {
  if (tag == "native") return AnnotationFormat::Native;
  if (tag == "hcstvg") return AnnotationFormat::Hcstvg;
  if (tag == "vidstg") return AnnotationFormat::Vidstg;
  throw std::invalid_argument("unknown annotation format '" + std::string(tag) + "'");
}

struct AnnotationFile {
  double fps{kDefaultFps};
  std::vector<GroundTruthSample> samples;

  const GroundTruthSample* find(std::string_view id) const {
    if (index_.size() != samples.size()) rebuild_index();
    const auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &samples[it->second];
  }

 private:
  void rebuild_index() const {
    index_.clear();
    for (std::size_t i = 0; i < samples.size(); ++i) index_.emplace(samples[i].sample_id, i);
  }
  mutable std::unordered_map<std::string, std::size_t> index_;
};

inline std::int64_t seconds_to_frame(double seconds, double fps) {
  return static_cast<std::int64_t>(std::llround(seconds * fps));
}

inline double frame_to_seconds(std::int64_t frame, double fps) { return static_cast<double>(frame) / fps; }

namespace detail {

template <class T>
T field_as(const Json& rec, const char* key, std::size_t index) {
  if (!rec.contains(key)) throw DataError("missing", index, key);
  try {
    return rec.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw DataError(std::string("wrong type (") + e.what() + ")", index, key);
  }
}

inline BoundingBox box_from_corners(const Json& j, std::size_t index, const char* key) {
  if (!j.is_array() || j.size() != 4) throw DataError("box must be [x1,y1,x2,y2]", index, key);
  for (const auto& v : j) {
    if (!v.is_number()) throw DataError("box coordinates must be numbers", index, key);
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline void finish_sample(GroundTruthSample& s, std::size_t index) {
  try {
    for (auto& b : s.gt_tube.boxes) b = canonicalize_box(b, s.dims);
    s.gt_tube.span = s.gt_span;
    validate(s);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what(), index);
  }
}

inline GroundTruthSample native_sample(const Json& rec, double fps, std::size_t index) {
  if (!rec.is_object()) throw DataError("sample must be an object", index);
  GroundTruthSample s;
  s.sample_id = field_as<std::string>(rec, "sample_id", index);
  s.query = rec.value("query", std::string{});
  s.tag = rec.value("tag", std::string{});
  s.dims = {field_as<int>(rec, "width", index), field_as<int>(rec, "height", index)};
  if (!s.dims.valid()) throw DataError("frame dimensions must be positive", index, "width");
  s.num_frames = rec.value("num_frames", std::int64_t{0});
  const double sample_fps = rec.value("fps", fps);
  if (rec.contains("span")) {
    const auto span = field_as<std::vector<std::int64_t>>(rec, "span", index);
    if (span.size() != 2) throw DataError("span must be [t_s,t_e]", index, "span");
    s.gt_span = {span[0], span[1]};
  } else if (rec.contains("span_seconds")) {
    const auto secs = field_as<std::vector<double>>(rec, "span_seconds", index);
    if (secs.size() != 2) throw DataError("span_seconds must be [start,end]", index, "span_seconds");
    s.gt_span = {seconds_to_frame(secs[0], sample_fps), seconds_to_frame(secs[1], sample_fps)};
  } else {
    throw DataError("missing", index, "span");
  }
  if (!s.gt_span.valid()) throw DataError("span must satisfy 0 <= t_s <= t_e", index, "span");
  if (!rec.contains("boxes") || !rec.at("boxes").is_array()) throw DataError("missing or not an array", index, "boxes");
  for (const auto& b : rec.at("boxes")) s.gt_tube.boxes.push_back(box_from_corners(b, index, "boxes"));
  if (static_cast<std::int64_t>(s.gt_tube.boxes.size()) != s.gt_span.length()) {
    throw DataError("expected " + std::to_string(s.gt_span.length()) + " boxes for the span, got " +
                        std::to_string(s.gt_tube.boxes.size()),
                    index, "boxes");
  }
  finish_sample(s, index);
  return s;
}

// Sampled frame j of a source video at `src_fps`, re-sampled at `fps`.
inline std::int64_t source_frame(std::int64_t sampled, double fps, double src_fps) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(sampled) * src_fps / fps));
}

// Source-frame interval [first, last] mapped onto sampled frames, keeping at
// least one frame.
inline TemporalSpan sampled_span(std::int64_t first, std::int64_t last, double fps, double src_fps) {
  const double k = fps / src_fps;
  auto ts = static_cast<std::int64_t>(std::ceil(static_cast<double>(first) * k - 1e-9));
  auto te = static_cast<std::int64_t>(std::floor(static_cast<double>(last) * k + 1e-9));
  if (ts > te) ts = te = static_cast<std::int64_t>(std::llround(0.5 * static_cast<double>(first + last) * k));
  return {ts, te};
}

inline std::vector<GroundTruthSample> hcstvg_samples(const Json& doc, double fps) {
  if (!doc.is_object()) throw DataError("hcstvg annotations must be an object keyed by video name");
  std::vector<GroundTruthSample> out;
  std::size_t index = 0;
  for (const auto& [video, rec] : doc.items()) {
    if (!rec.is_object()) throw DataError("entry must be an object", index);
    GroundTruthSample s;
    s.sample_id = video;
    s.query = rec.contains("English") ? field_as<std::string>(rec, "English", index)
                                      : rec.value("caption", std::string{});
    if (rec.contains("img_hw")) {
      const auto hw = field_as<std::vector<int>>(rec, "img_hw", index);
      if (hw.size() != 2) throw DataError("img_hw must be [height,width]", index, "img_hw");
      s.dims = {hw[1], hw[0]};
    } else {
      s.dims = {field_as<int>(rec, "width", index), field_as<int>(rec, "height", index)};
    }
    const auto src_fps = field_as<double>(rec, "fps", index);
    if (!(src_fps > 0.0)) throw DataError("must be positive", index, "fps");
    const auto st = field_as<std::int64_t>(rec, "st_frame", index);
    const auto ed = field_as<std::int64_t>(rec, "ed_frame", index);
    if (st < 0 || st > ed) throw DataError("st_frame must not exceed ed_frame", index, "st_frame");
    const auto img_num = field_as<std::int64_t>(rec, "img_num", index);
    if (!rec.contains("bbox") || !rec.at("bbox").is_array()) throw DataError("missing or not an array", index, "bbox");
    const Json& xywh = rec.at("bbox");
    if (static_cast<std::int64_t>(xywh.size()) != ed - st + 1) {
      throw DataError("needs one [x,y,w,h] per source frame st_frame..ed_frame", index, "bbox");
    }
    s.gt_span = sampled_span(st, ed, fps, src_fps);
    if (img_num <= ed) throw DataError("must exceed ed_frame", index, "img_num");
    s.num_frames = static_cast<std::int64_t>(std::floor(static_cast<double>(img_num - 1) * fps / src_fps)) + 1;
    for (std::int64_t j = s.gt_span.start; j <= s.gt_span.end; ++j) {
      const auto k = std::clamp<std::int64_t>(source_frame(j, fps, src_fps) - st, 0, ed - st);
      const Json& b = xywh[static_cast<std::size_t>(k)];
      const BoundingBox r = box_from_corners(b, index, "bbox");
      s.gt_tube.boxes.push_back({r.x1, r.y1, r.x1 + r.x2, r.y1 + r.y2});
    }
    finish_sample(s, index);
    out.push_back(std::move(s));
    ++index;
  }
  return out;
}

inline std::vector<GroundTruthSample> vidstg_samples(const Json& doc, double fps) {
  const Json& list = doc.is_object() && doc.contains("videos") ? doc.at("videos") : doc;
  if (!list.is_array()) throw DataError("vidstg annotations must be an array of video records");
  std::vector<GroundTruthSample> out;
  for (std::size_t index = 0; index < list.size(); ++index) {
    const Json& rec = list[index];
    if (!rec.is_object()) throw DataError("video record must be an object", index);
    const auto vid = field_as<std::string>(rec, "vid", index);
    const auto src_fps = field_as<double>(rec, "fps", index);
    if (!(src_fps > 0.0)) throw DataError("must be positive", index, "fps");
    const auto frame_count = field_as<std::int64_t>(rec, "frame_count", index);
    const FrameDims dims{field_as<int>(rec, "width", index), field_as<int>(rec, "height", index)};
    if (!rec.contains("temporal_gt")) throw DataError("missing", index, "temporal_gt");
    const Json& tg = rec.at("temporal_gt");
    const auto begin = field_as<std::int64_t>(tg, "begin_fid", index);
    const auto end_excl = field_as<std::int64_t>(tg, "end_fid", index);
    if (begin < 0 || end_excl <= begin) throw DataError("need 0 <= begin_fid < end_fid", index, "temporal_gt");
    if (end_excl > frame_count) throw DataError("end_fid exceeds frame_count", index, "temporal_gt");
    if (!rec.contains("trajectories") || !rec.at("trajectories").is_array()) {
      throw DataError("missing or not an array", index, "trajectories");
    }
    const Json& traj = rec.at("trajectories");

    // Box of object `tid` at source frame `f`, searching outward within the
    // annotated interval when that exact frame is unlabeled.
    const auto box_at = [&](std::int64_t tid, std::int64_t f) -> BoundingBox {
      for (std::int64_t d = 0; d < end_excl - begin; ++d) {
        for (const std::int64_t g : {f - d, f + d}) {
          if (g < begin || g >= end_excl || g >= static_cast<std::int64_t>(traj.size())) continue;
          for (const auto& obj : traj[static_cast<std::size_t>(g)]) {
            if (obj.value("tid", std::int64_t{-1}) != tid) continue;
            const Json& b = obj.at("bbox");
            return {b.at("xmin").get<double>(), b.at("ymin").get<double>(), b.at("xmax").get<double>(),
                    b.at("ymax").get<double>()};
          }
        }
      }
      throw DataError("target " + std::to_string(tid) + " has no box inside temporal_gt", index, "trajectories");
    };

    const auto emit = [&](const char* key, const char* tag, const char* prefix) {
      if (!rec.contains(key)) return;
      const Json& items = rec.at(key);
      for (std::size_t k = 0; k < items.size(); ++k) {
        GroundTruthSample s;
        s.sample_id = vid + "#" + prefix + std::to_string(k);
        s.query = items[k].value("description", std::string{});
        s.tag = tag;
        s.dims = dims;
        s.num_frames = static_cast<std::int64_t>(std::floor(static_cast<double>(frame_count - 1) * fps / src_fps)) + 1;
        s.gt_span = sampled_span(begin, end_excl - 1, fps, src_fps);
        const auto tid = field_as<std::int64_t>(items[k], "target_id", index);
        for (std::int64_t j = s.gt_span.start; j <= s.gt_span.end; ++j) {
          s.gt_tube.boxes.push_back(box_at(tid, source_frame(j, fps, src_fps)));
        }
        finish_sample(s, index);
        out.push_back(std::move(s));
      }
    };
    emit("captions", "declarative", "c");
    emit("questions", "interrogative", "q");
  }
  return out;
}

}  // namespace detail

/// Builds an AnnotationFile from an already-parsed JSON document.
inline AnnotationFile parse_annotations(const Json& doc, AnnotationFormat format, double fps = kDefaultFps) {
  AnnotationFile file;
  file.fps = fps;
  switch (format) {
    case AnnotationFormat::Native: {
      if (!doc.is_object() || !doc.contains("samples") || !doc.at("samples").is_array()) {
        throw DataError("native annotations need a \"samples\" array");
      }
      file.fps = doc.value("fps", fps);
      if (!(file.fps > 0.0)) throw DataError("fps must be positive");
      const Json& samples = doc.at("samples");
      for (std::size_t i = 0; i < samples.size(); ++i) {
        file.samples.push_back(detail::native_sample(samples[i], file.fps, i));
      }
      break;
    }
    case AnnotationFormat::Hcstvg:
      file.samples = detail::hcstvg_samples(doc, fps);
      break;
    case AnnotationFormat::Vidstg:
      file.samples = detail::vidstg_samples(doc, fps);
      break;
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < file.samples.size(); ++i) {
    if (!seen.insert(file.samples[i].sample_id).second) {
      throw DataError("duplicate sample_id '" + file.samples[i].sample_id + "'", i, "sample_id");
    }
  }
  return file;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline AnnotationFile load_annotations(const std::string& path, AnnotationFormat format = AnnotationFormat::Native,
                                       double fps = kDefaultFps) {
  return parse_annotations(read_json_file(path), format, fps);
}

inline Json box_to_json(const BoundingBox& b) { return Json::array({b.x1, b.y1, b.x2, b.y2}); }

inline Json boxes_to_json(const std::vector<BoundingBox>& boxes) {
  Json arr = Json::array();
  for (const auto& b : boxes) arr.push_back(box_to_json(b));
  return arr;
}

inline Json sample_to_json(const GroundTruthSample& s) {
  Json j = {{"sample_id", s.sample_id},
            {"query", s.query},
            {"width", s.dims.width},
            {"height", s.dims.height},
            {"span", Json::array({s.gt_span.start, s.gt_span.end})},
            {"boxes", boxes_to_json(s.gt_tube.boxes)}};
  if (s.num_frames > 0) j["num_frames"] = s.num_frames;
  if (!s.tag.empty()) j["tag"] = s.tag;
  return j;
}

/// Native-format document; loading it back gives the same samples.
inline Json annotations_to_json(const AnnotationFile& file) {
  Json samples = Json::array();
  for (const auto& s : file.samples) samples.push_back(sample_to_json(s));
  return {{"format", "native"}, {"fps", file.fps}, {"samples", std::move(samples)}};
}

// ---------------------------------------------------------------------------
// Predictions

/// One predictions-file line: either a raw model output or a pre-parsed tube.
/// A line that cannot be decoded keeps its error text in `error`.
struct PredictionLine {
  std::size_t line{0};
  std::optional<std::string> sample_id;
  std::string raw_output;  // canonical string when the line was pre-parsed
  bool pre_parsed{false};
  std::optional<std::string> error;
};

inline PredictionLine decode_prediction_line(std::string_view text, std::size_t line_no) {
  PredictionLine p;
  p.line = line_no;
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error&) {
    p.error = "line is not valid JSON";
    return p;
  }
  if (!j.is_object()) {
    p.error = "line is not a JSON object";
    return p;
  }
  if (j.contains("sample_id") && j.at("sample_id").is_string()) p.sample_id = j.at("sample_id").get<std::string>();
  if (!p.sample_id) {
    p.error = "missing string field 'sample_id'";
    return p;
  }
  if (j.contains("raw_output")) {
    if (!j.at("raw_output").is_string()) {
      p.error = "'raw_output' must be a string";
      return p;
    }
    p.raw_output = j.at("raw_output").get<std::string>();
    return p;
  }
  if (j.contains("span") && j.contains("tube")) {
    try {
      const auto span = j.at("span").get<std::vector<std::int64_t>>();
      if (span.size() != 2 || span[0] < 0 || span[0] > span[1]) throw DataError("bad span");
      ParsedOutput out;
      out.span = {span[0], span[1]};
      out.pred.span = out.span;
      for (const auto& b : j.at("tube")) out.pred.boxes.push_back(detail::box_from_corners(b, line_no, "tube"));
      out.think.span = out.span;
      if (j.contains("think")) {
        for (const auto& b : j.at("think")) out.think.boxes.push_back(detail::box_from_corners(b, line_no, "think"));
      } else {
        out.think.boxes = out.pred.boxes;
      }
      p.raw_output = serialize_output(out);
      p.pre_parsed = true;
    } catch (const std::exception&) {
      p.error = "malformed 'span'/'tube' fields";
    }
    return p;
  }
  p.error = "need 'raw_output' or 'span' and 'tube'";
  return p;
}

inline std::vector<PredictionLine> read_predictions(std::istream& in) {
  std::vector<PredictionLine> out;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    out.push_back(decode_prediction_line(text, line_no));
  }
  return out;
}

inline std::vector<PredictionLine> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_predictions(in);
}

/// Throws ReportingError if any decodable line names an unknown sample.
inline void check_resolvable(const std::vector<PredictionLine>& preds, const AnnotationFile& ann) {
  std::vector<std::string> missing;
  for (const auto& p : preds) {
    if (p.sample_id && ann.find(*p.sample_id) == nullptr) missing.push_back(*p.sample_id);
  }
  if (!missing.empty()) throw ReportingError(std::move(missing));
}

// ---------------------------------------------------------------------------
// Scoring

inline const char* to_string(SpatialTerm t) {
  switch (t) {
    case SpatialTerm::Combined:
      return "combined";
    case SpatialTerm::GiouOnly:
      return "giou";
    case SpatialTerm::L1Only:
      return "l1";
  }
  return "combined";
}

inline SpatialTerm parse_spatial_term(std::string_view s) {
  if (s == "combined") return SpatialTerm::Combined;
  if (s == "giou") return SpatialTerm::GiouOnly;
  if (s == "l1") return SpatialTerm::L1Only;
  throw std::invalid_argument("spatial_term must be combined, giou or l1");
}

/// Wire/file form of a breakdown; shared by the batch scorer and the service.
inline Json breakdown_to_json(const RewardBreakdown& b) {
  Json j = {{"r_f", b.r_f},   {"r_c", b.r_c},     {"r_t", b.r_t},  {"r_spa_think", b.r_spa_think},
            {"r_spa_pred", b.r_spa_pred}, {"r_s", b.r_s}, {"r_k", b.r_k}, {"total", b.total},
            {"parse_ok", b.parse_ok}};
  if (b.failure) {
    j["parse_failure"] = {{"reason", to_string(b.failure->reason)}, {"byte_offset", b.failure->byte_offset}};
  }
  return j;
}

inline Json score_line_json(const PredictionLine& p, const AnnotationFile& ann, const RewardConfig& cfg) {
  Json j;
  j["line"] = p.line;
  j["sample_id"] = p.sample_id ? Json(*p.sample_id) : Json(nullptr);
  if (p.error) {
    j["breakdown"] = breakdown_to_json(RewardBreakdown{});
    j["note"] = *p.error;
    return j;
  }
  const GroundTruthSample* gt = ann.find(*p.sample_id);
  j["breakdown"] = breakdown_to_json(total_reward(p.raw_output, *gt, cfg));
  return j;
}

/// Scores every prediction line in input order. `jobs` > 1 fans lines out to
/// worker threads; the output does not depend on it.
inline std::string score_batch(const std::vector<PredictionLine>& preds, const AnnotationFile& ann,
                               const RewardConfig& cfg, unsigned jobs = 1) {
  check_resolvable(preds, ann);
  std::vector<std::string> lines(preds.size());
  std::vector<double> totals(preds.size(), 0.0);
  const auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < preds.size(); i += stride) {
      const Json j = score_line_json(preds[i], ann, cfg);
      totals[i] = j.at("breakdown").at("total").get<double>();
      lines[i] = j.dump();
    }
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(preds.size(), 1))));
  if (jobs == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(work, t, jobs);
    for (auto& th : pool) th.join();
  }
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  double sum = 0.0;
  for (double t : totals) sum += t;
  const Json summary = {{"summary", {{"n", preds.size()}, {"mean_total", preds.empty() ? 0.0 : sum / preds.size()}}}};
  out += summary.dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Per-sample tIoU/vIoU for one prediction line. Unparseable outputs localize
/// nothing (both 0); outputs whose pred tube does not match their span keep
/// their tIoU but get vIoU 0.
inline SampleScore evaluate_line(const PredictionLine& p, const AnnotationFile& ann) {
  SampleScore s;
  s.sample_id = p.sample_id.value_or("");
  if (p.error) return s;
  const GroundTruthSample* gt = ann.find(*p.sample_id);
  const ParseResult r = parse_output(p.raw_output, gt->dims);
  if (!r) return s;
  const ParsedOutput& out = r.value();
  s.tiou = tiou(out.span, gt->gt_span);
  if (out.pred.aligned()) s.viou = viou({s.sample_id, out.span, out.pred}, *gt);
  return s;
}

inline MetricsReport eval_metrics(const std::vector<PredictionLine>& preds, const AnnotationFile& ann,
                                  std::span<const double> thresholds = kDefaultThresholds) {
  check_resolvable(preds, ann);
  std::vector<SampleScore> scores;
  scores.reserve(preds.size());
  for (const auto& p : preds) scores.push_back(evaluate_line(p, ann));
  return aggregate_scores(scores, thresholds);
}

inline Json metrics_to_json(const MetricsReport& r) {
  Json at = Json::object();
  for (const auto& [t, v] : r.viou_at) {
    std::ostringstream key;
    key << t;
    at[key.str()] = v;
  }
  return {{"n_samples", r.n_samples}, {"m_tiou", r.m_tiou}, {"m_viou", r.m_viou}, {"viou_at", at}};
}

}  // namespace stvg
