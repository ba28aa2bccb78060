#pragma once

// Boxes, spans, tubes and the box-level arithmetic (IoU, GIoU, L1) that the
// reward, metric and harness code is built on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stvg {

struct InvalidBoxError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct AlignmentError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Axis-aligned box given by two opposite corners, in pixels.
struct BoundingBox {
  double x1{0.0};
  double y1{0.0};
  double x2{0.0};
  double y2{0.0};

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  bool is_finite() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2);
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct FrameDims {
  int width{1};
  int height{1};

  bool valid() const { return width >= 1 && height >= 1; }

  friend bool operator==(const FrameDims&, const FrameDims&) = default;
};

/// Inclusive interval of sampled-frame indices.
struct TemporalSpan {
  std::int64_t start{0};
  std::int64_t end{0};

  bool valid() const { return start >= 0 && start <= end; }
  std::int64_t length() const { return end - start + 1; }
  bool contains(std::int64_t frame) const { return frame >= start && frame <= end; }

  friend bool operator==(const TemporalSpan&, const TemporalSpan&) = default;
};

/// A span plus one box per frame of that span.
struct Tube {
  TemporalSpan span;
  std::vector<BoundingBox> boxes;

  bool aligned() const {
    return span.valid() && static_cast<std::int64_t>(boxes.size()) == span.length();
  }

  /// Box at absolute frame index `frame`.
  const BoundingBox& at_frame(std::int64_t frame) const {
    const std::int64_t offset = frame - span.start;
    if (offset < 0 || offset >= static_cast<std::int64_t>(boxes.size())) {
      throw AlignmentError("tube has no box for frame " + std::to_string(frame));
    }
    return boxes[static_cast<std::size_t>(offset)];
  }

  friend bool operator==(const Tube&, const Tube&) = default;
};

/// Sorts corners and clamps them into [0,width] x [0,height].
inline BoundingBox canonicalize_box(const BoundingBox& b, const FrameDims& d) {
  if (!b.is_finite()) {
    throw InvalidBoxError("box has a non-finite coordinate");
  }
  const double w = d.width;
  const double h = d.height;
  BoundingBox out;
  out.x1 = std::clamp(std::min(b.x1, b.x2), 0.0, w);
  out.x2 = std::clamp(std::max(b.x1, b.x2), 0.0, w);
  out.y1 = std::clamp(std::min(b.y1, b.y2), 0.0, h);
  out.y2 = std::clamp(std::max(b.y1, b.y2), 0.0, h);
  return out;
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) {
    return 0.0;
  }
  return iw * ih;
}

inline BoundingBox enclosing_box(const BoundingBox& a, const BoundingBox& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
}

/// Intersection over union; 0 when the union is empty.
inline double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) {
    return 0.0;
  }
  return inter / uni;
}

/// Generalized IoU in [-1, 1]. Two zero-area boxes give 0.
inline double box_giou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double hull = enclosing_box(a, b).area();
  if (uni <= 0.0) {
    return 0.0;
  }
  const double iou = inter / uni;
  if (hull <= 0.0) {
    return iou;
  }
  return iou - (hull - uni) / hull;
}

/// L1 distance between corner vectors after scaling x by 1/width and y by
/// 1/height. Lies in [0, 4] for boxes inside the frame.
inline double box_l1(const BoundingBox& a, const BoundingBox& b, const FrameDims& d) {
  const double w = d.width;
  const double h = d.height;
  return std::abs(a.x1 - b.x1) / w + std::abs(a.y1 - b.y1) / h + std::abs(a.x2 - b.x2) / w +
         std::abs(a.y2 - b.y2) / h;
}

}  // namespace stvg
