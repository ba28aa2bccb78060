#pragma once

// Extraction of <time>, <think_bbox> and <pred_bbox> payloads from a raw model
// output, plus the format and consistency predicates derived from it.
//
// Grammar (byte level, ASCII tags, ws = space | \t | \r | \n):
//
//   output  := text <time> ws span ws </time> text
//                   <think_bbox> ws boxes ws </think_bbox> text
//                   <pred_bbox> ws boxes ws </pred_bbox> text
//   span    := '[' ws uint ws ',' ws uint ws ']'
//   boxes   := '[' ws box (ws ',' ws box)* ws ']'
//   box     := '[' ws num ws ',' ws num ws ',' ws num ws ',' ws num ws ']'
//
// `text` is free text that never contains one of the six tag strings. Each tag
// must appear exactly once. Numbers are decimal (optional sign, fraction and
// exponent) and must be finite. See docs/output_format.md.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stvg/geometry.hpp"

namespace stvg {

struct ParsedOutput {
  TemporalSpan span;
  Tube think;
  Tube pred;

  friend bool operator==(const ParsedOutput&, const ParsedOutput&) = default;
};

enum class ParseError { MissingTag, TagOrder, MalformedNumber, EmptyPayload, DuplicateTag };

inline const char* to_string(ParseError e) {
  switch (e) {
    case ParseError::MissingTag:
      return "missing_tag";
    case ParseError::TagOrder:
      return "tag_order";
    case ParseError::MalformedNumber:
      return "malformed_number";
    case ParseError::EmptyPayload:
      return "empty_payload";
    case ParseError::DuplicateTag:
      return "duplicate_tag";
  }
  return "unknown";
}

struct ParseFailure {
  ParseError reason{ParseError::MissingTag};
  std::size_t byte_offset{0};

  friend bool operator==(const ParseFailure&, const ParseFailure&) = default;
};

class ParseResult {
 public:
  ParseResult(ParsedOutput value) : state_(std::move(value)) {}
  ParseResult(ParseFailure failure) : state_(failure) {}

  bool ok() const { return std::holds_alternative<ParsedOutput>(state_); }
  explicit operator bool() const { return ok(); }

  const ParsedOutput& value() const { return std::get<ParsedOutput>(state_); }
  const ParseFailure& failure() const { return std::get<ParseFailure>(state_); }

 private:
  std::variant<ParsedOutput, ParseFailure> state_;
};

namespace detail {

inline constexpr std::array<std::string_view, 6> kTags = {
    "<time>", "</time>", "<think_bbox>", "</think_bbox>", "<pred_bbox>", "</pred_bbox>"};

inline bool is_ws(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

// Recursive-descent reader over one tag payload. Offsets are reported in
// coordinates of the full output string.
class PayloadReader {
 public:
  PayloadReader(std::string_view text, std::size_t base) : text_(text), base_(base) {}

  void skip_ws() {
    while (pos_ < text_.size() && is_ws(text_[pos_])) ++pos_;
  }

  bool at_end() const { return pos_ >= text_.size(); }
  std::size_t offset() const { return base_ + pos_; }

  bool expect(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  bool peek(char c) {
    skip_ws();
    return pos_ < text_.size() && text_[pos_] == c;
  }

  std::optional<std::int64_t> read_uint() {
    skip_ws();
    const char* first = text_.data() + pos_;
    const char* last = text_.data() + text_.size();
    if (first == last || *first < '0' || *first > '9') return std::nullopt;
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{}) return std::nullopt;
    pos_ += static_cast<std::size_t>(ptr - first);
    return v;
  }

  std::optional<double> read_number() {
    skip_ws();
    std::size_t p = pos_;
    const auto digits = [&] {
      const std::size_t s = p;
      while (p < text_.size() && text_[p] >= '0' && text_[p] <= '9') ++p;
      return p > s;
    };
    if (p < text_.size() && (text_[p] == '-' || text_[p] == '+')) ++p;
    const bool int_part = digits();
    bool frac_part = false;
    if (p < text_.size() && text_[p] == '.') {
      ++p;
      frac_part = digits();
    }
    if (!int_part && !frac_part) return std::nullopt;
    if (p < text_.size() && (text_[p] == 'e' || text_[p] == 'E')) {
      ++p;
      if (p < text_.size() && (text_[p] == '-' || text_[p] == '+')) ++p;
      if (!digits()) return std::nullopt;
    }
    // from_chars rejects a leading '+', so skip it by hand.
    std::size_t begin = pos_;
    if (text_[begin] == '+') ++begin;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text_.data() + begin, text_.data() + p, v);
    if (ec != std::errc{} || ptr != text_.data() + p || !std::isfinite(v)) return std::nullopt;
    pos_ = p;
    return v;
  }

 private:
  std::string_view text_;
  std::size_t base_;
  std::size_t pos_{0};
};

inline std::optional<ParseFailure> read_span(PayloadReader& r, TemporalSpan& out) {
  const auto fail = [&] { return ParseFailure{ParseError::MalformedNumber, r.offset()}; };
  if (!r.expect('[')) return fail();
  const auto s = r.read_uint();
  if (!s) return fail();
  if (!r.expect(',')) return fail();
  const auto e = r.read_uint();
  if (!e) return fail();
  if (!r.expect(']')) return fail();
  r.skip_ws();
  if (!r.at_end()) return fail();
  if (*s > *e) return fail();
  out = {*s, *e};
  return std::nullopt;
}

inline std::optional<ParseFailure> read_boxes(PayloadReader& r, std::vector<BoundingBox>& out) {
  const auto fail = [&] { return ParseFailure{ParseError::MalformedNumber, r.offset()}; };
  if (!r.expect('[')) return fail();
  if (r.peek(']')) return ParseFailure{ParseError::EmptyPayload, r.offset()};
  while (true) {
    if (!r.expect('[')) return fail();
    std::array<double, 4> c{};
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (i > 0 && !r.expect(',')) return fail();
      const auto v = r.read_number();
      if (!v) return fail();
      c[i] = *v;
    }
    if (!r.expect(']')) return fail();
    out.push_back({std::min(c[0], c[2]), std::min(c[1], c[3]), std::max(c[0], c[2]),
                   std::max(c[1], c[3])});
    if (r.expect(',')) continue;
    if (r.expect(']')) break;
    return fail();
  }
  r.skip_ws();
  if (!r.at_end()) return fail();
  return std::nullopt;
}

inline bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return is_ws(c); });
}

}  // namespace detail

/// Decodes the three tag payloads. Box corners are sorted; clamping needs frame
/// dimensions and is done by the overload below. Never throws on bad input.
inline ParseResult parse_output(std::string_view raw) {
  using detail::kTags;
  std::array<std::size_t, kTags.size()> at{};
  for (std::size_t t = 0; t < kTags.size(); ++t) {
    at[t] = raw.find(kTags[t]);
  }
  // Duplicates first, reported at the earliest repeated occurrence.
  std::optional<std::size_t> dup;
  for (std::size_t t = 0; t < kTags.size(); ++t) {
    if (at[t] == std::string_view::npos) continue;
    const std::size_t again = raw.find(kTags[t], at[t] + 1);
    if (again != std::string_view::npos && (!dup || again < *dup)) dup = again;
  }
  if (dup) return ParseFailure{ParseError::DuplicateTag, *dup};
  for (std::size_t t = 0; t < kTags.size(); ++t) {
    if (at[t] == std::string_view::npos) return ParseFailure{ParseError::MissingTag, raw.size()};
  }
  for (std::size_t t = 1; t < kTags.size(); ++t) {
    if (at[t] < at[t - 1] + kTags[t - 1].size()) {
      return ParseFailure{ParseError::TagOrder, std::min(at[t], at[t - 1])};
    }
  }

  const auto payload = [&](std::size_t open) {
    const std::size_t begin = at[open] + kTags[open].size();
    return std::pair{raw.substr(begin, at[open + 1] - begin), begin};
  };

  ParsedOutput out;
  const auto [time_text, time_at] = payload(0);
  if (detail::blank(time_text)) return ParseFailure{ParseError::EmptyPayload, time_at};
  detail::PayloadReader time_reader(time_text, time_at);
  if (auto f = detail::read_span(time_reader, out.span)) return *f;

  const auto read_tube = [&](std::size_t open, Tube& tube) -> std::optional<ParseFailure> {
    const auto [text, base] = payload(open);
    if (detail::blank(text)) return ParseFailure{ParseError::EmptyPayload, base};
    detail::PayloadReader reader(text, base);
    if (auto f = detail::read_boxes(reader, tube.boxes)) return f;
    tube.span = out.span;
    return std::nullopt;
  };
  if (auto f = read_tube(2, out.think)) return *f;
  if (auto f = read_tube(4, out.pred)) return *f;
  return out;
}

/// As above, then clamps every box into the frame.
inline ParseResult parse_output(std::string_view raw, const FrameDims& dims) {
  ParseResult r = parse_output(raw);
  if (!r) return r;
  ParsedOutput p = r.value();
  for (Tube* tube : {&p.think, &p.pred}) {
    for (BoundingBox& b : tube->boxes) b = canonicalize_box(b, dims);
  }
  return p;
}

/// Format reward: 1 iff the output parses.
inline int check_format(std::string_view raw) { return parse_output(raw).ok() ? 1 : 0; }

/// Consistency reward: 1 iff both tubes hold exactly one box per span frame.
inline int check_consistency(const ParsedOutput& p) {
  const auto n = static_cast<std::size_t>(p.span.length());
  return (p.think.boxes.size() == n && p.pred.boxes.size() == n) ? 1 : 0;
}

namespace detail {

inline void append_number(std::string& out, double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  out.append(buf.data(), ptr);
}

inline void append_boxes(std::string& out, const std::vector<BoundingBox>& boxes) {
  out.push_back('[');
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (i > 0) out.push_back(',');
    const BoundingBox& b = boxes[i];
    out.push_back('[');
    append_number(out, b.x1);
    out.push_back(',');
    append_number(out, b.y1);
    out.push_back(',');
    append_number(out, b.x2);
    out.push_back(',');
    append_number(out, b.y2);
    out.push_back(']');
  }
  out.push_back(']');
}

}  // namespace detail

/// Canonical string form. Numbers use the shortest round-trip representation,
/// so parsing the result gives back the same values bit for bit.
inline std::string serialize_output(const ParsedOutput& p) {
  std::string out;
  out.reserve(64 + 40 * (p.think.boxes.size() + p.pred.boxes.size()));
  out += "<time>[";
  out += std::to_string(p.span.start);
  out += ',';
  out += std::to_string(p.span.end);
  out += "]</time><think_bbox>";
  detail::append_boxes(out, p.think.boxes);
  out += "</think_bbox><pred_bbox>";
  detail::append_boxes(out, p.pred.boxes);
  out += "</pred_bbox>";
  return out;
}

}  // namespace stvg
