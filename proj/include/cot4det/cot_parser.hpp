// Copyright 2026 The cot4det Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cot4det/error.hpp"
#include "cot4det/geometry.hpp"
#include "cot4det/prompt_builder.hpp"

namespace cot4det {

// Recoverable anomaly found while parsing or repairing. `code` is a stable
// machine-readable identifier; `message` is for humans.
struct Warning {
  std::string code;
  std::string message;
};

// Model answer after structural parsing. Stage contents are normalized; the
// *_present flags record whether the stage header appeared in the text (an
// absent stage may still be inferred, with a warning).
struct ParsedAnswer {
  std::vector<std::string> classification;
  std::vector<std::pair<std::string, std::size_t>> counts;
  std::vector<LabeledBox> boxes;
  bool classification_present = false;
  bool counting_present = false;
  bool grounding_present = false;
  std::vector<Warning> warnings;
};

struct ConsistencyReport {
  bool classification_counts_agree = false;
  bool counts_boxes_agree = false;
  bool labels_subset_of_prompt = false;
  bool ordering_canonical = false;
  bool boxes_within_image = false;
  // declared minus emitted, for every label that is declared or emitted.
  std::vector<std::pair<std::string, long long>> count_deltas;
  // Same-label boxes overlapping at >= dup_iou, transitively grouped. Only
  // groups of size >= 2 are listed; indices refer to ParsedAnswer::boxes.
  std::vector<std::vector<std::size_t>> duplicate_groups;
  double width = 0;
  double height = 0;
  double dup_iou = 0.9;
};

struct Detection {
  BBox box;
  std::string label;
  double score = 0;
};

enum class Policy { lenient, strict, repair };

inline std::string_view policy_name(Policy p) {
  switch (p) {
    case Policy::lenient: return "lenient";
    case Policy::strict: return "strict";
    case Policy::repair: return "repair";
  }
  return "lenient";
}

inline std::optional<Policy> parse_policy(std::string_view s) {
  if (s == "lenient") return Policy::lenient;
  if (s == "strict") return Policy::strict;
  if (s == "repair") return Policy::repair;
  return std::nullopt;
}

namespace detail {

inline bool is_edge_decoration(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '#' || c == '*' || c == '`' || c == '_';
}

inline std::string strip_decorations(std::string_view line) {
  std::size_t b = 0, e = line.size();
  while (b < e && is_edge_decoration(line[b])) ++b;
  while (e > b && is_edge_decoration(line[e - 1])) --e;
  return std::string(line.substr(b, e - b));
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline bool is_fence_line(std::string_view line) {
  std::size_t b = 0;
  while (b < line.size() && (line[b] == ' ' || line[b] == '\t')) ++b;
  return line.size() - b >= 3 && line.substr(b, 3) == "```";
}

enum class Stage { none, classification, counting, grounding };

// A line is a header when, after stripping decorations, it starts with the
// stage name followed by ':', or equals the stage name outright. Returns the
// text after the colon (possible inline body).
inline std::optional<std::pair<Stage, std::string>> match_header(const std::string& line) {
  const std::string stripped = strip_decorations(line);
  const std::string lc = lower(stripped);
  struct Name {
    std::string_view text;
    Stage stage;
  };
  static constexpr Name kNames[] = {
      {"category classification", Stage::classification},
      {"category counting", Stage::counting},
      {"grounding boxes", Stage::grounding},
  };
  for (const auto& n : kNames) {
    if (lc == n.text) return std::make_pair(n.stage, std::string());
    if (lc.size() > n.text.size() && lc.compare(0, n.text.size(), n.text) == 0 &&
        lc[n.text.size()] == ':') {
      return std::make_pair(n.stage, stripped.substr(n.text.size() + 1));
    }
  }
  return std::nullopt;
}

// Splits on top-level occurrences of any separator, respecting nothing (flat
// split); used for classification lists.
inline std::vector<std::string> split_any(std::string_view text, std::string_view seps) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (seps.find(c) != std::string_view::npos) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

inline std::optional<std::size_t> parse_count(std::string_view raw) {
  std::size_t b = 0, e = raw.size();
  while (b < e && std::isspace(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(raw[e - 1]))) --e;
  if (b == e) return std::nullopt;
  std::size_t value = 0;
  for (std::size_t i = b; i < e; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(raw[i]))) return std::nullopt;
    value = value * 10 + static_cast<std::size_t>(raw[i] - '0');
    if (value > 1000000) return std::nullopt;  // counts beyond this are garbage
  }
  return value;
}

// Finds the span [open_pos, close_pos] of the first balanced bracket pair at
// or after `from`, skipping over JSON string literals.
inline std::optional<std::pair<std::size_t, std::size_t>> find_balanced(const std::string& s,
                                                                        std::size_t from,
                                                                        char open, char close) {
  std::size_t start = s.find(open, from);
  while (start != std::string::npos) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = start; i < s.size(); ++i) {
      char c = s[i];
      if (in_string) {
        if (escaped) escaped = false;
        else if (c == '\\') escaped = true;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') {
        in_string = true;
      } else if (c == open) {
        ++depth;
      } else if (c == close) {
        --depth;
        if (depth == 0) return std::make_pair(start, i);
      }
    }
    start = s.find(open, start + 1);
  }
  return std::nullopt;
}

// One grounding record out of a parsed JSON object. Returns nullopt (with a
// warning appended) when the record cannot yield a valid box.
inline std::optional<LabeledBox> record_to_box(const nlohmann::json& o,
                                               std::vector<Warning>& warnings) {
  if (!o.is_object()) {
    warnings.push_back({"malformed_record", "grounding element is not an object"});
    return std::nullopt;
  }
  const nlohmann::json* arr = nullptr;
  if (o.contains("bbox_2d")) arr = &o["bbox_2d"];
  else if (o.contains("bbox")) arr = &o["bbox"];
  if (!arr) {
    warnings.push_back({"missing_bbox", "record has no bbox_2d field"});
    return std::nullopt;
  }
  if (!arr->is_array() || arr->size() != 4) {
    warnings.push_back({"bbox_arity", "bbox_2d is not a 4-element array"});
    return std::nullopt;
  }
  double c[4];
  for (std::size_t i = 0; i < 4; ++i) {
    if (!(*arr)[i].is_number()) {
      warnings.push_back({"bbox_not_numeric", "bbox_2d holds a non-numeric value"});
      return std::nullopt;
    }
    c[i] = (*arr)[i].get<double>();
    if (!std::isfinite(c[i])) {
      warnings.push_back({"bbox_not_numeric", "bbox_2d holds a non-finite value"});
      return std::nullopt;
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (c[i] < 0) {
      if (c[i] <= -1.0) {
        warnings.push_back({"coord_out_of_range", "coordinate below -1"});
        return std::nullopt;
      }
      warnings.push_back({"coord_clamped", "small negative coordinate clamped to 0"});
      c[i] = 0;
    }
  }
  if (!o.contains("label") || !o["label"].is_string()) {
    warnings.push_back({"missing_label", "record has no string label"});
    return std::nullopt;
  }
  std::string label = normalize_name(o["label"].get<std::string>());
  if (label.empty()) {
    warnings.push_back({"missing_label", "record label is empty after normalization"});
    return std::nullopt;
  }
  auto box = BBox::make(c[0], c[1], c[2], c[3]);
  if (!box) {
    warnings.push_back({"degenerate_box", "bbox_2d does not satisfy x1 < x2 and y1 < y2"});
    return std::nullopt;
  }
  return LabeledBox{std::move(label), *box};
}

// Pulls grounding records out of free text: a balanced [...] containing
// objects when available, otherwise every balanced {...} chunk that parses.
inline std::vector<LabeledBox> extract_boxes(const std::string& text, bool& found_structure,
                                             std::vector<Warning>& warnings) {
  std::vector<LabeledBox> boxes;
  found_structure = false;

  auto span = find_balanced(text, 0, '[', ']');
  if (span) {
    const std::string chunk = text.substr(span->first, span->second - span->first + 1);
    nlohmann::json arr = nlohmann::json::parse(chunk, nullptr, false);
    if (!arr.is_discarded() && arr.is_array()) {
      found_structure = true;
      for (const auto& el : arr) {
        auto box = record_to_box(el, warnings);
        if (box) boxes.push_back(std::move(*box));
      }
      return boxes;
    }
  }

  // Fallback: individually balanced object chunks.
  std::size_t pos = 0;
  while (true) {
    auto obj = find_balanced(text, pos, '{', '}');
    if (!obj) break;
    const std::string chunk = text.substr(obj->first, obj->second - obj->first + 1);
    nlohmann::json rec = nlohmann::json::parse(chunk, nullptr, false);
    if (rec.is_discarded()) {
      warnings.push_back({"malformed_record", "unparseable record chunk skipped"});
    } else {
      found_structure = true;
      auto box = record_to_box(rec, warnings);
      if (box) boxes.push_back(std::move(*box));
    }
    pos = obj->second + 1;
  }
  return boxes;
}

}  // namespace detail

// Total over strings: every input yields a ParsedAnswer or NoParsableContent,
// never any other exception. Tolerates prose preambles, markdown decorations,
// code fences, and a bare record list with no headers (non-CoT output).
inline ParsedAnswer parse_cot_answer(const std::string& text) {
  ParsedAnswer ans;

  std::vector<std::string> lines;
  {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    lines.push_back(cur);
  }

  std::string cls_body, cnt_body, grd_body;
  detail::Stage current = detail::Stage::none;
  for (const auto& line : lines) {
    if (detail::is_fence_line(line)) continue;
    auto header = detail::match_header(line);
    if (header) {
      current = header->first;
      switch (current) {
        case detail::Stage::classification: ans.classification_present = true; break;
        case detail::Stage::counting: ans.counting_present = true; break;
        case detail::Stage::grounding: ans.grounding_present = true; break;
        case detail::Stage::none: break;
      }
      const std::string& inline_body = header->second;
      if (!inline_body.empty()) {
        switch (current) {
          case detail::Stage::classification: cls_body += inline_body + "\n"; break;
          case detail::Stage::counting: cnt_body += inline_body + "\n"; break;
          case detail::Stage::grounding: grd_body += inline_body + "\n"; break;
          case detail::Stage::none: break;
        }
      }
      continue;
    }
    switch (current) {
      case detail::Stage::classification: cls_body += line + "\n"; break;
      case detail::Stage::counting: cnt_body += line + "\n"; break;
      case detail::Stage::grounding: grd_body += line + "\n"; break;
      case detail::Stage::none: break;  // prose before the first header
    }
  }

  if (ans.classification_present) {
    std::unordered_set<std::string> seen;
    for (const auto& part : detail::split_any(cls_body, ",;\n")) {
      std::string name = normalize_name(part);
      if (name.empty()) continue;
      if (!seen.insert(name).second) {
        ans.warnings.push_back({"duplicate_classification_entry", "'" + name + "' listed twice"});
        continue;
      }
      ans.classification.push_back(std::move(name));
    }
  }

  if (ans.counting_present) {
    std::unordered_set<std::string> seen;
    for (const auto& chunk : detail::split_any(cnt_body, ";\n")) {
      if (normalize_name(chunk).empty()) continue;
      // A chunk may hold comma-separated entries, but only when every piece
      // looks like one; otherwise the comma belongs to the name.
      std::vector<std::string> pieces = detail::split_any(chunk, ",");
      bool all_entries = pieces.size() > 1;
      for (const auto& p : pieces) {
        if (p.find(':') == std::string::npos) all_entries = false;
      }
      if (!all_entries) pieces = {chunk};
      for (const auto& piece : pieces) {
        std::size_t colon = piece.rfind(':');
        if (colon == std::string::npos) {
          ans.warnings.push_back({"malformed_count_entry", "no ':' in '" + piece + "'"});
          continue;
        }
        std::string name = normalize_name(std::string_view(piece).substr(0, colon));
        auto count = detail::parse_count(std::string_view(piece).substr(colon + 1));
        if (name.empty() || !count) {
          ans.warnings.push_back({"malformed_count_entry", "cannot read '" + piece + "'"});
          continue;
        }
        if (!seen.insert(name).second) {
          ans.warnings.push_back({"duplicate_count_entry", "'" + name + "' counted twice"});
          continue;
        }
        ans.counts.emplace_back(std::move(name), *count);
      }
    }
  }

  bool found_structure = false;
  if (ans.grounding_present) {
    ans.boxes = detail::extract_boxes(grd_body, found_structure, ans.warnings);
    if (!found_structure && !normalize_name(grd_body).empty()) {
      ans.warnings.push_back({"no_grounding_array", "grounding stage holds no record list"});
    }
  } else {
    // No grounding header anywhere: accept a bare record list (non-CoT
    // baseline output) drawn from the full text.
    ans.boxes = detail::extract_boxes(text, found_structure, ans.warnings);
    if (found_structure) {
      ans.warnings.push_back({"missing_grounding", "no grounding header; bare record list used"});
    }
  }

  if (!ans.classification_present && !ans.counting_present && !ans.grounding_present &&
      !found_structure) {
    raise(Errc::no_parsable_content, "no stage headers or grounding records found");
  }

  // Absent stages are inferred from the boxes so downstream consumers always
  // see all three; explicit empty stages are left empty.
  if (!ans.classification_present) {
    std::unordered_set<std::string> seen;
    for (const auto& lb : ans.boxes) {
      if (seen.insert(lb.label).second) ans.classification.push_back(lb.label);
    }
    ans.warnings.push_back(
        {"missing_classification", "classification stage inferred from box labels"});
  }
  if (!ans.counting_present) {
    std::unordered_map<std::string, std::size_t> tally;
    std::vector<std::string> order;
    for (const auto& lb : ans.boxes) {
      if (tally.find(lb.label) == tally.end()) order.push_back(lb.label);
      ++tally[lb.label];
    }
    for (const auto& name : order) ans.counts.emplace_back(name, tally[name]);
    ans.warnings.push_back({"missing_counting", "counting stage inferred from emitted boxes"});
  }
  return ans;
}

// Cross-stage consistency; pure in (ans, spec, width, height, dup_iou).
inline ConsistencyReport validate(const ParsedAnswer& ans, const PromptSpec& spec, double width,
                                  double height, double dup_iou = 0.9) {
  ConsistencyReport rep;
  rep.width = width;
  rep.height = height;
  rep.dup_iou = dup_iou;

  std::unordered_set<std::string> cls(ans.classification.begin(), ans.classification.end());
  std::unordered_set<std::string> declared;
  for (const auto& [name, n] : ans.counts) declared.insert(name);
  rep.classification_counts_agree = (cls == declared);

  std::unordered_map<std::string, long long> emitted;
  for (const auto& lb : ans.boxes) ++emitted[lb.label];
  rep.counts_boxes_agree = true;
  std::unordered_set<std::string> delta_seen;
  for (const auto& [name, n] : ans.counts) {
    long long delta = static_cast<long long>(n) - emitted[name];
    rep.count_deltas.emplace_back(name, delta);
    delta_seen.insert(name);
    if (delta != 0) rep.counts_boxes_agree = false;
  }
  for (const auto& lb : ans.boxes) {
    if (delta_seen.insert(lb.label).second) {
      rep.count_deltas.emplace_back(lb.label, -emitted[lb.label]);
      rep.counts_boxes_agree = false;
    }
  }

  std::unordered_map<std::string, std::size_t> prompt_index;
  for (std::size_t i = 0; i < spec.categories.size(); ++i) {
    prompt_index.emplace(spec.categories[i], i);
  }
  rep.labels_subset_of_prompt = true;
  for (const auto& lb : ans.boxes) {
    if (!prompt_index.count(lb.label)) rep.labels_subset_of_prompt = false;
  }

  auto order_key = [&](const LabeledBox& lb) {
    auto it = prompt_index.find(lb.label);
    return it == prompt_index.end() ? spec.categories.size() : it->second;
  };
  rep.ordering_canonical = std::is_sorted(
      ans.boxes.begin(), ans.boxes.end(), [&](const LabeledBox& a, const LabeledBox& b) {
        std::size_t ka = order_key(a), kb = order_key(b);
        if (ka != kb) return ka < kb;
        return spatial_less(a.box, b.box);
      });

  rep.boxes_within_image = true;
  for (const auto& lb : ans.boxes) {
    if (!within_image(lb.box, width, height)) rep.boxes_within_image = false;
  }

  // Union-find over same-label pairs at IoU >= dup_iou.
  std::vector<std::size_t> parent(ans.boxes.size());
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (std::size_t i = 0; i < ans.boxes.size(); ++i) {
    for (std::size_t j = i + 1; j < ans.boxes.size(); ++j) {
      if (ans.boxes[i].label != ans.boxes[j].label) continue;
      if (iou(ans.boxes[i].box, ans.boxes[j].box) >= dup_iou) {
        parent[find(i)] = find(j);
      }
    }
  }
  std::unordered_map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ans.boxes.size(); ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<std::size_t>> dup;
  for (auto& [root, members] : groups) {
    if (members.size() >= 2) {
      std::sort(members.begin(), members.end());
      dup.push_back(std::move(members));
    }
  }
  std::sort(dup.begin(), dup.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  rep.duplicate_groups = std::move(dup);
  return rep;
}

inline bool all_flags_pass(const ConsistencyReport& rep) {
  return rep.classification_counts_agree && rep.counts_boxes_agree &&
         rep.labels_subset_of_prompt && rep.ordering_canonical && rep.boxes_within_image &&
         rep.duplicate_groups.empty();
}

// Policy semantics:
//   lenient: every parsed box, emission order.
//   strict:  all boxes, or none when any consistency rule fails.
//   repair:  drop labels outside the classification stage, collapse duplicate
//            groups to their earliest survivor, truncate each category to its
//            declared count, clamp sub-pixel bound overshoot and drop larger.
// Surviving boxes get pseudo-scores 1 - i/(n+1); strictly decreasing, (0,1].
inline std::vector<Detection> to_detections(const ParsedAnswer& ans,
                                            const ConsistencyReport& rep, Policy policy) {
  std::vector<std::pair<std::size_t, LabeledBox>> alive;
  for (std::size_t i = 0; i < ans.boxes.size(); ++i) alive.emplace_back(i, ans.boxes[i]);

  if (policy == Policy::strict && !all_flags_pass(rep)) {
    alive.clear();
  }

  if (policy == Policy::repair) {
    std::unordered_set<std::string> cls(ans.classification.begin(), ans.classification.end());
    std::erase_if(alive, [&](const auto& e) { return !cls.count(e.second.label); });

    std::unordered_set<std::size_t> still_alive;
    for (const auto& e : alive) still_alive.insert(e.first);
    std::unordered_set<std::size_t> drop;
    for (const auto& group : rep.duplicate_groups) {
      bool kept = false;
      for (std::size_t idx : group) {
        if (!still_alive.count(idx)) continue;
        if (kept) drop.insert(idx);
        kept = true;
      }
    }
    std::erase_if(alive, [&](const auto& e) { return drop.count(e.first) > 0; });

    std::unordered_map<std::string, std::size_t> declared;
    for (const auto& [name, n] : ans.counts) declared[name] = n;
    std::unordered_map<std::string, std::size_t> taken;
    std::vector<std::pair<std::size_t, LabeledBox>> kept;
    kept.reserve(alive.size());
    for (auto& e : alive) {
      auto it = declared.find(e.second.label);
      // Undeclared labels are unconstrained by the counting stage.
      if (it != declared.end() && ++taken[e.second.label] > it->second) continue;
      auto clamped = clamp_slight_overshoot(e.second.box, rep.width, rep.height);
      if (!clamped) continue;
      e.second.box = *clamped;
      kept.push_back(std::move(e));
    }
    alive = std::move(kept);
  }

  std::vector<Detection> out;
  out.reserve(alive.size());
  const double n = static_cast<double>(alive.size());
  for (std::size_t i = 0; i < alive.size(); ++i) {
    out.push_back(Detection{alive[i].second.box, alive[i].second.label,
                            1.0 - static_cast<double>(i) / (n + 1.0)});
  }
  return out;
}

}  // namespace cot4det
