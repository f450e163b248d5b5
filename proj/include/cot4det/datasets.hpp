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

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cot4det/error.hpp"
#include "cot4det/geometry.hpp"
#include "cot4det/jsonl.hpp"

namespace cot4det {

// Category names are matched against free text coming back from a model, so
// one normalization is applied everywhere: lowercase, trim, collapse internal
// whitespace, strip trailing punctuation.
inline std::string normalize_name(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (unsigned char c : raw) {
    if (std::isspace(c)) {
      if (!out.empty()) pending_space = true;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  while (!out.empty()) {
    char c = out.back();
    if (c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?') {
      out.pop_back();
    } else {
      break;
    }
  }
  return out;
}

enum class FrequencyBand { rare, common, frequent, unknown };

inline std::string_view band_name(FrequencyBand b) {
  switch (b) {
    case FrequencyBand::rare: return "rare";
    case FrequencyBand::common: return "common";
    case FrequencyBand::frequent: return "frequent";
    case FrequencyBand::unknown: return "unknown";
  }
  return "unknown";
}

struct Category {
  int id = 0;
  std::string name;  // normalized
  FrequencyBand band = FrequencyBand::unknown;
};

class CategoryVocab {
 public:
  void add(int id, std::string_view raw_name, FrequencyBand band = FrequencyBand::unknown) {
    std::string name = normalize_name(raw_name);
    if (name.empty()) raise(Errc::missing_field, "category " + std::to_string(id) + " has empty name");
    if (by_id_.count(id)) raise(Errc::unknown_category, "duplicate category id " + std::to_string(id));
    if (by_name_.count(name)) raise(Errc::unknown_category, "duplicate category name '" + name + "'");
    by_id_[id] = entries_.size();
    by_name_[name] = entries_.size();
    entries_.push_back(Category{id, std::move(name), band});
  }

  const std::vector<Category>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::optional<std::size_t> index_of_id(int id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
  }

  // Lookup by already-normalized name.
  std::optional<std::size_t> index_of_name(const std::string& normalized) const {
    auto it = by_name_.find(normalized);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  const Category& at(std::size_t index) const { return entries_.at(index); }

  const std::string& name_of_id(int id) const {
    auto idx = index_of_id(id);
    if (!idx) raise(Errc::unknown_category, "category id " + std::to_string(id) + " not in vocab");
    return entries_[*idx].name;
  }

  void set_band(int id, FrequencyBand band) {
    auto idx = index_of_id(id);
    if (!idx) raise(Errc::unknown_category, "category id " + std::to_string(id) + " not in vocab");
    entries_[*idx].band = band;
  }

 private:
  std::vector<Category> entries_;
  std::unordered_map<int, std::size_t> by_id_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

struct Instance {
  int category_id = 0;
  BBox box;
};

// One image's ground truth; the unit of ingestion and evaluation.
struct ImageAnnotation {
  std::int64_t image_id = 0;
  double width = 0;
  double height = 0;
  std::vector<Instance> instances;
  std::string source_tag;
  std::string file_name;  // optional; used as the image reference at inference
};

enum class Granularity { word, phrase, sentence };

inline std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::word: return "word";
    case Granularity::phrase: return "phrase";
    case Granularity::sentence: return "sentence";
  }
  return "word";
}

inline std::optional<Granularity> parse_granularity(std::string_view s) {
  if (s == "word") return Granularity::word;
  if (s == "phrase") return Granularity::phrase;
  if (s == "sentence") return Granularity::sentence;
  return std::nullopt;
}

struct RefExpression {
  std::int64_t image_id = 0;
  std::string expression;
  BBox target;
  Granularity granularity = Granularity::phrase;
};

struct CocoData {
  CategoryVocab vocab;
  std::vector<ImageAnnotation> images;
  std::size_t dropped_zero_area = 0;
};

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& record, const char* field,
                                           const std::string& where) {
  auto it = record.find(field);
  if (it == record.end()) raise(Errc::missing_field, std::string("'") + field + "' missing in " + where);
  return *it;
}

// (x, y, w, h) -> validated corner box, clamped into the image when the
// overshoot is sub-pixel. Zero-area boxes return nullopt (dropped upstream);
// anything else invalid throws MalformedBox.
inline std::optional<BBox> corner_box_from_xywh(double x, double y, double w, double h,
                                                double img_w, double img_h,
                                                const std::string& where) {
  if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(w) || !std::isfinite(h)) {
    raise(Errc::malformed_box, "non-finite bbox in " + where);
  }
  if (w < 0 || h < 0) {
    raise(Errc::malformed_box, "negative width/height in " + where);
  }
  if (w == 0 || h == 0) return std::nullopt;
  double x1 = x, y1 = y;
  const double x2 = x + w, y2 = y + h;
  // Sub-pixel undershoot past the origin is clamped like bound overshoot.
  if (x1 < 0) {
    if (x1 <= -1.0) raise(Errc::malformed_box, "x out of image by >= 1px in " + where);
    x1 = 0;
  }
  if (y1 < 0) {
    if (y1 <= -1.0) raise(Errc::malformed_box, "y out of image by >= 1px in " + where);
    y1 = 0;
  }
  auto box = BBox::make(x1, y1, x2, y2);
  if (!box) raise(Errc::malformed_box, "degenerate bbox in " + where);
  auto clamped = clamp_slight_overshoot(*box, img_w, img_h);
  if (!clamped) raise(Errc::malformed_box, "bbox exceeds image bounds by >= 1px in " + where);
  return clamped;
}

}  // namespace detail

// COCO-style document: top-level `images`, `annotations`, `categories`.
// Boxes arrive as [x, y, w, h] and are converted to corner form. Zero-area
// annotations are dropped and counted rather than treated as errors, since
// they occur in real exports; negative extents are hard errors.
inline CocoData load_coco(const std::filesystem::path& path, std::string_view source_tag = "coco") {
  nlohmann::json doc = load_json_file(path);
  try {
    CocoData data;

    for (const char* field : {"images", "annotations", "categories"}) {
      if (!doc.contains(field) || !doc[field].is_array()) {
        raise(Errc::missing_field, std::string("'") + field + "' array missing in " + path.string());
      }
    }

    std::size_t index = 0;
    for (const auto& cat : doc["categories"]) {
      const std::string where = "categories[" + std::to_string(index++) + "]";
      int id = detail::require_field(cat, "id", where).get<int>();
      std::string name = detail::require_field(cat, "name", where).get<std::string>();
      data.vocab.add(id, name);
    }

    std::unordered_map<std::int64_t, std::size_t> image_index;
    index = 0;
    for (const auto& img : doc["images"]) {
      const std::string where = "images[" + std::to_string(index++) + "]";
      ImageAnnotation ann;
      ann.image_id = detail::require_field(img, "id", where).get<std::int64_t>();
      ann.width = detail::require_field(img, "width", where).get<double>();
      ann.height = detail::require_field(img, "height", where).get<double>();
      if (img.contains("file_name")) ann.file_name = img["file_name"].get<std::string>();
      ann.source_tag = std::string(source_tag);
      if (image_index.count(ann.image_id)) {
        raise(Errc::missing_field, "duplicate image id " + std::to_string(ann.image_id));
      }
      image_index[ann.image_id] = data.images.size();
      data.images.push_back(std::move(ann));
    }

    index = 0;
    for (const auto& a : doc["annotations"]) {
      std::string where = "annotations[" + std::to_string(index++) + "]";
      if (a.contains("id")) where = "annotation id " + a["id"].dump();
      std::int64_t image_id = detail::require_field(a, "image_id", where).get<std::int64_t>();
      int category_id = detail::require_field(a, "category_id", where).get<int>();
      const auto& bbox = detail::require_field(a, "bbox", where);
      if (!bbox.is_array() || bbox.size() != 4) {
        raise(Errc::malformed_box, "bbox is not a 4-element array in " + where);
      }
      if (!data.vocab.index_of_id(category_id)) {
        raise(Errc::unknown_category, "annotation references category id " +
                                          std::to_string(category_id) +
                                          " absent from categories (" + where + ")");
      }
      auto img_it = image_index.find(image_id);
      if (img_it == image_index.end()) {
        raise(Errc::missing_field, "annotation references unknown image id " +
                                       std::to_string(image_id) + " (" + where + ")");
      }
      ImageAnnotation& img = data.images[img_it->second];
      auto box = detail::corner_box_from_xywh(bbox[0].get<double>(), bbox[1].get<double>(),
                                              bbox[2].get<double>(), bbox[3].get<double>(),
                                              img.width, img.height, where);
      if (!box) {
        ++data.dropped_zero_area;
        continue;
      }
      img.instances.push_back(Instance{category_id, *box});
    }
    return data;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::missing_field, path.string() + ": " + e.what());
  }
}

// Assign rare/common/frequent bands from LVIS-style category metadata.
// `frequency` ("r"/"c"/"f") wins when present; otherwise the band is derived
// from `image_count` using the LVIS convention: [1,10] rare, [11,100] common,
// >100 frequent. Categories absent from `vocab` are ignored.
inline CategoryVocab load_lvis_bands(const std::filesystem::path& path, CategoryVocab vocab) {
  nlohmann::json doc = load_json_file(path);
  try {
    const nlohmann::json* cats = nullptr;
    if (doc.is_array()) {
      cats = &doc;
    } else if (doc.contains("categories") && doc["categories"].is_array()) {
      cats = &doc["categories"];
    } else {
      raise(Errc::missing_field, "'categories' array missing in " + path.string());
    }

    std::size_t index = 0;
    for (const auto& cat : *cats) {
      const std::string where = "categories[" + std::to_string(index++) + "]";
      int id = detail::require_field(cat, "id", where).get<int>();
      if (!vocab.index_of_id(id)) continue;

      std::optional<FrequencyBand> from_frequency;
      if (cat.contains("frequency")) {
        std::string f = cat["frequency"].get<std::string>();
        if (f == "r") from_frequency = FrequencyBand::rare;
        else if (f == "c") from_frequency = FrequencyBand::common;
        else if (f == "f") from_frequency = FrequencyBand::frequent;
        else raise(Errc::missing_field, "unrecognized frequency '" + f + "' in " + where);
      }

      std::optional<FrequencyBand> from_count;
      if (cat.contains("image_count")) {
        std::int64_t n = cat["image_count"].get<std::int64_t>();
        if (n >= 1 && n <= 10) from_count = FrequencyBand::rare;
        else if (n >= 11 && n <= 100) from_count = FrequencyBand::common;
        else if (n > 100) from_count = FrequencyBand::frequent;
      }

      if (from_frequency && from_count && *from_frequency != *from_count) {
        raise(Errc::band_conflict, "frequency and image_count disagree for category id " +
                                       std::to_string(id) + " (" + where + ")");
      }
      if (from_frequency) vocab.set_band(id, *from_frequency);
      else if (from_count) vocab.set_band(id, *from_count);
    }
    return vocab;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::missing_field, path.string() + ": " + e.what());
  }
}

// Normalized referring-expression corpus: one JSON record per line with
// exactly these fields:
//   {"image_id": <int>, "expression": <string>,
//    "bbox": [x1, y1, x2, y2], "granularity": "phrase"|"sentence"}
// Upstream referring-expression datasets are converted to this format ahead
// of time; the fixed contract keeps a single ingestion path.
inline std::vector<RefExpression> load_refexp(const std::filesystem::path& path) {
  std::vector<RefExpression> out;
  for_each_jsonl(path, [&](std::size_t line_no, const nlohmann::json& record) {
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    try {
      RefExpression expr;
      expr.image_id = detail::require_field(record, "image_id", where).get<std::int64_t>();
      expr.expression = detail::require_field(record, "expression", where).get<std::string>();
      const auto& bbox = detail::require_field(record, "bbox", where);
      if (!bbox.is_array() || bbox.size() != 4) {
        raise(Errc::malformed_box, "bbox is not a 4-element array in " + where);
      }
      auto box = BBox::make(bbox[0].get<double>(), bbox[1].get<double>(), bbox[2].get<double>(),
                            bbox[3].get<double>());
      if (!box) raise(Errc::malformed_box, "invalid bbox in " + where);
      expr.target = *box;
      std::string g = detail::require_field(record, "granularity", where).get<std::string>();
      auto granularity = parse_granularity(g);
      if (!granularity || *granularity == Granularity::word) {
        raise(Errc::unknown_granularity, "granularity '" + g + "' in " + where);
      }
      expr.granularity = *granularity;
      out.push_back(std::move(expr));
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::missing_field, where + ": " + e.what());
    }
  });
  return out;
}

}  // namespace cot4det
