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
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cot4det/datasets.hpp"
#include "cot4det/error.hpp"
#include "cot4det/geometry.hpp"
#include "cot4det/rng.hpp"

namespace cot4det {

enum class Setting { ground_truth_categories, full_category, sampled };

inline std::string_view setting_name(Setting s) {
  switch (s) {
    case Setting::ground_truth_categories: return "ground_truth_categories";
    case Setting::full_category: return "full_category";
    case Setting::sampled: return "sampled";
  }
  return "sampled";
}

inline std::optional<Setting> parse_setting(std::string_view s) {
  if (s == "ground_truth_categories" || s == "gt") return Setting::ground_truth_categories;
  if (s == "full_category" || s == "full") return Setting::full_category;
  if (s == "sampled") return Setting::sampled;
  return std::nullopt;
}

// The category list shown to the model for one image. `positives` and
// `negatives` partition `categories` and preserve its order.
struct PromptSpec {
  std::int64_t image_id = 0;
  std::vector<std::string> categories;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
  Setting setting = Setting::sampled;
  Granularity granularity = Granularity::word;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Distinct category ids present in the image, ascending.
inline std::vector<int> present_ids(const ImageAnnotation& ann) {
  std::set<int> ids;
  for (const auto& inst : ann.instances) ids.insert(inst.category_id);
  return std::vector<int>(ids.begin(), ids.end());
}

}  // namespace detail

// Positives only, ascending category id. Used for evaluation where the model
// is told exactly which classes are present.
inline PromptSpec make_gt_spec(const ImageAnnotation& ann, const CategoryVocab& vocab,
                               Granularity granularity = Granularity::word) {
  PromptSpec spec;
  spec.image_id = ann.image_id;
  spec.setting = Setting::ground_truth_categories;
  spec.granularity = granularity;
  for (int id : detail::present_ids(ann)) {
    spec.categories.push_back(vocab.name_of_id(id));
  }
  spec.positives = spec.categories;
  if (spec.categories.empty()) {
    raise(Errc::empty_image, "image " + std::to_string(ann.image_id) + " has no instances");
  }
  return spec;
}

// Entire vocabulary in ascending id order; the model must reject the absent
// classes on its own.
inline PromptSpec make_full_spec(const ImageAnnotation& ann, const CategoryVocab& vocab,
                                 Granularity granularity = Granularity::word) {
  PromptSpec spec;
  spec.image_id = ann.image_id;
  spec.setting = Setting::full_category;
  spec.granularity = granularity;
  std::vector<const Category*> cats;
  cats.reserve(vocab.size());
  for (const auto& c : vocab.entries()) cats.push_back(&c);
  std::sort(cats.begin(), cats.end(),
            [](const Category* a, const Category* b) { return a->id < b->id; });
  std::unordered_set<int> present;
  for (const auto& inst : ann.instances) present.insert(inst.category_id);
  for (const Category* c : cats) {
    spec.categories.push_back(c->name);
    if (present.count(c->id)) spec.positives.push_back(c->name);
    else spec.negatives.push_back(c->name);
  }
  return spec;
}

// Training-style sampling: all present categories plus round(neg_ratio * P)
// absent ones drawn without replacement, the whole list shuffled. Capping at
// max_categories keeps the lowest ids. Deterministic given seed.
inline PromptSpec sample_categories(const ImageAnnotation& ann, const CategoryVocab& vocab,
                                    double neg_ratio, std::size_t max_categories,
                                    std::uint64_t seed) {
  if (max_categories == 0) raise(Errc::empty_category_list, "max_categories must be positive");
  if (neg_ratio < 0) raise(Errc::empty_category_list, "neg_ratio must be non-negative");

  std::vector<int> present = detail::present_ids(ann);
  for (int id : present) {
    if (!vocab.index_of_id(id)) {
      raise(Errc::unknown_category, "image " + std::to_string(ann.image_id) +
                                        " uses category id " + std::to_string(id) +
                                        " absent from vocab");
    }
  }
  if (present.size() > max_categories) present.resize(max_categories);

  std::vector<int> absent;
  {
    std::unordered_set<int> present_set(present.begin(), present.end());
    std::vector<int> all_ids;
    all_ids.reserve(vocab.size());
    for (const auto& c : vocab.entries()) all_ids.push_back(c.id);
    std::sort(all_ids.begin(), all_ids.end());
    for (int id : all_ids) {
      if (!present_set.count(id)) absent.push_back(id);
    }
  }

  std::size_t want_neg = static_cast<std::size_t>(
      std::llround(neg_ratio * static_cast<double>(present.size())));
  want_neg = std::min(want_neg, absent.size());
  if (present.size() + want_neg > max_categories) want_neg = max_categories - present.size();

  Rng rng(seed);
  // Partial Fisher-Yates: the first want_neg slots become the sample.
  for (std::size_t i = 0; i < want_neg; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(absent.size() - i));
    std::swap(absent[i], absent[j]);
  }
  absent.resize(want_neg);

  PromptSpec spec;
  spec.image_id = ann.image_id;
  spec.setting = Setting::sampled;
  spec.seed = seed;

  std::vector<std::pair<int, bool>> chosen;  // (category id, is positive)
  chosen.reserve(present.size() + absent.size());
  for (int id : present) chosen.emplace_back(id, true);
  for (int id : absent) chosen.emplace_back(id, false);
  if (chosen.empty()) {
    raise(Errc::empty_image, "image " + std::to_string(ann.image_id) +
                                 " yields an empty category list");
  }
  rng.shuffle(chosen);

  for (const auto& [id, positive] : chosen) {
    const std::string& name = vocab.name_of_id(id);
    spec.categories.push_back(name);
    if (positive) spec.positives.push_back(name);
    else spec.negatives.push_back(name);
  }
  return spec;
}

inline std::string render_prompt(const PromptSpec& spec) {
  if (spec.categories.empty()) raise(Errc::empty_category_list, "prompt needs >= 1 category");
  return "<image>\n Locate every " + detail::join(spec.categories, ", ") + " in the image.";
}

// Pixel coordinates print as integers when integral, otherwise with at most
// two decimals (trailing zeros stripped). Values on the hundredths grid
// survive a print/parse cycle bit-exactly.
inline std::string format_coord(double v) {
  double r = std::round(v);
  if (v == r) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.0f", v);
    return buf;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

struct LabeledBox {
  std::string label;
  BBox box;
};

inline std::string render_grounding_record(const LabeledBox& lb) {
  return "{\"bbox_2d\": [" + format_coord(lb.box.x1()) + ", " + format_coord(lb.box.y1()) + ", " +
         format_coord(lb.box.x2()) + ", " + format_coord(lb.box.y2()) +
         "], \"label\": " + nlohmann::json(lb.label).dump() + "}";
}

inline std::string render_grounding_array(const std::vector<LabeledBox>& boxes) {
  if (boxes.empty()) return "[]";
  std::string out = "[\n";
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out += "  " + render_grounding_record(boxes[i]);
    out += (i + 1 < boxes.size()) ? ",\n" : "\n";
  }
  out += "]";
  return out;
}

// Canonical three-stage answer text. Empty stages keep their headers; the
// grounding stage is `[]` when no boxes exist.
inline std::string render_cot_answer_parts(
    const std::vector<std::string>& classification,
    const std::vector<std::pair<std::string, std::size_t>>& counts,
    const std::vector<LabeledBox>& boxes) {
  std::string out = "Category Classification:\n";
  if (!classification.empty()) out += detail::join(classification, ", ") + "\n";
  out += "\nCategory Counting:\n";
  if (!counts.empty()) {
    std::vector<std::string> parts;
    parts.reserve(counts.size());
    for (const auto& [name, n] : counts) parts.push_back(name + ": " + std::to_string(n));
    out += detail::join(parts, "; ") + "\n";
  }
  out += "\nGrounding Boxes:\n" + render_grounding_array(boxes);
  return out;
}

// Ground-truth answer for a detection image: positives in prompt order, each
// category's boxes left to right.
inline std::string render_cot_answer(const ImageAnnotation& ann, const PromptSpec& spec,
                                     const CategoryVocab& vocab) {
  std::map<std::string, std::vector<BBox>> by_name;
  for (const auto& inst : ann.instances) {
    by_name[vocab.name_of_id(inst.category_id)].push_back(inst.box);
  }

  std::vector<std::string> classification;
  std::vector<std::pair<std::string, std::size_t>> counts;
  std::vector<LabeledBox> boxes;
  for (const std::string& name : spec.positives) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      raise(Errc::unknown_category, "positive '" + name + "' has no instances in image " +
                                        std::to_string(ann.image_id));
    }
    std::sort(it->second.begin(), it->second.end(), spatial_less);
    classification.push_back(name);
    counts.emplace_back(name, it->second.size());
    for (const BBox& b : it->second) boxes.push_back(LabeledBox{name, b});
  }
  return render_cot_answer_parts(classification, counts, boxes);
}

// Referring expressions reuse the same grammar: the expression fills the
// category slot and grounds exactly one box.
inline PromptSpec make_refexp_spec(const RefExpression& expr) {
  PromptSpec spec;
  spec.image_id = expr.image_id;
  spec.setting = Setting::ground_truth_categories;
  spec.granularity = expr.granularity;
  spec.categories.push_back(normalize_name(expr.expression));
  spec.positives = spec.categories;
  return spec;
}

inline std::string render_refexp_answer(const RefExpression& expr) {
  const std::string name = normalize_name(expr.expression);
  return render_cot_answer_parts({name}, {{name, 1}}, {LabeledBox{name, expr.target}});
}

// One serialized training or evaluation sample.
struct PromptRecord {
  std::string prompt;
  std::string answer;
  PromptSpec spec;
  std::string tag;
};

inline PromptRecord make_prompt_record(const ImageAnnotation& ann, PromptSpec spec,
                                       const CategoryVocab& vocab) {
  PromptRecord rec;
  rec.prompt = render_prompt(spec);
  rec.answer = render_cot_answer(ann, spec, vocab);
  rec.tag = ann.source_tag;
  rec.spec = std::move(spec);
  return rec;
}

inline PromptRecord make_prompt_record(const RefExpression& expr, std::string_view tag) {
  PromptRecord rec;
  rec.spec = make_refexp_spec(expr);
  rec.prompt = render_prompt(rec.spec);
  rec.answer = render_refexp_answer(expr);
  rec.tag = std::string(tag);
  return rec;
}

inline nlohmann::json prompt_record_to_json(const PromptRecord& rec) {
  nlohmann::json j{
      {"prompt", rec.prompt},
      {"answer", rec.answer},
      {"image_id", rec.spec.image_id},
      {"setting", std::string(setting_name(rec.spec.setting))},
      {"granularity", std::string(granularity_name(rec.spec.granularity))},
      {"categories", rec.spec.categories},
      {"seed", rec.spec.seed},
  };
  if (!rec.tag.empty()) j["tag"] = rec.tag;
  return j;
}

// Weighted blend of named corpora. Weights must sum to 1 within 1e-6.
struct MixtureSpec {
  std::vector<std::pair<std::string, double>> weights;
};

struct MixtureDraw {
  std::string tag;
  std::size_t index;
};

// Per draw, a corpus is chosen by weight; within a corpus, indices follow
// seeded epoch permutations so no record repeats before all are used.
class MixtureSampler {
 public:
  MixtureSampler(const std::vector<std::pair<std::string, std::size_t>>& corpora,
                 const MixtureSpec& spec, std::uint64_t seed)
      : master_(seed), seed_(seed) {
    std::map<std::string, std::size_t> sizes;
    for (const auto& [tag, count] : corpora) {
      if (sizes.count(tag)) raise(Errc::unknown_tag, "duplicate corpus tag '" + tag + "'");
      sizes[tag] = count;
    }
    double sum = 0;
    std::set<std::string> seen;
    for (const auto& [tag, w] : spec.weights) {
      if (!seen.insert(tag).second) raise(Errc::unknown_tag, "duplicate weight tag '" + tag + "'");
      if (w < 0) raise(Errc::weight_sum_mismatch, "negative weight for '" + tag + "'");
      if (!sizes.count(tag)) raise(Errc::unknown_tag, "weight tag '" + tag + "' has no corpus");
      sum += w;
      if (w == 0) continue;
      if (sizes[tag] == 0) raise(Errc::io_error, "corpus '" + tag + "' is empty");
      Entry e;
      e.tag = tag;
      e.cumulative = 0;  // filled below
      e.weight = w;
      e.order.resize(sizes[tag]);
      for (std::size_t i = 0; i < e.order.size(); ++i) e.order[i] = i;
      e.rng = Rng(mix_seed(seed_, fnv1a(tag)));
      e.pos = e.order.size();  // forces a shuffle before the first draw
      entries_.push_back(std::move(e));
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      raise(Errc::weight_sum_mismatch,
            "weights sum to " + std::to_string(sum) + ", expected 1");
    }
    double acc = 0;
    for (auto& e : entries_) {
      acc += e.weight;
      e.cumulative = acc;
    }
    if (entries_.empty()) raise(Errc::weight_sum_mismatch, "no corpus has positive weight");
    entries_.back().cumulative = 1.0;  // guards against rounding in the scan
  }

  MixtureDraw next() {
    double u = master_.unit();
    std::size_t lo = 0;
    while (lo + 1 < entries_.size() && u >= entries_[lo].cumulative) ++lo;
    Entry& e = entries_[lo];
    if (e.pos == e.order.size()) {
      e.rng.shuffle(e.order);
      e.pos = 0;
    }
    return MixtureDraw{e.tag, e.order[e.pos++]};
  }

 private:
  struct Entry {
    std::string tag;
    double weight = 0;
    double cumulative = 0;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    Rng rng{0};
  };
  std::vector<Entry> entries_;
  Rng master_;
  std::uint64_t seed_;
};

inline std::vector<MixtureDraw> build_mixture(
    const std::vector<std::pair<std::string, std::size_t>>& corpora, const MixtureSpec& spec,
    std::size_t total, std::uint64_t seed) {
  if (total == 0) raise(Errc::weight_sum_mismatch, "total draws must be positive");
  MixtureSampler sampler(corpora, spec, seed);
  std::vector<MixtureDraw> out;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) out.push_back(sampler.next());
  return out;
}

}  // namespace cot4det
