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
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cot4det/cot_parser.hpp"
#include "cot4det/datasets.hpp"
#include "cot4det/geometry.hpp"

namespace cot4det {

// Small-object area cutoff in square pixels (32 x 32).
inline constexpr double kSmallAreaMax = 1024.0;

inline const std::vector<double>& coco_thresholds() {
  static const std::vector<double> t = {0.50, 0.55, 0.60, 0.65, 0.70,
                                        0.75, 0.80, 0.85, 0.90, 0.95};
  return t;
}

struct MatchPair {
  std::size_t pred = 0;
  std::size_t gt = 0;
  double iou = 0;
};

struct Matching {
  std::vector<MatchPair> pairs;
  std::vector<std::size_t> unmatched_preds;
  std::vector<std::size_t> unmatched_gts;
};

// Greedy score-order matching. Predictions are ranked by score descending
// (ties keep input order); each takes the unmatched same-category ground
// truth of highest IoU when that IoU reaches the threshold, ties going to the
// lower ground-truth index. IoU >= threshold is inclusive.
inline Matching match_greedy(const std::vector<Detection>& preds,
                             const std::vector<LabeledBox>& gts, double iou_thresh) {
  std::vector<std::size_t> rank(preds.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
  std::stable_sort(rank.begin(), rank.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });

  Matching m;
  std::vector<bool> gt_used(gts.size(), false);
  std::vector<bool> pred_used(preds.size(), false);
  for (std::size_t pi : rank) {
    double best_iou = 0;
    std::size_t best_gt = gts.size();
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_used[gi] || gts[gi].label != preds[pi].label) continue;
      double v = iou(preds[pi].box, gts[gi].box);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best_gt = gi;
      }
    }
    if (best_gt < gts.size()) {
      gt_used[best_gt] = true;
      pred_used[pi] = true;
      m.pairs.push_back(MatchPair{pi, best_gt, best_iou});
    }
  }
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!pred_used[i]) m.unmatched_preds.push_back(i);
  }
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!gt_used[i]) m.unmatched_gts.push_back(i);
  }
  return m;
}

struct PrCounts {
  double precision = 1.0;
  double recall = 1.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  // Set when gts exist but no prediction was made; precision is reported as
  // 1.0 in that case so aggregation stays total, and recall exposes the miss.
  bool degenerate_no_predictions = false;
};

inline PrCounts precision_recall(const std::vector<Detection>& preds,
                                 const std::vector<LabeledBox>& gts, double iou_thresh = 0.5) {
  Matching m = match_greedy(preds, gts, iou_thresh);
  PrCounts out;
  out.tp = m.pairs.size();
  out.fp = m.unmatched_preds.size();
  out.fn = m.unmatched_gts.size();
  if (preds.empty()) {
    out.precision = 1.0;
    out.degenerate_no_predictions = !gts.empty();
  } else {
    out.precision = static_cast<double>(out.tp) / static_cast<double>(out.tp + out.fp);
  }
  out.recall = gts.empty() ? 1.0
                           : static_cast<double>(out.tp) / static_cast<double>(out.tp + out.fn);
  return out;
}

namespace detail {

// 101-point interpolated AP from a ranked TP flag sequence. `total_gts` > 0.
inline double interpolated_ap(const std::vector<bool>& tp_ranked, std::size_t total_gts) {
  const std::size_t k = tp_ranked.size();
  std::vector<double> rc(k), pr(k);
  std::size_t tp_cum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (tp_ranked[i]) ++tp_cum;
    rc[i] = static_cast<double>(tp_cum) / static_cast<double>(total_gts);
    pr[i] = static_cast<double>(tp_cum) / static_cast<double>(i + 1);
  }
  for (std::size_t i = k; i-- > 1;) {
    if (pr[i] > pr[i - 1]) pr[i - 1] = pr[i];
  }
  double sum = 0;
  std::size_t lo = 0;
  for (int j = 0; j <= 100; ++j) {
    const double r = static_cast<double>(j) / 100.0;
    while (lo < k && rc[lo] < r) ++lo;
    if (lo == k) break;  // no rank reaches this recall; remaining points are 0
    sum += pr[lo];
  }
  return sum / 101.0;
}

}  // namespace detail

// Pooled AP over one ranked list (categories may be mixed; matching is
// same-category). Returns nothing when there are no ground truths.
inline std::optional<double> average_precision(const std::vector<Detection>& preds,
                                               const std::vector<LabeledBox>& gts,
                                               double iou_thresh) {
  if (gts.empty()) return std::nullopt;
  Matching m = match_greedy(preds, gts, iou_thresh);
  std::vector<bool> matched(preds.size(), false);
  for (const auto& p : m.pairs) matched[p.pred] = true;

  std::vector<std::size_t> rank(preds.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
  std::stable_sort(rank.begin(), rank.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  std::vector<bool> tp_ranked;
  tp_ranked.reserve(preds.size());
  for (std::size_t pi : rank) tp_ranked.push_back(matched[pi]);
  return detail::interpolated_ap(tp_ranked, gts.size());
}

struct CocoMapResult {
  double map = 0;
  std::optional<double> ap_small;
  // Per-category AP averaged over the threshold sweep; only categories with
  // at least one ground truth appear.
  std::vector<std::pair<std::string, double>> per_category_ap;
  std::size_t vocab_mismatch_detections = 0;
};

namespace detail {

struct PooledPred {
  double score = 0;
  std::int64_t image_id = 0;
  std::size_t image = 0;  // index into the annotations vector
  std::size_t order = 0;  // emission index within the image
  const BBox* box = nullptr;
};

struct PooledGt {
  std::size_t image = 0;
  const BBox* box = nullptr;
  bool small = false;
};

// Ranking is deterministic and invariant to input image order: score
// descending, then image id, then emission index.
inline void sort_pooled(std::vector<PooledPred>& preds) {
  std::sort(preds.begin(), preds.end(), [](const PooledPred& a, const PooledPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.order < b.order;
  });
}

// Greedy matching of a pooled ranked list against per-image ground truths.
// Returns, per ranked prediction, the index into `gts` it matched or npos.
inline std::vector<std::size_t> match_pooled(const std::vector<PooledPred>& ranked,
                                             const std::vector<PooledGt>& gts,
                                             double iou_thresh) {
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> matched_gt(ranked.size(), npos);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    double best_iou = 0;
    std::size_t best = npos;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != ranked[r].image) continue;
      double v = iou(*ranked[r].box, *gts[g].box);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best != npos) {
      used[best] = true;
      matched_gt[r] = best;
    }
  }
  return matched_gt;
}

}  // namespace detail

// COCO-protocol mAP over the threshold sweep, with a small-object variant.
// Detections are pooled across images per category; matching stays within an
// image. For the small variant, predictions matched to non-small ground
// truths are removed from the ranking and the remaining unmatched ones stay
// false positives; categories without small ground truths are excluded.
inline CocoMapResult coco_map(const std::vector<ImageAnnotation>& annotations,
                              const std::vector<std::vector<Detection>>& detections,
                              const CategoryVocab& vocab,
                              const std::vector<double>& thresholds = coco_thresholds()) {
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  CocoMapResult out;

  std::unordered_map<std::string, std::vector<detail::PooledPred>> preds_by_cat;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    if (i >= detections.size()) break;
    for (std::size_t d = 0; d < detections[i].size(); ++d) {
      const Detection& det = detections[i][d];
      if (!vocab.index_of_name(det.label)) {
        ++out.vocab_mismatch_detections;
        continue;
      }
      preds_by_cat[det.label].push_back(detail::PooledPred{
          det.score, annotations[i].image_id, i, d, &det.box});
    }
  }

  std::unordered_map<std::string, std::vector<detail::PooledGt>> gts_by_cat;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    for (const auto& inst : annotations[i].instances) {
      const std::string& name = vocab.name_of_id(inst.category_id);
      gts_by_cat[name].push_back(detail::PooledGt{i, &inst.box, area(inst.box) < kSmallAreaMax});
    }
  }

  // Category order follows the vocabulary for a reproducible report.
  std::vector<std::string> cat_order;
  for (const auto& c : vocab.entries()) {
    if (gts_by_cat.count(c.name)) cat_order.push_back(c.name);
  }

  double ap_sum = 0;
  double ap_small_sum = 0;
  std::size_t small_cats = 0;
  for (const auto& name : cat_order) {
    auto& gts = gts_by_cat[name];
    std::vector<detail::PooledPred> ranked;
    if (auto it = preds_by_cat.find(name); it != preds_by_cat.end()) ranked = it->second;
    detail::sort_pooled(ranked);

    const std::size_t total_small =
        static_cast<std::size_t>(std::count_if(gts.begin(), gts.end(),
                                               [](const detail::PooledGt& g) { return g.small; }));
    double ap_acc = 0;
    double ap_small_acc = 0;
    for (double t : thresholds) {
      auto matched_gt = detail::match_pooled(ranked, gts, t);
      std::vector<bool> tp_ranked(ranked.size());
      for (std::size_t r = 0; r < ranked.size(); ++r) tp_ranked[r] = matched_gt[r] != npos;
      ap_acc += detail::interpolated_ap(tp_ranked, gts.size());

      if (total_small > 0) {
        std::vector<bool> tp_small;
        tp_small.reserve(ranked.size());
        for (std::size_t r = 0; r < ranked.size(); ++r) {
          if (matched_gt[r] != npos && !gts[matched_gt[r]].small) continue;  // ignored
          tp_small.push_back(matched_gt[r] != npos);
        }
        ap_small_acc += detail::interpolated_ap(tp_small, total_small);
      }
    }
    const double n_thresh = static_cast<double>(thresholds.size());
    out.per_category_ap.emplace_back(name, ap_acc / n_thresh);
    ap_sum += ap_acc / n_thresh;
    if (total_small > 0) {
      ap_small_sum += ap_small_acc / n_thresh;
      ++small_cats;
    }
  }
  if (!cat_order.empty()) out.map = ap_sum / static_cast<double>(cat_order.size());
  if (small_cats > 0) out.ap_small = ap_small_sum / static_cast<double>(small_cats);
  return out;
}

struct LvisBreakdown {
  std::optional<double> ap_rare;
  std::optional<double> ap_common;
  std::optional<double> ap_frequent;
};

inline LvisBreakdown lvis_breakdown(const std::vector<std::pair<std::string, double>>& per_cat_ap,
                                    const CategoryVocab& vocab) {
  double sums[3] = {0, 0, 0};
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& [name, ap] : per_cat_ap) {
    auto idx = vocab.index_of_name(name);
    if (!idx) continue;
    switch (vocab.at(*idx).band) {
      case FrequencyBand::rare: sums[0] += ap; ++counts[0]; break;
      case FrequencyBand::common: sums[1] += ap; ++counts[1]; break;
      case FrequencyBand::frequent: sums[2] += ap; ++counts[2]; break;
      case FrequencyBand::unknown: break;
    }
  }
  LvisBreakdown out;
  if (counts[0]) out.ap_rare = sums[0] / static_cast<double>(counts[0]);
  if (counts[1]) out.ap_common = sums[1] / static_cast<double>(counts[1]);
  if (counts[2]) out.ap_frequent = sums[2] / static_cast<double>(counts[2]);
  return out;
}

// Referring-expression accuracy: one retained prediction per expression,
// correct only when IoU with the target is STRICTLY above 0.5. Missing
// predictions count as incorrect.
inline double rec_accuracy(const std::vector<std::optional<BBox>>& retained,
                           const std::vector<RefExpression>& expressions) {
  if (expressions.empty()) return 1.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < expressions.size(); ++i) {
    if (i >= retained.size() || !retained[i]) continue;
    if (iou(*retained[i], expressions[i].target) > 0.5) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(expressions.size());
}

struct EvalReport {
  std::string setting;
  double precision50 = 1.0;
  double recall50 = 1.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  bool degenerate_no_predictions = false;
  double map = 0;
  std::optional<double> ap_small;
  std::optional<double> ap_rare;
  std::optional<double> ap_common;
  std::optional<double> ap_frequent;
  std::vector<std::pair<std::string, double>> per_category_ap;
  std::size_t images_evaluated = 0;
  std::size_t images_failed = 0;
  std::size_t images_skipped = 0;
  std::size_t vocab_mismatches = 0;
  bool rec_only = false;
  std::optional<double> rec_accuracy;
};

// Corpus-level scoring: micro P/R at IoU 0.5 (counts summed across images,
// then divided) plus the threshold-sweep AP family.
inline EvalReport score_detections(const std::vector<ImageAnnotation>& annotations,
                                   const std::vector<std::vector<Detection>>& detections,
                                   const CategoryVocab& vocab, std::string_view setting) {
  EvalReport rep;
  rep.setting = std::string(setting);
  rep.images_evaluated = annotations.size();

  std::size_t total_preds = 0;
  std::size_t total_gts = 0;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    std::vector<LabeledBox> gts;
    for (const auto& inst : annotations[i].instances) {
      gts.push_back(LabeledBox{vocab.name_of_id(inst.category_id), inst.box});
    }
    static const std::vector<Detection> kNoDetections;
    const std::vector<Detection>& dets =
        i < detections.size() ? detections[i] : kNoDetections;
    PrCounts pr = precision_recall(dets, gts, 0.5);
    rep.tp += pr.tp;
    rep.fp += pr.fp;
    rep.fn += pr.fn;
    total_preds += dets.size();
    total_gts += gts.size();
  }
  if (total_preds == 0) {
    rep.precision50 = 1.0;
    rep.degenerate_no_predictions = total_gts > 0;
  } else {
    rep.precision50 = static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fp);
  }
  rep.recall50 = total_gts == 0
                     ? 1.0
                     : static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fn);

  CocoMapResult cm = coco_map(annotations, detections, vocab);
  rep.map = cm.map;
  rep.ap_small = cm.ap_small;
  rep.per_category_ap = std::move(cm.per_category_ap);
  rep.vocab_mismatches = cm.vocab_mismatch_detections;

  LvisBreakdown bands = lvis_breakdown(rep.per_category_ap, vocab);
  rep.ap_rare = bands.ap_rare;
  rep.ap_common = bands.ap_common;
  rep.ap_frequent = bands.ap_frequent;
  return rep;
}

inline nlohmann::json eval_report_to_json(const EvalReport& rep) {
  nlohmann::json j{
      {"setting", rep.setting},
      {"precision_50", rep.precision50},
      {"recall_50", rep.recall50},
      {"tp", rep.tp},
      {"fp", rep.fp},
      {"fn", rep.fn},
      {"degenerate_no_predictions", rep.degenerate_no_predictions},
      {"map", rep.map},
      {"images_evaluated", rep.images_evaluated},
      {"images_failed", rep.images_failed},
      {"images_skipped", rep.images_skipped},
      {"vocab_mismatches", rep.vocab_mismatches},
      {"rec_only", rep.rec_only},
  };
  if (rep.ap_small) j["ap_small"] = *rep.ap_small;
  if (rep.ap_rare) j["ap_rare"] = *rep.ap_rare;
  if (rep.ap_common) j["ap_common"] = *rep.ap_common;
  if (rep.ap_frequent) j["ap_frequent"] = *rep.ap_frequent;
  if (rep.rec_accuracy) j["rec_accuracy"] = *rep.rec_accuracy;
  nlohmann::json per_cat = nlohmann::json::object();
  for (const auto& [name, ap] : rep.per_category_ap) per_cat[name] = ap;
  j["per_category_ap"] = per_cat;
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport rep;
  rep.setting = j.value("setting", std::string());
  rep.precision50 = j.value("precision_50", 1.0);
  rep.recall50 = j.value("recall_50", 1.0);
  rep.tp = j.value("tp", std::size_t{0});
  rep.fp = j.value("fp", std::size_t{0});
  rep.fn = j.value("fn", std::size_t{0});
  rep.degenerate_no_predictions = j.value("degenerate_no_predictions", false);
  rep.map = j.value("map", 0.0);
  rep.images_evaluated = j.value("images_evaluated", std::size_t{0});
  rep.images_failed = j.value("images_failed", std::size_t{0});
  rep.images_skipped = j.value("images_skipped", std::size_t{0});
  rep.vocab_mismatches = j.value("vocab_mismatches", std::size_t{0});
  rep.rec_only = j.value("rec_only", false);
  if (j.contains("ap_small")) rep.ap_small = j["ap_small"].get<double>();
  if (j.contains("ap_rare")) rep.ap_rare = j["ap_rare"].get<double>();
  if (j.contains("ap_common")) rep.ap_common = j["ap_common"].get<double>();
  if (j.contains("ap_frequent")) rep.ap_frequent = j["ap_frequent"].get<double>();
  if (j.contains("rec_accuracy")) rep.rec_accuracy = j["rec_accuracy"].get<double>();
  if (j.contains("per_category_ap")) {
    for (const auto& [name, ap] : j["per_category_ap"].items()) {
      rep.per_category_ap.emplace_back(name, ap.get<double>());
    }
  }
  std::sort(rep.per_category_ap.begin(), rep.per_category_ap.end());
  return rep;
}

// Plain-text table with one header row and one value row (percentages at one
// decimal), followed by count lines.
inline std::string render_report_table(const EvalReport& rep) {
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
    return std::string(buf);
  };
  std::vector<std::pair<std::string, std::string>> cols;
  if (rep.rec_only) {
    if (rep.rec_accuracy) cols.emplace_back("Acc", pct(*rep.rec_accuracy));
  } else {
    cols.emplace_back("P@0.5", pct(rep.precision50));
    cols.emplace_back("R@0.5", pct(rep.recall50));
    cols.emplace_back("mAP", pct(rep.map));
    if (rep.ap_small) cols.emplace_back("AP_small", pct(*rep.ap_small));
    if (rep.ap_rare) cols.emplace_back("AP-R", pct(*rep.ap_rare));
    if (rep.ap_common) cols.emplace_back("AP-C", pct(*rep.ap_common));
    if (rep.ap_frequent) cols.emplace_back("AP-F", pct(*rep.ap_frequent));
    if (rep.rec_accuracy) cols.emplace_back("Acc", pct(*rep.rec_accuracy));
  }

  std::string header, values;
  for (const auto& [name, value] : cols) {
    std::size_t w = std::max(name.size(), value.size()) + 2;
    header += std::string(w - name.size(), ' ') + name;
    values += std::string(w - value.size(), ' ') + value;
  }
  std::string out = "setting: " + rep.setting + "\n" + header + "\n" + values + "\n";
  if (!rep.rec_only) {
    out += "\ntp " + std::to_string(rep.tp) + "  fp " + std::to_string(rep.fp) + "  fn " +
           std::to_string(rep.fn) + "\n";
  }
  out += "images: " + std::to_string(rep.images_evaluated) + " evaluated, " +
         std::to_string(rep.images_failed) + " failed, " + std::to_string(rep.images_skipped) +
         " skipped\n";
  if (rep.vocab_mismatches > 0) {
    out += "vocab mismatches: " + std::to_string(rep.vocab_mismatches) + "\n";
  }
  if (rep.degenerate_no_predictions) {
    out += "note: no predictions were made against a non-empty ground truth\n";
  }
  return out;
}

}  // namespace cot4det
