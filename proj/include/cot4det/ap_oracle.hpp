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

// Reference reimplementation of ranked average precision, kept deliberately
// separate from the production metrics code: its own box type, its own
// overlap arithmetic, its own matching walk, and exact rational integration
// of the 101-point curve. Capped to tiny instances so exactness is cheap.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cot4det/error.hpp"

namespace cot4det::oracle {

struct OracleBox {
  double x1 = 0;
  double y1 = 0;
  double x2 = 0;
  double y2 = 0;
};

struct OraclePred {
  OracleBox box;
  std::string category;
  double score = 0;
};

struct OracleGt {
  OracleBox box;
  std::string category;
};

inline constexpr std::size_t kOracleCap = 8;

namespace detail {

inline double overlap_ratio(const OracleBox& a, const OracleBox& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / uni;
}

}  // namespace detail

// Exact 101-point interpolated AP for at most 8 predictions and 8 ground
// truths. Greedy score-order matching is simulated directly; every recall
// grid point is answered with integer arithmetic (all precisions have
// denominators dividing 840 = lcm(1..8)). Returns nothing when `gts` is
// empty. Above the size cap raises TooLarge.
inline std::optional<double> brute_force_ap_oracle(const std::vector<OraclePred>& preds,
                                                   const std::vector<OracleGt>& gts,
                                                   double iou_thresh) {
  if (preds.size() > kOracleCap || gts.size() > kOracleCap) {
    raise(Errc::too_large, "oracle accepts at most " + std::to_string(kOracleCap) +
                               " predictions and ground truths");
  }
  if (gts.empty()) return std::nullopt;

  std::vector<std::size_t> rank(preds.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
  std::stable_sort(rank.begin(), rank.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });

  const std::size_t n = preds.size();
  const std::size_t g = gts.size();
  std::vector<bool> gt_taken(g, false);
  std::vector<std::int64_t> tp_cum(n + 1, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const OraclePred& p = preds[rank[r]];
    double best = 0;
    std::size_t best_gt = g;
    for (std::size_t j = 0; j < g; ++j) {
      if (gt_taken[j] || gts[j].category != p.category) continue;
      double v = detail::overlap_ratio(p.box, gts[j].box);
      if (v >= iou_thresh && v > best) {
        best = v;
        best_gt = j;
      }
    }
    std::int64_t hit = 0;
    if (best_gt < g) {
      gt_taken[best_gt] = true;
      hit = 1;
    }
    tp_cum[r + 1] = tp_cum[r] + hit;
  }

  // S accumulates sum of the 101 interpolated precisions, scaled by 840.
  std::int64_t s = 0;
  for (std::int64_t j = 0; j <= 100; ++j) {
    std::int64_t best_num = 0;  // best precision tp/k so far
    std::int64_t best_den = 1;
    bool found = false;
    for (std::size_t k = 1; k <= n; ++k) {
      if (100 * tp_cum[k] < j * static_cast<std::int64_t>(g)) continue;  // recall below grid point
      const std::int64_t num = tp_cum[k];
      const std::int64_t den = static_cast<std::int64_t>(k);
      if (!found || num * best_den > best_num * den) {
        best_num = num;
        best_den = den;
        found = true;
      }
    }
    if (found) s += best_num * (840 / best_den);
  }
  return static_cast<double>(s) / (840.0 * 101.0);
}

}  // namespace cot4det::oracle
