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
#include <optional>

namespace cot4det {

// Axis-aligned box in original pixel coordinates, origin top-left.
// Invariants are enforced at construction: x1 < x2, y1 < y2, all
// coordinates finite and >= 0. Degenerate boxes are rejected rather than
// clamped so that parser and ingestion layers can report them distinctly.
class BBox {
 public:
  // Unit box; a default-constructed BBox still satisfies the invariants.
  BBox() : BBox(0.0, 0.0, 1.0, 1.0) {}

  static std::optional<BBox> make(double x1, double y1, double x2, double y2) {
    if (!valid(x1, y1, x2, y2)) return std::nullopt;
    return BBox(x1, y1, x2, y2);
  }

  static bool valid(double x1, double y1, double x2, double y2) {
    if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2)) {
      return false;
    }
    return x1 >= 0.0 && y1 >= 0.0 && x1 < x2 && y1 < y2;
  }

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }

  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }

  friend bool operator==(const BBox& a, const BBox& b) {
    return a.x1_ == b.x1_ && a.y1_ == b.y1_ && a.x2_ == b.x2_ && a.y2_ == b.y2_;
  }

 private:
  BBox(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {}

  double x1_, y1_, x2_, y2_;
};

inline double area(const BBox& b) { return b.width() * b.height(); }

inline double iou(const BBox& a, const BBox& b) {
  const double ix1 = std::max(a.x1(), b.x1());
  const double iy1 = std::max(a.y1(), b.y1());
  const double ix2 = std::min(a.x2(), b.x2());
  const double iy2 = std::min(a.y2(), b.y2());
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = area(a) + area(b) - inter;
  return inter / uni;
}

// Canonical spatial order: left edge first, remaining coordinates as
// tie-breakers so the order is total over distinct boxes.
inline bool spatial_less(const BBox& a, const BBox& b) {
  if (a.x1() != b.x1()) return a.x1() < b.x1();
  if (a.y1() != b.y1()) return a.y1() < b.y1();
  if (a.x2() != b.x2()) return a.x2() < b.x2();
  return a.y2() < b.y2();
}

// Boxes overshooting the image by less than `tolerance` pixels per edge are
// clamped back inside; anything larger (or a box that degenerates after
// clamping) is rejected. Real annotation files contain sub-pixel overshoot.
inline std::optional<BBox> clamp_slight_overshoot(const BBox& b, double width, double height,
                                                  double tolerance = 1.0) {
  if (b.x1() > width || b.y1() > height) return std::nullopt;
  if (b.x2() - width >= tolerance || b.y2() - height >= tolerance) return std::nullopt;
  const double x2 = std::min(b.x2(), width);
  const double y2 = std::min(b.y2(), height);
  return BBox::make(b.x1(), b.y1(), x2, y2);
}

inline bool within_image(const BBox& b, double width, double height) {
  return b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= width && b.y2() <= height;
}

}  // namespace cot4det
