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

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace cot4det {

enum class Errc {
  missing_field,
  malformed_box,
  unknown_category,
  band_conflict,
  unknown_granularity,
  empty_image,
  empty_category_list,
  weight_sum_mismatch,
  unknown_tag,
  no_parsable_content,
  vocab_mismatch,
  transport_error,
  auth_error,
  response_shape_error,
  too_large,
  io_error,
  eval_aborted,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::missing_field: return "MissingField";
    case Errc::malformed_box: return "MalformedBox";
    case Errc::unknown_category: return "UnknownCategory";
    case Errc::band_conflict: return "BandConflict";
    case Errc::unknown_granularity: return "UnknownGranularity";
    case Errc::empty_image: return "EmptyImage";
    case Errc::empty_category_list: return "EmptyCategoryList";
    case Errc::weight_sum_mismatch: return "WeightSumMismatch";
    case Errc::unknown_tag: return "UnknownTag";
    case Errc::no_parsable_content: return "NoParsableContent";
    case Errc::vocab_mismatch: return "VocabMismatch";
    case Errc::transport_error: return "TransportError";
    case Errc::auth_error: return "AuthError";
    case Errc::response_shape_error: return "ResponseShapeError";
    case Errc::too_large: return "TooLarge";
    case Errc::io_error: return "IoError";
    case Errc::eval_aborted: return "EvalAborted";
  }
  return "UnknownError";
}

// Single exception type for the whole toolkit; `code()` identifies the
// failure class so callers can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace cot4det
