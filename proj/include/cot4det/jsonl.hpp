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

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include <json.hpp>

#include "cot4det/error.hpp"

namespace cot4det {

// Every intermediate artifact is line-delimited UTF-8 JSON so each stage can
// be inspected, diffed, and resumed with standard text tools.

inline void for_each_jsonl(const std::filesystem::path& path,
                           const std::function<void(std::size_t line_no, const nlohmann::json&)>& fn) {
  std::ifstream in(path);
  if (!in) raise(Errc::io_error, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::io_error, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    fn(line_no, record);
  }
}

class JsonlWriter {
 public:
  enum class Mode { truncate, append };

  explicit JsonlWriter(const std::filesystem::path& path, Mode mode = Mode::truncate)
      : out_(path, mode == Mode::append ? std::ios::app : std::ios::trunc) {
    if (!out_) raise(Errc::io_error, "cannot open " + path.string() + " for writing");
  }

  // Flushes per record so an interrupted run leaves a readable prefix.
  void write(const nlohmann::json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(Errc::io_error, "cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::io_error, path.string() + ": " + e.what());
  }
  return doc;
}

}  // namespace cot4det
