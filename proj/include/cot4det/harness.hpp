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

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>

#include "cot4det/cot_parser.hpp"
#include "cot4det/datasets.hpp"
#include "cot4det/jsonl.hpp"
#include "cot4det/metrics.hpp"
#include "cot4det/prompt_builder.hpp"
#include "cot4det/rng.hpp"

namespace cot4det {

struct InferenceRequest {
  std::string image_ref;  // path or URL; passed through, never decoded
  std::string prompt;
  int max_tokens = 8192;
  double temperature = 0.0;
};

struct ChatClientConfig {
  std::string endpoint;  // scheme://host[:port][/path]; default path below
  std::string model = "cot4det";
  std::string api_key;   // empty: read COT4DET_API_KEY from the environment
  int retries = 3;       // extra attempts after the first
  int backoff_ms = 250;  // doubles per retry
  int concurrency = 8;   // corpus-wide in-flight cap
  int timeout_sec = 120;
  std::function<void(const std::string&)> logger;  // optional
};

namespace detail {

struct SplitUrl {
  std::string base;  // scheme://host[:port]
  std::string path;  // leading '/', possibly empty
};

inline SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    raise(Errc::transport_error, "endpoint URL needs a scheme: " + url);
  }
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace detail

// Chat-completions wire client: one POST per image, message content holding
// one image part and one text part. Retries transient failures (transport,
// 429, 5xx) with exponential backoff; auth failures do not retry.
class ChatClient {
 public:
  explicit ChatClient(ChatClientConfig cfg)
      : cfg_(std::move(cfg)),
        sem_(cfg_.concurrency > 0 ? cfg_.concurrency : 1) {
    if (cfg_.endpoint.empty()) raise(Errc::transport_error, "endpoint URL is empty");
    auto split = detail::split_url(cfg_.endpoint);
    base_ = split.base;
    path_ = (split.path.empty() || split.path == "/") ? "/v1/chat/completions" : split.path;
    if (cfg_.api_key.empty()) {
      if (const char* env = std::getenv("COT4DET_API_KEY")) cfg_.api_key = env;
    }
  }

  const std::string& path() const { return path_; }

  // Thread-safe; bounded corpus-wide by the configured concurrency.
  std::string complete(const InferenceRequest& req) {
    if (req.prompt.empty()) raise(Errc::missing_field, "inference request has an empty prompt");
    sem_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{sem_};

    const nlohmann::json body{
        {"model", cfg_.model},
        {"messages",
         {{{"role", "user"},
           {"content",
            {{{"type", "image_url"}, {"image_url", {{"url", req.image_ref}}}},
             {{"type", "text"}, {"text", req.prompt}}}}}}},
        {"temperature", req.temperature},
        {"max_tokens", req.max_tokens},
    };
    const std::string payload = body.dump();

    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

    std::string last_issue = "no attempt made";
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0) {
        const int delay = cfg_.backoff_ms * (1 << (attempt - 1));
        log("retry " + std::to_string(attempt) + " after " + last_issue + ", backing off " +
            std::to_string(delay) + " ms");
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
      }
      httplib::Client cli(base_);
      cli.set_connection_timeout(std::chrono::seconds(10));
      cli.set_read_timeout(std::chrono::seconds(cfg_.timeout_sec));
      auto res = cli.Post(path_, headers, payload, "application/json");
      if (!res) {
        last_issue = "transport error (" + httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status == 401 || res->status == 403) {
        raise(Errc::auth_error, "endpoint returned status " + std::to_string(res->status));
      }
      if (res->status == 429 || res->status >= 500) {
        last_issue = "status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        raise(Errc::transport_error,
              "endpoint returned unexpected status " + std::to_string(res->status));
      }
      return extract_content(res->body);
    }
    raise(Errc::transport_error,
          "retries exhausted after " + std::to_string(cfg_.retries + 1) + " attempts; last " +
              last_issue);
  }

 private:
  static std::string extract_content(const std::string& body) {
    nlohmann::json doc = nlohmann::json::parse(body, nullptr, false);
    if (doc.is_discarded()) raise(Errc::response_shape_error, "response body is not JSON");
    if (!doc.contains("choices") || !doc["choices"].is_array() || doc["choices"].empty()) {
      raise(Errc::response_shape_error, "response has no choices");
    }
    const auto& first = doc["choices"][0];
    if (!first.contains("message") || !first["message"].contains("content") ||
        !first["message"]["content"].is_string()) {
      raise(Errc::response_shape_error, "response has no assistant message content");
    }
    return first["message"]["content"].get<std::string>();
  }

  void log(const std::string& line) {
    if (!cfg_.logger) return;
    std::lock_guard<std::mutex> lock(log_mutex_);
    cfg_.logger(line);
  }

  ChatClientConfig cfg_;
  std::string base_;
  std::string path_;
  std::counting_semaphore<> sem_;
  std::mutex log_mutex_;
};

// Deterministic fault injection reproducing the known failure shapes of
// box-emitting LVLMs: missed small objects, imprecise coordinates, duplicated
// boxes, and boxes for absent categories.
struct FaultProfile {
  double duplication_rate = 0;    // per surviving box
  int max_duplicates = 1;         // extra copies drawn from 1..max
  double hallucination_rate = 0;  // per negative prompt category
  double small_miss_rate = 0;     // drop prob for area < 1024; quartered above
  double jitter = 0;              // uniform +-px applied per coordinate
  bool corrupt_counts = false;    // perturb declared counts by +-1
  std::uint64_t seed = 0;
};

inline void validate_profile(const FaultProfile& p) {
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(p.duplication_rate) || !rate_ok(p.hallucination_rate) ||
      !rate_ok(p.small_miss_rate)) {
    raise(Errc::missing_field, "fault rates must lie in [0,1]");
  }
  if (p.jitter < 0) raise(Errc::missing_field, "jitter must be non-negative");
  if (p.max_duplicates < 1) raise(Errc::missing_field, "max_duplicates must be >= 1");
}

struct MockAccounting {
  std::size_t gt_boxes = 0;
  std::size_t drops = 0;
  std::size_t duplicates = 0;
  std::size_t hallucinations = 0;
  std::size_t emitted = 0;  // always gt_boxes - drops + duplicates + hallucinations
};

struct MockResult {
  std::string text;
  MockAccounting accounting;
};

// Starts from the canonical ground-truth answer and applies faults in a fixed
// order: small-object drops, jitter, duplication, hallucinated negatives.
// With cot = true the classification and counting stages reflect the
// post-drop originals only; duplicates and hallucinations stay unreflected so
// the declared counts keep their corrective signal. With cot = false only the
// bare grounding array is emitted. Byte-deterministic given (ann, spec,
// profile); the per-image stream is profile.seed mixed with the image id.
inline MockResult mock_generate(const ImageAnnotation& ann, const PromptSpec& spec,
                                const CategoryVocab& vocab, const FaultProfile& profile,
                                bool cot) {
  validate_profile(profile);
  Rng rng(mix_seed(profile.seed, static_cast<std::uint64_t>(ann.image_id)));
  MockResult out;

  std::map<std::string, std::vector<BBox>> by_name;
  for (const auto& inst : ann.instances) {
    by_name[vocab.name_of_id(inst.category_id)].push_back(inst.box);
  }
  std::vector<LabeledBox> originals;
  for (const auto& name : spec.positives) {
    auto it = by_name.find(name);
    if (it == by_name.end()) continue;
    std::sort(it->second.begin(), it->second.end(), spatial_less);
    for (const BBox& b : it->second) originals.push_back(LabeledBox{name, b});
  }
  out.accounting.gt_boxes = originals.size();

  std::vector<LabeledBox> survivors;
  for (const auto& lb : originals) {
    const double p = area(lb.box) < kSmallAreaMax ? profile.small_miss_rate
                                                  : profile.small_miss_rate / 4.0;
    if (p > 0 && rng.bernoulli(p)) {
      ++out.accounting.drops;
    } else {
      survivors.push_back(lb);
    }
  }

  if (profile.jitter > 0) {
    const double j = profile.jitter;
    auto clamp = [](double v, double hi) { return std::min(std::max(v, 0.0), hi); };
    for (auto& lb : survivors) {
      const double x1 = clamp(lb.box.x1() + rng.uniform(-j, j), ann.width);
      const double y1 = clamp(lb.box.y1() + rng.uniform(-j, j), ann.height);
      const double x2 = clamp(lb.box.x2() + rng.uniform(-j, j), ann.width);
      const double y2 = clamp(lb.box.y2() + rng.uniform(-j, j), ann.height);
      auto moved = BBox::make(x1, y1, x2, y2);
      if (moved) lb.box = *moved;  // a degenerate result reverts to the original
    }
  }

  std::vector<LabeledBox> emitted;
  for (const auto& lb : survivors) {
    emitted.push_back(lb);
    if (profile.duplication_rate > 0 && rng.bernoulli(profile.duplication_rate)) {
      const std::size_t extra = 1 + static_cast<std::size_t>(
                                        rng.below(static_cast<std::uint64_t>(profile.max_duplicates)));
      for (std::size_t k = 0; k < extra; ++k) emitted.push_back(lb);
      out.accounting.duplicates += extra;
    }
  }

  for (const auto& name : spec.negatives) {
    if (profile.hallucination_rate > 0 && rng.bernoulli(profile.hallucination_rate)) {
      const double w = ann.width, h = ann.height;
      const double x1 = rng.uniform(0, w * 0.8);
      const double y1 = rng.uniform(0, h * 0.8);
      const double x2 = std::min(x1 + rng.uniform(std::min(2.0, w * 0.1), w * 0.2 + 2.0), w);
      const double y2 = std::min(y1 + rng.uniform(std::min(2.0, h * 0.1), h * 0.2 + 2.0), h);
      auto box = BBox::make(x1, y1, x2, y2);
      if (box) {
        emitted.push_back(LabeledBox{name, *box});
        ++out.accounting.hallucinations;
      }
    }
  }
  out.accounting.emitted = emitted.size();

  if (!cot) {
    out.text = render_grounding_array(emitted);
    return out;
  }

  std::map<std::string, std::size_t> survivor_tally;
  for (const auto& lb : survivors) ++survivor_tally[lb.label];
  std::vector<std::string> classification;
  std::vector<std::pair<std::string, std::size_t>> counts;
  for (const auto& name : spec.positives) {
    auto it = survivor_tally.find(name);
    if (it == survivor_tally.end()) continue;
    classification.push_back(name);
    counts.emplace_back(name, it->second);
  }
  if (profile.corrupt_counts) {
    for (auto& [name, n] : counts) {
      if (rng.bernoulli(0.5)) ++n;
      else if (n > 0) --n;
    }
  }
  out.text = render_cot_answer_parts(classification, counts, emitted);
  return out;
}

// Produces raw model text for one image; throws Error to record a failure.
using BackendFn =
    std::function<std::string(const ImageAnnotation&, const PromptSpec&, const std::string&)>;

struct EvalOptions {
  Setting setting = Setting::ground_truth_categories;
  Policy policy = Policy::repair;
  double dup_iou = 0.9;
  std::size_t jobs = 1;
  std::filesystem::path out_dir;  // empty: no artifacts written
  std::function<void(const std::string&)> log;
};

namespace detail {

struct ImageOutcome {
  bool skipped = false;
  bool failed = false;
  bool cached = false;
  bool no_parsable = false;
  std::string failure_code;
  std::string failure_message;
  std::string prompt;
  std::string raw_text;
  PromptSpec spec;
  std::vector<Detection> detections;
  ConsistencyReport report;
  std::vector<Warning> warnings;
};

inline nlohmann::json detections_to_json(const std::vector<Detection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets) {
    arr.push_back({{"bbox", {d.box.x1(), d.box.y1(), d.box.x2(), d.box.y2()}},
                   {"label", d.label},
                   {"score", d.score}});
  }
  return arr;
}

inline nlohmann::json flags_to_json(const ConsistencyReport& r) {
  return nlohmann::json{{"classification_counts_agree", r.classification_counts_agree},
                        {"counts_boxes_agree", r.counts_boxes_agree},
                        {"labels_subset_of_prompt", r.labels_subset_of_prompt},
                        {"ordering_canonical", r.ordering_canonical},
                        {"boxes_within_image", r.boxes_within_image},
                        {"duplicate_groups", r.duplicate_groups.size()}};
}

inline nlohmann::json warnings_to_json(const std::vector<Warning>& ws) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& w : ws) arr.push_back({{"code", w.code}, {"message", w.message}});
  return arr;
}

// Flushes per-index results to the raw-response ledger strictly in index
// order as they complete, so interrupted runs leave an in-order prefix.
class OrderedLedger {
 public:
  OrderedLedger(std::size_t total, std::function<void(std::size_t)> flush)
      : pending_(total, false), flush_(std::move(flush)) {}

  void complete(std::size_t index) {
    std::lock_guard<std::mutex> lock(mutex_);
    pending_[index] = true;
    while (next_ < pending_.size() && pending_[next_]) {
      flush_(next_);
      ++next_;
    }
  }

 private:
  std::vector<bool> pending_;
  std::size_t next_ = 0;
  std::function<void(std::size_t)> flush_;
  std::mutex mutex_;
};

}  // namespace detail

// Full evaluation pass: build the setting's prompt per image, obtain raw text
// (reusing any previously persisted responses), parse, validate, convert
// under the policy, and score. Artifacts: raw_responses.jsonl (append,
// resumable), detections.jsonl, failures.jsonl, report.json, report.txt.
// Aborts with EvalAborted when more than half of the attempted images fail;
// partial artifacts are written first.
inline EvalReport run_eval(const std::vector<ImageAnnotation>& annotations,
                           const CategoryVocab& vocab, const BackendFn& backend,
                           const EvalOptions& opts) {
  namespace fs = std::filesystem;
  const bool persist = !opts.out_dir.empty();
  if (persist) fs::create_directories(opts.out_dir);

  std::vector<std::size_t> order(annotations.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return annotations[a].image_id < annotations[b].image_id;
  });

  std::unordered_map<std::int64_t, std::string> cache;
  const fs::path raw_path = opts.out_dir / "raw_responses.jsonl";
  if (persist && fs::exists(raw_path)) {
    for_each_jsonl(raw_path, [&](std::size_t, const nlohmann::json& rec) {
      cache[rec.at("image_id").get<std::int64_t>()] = rec.at("raw_text").get<std::string>();
    });
  }

  std::vector<detail::ImageOutcome> outcomes(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const ImageAnnotation& ann = annotations[order[k]];
    detail::ImageOutcome& oc = outcomes[k];
    try {
      oc.spec = opts.setting == Setting::full_category ? make_full_spec(ann, vocab)
                                                       : make_gt_spec(ann, vocab);
      oc.prompt = render_prompt(oc.spec);
    } catch (const Error& e) {
      if (e.code() == Errc::empty_image) {
        oc.skipped = true;
      } else {
        throw;  // a broken vocabulary is a configuration error, not a data point
      }
    }
    if (!oc.skipped) {
      auto it = cache.find(ann.image_id);
      if (it != cache.end()) {
        oc.raw_text = it->second;
        oc.cached = true;
      }
    }
  }
  if (opts.log && opts.setting == Setting::full_category) {
    opts.log("prompt category list length " + std::to_string(vocab.size()) + " per image");
  }

  std::optional<JsonlWriter> raw_writer;
  if (persist) raw_writer.emplace(raw_path, JsonlWriter::Mode::append);
  detail::OrderedLedger ledger(order.size(), [&](std::size_t k) {
    const detail::ImageOutcome& oc = outcomes[k];
    if (!raw_writer || oc.skipped || oc.failed || oc.cached) return;
    raw_writer->write(nlohmann::json{{"image_id", annotations[order[k]].image_id},
                                     {"setting", std::string(setting_name(opts.setting))},
                                     {"prompt", oc.prompt},
                                     {"raw_text", oc.raw_text}});
  });

  auto fetch_one = [&](std::size_t k) {
    detail::ImageOutcome& oc = outcomes[k];
    if (!oc.skipped && !oc.cached) {
      const ImageAnnotation& ann = annotations[order[k]];
      try {
        oc.raw_text = backend(ann, oc.spec, oc.prompt);
      } catch (const Error& e) {
        oc.failed = true;
        oc.failure_code = std::string(errc_name(e.code()));
        oc.failure_message = e.what();
      } catch (const std::exception& e) {
        oc.failed = true;
        oc.failure_code = "InternalError";
        oc.failure_message = e.what();
      }
    }
    ledger.complete(k);
  };

  if (opts.jobs <= 1) {
    for (std::size_t k = 0; k < order.size(); ++k) fetch_one(k);
  } else {
    std::atomic<std::size_t> cursor{0};
    std::vector<std::thread> workers;
    const std::size_t n_workers = std::min(opts.jobs, order.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
      workers.emplace_back([&] {
        while (true) {
          const std::size_t k = cursor.fetch_add(1);
          if (k >= order.size()) break;
          fetch_one(k);
        }
      });
    }
    for (auto& t : workers) t.join();
  }

  // Parse and convert sequentially; the work is cheap and the pass is
  // deterministic regardless of fetch interleaving.
  for (std::size_t k = 0; k < order.size(); ++k) {
    detail::ImageOutcome& oc = outcomes[k];
    if (oc.skipped || oc.failed) continue;
    const ImageAnnotation& ann = annotations[order[k]];
    try {
      ParsedAnswer ans = parse_cot_answer(oc.raw_text);
      oc.report = validate(ans, oc.spec, ann.width, ann.height, opts.dup_iou);
      oc.detections = to_detections(ans, oc.report, opts.policy);
      oc.warnings = std::move(ans.warnings);
    } catch (const Error& e) {
      if (e.code() != Errc::no_parsable_content) throw;
      oc.no_parsable = true;  // refusal or garbage: zero detections, not a failure
      oc.report = validate(ParsedAnswer{}, oc.spec, ann.width, ann.height, opts.dup_iou);
      oc.warnings.push_back({"no_parsable_content", "response had no parsable answer"});
    }
  }

  if (persist) {
    JsonlWriter det_writer(opts.out_dir / "detections.jsonl", JsonlWriter::Mode::truncate);
    JsonlWriter fail_writer(opts.out_dir / "failures.jsonl", JsonlWriter::Mode::truncate);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const detail::ImageOutcome& oc = outcomes[k];
      const std::int64_t image_id = annotations[order[k]].image_id;
      if (oc.failed) {
        fail_writer.write(nlohmann::json{{"image_id", image_id},
                                         {"error", oc.failure_code},
                                         {"message", oc.failure_message}});
        continue;
      }
      if (oc.skipped) continue;
      det_writer.write(nlohmann::json{{"image_id", image_id},
                                      {"detections", detail::detections_to_json(oc.detections)},
                                      {"flags", detail::flags_to_json(oc.report)},
                                      {"warnings", detail::warnings_to_json(oc.warnings)},
                                      {"no_parsable_content", oc.no_parsable}});
    }
  }

  std::vector<ImageAnnotation> scored_anns;
  std::vector<std::vector<Detection>> scored_dets;
  std::size_t failed = 0, skipped = 0, attempted = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const detail::ImageOutcome& oc = outcomes[k];
    if (oc.skipped) {
      ++skipped;
      continue;
    }
    ++attempted;
    if (oc.failed) {
      ++failed;
      continue;
    }
    scored_anns.push_back(annotations[order[k]]);
    scored_dets.push_back(oc.detections);
  }

  EvalReport rep = score_detections(scored_anns, scored_dets, vocab,
                                    setting_name(opts.setting));
  rep.images_failed = failed;
  rep.images_skipped = skipped;

  if (persist) {
    JsonlWriter report_writer(opts.out_dir / "report.json", JsonlWriter::Mode::truncate);
    report_writer.write(eval_report_to_json(rep));
    std::ofstream txt(opts.out_dir / "report.txt", std::ios::trunc);
    txt << render_report_table(rep);
  }
  if (attempted > 0 && failed * 2 > attempted) {
    raise(Errc::eval_aborted, std::to_string(failed) + " of " + std::to_string(attempted) +
                                  " images failed; aborting");
  }
  return rep;
}

// Referring-expression evaluation: one prompt per expression, the first
// surviving detection is the retained box, correctness is IoU strictly above
// 0.5. Expressions are keyed by their 0-based input index.
using RecBackendFn =
    std::function<std::string(std::size_t, const RefExpression&, const std::string&)>;

inline EvalReport run_rec_eval(const std::vector<RefExpression>& expressions,
                               const RecBackendFn& backend, const EvalOptions& opts) {
  namespace fs = std::filesystem;
  const bool persist = !opts.out_dir.empty();
  if (persist) fs::create_directories(opts.out_dir);

  std::unordered_map<std::size_t, std::string> cache;
  const fs::path raw_path = opts.out_dir / "raw_responses.jsonl";
  if (persist && fs::exists(raw_path)) {
    for_each_jsonl(raw_path, [&](std::size_t, const nlohmann::json& rec) {
      cache[rec.at("index").get<std::size_t>()] = rec.at("raw_text").get<std::string>();
    });
  }

  std::optional<JsonlWriter> raw_writer;
  std::optional<JsonlWriter> det_writer;
  std::optional<JsonlWriter> fail_writer;
  if (persist) {
    raw_writer.emplace(raw_path, JsonlWriter::Mode::append);
    det_writer.emplace(opts.out_dir / "detections.jsonl", JsonlWriter::Mode::truncate);
    fail_writer.emplace(opts.out_dir / "failures.jsonl", JsonlWriter::Mode::truncate);
  }

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::optional<BBox>> retained(expressions.size());
  std::vector<RefExpression> evaluated;
  std::vector<std::optional<BBox>> evaluated_retained;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < expressions.size(); ++i) {
    const RefExpression& expr = expressions[i];
    PromptSpec spec = make_refexp_spec(expr);
    const std::string prompt = render_prompt(spec);
    std::string raw;
    bool cached = false;
    if (auto it = cache.find(i); it != cache.end()) {
      raw = it->second;
      cached = true;
    } else {
      try {
        raw = backend(i, expr, prompt);
      } catch (const Error& e) {
        ++failed;
        if (fail_writer) {
          fail_writer->write(nlohmann::json{{"index", i},
                                            {"image_id", expr.image_id},
                                            {"error", std::string(errc_name(e.code()))},
                                            {"message", e.what()}});
        }
        continue;
      }
    }
    if (raw_writer && !cached) {
      raw_writer->write(nlohmann::json{
          {"index", i}, {"image_id", expr.image_id}, {"prompt", prompt}, {"raw_text", raw}});
    }

    std::optional<BBox> box;
    try {
      ParsedAnswer ans = parse_cot_answer(raw);
      ConsistencyReport rep = validate(ans, spec, inf, inf, opts.dup_iou);
      auto dets = to_detections(ans, rep, opts.policy);
      if (!dets.empty()) box = dets.front().box;
    } catch (const Error& e) {
      if (e.code() != Errc::no_parsable_content) throw;
    }
    retained[i] = box;
    evaluated.push_back(expr);
    evaluated_retained.push_back(box);
    if (det_writer) {
      nlohmann::json rec{{"index", i}, {"image_id", expr.image_id}};
      if (box) rec["bbox"] = {box->x1(), box->y1(), box->x2(), box->y2()};
      else rec["bbox"] = nullptr;
      det_writer->write(rec);
    }
  }

  EvalReport rep;
  rep.setting = setting_name(opts.setting);
  rep.rec_only = true;
  rep.rec_accuracy = rec_accuracy(evaluated_retained, evaluated);
  rep.images_evaluated = evaluated.size();
  rep.images_failed = failed;

  if (persist) {
    JsonlWriter report_writer(opts.out_dir / "report.json", JsonlWriter::Mode::truncate);
    report_writer.write(eval_report_to_json(rep));
    std::ofstream txt(opts.out_dir / "report.txt", std::ios::trunc);
    txt << render_report_table(rep);
  }
  if (!expressions.empty() && failed * 2 > expressions.size()) {
    raise(Errc::eval_aborted, std::to_string(failed) + " of " +
                                  std::to_string(expressions.size()) +
                                  " expressions failed; aborting");
  }
  return rep;
}

}  // namespace cot4det
