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
#include "cot4det/harness.hpp"

#include <cstdlib>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cot4det/cot_parser.hpp"
#include "cot4det/prompt_builder.hpp"
#include "support/testutil.hpp"

namespace cot4det {
namespace {

namespace tu = testutil;

FaultProfile clean_profile(std::uint64_t seed = 7) {
  FaultProfile p;
  p.seed = seed;
  return p;
}

FaultProfile noisy_profile(std::uint64_t seed) {
  FaultProfile p;
  p.duplication_rate = 0.3;
  p.max_duplicates = 2;
  p.hallucination_rate = 0.4;
  p.small_miss_rate = 0.5;
  p.jitter = 2.0;
  p.seed = seed;
  return p;
}

TEST(MockGenerate, AccountingIdentityAndParseCount) {
  tu::SyntheticCorpus c = tu::make_synthetic_corpus(40, 11);
  for (const auto& ann : c.images) {
    PromptSpec spec = make_full_spec(ann, c.vocab);
    for (bool cot : {true, false}) {
      MockResult r = mock_generate(ann, spec, c.vocab, noisy_profile(5), cot);
      const auto& a = r.accounting;
      EXPECT_EQ(a.emitted, a.gt_boxes - a.drops + a.duplicates + a.hallucinations);
      ParsedAnswer ans = parse_cot_answer(r.text.empty() ? "[]" : r.text);
      EXPECT_EQ(ans.boxes.size(), a.emitted) << "image " << ann.image_id << " cot " << cot;
    }
  }
}

TEST(MockGenerate, ByteDeterministicPerImageSeed) {
  tu::SyntheticCorpus c = tu::make_synthetic_corpus(4, 3);
  PromptSpec spec0 = make_full_spec(c.images[0], c.vocab);
  MockResult first = mock_generate(c.images[0], spec0, c.vocab, noisy_profile(9), true);
  MockResult again = mock_generate(c.images[0], spec0, c.vocab, noisy_profile(9), true);
  EXPECT_EQ(first.text, again.text);

  MockResult reseeded = mock_generate(c.images[0], spec0, c.vocab, noisy_profile(10), true);
  EXPECT_NE(first.text, reseeded.text);
}

TEST(MockGenerate, FaultFreeEqualsCanonicalAnswer) {
  tu::SyntheticCorpus c = tu::make_synthetic_corpus(10, 21);
  for (const auto& ann : c.images) {
    PromptSpec spec = make_gt_spec(ann, c.vocab);
    MockResult r = mock_generate(ann, spec, c.vocab, clean_profile(), true);
    EXPECT_EQ(r.text, render_cot_answer(ann, spec, c.vocab));
    EXPECT_EQ(r.accounting.drops, 0u);
    EXPECT_EQ(r.accounting.duplicates, 0u);
    EXPECT_EQ(r.accounting.hallucinations, 0u);
  }
}

TEST(MockGenerate, NoCotEmitsBareGroundingArray) {
  tu::SyntheticCorpus c = tu::make_synthetic_corpus(1, 2);
  PromptSpec spec = make_gt_spec(c.images[0], c.vocab);
  MockResult r = mock_generate(c.images[0], spec, c.vocab, clean_profile(), false);
  EXPECT_EQ(r.text.front(), '[');
  EXPECT_EQ(r.text.find("Category Classification"), std::string::npos);
  EXPECT_EQ(r.text.find("Grounding Boxes"), std::string::npos);
}

TEST(MockGenerate, CorruptCountsBreakCountAgreement) {
  tu::SyntheticCorpus c = tu::make_synthetic_corpus(1, 14);
  const ImageAnnotation& ann = c.images[0];
  PromptSpec spec = make_gt_spec(ann, c.vocab);

  FaultProfile clean = clean_profile(0);
  FaultProfile corrupt = clean;
  corrupt.corrupt_counts = true;
  bool found = false;
  for (std::uint64_t seed = 0; seed < 64 && !found; ++seed) {
    clean.seed = corrupt.seed = seed;
    MockResult c0 = mock_generate(ann, spec, c.vocab, clean, true);
    MockResult c1 = mock_generate(ann, spec, c.vocab, corrupt, true);
    if (c0.text == c1.text) continue;
    found = true;
    ParsedAnswer ans = parse_cot_answer(c1.text);
    ConsistencyReport rep = validate(ans, spec, ann.width, ann.height, 0.9);
    EXPECT_FALSE(rep.counts_boxes_agree);
    EXPECT_TRUE(rep.classification_counts_agree);
  }
  EXPECT_TRUE(found);
}

TEST(MockGenerate, SmallBoxesDropFourTimesAsOften) {
  CategoryVocab vocab;
  vocab.add(1, "cat");
  FaultProfile p = clean_profile();
  p.small_miss_rate = 0.8;
  std::size_t small_drops = 0, large_drops = 0;
  for (std::int64_t id = 1; id <= 300; ++id) {
    ImageAnnotation small;
    small.image_id = id;
    small.width = small.height = 640;
    small.instances.push_back({1, *BBox::make(0, 0, 10, 10)});
    ImageAnnotation large = small;
    large.instances[0].box = *BBox::make(0, 0, 100, 100);
    PromptSpec spec = make_gt_spec(small, vocab);
    p.seed = 77;
    small_drops += mock_generate(small, spec, vocab, p, true).accounting.drops;
    large_drops += mock_generate(large, spec, vocab, p, true).accounting.drops;
  }
  // Expected drop counts: 240 small vs 60 large.
  EXPECT_GT(small_drops, 200u);
  EXPECT_LT(large_drops, 100u);
}

TEST(MockGenerate, RejectsInvalidProfiles) {
  FaultProfile p;
  p.duplication_rate = 1.5;
  EXPECT_THROW(validate_profile(p), Error);
  p = FaultProfile{};
  p.jitter = -1;
  EXPECT_THROW(validate_profile(p), Error);
  p = FaultProfile{};
  p.max_duplicates = 0;
  EXPECT_THROW(validate_profile(p), Error);
}

CocoData load_stub() { return load_coco(tu::data_dir() / "stub_corpus.json"); }

BackendFn mock_backend(const CategoryVocab& vocab, const FaultProfile& profile, bool cot) {
  return [&vocab, profile, cot](const ImageAnnotation& ann, const PromptSpec& spec,
                                const std::string&) {
    return mock_generate(ann, spec, vocab, profile, cot).text;
  };
}

std::size_t line_count(const std::filesystem::path& p) {
  std::size_t n = 0;
  for_each_jsonl(p, [&](std::size_t, const nlohmann::json&) { ++n; });
  return n;
}

TEST(RunEval, FaultFreeBackendScoresPerfectly) {
  CocoData data = load_stub();
  tu::TempDir tmp;
  EvalOptions opts;
  opts.out_dir = tmp.path();
  EvalReport rep =
      run_eval(data.images, data.vocab, mock_backend(data.vocab, clean_profile(), true), opts);
  EXPECT_DOUBLE_EQ(rep.precision50, 1.0);
  EXPECT_DOUBLE_EQ(rep.recall50, 1.0);
  EXPECT_DOUBLE_EQ(rep.map, 1.0);
  EXPECT_EQ(rep.tp, 5u);
  EXPECT_EQ(rep.fp, 0u);
  EXPECT_EQ(rep.fn, 0u);
  EXPECT_EQ(rep.images_evaluated, 3u);
  EXPECT_EQ(rep.images_failed, 0u);

  EXPECT_EQ(line_count(tmp.file("raw_responses.jsonl")), 3u);
  EXPECT_EQ(line_count(tmp.file("detections.jsonl")), 3u);
  EXPECT_EQ(line_count(tmp.file("failures.jsonl")), 0u);
  EXPECT_EQ(line_count(tmp.file("report.json")), 1u);
  EXPECT_NE(tu::read_file(tmp.file("report.txt")).find("100.0"), std::string::npos);
}

TEST(RunEval, ReusesPersistedResponsesOnRerun) {
  CocoData data = load_stub();
  tu::TempDir tmp;
  EvalOptions opts;
  opts.out_dir = tmp.path();

  int first_calls = 0;
  BackendFn counting = [&](const ImageAnnotation& ann, const PromptSpec& spec,
                           const std::string&) {
    ++first_calls;
    return mock_generate(ann, spec, data.vocab, clean_profile(), true).text;
  };
  run_eval(data.images, data.vocab, counting, opts);
  EXPECT_EQ(first_calls, 3);
  const std::string report_bytes = tu::read_file(tmp.file("report.json"));

  int second_calls = 0;
  BackendFn throwing = [&](const ImageAnnotation&, const PromptSpec&,
                           const std::string&) -> std::string {
    ++second_calls;
    raise(Errc::transport_error, "backend must not be reached");
  };
  EvalReport rep = run_eval(data.images, data.vocab, throwing, opts);
  EXPECT_EQ(second_calls, 0);
  EXPECT_EQ(rep.images_failed, 0u);
  EXPECT_DOUBLE_EQ(rep.map, 1.0);
  EXPECT_EQ(tu::read_file(tmp.file("report.json")), report_bytes);
  EXPECT_EQ(line_count(tmp.file("raw_responses.jsonl")), 3u);
}

TEST(RunEval, ParallelAndSerialRunsMatchByteForByte) {
  tu::SyntheticCorpus c = tu::make_synthetic_corpus(24, 31);
  tu::TempDir serial_dir;
  tu::TempDir parallel_dir;
  EvalOptions serial;
  serial.out_dir = serial_dir.path();
  serial.jobs = 1;
  EvalOptions parallel = serial;
  parallel.out_dir = parallel_dir.path();
  parallel.jobs = 4;

  BackendFn backend = mock_backend(c.vocab, noisy_profile(13), true);
  EvalReport a = run_eval(c.images, c.vocab, backend, serial);
  EvalReport b = run_eval(c.images, c.vocab, backend, parallel);
  EXPECT_DOUBLE_EQ(a.map, b.map);
  for (const char* name : {"raw_responses.jsonl", "detections.jsonl", "report.json"}) {
    EXPECT_EQ(tu::read_file(serial_dir.file(name)), tu::read_file(parallel_dir.file(name)))
        << name;
  }
}

TEST(RunEval, AbortsAfterWritingArtifactsWhenMostImagesFail) {
  CocoData data = load_stub();
  tu::TempDir tmp;
  EvalOptions opts;
  opts.out_dir = tmp.path();
  BackendFn flaky = [&](const ImageAnnotation& ann, const PromptSpec& spec,
                        const std::string&) -> std::string {
    if (ann.image_id >= 2) raise(Errc::transport_error, "backend down");
    return mock_generate(ann, spec, data.vocab, clean_profile(), true).text;
  };
  try {
    run_eval(data.images, data.vocab, flaky, opts);
    FAIL() << "expected an abort";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::eval_aborted);
  }
  EXPECT_EQ(line_count(tmp.file("failures.jsonl")), 2u);
  EXPECT_EQ(line_count(tmp.file("report.json")), 1u);
}

TEST(RunEval, ProseResponsesCountAsZeroDetectionsNotFailures) {
  CocoData data = load_stub();
  tu::TempDir tmp;
  EvalOptions opts;
  opts.out_dir = tmp.path();
  BackendFn prose = [](const ImageAnnotation&, const PromptSpec&, const std::string&) {
    return std::string("I cannot find anything in this picture.");
  };
  EvalReport rep = run_eval(data.images, data.vocab, prose, opts);
  EXPECT_EQ(rep.images_failed, 0u);
  EXPECT_EQ(rep.images_evaluated, 3u);
  EXPECT_TRUE(rep.degenerate_no_predictions);
  EXPECT_DOUBLE_EQ(rep.recall50, 0.0);
  EXPECT_EQ(rep.fn, 5u);
  EXPECT_EQ(line_count(tmp.file("detections.jsonl")), 3u);
  EXPECT_EQ(line_count(tmp.file("failures.jsonl")), 0u);
}

TEST(RunEval, GroundTruthSettingSkipsEmptyImages) {
  CocoData data = load_stub();
  ImageAnnotation empty;
  empty.image_id = 99;
  empty.width = 640;
  empty.height = 480;
  data.images.push_back(empty);

  EvalOptions gt_opts;
  gt_opts.setting = Setting::ground_truth_categories;
  BackendFn backend = mock_backend(data.vocab, clean_profile(), true);
  EvalReport gt_rep = run_eval(data.images, data.vocab, backend, gt_opts);
  EXPECT_EQ(gt_rep.images_skipped, 1u);
  EXPECT_EQ(gt_rep.images_evaluated, 3u);

  EvalOptions full_opts;
  full_opts.setting = Setting::full_category;
  EvalReport full_rep = run_eval(data.images, data.vocab, backend, full_opts);
  EXPECT_EQ(full_rep.images_skipped, 0u);
  EXPECT_EQ(full_rep.images_evaluated, 4u);
}

TEST(RunEval, FullSettingLogsPromptListLength) {
  CocoData data = load_stub();
  std::vector<std::string> lines;
  EvalOptions opts;
  opts.setting = Setting::full_category;
  opts.log = [&](const std::string& line) { lines.push_back(line); };
  run_eval(data.images, data.vocab, mock_backend(data.vocab, clean_profile(), true), opts);
  bool seen = false;
  for (const auto& line : lines) {
    if (line.find("prompt category list length 2 per image") != std::string::npos) seen = true;
  }
  EXPECT_TRUE(seen);
}

InferenceRequest request() {
  InferenceRequest req;
  req.image_ref = "http://images/0001.jpg";
  req.prompt = "<image>\n Locate every cat in the image.";
  return req;
}

TEST(ChatClientTest, SendsChatCompletionShapeWithBearerAuth) {
  tu::StubServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(tu::chat_body("ok"), "application/json");
  });
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  cfg.api_key = "sk-test";
  ChatClient client(cfg);
  EXPECT_EQ(client.complete(request()), "ok");

  auto bodies = server.bodies();
  ASSERT_EQ(bodies.size(), 1u);
  nlohmann::json body = nlohmann::json::parse(bodies[0]);
  EXPECT_EQ(body["model"], "cot4det");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 8192);
  ASSERT_EQ(body["messages"].size(), 1u);
  EXPECT_EQ(body["messages"][0]["role"], "user");
  const auto& content = body["messages"][0]["content"];
  ASSERT_EQ(content.size(), 2u);
  EXPECT_EQ(content[0]["type"], "image_url");
  EXPECT_EQ(content[0]["image_url"]["url"], "http://images/0001.jpg");
  EXPECT_EQ(content[1]["type"], "text");
  EXPECT_EQ(content[1]["text"], request().prompt);
  EXPECT_EQ(server.auth_headers().at(0), "Bearer sk-test");
}

TEST(ChatClientTest, RetriesRateLimitsThenSucceeds) {
  std::atomic<int> seen{0};
  tu::StubServer server([&](const httplib::Request&, httplib::Response& res) {
    if (seen.fetch_add(1) < 2) {
      res.status = 429;
    } else {
      res.set_content(tu::chat_body("done"), "application/json");
    }
  });
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  cfg.api_key = "k";
  cfg.retries = 3;
  cfg.backoff_ms = 1;
  std::vector<std::string> log;
  cfg.logger = [&](const std::string& line) { log.push_back(line); };
  ChatClient client(cfg);
  EXPECT_EQ(client.complete(request()), "done");
  EXPECT_EQ(server.hits(), 3);
  ASSERT_GE(log.size(), 2u);
  EXPECT_NE(log[0].find("retry 1 after"), std::string::npos);
  EXPECT_NE(log[0].find("backing off"), std::string::npos);
}

TEST(ChatClientTest, AuthFailuresAreNotRetried) {
  tu::StubServer server([](const httplib::Request&, httplib::Response& res) {
    res.status = 401;
  });
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  cfg.api_key = "bad";
  cfg.retries = 3;
  cfg.backoff_ms = 1;
  ChatClient client(cfg);
  try {
    client.complete(request());
    FAIL() << "expected auth error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::auth_error);
  }
  EXPECT_EQ(server.hits(), 1);
}

TEST(ChatClientTest, ServerErrorsExhaustRetries) {
  tu::StubServer server([](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
  });
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  cfg.api_key = "k";
  cfg.retries = 1;
  cfg.backoff_ms = 1;
  ChatClient client(cfg);
  try {
    client.complete(request());
    FAIL() << "expected transport error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::transport_error);
  }
  EXPECT_EQ(server.hits(), 2);
}

TEST(ChatClientTest, MalformedResponsesRaiseShapeError) {
  tu::StubServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"choices\": []}", "application/json");
  });
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  cfg.api_key = "k";
  ChatClient client(cfg);
  try {
    client.complete(request());
    FAIL() << "expected shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::response_shape_error);
  }
}

TEST(ChatClientTest, EmptyPromptIsRejectedBeforeAnyRequest) {
  tu::StubServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(tu::chat_body("never"), "application/json");
  });
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  cfg.api_key = "k";
  ChatClient client(cfg);
  InferenceRequest req = request();
  req.prompt.clear();
  EXPECT_THROW(client.complete(req), Error);
  EXPECT_EQ(server.hits(), 0);
}

TEST(ChatClientTest, ApiKeyFallsBackToEnvironment) {
  tu::StubServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(tu::chat_body("ok"), "application/json");
  });
  ::setenv("COT4DET_API_KEY", "env-key", 1);
  ChatClientConfig cfg;
  cfg.endpoint = server.url();
  ChatClient client(cfg);
  EXPECT_EQ(client.complete(request()), "ok");
  ::unsetenv("COT4DET_API_KEY");
  EXPECT_EQ(server.auth_headers().at(0), "Bearer env-key");
}

TEST(SplitUrlTest, SeparatesBaseAndPath) {
  auto s = detail::split_url("http://host:8080/v1/custom");
  EXPECT_EQ(s.base, "http://host:8080");
  EXPECT_EQ(s.path, "/v1/custom");
  auto bare = detail::split_url("https://host");
  EXPECT_EQ(bare.base, "https://host");
  EXPECT_EQ(bare.path, "");
  EXPECT_THROW(detail::split_url("host/no/scheme"), Error);
}

TEST(SplitUrlTest, ClientDefaultsPathWhenAbsent) {
  ChatClientConfig cfg;
  cfg.endpoint = "http://host:9999";
  cfg.api_key = "k";
  ChatClient client(cfg);
  EXPECT_EQ(client.path(), "/v1/chat/completions");
}

RefExpression expr(std::int64_t id, const std::string& text, BBox target) {
  RefExpression e;
  e.image_id = id;
  e.expression = text;
  e.target = target;
  e.granularity = Granularity::phrase;
  return e;
}

std::string grounding_only(const std::string& label, BBox box) {
  return render_grounding_array({LabeledBox{label, box}});
}

TEST(RunRecEval, ScoresIndexKeyedExpressions) {
  std::vector<RefExpression> exprs = {
      expr(1, "the red apple", *BBox::make(10, 10, 50, 50)),
      expr(2, "leftmost zebra", *BBox::make(0, 0, 2, 2)),
      expr(3, "a blue chair", *BBox::make(5, 5, 25, 25)),
      expr(4, "the tallest tree", *BBox::make(0, 0, 40, 40))};
  tu::TempDir tmp;
  EvalOptions opts;
  opts.out_dir = tmp.path();
  RecBackendFn backend = [&](std::size_t index, const RefExpression& e,
                             const std::string& prompt) -> std::string {
    EXPECT_NE(prompt.find(e.expression), std::string::npos);
    switch (index) {
      case 0: return grounding_only(e.expression, e.target);
      // IoU with the target is exactly 0.5: not strictly above, incorrect.
      case 1: return grounding_only(e.expression, *BBox::make(0, 0, 2, 1));
      case 2: raise(Errc::transport_error, "backend down");
      default: return "no idea where that is";
    }
  };
  EvalReport rep = run_rec_eval(exprs, backend, opts);
  EXPECT_TRUE(rep.rec_only);
  ASSERT_TRUE(rep.rec_accuracy.has_value());
  EXPECT_DOUBLE_EQ(*rep.rec_accuracy, 1.0 / 3.0);
  EXPECT_EQ(rep.images_evaluated, 3u);
  EXPECT_EQ(rep.images_failed, 1u);
  EXPECT_EQ(line_count(tmp.file("detections.jsonl")), 3u);
  EXPECT_EQ(line_count(tmp.file("failures.jsonl")), 1u);
}

TEST(RunRecEval, ReusesPersistedResponsesOnRerun) {
  std::vector<RefExpression> exprs = {expr(1, "the red apple", *BBox::make(10, 10, 50, 50)),
                                      expr(2, "leftmost zebra", *BBox::make(0, 0, 30, 40))};
  tu::TempDir tmp;
  EvalOptions opts;
  opts.out_dir = tmp.path();
  RecBackendFn backend = [&](std::size_t, const RefExpression& e, const std::string&) {
    return grounding_only(e.expression, e.target);
  };
  EvalReport first = run_rec_eval(exprs, backend, opts);
  EXPECT_DOUBLE_EQ(*first.rec_accuracy, 1.0);

  int calls = 0;
  RecBackendFn throwing = [&](std::size_t, const RefExpression&,
                              const std::string&) -> std::string {
    ++calls;
    raise(Errc::transport_error, "backend must not be reached");
  };
  EvalReport second = run_rec_eval(exprs, throwing, opts);
  EXPECT_EQ(calls, 0);
  EXPECT_DOUBLE_EQ(*second.rec_accuracy, 1.0);
  EXPECT_EQ(second.images_failed, 0u);
}

TEST(RunRecEval, AbortsWhenMostExpressionsFail) {
  std::vector<RefExpression> exprs = {expr(1, "a", *BBox::make(0, 0, 1, 1)),
                                      expr(2, "b", *BBox::make(0, 0, 1, 1))};
  EvalOptions opts;
  RecBackendFn backend = [](std::size_t, const RefExpression&,
                            const std::string&) -> std::string {
    raise(Errc::transport_error, "down");
  };
  try {
    run_rec_eval(exprs, backend, opts);
    FAIL() << "expected an abort";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::eval_aborted);
  }
}

}  // namespace
}  // namespace cot4det
