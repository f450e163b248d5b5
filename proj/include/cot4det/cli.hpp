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

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cot4det/harness.hpp"

namespace cot4det {

// Exit codes: 0 success, 1 evaluation-level failure (abort threshold), 2
// usage or input error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitEvalFailure = 1;
inline constexpr int kExitUsage = 2;

struct CliState {
  // inputs
  std::string coco;
  std::string refexp;
  std::string lvis_bands;
  std::string pred;
  std::string weights;
  std::vector<std::string> corpus;  // tag=path
  std::string report_in;
  // backend
  std::string endpoint;
  std::string model = "cot4det";
  std::string image_root;
  bool mock = false;
  int retries = 3;
  int backoff_ms = 250;
  int timeout_sec = 120;
  // shared
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out;
  std::string setting = "gt";
  // Simulate defaults to the full-category setting; a separate field keeps
  // its default from leaking into the other subcommands, which all bind the
  // shared `setting` above.
  std::string simulate_setting = "full";
  std::string policy = "repair";
  std::string granularity = "word";
  double dup_iou = 0.9;
  // prompt construction
  std::string convert_setting = "sampled";
  double neg_ratio = 1.0;
  std::size_t max_categories = 4096;
  std::string tag = "coco";
  // mixing
  std::size_t total = 0;
  // fault profile
  double dup_rate = 0;
  int max_dup = 1;
  double halluc_rate = 0;
  double miss_rate = 0;
  double jitter = 0;
  bool no_cot = false;
  bool corrupt_counts = false;
};

// Declares every subcommand and flag; kept separate from dispatch so tests
// can reflect over the registered options.
inline void configure_cli(CLI::App& app, CliState& s) {
  app.require_subcommand(0, 1);

  auto* convert = app.add_subcommand(
      "convert", "Convert detection or referring-expression annotations into prompt records");
  convert->add_option("--coco", s.coco, "COCO-style annotation JSON");
  convert->add_option("--refexp", s.refexp, "normalized referring-expression JSONL");
  convert->add_option("--granularity", s.granularity, "prompt granularity: word|phrase|sentence")
      ->default_val("word");
  convert->add_option("--setting", s.convert_setting,
                      "category list construction: sampled|gt|full")
      ->default_val("sampled");
  convert->add_option("--neg-ratio", s.neg_ratio, "negative categories per positive")
      ->default_val(1.0);
  convert->add_option("--max-categories", s.max_categories, "cap on prompt category list")
      ->default_val(4096);
  convert->add_option("--tag", s.tag, "provenance tag stored in each record")
      ->default_val("coco");
  convert->add_option("--seed", s.seed, "base seed; per-record seed mixes in the image id")
      ->default_val(0);
  convert->add_option("--out", s.out, "output JSONL path")->required();

  auto* mix = app.add_subcommand("mix", "Interleave corpora into one weighted training mixture");
  mix->add_option("--weights", s.weights, "JSON object of corpus tag to sample weight")
      ->required();
  mix->add_option("--corpus", s.corpus, "corpus as tag=path.jsonl (repeatable)")->required();
  mix->add_option("--total", s.total, "number of records to draw")->required();
  mix->add_option("--seed", s.seed, "mixture seed")->default_val(0);
  mix->add_option("--out", s.out, "output JSONL path")->required();

  auto* prompts = app.add_subcommand("prompts", "Emit evaluation prompts for a corpus");
  prompts->add_option("--coco", s.coco, "COCO-style annotation JSON")->required();
  prompts->add_option("--setting", s.setting, "category list: gt|full|sampled")
      ->default_val("gt");
  prompts->add_option("--neg-ratio", s.neg_ratio, "negatives per positive (sampled setting)")
      ->default_val(1.0);
  prompts->add_option("--max-categories", s.max_categories, "cap on prompt category list")
      ->default_val(4096);
  prompts->add_option("--seed", s.seed, "sampling seed")->default_val(0);
  prompts->add_option("--out", s.out, "output JSONL path")->required();

  auto* eval = app.add_subcommand("eval", "Run the evaluation protocol and write report files");
  eval->add_option("--coco", s.coco, "COCO-style annotation JSON");
  eval->add_option("--refexp", s.refexp, "normalized referring-expression JSONL");
  eval->add_option("--lvis-bands", s.lvis_bands, "LVIS category metadata for AP-R/C/F bands");
  eval->add_option("--pred", s.pred, "predictions JSONL (raw model text per image or index)");
  eval->add_option("--endpoint", s.endpoint, "chat-completions endpoint URL")
      ->envname("COT4DET_ENDPOINT");
  eval->add_option("--model", s.model, "model name sent to the endpoint")
      ->default_val("cot4det");
  eval->add_option("--image-root", s.image_root, "prefix for image references");
  eval->add_flag("--mock", s.mock, "use the deterministic fault-injection backend");
  eval->add_option("--retries", s.retries, "endpoint retry attempts")->default_val(3);
  eval->add_option("--backoff-ms", s.backoff_ms, "base backoff in milliseconds")
      ->default_val(250);
  eval->add_option("--timeout-sec", s.timeout_sec, "endpoint read timeout in seconds")
      ->default_val(120);
  eval->add_option("--setting", s.setting, "evaluation setting: gt|full")->default_val("gt");
  eval->add_option("--policy", s.policy, "conversion policy: lenient|strict|repair")
      ->default_val("repair");
  eval->add_option("--dup-iou", s.dup_iou, "same-label duplicate threshold")->default_val(0.9);
  eval->add_option("--jobs", s.jobs, "parallel backend requests")->default_val(1);
  eval->add_option("--seed", s.seed, "seed for the mock backend")->default_val(0);
  eval->add_option("--dup-rate", s.dup_rate, "mock duplication rate")->default_val(0.0);
  eval->add_option("--max-dup", s.max_dup, "mock max extra copies per duplicated box")
      ->default_val(1);
  eval->add_option("--halluc-rate", s.halluc_rate, "mock hallucination rate per negative")
      ->default_val(0.0);
  eval->add_option("--miss-rate", s.miss_rate, "mock small-object drop rate")->default_val(0.0);
  eval->add_option("--jitter", s.jitter, "mock coordinate jitter in pixels")->default_val(0.0);
  eval->add_flag("--no-cot", s.no_cot, "mock emits a bare grounding list without stages");
  eval->add_flag("--corrupt-counts", s.corrupt_counts, "mock perturbs declared counts by one");
  eval->add_option("--out", s.out, "output directory for report artifacts")->required();

  auto* simulate = app.add_subcommand(
      "simulate", "Run the 2x2 ablation grid (stages on/off x lenient/repair) on one corpus");
  simulate->add_option("--coco", s.coco, "COCO-style annotation JSON")->required();
  simulate->add_option("--setting", s.simulate_setting, "evaluation setting: gt|full")
      ->default_val("full");
  simulate->add_option("--dup-iou", s.dup_iou, "same-label duplicate threshold")
      ->default_val(0.9);
  simulate->add_option("--seed", s.seed, "fault profile seed")->default_val(0);
  simulate->add_option("--jobs", s.jobs, "parallel mock evaluations")->default_val(1);
  simulate->add_option("--dup-rate", s.dup_rate, "duplication rate")->default_val(0.0);
  simulate->add_option("--max-dup", s.max_dup, "max extra copies per duplicated box")
      ->default_val(1);
  simulate->add_option("--halluc-rate", s.halluc_rate, "hallucination rate per negative")
      ->default_val(0.0);
  simulate->add_option("--miss-rate", s.miss_rate, "small-object drop rate")->default_val(0.0);
  simulate->add_option("--jitter", s.jitter, "coordinate jitter in pixels")->default_val(0.0);
  simulate->add_option("--out", s.out, "output directory for per-cell artifacts");

  auto* report = app.add_subcommand("report", "Re-render a structured report as a table");
  report->add_option("--in", s.report_in, "report.json file or directory holding one")
      ->required();
}

namespace detail {

inline Setting parse_setting_or_die(const std::string& s, bool allow_sampled) {
  auto parsed = parse_setting(s);
  if (!parsed || (!allow_sampled && *parsed == Setting::sampled)) {
    raise(Errc::missing_field, "unrecognized setting '" + s + "'");
  }
  return *parsed;
}

inline Policy parse_policy_or_die(const std::string& s) {
  auto parsed = parse_policy(s);
  if (!parsed) raise(Errc::missing_field, "unrecognized policy '" + s + "'");
  return *parsed;
}

inline FaultProfile profile_from_state(const CliState& s) {
  FaultProfile p;
  p.duplication_rate = s.dup_rate;
  p.max_duplicates = s.max_dup;
  p.hallucination_rate = s.halluc_rate;
  p.small_miss_rate = s.miss_rate;
  p.jitter = s.jitter;
  p.corrupt_counts = s.corrupt_counts;
  p.seed = s.seed;
  validate_profile(p);
  return p;
}

inline PromptSpec spec_for_setting(const ImageAnnotation& ann, const CategoryVocab& vocab,
                                   Setting setting, double neg_ratio, std::size_t max_categories,
                                   std::uint64_t record_seed) {
  switch (setting) {
    case Setting::ground_truth_categories: {
      PromptSpec spec = make_gt_spec(ann, vocab);
      spec.seed = record_seed;
      return spec;
    }
    case Setting::full_category: {
      PromptSpec spec = make_full_spec(ann, vocab);
      spec.seed = record_seed;
      return spec;
    }
    case Setting::sampled:
      return sample_categories(ann, vocab, neg_ratio, max_categories, record_seed);
  }
  raise(Errc::missing_field, "unreachable setting");
}

inline std::vector<std::size_t> ascending_by_image_id(const std::vector<ImageAnnotation>& anns) {
  std::vector<std::size_t> order(anns.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return anns[a].image_id < anns[b].image_id; });
  return order;
}

inline int cmd_convert(const CliState& s, std::ostream& out) {
  if (s.coco.empty() == s.refexp.empty()) {
    raise(Errc::missing_field, "convert needs exactly one of --coco or --refexp");
  }
  auto granularity = parse_granularity(s.granularity);
  if (!granularity) raise(Errc::unknown_granularity, "granularity '" + s.granularity + "'");

  JsonlWriter writer(s.out, JsonlWriter::Mode::truncate);
  std::size_t written = 0;

  if (!s.coco.empty()) {
    CocoData data = load_coco(s.coco, s.tag);
    Setting setting = parse_setting_or_die(s.convert_setting, true);
    std::size_t skipped = 0;
    for (std::size_t i : ascending_by_image_id(data.images)) {
      const ImageAnnotation& ann = data.images[i];
      const std::uint64_t record_seed = mix_seed(s.seed, static_cast<std::uint64_t>(ann.image_id));
      PromptSpec spec;
      try {
        spec = spec_for_setting(ann, data.vocab, setting, s.neg_ratio, s.max_categories,
                                record_seed);
      } catch (const Error& e) {
        if (e.code() == Errc::empty_image) {
          ++skipped;
          continue;
        }
        throw;
      }
      spec.granularity = *granularity;
      writer.write(prompt_record_to_json(make_prompt_record(ann, std::move(spec), data.vocab)));
      ++written;
    }
    out << "wrote " << written << " records to " << s.out << "\n";
    out << "granularity " << granularity_name(*granularity) << ": " << written << "\n";
    if (skipped > 0) out << "skipped " << skipped << " images with empty category lists\n";
    if (data.dropped_zero_area > 0) {
      out << "dropped " << data.dropped_zero_area << " zero-area annotations\n";
    }
    return kExitOk;
  }

  if (*granularity == Granularity::word) {
    raise(Errc::unknown_granularity, "referring expressions are phrase or sentence level");
  }
  auto expressions = load_refexp(s.refexp);
  const std::string tag = s.tag == "coco" ? "refexp" : s.tag;
  for (const auto& expr : expressions) {
    if (expr.granularity != *granularity) continue;
    writer.write(prompt_record_to_json(make_prompt_record(expr, tag)));
    ++written;
  }
  out << "wrote " << written << " records to " << s.out << "\n";
  out << "granularity " << granularity_name(*granularity) << ": " << written << "\n";
  return kExitOk;
}

inline int cmd_mix(const CliState& s, std::ostream& out) {
  nlohmann::json weights_doc = load_json_file(s.weights);
  if (!weights_doc.is_object()) {
    raise(Errc::weight_sum_mismatch, "weight spec must be a JSON object of tag to weight");
  }
  MixtureSpec spec;
  for (const auto& [tag, w] : weights_doc.items()) {
    spec.weights.emplace_back(tag, w.get<double>());
  }

  std::map<std::string, std::vector<nlohmann::json>> records;
  std::vector<std::pair<std::string, std::size_t>> corpora;
  for (const auto& entry : s.corpus) {
    auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == entry.size()) {
      raise(Errc::unknown_tag, "--corpus expects tag=path, got '" + entry + "'");
    }
    const std::string tag = entry.substr(0, eq);
    const std::string path = entry.substr(eq + 1);
    if (records.count(tag)) raise(Errc::unknown_tag, "duplicate corpus tag '" + tag + "'");
    auto& recs = records[tag];
    for_each_jsonl(path, [&](std::size_t, const nlohmann::json& rec) { recs.push_back(rec); });
    corpora.emplace_back(tag, recs.size());
  }

  auto draws = build_mixture(corpora, spec, s.total, s.seed);
  JsonlWriter writer(s.out, JsonlWriter::Mode::truncate);
  std::map<std::string, std::size_t> drawn;
  for (const auto& d : draws) {
    nlohmann::json rec = records[d.tag][d.index];
    rec["corpus"] = d.tag;
    writer.write(rec);
    ++drawn[d.tag];
  }
  out << "wrote " << draws.size() << " records to " << s.out << "\n";
  for (const auto& [tag, n] : drawn) out << tag << ": " << n << "\n";
  return kExitOk;
}

inline int cmd_prompts(const CliState& s, std::ostream& out) {
  CocoData data = load_coco(s.coco);
  Setting setting = parse_setting_or_die(s.setting, true);
  JsonlWriter writer(s.out, JsonlWriter::Mode::truncate);
  std::size_t written = 0, skipped = 0;
  for (std::size_t i : ascending_by_image_id(data.images)) {
    const ImageAnnotation& ann = data.images[i];
    const std::uint64_t record_seed = mix_seed(s.seed, static_cast<std::uint64_t>(ann.image_id));
    PromptSpec spec;
    try {
      spec = spec_for_setting(ann, data.vocab, setting, s.neg_ratio, s.max_categories,
                              record_seed);
    } catch (const Error& e) {
      if (e.code() == Errc::empty_image) {
        ++skipped;
        continue;
      }
      throw;
    }
    writer.write(nlohmann::json{{"image_id", ann.image_id},
                                {"setting", std::string(setting_name(spec.setting))},
                                {"prompt", render_prompt(spec)},
                                {"categories", spec.categories},
                                {"seed", spec.seed}});
    ++written;
  }
  out << "wrote " << written << " prompts to " << s.out << "\n";
  if (skipped > 0) out << "skipped " << skipped << " images with empty category lists\n";
  return kExitOk;
}

inline int cmd_eval(const CliState& s, std::ostream& out, std::ostream& err) {
  if (s.coco.empty() == s.refexp.empty()) {
    raise(Errc::missing_field, "eval needs exactly one of --coco or --refexp");
  }
  const int backends = (!s.pred.empty() ? 1 : 0) + (!s.endpoint.empty() ? 1 : 0) + (s.mock ? 1 : 0);
  if (backends != 1) {
    raise(Errc::missing_field, "eval needs exactly one of --pred, --endpoint, or --mock");
  }

  EvalOptions opts;
  opts.setting = parse_setting_or_die(s.setting, false);
  opts.policy = parse_policy_or_die(s.policy);
  opts.dup_iou = s.dup_iou;
  opts.jobs = s.jobs;
  opts.out_dir = s.out;
  opts.log = [&err](const std::string& line) { err << line << "\n"; };

  if (!s.refexp.empty()) {
    if (s.mock) raise(Errc::missing_field, "the mock backend needs a detection corpus");
    auto expressions = load_refexp(s.refexp);
    RecBackendFn backend;
    if (!s.pred.empty()) {
      auto preds = std::make_shared<std::unordered_map<std::size_t, std::string>>();
      for_each_jsonl(s.pred, [&](std::size_t, const nlohmann::json& rec) {
        (*preds)[rec.at("index").get<std::size_t>()] = rec.at("raw_text").get<std::string>();
      });
      backend = [preds](std::size_t index, const RefExpression&, const std::string&) {
        auto it = preds->find(index);
        return it == preds->end() ? std::string() : it->second;
      };
    } else {
      ChatClientConfig cfg;
      cfg.endpoint = s.endpoint;
      cfg.model = s.model;
      cfg.retries = s.retries;
      cfg.backoff_ms = s.backoff_ms;
      cfg.concurrency = static_cast<int>(std::max<std::size_t>(s.jobs, 1));
      cfg.timeout_sec = s.timeout_sec;
      cfg.logger = [&err](const std::string& line) { err << "[client] " << line << "\n"; };
      auto client = std::make_shared<ChatClient>(std::move(cfg));
      const std::string root = s.image_root;
      backend = [client, root](std::size_t, const RefExpression& expr, const std::string& prompt) {
        InferenceRequest req;
        req.image_ref = root + std::to_string(expr.image_id);
        req.prompt = prompt;
        return client->complete(req);
      };
    }
    EvalReport rep = run_rec_eval(expressions, backend, opts);
    out << render_report_table(rep);
    return kExitOk;
  }

  CocoData data = load_coco(s.coco);
  if (!s.lvis_bands.empty()) data.vocab = load_lvis_bands(s.lvis_bands, std::move(data.vocab));

  BackendFn backend;
  if (!s.pred.empty()) {
    auto preds = std::make_shared<std::unordered_map<std::int64_t, std::string>>();
    for_each_jsonl(s.pred, [&](std::size_t, const nlohmann::json& rec) {
      (*preds)[rec.at("image_id").get<std::int64_t>()] = rec.at("raw_text").get<std::string>();
    });
    backend = [preds](const ImageAnnotation& ann, const PromptSpec&, const std::string&) {
      auto it = preds->find(ann.image_id);
      return it == preds->end() ? std::string() : it->second;
    };
  } else if (s.mock) {
    FaultProfile profile = profile_from_state(s);
    const bool cot = !s.no_cot;
    const CategoryVocab& vocab = data.vocab;
    backend = [profile, cot, &vocab](const ImageAnnotation& ann, const PromptSpec& spec,
                                     const std::string&) {
      return mock_generate(ann, spec, vocab, profile, cot).text;
    };
  } else {
    ChatClientConfig cfg;
    cfg.endpoint = s.endpoint;
    cfg.model = s.model;
    cfg.retries = s.retries;
    cfg.backoff_ms = s.backoff_ms;
    cfg.concurrency = static_cast<int>(std::max<std::size_t>(s.jobs, 1));
    cfg.timeout_sec = s.timeout_sec;
    cfg.logger = [&err](const std::string& line) { err << "[client] " << line << "\n"; };
    auto client = std::make_shared<ChatClient>(std::move(cfg));
    const std::string root = s.image_root;
    backend = [client, root](const ImageAnnotation& ann, const PromptSpec&,
                             const std::string& prompt) {
      InferenceRequest req;
      req.image_ref = root + (ann.file_name.empty() ? std::to_string(ann.image_id)
                                                    : ann.file_name);
      req.prompt = prompt;
      return client->complete(req);
    };
  }

  EvalReport rep = run_eval(data.images, data.vocab, backend, opts);
  out << render_report_table(rep);
  return kExitOk;
}

inline int cmd_simulate(const CliState& s, std::ostream& out, std::ostream& err) {
  CocoData data = load_coco(s.coco);
  FaultProfile profile = profile_from_state(s);

  struct Cell {
    bool cot;
    Policy policy;
    const char* name;
  };
  const Cell cells[] = {
      {true, Policy::lenient, "cot_on_lenient"},
      {true, Policy::repair, "cot_on_repair"},
      {false, Policy::lenient, "cot_off_lenient"},
      {false, Policy::repair, "cot_off_repair"},
  };

  std::vector<EvalReport> reports;
  for (const Cell& cell : cells) {
    EvalOptions opts;
    opts.setting = parse_setting_or_die(s.simulate_setting, false);
    opts.policy = cell.policy;
    opts.dup_iou = s.dup_iou;
    opts.jobs = s.jobs;
    if (!s.out.empty()) opts.out_dir = std::filesystem::path(s.out) / cell.name;
    opts.log = [&err](const std::string& line) { err << line << "\n"; };
    const CategoryVocab& vocab = data.vocab;
    const bool cot = cell.cot;
    BackendFn backend = [&vocab, profile, cot](const ImageAnnotation& ann, const PromptSpec& spec,
                                               const std::string&) {
      return mock_generate(ann, spec, vocab, profile, cot).text;
    };
    reports.push_back(run_eval(data.images, data.vocab, backend, opts));
  }

  auto pct = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
    return std::string(buf);
  };
  bool any_small = false;
  for (const auto& r : reports) any_small = any_small || r.ap_small.has_value();
  std::string table = "  cot   policy    P@0.5   R@0.5     mAP";
  if (any_small) table += "  AP_small";
  table += "\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const Cell& cell = cells[i];
    const EvalReport& r = reports[i];
    char line[160];
    std::snprintf(line, sizeof(line), "%5s  %7s  %7s %7s %7s", cell.cot ? "on" : "off",
                  std::string(policy_name(cell.policy)).c_str(), pct(r.precision50).c_str(),
                  pct(r.recall50).c_str(), pct(r.map).c_str());
    table += line;
    if (any_small) {
      table += "  ";
      table += r.ap_small ? pct(*r.ap_small) : std::string("-");
    }
    table += "\n";
  }
  out << table;

  if (!s.out.empty()) {
    std::filesystem::create_directories(s.out);
    std::ofstream txt(std::filesystem::path(s.out) / "ablation.txt", std::ios::trunc);
    txt << table;
    JsonlWriter jw(std::filesystem::path(s.out) / "ablation.jsonl", JsonlWriter::Mode::truncate);
    for (std::size_t i = 0; i < reports.size(); ++i) {
      nlohmann::json rec = eval_report_to_json(reports[i]);
      rec["cot"] = cells[i].cot;
      rec["policy"] = std::string(policy_name(cells[i].policy));
      jw.write(rec);
    }
  }
  return kExitOk;
}

inline int cmd_report(const CliState& s, std::ostream& out) {
  std::filesystem::path path = s.report_in;
  if (std::filesystem::is_directory(path)) path /= "report.json";
  EvalReport rep = eval_report_from_json(load_json_file(path));
  out << render_report_table(rep);
  return kExitOk;
}

}  // namespace detail

// Entry point shared by the binary and the tests. `args` excludes the program
// name.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CliState state;
  CLI::App app{"Toolkit for three-stage detection prompting, parsing, and evaluation"};
  configure_cli(app, state);

  std::vector<const char*> argv;
  argv.push_back("cot4det");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand("convert")) return detail::cmd_convert(state, out);
    if (app.got_subcommand("mix")) return detail::cmd_mix(state, out);
    if (app.got_subcommand("prompts")) return detail::cmd_prompts(state, out);
    if (app.got_subcommand("eval")) return detail::cmd_eval(state, out, err);
    if (app.got_subcommand("simulate")) return detail::cmd_simulate(state, out, err);
    if (app.got_subcommand("report")) return detail::cmd_report(state, out);
  } catch (const Error& e) {
    err << e.what() << "\n";
    return e.code() == Errc::eval_aborted ? kExitEvalFailure : kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  out << app.help();
  return kExitOk;
}

}  // namespace cot4det
