#pragma once

// Two-stage annotation: elicit a primary subject, then distinguishing
// descriptions and a one-line caption from a generation client; localize a
// core attribute of each description with a detection client, filter by
// confidence, suppress duplicates, and keep one box per description.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "grain/box_geometry.hpp"
#include "grain/errors.hpp"
#include "grain/image.hpp"
#include "grain/logging.hpp"
#include "grain/shard.hpp"

namespace grain {

inline constexpr const char* kAnnotationPipelineVersion = "grain-annotate-1";

inline constexpr const char* kSubjectPrompt =
    "What is the primary visual subject in this image? Answer in 2-3 words at most.";
inline constexpr const char* kDescriptionPrompt =
    "What are some distinguishing visual features of this {subject}? Answer as a concise list of features";
inline constexpr const char* kCaptionPrompt = "Describe this image in one line";

struct ImageSample {
  std::string image_id;
  Image image;
  std::string original_caption;
  std::string image_path;  // where the pixels came from, if anywhere
};

enum class PromptKind { kSubject, kDescriptions, kCaption };

inline const char* prompt_kind_name(PromptKind k) {
  switch (k) {
    case PromptKind::kSubject: return "subject";
    case PromptKind::kDescriptions: return "descriptions";
    case PromptKind::kCaption: return "caption";
  }
  return "subject";
}

struct GenerationRequest {
  const ImageSample* sample = nullptr;
  PromptKind kind = PromptKind::kSubject;
  std::string prompt;
};

struct DetectorProposal {
  NormBox box;
  double score = 0.0;
  std::string query_text;
};

// Both interfaces must be safe for concurrent calls. Failures are reported
// by throwing ClientFailure.
class GenerationClient {
 public:
  virtual ~GenerationClient() = default;
  virtual std::string generate(const GenerationRequest& request) = 0;
  virtual std::string identifier() const = 0;
};

class DetectionClient {
 public:
  virtual ~DetectionClient() = default;
  virtual std::vector<DetectorProposal> detect(const ImageSample& sample, const std::string& query) = 0;
  virtual std::string identifier() const = 0;
};

// ---------------------------------------------------------------------------
// Mock clients backed by fixture tables

// {"<image_id>": {"subject": "...", "descriptions": "...", "caption": "..."}}.
// A missing entry, or a null value, is a client failure.
class MockGenerationClient : public GenerationClient {
 public:
  explicit MockGenerationClient(nlohmann::json table) : table_(std::move(table)) {}

  static MockGenerationClient from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open generation fixture " + path);
    return MockGenerationClient(nlohmann::json::parse(in));
  }

  std::string generate(const GenerationRequest& request) override {
    const auto& id = request.sample->image_id;
    const char* key = prompt_kind_name(request.kind);
    if (!table_.contains(id) || !table_[id].contains(key) || !table_[id][key].is_string())
      throw ClientFailure("mock generation has no " + std::string(key) + " reply for " + id);
    return table_[id][key].get<std::string>();
  }

  std::string identifier() const override { return "mock-generation"; }

 private:
  nlohmann::json table_;
};

// {"<image_id>": {"<query>": [[x0, y0, x1, y1, score], ...]}} with corners in
// the sample's pixel space. Unknown queries have no proposals; a null query
// entry is a client failure.
class MockDetectionClient : public DetectionClient {
 public:
  explicit MockDetectionClient(nlohmann::json table) : table_(std::move(table)) {}

  static MockDetectionClient from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open detection fixture " + path);
    return MockDetectionClient(nlohmann::json::parse(in));
  }

  std::vector<DetectorProposal> detect(const ImageSample& sample, const std::string& query) override {
    std::vector<DetectorProposal> out;
    if (!table_.contains(sample.image_id) || !table_[sample.image_id].contains(query)) return out;
    const auto& entries = table_[sample.image_id][query];
    if (entries.is_null()) throw ClientFailure("mock detection failure for " + sample.image_id + " / " + query);
    for (const auto& e : entries)
      out.push_back({rescale_to_normalized({e[0].get<double>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>()},
                                           sample.image.width, sample.image.height),
                     e[4].get<double>(), query});
    return out;
  }

  std::string identifier() const override { return "mock-detection"; }

 private:
  nlohmann::json table_;
};

// ---------------------------------------------------------------------------
// Retries

struct RetryPolicy {
  int retries = 2;
  double initial_delay_s = 0.5;
  double multiplier = 2.0;
};

using Sleeper = std::function<void(double seconds)>;

inline void sleep_seconds(double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); }

// Calls fn up to 1 + retries times, sleeping initial_delay * multiplier^k
// after the k-th failure.
template <typename F>
auto with_retries(F&& fn, const RetryPolicy& policy, const Sleeper& sleep = sleep_seconds) -> decltype(fn()) {
  double delay = policy.initial_delay_s;
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const ClientFailure&) {
      if (attempt >= policy.retries) throw;
    }
    sleep(delay);
    delay *= policy.multiplier;
  }
}

// ---------------------------------------------------------------------------
// Elicitation

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string elicit_subject(GenerationClient& client, const ImageSample& sample, const RetryPolicy& policy = {},
                                  const Sleeper& sleep = sleep_seconds) {
  return trim(with_retries([&] { return client.generate({&sample, PromptKind::kSubject, kSubjectPrompt}); }, policy, sleep));
}

inline std::string description_prompt(const std::string& subject) {
  std::string p = kDescriptionPrompt;
  const std::string key = "{subject}";
  p.replace(p.find(key), key.size(), subject);
  return p;
}

// One item per line; leading bullets ("-", "*", "+", U+2022) and numbering
// ("1.", "2)") are removed, empty items dropped.
inline std::vector<std::string> parse_description_list(const std::string& reply) {
  std::vector<std::string> items;
  std::size_t start = 0;
  while (start <= reply.size()) {
    auto end = reply.find('\n', start);
    if (end == std::string::npos) end = reply.size();
    std::string line = trim(std::string_view(reply).substr(start, end - start));
    start = end + 1;
    if (line.starts_with("\xe2\x80\xa2")) {
      line = trim(line.substr(3));
    } else if (!line.empty() && (line[0] == '-' || line[0] == '*' || line[0] == '+')) {
      line = trim(line.substr(1));
    } else {
      std::size_t digits = 0;
      while (digits < line.size() && std::isdigit(static_cast<unsigned char>(line[digits]))) ++digits;
      if (digits > 0 && digits < line.size() && (line[digits] == '.' || line[digits] == ')')) line = trim(line.substr(digits + 1));
    }
    if (!line.empty()) items.push_back(std::move(line));
  }
  return items;
}

inline std::vector<std::string> elicit_descriptions(GenerationClient& client, const ImageSample& sample,
                                                    const std::string& subject, const RetryPolicy& policy = {},
                                                    const Sleeper& sleep = sleep_seconds) {
  if (subject.empty()) throw ConfigError("description elicitation needs a subject");
  const auto reply = with_retries(
      [&] { return client.generate({&sample, PromptKind::kDescriptions, description_prompt(subject)}); }, policy, sleep);
  return parse_description_list(reply);
}

struct CaptionResult {
  std::string caption;
  bool fallback = false;
};

inline std::string fold_lines(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (char c : trim(text)) {
    if (c == '\n' || c == '\r') {
      pending_space = true;
      continue;
    }
    if (pending_space) {
      if (!out.empty() && out.back() != ' ' && c != ' ') out += ' ';
      pending_space = false;
    }
    out += c;
  }
  return out;
}

inline CaptionResult elicit_mllm_caption(GenerationClient& client, const ImageSample& sample,
                                         const RetryPolicy& policy = {}, const Sleeper& sleep = sleep_seconds) {
  try {
    auto reply = with_retries([&] { return client.generate({&sample, PromptKind::kCaption, kCaptionPrompt}); }, policy, sleep);
    return {fold_lines(reply), false};
  } catch (const ClientFailure&) {
    return {sample.original_caption, true};
  }
}

// ---------------------------------------------------------------------------
// Localization

inline std::string extract_attribute(const std::string& description) {
  const auto cut = description.find_first_of(",;");
  std::string s = trim(description.substr(0, cut));
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (const char* article : {"a ", "an ", "the "}) {
    if (s.starts_with(article)) {
      s = trim(s.substr(std::string_view(article).size()));
      break;
    }
  }
  if (s.empty()) s = trim(description);
  return s;
}

inline void sort_by_score(std::vector<DetectorProposal>& p) {
  std::stable_sort(p.begin(), p.end(), [](const DetectorProposal& a, const DetectorProposal& b) { return a.score > b.score; });
}

inline std::vector<DetectorProposal> filter_by_confidence(std::vector<DetectorProposal> proposals, double threshold) {
  std::erase_if(proposals, [&](const DetectorProposal& p) { return !(p.score >= threshold); });
  sort_by_score(proposals);
  return proposals;
}

inline std::vector<DetectorProposal> localize(DetectionClient& client, const ImageSample& sample, const std::string& query,
                                              double threshold, const RetryPolicy& policy = {},
                                              const Sleeper& sleep = sleep_seconds, const Logger& log = Logger::silent()) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("confidence threshold must be in [0,1]");
  try {
    return filter_by_confidence(with_retries([&] { return client.detect(sample, query); }, policy, sleep), threshold);
  } catch (const ClientFailure& e) {
    log.warn("localize_failed", {{"image_id", sample.image_id}, {"query", query}, {"reason", e.what()}});
    return {};
  }
}

inline std::vector<DetectorProposal> nms_dedupe(std::vector<DetectorProposal> proposals, double iou_threshold) {
  sort_by_score(proposals);
  std::vector<DetectorProposal> kept;
  for (auto& p : proposals) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(k.box, p.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(std::move(p));
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Corpus

struct AnnotateConfig {
  double conf_threshold = 0.3;
  double nms_iou = 0.5;
  RetryPolicy retry;
  int workers = 1;

  void validate() const {
    if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) throw ConfigError("conf_threshold must be in [0,1]");
    if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw ConfigError("nms_iou must be in [0,1]");
    if (retry.retries < 0) throw ConfigError("retries must be nonnegative");
    if (workers < 1) throw ConfigError("workers must be at least 1");
  }
};

struct AnnotatedCorpus {
  std::vector<AnnotationRecord> records;  // sorted by image_id
  std::vector<std::string> flagged;       // caption fell back to the original
  std::vector<std::string> skipped;       // subject or description elicitation failed
  std::map<std::string, std::string> image_paths;
};

struct SampleOutcome {
  std::optional<AnnotationRecord> record;
  bool flagged = false;
};

inline SampleOutcome annotate_sample(const ImageSample& sample, GenerationClient& gen, DetectionClient& det,
                                     const AnnotateConfig& config, const Sleeper& sleep, const Logger& log) {
  SampleOutcome out;
  AnnotationRecord r;
  r.image_id = sample.image_id;
  r.original_caption = sample.original_caption;
  try {
    r.primary_subject = elicit_subject(gen, sample, config.retry, sleep);
    if (r.primary_subject.empty()) throw ClientFailure("empty subject reply");
    r.descriptions = elicit_descriptions(gen, sample, r.primary_subject, config.retry, sleep);
  } catch (const ClientFailure& e) {
    log.warn("skip_sample", {{"image_id", sample.image_id}, {"reason", e.what()}});
    return out;
  }
  const auto caption = elicit_mllm_caption(gen, sample, config.retry, sleep);
  r.mllm_caption = caption.caption;
  out.flagged = caption.fallback;
  if (caption.fallback) log.warn("caption_fallback", {{"image_id", sample.image_id}});
  for (std::size_t k = 0; k < r.descriptions.size(); ++k) {
    const auto query = extract_attribute(r.descriptions[k]);
    const auto kept = nms_dedupe(localize(det, sample, query, config.conf_threshold, config.retry, sleep, log), config.nms_iou);
    if (!kept.empty()) r.boxes.push_back({static_cast<int>(k), kept.front().box, kept.front().score});
  }
  out.record = std::move(r);
  return out;
}

inline AnnotatedCorpus annotate_corpus(const std::vector<ImageSample>& samples, GenerationClient& gen, DetectionClient& det,
                                       const AnnotateConfig& config, const Logger& log = Logger::silent(),
                                       const Sleeper& sleep = sleep_seconds) {
  config.validate();
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (s.image_id.empty()) throw DataError("sample with empty image_id");
    if (!ids.insert(s.image_id).second) throw DataError("duplicate image_id " + s.image_id);
  }
  std::vector<SampleOutcome> outcomes(samples.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++)
      outcomes[i] = annotate_sample(samples[i], gen, det, config, sleep, log);
  };
  const int n_threads = std::min<int>(config.workers, static_cast<int>(samples.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  AnnotatedCorpus corpus;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!outcomes[i].record) {
      corpus.skipped.push_back(samples[i].image_id);
      continue;
    }
    if (outcomes[i].flagged) corpus.flagged.push_back(samples[i].image_id);
    if (!samples[i].image_path.empty()) corpus.image_paths[samples[i].image_id] = samples[i].image_path;
    corpus.records.push_back(std::move(*outcomes[i].record));
  }
  std::sort(corpus.records.begin(), corpus.records.end(),
            [](const AnnotationRecord& a, const AnnotationRecord& b) { return a.image_id < b.image_id; });
  std::sort(corpus.flagged.begin(), corpus.flagged.end());
  std::sort(corpus.skipped.begin(), corpus.skipped.end());
  return corpus;
}

// Shard plus sidecar. Image paths are stored relative to the shard directory.
inline void write_annotated_shard(const std::string& shard_path, const AnnotatedCorpus& corpus,
                                  const AnnotateConfig& config, const GenerationClient& gen, const DetectionClient& det) {
  namespace fs = std::filesystem;
  const auto dir = fs::absolute(fs::path(shard_path)).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  write_shard(shard_path, corpus.records);
  nlohmann::ordered_json meta;
  meta["pipeline_version"] = kAnnotationPipelineVersion;
  meta["conf_threshold"] = config.conf_threshold;
  meta["nms_iou"] = config.nms_iou;
  meta["retries"] = config.retry.retries;
  meta["generation_client"] = gen.identifier();
  meta["detection_client"] = det.identifier();
  meta["record_count"] = corpus.records.size();
  meta["flagged"] = corpus.flagged;
  meta["skipped"] = corpus.skipped;
  nlohmann::ordered_json index = nlohmann::ordered_json::object();
  for (const auto& [id, path] : corpus.image_paths)
    index[id] = fs::relative(fs::absolute(path), dir).generic_string();
  meta["image_index"] = index;
  std::ofstream out(sidecar_path(shard_path), std::ios::trunc);
  if (!out) throw DataError("cannot write sidecar for " + shard_path);
  out << meta.dump(2) << '\n';
}

// Input manifest: JSON Lines {"image_id", "image", "caption"}; image paths
// are relative to the manifest's directory.
inline std::vector<ImageSample> load_sample_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open input manifest " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<ImageSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(line_no, e.what());
    }
    for (const char* key : {"image_id", "image", "caption"})
      if (!j.contains(key) || !j[key].is_string()) throw SchemaError(line_no, std::string("missing string field '") + key + "'");
    ImageSample s;
    s.image_id = j["image_id"].get<std::string>();
    s.image_path = (dir / j["image"].get<std::string>()).string();
    s.image = read_ppm(s.image_path);
    s.original_caption = j["caption"].get<std::string>();
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace grain
