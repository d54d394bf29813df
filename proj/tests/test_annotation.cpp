#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <random>
#include <sstream>
#include <thread>

#include "grain/annotation.hpp"
#include "grain/annotation_http.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

namespace grain {
namespace {

using testing::read_file;
using testing::TempDir;

const std::string kData = std::string(GRAIN_TEST_DATA_DIR) + "/annotate";

void no_sleep(double) {}

ImageSample sample(const std::string& id, int w = 96, int h = 96) { return {id, Image(w, h), "original " + id, ""}; }

// Scripted client: pops replies in order, throwing ClientFailure for "!".
class ScriptedGeneration : public GenerationClient {
 public:
  explicit ScriptedGeneration(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string generate(const GenerationRequest& r) override {
    prompts.push_back(r.prompt);
    if (next_ >= replies_.size()) throw ClientFailure("no more replies");
    auto reply = replies_[next_++];
    if (reply == "!") throw ClientFailure("scripted failure");
    return reply;
  }
  std::string identifier() const override { return "scripted"; }
  std::vector<std::string> prompts;

 private:
  std::vector<std::string> replies_;
  std::size_t next_ = 0;
};

TEST(Elicit, SubjectFromMockTable) {
  MockGenerationClient gen(nlohmann::json{{"img7", {{"subject", "red barn"}}}});
  EXPECT_EQ(elicit_subject(gen, sample("img7"), {}, no_sleep), "red barn");
}

TEST(Elicit, SubjectWhitespaceOnlyStripped) {
  ScriptedGeneration gen({"  A dog.  "});
  EXPECT_EQ(elicit_subject(gen, sample("x"), {}, no_sleep), "A dog.");
  EXPECT_EQ(gen.prompts[0], "What is the primary visual subject in this image? Answer in 2-3 words at most.");
}

TEST(Elicit, UnreachableWithoutRetriesFails) {
  ScriptedGeneration gen({"!", "late reply"});
  EXPECT_THROW(elicit_subject(gen, sample("x"), RetryPolicy{0, 1.0, 2.0}, no_sleep), ClientFailure);
}

TEST(Elicit, RetriesWithExponentialBackoff) {
  ScriptedGeneration gen({"!", "!", "ok"});
  std::vector<double> delays;
  const auto s = elicit_subject(gen, sample("x"), RetryPolicy{2, 0.25, 2.0}, [&](double d) { delays.push_back(d); });
  EXPECT_EQ(s, "ok");
  EXPECT_EQ(delays, (std::vector<double>{0.25, 0.5}));
  ScriptedGeneration always({"!", "!", "!", "!"});
  delays.clear();
  EXPECT_THROW(elicit_subject(always, sample("x"), RetryPolicy{2, 0.25, 2.0}, [&](double d) { delays.push_back(d); }),
               ClientFailure);
  EXPECT_EQ(delays.size(), 2u);
}

TEST(Elicit, DescriptionPromptAndBullets) {
  ScriptedGeneration gen({"- pointed ears\n- short snout"});
  EXPECT_EQ(elicit_descriptions(gen, sample("x"), "fox", {}, no_sleep),
            (std::vector<std::string>{"pointed ears", "short snout"}));
  EXPECT_EQ(gen.prompts[0],
            "What are some distinguishing visual features of this fox? Answer as a concise list of features");
}

TEST(Elicit, DescriptionParsing) {
  EXPECT_EQ(parse_description_list("1. red roof\n2. wooden walls\n\n"), (std::vector<std::string>{"red roof", "wooden walls"}));
  EXPECT_TRUE(parse_description_list("").empty());
  EXPECT_EQ(parse_description_list("* a\r\n\xe2\x80\xa2 b\n3) c\n+ d\nplain"),
            (std::vector<std::string>{"a", "b", "c", "d", "plain"}));
  EXPECT_EQ(parse_description_list("2020 model year"), (std::vector<std::string>{"2020 model year"}));
}

TEST(Elicit, DescriptionParsingNeverYieldsEmpty) {
  std::mt19937_64 rng(3);
  const std::string alphabet = "ab -*\n.1)\t \xe2\x80\xa2";
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    const auto n = rng() % 30;
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    for (const auto& item : parse_description_list(s)) {
      EXPECT_FALSE(item.empty());
      EXPECT_EQ(item, trim(item));
    }
  }
}

TEST(Elicit, EmptySubjectRejected) {
  ScriptedGeneration gen({"x"});
  EXPECT_THROW(elicit_descriptions(gen, sample("x"), "", {}, no_sleep), ConfigError);
}

TEST(Elicit, CaptionFolding) {
  ScriptedGeneration one({"A barn in a field"});
  EXPECT_EQ(elicit_mllm_caption(one, sample("x"), {}, no_sleep).caption, "A barn in a field");
  ScriptedGeneration two({"A barn\nin a field"});
  EXPECT_EQ(elicit_mllm_caption(two, sample("x"), {}, no_sleep).caption, "A barn in a field");
  ScriptedGeneration failing({"!"});
  const auto r = elicit_mllm_caption(failing, sample("x"), RetryPolicy{0, 0, 1}, no_sleep);
  EXPECT_EQ(r.caption, "original x");
  EXPECT_TRUE(r.fallback);
}

TEST(Attribute, ExtractionRule) {
  EXPECT_EQ(extract_attribute("pointed ears, usually erect"), "pointed ears");
  EXPECT_EQ(extract_attribute("The red roof"), "red roof");
  EXPECT_EQ(extract_attribute("short"), "short");
  EXPECT_EQ(extract_attribute("An Orange beak; curved"), "orange beak");
  EXPECT_EQ(extract_attribute("another tail"), "another tail");
}

DetectorProposal prop(NormBox b, double s) { return {b, s, "q"}; }

std::vector<double> scores(const std::vector<DetectorProposal>& p) {
  std::vector<double> s;
  for (const auto& x : p) s.push_back(x.score);
  return s;
}

class TableDetector : public DetectionClient {
 public:
  std::vector<DetectorProposal> proposals;
  bool fail = false;
  std::vector<DetectorProposal> detect(const ImageSample&, const std::string&) override {
    if (fail) throw ClientFailure("down");
    return proposals;
  }
  std::string identifier() const override { return "table"; }
};

TEST(Localize, ConfidenceFloor) {
  TableDetector det;
  det.proposals = {prop({0.5, 0.5, 0.1, 0.1}, 0.31), prop({0.2, 0.2, 0.1, 0.1}, 0.29), prop({0.7, 0.7, 0.1, 0.1}, 0.9)};
  EXPECT_EQ(scores(localize(det, sample("x"), "q", 0.3, {}, no_sleep)), (std::vector<double>{0.9, 0.31}));
  EXPECT_EQ(scores(localize(det, sample("x"), "q", 0.0, {}, no_sleep)), (std::vector<double>{0.9, 0.31, 0.29}));
  det.proposals.clear();
  EXPECT_TRUE(localize(det, sample("x"), "q", 0.3, {}, no_sleep).empty());
}

TEST(Localize, ClientFailureIsEmptyAndLogged) {
  TableDetector det;
  det.fail = true;
  std::ostringstream log_text;
  EXPECT_TRUE(localize(det, sample("x"), "q", 0.3, RetryPolicy{1, 0, 1}, no_sleep, Logger(&log_text)).empty());
  EXPECT_NE(log_text.str().find("localize_failed"), std::string::npos);
}

TEST(Nms, IdenticalAndDisjoint) {
  const NormBox a{0.3, 0.3, 0.2, 0.2};
  EXPECT_EQ(scores(nms_dedupe({prop(a, 0.8), prop(a, 0.9)}, 0.5)), (std::vector<double>{0.9}));
  EXPECT_EQ(scores(nms_dedupe({prop(a, 0.9), prop({0.8, 0.8, 0.2, 0.2}, 0.8)}, 0.5)), (std::vector<double>{0.9, 0.8}));
}

TEST(Nms, OverlapSixTenthsSuppressed) {
  const NormBox a{0.25, 0.25, 0.5, 0.5}, b{0.375, 0.25, 0.5, 0.5};
  EXPECT_NEAR(oracle::raster_iou(oracle::corners_of(0.25, 0.25, 0.5, 0.5), oracle::corners_of(0.375, 0.25, 0.5, 0.5)), 0.6, 2e-3);
  const auto kept = nms_dedupe({prop(a, 0.9), prop(b, 0.8)}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].box, a);
  EXPECT_EQ(nms_dedupe({prop(a, 0.9), prop(b, 0.8)}, 0.65).size(), 2u);
}

TEST(Nms, IdempotentAndNonIncreasing) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 0.95), s(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<DetectorProposal> p;
    const auto n = rng() % 12;
    for (std::size_t i = 0; i < n; ++i) p.push_back(prop({u(rng), u(rng), u(rng) * 0.5, u(rng) * 0.5}, s(rng)));
    const double thr = s(rng);
    const auto once = nms_dedupe(p, thr);
    const auto twice = nms_dedupe(once, thr);
    EXPECT_LE(once.size(), p.size());
    ASSERT_EQ(once.size(), twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
      EXPECT_EQ(once[i].box, twice[i].box);
      if (i > 0) {
        EXPECT_GE(once[i - 1].score, once[i].score);
      }
      for (std::size_t j = 0; j < i; ++j) EXPECT_LE(iou(once[i].box, once[j].box), thr);
    }
  }
}

TEST(Nms, FilteredBoxesRespectFloor) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.05, 0.95), s(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    TableDetector det;
    const auto n = rng() % 10;
    for (std::size_t i = 0; i < n; ++i) det.proposals.push_back(prop({u(rng), u(rng), 0.1, 0.1}, s(rng)));
    const double floor = s(rng);
    for (const auto& p : nms_dedupe(localize(det, sample("x"), "q", floor, {}, no_sleep), 0.5)) EXPECT_GE(p.score, floor);
  }
}

TEST(Rescale, FixtureExamples) {
  const auto b = rescale_to_normalized({96, 96, 480, 480}, 960, 960);
  EXPECT_NEAR(b.cx, 0.3, 1e-12);
  EXPECT_NEAR(b.cy, 0.3, 1e-12);
  EXPECT_NEAR(b.w, 0.4, 1e-12);
  EXPECT_NEAR(b.h, 0.4, 1e-12);
  EXPECT_EQ(rescale_to_normalized({0, 0, 960, 960}, 960, 960), (NormBox{0.5, 0.5, 1.0, 1.0}));
  EXPECT_THROW(rescale_to_normalized({10, 10, 10, 50}, 960, 960), DegenerateBox);
}

TEST(Rescale, ResolutionInvariance) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0), k(0.1, 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    const int s = 50 + static_cast<int>(rng() % 1000);
    double x0 = u(rng) * s, x1 = u(rng) * s, y0 = u(rng) * s, y1 = u(rng) * s;
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    if (x1 - x0 < 1e-3 || y1 - y0 < 1e-3) continue;
    const int kk = 1 + static_cast<int>(rng() % 8);
    const auto a = rescale_to_normalized({x0, y0, x1, y1}, s, s);
    const auto b = rescale_to_normalized({x0 * kk, y0 * kk, x1 * kk, y1 * kk}, kk * s, kk * s);
    EXPECT_NEAR(a.cx, b.cx, 1e-12);
    EXPECT_NEAR(a.cy, b.cy, 1e-12);
    EXPECT_NEAR(a.w, b.w, 1e-12);
    EXPECT_NEAR(a.h, b.h, 1e-12);
  }
}

class Fixture : public ::testing::Test {
 protected:
  std::vector<ImageSample> samples = load_sample_manifest(kData + "/manifest.jsonl");
  MockGenerationClient gen = MockGenerationClient::from_file(kData + "/generation.json");
  MockDetectionClient det = MockDetectionClient::from_file(kData + "/detection.json");
  AnnotateConfig config;
  TempDir dir;

  std::string run(std::vector<ImageSample> input, const std::string& name, int workers = 1) {
    auto c = config;
    c.workers = workers;
    const auto corpus = annotate_corpus(input, gen, det, c, Logger::silent(), no_sleep);
    const auto path = dir / (name + "/shard.jsonl");
    write_annotated_shard(path, corpus, c, gen, det);
    return path;
  }
};

TEST_F(Fixture, MatchesIndependentExpectation) {
  ASSERT_EQ(samples.size(), 3u);
  const auto shard = run(samples, "a");
  EXPECT_EQ(read_file(shard), read_file(kData + "/expected_shard.jsonl"));
}

TEST_F(Fixture, ByteIdenticalAcrossRunsAndOrders) {
  const auto first = read_file(run(samples, "a"));
  EXPECT_EQ(first, read_file(run(samples, "b")));
  auto reversed = samples;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(first, read_file(run(reversed, "c", 3)));
  auto rotated = samples;
  std::rotate(rotated.begin(), rotated.begin() + 1, rotated.end());
  EXPECT_EQ(first, read_file(run(rotated, "d", 2)));
  EXPECT_EQ(read_file(dir / "a/shard.jsonl.meta.json"), read_file(dir / "b/shard.jsonl.meta.json"));
}

TEST_F(Fixture, SidecarRecordsRun) {
  const auto shard = run(samples, "a");
  const auto meta = read_sidecar(shard);
  EXPECT_EQ(meta["pipeline_version"], kAnnotationPipelineVersion);
  EXPECT_EQ(meta["conf_threshold"], 0.3);
  EXPECT_EQ(meta["nms_iou"], 0.5);
  EXPECT_EQ(meta["generation_client"], "mock-generation");
  EXPECT_EQ(meta["detection_client"], "mock-detection");
  EXPECT_EQ(meta["flagged"], nlohmann::json::array({"img-dog"}));
  EXPECT_TRUE(std::filesystem::equivalent(resolve_image_path(shard, meta, "img-dog"), kData + "/images/img-dog.ppm"));
}

TEST_F(Fixture, ShardPassesValidationAndTrainsLoad) {
  const auto shard = run(samples, "a");
  for (const auto& r : read_shard(shard)) EXPECT_TRUE(validate_record(r, config.conf_threshold).empty()) << r.image_id;
  const auto meta = read_sidecar(shard);
  for (const auto& r : read_shard(shard))
    EXPECT_EQ(read_ppm(resolve_image_path(shard, meta, r.image_id)).width, 96);
}

TEST_F(Fixture, SkippedSamplesAreLoggedNotFatal) {
  MockGenerationClient partial(nlohmann::json{{"img-dog", {{"subject", "dog"}, {"descriptions", "- ears"}, {"caption", "c"}}}});
  std::ostringstream log_text;
  const auto corpus = annotate_corpus(samples, partial, det, config, Logger(&log_text), no_sleep);
  ASSERT_EQ(corpus.records.size(), 1u);
  EXPECT_EQ(corpus.records[0].image_id, "img-dog");
  EXPECT_TRUE(corpus.records[0].boxes.empty());
  EXPECT_EQ(corpus.skipped, (std::vector<std::string>{"img-barn", "img-kettle"}));
  EXPECT_NE(log_text.str().find("skip_sample"), std::string::npos);
}

TEST_F(Fixture, DuplicateIdsRejected) {
  auto dup = samples;
  dup.push_back(samples[0]);
  EXPECT_THROW(annotate_corpus(dup, gen, det, config, Logger::silent(), no_sleep), DataError);
}

TEST(Http, ClientsTalkToStubServer) {
  httplib::Server server;
  std::atomic<int> generate_calls{0};
  server.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    ++generate_calls;
    if (body["kind"] == "caption") {
      res.status = 503;
      return;
    }
    res.set_content(nlohmann::json{{"text", body["kind"].get<std::string>() + ":" + body["image_id"].get<std::string>()}}.dump(),
                    "application/json");
  });
  server.Post("/detect", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"proposals", {{0, 0, 48, 48, 0.7}}}, {"query", body["query"]}}.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  HttpGenerationClient gen(base, 5);
  HttpDetectionClient det(base, 5);
  const auto s = sample("h1");
  EXPECT_EQ(elicit_subject(gen, s, {}, no_sleep), "subject:h1");
  const auto cap = elicit_mllm_caption(gen, s, RetryPolicy{1, 0, 1}, no_sleep);
  EXPECT_TRUE(cap.fallback);
  const auto props = localize(det, s, "ears", 0.3, {}, no_sleep);
  ASSERT_EQ(props.size(), 1u);
  EXPECT_EQ(props[0].box, (NormBox{0.25, 0.25, 0.5, 0.5}));
  server.stop();
  thread.join();

  HttpGenerationClient dead("http://127.0.0.1:" + std::to_string(port), 1);
  EXPECT_THROW(elicit_subject(dead, s, RetryPolicy{0, 0, 1}, no_sleep), ClientFailure);
}

}  // namespace
}  // namespace grain
