#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "grain/synth.hpp"
#include "grain/training.hpp"
#include "model_fixtures.hpp"
#include "temp_dir.hpp"

namespace grain {
namespace {

using testing::read_file;
using testing::TempDir;

TEST(Schedule, WarmupPeakAndCosineEnd) {
  const Schedule s{1e-3, 10, 110};
  EXPECT_DOUBLE_EQ(lr_at(0, s), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(9, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(10, s), 1e-3);
  EXPECT_NEAR(lr_at(60, s), 5e-4, 1e-15);
  EXPECT_EQ(lr_at(110, s), 0.0);
  EXPECT_EQ(lr_at(500, s), 0.0);
}

TEST(Schedule, MonotoneAfterWarmup) {
  const Schedule s{5e-4, 7, 100};
  for (long t = 1; t < 7; ++t) EXPECT_GT(lr_at(t, s), lr_at(t - 1, s));
  for (long t = 8; t < 100; ++t) EXPECT_LE(lr_at(t, s), lr_at(t - 1, s));
}

TEST(Schedule, WarmupFraction) {
  TrainConfig c;
  EXPECT_EQ(make_schedule(c, 100).warmup_steps, 10);
  c.warmup_steps = 3;
  EXPECT_EQ(make_schedule(c, 100).warmup_steps, 3);
  c.warmup_steps = 50;
  EXPECT_EQ(make_schedule(c, 4).warmup_steps, 3);
}

AnnotationRecord two_caption_record() {
  AnnotationRecord r;
  r.image_id = "x";
  r.original_caption = "original";
  r.mllm_caption = "generated";
  return r;
}

TEST(CaptionSwap, ExtremeProbabilities) {
  const auto r = two_caption_record();
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(choose_caption(r, 0.0, true, rng), "original");
    EXPECT_EQ(choose_caption(r, 1.0, true, rng), "generated");
    EXPECT_EQ(choose_caption(r, 1.0, false, rng), "original");
  }
}

TEST(CaptionSwap, HalfProbabilityFrequency) {
  const auto r = two_caption_record();
  Rng rng(99);
  int generated = 0;
  for (int i = 0; i < 10000; ++i) generated += choose_caption(r, 0.5, true, rng) == "generated";
  EXPECT_NEAR(generated / 10000.0, 0.5, 0.02);
}

TEST(CaptionSwap, EmptyGeneratedCaptionFallsBack) {
  auto r = two_caption_record();
  r.mllm_caption.clear();
  Rng rng(3);
  EXPECT_EQ(choose_caption(r, 1.0, true, rng), "original");
}

class SynthData : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthOptions o;
    o.n_images = 16;
    o.n_classes = 4;
    o.seed = 11;
    o.image_size = 32;
    synth = synth_grounded_dataset(dir / "data", o);
  }

  TrainConfig small_config() const {
    TrainConfig c;
    c.epochs = 3;
    c.batch_size = 4;
    c.seed = 5;
    c.vocab_merges = 32;
    return c;
  }

  TempDir dir;
  SynthResult synth;
};

TEST_F(SynthData, AssembleKeepsTopBoxesAndEmptyRecords) {
  auto examples = load_examples(std::vector<std::string>{synth.shard_path});
  ASSERT_EQ(examples.size(), 16u);
  auto& many = examples[0].record;
  many.descriptions = {"d0", "d1", "d2", "d3", "d4", "d5"};
  many.boxes.clear();
  const double conf[] = {0.4, 0.9, 0.5, 0.8, 0.95, 0.6};
  for (int i = 0; i < 6; ++i) many.boxes.push_back({i, {0.5, 0.5, 0.2, 0.2}, conf[i]});
  examples[1].record.boxes.clear();

  BpeTokenizer tok;
  TrainConfig c;
  c.model.n_region_queries = 4;
  Rng rng(0);
  ImageCache images(c.model.image_size);
  std::ostringstream log_text;
  const auto batch = assemble_batch(std::span(examples).first(2), tok, c, rng, images, Logger(&log_text));
  ASSERT_EQ(batch.samples.size(), 2u);
  const auto& s0 = batch.samples[0];
  ASSERT_EQ(s0.descriptions.size(), 4u);
  const char* expected[] = {"d4", "d1", "d3", "d5"};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(s0.descriptions[static_cast<std::size_t>(i)], tok.encode(expected[i]).ids);
  EXPECT_NE(log_text.str().find("truncate_boxes"), std::string::npos);
  EXPECT_TRUE(batch.samples[1].boxes.empty());
  EXPECT_TRUE(batch.samples[1].descriptions.empty());
}

TEST_F(SynthData, CorruptImageIsSkipped) {
  auto examples = load_examples(std::vector<std::string>{synth.shard_path});
  std::ofstream(examples[2].image_path, std::ios::trunc) << "P6\n32 32\n255\nshort";
  BpeTokenizer tok;
  TrainConfig c;
  Rng rng(0);
  ImageCache images(c.model.image_size);
  const auto batch = assemble_batch(std::span(examples).first(4), tok, c, rng, images, Logger::silent());
  EXPECT_EQ(batch.samples.size(), 3u);
  ASSERT_EQ(batch.skipped.size(), 1u);
  EXPECT_EQ(batch.skipped[0], examples[2].record.image_id);
}

TEST_F(SynthData, DisabledRegionLossReportsZero) {
  auto examples = load_examples(std::vector<std::string>{synth.shard_path});
  BpeTokenizer tok;
  TrainConfig c = small_config();
  c.use_rd_loss = false;
  GrainModel model(testing::tiny_config(tok));
  Rng rng(0);
  ImageCache images(c.model.image_size);
  const auto batch = assemble_batch(std::span(examples).first(4), tok, c, rng, images);
  const auto losses = compute_batch_losses(model, batch, tok.end_id(), LossOptions::from(c));
  EXPECT_EQ(losses.breakdown.l_rd, 0.0);
  EXPECT_GT(losses.breakdown.l_box, 0.0);
  EXPECT_DOUBLE_EQ(losses.breakdown.l_total, losses.breakdown.l_ic + losses.breakdown.l_box);
}

TEST_F(SynthData, NonFiniteLossNamesBatch) {
  auto examples = load_examples(std::vector<std::string>{synth.shard_path});
  BpeTokenizer tok;
  TrainConfig c = small_config();
  GrainModel model(testing::tiny_config(tok));
  model.parameters().entries().front().second.mutable_value().setConstant(std::nan(""));
  Rng rng(0);
  ImageCache images(c.model.image_size);
  const auto batch = assemble_batch(std::span(examples).first(2), tok, c, rng, images);
  AdamW opt = AdamW::from_config(model.parameters(), c);
  try {
    train_step(model, batch, opt, c, make_schedule(c, 10), 0, tok.end_id());
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find(examples[0].record.image_id), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(examples[1].record.image_id), std::string::npos);
  }
}

TEST(AdamWTest, DecayMaskCoversOnlyLinearWeights) {
  BpeTokenizer tok;
  GrainModel model(testing::tiny_config(tok));
  const auto& entries = model.parameters().entries();
  AdamW opt(model.parameters(), 0.9, 0.98, 1e-6, 0.1);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& name = entries[i].first;
    EXPECT_EQ(opt.decays(i), name.ends_with(".weight")) << name;
    if (name.find("norm") != std::string::npos || name.ends_with("pos_embed") || name == "text.token_embed" ||
        name == "decoder.queries" || name == "logit_scale") {
      EXPECT_FALSE(opt.decays(i)) << name;
    }
  }
}

std::vector<nlohmann::json> read_log(const std::string& path) {
  std::ifstream in(path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

TEST_F(SynthData, SeededRunsAreIdentical) {
  const auto c = small_config();
  const auto a = fit({synth.shard_path}, c, dir / "run-a");
  const auto b = fit({synth.shard_path}, c, dir / "run-b");
  ASSERT_TRUE(a.completed);
  EXPECT_EQ(a.total_steps, 12);
  EXPECT_EQ(a.parameter_digest, b.parameter_digest);
  const auto la = read_log(dir / "run-a/loss_log.jsonl");
  const auto lb = read_log(dir / "run-b/loss_log.jsonl");
  ASSERT_EQ(la.size(), 12u);
  ASSERT_EQ(lb.size(), 12u);
  for (const char* key : {"l_ic", "l_box", "l_rd", "l_total", "lr"})
    EXPECT_NEAR(la[9][key].get<double>(), lb[9][key].get<double>(), 1e-6) << key;
  EXPECT_EQ(la[9]["step"], 10);
  EXPECT_EQ(read_file(a.final_checkpoint), read_file(b.final_checkpoint));
}

TEST_F(SynthData, LossLogFields) {
  auto c = small_config();
  c.epochs = 1;
  fit({synth.shard_path}, c, dir / "run");
  const auto log = read_log(dir / "run/loss_log.jsonl");
  ASSERT_EQ(log.size(), 4u);
  for (std::size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(log[i]["step"], static_cast<long>(i + 1));
    for (const char* key : {"l_ic", "l_box", "l_rd", "l_total", "lr"}) EXPECT_TRUE(log[i][key].is_number()) << key;
    EXPECT_NEAR(log[i]["l_total"].get<double>(),
                log[i]["l_ic"].get<double>() + log[i]["l_box"].get<double>() + log[i]["l_rd"].get<double>(), 1e-9);
  }
}

TEST_F(SynthData, ResumeMatchesUninterruptedRun) {
  const auto c = small_config();
  const auto full = fit({synth.shard_path}, c, dir / "full");

  auto partial_cfg = c;
  partial_cfg.max_steps = 6;
  const auto partial = fit({synth.shard_path}, partial_cfg, dir / "resumed");
  EXPECT_FALSE(partial.completed);
  EXPECT_EQ(partial.steps_run, 6);
  // A stray step from a crashed run must be dropped from the log on resume.
  std::ofstream(dir / "resumed/loss_log.jsonl", std::ios::app) << R"({"step":7,"l_ic":0,"l_box":0,"l_rd":0,"l_total":0,"lr":0})" << '\n';

  const auto resumed = fit({synth.shard_path}, c, dir / "resumed");
  EXPECT_TRUE(resumed.resumed);
  EXPECT_EQ(resumed.steps_run, 6);
  EXPECT_EQ(resumed.parameter_digest, full.parameter_digest);
  EXPECT_EQ(read_file(dir / "resumed/loss_log.jsonl"), read_file(dir / "full/loss_log.jsonl"));
}

TEST_F(SynthData, ResumeWithChangedConfigIsRejected) {
  auto c = small_config();
  c.max_steps = 2;
  fit({synth.shard_path}, c, dir / "run");
  c.peak_lr = 1e-2;
  EXPECT_THROW(fit({synth.shard_path}, c, dir / "run"), ConfigError);
}

TEST_F(SynthData, EmptyShardIsConfigError) {
  const auto empty = dir / "empty.jsonl";
  std::ofstream(empty).flush();
  EXPECT_THROW(fit({empty}, small_config(), dir / "run"), ConfigError);
}

TEST_F(SynthData, ReloadedCheckpointGivesIdenticalEmbeddings) {
  auto c = small_config();
  c.epochs = 2;
  const auto r = fit({synth.shard_path}, c, dir / "run");
  const auto ck = load_checkpoint(r.final_checkpoint);
  auto model = model_from_checkpoint(ck);
  EXPECT_EQ(model->parameters().digest(), r.parameter_digest);
  const auto tok = ck.tokenizer();
  ImageCache images(ck.model_config.image_size);
  const auto examples = load_examples(std::vector<std::string>{synth.shard_path});
  auto again = model_from_checkpoint(load_checkpoint(r.final_checkpoint));
  ad::NoGradGuard guard;
  const auto& img = images.get(examples[0].image_path);
  const auto ids = tok.encode(examples[0].record.original_caption).ids;
  const ad::Matrix ea = model->encode_image(img, Mode::kEval).image_embed.value();
  const ad::Matrix eb = again->encode_image(img, Mode::kEval).image_embed.value();
  const ad::Matrix ta = model->encode_text(ids, tok.end_id()).vector.value();
  const ad::Matrix tb = again->encode_text(ids, tok.end_id()).vector.value();
  EXPECT_EQ((ea * ta.transpose())(0, 0), (eb * tb.transpose())(0, 0));
  EXPECT_TRUE(ea == eb);
}

TEST(TrainConfigJson, RoundTripAndDefaults) {
  TrainConfig c;
  c.batch_size = 16;
  c.model.n_region_queries = 4;
  nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(back.batch_size, 16);
  EXPECT_EQ(back.model.n_region_queries, 4);
  const auto partial = nlohmann::json{{"epochs", 2}}.get<TrainConfig>();
  EXPECT_EQ(partial.epochs, 2);
  EXPECT_EQ(partial.batch_size, TrainConfig{}.batch_size);
}

TEST(TrainConfigValidate, RejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.iou_loss = "diou";
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.caption_swap_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace grain
