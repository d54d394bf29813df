#pragma once

// Shard ingestion, batch assembly, AdamW with warmup + cosine schedule,
// checkpointed and resumable training.
//
// Data order and caption coin flips are keyed by (seed, epoch, batch), so a
// run resumed from a checkpoint at a batch boundary replays exactly the
// batches the uninterrupted run would have seen.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "grain/assignment.hpp"
#include "grain/checkpoint.hpp"
#include "grain/digest.hpp"
#include "grain/errors.hpp"
#include "grain/image.hpp"
#include "grain/logging.hpp"
#include "grain/model.hpp"
#include "grain/objectives.hpp"
#include "grain/random.hpp"
#include "grain/shard.hpp"
#include "grain/tokenizer.hpp"

namespace grain {

struct TrainConfig {
  std::string preset = "tiny";
  int epochs = 35;
  int batch_size = 8;
  double peak_lr = 5e-4;
  int warmup_steps = -1;  // negative: warmup_fraction of the total steps
  double warmup_fraction = 0.1;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  double caption_swap_prob = 0.5;
  bool use_rd_loss = true;
  bool use_box_loss = true;
  bool use_mllm_caption = true;
  double grad_clip_norm = 1.0;  // 0 disables clipping
  std::string iou_loss = "giou";  // "giou" or "iou"
  double match_l1_weight = 1.0;
  double match_giou_weight = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  int checkpoint_every = 0;  // in steps; 0 checkpoints at each epoch end
  int max_steps = 0;         // stop after this many global steps; 0 runs to completion
  std::string vocab;         // merge-rule file; empty learns merges from the shard text
  int vocab_merges = 256;
  ModelConfig model = ModelConfig::tiny();

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(caption_swap_prob >= 0.0 && caption_swap_prob <= 1.0)) throw ConfigError("caption_swap_prob must be in [0,1]");
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
    if (grad_clip_norm < 0.0) throw ConfigError("grad_clip_norm must be nonnegative");
    if (iou_loss != "giou" && iou_loss != "iou") throw ConfigError("iou_loss must be \"giou\" or \"iou\"");
    if (preset != "tiny" && preset != "base") throw ConfigError("preset must be \"tiny\" or \"base\"");
    if (checkpoint_every < 0 || max_steps < 0) throw ConfigError("checkpoint_every and max_steps must be nonnegative");
  }

  IouLossKind iou_kind() const { return iou_loss == "iou" ? IouLossKind::kPlain : IouLossKind::kGeneralized; }
  LossSwitches switches() const { return {use_box_loss, use_rd_loss}; }
  MatchCostWeights match_weights() const { return {match_l1_weight, match_giou_weight}; }
};

template <typename Config, typename F>
  requires std::same_as<std::remove_const_t<Config>, TrainConfig>
void visit_fields(Config& c, F&& f) {
  f("preset", c.preset);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("peak_lr", c.peak_lr);
  f("warmup_steps", c.warmup_steps);
  f("warmup_fraction", c.warmup_fraction);
  f("weight_decay", c.weight_decay);
  f("seed", c.seed);
  f("caption_swap_prob", c.caption_swap_prob);
  f("use_rd_loss", c.use_rd_loss);
  f("use_box_loss", c.use_box_loss);
  f("use_mllm_caption", c.use_mllm_caption);
  f("grad_clip_norm", c.grad_clip_norm);
  f("iou_loss", c.iou_loss);
  f("match_l1_weight", c.match_l1_weight);
  f("match_giou_weight", c.match_giou_weight);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("checkpoint_every", c.checkpoint_every);
  f("max_steps", c.max_steps);
  f("vocab", c.vocab);
  f("vocab_merges", c.vocab_merges);
  f("model", c.model);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
  visit_fields(c, [&](const char* name, const auto& v) { j[name] = v; });
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  visit_fields(c, [&](const char* name, auto& v) {
    if (j.contains(name)) j.at(name).get_to(v);
  });
}

// ---------------------------------------------------------------------------
// Schedule

struct Schedule {
  double peak_lr = 5e-4;
  long warmup_steps = 0;
  long total_steps = 0;
};

// Linear warmup to peak_lr over warmup_steps, then cosine decay reaching 0 at
// total_steps.
inline double lr_at(long step, const Schedule& s) {
  if (s.total_steps <= 0 || step >= s.total_steps) return 0.0;
  if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps);
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline Schedule make_schedule(const TrainConfig& c, long total_steps) {
  Schedule s;
  s.peak_lr = c.peak_lr;
  s.total_steps = total_steps;
  s.warmup_steps = c.warmup_steps >= 0 ? c.warmup_steps
                                       : static_cast<long>(std::floor(c.warmup_fraction * static_cast<double>(total_steps)));
  s.warmup_steps = std::min(s.warmup_steps, std::max(0L, total_steps - 1));
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer

// Adam with decoupled weight decay. Decay applies to linear-layer weight
// matrices only; embeddings, queries, norms, biases and the logit scale are
// not decayed.
class AdamW {
 public:
  AdamW(const ParameterStore& params, double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const auto& [name, v] : params.entries()) {
      m_.push_back(ad::Matrix::Zero(v.rows(), v.cols()));
      v_.push_back(ad::Matrix::Zero(v.rows(), v.cols()));
      decay_.push_back(name.size() > 7 && name.ends_with(".weight"));
    }
  }

  static AdamW from_config(const ParameterStore& params, const TrainConfig& c) {
    return AdamW(params, c.adam_beta1, c.adam_beta2, c.adam_eps, c.weight_decay);
  }

  void step(ParameterStore& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i].second;
      const ad::Matrix g = p.grad();
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      auto& w = p.mutable_value();
      if (decay_[i]) w *= (1.0 - lr * weight_decay_);
      w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
    }
  }

  long steps() const { return t_; }
  bool decays(std::size_t i) const { return decay_[i]; }

  NamedArrays export_state(const ParameterStore& params) const {
    NamedArrays out;
    const auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      out.emplace_back("adam.m." + entries[i].first, m_[i]);
      out.emplace_back("adam.v." + entries[i].first, v_[i]);
    }
    return out;
  }

  void import_state(const ParameterStore& params, const NamedArrays& arrays, long t) {
    const auto& entries = params.entries();
    if (arrays.size() != 2 * entries.size()) throw CheckpointError("optimizer state does not match parameters");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& [mn, m] = arrays[2 * i];
      const auto& [vn, v] = arrays[2 * i + 1];
      if (mn != "adam.m." + entries[i].first || vn != "adam.v." + entries[i].first)
        throw CheckpointError("optimizer state names do not match parameters");
      m_[i] = m;
      v_[i] = v;
    }
    t_ = t;
  }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::vector<ad::Matrix> m_, v_;
  std::vector<bool> decay_;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before scaling.
inline double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, v] : params.entries())
    if (v.node()->grad.size() != 0) sq += v.node()->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto& [_, v] : params.entries())
      if (v.node()->grad.size() != 0) v.node()->grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data

struct TrainingExample {
  AnnotationRecord record;
  std::string image_path;
};

// Reads every shard in order, resolving image paths through each sidecar.
inline std::vector<TrainingExample> load_examples(std::span<const std::string> shard_paths) {
  std::vector<TrainingExample> out;
  for (const auto& path : shard_paths) {
    const auto sidecar = read_sidecar(path);
    for (auto& r : read_shard(path)) {
      const auto problems = validate_record(r);
      if (!problems.empty()) throw DataError(path + ": " + problems.front());
      auto image_path = resolve_image_path(path, sidecar, r.image_id);
      out.push_back({std::move(r), std::move(image_path)});
    }
  }
  return out;
}

inline const std::string& choose_caption(const AnnotationRecord& record, double swap_prob, bool use_mllm, Rng& rng) {
  const bool flip = rng.bernoulli(swap_prob);
  if (!use_mllm || record.mllm_caption.empty()) return record.original_caption;
  return flip ? record.mllm_caption : record.original_caption;
}

struct GroundedSample {
  std::string image_id;
  Image image;
  TokenIds caption;
  std::vector<TokenIds> descriptions;  // one per ground-truth box
  std::vector<NormBox> boxes;
};

struct GroundedBatch {
  std::vector<GroundedSample> samples;
  std::vector<std::string> skipped;

  std::vector<std::string> image_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.image_id);
    return ids;
  }
};

// Decoded images resized to the model's input size, cached by path.
class ImageCache {
 public:
  explicit ImageCache(int size) : size_(size) {}

  const Image& get(const std::string& path) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    auto img = resize_bilinear(read_ppm(path), size_, size_);
    return cache_.emplace(path, std::move(img)).first->second;
  }

 private:
  int size_;
  std::map<std::string, Image> cache_;
};

// Keeps at most `limit` boxes, highest confidence first (stable on ties).
inline std::vector<LocalizedBox> top_boxes(std::vector<LocalizedBox> boxes, int limit) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const LocalizedBox& a, const LocalizedBox& b) { return a.confidence > b.confidence; });
  if (static_cast<int>(boxes.size()) > limit) boxes.resize(static_cast<std::size_t>(limit));
  return boxes;
}

inline GroundedBatch assemble_batch(std::span<const TrainingExample> examples, const BpeTokenizer& tokenizer,
                                    const TrainConfig& config, Rng& rng, ImageCache& images,
                                    const Logger& log = Logger::silent()) {
  GroundedBatch batch;
  const int nq = config.model.n_region_queries;
  for (const auto& ex : examples) {
    const auto& r = ex.record;
    const auto& caption = choose_caption(r, config.caption_swap_prob, config.use_mllm_caption, rng);
    GroundedSample s;
    s.image_id = r.image_id;
    try {
      s.image = images.get(ex.image_path);
    } catch (const CorruptImage& e) {
      log.warn("skip_record", {{"image_id", r.image_id}, {"reason", e.what()}});
      batch.skipped.push_back(r.image_id);
      continue;
    }
    s.caption = tokenizer.encode(caption, Overflow::kTruncate).ids;
    if (static_cast<int>(r.boxes.size()) > nq)
      log.warn("truncate_boxes", {{"image_id", r.image_id}, {"boxes", r.boxes.size()}, {"kept", nq}});
    for (const auto& b : top_boxes(r.boxes, nq)) {
      s.descriptions.push_back(
          tokenizer.encode(r.descriptions[static_cast<std::size_t>(b.description_index)], Overflow::kTruncate).ids);
      s.boxes.push_back(b.box);
    }
    batch.samples.push_back(std::move(s));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Losses and the update step

struct LossOptions {
  LossSwitches switches;
  IouLossKind iou = IouLossKind::kGeneralized;
  MatchCostWeights match;

  static LossOptions from(const TrainConfig& c) { return {c.switches(), c.iou_kind(), c.match_weights()}; }
};

struct BatchLosses {
  ad::Var l_ic, l_box, l_rd, total;
  LossBreakdown breakdown;
  std::vector<Assignment> assignments;
};

// Forward pass over a batch and the three objectives. Matching uses the
// current box predictions unless `fixed_assignments` is supplied. Each
// distinct token sequence in the batch is encoded once.
inline BatchLosses compute_batch_losses(const GrainModel& model, const GroundedBatch& batch, int end_id,
                                        const LossOptions& opts,
                                        const std::vector<Assignment>* fixed_assignments = nullptr) {
  if (batch.samples.empty()) throw ShapeError("empty batch");
  std::map<TokenIds, ad::Index> text_slot;
  std::vector<const TokenIds*> texts;
  auto intern = [&](const TokenIds& ids) {
    auto [it, inserted] = text_slot.emplace(ids, static_cast<ad::Index>(texts.size()));
    if (inserted) texts.push_back(&it->first);
    return it->second;
  };

  std::vector<ad::Var> image_embeds, pred_boxes, region_embeds;
  std::vector<ad::Index> caption_slots;
  std::vector<std::vector<ad::Index>> description_slots;
  std::vector<std::vector<NormBox>> gt;
  BatchLosses out;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    const auto& s = batch.samples[i];
    const auto img = model.encode_image(s.image, Mode::kTrain);
    image_embeds.push_back(img.image_embed);
    pred_boxes.push_back(img.pred_boxes);
    region_embeds.push_back(img.region_embeds);
    gt.push_back(s.boxes);
    caption_slots.push_back(intern(s.caption));
    if (fixed_assignments) {
      out.assignments.push_back((*fixed_assignments)[i]);
    } else {
      out.assignments.push_back(hungarian(build_cost_matrix(s.boxes, img.boxes(), opts.match)));
    }
    description_slots.emplace_back();
    if (opts.switches.use_rd_loss)
      for (const auto& d : s.descriptions) description_slots.back().push_back(intern(d));
  }
  std::vector<ad::Var> encoded;
  for (const auto* t : texts) encoded.push_back(model.encode_text(*t, end_id).vector);
  const auto text_table = ad::concat_rows(encoded);

  const auto scale = model.logit_scale();
  out.l_ic = image_caption_loss(ad::concat_rows(image_embeds), ad::gather_rows(text_table, caption_slots), scale);
  out.total = out.l_ic;
  out.l_box = ad::Var::scalar(0.0);
  out.l_rd = ad::Var::scalar(0.0);
  if (opts.switches.use_box_loss) {
    auto wl = box_loss(gt, pred_boxes, out.assignments, opts.iou);
    out.l_box = wl.value;
    if (wl.weight > 0) out.total = out.total + out.l_box;
  }
  if (opts.switches.use_rd_loss) {
    std::vector<ad::Var> description_embeds;
    for (const auto& slots : description_slots)
      description_embeds.push_back(slots.empty() ? ad::Var() : ad::gather_rows(text_table, slots));
    auto wl = region_description_loss(region_embeds, description_embeds, out.assignments, scale);
    out.l_rd = wl.value;
    if (wl.weight > 0) out.total = out.total + out.l_rd;
  }
  out.breakdown = total_loss(out.l_ic.item(), out.l_box.item(), out.l_rd.item(), opts.switches);
  return out;
}

struct StepResult {
  LossBreakdown losses;
  double lr = 0.0;
  double grad_norm = 0.0;
};

inline StepResult train_step(GrainModel& model, const GroundedBatch& batch, AdamW& optimizer, const TrainConfig& config,
                             const Schedule& schedule, long step, int end_id) {
  auto fail = [&](const std::string& what) {
    std::string ids;
    for (const auto& id : batch.image_ids()) ids += (ids.empty() ? "" : ",") + id;
    return NonFiniteLoss(what + " at step " + std::to_string(step + 1) + " for batch [" + ids + "]");
  };
  BatchLosses losses;
  try {
    losses = compute_batch_losses(model, batch, end_id, LossOptions::from(config));
  } catch (const NormalizationError& e) {
    throw fail(std::string("non-finite activations (") + e.what() + ")");
  }
  if (!losses.breakdown.finite() || !std::isfinite(losses.total.item())) throw fail("non-finite loss");
  auto& params = model.parameters();
  params.zero_grad();
  losses.total.backward();
  StepResult r;
  r.grad_norm = clip_grad_norm(params, config.grad_clip_norm);
  r.lr = lr_at(step, schedule);
  optimizer.step(params, r.lr);
  model.clamp_logit_scale();
  params.zero_grad();
  r.losses = losses.breakdown;
  return r;
}

// ---------------------------------------------------------------------------
// fit

struct FitResult {
  std::string final_checkpoint;  // empty when stopped early
  std::string last_checkpoint;
  long steps_run = 0;  // steps executed in this call
  long global_step = 0;
  long total_steps = 0;
  bool completed = false;
  bool resumed = false;
  std::string parameter_digest;
};

namespace training_detail {

inline std::string checkpoint_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%08ld.grain", step);
  return buf;
}

inline std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (!name.starts_with("step-") || !name.ends_with(".grain")) continue;
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

// Fingerprint of everything that shapes the trajectory (not max_steps or
// checkpoint cadence).
inline std::string config_fingerprint(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("max_steps");
  j.erase("checkpoint_every");
  return digest_string(j.dump());
}

inline std::vector<std::string> corpus_text(const std::vector<TrainingExample>& examples) {
  std::vector<std::string> text;
  for (const auto& ex : examples) {
    text.push_back(ex.record.original_caption);
    text.push_back(ex.record.mllm_caption);
    for (const auto& d : ex.record.descriptions) text.push_back(d);
  }
  return text;
}

// Drops log lines whose step is beyond `keep_through`.
inline void trim_loss_log(const std::filesystem::path& path, long keep_through) {
  if (!std::filesystem::exists(path)) return;
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.value("step", 0L) <= keep_through) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace training_detail

inline FitResult fit(const std::vector<std::string>& shard_paths, const TrainConfig& config_in,
                     const std::string& out_dir, const Logger& log = Logger::silent()) {
  TrainConfig config = config_in;
  config.validate();
  const auto examples = load_examples(shard_paths);
  if (examples.empty()) throw ConfigError("no training records in the given shards");

  namespace fs = std::filesystem;
  const fs::path out(out_dir);
  const fs::path ckpt_dir = out / "checkpoints";
  fs::create_directories(ckpt_dir);
  const auto log_path = out / "loss_log.jsonl";
  const auto fingerprint = training_detail::config_fingerprint(config);

  const long n = static_cast<long>(examples.size());
  const long per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const long total = per_epoch * config.epochs;
  const auto schedule = make_schedule(config, total);

  std::optional<BpeTokenizer> tokenizer;
  std::unique_ptr<GrainModel> model;
  std::optional<AdamW> optimizer;
  long start = 0;
  FitResult result;
  result.total_steps = total;

  if (const auto latest = training_detail::latest_checkpoint(ckpt_dir)) {
    const auto ck = load_checkpoint(latest->string());
    if (ck.state.value("config_fingerprint", std::string()) != fingerprint)
      throw ConfigError("checkpoint " + latest->string() + " was written with a different training configuration");
    tokenizer = ck.tokenizer();
    model = model_from_checkpoint(ck);
    optimizer.emplace(AdamW::from_config(model->parameters(), config));
    start = ck.state.at("step").get<long>();
    optimizer->import_state(model->parameters(), ck.extra_arrays, ck.state.at("adam_step").get<long>());
    training_detail::trim_loss_log(log_path, start);
    result.resumed = true;
    log.info("resume", {{"checkpoint", latest->string()}, {"step", start}});
  } else {
    if (config.vocab.empty()) {
      tokenizer.emplace(BpeTokenizer::learn_merges(training_detail::corpus_text(examples),
                                                   static_cast<std::size_t>(config.vocab_merges)),
                        config.model.text_context_len);
    } else {
      tokenizer.emplace(BpeTokenizer::from_file(config.vocab, config.model.text_context_len));
    }
    auto mc = config.model;
    mc.vocab_size = tokenizer->vocab_size();
    mc.init_seed = derive_seed(config.seed, 0x696e6974ULL);
    model = std::make_unique<GrainModel>(mc);
    optimizer.emplace(AdamW::from_config(model->parameters(), config));
    std::ofstream(log_path, std::ios::trunc);
  }

  auto save = [&](long step, const fs::path& path) {
    auto ck = snapshot(*model, *tokenizer);
    ck.extra_arrays = optimizer->export_state(model->parameters());
    ck.state["step"] = step;
    ck.state["adam_step"] = optimizer->steps();
    ck.state["total_steps"] = total;
    ck.state["config_fingerprint"] = fingerprint;
    ck.state["train_config"] = config;
    save_checkpoint(path.string(), ck);
    log.info("checkpoint", {{"path", path.string()}, {"step", step}});
    return path.string();
  };

  ImageCache images(config.model.image_size);
  std::vector<std::size_t> order;
  long order_epoch = -1;
  std::ofstream loss_log(log_path, std::ios::app);
  const long stop_at = config.max_steps > 0 ? std::min<long>(total, config.max_steps) : total;

  for (long step = start; step < stop_at; ++step) {
    const long epoch = step / per_epoch;
    const long b = step % per_epoch;
    if (epoch != order_epoch) {
      order.resize(examples.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle_rng(derive_seed(config.seed, 0x6f72646572ULL, static_cast<std::uint64_t>(epoch)));
      shuffle_rng.shuffle(order);
      order_epoch = epoch;
    }
    std::vector<TrainingExample> chunk;
    for (long i = b * config.batch_size; i < std::min(n, (b + 1) * config.batch_size); ++i)
      chunk.push_back(examples[order[static_cast<std::size_t>(i)]]);
    Rng caption_rng(derive_seed(config.seed, 0x63617074ULL, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)));
    const auto batch = assemble_batch(chunk, *tokenizer, config, caption_rng, images, log);
    if (batch.samples.empty()) {
      log.warn("empty_batch", {{"step", step + 1}});
      continue;
    }
    const auto r = train_step(*model, batch, *optimizer, config, schedule, step, tokenizer->end_id());
    nlohmann::ordered_json entry;
    entry["step"] = step + 1;
    entry["l_ic"] = r.losses.l_ic;
    entry["l_box"] = r.losses.l_box;
    entry["l_rd"] = r.losses.l_rd;
    entry["l_total"] = r.losses.l_total;
    entry["lr"] = r.lr;
    loss_log << entry.dump() << '\n';
    loss_log.flush();
    ++result.steps_run;

    const long done = step + 1;
    const bool periodic = config.checkpoint_every > 0 ? done % config.checkpoint_every == 0 : done % per_epoch == 0;
    if (periodic || done == stop_at) result.last_checkpoint = save(done, ckpt_dir / training_detail::checkpoint_name(done));
  }

  result.global_step = stop_at;
  result.completed = stop_at == total;
  if (result.completed) {
    if (result.last_checkpoint.empty()) result.last_checkpoint = save(total, ckpt_dir / training_detail::checkpoint_name(total));
    result.final_checkpoint = save(total, out / "final.grain");
  }
  result.parameter_digest = model->parameters().digest();
  return result;
}

}  // namespace grain
