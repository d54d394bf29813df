#pragma once

// Query-decoder vision-language network.
//
// Image path: patch embedding -> transformer encoder -> query decoder whose
// inputs are n_q learnable region queries plus one image query. Region outputs
// feed a shared box MLP and a shared region projection; the image-query output
// has its own projection. Text path: token + position embedding -> causal
// transformer -> pooled at the end token -> projection. All exported
// embeddings are unit-norm.

#include <nlohmann/json.hpp>

#include <cmath>
#include <concepts>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "grain/autodiff.hpp"
#include "grain/box_geometry.hpp"
#include "grain/digest.hpp"
#include "grain/errors.hpp"
#include "grain/image.hpp"
#include "grain/random.hpp"
#include "grain/tokenizer.hpp"

namespace grain {

struct ModelConfig {
  int image_size = 224;
  int patch_size = 16;
  int encoder_dim = 768;
  int embed_dim = 512;
  int n_region_queries = 10;
  int encoder_layers = 12;
  int decoder_layers = 6;
  int text_context_len = 77;
  int text_layers = 12;
  int text_dim = 512;
  int heads = 8;
  int mlp_ratio = 4;
  int vocab_size = 0;  // filled from the tokenizer
  double logit_scale_init = std::log(1.0 / 0.07);
  double logit_scale_max = 100.0;
  std::uint64_t init_seed = 0;

  static ModelConfig tiny() {
    ModelConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.encoder_dim = 64;
    c.embed_dim = 32;
    c.n_region_queries = 4;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.text_layers = 2;
    c.text_dim = 64;
    c.heads = 4;
    return c;
  }

  int tokens_per_image() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patch_values() const { return patch_size * patch_size * 3; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(encoder_dim, "encoder_dim");
    positive(embed_dim, "embed_dim");
    positive(n_region_queries, "n_region_queries");
    positive(decoder_layers, "decoder_layers");
    positive(text_context_len, "text_context_len");
    positive(text_dim, "text_dim");
    positive(heads, "heads");
    if (image_size % patch_size != 0) throw ConfigError("model.image_size must be divisible by model.patch_size");
    if (encoder_dim % heads != 0 || text_dim % heads != 0)
      throw ConfigError("model.heads must divide encoder_dim and text_dim");
    if (encoder_layers < 0 || text_layers < 0) throw ConfigError("layer counts must be nonnegative");
    if (vocab_size < 1) throw ConfigError("model.vocab_size is unset");
  }
};

template <typename Config, typename F>
  requires std::same_as<std::remove_const_t<Config>, ModelConfig>
void visit_fields(Config& c, F&& f) {
  f("image_size", c.image_size);
  f("patch_size", c.patch_size);
  f("encoder_dim", c.encoder_dim);
  f("embed_dim", c.embed_dim);
  f("n_region_queries", c.n_region_queries);
  f("encoder_layers", c.encoder_layers);
  f("decoder_layers", c.decoder_layers);
  f("text_context_len", c.text_context_len);
  f("text_layers", c.text_layers);
  f("text_dim", c.text_dim);
  f("heads", c.heads);
  f("mlp_ratio", c.mlp_ratio);
  f("vocab_size", c.vocab_size);
  f("logit_scale_init", c.logit_scale_init);
  f("logit_scale_max", c.logit_scale_max);
  f("init_seed", c.init_seed);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json::object();
  visit_fields(c, [&](const char* name, const auto& v) { j[name] = v; });
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  visit_fields(c, [&](const char* name, auto& v) {
    if (j.contains(name)) j.at(name).get_to(v);
  });
}

enum class Mode { kTrain, kEval };

// Named parameter registry in creation order. Names are the stable keys of
// the checkpoint format.
class ParameterStore {
 public:
  ad::Var add(const std::string& name, ad::Matrix init) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, ad::parameter(std::move(init)));
    return entries_.back().second;
  }

  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, ad::Var>>& entries() { return entries_; }

  ad::Var& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

  std::string digest() const {
    Fnv1a h;
    for (const auto& [name, v] : entries_) {
      h.update(name);
      h.update(std::span<const double>(v.value().data(), static_cast<std::size_t>(v.value().size())));
    }
    return h.hex();
  }

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace nn {

inline ad::Matrix init_normal(Rng& rng, ad::Index rows, ad::Index cols, double std) {
  ad::Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(std);
  return m;
}

struct Linear {
  ad::Var weight;  // in x out
  ad::Var bias;    // 1 x out, undefined when bias-free

  Linear() = default;
  Linear(ParameterStore& store, Rng& rng, const std::string& name, int in, int out, bool with_bias = true,
         double std = 0.02) {
    weight = store.add(name + ".weight", init_normal(rng, in, out, std));
    if (with_bias) bias = store.add(name + ".bias", ad::Matrix::Zero(1, out));
  }

  ad::Var operator()(const ad::Var& x) const {
    auto y = ad::matmul(x, weight);
    return bias.defined() ? y + bias : y;
  }
};

struct LayerNorm {
  ad::Var gamma;
  ad::Var beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int dim) {
    gamma = store.add(name + ".gamma", ad::Matrix::Ones(1, dim));
    beta = store.add(name + ".beta", ad::Matrix::Zero(1, dim));
  }

  ad::Var operator()(const ad::Var& x) const { return ad::layer_norm_rows(x, gamma, beta); }
};

struct MultiHeadAttention {
  Linear q, k, v, out;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, Rng& rng, const std::string& name, int dim, int n_heads)
      : q(store, rng, name + ".q", dim, dim),
        k(store, rng, name + ".k", dim, dim),
        v(store, rng, name + ".v", dim, dim),
        out(store, rng, name + ".out", dim, dim),
        heads(n_heads) {}

  // `mask` is added to the attention logits (0 or a large negative number).
  ad::Var operator()(const ad::Var& query_in, const ad::Var& kv_in, const ad::Matrix* mask = nullptr) const {
    const auto qs = q(query_in);
    const auto ks = k(kv_in);
    const auto vs = v(kv_in);
    const ad::Index dh = qs.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> per_head;
    per_head.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto qh = ad::slice_cols(qs, h * dh, dh);
      auto kh = ad::slice_cols(ks, h * dh, dh);
      auto vh = ad::slice_cols(vs, h * dh, dh);
      auto logits = ad::matmul(qh, ad::transpose(kh)) * scale;
      if (mask) logits = logits + ad::constant(*mask);
      per_head.push_back(ad::matmul(ad::softmax_rows(logits), vh));
    }
    return out(heads == 1 ? per_head.front() : ad::concat_cols(per_head));
  }
};

struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParameterStore& store, Rng& rng, const std::string& name, int dim, int hidden)
      : fc1(store, rng, name + ".fc1", dim, hidden), fc2(store, rng, name + ".fc2", hidden, dim) {}

  ad::Var operator()(const ad::Var& x) const { return fc2(ad::gelu(fc1(x))); }
};

// Pre-norm self-attention block.
struct EncoderBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Mlp mlp;

  EncoderBlock(ParameterStore& store, Rng& rng, const std::string& name, int dim, int heads, int mlp_ratio)
      : ln1(store, name + ".ln1", dim),
        ln2(store, name + ".ln2", dim),
        attn(store, rng, name + ".attn", dim, heads),
        mlp(store, rng, name + ".mlp", dim, dim * mlp_ratio) {}

  ad::Var operator()(const ad::Var& x, const ad::Matrix* mask = nullptr) const {
    auto h = ln1(x);
    auto y = x + attn(h, h, mask);
    return y + mlp(ln2(y));
  }
};

// Pre-norm decoder block: self-attention among queries, cross-attention into
// the encoder memory, then the MLP.
struct DecoderBlock {
  LayerNorm ln_self, ln_cross, ln_mlp;
  MultiHeadAttention self_attn, cross_attn;
  Mlp mlp;

  DecoderBlock(ParameterStore& store, Rng& rng, const std::string& name, int dim, int heads, int mlp_ratio)
      : ln_self(store, name + ".ln_self", dim),
        ln_cross(store, name + ".ln_cross", dim),
        ln_mlp(store, name + ".ln_mlp", dim),
        self_attn(store, rng, name + ".self_attn", dim, heads),
        cross_attn(store, rng, name + ".cross_attn", dim, heads),
        mlp(store, rng, name + ".mlp", dim, dim * mlp_ratio) {}

  ad::Var operator()(const ad::Var& queries, const ad::Var& memory) const {
    auto h = ln_self(queries);
    auto x = queries + self_attn(h, h);
    x = x + cross_attn(ln_cross(x), memory);
    return x + mlp(ln_mlp(x));
  }
};

}  // namespace nn

struct DecoderOutputs {
  ad::Var regions;  // n_q x encoder_dim
  ad::Var image;    // 1 x encoder_dim
};

struct ModelOutputs {
  ad::Var image_embed;      // 1 x embed_dim, unit norm
  ad::Var region_embeds;    // n_q x embed_dim, unit rows
  ad::Var pred_boxes;       // n_q x 4 (cx, cy, w, h); undefined in eval mode
  ad::Var raw_image_query;  // 1 x encoder_dim, before projection

  bool has_boxes() const { return pred_boxes.defined(); }

  NormBox box(int q) const {
    const auto& b = pred_boxes.value();
    return {b(q, 0), b(q, 1), b(q, 2), b(q, 3)};
  }
  std::vector<NormBox> boxes() const {
    std::vector<NormBox> out;
    for (ad::Index q = 0; q < pred_boxes.rows(); ++q) out.push_back(box(static_cast<int>(q)));
    return out;
  }
};

enum class TextSource { kCaption, kDescription, kClassPrompt };

struct TextEmbedding {
  ad::Var vector;  // 1 x embed_dim, unit norm
  TextSource source = TextSource::kCaption;
};

struct ForwardResult {
  ModelOutputs image;
  TextEmbedding caption;
  std::vector<TextEmbedding> descriptions;
};

class GrainModel {
 public:
  explicit GrainModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(derive_seed(config_.init_seed, 0x6d6f64656cULL));
    const int d = config_.encoder_dim;
    const int n_tokens = config_.tokens_per_image();

    patch_embed_ = nn::Linear(store_, rng, "vision.patch_embed", config_.patch_values(), d);
    vision_pos_ = store_.add("vision.pos_embed", nn::init_normal(rng, n_tokens, d, 0.01));
    vision_ln_pre_ = nn::LayerNorm(store_, "vision.ln_pre", d);
    for (int l = 0; l < config_.encoder_layers; ++l)
      encoder_.emplace_back(store_, rng, "vision.blocks." + std::to_string(l), d, config_.heads, config_.mlp_ratio);
    vision_ln_post_ = nn::LayerNorm(store_, "vision.ln_post", d);

    queries_ = store_.add("decoder.queries", nn::init_normal(rng, config_.n_region_queries + 1, d, 0.02));
    for (int l = 0; l < config_.decoder_layers; ++l)
      decoder_.emplace_back(store_, rng, "decoder.blocks." + std::to_string(l), d, config_.heads, config_.mlp_ratio);
    decoder_ln_ = nn::LayerNorm(store_, "decoder.ln_out", d);

    box_fc1_ = nn::Linear(store_, rng, "box_head.fc1", d, d);
    box_fc2_ = nn::Linear(store_, rng, "box_head.fc2", d, 4);
    region_proj_ = nn::Linear(store_, rng, "proj.region", d, config_.embed_dim, false);
    image_proj_ = nn::Linear(store_, rng, "proj.image", d, config_.embed_dim, false);

    const int td = config_.text_dim;
    token_embed_ = store_.add("text.token_embed", nn::init_normal(rng, config_.vocab_size, td, 0.02));
    text_pos_ = store_.add("text.pos_embed", nn::init_normal(rng, config_.text_context_len, td, 0.01));
    for (int l = 0; l < config_.text_layers; ++l)
      text_blocks_.emplace_back(store_, rng, "text.blocks." + std::to_string(l), td, config_.heads, config_.mlp_ratio);
    text_ln_ = nn::LayerNorm(store_, "text.ln_final", td);
    text_proj_ = nn::Linear(store_, rng, "proj.text", td, config_.embed_dim, false);

    logit_scale_ = store_.add("logit_scale", ad::Matrix::Constant(1, 1, config_.logit_scale_init));
  }

  GrainModel(const GrainModel&) = delete;
  GrainModel& operator=(const GrainModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  // Learnable temperature, exponentiated.
  ad::Var logit_scale() const { return ad::exp(logit_scale_); }
  double logit_scale_value() const { return std::exp(logit_scale_.value()(0, 0)); }
  // Keeps exp(logit_scale) <= logit_scale_max; applied after each update.
  void clamp_logit_scale() {
    auto& v = logit_scale_.mutable_value()(0, 0);
    v = std::min(v, std::log(config_.logit_scale_max));
  }

  // Rows are patches in raster order; values scaled to [-1, 1].
  ad::Matrix patchify(const Image& image) const {
    const int s = config_.image_size;
    if (image.width != s || image.height != s)
      throw ShapeError("image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                       ", model expects " + std::to_string(s) + "x" + std::to_string(s));
    const int p = config_.patch_size;
    const int per_side = s / p;
    ad::Matrix patches(per_side * per_side, config_.patch_values());
    for (int py = 0; py < per_side; ++py)
      for (int px = 0; px < per_side; ++px) {
        int col = 0;
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            for (int c = 0; c < 3; ++c)
              patches(py * per_side + px, col++) = image.at(px * p + x, py * p + y, c) / 127.5 - 1.0;
      }
    return patches;
  }

  ad::Var encode_image_tokens(const Image& image) const {
    auto x = patch_embed_(ad::constant(patchify(image))) + vision_pos_;
    x = vision_ln_pre_(x);
    for (const auto& block : encoder_) x = block(x);
    return vision_ln_post_(x);
  }

  // Region queries occupy slots [0, n_q); the image query is slot n_q.
  DecoderOutputs decode_queries(const ad::Var& encoder_tokens) const {
    if (encoder_tokens.cols() != config_.encoder_dim) throw ShapeError("encoder token width mismatch");
    ad::Var x = queries_;
    for (const auto& block : decoder_) x = block(x, encoder_tokens);
    x = decoder_ln_(x);
    const int nq = config_.n_region_queries;
    return {ad::slice_rows(x, 0, nq), ad::slice_rows(x, nq, 1)};
  }

  // Shared 2-layer MLP, sigmoid into (cx, cy, w, h).
  ad::Var box_logits(const ad::Var& region_outputs) const { return box_fc2_(ad::relu(box_fc1_(region_outputs))); }
  ad::Var predict_boxes(const ad::Var& region_outputs) const { return ad::sigmoid(box_logits(region_outputs)); }

  ad::Var project_regions(const ad::Var& region_outputs) const {
    return ad::l2_normalize_rows(region_proj_(region_outputs));
  }
  ad::Var project_image(const ad::Var& image_output) const { return ad::l2_normalize_rows(image_proj_(image_output)); }

  ModelOutputs encode_image(const Image& image, Mode mode) const {
    const auto tokens = encode_image_tokens(image);
    const auto dec = decode_queries(tokens);
    ModelOutputs out;
    out.raw_image_query = dec.image;
    out.image_embed = project_image(dec.image);
    out.region_embeds = project_regions(dec.regions);
    if (mode == Mode::kTrain) out.pred_boxes = predict_boxes(dec.regions);
    return out;
  }

  // `ids` must hold exactly one end token and fit the context. Positions after
  // the end token cannot influence it under the causal mask and are skipped.
  TextEmbedding encode_text(const TokenIds& ids, int end_id, TextSource source = TextSource::kCaption) const {
    if (static_cast<int>(ids.size()) > config_.text_context_len)
      throw TokenizationError("token sequence of length " + std::to_string(ids.size()) + " exceeds context " +
                              std::to_string(config_.text_context_len));
    int end_pos = -1;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= config_.vocab_size) throw TokenizationError("token id out of vocabulary");
      if (ids[i] == end_id) {
        if (end_pos >= 0) throw TokenizationError("token sequence has more than one end token");
        end_pos = static_cast<int>(i);
      }
    }
    if (end_pos < 0) throw TokenizationError("token sequence has no end token");
    const int len = end_pos + 1;
    std::vector<ad::Index> rows(ids.begin(), ids.begin() + len);
    auto x = ad::gather_rows(token_embed_, rows) + ad::slice_rows(text_pos_, 0, len);
    const auto mask = causal_mask(len);
    for (const auto& block : text_blocks_) x = block(x, &mask);
    x = text_ln_(ad::slice_rows(x, len - 1, 1));
    return {ad::l2_normalize_rows(text_proj_(x)), source};
  }

  ForwardResult forward(const Image& image, const TokenIds& caption, const std::vector<TokenIds>& descriptions,
                        int end_id, Mode mode) const {
    ForwardResult r;
    r.image = encode_image(image, mode);
    r.caption = encode_text(caption, end_id, TextSource::kCaption);
    for (const auto& d : descriptions) r.descriptions.push_back(encode_text(d, end_id, TextSource::kDescription));
    return r;
  }

 private:
  static ad::Matrix causal_mask(int len) {
    ad::Matrix m = ad::Matrix::Zero(len, len);
    for (int i = 0; i < len; ++i)
      for (int j = i + 1; j < len; ++j) m(i, j) = -1e30;
    return m;
  }

  ModelConfig config_;
  ParameterStore store_;

  nn::Linear patch_embed_;
  ad::Var vision_pos_;
  nn::LayerNorm vision_ln_pre_;
  std::vector<nn::EncoderBlock> encoder_;
  nn::LayerNorm vision_ln_post_;

  ad::Var queries_;
  std::vector<nn::DecoderBlock> decoder_;
  nn::LayerNorm decoder_ln_;

  nn::Linear box_fc1_, box_fc2_;
  nn::Linear region_proj_, image_proj_;

  ad::Var token_embed_;
  ad::Var text_pos_;
  std::vector<nn::EncoderBlock> text_blocks_;
  nn::LayerNorm text_ln_;
  nn::Linear text_proj_;

  ad::Var logit_scale_;
};

}  // namespace grain
