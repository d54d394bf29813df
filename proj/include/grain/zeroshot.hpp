#pragma once

// Zero-shot evaluation: description-enriched class prompts, attribute-only
// classification, image-text retrieval with Recall@k, free-text to vocabulary
// mapping, region/description grounding dumps.
//
// Scoring functions work on embedding matrices so they can be checked
// against hand-built fixtures; model-backed helpers produce those matrices.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "grain/autodiff.hpp"
#include "grain/errors.hpp"
#include "grain/image.hpp"
#include "grain/model.hpp"
#include "grain/tokenizer.hpp"

namespace grain {

using Embeddings = ad::Matrix;  // one unit-norm row per item

// Text -> 1 x E unit-norm row.
using TextEncoder = std::function<Embeddings(const std::string&)>;

inline TextEncoder model_text_encoder(const GrainModel& model, const BpeTokenizer& tokenizer) {
  return [&model, &tokenizer](const std::string& text) {
    ad::NoGradGuard guard;
    return model.encode_text(tokenizer.encode(text, Overflow::kTruncate).ids, tokenizer.end_id(),
                             TextSource::kClassPrompt)
        .vector.value();
  };
}

struct ClassPromptSet {
  std::string classname;
  std::vector<std::string> descriptions;
};

struct PromptTemplates {
  std::string with_description = "{classname}, which {description}";
  std::string classname_only = "a photo of a {classname}.";
};

inline std::string fill_template(std::string pattern, const std::string& classname, const std::string& description = "") {
  auto replace_all = [&pattern](const std::string& key, const std::string& value) {
    for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key, pos + value.size()))
      pattern.replace(pos, key.size(), value);
  };
  replace_all("{classname}", classname);
  replace_all("{description}", description);
  return pattern;
}

// Descriptions file: JSON object classname -> array of strings. Key order is
// kept as the class order.
inline std::vector<ClassPromptSet> load_prompt_sets(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open descriptions file " + path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed descriptions file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("descriptions file must map class names to lists");
  std::vector<ClassPromptSet> sets;
  for (const auto& [name, list] : j.items()) {
    if (!list.is_array()) throw ConfigError("descriptions for '" + name + "' must be an array");
    ClassPromptSet s{name, {}};
    for (const auto& d : list) {
      if (!d.is_string()) throw ConfigError("descriptions for '" + name + "' must be strings");
      s.descriptions.push_back(d.get<std::string>());
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

inline Embeddings normalize_rows(Embeddings m) {
  for (ad::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NormalizationError("cannot normalize a zero or non-finite row");
    m.row(r) /= n;
  }
  return m;
}

// Prompts encoded for one class: the templated class name followed by one
// "{classname}, which {description}" per distinct description.
inline std::vector<std::string> class_prompts(const ClassPromptSet& set, const PromptTemplates& t = {}) {
  std::vector<std::string> prompts{fill_template(t.classname_only, set.classname)};
  for (const auto& d : set.descriptions) {
    auto p = fill_template(t.with_description, set.classname, d);
    if (std::find(prompts.begin(), prompts.end(), p) == prompts.end()) prompts.push_back(std::move(p));
  }
  return prompts;
}

// C x E classifier: per class, the mean of its unit prompt embeddings,
// re-normalized.
inline Embeddings build_classifier(std::span<const ClassPromptSet> sets, const TextEncoder& encode,
                                   const PromptTemplates& templates = {}) {
  if (sets.empty()) throw ConfigError("no classes to build a classifier from");
  Embeddings out;
  for (std::size_t c = 0; c < sets.size(); ++c) {
    Embeddings sum;
    const auto prompts = class_prompts(sets[c], templates);
    for (const auto& p : prompts) {
      const auto e = encode(p);
      sum = sum.size() == 0 ? e : Embeddings(sum + e);
    }
    sum /= static_cast<double>(prompts.size());
    if (out.size() == 0) out.resize(static_cast<ad::Index>(sets.size()), sum.cols());
    out.row(static_cast<ad::Index>(c)) = sum.row(0);
  }
  return normalize_rows(out);
}

// Index of the largest value; the lowest index wins ties.
template <typename Row>
inline int argmax_lowest(const Row& row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j)
    if (row(j) > row(best)) best = j;
  return best;
}

struct MetricReport {
  std::string dataset;
  std::string task;
  double top1 = 0.0;
  std::map<int, double> recall_at;              // single-direction tasks
  std::map<std::string, std::map<int, double>> recall_by_direction;  // "i2t", "t2i"
  std::map<std::string, double> per_class;
  std::size_t num_samples = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["dataset"] = dataset;
    j["task"] = task;
    j["num_samples"] = num_samples;
    if (task == "classify" || task == "attrs" || task == "ground") {
      j["top1"] = top1;
      j["per_class"] = per_class;
    }
    auto recall_json = [](const std::map<int, double>& m) {
      nlohmann::ordered_json r = nlohmann::ordered_json::object();
      for (const auto& [k, v] : m) r[std::to_string(k)] = v;
      return r;
    };
    if (!recall_at.empty()) j["recall_at"] = recall_json(recall_at);
    for (const auto& [dir, m] : recall_by_direction) j["recall_at_" + dir] = recall_json(m);
    return j;
  }
};

struct Classification {
  std::vector<int> predictions;
  MetricReport report;
};

inline MetricReport accuracy_report(std::span<const int> predictions, std::span<const int> labels,
                                    std::span<const ClassPromptSet> sets, const std::string& task) {
  MetricReport r;
  r.task = task;
  r.num_samples = labels.size();
  std::vector<std::size_t> hits(sets.size(), 0), totals(sets.size(), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++totals[y];
    if (predictions[i] == labels[i]) {
      ++correct;
      ++hits[y];
    }
  }
  r.top1 = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  for (std::size_t c = 0; c < sets.size(); ++c)
    if (totals[c] > 0) r.per_class[sets[c].classname] = static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
  return r;
}

inline void check_labels(std::span<const int> labels, std::size_t n_images, std::size_t n_classes) {
  if (labels.size() != n_images) throw ShapeError("one label per image is required");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) throw ShapeError("label outside the class list");
}

// Argmax of image_embeds x classifier^T per row.
inline Classification classify(const Embeddings& image_embeds, const Embeddings& classifier,
                               std::span<const int> labels, std::span<const ClassPromptSet> sets) {
  if (image_embeds.cols() != classifier.cols()) throw ShapeError("embedding width mismatch");
  check_labels(labels, static_cast<std::size_t>(image_embeds.rows()), static_cast<std::size_t>(classifier.rows()));
  const Embeddings scores = image_embeds * classifier.transpose();
  Classification out;
  for (ad::Index i = 0; i < scores.rows(); ++i) out.predictions.push_back(argmax_lowest(scores.row(i)));
  out.report = accuracy_report(out.predictions, labels, sets, "classify");
  return out;
}

struct AttributeClassification {
  std::vector<int> predictions;
  MetricReport report;
  std::vector<std::vector<std::string>> prompts;  // exactly what was encoded, per class
};

// Description text only, never the class name. A class scores the mean
// similarity over its description embeddings.
inline AttributeClassification classify_by_attributes(const Embeddings& image_embeds,
                                                      std::span<const ClassPromptSet> sets,
                                                      const TextEncoder& encode, std::span<const int> labels) {
  check_labels(labels, static_cast<std::size_t>(image_embeds.rows()), sets.size());
  AttributeClassification out;
  Embeddings scores(image_embeds.rows(), static_cast<ad::Index>(sets.size()));
  for (std::size_t c = 0; c < sets.size(); ++c) {
    if (sets[c].descriptions.empty())
      throw ConfigError("class '" + sets[c].classname + "' has no descriptions for attribute-only classification");
    out.prompts.push_back(sets[c].descriptions);
    Eigen::VectorXd total = Eigen::VectorXd::Zero(image_embeds.rows());
    for (const auto& d : sets[c].descriptions) {
      const auto e = encode(d);
      if (e.cols() != image_embeds.cols()) throw ShapeError("embedding width mismatch");
      total += image_embeds * e.row(0).transpose();
    }
    scores.col(static_cast<ad::Index>(c)) = total / static_cast<double>(sets[c].descriptions.size());
  }
  for (ad::Index i = 0; i < scores.rows(); ++i) out.predictions.push_back(argmax_lowest(scores.row(i)));
  out.report = accuracy_report(out.predictions, labels, sets, "attrs");
  return out;
}

// Rank of the first relevant item among candidates sorted by descending
// score, ties broken by lower index. Returns a 0-based rank.
inline std::size_t first_relevant_rank(const Eigen::VectorXd& scores, const std::function<bool(ad::Index)>& relevant) {
  std::vector<ad::Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), ad::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](ad::Index a, ad::Index b) { return scores(a) > scores(b); });
  for (std::size_t r = 0; r < order.size(); ++r)
    if (relevant(order[r])) return r;
  return order.size();
}

inline std::map<int, double> recall_from_ranks(const std::vector<std::size_t>& ranks, std::span<const int> ks) {
  std::map<int, double> out;
  for (int k : ks) {
    std::size_t hits = 0;
    for (auto r : ranks) hits += r < static_cast<std::size_t>(k);
    out[k] = ranks.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(ranks.size());
  }
  return out;
}

// Image i matches every text t with text_owner[t] == i.
inline MetricReport retrieve(const Embeddings& image_embeds, const Embeddings& text_embeds,
                             std::span<const int> text_owner, std::span<const int> ks = std::array{1, 5, 10}) {
  if (image_embeds.cols() != text_embeds.cols()) throw ShapeError("embedding width mismatch");
  if (static_cast<ad::Index>(text_owner.size()) != text_embeds.rows())
    throw ShapeError("one owner index per text is required");
  for (int o : text_owner)
    if (o < 0 || o >= image_embeds.rows()) throw ShapeError("text owner outside the image list");
  const Embeddings sim = image_embeds * text_embeds.transpose();
  std::vector<std::size_t> i2t, t2i;
  for (ad::Index i = 0; i < sim.rows(); ++i) {
    const Eigen::VectorXd row = sim.row(i).transpose();
    i2t.push_back(first_relevant_rank(row, [&](ad::Index t) { return text_owner[static_cast<std::size_t>(t)] == i; }));
  }
  for (ad::Index t = 0; t < sim.cols(); ++t) {
    const Eigen::VectorXd col = sim.col(t);
    const int owner = text_owner[static_cast<std::size_t>(t)];
    t2i.push_back(first_relevant_rank(col, [&](ad::Index i) { return i == owner; }));
  }
  MetricReport r;
  r.task = "retrieve";
  r.num_samples = static_cast<std::size_t>(image_embeds.rows());
  r.recall_by_direction["i2t"] = recall_from_ranks(i2t, ks);
  r.recall_by_direction["t2i"] = recall_from_ranks(t2i, ks);
  return r;
}

struct VocabMatch {
  int index = 0;
  std::string classname;
  bool flagged = false;  // set for an empty answer
};

inline VocabMatch map_free_text_to_vocab(const std::string& answer, std::span<const std::string> vocabulary,
                                         const TextEncoder& encode) {
  if (vocabulary.empty()) throw ConfigError("vocabulary is empty");
  const auto a = encode(answer);
  Eigen::VectorXd scores(static_cast<ad::Index>(vocabulary.size()));
  for (std::size_t v = 0; v < vocabulary.size(); ++v) scores(static_cast<ad::Index>(v)) = a.row(0).dot(encode(vocabulary[v]).row(0));
  VocabMatch m;
  m.index = argmax_lowest(scores);
  m.classname = vocabulary[static_cast<std::size_t>(m.index)];
  m.flagged = answer.find_first_not_of(" \t\r\n") == std::string::npos;
  return m;
}

// ---------------------------------------------------------------------------
// Model-backed helpers

inline Embeddings embed_images(const GrainModel& model, std::span<const Image> images) {
  ad::NoGradGuard guard;
  Embeddings out(static_cast<ad::Index>(images.size()), model.config().embed_dim);
  for (std::size_t i = 0; i < images.size(); ++i)
    out.row(static_cast<ad::Index>(i)) = model.encode_image(images[i], Mode::kEval).image_embed.value().row(0);
  return out;
}

inline Embeddings embed_texts(std::span<const std::string> texts, const TextEncoder& encode) {
  Embeddings out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto e = encode(texts[i]);
    if (out.size() == 0) out.resize(static_cast<ad::Index>(texts.size()), e.cols());
    out.row(static_cast<ad::Index>(i)) = e.row(0);
  }
  return out;
}

// Per image, every class scores the mean over its descriptions of the best
// region-description similarity; returns the argmax class per image.
inline std::vector<int> match_descriptions_to_regions(const GrainModel& model, std::span<const Image> images,
                                                      std::span<const ClassPromptSet> sets, const TextEncoder& encode) {
  std::vector<Embeddings> class_texts;
  for (const auto& s : sets) {
    if (s.descriptions.empty()) throw ConfigError("class '" + s.classname + "' has no descriptions");
    std::vector<std::string> d(s.descriptions.begin(), s.descriptions.end());
    class_texts.push_back(embed_texts(d, encode));
  }
  ad::NoGradGuard guard;
  std::vector<int> predictions;
  for (const auto& img : images) {
    const auto regions = model.encode_image(img, Mode::kEval).region_embeds.value();
    Eigen::VectorXd scores(static_cast<ad::Index>(sets.size()));
    for (std::size_t c = 0; c < sets.size(); ++c) {
      const Embeddings sim = regions * class_texts[c].transpose();
      scores(static_cast<ad::Index>(c)) = sim.colwise().maxCoeff().mean();
    }
    predictions.push_back(argmax_lowest(scores));
  }
  return predictions;
}

// One JSON object per image: predicted boxes and, per description, the
// best-matching region with its similarity.
inline nlohmann::ordered_json grounding_for_image(const GrainModel& model, const Image& image,
                                                  const std::vector<std::string>& descriptions,
                                                  const TextEncoder& encode) {
  ad::NoGradGuard guard;
  const auto out = model.encode_image(image, Mode::kTrain);
  nlohmann::ordered_json j;
  auto boxes = nlohmann::ordered_json::array();
  for (const auto& b : out.boxes()) boxes.push_back({b.cx, b.cy, b.w, b.h});
  j["boxes"] = std::move(boxes);
  auto matches = nlohmann::ordered_json::array();
  const auto& regions = out.region_embeds.value();
  for (const auto& d : descriptions) {
    const auto e = encode(d);
    const Eigen::VectorXd sim = regions * e.row(0).transpose();
    const int q = argmax_lowest(sim);
    nlohmann::ordered_json m;
    m["description"] = d;
    m["region"] = q;
    m["similarity"] = sim(q);
    m["box"] = j["boxes"][static_cast<std::size_t>(q)];
    matches.push_back(std::move(m));
  }
  j["matches"] = std::move(matches);
  return j;
}

struct GroundingInput {
  std::string image_id;
  Image image;
  std::vector<std::string> descriptions;
};

inline void dump_groundings(const GrainModel& model, std::span<const GroundingInput> inputs, const TextEncoder& encode,
                            const std::string& out_path) {
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + out_path);
  for (const auto& in : inputs) {
    nlohmann::ordered_json j;
    j["image_id"] = in.image_id;
    const auto g = grounding_for_image(model, in.image, in.descriptions, encode);
    j["boxes"] = g["boxes"];
    j["matches"] = g["matches"];
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Evaluation data directories: <dir>/index.jsonl with {"image", "label"?,
// "captions"?} per line, image paths relative to <dir>.

struct EvalItem {
  std::string image_id;
  std::string image_path;
  std::string label;
  std::vector<std::string> captions;
};

inline std::vector<EvalItem> load_eval_index(const std::string& dir) {
  const auto index = std::filesystem::path(dir) / "index.jsonl";
  std::ifstream in(index);
  if (!in) throw DataError("cannot open " + index.string());
  std::vector<EvalItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(line_no, e.what());
    }
    if (!j.contains("image") || !j["image"].is_string()) throw SchemaError(line_no, "missing string field 'image'");
    EvalItem it;
    it.image_path = (std::filesystem::path(dir) / j["image"].get<std::string>()).string();
    it.image_id = j.value("id", std::filesystem::path(it.image_path).stem().string());
    it.label = j.value("label", std::string());
    if (j.contains("captions")) it.captions = j["captions"].get<std::vector<std::string>>();
    items.push_back(std::move(it));
  }
  return items;
}

inline std::vector<Image> load_eval_images(std::span<const EvalItem> items, int size) {
  std::vector<Image> images;
  for (const auto& it : items) images.push_back(resize_bilinear(read_ppm(it.image_path), size, size));
  return images;
}

inline std::vector<int> label_indices(std::span<const EvalItem> items, std::span<const ClassPromptSet> sets) {
  std::map<std::string, int> index;
  for (std::size_t c = 0; c < sets.size(); ++c) index[sets[c].classname] = static_cast<int>(c);
  std::vector<int> labels;
  for (const auto& it : items) {
    auto f = index.find(it.label);
    if (f == index.end()) throw DataError("label '" + it.label + "' of " + it.image_id + " is not in the class list");
    labels.push_back(f->second);
  }
  return labels;
}

}  // namespace grain
