// Acceptance runner: one PASS/FAIL line per criterion. Criteria can be
// selected by number on the command line; the default runs all ten.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grain/annotation.hpp"
#include "grain/assignment.hpp"
#include "grain/box_geometry.hpp"
#include "grain/objectives.hpp"
#include "grain/synth.hpp"
#include "grain/training.hpp"
#include "grain/zeroshot.hpp"
#include "harness.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace grain;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Scratch {
 public:
  explicit Scratch(const std::string& name) : path_(fs::temp_directory_path() / ("grain-acceptance-" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

void check(Outcome& o, bool ok, const std::string& what) {
  if (!ok) {
    o.pass = false;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += what;
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome assignment_optimality() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Rng rng(1001);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(rng.index(7));
    const int m = static_cast<int>(rng.index(static_cast<std::size_t>(std::min(n, 5)) + 1));
    Eigen::MatrixXd c(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) c(i, j) = t % 3 == 0 ? std::floor(rng.uniform(0.0, 4.0)) : rng.uniform(0.0, 10.0);
    const auto a = hungarian(CostMatrix{c});
    double total = 0.0;
    std::set<int> used;
    for (const auto& [row, q] : a.pairs) {
      total += c(row, q);
      used.insert(q);
    }
    const bool ok = static_cast<int>(a.pairs.size()) == m && static_cast<int>(used.size()) == m &&
                    total == a.total_cost && a.total_cost == oracle::brute_force_min_cost(c);
    mismatches += !ok;
  }
  const double secs = seconds_since(t0);
  check(o, mismatches == 0, std::to_string(mismatches) + " mismatches");
  check(o, secs < 10.0, "took " + fmt(secs, 3) + " s");
  if (o.pass) o.detail = "1000 matrices exact, " + fmt(secs, 3) + " s";
  return o;
}

Outcome geometry_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Rng rng(2002);
  double worst = 0.0;
  auto grid = [](const NormBox& b) { return oracle::corners_of(b.cx, b.cy, b.w, b.h); };
  for (int i = 0; i < 200; ++i) {
    auto box = [&] {
      return NormBox{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.02, 1.0), rng.uniform(0.02, 1.0)};
    };
    const auto a = box(), b = box();
    worst = std::max(worst, std::abs(iou(a, b) - oracle::raster_iou(grid(a), grid(b))));
    worst = std::max(worst, std::abs(generalized_iou(a, b) - oracle::raster_giou(grid(a), grid(b))));
  }
  const double third = iou(NormBox{0.25, 0.25, 0.5, 0.5}, NormBox{0.5, 0.25, 0.5, 0.5});
  const double disjoint = generalized_iou(NormBox{0.05, 0.05, 0.1, 0.1}, NormBox{0.95, 0.95, 0.1, 0.1});
  const double secs = seconds_since(t0);
  check(o, worst <= 2e-3, "raster error " + fmt(worst));
  check(o, std::abs(third - 1.0 / 3.0) <= 1e-9, "iou example " + fmt(third, 12));
  check(o, std::abs(disjoint + 0.98) <= 1e-9, "giou example " + fmt(disjoint, 12));
  check(o, secs < 30.0, "took " + fmt(secs, 3) + " s");
  if (o.pass) o.detail = "max raster error " + fmt(worst, 3) + " over 200 pairs, " + fmt(secs, 3) + " s";
  return o;
}

Outcome loss_closed_forms() {
  Outcome o;
  const ad::Matrix one = ad::Matrix::Identity(1, 4);
  const ad::Matrix two = ad::Matrix::Identity(2, 4);
  const double ic = image_caption_loss(two, two, 1.0);
  const double rd = region_description_loss(two, two, 1.0);
  check(o, std::abs(ic - 0.31326) <= 1e-5, "l_ic " + fmt(ic, 10));
  check(o, std::abs(rd - 0.31326) <= 1e-5, "l_rd " + fmt(rd, 10));
  check(o, image_caption_loss(one, one, 1.0) == 0.0, "l_ic B=1 not zero");
  check(o, region_description_loss(one, one, 1.0) == 0.0, "l_rd single pair not zero");
  if (o.pass) o.detail = "l_ic " + fmt(ic, 8) + ", l_rd " + fmt(rd, 8) + ", single-pair cases 0";
  return o;
}

Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Scratch dir("gradcheck");
  auto setup = harness::grad_check_setup(dir.str(), 11);
  std::string summary;
  for (const auto term : {harness::LossTerm::kImageCaption, harness::LossTerm::kBox,
                          harness::LossTerm::kRegionDescription}) {
    const auto r = harness::grad_check(setup, term, 20, 5);
    const std::string name = harness::term_name(term);
    check(o, r.coords == 20, name + " checked " + std::to_string(r.coords) + " coordinates");
    check(o, r.max_rel_err < 1e-4, name + " rel err " + fmt(r.max_rel_err) + " at " + r.worst);
    summary += (summary.empty() ? "" : ", ") + name + " " + fmt(r.max_rel_err, 2);
  }
  const double secs = seconds_since(t0);
  check(o, secs < 120.0, "took " + fmt(secs, 3) + " s");
  if (o.pass) o.detail = "max rel err " + summary + ", " + fmt(secs, 3) + " s";
  return o;
}

Outcome overfit() {
  Outcome o;
  Scratch dir("overfit");
  const auto r = harness::overfit(dir.str());
  check(o, r.steps <= 200, std::to_string(r.steps) + " steps");
  check(o, r.reduction >= 0.9, "reduction " + fmt(r.reduction, 4));
  check(o, r.i2t_r1 == 1.0 && r.t2i_r1 == 1.0, "R@1 i2t " + fmt(r.i2t_r1) + " t2i " + fmt(r.t2i_r1));
  check(o, r.seconds <= 300.0, "took " + fmt(r.seconds, 4) + " s");
  const std::string summary = "l_total " + fmt(r.initial, 4) + " -> " + fmt(r.final_loss, 4) + " (" +
                              fmt(100.0 * r.reduction, 3) + "%) in " + std::to_string(r.steps) + " steps, R@1 i2t " +
                              fmt(r.i2t_r1) + " t2i " + fmt(r.t2i_r1) + ", " + fmt(r.seconds, 4) + " s";
  o.detail = o.pass ? summary : o.detail + " [" + summary + "]";
  return o;
}

Outcome ablation() {
  Outcome o;
  int wins = 0;
  std::string per_seed;
  for (int s = 0; s < 10; ++s) {
    Scratch dir("ablation-" + std::to_string(s));
    const auto r = harness::ablation_seed(s, dir.str());
    wins += r.full > r.no_rd;
    per_seed += (per_seed.empty() ? "" : " ") + fmt(r.full, 3) + "/" + fmt(r.no_rd, 3);
  }
  check(o, wins >= 8, std::to_string(wins) + "/10 wins");
  const std::string summary = std::to_string(wins) + "/10 seeds full > no-rd (full/no-rd: " + per_seed + ")";
  o.detail = o.pass ? summary : o.detail + " [" + summary + "]";
  return o;
}

Embeddings basis(int n, int dim) {
  Embeddings m = Embeddings::Zero(n, dim);
  for (int i = 0; i < n; ++i) m(i, i % dim) = 1.0;
  return m;
}

Embeddings unit_row(std::initializer_list<double> v) {
  Embeddings m(1, static_cast<ad::Index>(v.size()));
  ad::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return normalize_rows(m);
}

Outcome eval_exactness() {
  Outcome o;
  // Classification: seven of ten images point at their class.
  {
    std::vector<ClassPromptSet> sets{{"class0", {}}, {"class1", {}}, {"class2", {}}};
    const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
    Embeddings images(10, 3);
    for (int i = 0; i < 10; ++i) {
      const auto li = labels[static_cast<std::size_t>(i)];
      Embeddings row = Embeddings::Constant(1, 3, 0.2);
      row(0, i < 7 ? li : (li + 1) % 3) = 0.9;
      images.row(i) = normalize_rows(row).row(0);
    }
    const auto r = classify(images, basis(3, 3), labels, sets);
    check(o, r.report.top1 == 0.7, "classify top1 " + fmt(r.report.top1));
    check(o, r.predictions == std::vector<int>({0, 1, 2, 0, 1, 2, 0, 2, 0, 1}), "classify predictions");
  }
  // Attribute classification: identifying descriptions, and one shared by all.
  {
    std::map<std::string, Embeddings> table{
        {"d0", unit_row({1, 0, 0})}, {"d1", unit_row({0, 1, 0})}, {"d2", unit_row({0, 0, 1})}};
    const TextEncoder enc = [&](const std::string& t) {
      auto it = table.find(t);
      return it == table.end() ? unit_row({1, 1, 1}) : it->second;
    };
    const std::vector<ClassPromptSet> sets{{"a", {"d0"}}, {"b", {"d1"}}, {"c", {"d2"}}};
    const std::vector<int> labels{0, 1, 2, 2, 1};
    Embeddings images(5, 3);
    for (int i = 0; i < 5; ++i) images.row(i) = basis(3, 3).row(labels[static_cast<std::size_t>(i)]);
    const auto r = classify_by_attributes(images, sets, enc, labels);
    check(o, r.report.top1 == 1.0, "attrs top1 " + fmt(r.report.top1));
    const std::vector<ClassPromptSet> shared{{"a", {"same"}}, {"b", {"same"}}, {"c", {"same"}}, {"d", {"same"}}};
    const std::vector<int> four{0, 1, 2, 3};
    const Embeddings images4 = basis(4, 3);
    const auto s = classify_by_attributes(images4, shared, enc, four);
    check(o, s.predictions == std::vector<int>({0, 0, 0, 0}) && s.report.top1 == 0.25, "attrs shared description");
  }
  // Retrieval: twenty reversed pairs on the unit circle.
  {
    const int n = 20;
    Embeddings images(n, 2), texts(n, 2);
    std::vector<int> owner;
    for (int i = 0; i < n; ++i) {
      const double a = i * std::numbers::pi / 20.0;
      const double b = (n - 1 - i + 1.0 / 3.0) * std::numbers::pi / 20.0;
      images.row(i) << std::cos(a), std::sin(a);
      texts.row(i) << std::cos(b), std::sin(b);
      owner.push_back(i);
    }
    const auto r = retrieve(images, texts, owner);
    for (const char* d : {"i2t", "t2i"}) {
      const auto& rec = r.recall_by_direction.at(d);
      check(o, rec.at(1) == 0.0 && rec.at(5) == 0.1 && rec.at(10) == 0.25,
            std::string("retrieve ") + d + " " + fmt(rec.at(1)) + "/" + fmt(rec.at(5)) + "/" + fmt(rec.at(10)));
    }
  }
  // Vocabulary mapping: similarities {0.2, 0.6, 0.6, -0.1} pick entry 1.
  {
    std::map<std::string, Embeddings> table{{"answer", unit_row({1, 0, 0})},
                                            {"v0", unit_row({0.2, std::sqrt(0.96), 0})},
                                            {"v1", unit_row({0.6, 0.8, 0})},
                                            {"v2", unit_row({0.6, 0, 0.8})},
                                            {"v3", unit_row({-0.1, 0, std::sqrt(0.99)})}};
    const TextEncoder enc = [&](const std::string& t) { return table.at(t); };
    const std::vector<std::string> vocab{"v0", "v1", "v2", "v3"};
    const auto m = map_free_text_to_vocab("answer", vocab, enc);
    check(o, m.index == 1 && m.classname == "v1", "vocab mapping picked " + std::to_string(m.index));
  }
  if (o.pass) o.detail = "classify 0.7, attrs 1.0/0.25, reversed recall 0/0.1/0.25, vocab argmax 1";
  return o;
}

Outcome annotation_determinism() {
  Outcome o;
  const std::string data = std::string(GRAIN_TEST_DATA_DIR) + "/annotate";
  const auto samples = load_sample_manifest(data + "/manifest.jsonl");
  auto gen = MockGenerationClient::from_file(data + "/generation.json");
  auto det = MockDetectionClient::from_file(data + "/detection.json");
  Scratch dir("annotate");
  const auto no_sleep = [](double) {};
  auto run = [&](std::vector<ImageSample> input, const std::string& name, int workers) {
    AnnotateConfig c;
    c.workers = workers;
    const auto corpus = annotate_corpus(input, gen, det, c, Logger::silent(), no_sleep);
    const auto path = dir / (name + "/shard.jsonl");
    write_annotated_shard(path, corpus, c, gen, det);
    return read_file(path);
  };
  const auto first = run(samples, "a", 1);
  check(o, first == run(samples, "b", 1), "second run differs");
  auto reversed = samples;
  std::reverse(reversed.begin(), reversed.end());
  check(o, first == run(reversed, "c", 3), "reversed order differs");
  auto rotated = samples;
  std::rotate(rotated.begin(), rotated.begin() + 1, rotated.end());
  check(o, first == run(rotated, "d", 2), "rotated order differs");
  check(o, first == read_file(data + "/expected_shard.jsonl"), "shard differs from the expected fixture");

  // Two proposals at IoU 0.6, one disjoint, one below the floor.
  const NormBox a{0.25, 0.25, 0.5, 0.5}, b{0.375, 0.25, 0.5, 0.5}, c{0.8, 0.8, 0.2, 0.2}, d{0.85, 0.2, 0.1, 0.1};
  const double overlap = iou(a, b);
  const auto kept = nms_dedupe(filter_by_confidence({{a, 0.9, "q"}, {b, 0.8, "q"}, {c, 0.5, "q"}, {d, 0.2, "q"}}, 0.3), 0.5);
  check(o, std::abs(overlap - 0.6) < 1e-12, "fixture IoU " + fmt(overlap));
  check(o, kept.size() == 2 && kept[0].box == a && kept[1].box == c, "NMS kept " + std::to_string(kept.size()) + " boxes");
  if (o.pass) o.detail = "4 runs byte-identical and equal to the fixture; NMS kept the 0.9 and disjoint 0.5 boxes";
  return o;
}

Outcome shape_contract() {
  Outcome o;
  BpeTokenizer tok;
  ModelConfig c;
  c.vocab_size = tok.vocab_size();
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.text_layers = 0;
  GrainModel model(c);
  ad::NoGradGuard guard;
  const auto tokens = model.encode_image_tokens(Image(224, 224));
  const auto dec = model.decode_queries(tokens);
  const auto outputs = dec.regions.rows() + dec.image.rows();
  check(o, tokens.rows() == 196, "default tokens " + std::to_string(tokens.rows()));
  check(o, c.n_region_queries == 10 && outputs == 11, "decoder outputs " + std::to_string(outputs));

  auto tiny = ModelConfig::tiny();
  tiny.vocab_size = tok.vocab_size();
  GrainModel small(tiny);
  const auto t = small.encode_image_tokens(Image(tiny.image_size, tiny.image_size)).rows();
  const auto dt = small.decode_queries(small.encode_image_tokens(Image(tiny.image_size, tiny.image_size)));
  check(o, t == 16, "tiny tokens " + std::to_string(t));
  check(o, dt.regions.rows() + dt.image.rows() == tiny.n_region_queries + 1, "tiny decoder outputs");
  if (o.pass)
    o.detail = "224/16 -> 196 tokens, 11 decoder outputs; tiny -> 16 tokens, " +
               std::to_string(tiny.n_region_queries + 1) + " outputs";
  return o;
}

Outcome reproducibility() {
  Outcome o;
  Scratch dir("repro");
  SynthOptions s;
  s.n_images = 16;
  s.n_classes = 4;
  s.seed = 11;
  s.image_size = 32;
  const auto synth = synth_grounded_dataset(dir / "data", s);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  c.seed = 5;
  c.vocab_merges = 32;
  const auto a = fit({synth.shard_path}, c, dir / "run-a");
  const auto b = fit({synth.shard_path}, c, dir / "run-b");
  const auto la = harness::read_loss_log(dir / "run-a/loss_log.jsonl");
  const auto lb = harness::read_loss_log(dir / "run-b/loss_log.jsonl");
  double worst = 0.0;
  if (la.size() >= 10 && lb.size() >= 10) {
    for (const char* key : {"l_ic", "l_box", "l_rd", "l_total"})
      worst = std::max(worst, std::abs(la[9][key].get<double>() - lb[9][key].get<double>()));
  } else {
    check(o, false, "fewer than 10 logged steps");
  }
  check(o, worst <= 1e-6, "step-10 loss difference " + fmt(worst));
  check(o, read_file(a.final_checkpoint) == read_file(b.final_checkpoint), "final checkpoints differ");

  auto partial = c;
  partial.max_steps = 6;
  fit({synth.shard_path}, partial, dir / "resumed");
  const auto resumed = fit({synth.shard_path}, c, dir / "resumed");
  check(o, resumed.resumed, "run did not resume");
  check(o, resumed.parameter_digest == a.parameter_digest, "resumed digest differs");
  if (o.pass)
    o.detail = "step-10 losses equal, checkpoints byte-identical, resumed digest " + resumed.parameter_digest;
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "assignment optimality", assignment_optimality},
      {2, "geometry oracles", geometry_oracles},
      {3, "loss closed forms", loss_closed_forms},
      {4, "gradient checks", gradient_checks},
      {5, "overfit", overfit},
      {6, "ablation direction", ablation},
      {7, "eval exactness", eval_exactness},
      {8, "annotation determinism", annotation_determinism},
      {9, "shape contract", shape_contract},
      {10, "reproducibility", reproducibility},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
