// grain: single entry point for annotation, training, evaluation and data
// utilities. Every subcommand writes a run manifest.

#include <Eigen/Core>
#include <CLI11.hpp>
#include <glob.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "grain/annotation.hpp"
#include "grain/annotation_http.hpp"
#include "grain/checkpoint.hpp"
#include "grain/config.hpp"
#include "grain/shard.hpp"
#include "grain/synth.hpp"
#include "grain/training.hpp"
#include "grain/zeroshot.hpp"

namespace fs = std::filesystem;
using namespace grain;

namespace {

struct Common {
  std::string manifest;
  std::string log_file;
  std::string log_level = "info";
};

LogLevel parse_level(const std::string& s) {
  if (s == "debug") return LogLevel::kDebug;
  if (s == "info") return LogLevel::kInfo;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "error") return LogLevel::kError;
  throw ConfigError("unknown log level '" + s + "'");
}

Logger make_logger(const Common& c) {
  const auto level = parse_level(c.log_level);
  return c.log_file.empty() ? Logger(&std::cerr, level) : Logger::to_file(c.log_file, level);
}

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
  std::set<std::string> out;
  for (const auto& p : patterns) {
    glob_t g{};
    const int rc = ::glob(p.c_str(), 0, nullptr, &g);
    if (rc == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) out.insert(g.gl_pathv[i]);
    globfree(&g);
    if (rc == GLOB_NOMATCH) throw DataError("no shard matches '" + p + "'");
    if (rc != 0 && rc != GLOB_NOMATCH) throw DataError("cannot expand '" + p + "'");
  }
  return {out.begin(), out.end()};
}

KeyValues parse_sets(const std::vector<std::string>& sets) {
  KeyValues kv;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

std::string dataset_name(const std::string& dir) {
  auto p = fs::path(dir);
  if (p.filename().empty()) p = p.parent_path();
  return p.filename().string();
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each fills the manifest and returns the exit code.

struct AnnotateArgs {
  std::string input, out, config_file, client = "mock";
  std::string mock_generation, mock_detection, generation_url, detection_url;
  int timeout_s = 30;
  std::optional<double> conf_threshold, nms_iou;
  std::optional<int> retries, workers;
};

void run_annotate(const AnnotateArgs& a, RunManifest& m, const Logger& log) {
  ConfigSources src;
  src.file = load_config_file(a.config_file);
  if (a.conf_threshold) src.cli.emplace_back("conf_threshold", std::to_string(*a.conf_threshold));
  if (a.nms_iou) src.cli.emplace_back("nms_iou", std::to_string(*a.nms_iou));
  if (a.retries) src.cli.emplace_back("retries", std::to_string(*a.retries));
  if (a.workers) src.cli.emplace_back("workers", std::to_string(*a.workers));
  const auto config = resolve_annotate_config(src);

  std::unique_ptr<GenerationClient> gen;
  std::unique_ptr<DetectionClient> det;
  if (a.client == "mock") {
    if (a.mock_generation.empty() || a.mock_detection.empty())
      throw ConfigError("--client mock needs --mock-generation and --mock-detection");
    gen = std::make_unique<MockGenerationClient>(MockGenerationClient::from_file(a.mock_generation));
    det = std::make_unique<MockDetectionClient>(MockDetectionClient::from_file(a.mock_detection));
    m.add_input(a.mock_generation);
    m.add_input(a.mock_detection);
  } else if (a.client == "http") {
    if (a.generation_url.empty() || a.detection_url.empty())
      throw ConfigError("--client http needs --generation-url and --detection-url");
    gen = std::make_unique<HttpGenerationClient>(a.generation_url, a.timeout_s);
    det = std::make_unique<HttpDetectionClient>(a.detection_url, a.timeout_s);
  } else {
    throw ConfigError("unknown client '" + a.client + "' (expected mock or http)");
  }
  m.config = config;
  m.config["client"] = a.client;
  m.config["generation_client"] = gen->identifier();
  m.config["detection_client"] = det->identifier();
  m.add_input(a.input);

  const auto samples = load_sample_manifest(a.input);
  const auto corpus = annotate_corpus(samples, *gen, *det, config, log);
  if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_annotated_shard(a.out, corpus, config, *gen, *det);
  log.info("annotate_done", {{"records", corpus.records.size()}, {"skipped", corpus.skipped.size()},
                             {"flagged", corpus.flagged.size()}});
  m.add_output(a.out);
  m.add_output(sidecar_path(a.out));
}

struct TrainArgs {
  std::vector<std::string> shards;
  std::string config_file, out, preset;
  bool no_rd = false, no_box = false, no_mllm = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size;
  std::vector<std::string> sets;
};

void run_train(const TrainArgs& a, RunManifest& m, const Logger& log) {
  ConfigSources src;
  src.file = load_config_file(a.config_file);
  src.env = env_overrides();
  if (!a.preset.empty()) src.cli.emplace_back("preset", a.preset);
  if (a.no_rd) src.cli.emplace_back("use_rd_loss", "false");
  if (a.no_box) src.cli.emplace_back("use_box_loss", "false");
  if (a.no_mllm) src.cli.emplace_back("use_mllm_caption", "false");
  if (a.seed) src.cli.emplace_back("seed", std::to_string(*a.seed));
  if (a.epochs) src.cli.emplace_back("epochs", std::to_string(*a.epochs));
  if (a.batch_size) src.cli.emplace_back("batch_size", std::to_string(*a.batch_size));
  for (auto& kv : parse_sets(a.sets)) src.cli.push_back(std::move(kv));
  const auto config = resolve_train_config(src);
  m.config = config;
  m.seed = config.seed;

  const auto shards = expand_globs(a.shards);
  for (const auto& s : shards) m.add_input(s);
  if (!a.config_file.empty()) m.add_input(a.config_file);
  const auto r = fit(shards, config, a.out, log);
  log.info("train_done", {{"steps_run", r.steps_run}, {"global_step", r.global_step}, {"completed", r.completed},
                          {"resumed", r.resumed}, {"parameter_digest", r.parameter_digest}});
  if (!r.final_checkpoint.empty()) m.add_output(r.final_checkpoint);
  m.add_output((fs::path(a.out) / "loss_log.jsonl").string());
}

struct EvalArgs {
  std::string task, checkpoint, data, descriptions, out;
  std::string with_description = PromptTemplates{}.with_description;
  std::string classname_only = PromptTemplates{}.classname_only;
};

void run_eval(const EvalArgs& a, RunManifest& m, const Logger& log) {
  m.config = {{"task", a.task},
              {"with_description_template", a.with_description},
              {"classname_only_template", a.classname_only}};
  m.add_input(a.checkpoint);
  m.add_input(a.data);
  const auto ck = load_checkpoint(a.checkpoint);
  const auto tok = ck.tokenizer();
  const auto model = model_from_checkpoint(ck);
  const auto encode = model_text_encoder(*model, tok);
  const auto items = load_eval_index(a.data);
  const auto images = load_eval_images(items, ck.model_config.image_size);

  std::vector<ClassPromptSet> sets;
  if (a.task != "retrieve") {
    if (a.descriptions.empty()) throw ConfigError("eval " + a.task + " needs --descriptions");
    sets = load_prompt_sets(a.descriptions);
    m.add_input(a.descriptions);
  }

  MetricReport report;
  if (a.task == "classify") {
    const auto labels = label_indices(items, sets);
    const auto classifier = build_classifier(sets, encode, {a.with_description, a.classname_only});
    report = classify(embed_images(*model, images), classifier, labels, sets).report;
  } else if (a.task == "attrs") {
    const auto labels = label_indices(items, sets);
    report = classify_by_attributes(embed_images(*model, images), sets, encode, labels).report;
  } else if (a.task == "retrieve") {
    std::vector<std::string> texts;
    std::vector<int> owner;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].captions.empty()) throw DataError("image " + items[i].image_id + " has no captions");
      for (const auto& c : items[i].captions) {
        texts.push_back(c);
        owner.push_back(static_cast<int>(i));
      }
    }
    report = retrieve(embed_images(*model, images), embed_texts(texts, encode), owner);
  } else if (a.task == "ground") {
    const auto labels = label_indices(items, sets);
    const auto pred = match_descriptions_to_regions(*model, images, sets, encode);
    report = accuracy_report(pred, labels, sets, "ground");
  } else {
    throw ConfigError("unknown eval task '" + a.task + "'");
  }
  report.dataset = dataset_name(a.data);
  if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream(a.out, std::ios::trunc) << report.to_json().dump(2) << '\n';
  log.info("eval_done", {{"task", a.task}, {"num_samples", report.num_samples}});
  m.add_output(a.out);
}

struct GroundArgs {
  std::string checkpoint, data, descriptions, out;
};

// Descriptions per image come from its labelled class; unlabelled images
// are grounded against every description in the file.
void run_ground(const GroundArgs& a, RunManifest& m, const Logger& log) {
  m.add_input(a.checkpoint);
  m.add_input(a.data);
  m.add_input(a.descriptions);
  const auto ck = load_checkpoint(a.checkpoint);
  const auto tok = ck.tokenizer();
  const auto model = model_from_checkpoint(ck);
  const auto items = load_eval_index(a.data);
  const auto images = load_eval_images(items, ck.model_config.image_size);
  const auto sets = load_prompt_sets(a.descriptions);
  std::vector<std::string> all;
  for (const auto& s : sets) all.insert(all.end(), s.descriptions.begin(), s.descriptions.end());

  std::vector<GroundingInput> inputs;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::vector<std::string> d = all;
    for (const auto& s : sets)
      if (s.classname == items[i].label) d = s.descriptions;
    inputs.push_back({items[i].image_id, images[i], d});
  }
  if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  dump_groundings(*model, inputs, model_text_encoder(*model, tok), a.out);
  log.info("ground_done", {{"images", inputs.size()}});
  m.add_output(a.out);
}

void run_synth(const SynthOptions& o, const std::string& out, RunManifest& m, const Logger& log) {
  m.config = {{"n_images", o.n_images}, {"n_classes", o.n_classes}, {"seed", o.seed},
              {"image_size", o.image_size}, {"shape_fraction", o.shape_fraction}, {"id_prefix", o.id_prefix}};
  m.seed = o.seed;
  const auto r = synth_grounded_dataset(out, o);
  log.info("synth_done", {{"records", r.records.size()}, {"shard", r.shard_path}});
  m.add_output(r.shard_path);
  m.add_output(sidecar_path(r.shard_path));
  m.add_output((fs::path(out) / "images").string());
  m.add_output((fs::path(out) / "index.jsonl").string());
  m.add_output((fs::path(out) / "descriptions.json").string());
}

void run_inspect(const std::string& shard, const std::string& out, RunManifest& m) {
  m.add_input(shard);
  const auto summary = inspect_shard(shard).to_json();
  if (out.empty()) {
    std::cout << summary.dump(2) << '\n';
  } else {
    if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
    std::ofstream(out, std::ios::trunc) << summary.dump(2) << '\n';
    m.add_output(out);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grain: grounded vision-language pretraining"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Common common;
  app.add_option("--manifest", common.manifest, "Run manifest path (default depends on the subcommand)");
  app.add_option("--log", common.log_file, "Append JSON Lines logs to this file instead of stderr");
  app.add_option("--log-level", common.log_level, "debug, info, warn or error");

  AnnotateArgs ann;
  auto* annotate = app.add_subcommand("annotate", "Annotate images with descriptions, boxes and captions");
  annotate->add_option("--input", ann.input, "JSONL sample manifest {image_id, image, caption}")->required();
  annotate->add_option("--out", ann.out, "Output shard path")->required();
  annotate->add_option("--config", ann.config_file, "JSON config file");
  annotate->add_option("--conf-threshold", ann.conf_threshold, "Detector confidence floor");
  annotate->add_option("--nms-iou", ann.nms_iou, "NMS IoU threshold");
  annotate->add_option("--retries", ann.retries, "Retries per client call");
  annotate->add_option("--workers", ann.workers, "Worker threads");
  annotate->add_option("--client", ann.client, "mock or http");
  annotate->add_option("--mock-generation", ann.mock_generation, "Generation fixture table (mock client)");
  annotate->add_option("--mock-detection", ann.mock_detection, "Detection fixture table (mock client)");
  annotate->add_option("--generation-url", ann.generation_url, "Generation service base URL (http client)");
  annotate->add_option("--detection-url", ann.detection_url, "Detection service base URL (http client)");
  annotate->add_option("--timeout", ann.timeout_s, "HTTP timeout in seconds");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a model on annotated shards");
  train->add_option("--shards", tr.shards, "Shard paths or glob patterns")->required();
  train->add_option("--config", tr.config_file, "JSON config file");
  train->add_option("--out", tr.out, "Run directory (checkpoints, loss log)")->required();
  train->add_option("--preset", tr.preset, "tiny or base");
  train->add_flag("--no-rd-loss", tr.no_rd, "Disable the region-description loss");
  train->add_flag("--no-box-loss", tr.no_box, "Disable the box loss");
  train->add_flag("--no-mllm-caption", tr.no_mllm, "Always use the original caption");
  train->add_option("--seed", tr.seed, "Random seed");
  train->add_option("--epochs", tr.epochs, "Epochs");
  train->add_option("--batch-size", tr.batch_size, "Batch size");
  train->add_option("--set", tr.sets, "Override any config key: key=value (dotted paths for nested keys)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Zero-shot evaluation");
  eval->add_option("task", ev.task, "classify, attrs, retrieve or ground")
      ->required()
      ->check(CLI::IsMember({"classify", "attrs", "retrieve", "ground"}));
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", ev.data, "Directory with index.jsonl")->required();
  eval->add_option("--descriptions", ev.descriptions, "JSON classname -> [descriptions]");
  eval->add_option("--out", ev.out, "Report path")->required();
  eval->add_option("--template", ev.with_description, "Prompt for a class with a description");
  eval->add_option("--name-template", ev.classname_only, "Prompt for a class without descriptions");

  GroundArgs gr;
  auto* ground = app.add_subcommand("ground", "Dump predicted boxes and description matches");
  ground->add_option("--checkpoint", gr.checkpoint, "Checkpoint file")->required();
  ground->add_option("--data", gr.data, "Directory with index.jsonl")->required();
  ground->add_option("--descriptions", gr.descriptions, "JSON classname -> [descriptions]")->required();
  ground->add_option("--out", gr.out, "Output JSONL path")->required();

  SynthOptions so;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic grounded dataset");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n-images", so.n_images, "Number of images");
  synth->add_option("--n-classes", so.n_classes, "Number of classes");
  synth->add_option("--seed", so.seed, "Random seed");
  synth->add_option("--image-size", so.image_size, "Image side in pixels");
  synth->add_option("--shape-fraction", so.shape_fraction, "Shape side as a fraction of the image");
  synth->add_option("--prefix", so.id_prefix, "Image id prefix");

  std::string inspect_path, inspect_out;
  auto* inspect = app.add_subcommand("inspect-shard", "Summarize and validate a shard");
  inspect->add_option("shard", inspect_path, "Shard path")->required();
  inspect->add_option("--out", inspect_out, "Write the summary here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  RunManifest m;
  m.argv.assign(argv, argv + argc);
  m.started_at = utc_timestamp();
  std::string manifest_path = common.manifest;
  auto default_manifest = [&](const std::string& p) {
    if (manifest_path.empty()) manifest_path = p;
  };

  int code = 0;
  try {
    const auto log = make_logger(common);
    if (annotate->parsed()) {
      m.command = "annotate";
      default_manifest(ann.out + ".manifest.json");
      run_annotate(ann, m, log);
    } else if (train->parsed()) {
      m.command = "train";
      default_manifest((fs::path(tr.out) / "manifest.json").string());
      run_train(tr, m, log);
    } else if (eval->parsed()) {
      m.command = "eval " + ev.task;
      default_manifest(ev.out + ".manifest.json");
      run_eval(ev, m, log);
    } else if (ground->parsed()) {
      m.command = "ground";
      default_manifest(gr.out + ".manifest.json");
      run_ground(gr, m, log);
    } else if (synth->parsed()) {
      m.command = "synth";
      default_manifest((fs::path(synth_out) / "manifest.json").string());
      run_synth(so, synth_out, m, log);
    } else if (inspect->parsed()) {
      m.command = "inspect-shard";
      default_manifest((inspect_out.empty() ? inspect_path + ".inspect" : inspect_out) + ".manifest.json");
      run_inspect(inspect_path, inspect_out, m);
    }
  } catch (const GrainError& e) {
    code = static_cast<int>(e.code());
    m.error = e.what();
  } catch (const std::exception& e) {
    code = static_cast<int>(ExitCode::kRuntime);
    m.error = e.what();
  }
  if (!m.error.empty()) std::cerr << "grain " << m.command << ": " << m.error << '\n';

  m.exit_code = code;
  m.finished_at = utc_timestamp();
  if (!manifest_path.empty()) {
    try {
      m.write(manifest_path);
    } catch (const std::exception& e) {
      std::cerr << "grain: cannot write manifest: " << e.what() << '\n';
      if (code == 0) code = static_cast<int>(ExitCode::kData);
    }
  }
  return code;
}
