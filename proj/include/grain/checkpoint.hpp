#pragma once

// Versioned checkpoint container.
//
// Layout: 8-byte magic "GRAINCKP", uint32 format version, uint64 header size,
// a JSON header (model config, tokenizer identifier and merge rules, array
// directory, free-form training state), then every array's values as
// little-endian float64 in directory order.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "grain/autodiff.hpp"
#include "grain/errors.hpp"
#include "grain/model.hpp"
#include "grain/tokenizer.hpp"

namespace grain {

inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'A', 'I', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using NamedArrays = std::vector<std::pair<std::string, ad::Matrix>>;

struct Checkpoint {
  ModelConfig model_config;
  std::string tokenizer_id;
  std::string tokenizer_merges;
  NamedArrays parameters;
  NamedArrays extra_arrays;  // optimizer moments and similar
  nlohmann::json state = nlohmann::json::object();

  BpeTokenizer tokenizer() const {
    auto tok = BpeTokenizer::from_string(tokenizer_merges, model_config.text_context_len);
    if (tok.identifier() != tokenizer_id) throw CheckpointError("tokenizer identifier does not match merge rules");
    return tok;
  }
};

inline Checkpoint snapshot(const GrainModel& model, const BpeTokenizer& tokenizer) {
  Checkpoint ck;
  ck.model_config = model.config();
  ck.tokenizer_id = tokenizer.identifier();
  ck.tokenizer_merges = tokenizer.serialize();
  for (const auto& [name, v] : model.parameters().entries()) ck.parameters.emplace_back(name, v.value());
  ck.state["logit_scale"] = model.logit_scale_value();
  return ck;
}

inline void restore_parameters(GrainModel& model, const NamedArrays& arrays) {
  auto& entries = model.parameters().entries();
  if (entries.size() != arrays.size()) throw CheckpointError("parameter count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, var] = entries[i];
    const auto& [saved_name, values] = arrays[i];
    if (name != saved_name) throw CheckpointError("parameter name mismatch: " + name + " vs " + saved_name);
    if (values.rows() != var.rows() || values.cols() != var.cols())
      throw CheckpointError("parameter shape mismatch for " + name);
    var.mutable_value() = values;
  }
}

inline std::unique_ptr<GrainModel> model_from_checkpoint(const Checkpoint& ck) {
  auto model = std::make_unique<GrainModel>(ck.model_config);
  restore_parameters(*model, ck.parameters);
  return model;
}

namespace checkpoint_detail {
inline nlohmann::json directory(const NamedArrays& arrays) {
  auto dir = nlohmann::json::array();
  for (const auto& [name, m] : arrays) dir.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  return dir;
}
}  // namespace checkpoint_detail

// Writes to a temporary sibling, then renames over the destination.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["model_config"] = ck.model_config;
  header["tokenizer"] = {{"identifier", ck.tokenizer_id}, {"merges", ck.tokenizer_merges}};
  header["parameters"] = checkpoint_detail::directory(ck.parameters);
  header["extra_arrays"] = checkpoint_detail::directory(ck.extra_arrays);
  header["state"] = ck.state;
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t size = text.size();
    out.write(reinterpret_cast<const char*>(&size), sizeof(size));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* arrays : {&ck.parameters, &ck.extra_arrays})
      for (const auto& [_, m] : *arrays)
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError(path + " is not a checkpoint");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  std::uint64_t size = 0;
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  if (!in || size > (1ULL << 32)) throw CheckpointError("corrupt checkpoint header");
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  if (!in) throw CheckpointError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  ck.model_config = header.at("model_config").get<ModelConfig>();
  ck.tokenizer_id = header.at("tokenizer").at("identifier").get<std::string>();
  ck.tokenizer_merges = header.at("tokenizer").at("merges").get<std::string>();
  ck.state = header.value("state", nlohmann::json::object());
  auto read_arrays = [&](const nlohmann::json& dir, NamedArrays& into) {
    for (const auto& entry : dir) {
      ad::Matrix m(entry.at("rows").get<ad::Index>(), entry.at("cols").get<ad::Index>());
      in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
      if (!in) throw CheckpointError("truncated checkpoint data");
      into.emplace_back(entry.at("name").get<std::string>(), std::move(m));
    }
  };
  read_arrays(header.at("parameters"), ck.parameters);
  read_arrays(header.at("extra_arrays"), ck.extra_arrays);
  return ck;
}

}  // namespace grain
