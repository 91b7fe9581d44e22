#pragma once

// Named-tensor container:
//
//   "GALACKPT" | u64 LE manifest byte count | manifest JSON | tensor records
//
// The manifest lists {name, shape} per record in order, plus free-form
// metadata (a model checkpoint stores its BackboneConfig under "model").
// Each record uses the tensor serialization from tensor.hpp.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gala/backbone.hpp"
#include "gala/errors.hpp"
#include "gala/gala_module.hpp"
#include "gala/tensor.hpp"
#include "json.hpp"

namespace gala {

inline constexpr std::array<char, 8> kCheckpointMagic{'G', 'A', 'L', 'A', 'C', 'K', 'P', 'T'};

inline void write_named_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors,
                                const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json manifest = metadata;
  manifest["layout"] = "row-major NHWC, float64 little-endian";
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) manifest["tensors"].push_back({{"name", t.name}, {"shape", std::vector<std::size_t>(t.value.shape().dims().begin(), t.value.shape().dims().end())}});
  const std::string text = manifest.dump();
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) write_tensor(os, t.value);
  if (!os) throw DataError("checkpoint: write failed");
}

struct NamedTensorFile {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;
};

inline NamedTensorFile read_named_tensors(std::istream& is) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw DataError("checkpoint: bad magic bytes");
  const std::uint64_t len = detail::read_u64_le(is);
  if (len > (std::uint64_t{1} << 30)) throw DataError("checkpoint: manifest too large");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("checkpoint: truncated manifest");
  NamedTensorFile out;
  try {
    out.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: manifest is not JSON: ") + e.what());
  }
  if (!out.manifest.contains("tensors") || !out.manifest["tensors"].is_array()) {
    throw DataError("checkpoint: manifest lacks a tensor list");
  }
  for (const auto& entry : out.manifest["tensors"]) {
    Tensor t = read_tensor(is);
    const auto dims = entry.at("shape").get<std::vector<std::size_t>>();
    if (!(t.shape() == Shape(std::span<const std::size_t>(dims)))) {
      throw DataError("checkpoint: tensor '" + entry.at("name").get<std::string>() + "' shape differs from manifest");
    }
    out.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
  }
  return out;
}

inline void save_model(const std::filesystem::path& path, const Model& model,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot create checkpoint '" + path.string() + "'");
  nlohmann::json meta = extra;
  meta["model"] = model.config().to_json();
  write_named_tensors(os, model.parameters(), meta);
}

/// Rebuilds the architecture from the manifest and checks every tensor against it.
inline Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
  auto file = read_named_tensors(is);
  if (!file.manifest.contains("model")) throw DataError("checkpoint: manifest has no model config");
  BackboneConfig cfg;
  try {
    cfg = BackboneConfig::from_json(file.manifest["model"]);
  } catch (const ContractError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  const Model reference = build_model(cfg, 0);
  const auto& expect = reference.parameters();
  if (expect.size() != file.tensors.size()) throw DataError("checkpoint: parameter count does not match config");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (expect[i].name != file.tensors[i].name || !(expect[i].value.shape() == file.tensors[i].value.shape())) {
      throw DataError("checkpoint: parameter " + std::to_string(i) + " ('" + file.tensors[i].name +
                      "') does not match the config");
    }
    if (!file.tensors[i].value.all_finite()) throw DataError("checkpoint: '" + file.tensors[i].name + "' not finite");
  }
  return Model(cfg, std::move(file.tensors));
}

inline std::vector<NamedTensor> to_named(const GalaParams& p) {
  std::vector<NamedTensor> out;
  GalaParams::visit(p, [&](const char* field, const Tensor& t) { out.push_back({field, t}); });
  return out;
}

inline void save_gala_params(std::ostream& os, const GalaParams& p) {
  write_named_tensors(os, to_named(p),
                      {{"gala", {{"channels", p.channels}, {"reduction", p.reduction}, {"use_local", p.use_local}}}});
}

inline GalaParams load_gala_params(std::istream& is) {
  auto file = read_named_tensors(is);
  if (!file.manifest.contains("gala")) throw DataError("checkpoint: not a GALA parameter file");
  GalaParams p;
  const auto& meta = file.manifest["gala"];
  p.channels = meta.at("channels").get<std::size_t>();
  p.reduction = meta.at("reduction").get<std::size_t>();
  p.use_local = meta.at("use_local").get<bool>();
  std::size_t i = 0;
  GalaParams::visit(p, [&](const char* field, Tensor& t) {
    if (i >= file.tensors.size() || file.tensors[i].name != field) {
      throw DataError(std::string("checkpoint: expected GALA field '") + field + "'");
    }
    t = file.tensors[i++].value;
  });
  try {
    p.validate();
  } catch (const ContractError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return p;
}

}  // namespace gala
