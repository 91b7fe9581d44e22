#pragma once

// Dataset folders: index.ndjson with one record per sample,
//
//   {"id": ..., "image_path": ..., "label": k, "map_path": ..., "mask_path": ...}
//
// map_path and mask_path are optional; paths are relative to the folder.
// Images are PNG; maps and masks are 8-bit grayscale PNG of the image's size.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "gala/errors.hpp"
#include "gala/png_io.hpp"
#include "gala/train.hpp"
#include "json.hpp"

namespace gala {

inline constexpr const char* kIndexFile = "index.ndjson";

/// Scales a nonnegative map so its maximum is 1 (all-zero maps stay zero).
inline Grid<double> scaled_to_unit(const Grid<double>& g) {
  double m = 0.0;
  for (double v : g.values()) m = std::max(m, v);
  Grid<double> out = g;
  if (m > 0.0)
    for (double& v : out.values()) v /= m;
  return out;
}

/// `extra`: optional per-sample fields merged into each index record.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data,
                          std::span<const nlohmann::json> extra = {}) {
  if (!extra.empty() && extra.size() != data.size()) throw ContractError("write_dataset: extra fields per sample");
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream index(dir / kIndexFile);
  if (!index) throw DataError("cannot create '" + (dir / kIndexFile).string() + "'");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    nlohmann::json rec{{"id", s.id}, {"image_path", "images/" + s.id + ".png"}, {"label", s.label}};
    if (!extra.empty()) rec.update(extra[i]);
    write_png(dir / "images" / (s.id + ".png"), s.image);
    if (s.map) {
      rec["map_path"] = "maps/" + s.id + ".png";
      write_gray_png(dir / "maps" / (s.id + ".png"), scaled_to_unit(*s.map));
    }
    if (s.mask) {
      rec["mask_path"] = "masks/" + s.id + ".png";
      write_gray_png(dir / "masks" / (s.id + ".png"), *s.mask);
    }
    index << rec.dump() << '\n';
  }
  if (!index) throw DataError("write failed for '" + (dir / kIndexFile).string() + "'");
}

/// `where`: a dataset folder or its index file.
inline Dataset load_dataset(const std::filesystem::path& where) {
  namespace fs = std::filesystem;
  const fs::path index_path = fs::is_directory(where) ? where / kIndexFile : where;
  const fs::path root = index_path.parent_path();
  std::ifstream in(index_path);
  if (!in) throw DataError("cannot open dataset index '" + index_path.string() + "'");
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where_msg = index_path.string() + ":" + std::to_string(lineno);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where_msg + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("image_path") || !rec.contains("label")) {
      throw DataError(where_msg + ": record needs image_path and label");
    }
    Sample s;
    try {
      const auto image_path = rec["image_path"].get<std::string>();
      s.id = rec.contains("id") ? rec["id"].get<std::string>() : fs::path(image_path).stem().string();
      s.label = rec["label"].get<std::size_t>();
      s.image = read_png(root / image_path);
      if (rec.contains("map_path") && !rec["map_path"].is_null()) {
        s.map = read_gray_png(root / rec["map_path"].get<std::string>());
      }
      if (rec.contains("mask_path") && !rec["mask_path"].is_null()) {
        auto mask = read_gray_png(root / rec["mask_path"].get<std::string>());
        for (double& v : mask.values()) v = v >= 0.5 ? 1.0 : 0.0;
        s.mask = std::move(mask);
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where_msg + ": " + e.what());
    }
    for (const auto* g : {s.map ? &*s.map : nullptr, s.mask ? &*s.mask : nullptr}) {
      if (g && (g->height() != s.image.height || g->width() != s.image.width)) {
        throw DataError(where_msg + ": map or mask size differs from the image");
      }
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError("dataset '" + index_path.string() + "' is empty");
  return out;
}

}  // namespace gala
