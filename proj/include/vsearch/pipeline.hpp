#pragma once

// Multi-product search: localise, resolve exclusions, crop each surviving
// detection and query its category's database concurrently.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "vsearch/descriptor.hpp"
#include "vsearch/localiser.hpp"
#include "vsearch/shards.hpp"
#include "vsearch/signature.hpp"

namespace vsearch {

/// Sub-image covering the intersection of box with the image bounds; box edges
/// are widened to whole pixels.
inline RgbImage crop(const RgbImage& img, const BBox& box) {
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(box.x + box.w)));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(box.y + box.h)));
  if (x1 <= x0 || y1 <= y0) throw Error(ErrorCode::kEmptyCrop, "box does not intersect the image");
  if (x1 - x0 < kMinImageSide || y1 - y0 < kMinImageSide) {
    throw Error(ErrorCode::kEmptyCrop, "crop " + std::to_string(x1 - x0) + "x" + std::to_string(y1 - y0) +
                                           " is smaller than 32x32");
  }
  RgbImage out(x1 - x0, y1 - y0);
  for (int y = y0; y < y1; ++y) std::copy_n(img.at(x0, y), 3 * out.width, out.at(0, y - y0));
  return out;
}

struct Database {
  std::string name;
  ShardSet shards;
  std::shared_ptr<const Codebook> codebook;
};

using CategoryDatabases = std::map<std::string, Database>;

/// Describe, quantize against the database codebook and query its shards.
inline QueryResult retrieve(const RgbImage& img, const Database& db, const FilterBank& bank, std::size_t top_k,
                            const ExtractionOptions& extraction = {}) {
  const auto descs = describe_image(img, bank, extraction);
  const auto sig = quantize(descs, *db.codebook);
  return query(db.shards, sig, top_k);
}

struct MultiSearchOptions {
  std::string model;  // empty selects the registry default
  double conf_threshold = 0.5;
  std::size_t top_k = 10;
  bool concurrent = true;
  ExclusionPairs exclusions = default_exclusions();
  double exclusion_iou = 0.5;
  ExtractionOptions extraction;
  /// Called on the branch thread just before a database is queried (instrumentation).
  std::function<void(const std::string& category)> before_query;
};

struct ResultGroup {
  Detection detection;
  std::vector<RankedResult> ranked;
  bool degraded = false;
  std::string error;  // empty on success

  friend bool operator==(const ResultGroup&, const ResultGroup&) = default;
};

struct MultiSearchResult {
  std::vector<ResultGroup> groups;  // one per surviving detection, in detection order
  bool degraded = false;
  std::chrono::microseconds wall_time{0};
};

/// Per-detection failures become an empty group with an error note. Throws
/// NoShardsAvailable only when every database that was queried is fully down.
inline MultiSearchResult multi_search(const RgbImage& img, const CategoryDatabases& dbs, const DetectorRegistry& reg,
                                      const FilterBank& bank, const MultiSearchOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  const auto detections =
      resolve_exclusions(detect(reg, opts.model, img, opts.conf_threshold), opts.exclusions, opts.exclusion_iou);

  enum class Outcome { kOk, kFailed, kNoShards };
  struct Branch {
    ResultGroup group;
    Outcome outcome = Outcome::kOk;
  };
  auto run = [&](const Detection& det) {
    Branch b;
    b.group.detection = det;
    try {
      const auto it = dbs.find(det.category);
      if (it == dbs.end()) throw Error(ErrorCode::kInvalidArgument, "no database for category '" + det.category + "'");
      const auto region = crop(img, det.box);
      const auto descs = describe_image(region, bank, opts.extraction);
      const auto sig = quantize(descs, *it->second.codebook);
      if (opts.before_query) opts.before_query(det.category);
      auto result = query(it->second.shards, sig, opts.top_k);
      b.group.ranked = std::move(result.ranked);
      b.group.degraded = result.degraded;
    } catch (const Error& e) {
      b.group.error = e.what();
      b.outcome = e.code() == ErrorCode::kNoShardsAvailable ? Outcome::kNoShards : Outcome::kFailed;
    }
    return b;
  };

  std::vector<Branch> branches(detections.size());
  if (opts.concurrent && detections.size() > 1) {
    std::vector<std::future<Branch>> futures;
    for (const auto& d : detections) futures.push_back(std::async(std::launch::async, run, std::cref(d)));
    for (std::size_t i = 0; i < futures.size(); ++i) branches[i] = futures[i].get();
  } else {
    for (std::size_t i = 0; i < detections.size(); ++i) branches[i] = run(detections[i]);
  }

  MultiSearchResult out;
  std::size_t queried = 0, down = 0;
  for (auto& b : branches) {
    if (b.outcome != Outcome::kFailed) ++queried;
    if (b.outcome == Outcome::kNoShards) ++down;
    out.degraded = out.degraded || b.group.degraded;
    out.groups.push_back(std::move(b.group));
  }
  if (queried > 0 && down == queried) throw Error(ErrorCode::kNoShardsAvailable, "every queried database is down");
  out.wall_time = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start);
  return out;
}

// Database registry config: one record per line,
//   <category> <shard manifest path> <codebook path>
// with paths relative to the config file; '#' starts a comment line.
struct DatabaseConfigEntry {
  std::string category;
  std::filesystem::path manifest;
  std::filesystem::path codebook;
};

inline std::vector<DatabaseConfigEntry> read_database_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open database config " + path.string());
  std::vector<DatabaseConfigEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    DatabaseConfigEntry e;
    std::string manifest, codebook;
    if (!(fields >> e.category >> manifest >> codebook)) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ":" + std::to_string(line_no) + ": malformed record");
    }
    e.manifest = path.parent_path() / manifest;
    e.codebook = path.parent_path() / codebook;
    out.push_back(std::move(e));
  }
  return out;
}

/// Loads every database; codebooks shared between categories are loaded once.
inline CategoryDatabases load_databases(const std::filesystem::path& config_path) {
  CategoryDatabases dbs;
  std::map<std::string, std::shared_ptr<const Codebook>> codebooks;
  for (const auto& e : read_database_config(config_path)) {
    auto& cb = codebooks[std::filesystem::weakly_canonical(e.codebook).string()];
    if (!cb) cb = std::make_shared<const Codebook>(load_codebook(e.codebook));
    Database db{e.category, load_shard_set(e.manifest), cb};
    if (db.shards.codebook_id() != cb->id() || db.shards.k() != cb->k()) {
      throw Error(ErrorCode::kCodebookMismatch, "database '" + e.category + "' was indexed with another codebook");
    }
    if (!dbs.emplace(e.category, std::move(db)).second) {
      throw Error(ErrorCode::kInvalidArgument, "database '" + e.category + "' configured twice");
    }
  }
  return dbs;
}

}  // namespace vsearch
