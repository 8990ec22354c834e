#pragma once

// Word-range sharding of the inverted index with parallel fan-out, merge and
// degradation when shards are unavailable.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <future>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vsearch/index.hpp"

namespace vsearch {

/// Contiguous ranges of ceil(k/n) words covering [0, k).
inline std::vector<WordRange> make_shard_ranges(std::uint32_t k, std::uint32_t n) {
  if (n == 0 || n > k) throw Error(ErrorCode::kInvalidArgument, "shard count must be in [1, k]");
  const std::uint32_t width = (k + n - 1) / n;
  std::vector<WordRange> out;
  for (std::uint32_t lo = 0; lo < k; lo += width) out.push_back({lo, std::min(k, lo + width)});
  return out;
}

struct Shard {
  WordRange range;
  std::shared_ptr<const InvertedIndex> index;  // null when never loaded
  bool available = true;
  std::string source;       // file the shard was loaded from, if any
  std::string endpoint;     // remote address from the manifest, if any
  std::string unavailable_reason;

  bool up() const { return available && index != nullptr; }
};

struct RankedResult {
  ImageId image_id = 0;
  double distance = 0;
  bool degraded = false;

  friend bool operator==(const RankedResult&, const RankedResult&) = default;
};

struct QueryResult {
  std::vector<RankedResult> ranked;  // distance ascending, ties by image id
  bool degraded = false;

  friend bool operator==(const QueryResult&, const QueryResult&) = default;
};

/// Shards whose ranges partition [0, k). Immutable once shared between queries.
class ShardSet {
 public:
  ShardSet() = default;

  ShardSet(CodebookId codebook_id, std::uint32_t k, std::vector<Shard> shards)
      : codebook_id_(codebook_id), k_(k), shards_(std::move(shards)) {
    std::sort(shards_.begin(), shards_.end(), [](const Shard& a, const Shard& b) { return a.range.lo < b.range.lo; });
    std::uint32_t next = 0;
    for (const auto& s : shards_) {
      if (s.range.lo != next || s.range.hi < s.range.lo) {
        throw Error(ErrorCode::kInvalidArgument, "shard ranges do not partition [0, k)");
      }
      if (s.index && (s.index->word_range() != s.range)) {
        throw Error(ErrorCode::kInvalidArgument, "shard index range differs from its declared range");
      }
      if (s.index && !s.index->images().empty() && s.index->codebook_id() != codebook_id_) {
        throw Error(ErrorCode::kCodebookMismatch, "shard built with another codebook");
      }
      next = s.range.hi;
    }
    if (next != k_) throw Error(ErrorCode::kInvalidArgument, "shard ranges do not cover [0, k)");
  }

  CodebookId codebook_id() const { return codebook_id_; }
  std::uint32_t k() const { return k_; }
  std::size_t size() const { return shards_.size(); }
  const Shard& shard(std::size_t i) const { return shards_[i]; }
  std::span<const Shard> shards() const { return shards_; }

  bool any_up() const { return std::any_of(shards_.begin(), shards_.end(), [](const Shard& s) { return s.up(); }); }
  bool all_up() const { return std::all_of(shards_.begin(), shards_.end(), [](const Shard& s) { return s.up(); }); }

  void set_available(std::size_t i, bool available) { shards_.at(i).available = available; }

  /// Copy with shard i marked unavailable.
  ShardSet without(std::size_t i) const {
    ShardSet copy = *this;
    copy.set_available(i, false);
    return copy;
  }

 private:
  CodebookId codebook_id_ = 0;
  std::uint32_t k_ = 0;
  std::vector<Shard> shards_;
};

inline ShardSet build_shard_set(std::span<const std::pair<ImageId, Signature>> sigs, CodebookId codebook_id,
                                std::uint32_t k, std::uint32_t n_shards) {
  std::vector<Shard> shards;
  for (const auto& range : make_shard_ranges(k, n_shards)) {
    Shard s;
    s.range = range;
    s.index = std::make_shared<const InvertedIndex>(build_index(sigs, range));
    shards.push_back(std::move(s));
  }
  return ShardSet(codebook_id, k, std::move(shards));
}

enum class FanOut { kParallel, kSequential };

/// Queries every available shard, sums the partials and converts them to chi2.
/// Images sharing no word with q (chi2 = 2) are omitted.
inline QueryResult query(const ShardSet& set, const Signature& q, std::size_t top_k,
                         FanOut fan_out = FanOut::kParallel) {
  if (top_k == 0) throw Error(ErrorCode::kInvalidArgument, "top_k must be at least 1");
  if (q.codebook_id() != set.codebook_id()) throw Error(ErrorCode::kCodebookMismatch, "query uses a different codebook");
  if (!set.any_up()) throw Error(ErrorCode::kNoShardsAvailable, "every shard is unavailable");

  std::vector<const InvertedIndex*> live;
  for (const auto& s : set.shards()) {
    if (s.up()) live.push_back(s.index.get());
  }
  std::vector<PartialScores> partials(live.size());
  if (fan_out == FanOut::kParallel && live.size() > 1) {
    std::vector<std::future<PartialScores>> futures;
    futures.reserve(live.size());
    for (const auto* idx : live) futures.push_back(std::async(std::launch::async, [idx, &q] { return query_shard(*idx, q); }));
    for (std::size_t i = 0; i < futures.size(); ++i) partials[i] = futures[i].get();
  } else {
    for (std::size_t i = 0; i < live.size(); ++i) partials[i] = query_shard(*live[i], q);
  }

  PartialScores merged;
  for (auto& p : partials) merged.insert(merged.end(), p.begin(), p.end());
  std::sort(merged.begin(), merged.end(), [](const PartialScore& a, const PartialScore& b) { return a.image_id < b.image_id; });
  std::vector<RankedResult> ranked;
  const bool degraded = !set.all_up();
  for (std::size_t i = 0; i < merged.size();) {
    Score total = 0;
    std::size_t j = i;
    for (; j < merged.size() && merged[j].image_id == merged[i].image_id; ++j) total += merged[j].score;
    ranked.push_back({merged[i].image_id, distance_from_score(total), degraded});
    i = j;
  }
  auto by_rank = [](const RankedResult& a, const RankedResult& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.image_id < b.image_id;
  };
  if (ranked.size() > top_k) {
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(top_k), ranked.end(), by_rank);
    ranked.resize(top_k);
  } else {
    std::sort(ranked.begin(), ranked.end(), by_rank);
  }
  return {std::move(ranked), degraded};
}

// Shard manifest: a text file of whitespace-separated records
//   codebook <16 hex digits>
//   k <word count>
//   shard <lo> <hi> <path relative to the manifest> [endpoint]
// '#' starts a comment line.
struct ShardManifestEntry {
  WordRange range;
  std::string path;
  std::string endpoint;
};

struct ShardManifest {
  CodebookId codebook_id = 0;
  std::uint32_t k = 0;
  std::vector<ShardManifestEntry> shards;
};

inline std::string format_codebook_id(CodebookId id) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << id;
  return s.str();
}

inline void write_shard_manifest(const ShardManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "# vsearch shard manifest v1\n";
  out << "codebook " << format_codebook_id(m.codebook_id) << "\n";
  out << "k " << m.k << "\n";
  for (const auto& s : m.shards) {
    out << "shard " << s.range.lo << " " << s.range.hi << " " << s.path;
    if (!s.endpoint.empty()) out << " " << s.endpoint;
    out << "\n";
  }
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
}

inline ShardManifest read_shard_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open shard manifest " + path.string());
  ShardManifest m;
  bool have_codebook = false, have_k = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    auto bad = [&] { throw Error(ErrorCode::kInvalidArgument, path.string() + ":" + std::to_string(line_no) + ": malformed record"); };
    if (key == "codebook") {
      std::string hex;
      if (!(fields >> hex) || hex.size() != 16) bad();
      const auto [end, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), m.codebook_id, 16);
      if (ec != std::errc() || end != hex.data() + hex.size()) bad();
      have_codebook = true;
    } else if (key == "k") {
      if (!(fields >> m.k)) bad();
      have_k = true;
    } else if (key == "shard") {
      ShardManifestEntry e;
      if (!(fields >> e.range.lo >> e.range.hi >> e.path)) bad();
      fields >> e.endpoint;
      m.shards.push_back(std::move(e));
    } else {
      bad();
    }
  }
  if (!have_codebook || !have_k) throw Error(ErrorCode::kInvalidArgument, path.string() + ": missing codebook or k record");
  return m;
}

/// Loads every shard listed in a manifest. A missing or corrupt shard file leaves
/// that shard unavailable; a shard from another codebook is a configuration error.
inline ShardSet load_shard_set(const std::filesystem::path& manifest_path) {
  const auto m = read_shard_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  std::vector<Shard> shards;
  for (const auto& e : m.shards) {
    Shard s;
    s.range = e.range;
    s.source = (base / e.path).string();
    s.endpoint = e.endpoint;
    try {
      auto idx = load_index(base / e.path);
      if (!idx.images().empty() && idx.codebook_id() != m.codebook_id) {
        throw Error(ErrorCode::kCodebookMismatch, s.source + " was built with another codebook");
      }
      if (idx.word_range() != e.range) throw Error(ErrorCode::kCorruptIndex, s.source + " covers a different word range");
      s.index = std::make_shared<const InvertedIndex>(std::move(idx));
    } catch (const Error& err) {
      if (err.code() == ErrorCode::kCodebookMismatch) throw;
      s.available = false;
      s.unavailable_reason = err.what();
    }
    shards.push_back(std::move(s));
  }
  return ShardSet(m.codebook_id, m.k, std::move(shards));
}

}  // namespace vsearch
