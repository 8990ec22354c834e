#pragma once

// Word-range inverted index over signatures, the CXIX file format and
// chi-squared scoring over shared words.
//
// For L1-normalized histograms q and d,
//   chi2(q, d) = 2 - 4 * sum_{i shared} q_i d_i / (q_i + d_i),
// so a shard only has to accumulate the shared-word terms for its word range.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vsearch/codebook.hpp"
#include "vsearch/detail/bytes.hpp"
#include "vsearch/error.hpp"
#include "vsearch/signature.hpp"

namespace vsearch {

using ImageId = std::uint64_t;

/// Half-open range of word ids [lo, hi).
struct WordRange {
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;

  bool contains(std::uint32_t w) const { return w >= lo && w < hi; }
  std::uint32_t size() const { return hi - lo; }

  friend bool operator==(const WordRange&, const WordRange&) = default;
};

struct Posting {
  ImageId image_id = 0;
  double weight = 0;  // count / total of the image

  friend bool operator==(const Posting&, const Posting&) = default;
};

/// Shared-word similarity in fixed point (units of 2^-60). Integer sums are
/// associative, so merging shard partials in any grouping gives identical totals.
using Score = std::int64_t;
inline constexpr double kScoreUnit = 1152921504606846976.0;  // 2^60

inline Score to_score(double v) { return std::llround(v * kScoreUnit); }
inline double score_value(Score s) { return static_cast<double>(s) / kScoreUnit; }

/// chi2 from the summed shared-word similarity. Accumulation noise is ~1e-15, so
/// distances are reported on a 1e-12 grid and clamped to [0, 2].
inline double distance_from_score(Score total) {
  const double d = 2.0 - 4.0 * score_value(total);
  return std::clamp(std::round(d * 1e12) / 1e12, 0.0, 2.0);
}

inline Score similarity_term(double q, double d) { return to_score(q * d / (q + d)); }

struct PartialScore {
  ImageId image_id = 0;
  Score score = 0;

  double value() const { return score_value(score); }
  friend bool operator==(const PartialScore&, const PartialScore&) = default;
};

/// Partial similarities keyed by image, ascending image_id.
using PartialScores = std::vector<PartialScore>;

class InvertedIndex {
 public:
  InvertedIndex() = default;

  CodebookId codebook_id() const { return codebook_id_; }
  WordRange word_range() const { return range_; }

  /// offsets()[w - lo] is the first posting of word w; size is range width + 1.
  std::span<const std::uint64_t> offsets() const { return offsets_; }
  std::size_t posting_count() const { return weights_.size(); }
  Posting posting(std::size_t i) const { return {images_[docs_[i]], weights_[i]}; }

  std::vector<Posting> postings(std::uint32_t word) const {
    std::vector<Posting> out;
    if (!range_.contains(word)) return out;
    for (auto i = offsets_[word - range_.lo]; i < offsets_[word - range_.lo + 1]; ++i) out.push_back(posting(i));
    return out;
  }

  /// Every image given to the build, ascending, with its total word count.
  std::span<const ImageId> images() const { return images_; }
  std::span<const std::uint32_t> image_totals() const { return totals_; }

  std::map<ImageId, std::uint64_t> image_norms() const {
    std::map<ImageId, std::uint64_t> out;
    for (std::size_t i = 0; i < images_.size(); ++i) out.emplace(images_[i], totals_[i]);
    return out;
  }

  friend bool operator==(const InvertedIndex&, const InvertedIndex&) = default;

  friend InvertedIndex build_index(std::span<const std::pair<ImageId, Signature>>, WordRange);
  friend PartialScores query_shard(const InvertedIndex&, const Signature&);
  friend std::vector<std::uint8_t> serialize(const InvertedIndex&);
  friend InvertedIndex deserialize_index(std::span<const std::uint8_t>);

 private:
  CodebookId codebook_id_ = 0;
  WordRange range_;
  std::vector<std::uint64_t> offsets_;
  std::vector<std::uint32_t> docs_;  // index into images_
  std::vector<double> weights_;
  std::vector<ImageId> images_;
  std::vector<std::uint32_t> totals_;
};

/// Transposes signatures into word-major postings for words in range.
inline InvertedIndex build_index(std::span<const std::pair<ImageId, Signature>> sigs, WordRange range) {
  if (range.hi < range.lo) throw Error(ErrorCode::kInvalidArgument, "inverted word range");
  InvertedIndex idx;
  idx.range_ = range;
  idx.offsets_.assign(std::size_t{range.size()} + 1, 0);
  if (!sigs.empty()) idx.codebook_id_ = sigs.front().second.codebook_id();

  std::vector<std::size_t> order(sigs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigs[a].first < sigs[b].first; });
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& [id, sig] = sigs[order[i]];
    if (i > 0 && id == idx.images_.back()) {
      throw Error(ErrorCode::kDuplicateImageId, "image id " + std::to_string(id) + " appears twice");
    }
    if (sig.codebook_id() != idx.codebook_id_) throw Error(ErrorCode::kCodebookMismatch, "mixed codebooks in build");
    if (sig.total() > UINT32_MAX) throw Error(ErrorCode::kInvalidArgument, "signature total too large");
    idx.images_.push_back(id);
    idx.totals_.push_back(static_cast<std::uint32_t>(sig.total()));
  }

  // Count, prefix-sum, then fill; images are visited in id order so each word's
  // postings come out sorted by image id.
  std::vector<std::uint64_t> counts(range.size(), 0);
  for (std::size_t doc = 0; doc < order.size(); ++doc) {
    for (const auto& e : sigs[order[doc]].second.entries()) {
      if (range.contains(e.word)) ++counts[e.word - range.lo];
    }
  }
  for (std::uint32_t w = 0; w < range.size(); ++w) idx.offsets_[w + 1] = idx.offsets_[w] + counts[w];
  idx.docs_.resize(idx.offsets_.back());
  idx.weights_.resize(idx.offsets_.back());
  std::vector<std::uint64_t> cursor(idx.offsets_.begin(), idx.offsets_.end() - 1);
  for (std::size_t doc = 0; doc < order.size(); ++doc) {
    const auto& sig = sigs[order[doc]].second;
    const auto entries = sig.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!range.contains(entries[i].word)) continue;
      const auto slot = cursor[entries[i].word - range.lo]++;
      idx.docs_[slot] = static_cast<std::uint32_t>(doc);
      idx.weights_[slot] = sig.weight(i);
    }
  }
  return idx;
}

inline InvertedIndex build_index(const std::vector<std::pair<ImageId, Signature>>& sigs, WordRange range) {
  return build_index(std::span<const std::pair<ImageId, Signature>>(sigs), range);
}

/// Accumulates q_w d_w / (q_w + d_w) per image over the query words in this shard's range.
inline PartialScores query_shard(const InvertedIndex& idx, const Signature& q) {
  if (q.codebook_id() != idx.codebook_id_ && !idx.images_.empty()) {
    throw Error(ErrorCode::kCodebookMismatch, "query signature uses a different codebook");
  }
  PartialScores out;
  if (q.total() == 0 || idx.images_.empty()) return out;
  std::vector<Score> acc(idx.images_.size(), 0);
  std::vector<std::uint32_t> touched;
  const auto entries = q.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto w = entries[i].word;
    if (!idx.range_.contains(w)) continue;
    const double qw = q.weight(i);
    for (auto p = idx.offsets_[w - idx.range_.lo]; p < idx.offsets_[w - idx.range_.lo + 1]; ++p) {
      const auto doc = idx.docs_[p];
      if (acc[doc] == 0) touched.push_back(doc);
      acc[doc] += similarity_term(qw, idx.weights_[p]);
    }
  }
  std::sort(touched.begin(), touched.end());
  out.reserve(touched.size());
  for (auto doc : touched) out.push_back({idx.images_[doc], acc[doc]});
  return out;
}

inline constexpr std::uint8_t kIndexVersion = 1;

/// CXIX: magic, version, codebook id, lo/hi, image table (id delta, total),
/// offset deltas, per-word postings (image-id delta, f64 weight), CRC-64 trailer.
inline std::vector<std::uint8_t> serialize(const InvertedIndex& idx) {
  detail::ByteWriter w;
  w.raw("CXIX");
  w.u8(kIndexVersion);
  w.u64(idx.codebook_id_);
  w.varint(idx.range_.lo);
  w.varint(idx.range_.hi);
  w.varint(idx.images_.size());
  ImageId prev = 0;
  for (std::size_t i = 0; i < idx.images_.size(); ++i) {
    w.varint(i == 0 ? idx.images_[i] : idx.images_[i] - prev);
    w.varint(idx.totals_[i]);
    prev = idx.images_[i];
  }
  for (std::size_t i = 0; i < idx.offsets_.size(); ++i) w.varint(i == 0 ? idx.offsets_[0] : idx.offsets_[i] - idx.offsets_[i - 1]);
  for (std::size_t word = 0; word + 1 < idx.offsets_.size(); ++word) {
    for (auto p = idx.offsets_[word]; p < idx.offsets_[word + 1]; ++p) {
      const ImageId id = idx.images_[idx.docs_[p]];
      w.varint(p == idx.offsets_[word] ? id : id - idx.images_[idx.docs_[p - 1]]);
      w.f64(idx.weights_[p]);
    }
  }
  const auto crc = detail::crc64(w.bytes());
  w.u64(crc);
  return std::move(w).bytes();
}

inline InvertedIndex deserialize_index(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw Error(ErrorCode::kCorruptIndex, "truncated index");
  {
    detail::ByteReader trailer(bytes.subspan(bytes.size() - 8), ErrorCode::kCorruptIndex);
    if (trailer.u64() != detail::crc64(bytes.first(bytes.size() - 8))) {
      throw Error(ErrorCode::kCorruptIndex, "checksum mismatch");
    }
  }
  detail::ByteReader r(bytes.first(bytes.size() - 8), ErrorCode::kCorruptIndex);
  if (!r.expect("CXIX")) r.fail("bad magic");
  if (r.u8() != kIndexVersion) r.fail("unsupported version");
  InvertedIndex idx;
  idx.codebook_id_ = r.u64();
  const auto lo = r.varint();
  const auto hi = r.varint();
  if (hi < lo || hi > UINT32_MAX) r.fail("bad word range");
  idx.range_ = {static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(hi)};
  const auto n_images = r.varint();
  if (n_images > r.remaining() / 2) r.fail("image table exceeds file");
  idx.images_.resize(n_images);
  idx.totals_.resize(n_images);
  for (std::uint64_t i = 0; i < n_images; ++i) {
    const auto delta = r.varint();
    if (i > 0 && delta == 0) r.fail("image table not strictly increasing");
    idx.images_[i] = i == 0 ? delta : idx.images_[i - 1] + delta;
    const auto total = r.varint();
    if (total == 0 || total > UINT32_MAX) r.fail("bad image total");
    idx.totals_[i] = static_cast<std::uint32_t>(total);
  }
  if (idx.range_.size() + 1 > r.remaining()) r.fail("offsets exceed file");
  idx.offsets_.resize(std::size_t{idx.range_.size()} + 1);
  for (std::size_t i = 0; i < idx.offsets_.size(); ++i) {
    const auto delta = r.varint();
    idx.offsets_[i] = i == 0 ? delta : idx.offsets_[i - 1] + delta;
  }
  if (idx.offsets_[0] != 0) r.fail("first offset must be zero");
  const auto n_postings = idx.offsets_.back();
  if (n_postings > r.remaining() / 9) r.fail("postings exceed file");
  idx.docs_.resize(n_postings);
  idx.weights_.resize(n_postings);
  for (std::size_t word = 0; word + 1 < idx.offsets_.size(); ++word) {
    ImageId id = 0;
    for (auto p = idx.offsets_[word]; p < idx.offsets_[word + 1]; ++p) {
      const auto delta = r.varint();
      if (p != idx.offsets_[word] && delta == 0) r.fail("postings not sorted by image id");
      id = p == idx.offsets_[word] ? delta : id + delta;
      const auto it = std::lower_bound(idx.images_.begin(), idx.images_.end(), id);
      if (it == idx.images_.end() || *it != id) r.fail("posting references unknown image");
      idx.docs_[p] = static_cast<std::uint32_t>(it - idx.images_.begin());
      idx.weights_[p] = r.f64();
      if (!(idx.weights_[p] > 0.0 && idx.weights_[p] <= 1.0)) r.fail("posting weight outside (0,1]");
    }
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return idx;
}

inline void save_index(const InvertedIndex& idx, const std::filesystem::path& path) {
  const auto bytes = serialize(idx);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
}

inline InvertedIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_index(bytes);
}

}  // namespace vsearch
