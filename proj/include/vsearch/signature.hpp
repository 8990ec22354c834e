#pragma once

// Bag-of-words signatures: quantization, the CXSG binary encoding and the
// chi-squared distance.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vsearch/codebook.hpp"
#include "vsearch/descriptor.hpp"
#include "vsearch/detail/bytes.hpp"
#include "vsearch/error.hpp"

namespace vsearch {

struct SignatureEntry {
  std::uint32_t word = 0;
  std::uint32_t count = 0;

  friend bool operator==(const SignatureEntry&, const SignatureEntry&) = default;
};

/// Sparse word histogram. Entries have strictly increasing word ids and counts >= 1.
class Signature {
 public:
  Signature() = default;

  Signature(CodebookId codebook_id, std::vector<SignatureEntry> entries)
      : codebook_id_(codebook_id), entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].count == 0) throw Error(ErrorCode::kInvalidArgument, "signature entry with zero count");
      if (i > 0 && entries_[i].word <= entries_[i - 1].word) {
        throw Error(ErrorCode::kInvalidArgument, "signature word ids must be strictly increasing");
      }
      total_ += entries_[i].count;
    }
  }

  CodebookId codebook_id() const { return codebook_id_; }
  std::span<const SignatureEntry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t total() const { return total_; }

  /// L1-normalized weight of the i-th entry.
  double weight(std::size_t i) const { return static_cast<double>(entries_[i].count) / static_cast<double>(total_); }

  friend bool operator==(const Signature&, const Signature&) = default;

 private:
  CodebookId codebook_id_ = 0;
  std::vector<SignatureEntry> entries_;
  std::uint64_t total_ = 0;
};

/// Hard-assigns each descriptor to its nearest centre and counts words.
inline Signature quantize(std::span<const PatchDescriptor> descs, const Codebook& cb) {
  if (descs.empty()) throw Error(ErrorCode::kEmptyDescriptorSet, "no descriptors to quantize");
  if (cb.dim() != kDescriptorDim) throw Error(ErrorCode::kInvalidArgument, "codebook dimension is not 576");
  const auto rows = flatten(descs);
  const auto words = cb.assign(rows, descs.size());
  std::vector<std::uint32_t> counts(cb.k(), 0);
  for (auto w : words) ++counts[w];
  std::vector<SignatureEntry> entries;
  for (std::size_t w = 0; w < counts.size(); ++w) {
    if (counts[w] > 0) entries.push_back({static_cast<std::uint32_t>(w), counts[w]});
  }
  return Signature(cb.id(), std::move(entries));
}

inline constexpr std::uint8_t kSignatureVersion = 1;

/// CXSG: magic, version, codebook id (u64 LE), entry count, then per entry a
/// word-id delta (first absolute) and the count, all varints.
inline std::vector<std::uint8_t> encode(const Signature& sig) {
  detail::ByteWriter w;
  w.raw("CXSG");
  w.u8(kSignatureVersion);
  w.u64(sig.codebook_id());
  w.varint(sig.size());
  std::uint32_t prev = 0;
  for (std::size_t i = 0; i < sig.size(); ++i) {
    const auto& e = sig.entries()[i];
    w.varint(i == 0 ? e.word : e.word - prev);
    w.varint(e.count);
    prev = e.word;
  }
  return std::move(w).bytes();
}

/// Decodes one signature from the front of blob; *consumed receives its length.
inline Signature decode(std::span<const std::uint8_t> blob, std::size_t* consumed = nullptr) {
  detail::ByteReader r(blob, ErrorCode::kCorruptSignature);
  if (!r.expect("CXSG")) r.fail("bad magic");
  if (r.u8() != kSignatureVersion) r.fail("unsupported version");
  const CodebookId id = r.u64();
  const std::uint64_t count = r.varint();
  // Each entry takes at least two bytes.
  if (count > r.remaining() / 2) r.fail("entry count exceeds blob");
  std::vector<SignatureEntry> entries(count);
  std::uint64_t word = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t delta = r.varint();
    if (i > 0 && delta == 0) r.fail("non-increasing word id");
    word = i == 0 ? delta : word + delta;
    const std::uint64_t n = r.varint();
    if (word > UINT32_MAX || n == 0 || n > UINT32_MAX) r.fail("entry out of range");
    entries[i] = {static_cast<std::uint32_t>(word), static_cast<std::uint32_t>(n)};
  }
  if (consumed) *consumed = r.position();
  return Signature(id, std::move(entries));
}

/// Decode and check the codebook id at a use site.
inline Signature decode_for(std::span<const std::uint8_t> blob, CodebookId expected) {
  auto sig = decode(blob);
  if (sig.codebook_id() != expected) throw Error(ErrorCode::kCorruptSignature, "signature from another codebook");
  return sig;
}

/// Unhalved chi-squared distance between the L1-normalized histograms, 0/0 terms
/// contributing 0. Range [0, 2].
inline double chi_squared(const Signature& a, const Signature& b) {
  if (a.codebook_id() != b.codebook_id()) throw Error(ErrorCode::kCodebookMismatch, "signatures from different codebooks");
  if (a.total() == 0 || b.total() == 0) throw Error(ErrorCode::kInvalidArgument, "chi-squared of an empty signature");
  const auto ea = a.entries();
  const auto eb = b.entries();
  double sum = 0;
  std::size_t i = 0, j = 0;
  while (i < ea.size() || j < eb.size()) {
    if (j == eb.size() || (i < ea.size() && ea[i].word < eb[j].word)) {
      sum += a.weight(i++);
    } else if (i == ea.size() || eb[j].word < ea[i].word) {
      sum += b.weight(j++);
    } else {
      const double q = a.weight(i++), d = b.weight(j++);
      sum += (q - d) * (q - d) / (q + d);
    }
  }
  return std::clamp(sum, 0.0, 2.0);
}

}  // namespace vsearch
