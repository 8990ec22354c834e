#pragma once

// Visual-word codebook: k-means training, nearest-centre assignment and the
// CXCB file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vsearch/descriptor.hpp"
#include "vsearch/detail/bytes.hpp"
#include "vsearch/detail/parallel.hpp"
#include "vsearch/error.hpp"

namespace vsearch {

using CodebookId = std::uint64_t;

inline constexpr std::size_t kDefaultCodebookSize = 5000;

class Codebook {
 public:
  Codebook() = default;

  /// centres is k x dim, row-major.
  Codebook(std::size_t dim, std::vector<float> centres) : dim_(dim), centres_(std::move(centres)) {
    if (dim_ == 0 || centres_.size() % dim_ != 0) {
      throw Error(ErrorCode::kInvalidArgument, "centre array is not a multiple of dim");
    }
    if (k() < 2) throw Error(ErrorCode::kInvalidArgument, "codebook needs at least 2 centres");
    norms_.resize(k());
    for (std::size_t w = 0; w < k(); ++w) {
      double n = 0;
      for (float v : centre(w)) n += double{v} * v;
      norms_[w] = static_cast<float>(n);
    }
    max_norm_ = *std::max_element(norms_.begin(), norms_.end());
    id_ = detail::sha256_prefix64(canonical_payload());
  }

  std::size_t k() const { return dim_ == 0 ? 0 : centres_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  CodebookId id() const { return id_; }
  std::span<const float> centres() const { return centres_; }
  std::span<const float> centre(std::size_t word) const { return {centres_.data() + word * dim_, dim_}; }

  double squared_distance(std::span<const float> x, std::size_t word) const {
    const auto c = centre(word);
    double d = 0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double diff = double{x[i]} - double{c[i]};
      d += diff * diff;
    }
    return d;
  }

  /// Exact nearest centre by Euclidean distance; ties go to the lowest word id.
  std::uint32_t nearest(std::span<const float> x) const {
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < k(); ++w) {
      const double d = squared_distance(x, w);
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::uint32_t>(w);
      }
    }
    return best;
  }

  /// Batched nearest-centre assignment for n row-major vectors. A float GEMM
  /// shortlists centres; the shortlist is re-ranked with exact distances so the
  /// result always equals nearest() row by row.
  std::vector<std::uint32_t> assign(std::span<const float> rows, std::size_t n,
                                    std::vector<double>* squared_distances = nullptr) const {
    using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    std::vector<std::uint32_t> out(n);
    if (squared_distances) squared_distances->assign(n, 0.0);
    const Eigen::Map<const Matrix> centres(centres_.data(), static_cast<Eigen::Index>(k()),
                                           static_cast<Eigen::Index>(dim_));
    constexpr std::size_t kBlock = 256;
    Matrix dots;
    for (std::size_t begin = 0; begin < n; begin += kBlock) {
      const std::size_t m = std::min(kBlock, n - begin);
      const Eigen::Map<const Matrix> block(rows.data() + begin * dim_, static_cast<Eigen::Index>(m),
                                           static_cast<Eigen::Index>(dim_));
      dots.noalias() = block * centres.transpose();
      for (std::size_t r = 0; r < m; ++r) {
        const auto x = rows.subspan((begin + r) * dim_, dim_);
        double xx = 0;
        for (float v : x) xx += double{v} * v;
        float approx_min = std::numeric_limits<float>::infinity();
        for (std::size_t w = 0; w < k(); ++w) {
          approx_min = std::min(approx_min, norms_[w] - 2.0f * dots(static_cast<Eigen::Index>(r),
                                                                   static_cast<Eigen::Index>(w)));
        }
        const double slack = 1e-4 * (xx + max_norm_ + 2 * std::sqrt(xx * max_norm_)) + 1e-12;
        std::uint32_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t w = 0; w < k(); ++w) {
          const float approx = norms_[w] - 2.0f * dots(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(w));
          if (approx > approx_min + slack) continue;
          const double d = squared_distance(x, w);
          if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(w);
          }
        }
        out[begin + r] = best;
        if (squared_distances) (*squared_distances)[begin + r] = best_d;
      }
    }
    return out;
  }

  /// Serialized CXCB file contents.
  std::vector<std::uint8_t> serialize() const {
    detail::ByteWriter w;
    w.raw("CXCB");
    w.u8(kVersion);
    const auto payload = canonical_payload();
    w.raw(payload);
    w.raw(detail::sha256(payload));
    return std::move(w).bytes();
  }

  static Codebook deserialize(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, ErrorCode::kCorruptCodebook);
    if (!r.expect("CXCB")) r.fail("bad magic");
    if (r.u8() != kVersion) r.fail("unsupported version");
    const std::size_t payload_begin = r.position();
    const std::uint64_t k = r.varint();
    const std::uint64_t dim = r.varint();
    if (k < 2 || dim == 0 || k * dim * 4 > r.remaining()) r.fail("bad dimensions");
    std::vector<float> centres(k * dim);
    for (auto& v : centres) v = r.f32();
    const auto payload = bytes.subspan(payload_begin, r.position() - payload_begin);
    const auto digest = r.take(32);
    const auto expected = detail::sha256(payload);
    if (!std::equal(digest.begin(), digest.end(), expected.begin())) r.fail("content hash mismatch");
    return Codebook(dim, std::move(centres));
  }

  friend bool operator==(const Codebook& a, const Codebook& b) {
    return a.dim_ == b.dim_ && a.centres_ == b.centres_;
  }

 private:
  static constexpr std::uint8_t kVersion = 1;

  std::vector<std::uint8_t> canonical_payload() const {
    detail::ByteWriter w;
    w.varint(k());
    w.varint(dim_);
    for (float v : centres_) w.f32(v);
    return std::move(w).bytes();
  }

  std::size_t dim_ = 0;
  std::vector<float> centres_;
  std::vector<float> norms_;
  float max_norm_ = 0;
  CodebookId id_ = 0;
};

inline void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  const auto bytes = cb.serialize();
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Codebook load_codebook(const std::filesystem::path& path) { return Codebook::deserialize(read_file(path)); }

struct KMeansOptions {
  int max_iterations = 100;
  double tolerance = 1e-4;  // stop once no centre moves further than this
};

struct KMeansResult {
  Codebook codebook;
  double inertia = 0;  // sum of squared distances to the assigned centre
  int iterations = 0;
};

/// Lloyd's k-means with k-means++ seeding over n row-major samples of dimension dim.
/// Deterministic for a given (samples, k, seed). Empty clusters keep their centre.
inline KMeansResult fit_kmeans(std::span<const float> samples, std::size_t dim, std::size_t k,
                               std::uint64_t seed, const KMeansOptions& opts = {}) {
  const std::size_t n = dim == 0 ? 0 : samples.size() / dim;
  if (n < k) {
    throw Error(ErrorCode::kInsufficientSamples,
                std::to_string(n) + " samples for " + std::to_string(k) + " centres");
  }
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "k must be at least 2");
  auto row = [&](std::size_t i) { return samples.subspan(i * dim, dim); };
  auto dist2 = [&](std::span<const float> a, std::span<const float> b) {
    double d = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double diff = double{a[i]} - double{b[i]};
      d += diff * diff;
    }
    return d;
  };

  std::mt19937_64 rng(seed);
  std::vector<float> centres;
  centres.reserve(k * dim);
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t c = 0; c < k; ++c) {
    const auto chosen = row(pick);
    centres.insert(centres.end(), chosen.begin(), chosen.end());
    if (c + 1 == k) break;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], dist2(row(i), chosen));
      total += closest[i];
    }
    if (total <= 0) {
      // Fewer distinct points than k: fall back to the next unused index.
      pick = (pick + 1) % n;
      continue;
    }
    double target = std::uniform_real_distribution<double>(0.0, total)(rng);
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= closest[i];
      if (target < 0 && closest[i] > 0) {
        pick = i;
        break;
      }
    }
  }

  KMeansResult result;
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  for (result.iterations = 1; result.iterations <= opts.max_iterations; ++result.iterations) {
    const Codebook current(dim, centres);
    const auto labels = current.assign(samples, n);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = row(i);
      double* s = sums.data() + std::size_t{labels[i]} * dim;
      for (std::size_t d = 0; d < dim; ++d) s[d] += x[d];
      ++counts[labels[i]];
    }
    double max_shift = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      double shift = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        const auto updated = static_cast<float>(sums[c * dim + d] / static_cast<double>(counts[c]));
        const double diff = double{updated} - centres[c * dim + d];
        shift += diff * diff;
        centres[c * dim + d] = updated;
      }
      max_shift = std::max(max_shift, std::sqrt(shift));
    }
    if (max_shift < opts.tolerance) break;
  }
  result.iterations = std::min(result.iterations, opts.max_iterations);
  result.codebook = Codebook(dim, std::move(centres));
  std::vector<double> d2;
  result.codebook.assign(samples, n, &d2);
  for (double d : d2) result.inertia += d;
  return result;
}

inline std::vector<float> flatten(std::span<const PatchDescriptor> descs) {
  std::vector<float> rows;
  rows.reserve(descs.size() * kDescriptorDim);
  for (const auto& d : descs) rows.insert(rows.end(), d.values.begin(), d.values.end());
  return rows;
}

inline KMeansResult fit_kmeans(std::span<const PatchDescriptor> samples, std::size_t k, std::uint64_t seed,
                               const KMeansOptions& opts = {}) {
  if (samples.size() < k) {
    throw Error(ErrorCode::kInsufficientSamples,
                std::to_string(samples.size()) + " samples for " + std::to_string(k) + " centres");
  }
  return fit_kmeans(flatten(samples), kDescriptorDim, k, seed, opts);
}

inline Codebook train_codebook(std::span<const PatchDescriptor> samples, std::size_t k, std::uint64_t seed,
                               const KMeansOptions& opts = {}) {
  return fit_kmeans(samples, k, seed, opts).codebook;
}

}  // namespace vsearch
