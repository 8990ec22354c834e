#pragma once

// Keypoint detection and the 576-dim colour-texture patch descriptor.

#include <algorithm>
#include <array>
#include <cstddef>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "vsearch/detail/parallel.hpp"
#include "vsearch/filter_bank.hpp"
#include "vsearch/imaging.hpp"

namespace vsearch {

inline constexpr int kPatchSize = 32;
inline constexpr int kPatchHalf = kPatchSize / 2;
inline constexpr int kHistogramBins = 6;
inline constexpr int kDescriptorValues = 2;
inline constexpr std::size_t kDescriptorDim =
    std::size_t{kLabChannels} * kScales * kOrientations * kHistogramBins * kDescriptorValues;
static_assert(kDescriptorDim == 576);

inline constexpr int kDefaultMaxKeypoints = 512;
inline constexpr double kDefaultThresholdFraction = 0.05;

struct Keypoint {
  int x = 0;  // level-0 pixel coordinates
  int y = 0;
  int level = 0;
  double saliency = 0;

  int level_x() const { return x >> level; }
  int level_y() const { return y >> level; }

  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

/// Layout [channel][scale][orientation][bin][value], L1-normalized (or all zero).
struct PatchDescriptor {
  std::array<float, kDescriptorDim> values{};

  static constexpr std::size_t index(int channel, int scale, int orientation, int bin, int value) {
    return ((((static_cast<std::size_t>(channel) * kScales + scale) * kOrientations + orientation) *
                 kHistogramBins +
             bin) *
                kDescriptorValues +
            value);
  }

  float at(int channel, int scale, int orientation, int bin, int value) const {
    return values[index(channel, scale, orientation, bin, value)];
  }

  bool is_zero() const {
    return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f; });
  }

  friend bool operator==(const PatchDescriptor&, const PatchDescriptor&) = default;
};

/// Filter magnitudes for one pyramid level over an ROI, indexed [channel][scale][orientation].
struct LevelResponses {
  Rect roi;
  std::array<std::vector<float>, kLabChannels * kScales * kOrientations> magnitude;

  static constexpr int plane(int channel, int scale, int orientation) {
    return (channel * kScales + scale) * kOrientations + orientation;
  }

  float at(int channel, int scale, int orientation, int x, int y) const {
    return magnitude[plane(channel, scale, orientation)]
                    [static_cast<std::size_t>(y - roi.y) * roi.width + (x - roi.x)];
  }
};

namespace detail {

inline void store_magnitudes(const OrientedResponses& r, std::span<std::vector<float>, kOrientations> dst) {
  const std::size_t n = r.even[0].size();
  for (int o = 0; o < kOrientations; ++o) {
    dst[o].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = r.magnitude(o, i);
      dst[o][i] = m < kResponseFloor ? 0.0f : static_cast<float>(m);
    }
  }
}

}  // namespace detail

/// Evaluates the requested channels and scales over an ROI of a level; the rest stay empty.
inline LevelResponses compute_level_responses(const LabImage& level, const FilterBank& bank, Rect roi,
                                              std::span<const int> channels, std::span<const int> scales) {
  LevelResponses out;
  out.roi = roi;
  for (int c : channels) {
    for (int s : scales) {
      const auto r = oriented_responses(level.channel(c), level.width, level.height, bank, s, roi);
      detail::store_magnitudes(r, std::span<std::vector<float>, kOrientations>(
                                      out.magnitude.data() + LevelResponses::plane(c, s, 0), kOrientations));
    }
  }
  return out;
}

inline LevelResponses compute_level_responses(const LabImage& level, const FilterBank& bank, Rect roi) {
  static constexpr int kAllChannels[] = {0, 1, 2};
  static constexpr int kAllScales[] = {0, 1, 2, 3};
  return compute_level_responses(level, bank, roi, kAllChannels, kAllScales);
}

/// Lazily evaluated, thread-safe full-level responses for a pyramid.
class PyramidResponses {
 public:
  PyramidResponses(const LabPyramid& pyr, const FilterBank& bank) : pyr_(&pyr), bank_(&bank) {}

  const LabPyramid& pyramid() const { return *pyr_; }
  const FilterBank& bank() const { return *bank_; }

  /// Saliency = sum over orientations of L-channel response magnitude at the finest kernel scale.
  const std::vector<float>& saliency(int level) const {
    auto& slot = levels_[level];
    std::call_once(slot.saliency_once, [&] {
      const LabImage& img = pyr_->levels[level];
      static constexpr int kL[] = {static_cast<int>(LabChannel::kL)};
      static constexpr int kFinest[] = {0};
      const auto r = compute_level_responses(img, *bank_, Rect{0, 0, img.width, img.height}, kL, kFinest);
      slot.saliency.assign(static_cast<std::size_t>(img.width) * img.height, 0.0f);
      for (int o = 0; o < kOrientations; ++o) {
        const auto& m = r.magnitude[LevelResponses::plane(0, 0, o)];
        for (std::size_t i = 0; i < m.size(); ++i) slot.saliency[i] += m[i];
      }
    });
    return slot.saliency;
  }

  const LevelResponses& responses(int level) const {
    auto& slot = levels_[level];
    std::call_once(slot.full_once, [&] {
      const LabImage& img = pyr_->levels[level];
      slot.full = compute_level_responses(img, *bank_, Rect{0, 0, img.width, img.height});
    });
    return slot.full;
  }

 private:
  struct Slot {
    std::once_flag saliency_once;
    std::vector<float> saliency;
    std::once_flag full_once;
    LevelResponses full;
  };

  const LabPyramid* pyr_;
  const FilterBank* bank_;
  mutable std::array<Slot, kPyramidLevels> levels_;
};

/// 3x3 local maxima of the saliency maps whose patch fits the level, pooled across
/// levels, sorted by saliency (ties by level, y, x) and truncated to max_keypoints.
inline std::vector<Keypoint> detect_keypoints(const PyramidResponses& responses,
                                              int max_keypoints = kDefaultMaxKeypoints,
                                              double threshold_fraction = kDefaultThresholdFraction) {
  const LabPyramid& pyr = responses.pyramid();
  float global_max = 0;
  for (int l = 0; l < kPyramidLevels; ++l) {
    for (float v : responses.saliency(l)) global_max = std::max(global_max, v);
  }
  std::vector<Keypoint> out;
  if (global_max <= 0) return out;
  const double threshold = threshold_fraction * global_max;

  for (int l = 0; l < kPyramidLevels; ++l) {
    const LabImage& img = pyr.levels[l];
    if (img.width < kPatchSize || img.height < kPatchSize) continue;
    const auto& sal = responses.saliency(l);
    auto at = [&](int x, int y) { return sal[static_cast<std::size_t>(y) * img.width + x]; };
    for (int y = kPatchHalf; y <= img.height - kPatchHalf; ++y) {
      for (int x = kPatchHalf; x <= img.width - kPatchHalf; ++x) {
        const float v = at(x, y);
        if (v <= 0 || v < threshold) continue;
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const float n = at(x + dx, y + dy);
            // Plateaus keep only their first pixel in raster order.
            const bool before = dy < 0 || (dy == 0 && dx < 0);
            if (n > v || (before && n == v)) {
              is_max = false;
              break;
            }
          }
        }
        if (is_max) out.push_back({x << l, y << l, l, v});
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.saliency != b.saliency) return a.saliency > b.saliency;
    if (a.level != b.level) return a.level < b.level;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (out.size() > static_cast<std::size_t>(std::max(0, max_keypoints))) out.resize(max_keypoints);
  return out;
}

inline std::vector<Keypoint> detect_keypoints(const LabPyramid& pyr, const FilterBank& bank,
                                              int max_keypoints = kDefaultMaxKeypoints,
                                              double threshold_fraction = kDefaultThresholdFraction) {
  PyramidResponses responses(pyr, bank);
  return detect_keypoints(responses, max_keypoints, threshold_fraction);
}

inline int histogram_bin(float value) {
  return std::clamp(static_cast<int>(value * kHistogramBins), 0, kHistogramBins - 1);
}

/// Texture-weighted colour histograms of the 32x32 patch around kp on its level.
/// Value 0 of each bin sums response magnitude; value 1 weights it by L intensity.
inline PatchDescriptor extract_descriptor(const LabImage& level, const LevelResponses& responses,
                                          const Keypoint& kp) {
  std::array<double, kDescriptorDim> acc{};
  const int x0 = kp.level_x() - kPatchHalf;
  const int y0 = kp.level_y() - kPatchHalf;
  for (int c = 0; c < kLabChannels; ++c) {
    for (int s = 0; s < kScales; ++s) {
      for (int o = 0; o < kOrientations; ++o) {
        for (int y = y0; y < y0 + kPatchSize; ++y) {
          for (int x = x0; x < x0 + kPatchSize; ++x) {
            const double m = responses.at(c, s, o, x, y);
            if (m == 0) continue;
            const int bin = histogram_bin(level.at(c, x, y));
            acc[PatchDescriptor::index(c, s, o, bin, 0)] += m;
            acc[PatchDescriptor::index(c, s, o, bin, 1)] += m * level.at(0, x, y);
          }
        }
      }
    }
  }
  PatchDescriptor d;
  double total = 0;
  for (double v : acc) total += v;
  if (total <= 0) return d;
  for (std::size_t i = 0; i < kDescriptorDim; ++i) d.values[i] = static_cast<float>(acc[i] / total);
  return d;
}

/// Standalone form: evaluates responses only on a window around the patch.
inline PatchDescriptor extract_descriptor(const LabPyramid& pyr, const FilterBank& bank, const Keypoint& kp) {
  const LabImage& level = pyr.levels[kp.level];
  const Rect roi{kp.level_x() - kPatchHalf, kp.level_y() - kPatchHalf, kPatchSize, kPatchSize};
  return extract_descriptor(level, compute_level_responses(level, bank, roi), kp);
}

struct ExtractionOptions {
  int max_keypoints = kDefaultMaxKeypoints;
  double threshold_fraction = kDefaultThresholdFraction;
  unsigned workers = 1;
};

struct ImageFeatures {
  std::vector<Keypoint> keypoints;  // aligned with descriptors
  std::vector<PatchDescriptor> descriptors;
};

/// Full extraction: Lab -> pyramid -> keypoints -> descriptors, dropping all-zero descriptors.
inline ImageFeatures extract_features(const RgbImage& img, const FilterBank& bank,
                                      const ExtractionOptions& opts = {}) {
  if (img.width < kMinImageSide || img.height < kMinImageSide) {
    throw Error(ErrorCode::kTooSmall, "image smaller than 32x32");
  }
  const LabPyramid pyr = build_pyramid(rgb_to_lab(img));
  PyramidResponses responses(pyr, bank);
  const auto keypoints = detect_keypoints(responses, opts.max_keypoints, opts.threshold_fraction);
  for (int l = 0; l < kPyramidLevels; ++l) {
    if (std::any_of(keypoints.begin(), keypoints.end(), [l](const Keypoint& k) { return k.level == l; })) {
      responses.responses(l);
    }
  }
  std::vector<PatchDescriptor> descs(keypoints.size());
  detail::parallel_for(
      keypoints.size(),
      [&](std::size_t i) {
        const auto& kp = keypoints[i];
        descs[i] = extract_descriptor(pyr.levels[kp.level], responses.responses(kp.level), kp);
      },
      opts.workers);
  ImageFeatures out;
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (descs[i].is_zero()) continue;
    out.keypoints.push_back(keypoints[i]);
    out.descriptors.push_back(descs[i]);
  }
  return out;
}

inline std::vector<PatchDescriptor> describe_image(const RgbImage& img, const FilterBank& bank,
                                                   const ExtractionOptions& opts = {}) {
  return extract_features(img, bank, opts).descriptors;
}

}  // namespace vsearch
