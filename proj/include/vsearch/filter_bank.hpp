#pragma once

// Oriented complex band-pass filter bank.
//
// Each kernel is a steered quadrature pair: the even part is the second
// derivative of a Gaussian (G2) and the odd part its polynomial Hilbert
// approximation (H2), both built from the separable G2/H2 steerable basis.
// Scale s dilates the 9x9 base kernel by 2^s with zero insertion, so every
// scale keeps zero DC and unit L2 norm exactly.

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace vsearch {

inline constexpr int kScales = 4;
inline constexpr int kOrientations = 4;
inline constexpr int kBaseTaps = 9;
inline constexpr int kBaseRadius = kBaseTaps / 2;

/// Largest kernel radius in the bank (scale 3).
inline constexpr int kMaxKernelRadius = kBaseRadius << (kScales - 1);

/// Magnitudes below this are numerical noise from the zero-DC cancellation.
inline constexpr double kResponseFloor = 1e-9;

inline constexpr double orientation_degrees(int o) { return 45.0 * o; }

/// Dense complex kernel, row-major, applied as a correlation.
struct Kernel {
  int size = 0;
  std::vector<std::complex<double>> coeffs;

  std::complex<double> at(int x, int y) const { return coeffs[static_cast<std::size_t>(y) * size + x]; }
  int radius() const { return size / 2; }
};

class FilterBank {
 public:
  // 1-D factors of the separable basis.
  enum Factor { kGauss, kEven2, kOdd1, kOdd3, kEvenOdd, kFactorCount };
  // Separable basis: G2a, G2b, G2c (even) then H2a..H2d (odd).
  static constexpr int kBasisCount = 7;
  static constexpr std::array<std::array<Factor, 2>, kBasisCount> kBasis = {{
      {kEven2, kGauss},
      {kOdd1, kOdd1},
      {kGauss, kEven2},
      {kOdd3, kGauss},
      {kEvenOdd, kOdd1},
      {kOdd1, kEvenOdd},
      {kGauss, kOdd3},
  }};

  using Taps = std::array<double, kBaseTaps>;

  FilterBank() {
    constexpr double kSpacing = 0.67;
    for (int t = 0; t < kBaseTaps; ++t) {
      const double u = (t - kBaseRadius) * kSpacing;
      const double g = std::exp(-u * u);
      factors_[kGauss][t] = g;
      factors_[kEven2][t] = 0.9213 * (2 * u * u - 1) * g;
      factors_[kOdd1][t] = u * g;
      factors_[kOdd3][t] = 0.978 * (u * u * u - 2.254 * u) * g;
      factors_[kEvenOdd][t] = 0.978 * (u * u - 0.7515) * g;
    }
    // Force the even second-derivative factor to zero sum so G2a/G2c have no DC.
    double even_sum = 0, gauss_sum = 0;
    for (int t = 0; t < kBaseTaps; ++t) {
      even_sum += factors_[kEven2][t];
      gauss_sum += factors_[kGauss][t];
    }
    for (int t = 0; t < kBaseTaps; ++t) factors_[kEven2][t] -= even_sum / gauss_sum * factors_[kGauss][t];
    // G2b carries 2x the G2a gain.
    for (auto& v : factors_[kOdd1]) v *= std::sqrt(2 * 0.9213);

    for (int o = 0; o < kOrientations; ++o) {
      const double th = orientation_degrees(o) * std::numbers::pi / 180.0;
      const double c = std::cos(th), s = std::sin(th);
      auto& w = steer_[o];
      w = {c * c, -2 * c * s, s * s, c * c * c, -3 * c * c * s, 3 * c * s * s, -s * s * s};
      // H2b/H2c use kOdd1 (scaled above) as one factor; undo that gain.
      w[4] /= std::sqrt(2 * 0.9213);
      w[5] /= std::sqrt(2 * 0.9213);
      const Kernel base = steered_kernel(o);
      double energy = 0;
      for (const auto& k : base.coeffs) energy += std::norm(k);
      const double gain = 1.0 / std::sqrt(energy);
      for (auto& v : w) v *= gain;
    }
    for (int s = 0; s < kScales; ++s) {
      for (int o = 0; o < kOrientations; ++o) kernels_[s * kOrientations + o] = dilate(steered_kernel(o), 1 << s);
    }
  }

  /// Dilated complex kernel for (scale, orientation).
  const Kernel& kernel(int scale, int orientation) const { return kernels_[scale * kOrientations + orientation]; }

  std::size_t size() const { return kernels_.size(); }

  const Taps& factor(Factor f) const { return factors_[f]; }

  /// Per-orientation weights over the 7 separable basis responses, unit-norm gain folded in.
  const std::array<double, kBasisCount>& steering(int orientation) const { return steer_[orientation]; }

 private:
  Kernel steered_kernel(int o) const {
    Kernel k;
    k.size = kBaseTaps;
    k.coeffs.resize(kBaseTaps * kBaseTaps);
    const auto& w = steer_[o];
    for (int y = 0; y < kBaseTaps; ++y) {
      for (int x = 0; x < kBaseTaps; ++x) {
        double even = 0, odd = 0;
        for (int b = 0; b < kBasisCount; ++b) {
          const double v = factors_[kBasis[b][0]][x] * factors_[kBasis[b][1]][y];
          (b < 3 ? even : odd) += w[b] * v;
        }
        k.coeffs[y * kBaseTaps + x] = {even, odd};
      }
    }
    return k;
  }

  static Kernel dilate(const Kernel& base, int step) {
    Kernel k;
    k.size = (base.size - 1) * step + 1;
    k.coeffs.assign(static_cast<std::size_t>(k.size) * k.size, {0.0, 0.0});
    for (int y = 0; y < base.size; ++y) {
      for (int x = 0; x < base.size; ++x) k.coeffs[static_cast<std::size_t>(y * step) * k.size + x * step] = base.at(x, y);
    }
    return k;
  }

  std::array<Taps, kFactorCount> factors_{};
  std::array<std::array<double, kBasisCount>, kOrientations> steer_{};
  std::array<Kernel, kScales * kOrientations> kernels_{};
};

inline FilterBank make_filter_bank() { return FilterBank(); }

namespace detail {

// Symmetric reflection without edge repeat: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace detail

/// Window of a plane on which responses are evaluated.
struct Rect {
  int x = 0, y = 0, width = 0, height = 0;
};

/// Complex responses of the 4 orientations at one scale, over an ROI.
struct OrientedResponses {
  Rect roi;
  std::array<std::vector<double>, kOrientations> even;
  std::array<std::vector<double>, kOrientations> odd;

  double magnitude(int o, std::size_t i) const { return std::hypot(even[o][i], odd[o][i]); }
};

/// Separable fast path: correlates a plane with the steered kernels at one scale.
/// Pixels outside the plane are reflected, so any ROI yields the same values as
/// the corresponding region of a full-plane evaluation.
inline OrientedResponses oriented_responses(std::span<const float> plane, int width, int height,
                                            const FilterBank& bank, int scale, Rect roi) {
  const int step = 1 << scale;
  const int radius = kBaseRadius * step;
  OrientedResponses out;
  out.roi = roi;
  const std::size_t n = static_cast<std::size_t>(roi.width) * roi.height;
  for (int o = 0; o < kOrientations; ++o) {
    out.even[o].assign(n, 0.0);
    out.odd[o].assign(n, 0.0);
  }
  if (n == 0) return out;

  // Horizontal pass over the rows the vertical pass will read.
  const int rows = roi.height + 2 * radius;
  std::array<std::vector<double>, FilterBank::kFactorCount> horiz;
  for (auto& h : horiz) h.assign(static_cast<std::size_t>(rows) * roi.width, 0.0);
  std::vector<double> padded(static_cast<std::size_t>(roi.width) + 2 * radius);
  for (int r = 0; r < rows; ++r) {
    const int sy = detail::reflect(roi.y - radius + r, height);
    const float* src = plane.data() + static_cast<std::size_t>(sy) * width;
    for (int i = 0; i < static_cast<int>(padded.size()); ++i) padded[i] = src[detail::reflect(roi.x - radius + i, width)];
    for (int f = 0; f < FilterBank::kFactorCount; ++f) {
      const auto& taps = bank.factor(static_cast<FilterBank::Factor>(f));
      double* dst = horiz[f].data() + static_cast<std::size_t>(r) * roi.width;
      for (int t = 0; t < kBaseTaps; ++t) {
        const double k = taps[t];
        const double* p = padded.data() + t * step;
        for (int x = 0; x < roi.width; ++x) dst[x] += k * p[x];
      }
    }
  }

  // Vertical pass per basis, steered into every orientation.
  std::vector<double> basis(static_cast<std::size_t>(roi.width));
  for (int y = 0; y < roi.height; ++y) {
    for (int b = 0; b < FilterBank::kBasisCount; ++b) {
      const auto& vtaps = bank.factor(FilterBank::kBasis[b][1]);
      const auto& h = horiz[FilterBank::kBasis[b][0]];
      std::fill(basis.begin(), basis.end(), 0.0);
      for (int t = 0; t < kBaseTaps; ++t) {
        const double k = vtaps[t];
        const double* row = h.data() + static_cast<std::size_t>(y + t * step) * roi.width;
        for (int x = 0; x < roi.width; ++x) basis[x] += k * row[x];
      }
      for (int o = 0; o < kOrientations; ++o) {
        const double w = bank.steering(o)[b];
        auto& dst = b < 3 ? out.even[o] : out.odd[o];
        double* d = dst.data() + static_cast<std::size_t>(y) * roi.width;
        for (int x = 0; x < roi.width; ++x) d[x] += w * basis[x];
      }
    }
  }
  return out;
}

}  // namespace vsearch
