#pragma once

// Independent reference computations that the library is checked against.
// None of these share code paths with the implementation under test.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "vsearch/filter_bank.hpp"
#include "vsearch/shards.hpp"
#include "vsearch/signature.hpp"

namespace oracle {

/// sRGB -> Lab with the RGB->XYZ matrix derived from the primaries' chromaticities
/// and the D65 white point, rather than tabulated constants.
inline std::array<double, 3> lab(int r8, int g8, int b8) {
  auto xyz_of = [](double x, double y) { return Eigen::Vector3d(x / y, 1.0, (1 - x - y) / y); };
  Eigen::Matrix3d prim;
  prim.col(0) = xyz_of(0.64, 0.33);
  prim.col(1) = xyz_of(0.30, 0.60);
  prim.col(2) = xyz_of(0.15, 0.06);
  const Eigen::Vector3d white = xyz_of(0.3127, 0.3290);
  const Eigen::Vector3d scale = prim.colPivHouseholderQr().solve(white);
  const Eigen::Matrix3d m = prim * scale.asDiagonal();
  auto lin = [](int v) {
    const double c = v / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const Eigen::Vector3d xyz = m * Eigen::Vector3d(lin(r8), lin(g8), lin(b8));
  auto f = [](double t) {
    const double d = 6.0 / 29.0;
    return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
  };
  const double fx = f(xyz[0] / white[0]), fy = f(xyz[1] / white[1]), fz = f(xyz[2] / white[2]);
  return {116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)};
}

inline int reflect101(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

/// Direct 2-D correlation of a plane with an explicit kernel at one pixel.
inline std::complex<double> correlate(const std::vector<float>& plane, int w, int h, const vsearch::Kernel& k, int x,
                                      int y) {
  const int r = k.size / 2;
  std::complex<double> acc = 0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const auto c = k.at(dx + r, dy + r);
      if (c == std::complex<double>(0, 0)) continue;
      acc += c * static_cast<double>(plane[static_cast<std::size_t>(reflect101(y + dy, h)) * w + reflect101(x + dx, w)]);
    }
  }
  return acc;
}

/// Dense saliency map of one level by direct correlation.
inline std::vector<double> saliency(const vsearch::LabImage& level, const vsearch::FilterBank& bank) {
  std::vector<double> out(static_cast<std::size_t>(level.width) * level.height, 0.0);
  for (int o = 0; o < vsearch::kOrientations; ++o) {
    for (int y = 0; y < level.height; ++y) {
      for (int x = 0; x < level.width; ++x) {
        out[static_cast<std::size_t>(y) * level.width + x] += std::abs(correlate(level.planes[0], level.width, level.height, bank.kernel(0, o), x, y));
      }
    }
  }
  return out;
}

/// Dense L1-normalized histogram of a signature.
inline std::vector<double> dense(const vsearch::Signature& s, std::uint32_t k) {
  std::vector<double> v(k, 0.0);
  double total = 0;
  for (const auto& e : s.entries()) total += e.count;
  for (const auto& e : s.entries()) v[e.word] = e.count / total;
  return v;
}

/// Dense chi-squared: sum (q-d)^2/(q+d), 0/0 -> 0.
inline double chi2(const std::vector<double>& q, const std::vector<double>& d) {
  double acc = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double s = q[i] + d[i];
    if (s > 0) acc += (q[i] - d[i]) * (q[i] - d[i]) / s;
  }
  return acc;
}

/// Chi-squared with words in [lo, hi) removed from the shared-word sum.
inline double chi2_without(const std::vector<double>& q, const std::vector<double>& d, std::uint32_t lo,
                           std::uint32_t hi) {
  double shared = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (i >= lo && i < hi) continue;
    if (q[i] > 0 && d[i] > 0) shared += q[i] * d[i] / (q[i] + d[i]);
  }
  return 2 - 4 * shared;
}

/// Nearest centre by exhaustive double-precision search, ties to the lowest id.
inline std::uint32_t nearest(const vsearch::Codebook& cb, const float* x) {
  double best = std::numeric_limits<double>::infinity();
  std::uint32_t arg = 0;
  for (std::uint32_t w = 0; w < cb.k(); ++w) {
    const auto c = cb.centre(w);
    double d = 0;
    for (std::size_t j = 0; j < cb.dim(); ++j) {
      const double t = static_cast<double>(x[j]) - c[j];
      d += t * t;
    }
    if (d < best) {
      best = d;
      arg = w;
    }
  }
  return arg;
}

struct Ranked {
  vsearch::ImageId id;
  double distance;
};

/// Brute-force ranking by dense chi-squared; images with no shared word omitted.
inline std::vector<Ranked> rank(const std::vector<double>& q, const std::vector<std::pair<vsearch::ImageId, std::vector<double>>>& corpus,
                                std::size_t top_k, std::uint32_t drop_lo = 0, std::uint32_t drop_hi = 0) {
  std::vector<Ranked> out;
  for (const auto& [id, d] : corpus) {
    bool shared = false;
    for (std::size_t i = 0; i < q.size() && !shared; ++i) {
      if (i >= drop_lo && i < drop_hi) continue;
      shared = q[i] > 0 && d[i] > 0;
    }
    if (!shared) continue;
    out.push_back({id, drop_hi > drop_lo ? chi2_without(q, d, drop_lo, drop_hi) : chi2(q, d)});
  }
  std::sort(out.begin(), out.end(), [](const Ranked& a, const Ranked& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  if (out.size() > top_k) out.resize(top_k);
  return out;
}

/// Rankings agree when ids match position by position, except that entries whose
/// oracle distances differ by at most `tie` may appear in either order.
inline bool same_ranking(const std::vector<vsearch::RankedResult>& got, const std::vector<Ranked>& want,
                         double tol = 1e-9, double tie = 1e-12) {
  if (got.size() != want.size()) return false;
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (std::abs(got[i].distance - want[i].distance) > tol) return false;
    if (got[i].image_id == want[i].id) continue;
    bool tied = false;
    for (std::size_t j = 0; j < want.size(); ++j) {
      if (want[j].id == got[i].image_id && std::abs(want[j].distance - want[i].distance) <= tie) tied = true;
    }
    if (!tied) return false;
  }
  return true;
}

/// All-point interpolated AP from a precision/recall sequence.
inline double ap_from_pr(std::vector<double> precision, const std::vector<double>& recall) {
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0, prev = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

}  // namespace oracle
