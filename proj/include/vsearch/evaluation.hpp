#pragma once

// Detection evaluation: per-category average precision at an IoU threshold and
// the mean over categories.

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "vsearch/error.hpp"
#include "vsearch/localiser.hpp"

namespace vsearch {

struct ImageDetection {
  std::string image_id;
  Detection detection;
};

/// Per-image annotated boxes; confidences are ignored.
using GroundTruth = AnnotationMap;

/// All-point interpolated AP. Detections of the category are taken by descending
/// confidence; each claims the unmatched ground-truth box of its image with the
/// highest IoU if that IoU is strictly above the threshold. No ground truth -> 0.
inline double average_precision(const std::vector<ImageDetection>& dets, const GroundTruth& gt,
                                const std::string& category, double iou_threshold = 0.5) {
  std::map<std::string, std::vector<BBox>> truth;
  std::size_t positives = 0;
  for (const auto& [image, boxes] : gt) {
    for (const auto& b : boxes) {
      if (b.category != category) continue;
      truth[image].push_back(b.box);
      ++positives;
    }
  }
  if (positives == 0) return 0.0;

  std::vector<const ImageDetection*> ranked;
  for (const auto& d : dets) {
    if (d.detection.category == category) ranked.push_back(&d);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const ImageDetection* a, const ImageDetection* b) {
    return a->detection.confidence > b->detection.confidence;
  });

  std::map<std::string, std::vector<bool>> matched;
  for (const auto& [image, boxes] : truth) matched[image].assign(boxes.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto* d : ranked) {
    bool hit = false;
    if (const auto it = truth.find(d->image_id); it != truth.end()) {
      auto& used = matched[d->image_id];
      double best = 0;
      std::size_t best_i = it->second.size();
      for (std::size_t i = 0; i < it->second.size(); ++i) {
        if (used[i]) continue;
        const double o = iou(d->detection.box, it->second[i]);
        if (o > best) {
          best = o;
          best_i = i;
        }
      }
      if (best_i < it->second.size() && best > iou_threshold) {
        used[best_i] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }

  // Monotone precision envelope, integrated over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

inline double mean_ap(const std::vector<double>& aps) {
  if (aps.empty()) throw Error(ErrorCode::kInvalidArgument, "mean AP over zero categories");
  return std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
}

struct CategoryAp {
  std::string category;
  double ap = 0;
};

struct EvaluationReport {
  std::vector<CategoryAp> per_category;
  double map = 0;
};

/// Categories follow the default order first, then any others alphabetically.
inline EvaluationReport evaluate(const std::vector<ImageDetection>& dets, const GroundTruth& gt,
                                 double iou_threshold = 0.5) {
  std::vector<std::string> seen;
  auto note = [&](const std::string& c) {
    if (std::find(seen.begin(), seen.end(), c) == seen.end()) seen.push_back(c);
  };
  for (const auto& [_, boxes] : gt) {
    for (const auto& b : boxes) note(b.category);
  }
  for (const auto& d : dets) note(d.detection.category);
  const auto& defaults = default_categories();
  auto rank = [&](const std::string& c) {
    const auto it = std::find(defaults.begin(), defaults.end(), c);
    return static_cast<std::size_t>(it - defaults.begin());
  };
  std::sort(seen.begin(), seen.end(), [&](const std::string& a, const std::string& b) {
    return rank(a) != rank(b) ? rank(a) < rank(b) : a < b;
  });
  EvaluationReport report;
  std::vector<double> aps;
  for (const auto& c : seen) {
    report.per_category.push_back({c, average_precision(dets, gt, c, iou_threshold)});
    aps.push_back(report.per_category.back().ap);
  }
  report.map = aps.empty() ? 0.0 : mean_ap(aps);
  return report;
}

inline std::vector<ImageDetection> flatten_detections(const AnnotationMap& m) {
  std::vector<ImageDetection> out;
  for (const auto& [image, dets] : m) {
    for (const auto& d : dets) out.push_back({image, d});
  }
  return out;
}

}  // namespace vsearch
