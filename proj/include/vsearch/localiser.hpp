#pragma once

// Detector abstraction, hot-swappable registry and category mutual-exclusion.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vsearch/error.hpp"
#include "vsearch/imaging.hpp"

namespace vsearch {

struct BBox {
  double x = 0, y = 0;  // top-left
  double w = 0, h = 0;

  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Detection {
  std::string category;
  double confidence = 0;
  BBox box;

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline const std::vector<std::string>& default_categories() {
  static const std::vector<std::string> kCategories = {"jacket", "dress", "skirt", "top", "trousers", "purse", "shoe"};
  return kCategories;
}

using ExclusionPairs = std::vector<std::pair<std::string, std::string>>;

inline ExclusionPairs default_exclusions() { return {{"dress", "top"}, {"dress", "skirt"}}; }

/// Drops the lower-confidence member of every opposing-category pair overlapping
/// with IoU above the threshold. Detections are visited by confidence (ties in
/// input order) and kept unless they clash with one already kept, which makes the
/// result a fixed point. Survivors keep their input order.
inline std::vector<Detection> resolve_exclusions(const std::vector<Detection>& dets,
                                                 const ExclusionPairs& pairs = default_exclusions(),
                                                 double iou_threshold = 0.5) {
  auto opposed = [&](const std::string& a, const std::string& b) {
    return std::any_of(pairs.begin(), pairs.end(), [&](const auto& p) {
      return (p.first == a && p.second == b) || (p.first == b && p.second == a);
    });
  };
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<bool> keep(dets.size(), false);
  std::vector<std::size_t> kept;
  for (auto i : order) {
    const bool clash = std::any_of(kept.begin(), kept.end(), [&](std::size_t j) {
      return opposed(dets[i].category, dets[j].category) && iou(dets[i].box, dets[j].box) > iou_threshold;
    });
    if (!clash) {
      keep[i] = true;
      kept.push_back(i);
    }
  }
  std::vector<Detection> out;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (keep[i]) out.push_back(dets[i]);
  }
  return out;
}

// JSON: {"category": ..., "confidence": ..., "box": {"x","y","w","h"}}
inline void to_json(nlohmann::json& j, const BBox& b) { j = {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}}; }

inline void from_json(const nlohmann::json& j, BBox& b) {
  b.x = j.at("x").get<double>();
  b.y = j.at("y").get<double>();
  b.w = j.at("w").get<double>();
  b.h = j.at("h").get<double>();
}

inline void to_json(nlohmann::json& j, const Detection& d) {
  j = {{"category", d.category}, {"confidence", d.confidence}, {"box", d.box}};
}

inline void from_json(const nlohmann::json& j, Detection& d) {
  d.category = j.at("category").get<std::string>();
  d.confidence = j.value("confidence", 1.0);
  d.box = j.at("box").get<BBox>();
}

/// Keyed annotation document: key -> list of detections.
using AnnotationMap = std::map<std::string, std::vector<Detection>>;

inline AnnotationMap load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in).get<AnnotationMap>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, path.string() + ": " + e.what());
  }
}

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<Detection> detect(const RgbImage& img) const = 0;
};

/// Echoes detections stored for the image's content hash; unknown images yield none.
class FixtureDetector : public Detector {
 public:
  explicit FixtureDetector(AnnotationMap annotations) : annotations_(std::move(annotations)) {}

  std::vector<Detection> detect(const RgbImage& img) const override {
    const auto it = annotations_.find(content_hash(img));
    return it == annotations_.end() ? std::vector<Detection>{} : it->second;
  }

 private:
  AnnotationMap annotations_;
};

/// One whole-image box per configured category at confidence 0.5.
class WholeFrameDetector : public Detector {
 public:
  explicit WholeFrameDetector(std::vector<std::string> categories = default_categories())
      : categories_(std::move(categories)) {}

  std::vector<Detection> detect(const RgbImage& img) const override {
    std::vector<Detection> out;
    for (const auto& c : categories_) out.push_back({c, 0.5, {0, 0, double(img.width), double(img.height)}});
    return out;
  }

 private:
  std::vector<std::string> categories_;
};

/// Named detectors with an active default. Installing under an existing name
/// swaps it atomically; calls already holding the old detector finish on it.
class DetectorRegistry {
 public:
  explicit DetectorRegistry(std::vector<std::string> categories = default_categories())
      : categories_(std::move(categories)) {}

  void install(const std::string& name, std::shared_ptr<const Detector> detector) {
    std::unique_lock lock(mutex_);
    detectors_[name] = std::move(detector);
    if (default_.empty()) default_ = name;
  }

  bool remove(const std::string& name) {
    std::unique_lock lock(mutex_);
    if (detectors_.erase(name) == 0) return false;
    if (default_ == name) default_ = detectors_.empty() ? std::string() : detectors_.begin()->first;
    return true;
  }

  void set_default(const std::string& name) {
    std::unique_lock lock(mutex_);
    if (!detectors_.contains(name)) throw Error(ErrorCode::kUnknownModel, name);
    default_ = name;
  }

  std::string default_name() const {
    std::shared_lock lock(mutex_);
    return default_;
  }

  /// Empty name selects the default.
  std::shared_ptr<const Detector> find(const std::string& name) const {
    std::shared_lock lock(mutex_);
    const auto it = detectors_.find(name.empty() ? default_ : name);
    if (it == detectors_.end()) throw Error(ErrorCode::kUnknownModel, "no detector named '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, _] : detectors_) out.push_back(name);
    return out;
  }

  bool empty() const {
    std::shared_lock lock(mutex_);
    return detectors_.empty();
  }

  const std::vector<std::string>& categories() const { return categories_; }

  bool has_category(const std::string& c) const {
    return std::find(categories_.begin(), categories_.end(), c) != categories_.end();
  }

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const Detector>> detectors_;
  std::string default_;
  std::vector<std::string> categories_;
};

/// Runs a registered detector, keeps detections with confidence >= threshold and
/// clips their boxes to the image.
inline std::vector<Detection> detect(const DetectorRegistry& reg, const std::string& model, const RgbImage& img,
                                     double conf_threshold) {
  const auto detector = reg.find(model);
  std::vector<Detection> raw;
  try {
    raw = detector->detect(img);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kDetectorError, e.what());
  }
  std::vector<Detection> out;
  for (auto& d : raw) {
    if (!reg.has_category(d.category)) throw Error(ErrorCode::kDetectorError, "unconfigured category '" + d.category + "'");
    if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) throw Error(ErrorCode::kDetectorError, "confidence outside [0,1]");
    if (d.confidence < conf_threshold) continue;
    const double x0 = std::clamp(d.box.x, 0.0, double(img.width));
    const double y0 = std::clamp(d.box.y, 0.0, double(img.height));
    const double x1 = std::clamp(d.box.x + d.box.w, 0.0, double(img.width));
    const double y1 = std::clamp(d.box.y + d.box.h, 0.0, double(img.height));
    d.box = {x0, y0, x1 - x0, y1 - y0};
    if (d.box.valid()) out.push_back(std::move(d));
  }
  return out;
}

}  // namespace vsearch
