#pragma once

// Detector plug-in that forwards images to a remote localisation endpoint
// speaking the /v1/localise protocol.

#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vsearch/localiser.hpp"

namespace vsearch {

class RemoteDetector : public Detector {
 public:
  /// base_url like "http://host:port"; model is forwarded in the request params.
  RemoteDetector(std::string base_url, std::string model, int timeout_seconds = 30)
      : base_url_(std::move(base_url)), model_(std::move(model)), timeout_seconds_(timeout_seconds) {}

  std::vector<Detection> detect(const RgbImage& img) const override {
    httplib::Client client(base_url_);
    client.set_read_timeout(timeout_seconds_, 0);
    client.set_connection_timeout(timeout_seconds_, 0);
    const auto png = encode_png(img);
    nlohmann::json params = {{"conf_thresh", 0.0}};
    if (!model_.empty()) params["model"] = model_;
    httplib::MultipartFormDataItems items = {
        {"image", std::string(png.begin(), png.end()), "image.png", "image/png"},
        {"params", params.dump(), "", "application/json"},
    };
    const auto res = client.Post("/v1/localise", items);
    if (!res) throw Error(ErrorCode::kDetectorError, base_url_ + ": " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw Error(ErrorCode::kDetectorError, base_url_ + " returned HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    try {
      return nlohmann::json::parse(res->body).at("detections").get<std::vector<Detection>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kDetectorError, base_url_ + ": bad response: " + e.what());
    }
  }

 private:
  std::string base_url_;
  std::string model_;
  int timeout_seconds_;
};

}  // namespace vsearch
