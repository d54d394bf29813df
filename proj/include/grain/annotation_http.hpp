#pragma once

// JSON-over-HTTP clients for the annotation pipeline.
//
//   POST <base>/generate  {"image_id", "image_path", "kind", "prompt"} -> {"text"}
//   POST <base>/detect    {"image_id", "image_path", "query"}
//                         -> {"proposals": [[x0, y0, x1, y1, score], ...]}
//
// Detection corners are in the sample's pixel space. Transport errors and
// non-200 replies raise ClientFailure.

#include <Eigen/Core>  // ahead of httplib.h, whose <resolv.h> defines _res
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <string>

#include "grain/annotation.hpp"

namespace grain {

namespace http_detail {

inline nlohmann::json post_json(const std::string& base_url, const std::string& path, const nlohmann::json& body,
                                int timeout_s) {
  httplib::Client client(base_url);
  client.set_connection_timeout(timeout_s, 0);
  client.set_read_timeout(timeout_s, 0);
  auto res = client.Post(path, body.dump(), "application/json");
  if (!res) throw ClientFailure("request to " + base_url + path + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw ClientFailure("request to " + base_url + path + " returned HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw ClientFailure("malformed reply from " + base_url + path + ": " + e.what());
  }
}

}  // namespace http_detail

class HttpGenerationClient : public GenerationClient {
 public:
  explicit HttpGenerationClient(std::string base_url, int timeout_s = 30)
      : base_url_(std::move(base_url)), timeout_s_(timeout_s) {}

  std::string generate(const GenerationRequest& request) override {
    const auto reply = http_detail::post_json(base_url_, "/generate",
                                              {{"image_id", request.sample->image_id},
                                               {"image_path", request.sample->image_path},
                                               {"kind", prompt_kind_name(request.kind)},
                                               {"prompt", request.prompt}},
                                              timeout_s_);
    if (!reply.contains("text") || !reply["text"].is_string()) throw ClientFailure("generation reply has no text");
    return reply["text"].get<std::string>();
  }

  std::string identifier() const override { return "http-generation:" + base_url_; }

 private:
  std::string base_url_;
  int timeout_s_;
};

class HttpDetectionClient : public DetectionClient {
 public:
  explicit HttpDetectionClient(std::string base_url, int timeout_s = 30)
      : base_url_(std::move(base_url)), timeout_s_(timeout_s) {}

  std::vector<DetectorProposal> detect(const ImageSample& sample, const std::string& query) override {
    const auto reply = http_detail::post_json(
        base_url_, "/detect", {{"image_id", sample.image_id}, {"image_path", sample.image_path}, {"query", query}},
        timeout_s_);
    if (!reply.contains("proposals") || !reply["proposals"].is_array())
      throw ClientFailure("detection reply has no proposals");
    std::vector<DetectorProposal> out;
    try {
      for (const auto& p : reply["proposals"])
        out.push_back({rescale_to_normalized({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>(),
                                              p.at(3).get<double>()},
                                             sample.image.width, sample.image.height),
                       p.at(4).get<double>(), query});
    } catch (const nlohmann::json::exception& e) {
      throw ClientFailure(std::string("malformed proposal: ") + e.what());
    } catch (const DegenerateBox& e) {
      throw ClientFailure(std::string("degenerate proposal: ") + e.what());
    }
    return out;
  }

  std::string identifier() const override { return "http-detection:" + base_url_; }

 private:
  std::string base_url_;
  int timeout_s_;
};

}  // namespace grain
