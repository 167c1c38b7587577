#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cde/concept_source.hpp"
#include "cde/remote_seg.hpp"
#include "cde/wristworld.hpp"

namespace cde {

using ColorTable = std::map<std::string, Rgb>;

/// Object-name -> color lookup for the mock segmenter, pairing the concept
/// list with the world's palette (target name gets the target color, the
/// rest get distractor colors in order).
inline ColorTable make_color_table(const ConceptSpec& concept_spec, const WorldSpec& world) {
  ColorTable table;
  std::size_t next_distractor = 0;
  for (int i = 0; i < static_cast<int>(concept_spec.object_names.size()); ++i) {
    if (i == concept_spec.target_index) {
      table[concept_spec.object_names[static_cast<std::size_t>(i)]] = world.target_color;
    } else {
      if (next_distractor >= world.distractor_colors.size())
        throw std::invalid_argument("color table: more object names than colors");
      table[concept_spec.object_names[static_cast<std::size_t>(i)]] =
          world.distractor_colors[next_distractor++];
    }
  }
  return table;
}

/// Exact-color segmentation of an interleaved RGB image: one mask per
/// requested name; unknown names segment to all zeros.
inline std::vector<std::vector<std::uint8_t>> segment_by_color(
    const std::vector<std::uint8_t>& rgb, std::int64_t width, std::int64_t height,
    const std::vector<std::string>& names, const ColorTable& table) {
  if (static_cast<std::int64_t>(rgb.size()) != 3 * width * height)
    throw std::runtime_error("segment_by_color: image size mismatch");
  std::vector<std::vector<std::uint8_t>> masks;
  for (const std::string& name : names) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(width * height), 0);
    auto it = table.find(name);
    if (it != table.end()) {
      const Rgb& c = it->second;
      for (std::int64_t p = 0; p < width * height; ++p)
        if (rgb[static_cast<std::size_t>(3 * p)] == c[0] &&
            rgb[static_cast<std::size_t>(3 * p + 1)] == c[1] &&
            rgb[static_cast<std::size_t>(3 * p + 2)] == c[2])
          m[static_cast<std::size_t>(p)] = 1;
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

/// Mock segmentation service: answers POST /segment by exact color match.
/// Stands in for the VLM endpoint during training and tests.
class SegServer {
 public:
  explicit SegServer(ColorTable table) : table_(std::move(table)) {
    server_.Post("/segment", [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res);
    });
  }

  /// Bind to an OS-assigned port; returns the port. Serve with listen_after_bind().
  int bind_any_port(const std::string& host = "127.0.0.1") {
    const int port = server_.bind_to_any_port(host);
    if (port <= 0) throw std::runtime_error("seg server: failed to bind");
    return port;
  }
  void listen_after_bind() { server_.listen_after_bind(); }

  /// Blocking serve on a fixed port.
  void listen(const std::string& host, int port) {
    if (!server_.listen(host, port))
      throw std::runtime_error("seg server: failed to listen on port " + std::to_string(port));
  }
  void wait_until_ready() { server_.wait_until_ready(); }
  void stop() { server_.stop(); }

  std::int64_t requests_served() const { return served_; }

  /// Inject synthetic corruption: every returned mask pixel is flipped
  /// independently with this probability, deterministically per request
  /// index. Zero (the default) serves exact masks.
  void set_noise(double flip_prob, std::uint64_t seed) {
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0))
      throw std::invalid_argument("seg server: flip probability outside [0,1]");
    flip_prob_ = flip_prob;
    noise_seed_ = seed;
  }

 private:
  ColorTable table_;
  httplib::Server server_;
  std::atomic<std::int64_t> served_{0};
  double flip_prob_ = 0.0;
  std::uint64_t noise_seed_ = 0;

  void handle(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(req.body);
      const std::int64_t width = j.at("width").get<std::int64_t>();
      const std::int64_t height = j.at("height").get<std::int64_t>();
      const std::vector<std::uint8_t> rgb = base64_decode(j.at("rgb").get<std::string>());
      const std::vector<std::string> names = j.at("objects").get<std::vector<std::string>>();
      auto masks = segment_by_color(rgb, width, height, names, table_);
      const std::int64_t request_index = served_++;
      if (flip_prob_ > 0.0) {
        for (std::size_t mi = 0; mi < masks.size(); ++mi) {
          Rng rng = keyed_rng(noise_seed_, static_cast<std::uint64_t>(request_index), mi);
          for (auto& bit : masks[mi])
            if (rng.bernoulli(flip_prob_)) bit = bit ? 0 : 1;
        }
      }
      nlohmann::json out;
      out["masks"] = nlohmann::json::array();
      for (const auto& m : masks) out["masks"].push_back(m);
      res.set_content(out.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      nlohmann::json err;
      err["error"] = e.what();
      res.set_content(err.dump(), "application/json");
    }
  }
};

}  // namespace cde
