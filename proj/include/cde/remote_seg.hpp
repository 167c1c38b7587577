#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cde/concept_source.hpp"

namespace cde {

// ---- base64 (standard alphabet, padded) --------------------------------

inline std::string base64_encode(const std::uint8_t* data, std::size_t len) {
  static const char* tab = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (std::size_t i = 0; i < len; i += 3) {
    std::uint32_t v = static_cast<std::uint32_t>(data[i]) << 16;
    if (i + 1 < len) v |= static_cast<std::uint32_t>(data[i + 1]) << 8;
    if (i + 2 < len) v |= data[i + 2];
    out.push_back(tab[(v >> 18) & 63]);
    out.push_back(tab[(v >> 12) & 63]);
    out.push_back(i + 1 < len ? tab[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < len ? tab[v & 63] : '=');
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (s.size() % 4 != 0) throw std::runtime_error("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int pad = 0;
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=') {
        ++pad;
        v <<= 6;
      } else {
        const int d = val(c);
        if (d < 0 || pad > 0) throw std::runtime_error("base64: invalid character");
        v = (v << 6) | static_cast<std::uint32_t>(d);
      }
    }
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 255));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 255));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 255));
  }
  return out;
}

// ---- resolution bridging -----------------------------------------------

/// Nearest-neighbour upsample of a planar [3, V, V] frame to interleaved
/// RGB at remote resolution R x R (R >= V).
inline std::vector<std::uint8_t> upsample_rgb(const std::uint8_t* planar, std::int64_t v,
                                              std::int64_t r) {
  if (r < v) throw std::invalid_argument("upsample_rgb: remote resolution below view size");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(3 * r * r));
  for (std::int64_t y = 0; y < r; ++y) {
    const std::int64_t sy = y * v / r;
    for (std::int64_t x = 0; x < r; ++x) {
      const std::int64_t sx = x * v / r;
      for (int ch = 0; ch < 3; ++ch)
        out[static_cast<std::size_t>((y * r + x) * 3 + ch)] =
            planar[ch * v * v + sy * v + sx];
    }
  }
  return out;
}

/// Majority-vote pooling of an R x R binary mask down to V x V. Window
/// boundaries follow floor(i*R/V); ties count as active. When R is an exact
/// multiple of V this inverts nearest-neighbour upsampling bit for bit.
inline Mask downsample_mask(const std::vector<std::uint8_t>& bits, std::int64_t r,
                            std::int64_t v) {
  if (static_cast<std::int64_t>(bits.size()) != r * r)
    throw std::runtime_error("downsample_mask: dimension mismatch");
  Mask out(v, v);
  for (std::int64_t i = 0; i < v; ++i) {
    const std::int64_t y0 = i * r / v, y1 = (i + 1) * r / v;
    for (std::int64_t j = 0; j < v; ++j) {
      const std::int64_t x0 = j * r / v, x1 = (j + 1) * r / v;
      std::int64_t on = 0;
      for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x) on += bits[static_cast<std::size_t>(y * r + x)];
      const std::int64_t total = (y1 - y0) * (x1 - x0);
      out.bits[static_cast<std::size_t>(i * v + j)] = (2 * on >= total) ? 1 : 0;
    }
  }
  return out;
}

// ---- client ------------------------------------------------------------

struct RemoteConfig {
  std::string host = "127.0.0.1";
  int port = 8090;
  std::int64_t remote_size = 320;  // requested working resolution (rounded to a multiple of V)
  int attempts = 3;
  int backoff_ms = 100;  // doubles per retry
  int timeout_s = 5;
};

/// Blocking client for the segmentation endpoint: upsamples the frame,
/// POSTs /segment, and downsamples the requested object's mask back to view
/// resolution. Retries with exponential backoff before giving up.
class RemoteMaskClient {
 public:
  RemoteMaskClient(RemoteConfig cfg, std::vector<std::string> object_names)
      : cfg_(std::move(cfg)), objects_(std::move(object_names)) {
    if (objects_.empty()) throw std::invalid_argument("remote client: empty object list");
  }

  const RemoteConfig& config() const { return cfg_; }

  /// Masks for every configured object, at view resolution.
  std::vector<Mask> segment(const std::uint8_t* rgb_planar, std::int64_t view_size) {
    // integer upsample factor keeps majority pooling an exact inverse
    const std::int64_t factor = std::max<std::int64_t>(1, cfg_.remote_size / view_size);
    const std::int64_t r = factor * view_size;
    nlohmann::json req;
    req["width"] = r;
    req["height"] = r;
    const std::vector<std::uint8_t> rgb = upsample_rgb(rgb_planar, view_size, r);
    req["rgb"] = base64_encode(rgb.data(), rgb.size());
    req["objects"] = objects_;
    const std::string body = req.dump();

    std::string last_error;
    for (int attempt = 0; attempt < cfg_.attempts; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(
            std::chrono::milliseconds(cfg_.backoff_ms * (1 << (attempt - 1))));
      try {
        return post_once(body, r, view_size);
      } catch (const std::exception& e) {
        last_error = e.what();
      }
    }
    throw std::runtime_error("remote client: giving up after " + std::to_string(cfg_.attempts) +
                             " attempts: " + last_error);
  }

 private:
  RemoteConfig cfg_;
  std::vector<std::string> objects_;

  std::vector<Mask> post_once(const std::string& body, std::int64_t r, std::int64_t v) {
    httplib::Client cli(cfg_.host, cfg_.port);
    cli.set_connection_timeout(cfg_.timeout_s, 0);
    cli.set_read_timeout(cfg_.timeout_s, 0);
    httplib::Result res = cli.Post("/segment", body, "application/json");
    if (!res) throw std::runtime_error("transport error contacting segmentation server");
    if (res->status != 200)
      throw std::runtime_error("segmentation server returned status " +
                               std::to_string(res->status));
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("malformed response JSON: ") + e.what());
    }
    if (!resp.contains("masks") || !resp["masks"].is_array() ||
        resp["masks"].size() != objects_.size())
      throw std::runtime_error("response missing one mask per object");
    std::vector<Mask> out;
    for (const auto& jm : resp["masks"]) {
      std::vector<std::uint8_t> bits;
      bits.reserve(jm.size());
      for (const auto& b : jm) bits.push_back(b.get<int>() ? 1 : 0);
      if (static_cast<std::int64_t>(bits.size()) != r * r)
        throw std::runtime_error("response mask has wrong dimensions: got " +
                                 std::to_string(bits.size()) + " values, expected " +
                                 std::to_string(r * r));
      out.push_back(downsample_mask(bits, r, v));
    }
    return out;
  }
};

/// Adapter plugging the remote client into a ConceptSource: returns the
/// target object's mask.
inline ConceptSource::RemoteFn make_remote_fn(std::shared_ptr<RemoteMaskClient> client,
                                              int target_index) {
  return [client, target_index](const std::uint8_t* rgb, std::int64_t v) {
    return client->segment(rgb, v).at(static_cast<std::size_t>(target_index));
  };
}

}  // namespace cde
