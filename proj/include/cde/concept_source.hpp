#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cde/rng.hpp"
#include "cde/wristworld.hpp"

namespace cde {

/// Binary segmentation mask at view resolution.
struct Mask {
  std::int64_t h = 0, w = 0;
  std::vector<std::uint8_t> bits;  // row-major, {0,1}

  Mask() = default;
  Mask(std::int64_t height, std::int64_t width)
      : h(height), w(width), bits(static_cast<std::size_t>(height * width), 0) {}
  Mask(std::int64_t height, std::int64_t width, std::vector<std::uint8_t> b)
      : h(height), w(width), bits(std::move(b)) {
    if (static_cast<std::int64_t>(bits.size()) != h * w)
      throw std::invalid_argument("mask: bit count does not match dimensions");
  }

  std::int64_t popcount() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

struct NoiseParams {
  double flip_prob = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (flip_prob < 0.0 || flip_prob > 1.0)
      throw std::invalid_argument("noise: flip_prob outside [0,1]");
  }
};

struct PresenceGate {
  int epsilon = 20;

  void validate() const {
    if (epsilon < 1) throw std::invalid_argument("presence: epsilon must be >= 1");
  }
};

/// The object list the task description expands to, loaded from config.
struct ConceptSpec {
  std::string task_description;
  std::vector<std::string> object_names;
  int target_index = 0;

  const std::string& target_name() const {
    return object_names[static_cast<std::size_t>(target_index)];
  }
};

inline ConceptSpec parse_concept_spec(const nlohmann::json& j) {
  ConceptSpec spec;
  if (!j.contains("task") || !j["task"].is_string())
    throw std::runtime_error("concept spec: missing string field 'task'");
  if (!j.contains("objects") || !j["objects"].is_array())
    throw std::runtime_error("concept spec: missing array field 'objects'");
  spec.task_description = j["task"].get<std::string>();
  for (const auto& o : j["objects"]) {
    if (!o.is_string()) throw std::runtime_error("concept spec: 'objects' entries must be strings");
    spec.object_names.push_back(o.get<std::string>());
  }
  if (spec.object_names.empty()) throw std::runtime_error("concept spec: 'objects' is empty");
  spec.target_index = j.value("target_index", 0);
  if (spec.target_index < 0 ||
      spec.target_index >= static_cast<int>(spec.object_names.size()))
    throw std::runtime_error("concept spec: 'target_index' out of range");
  return spec;
}

inline ConceptSpec load_concept_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("concept spec: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("concept spec: invalid JSON in '" + path + "': " + e.what());
  }
  return parse_concept_spec(j);
}

/// Ground-truth channel: the simulator's mask, unchanged.
inline Mask gt_mask(const StepResult& sr, std::int64_t view_size) {
  return Mask(view_size, view_size, sr.gt_mask);
}

/// Independently invert each pixel with probability flip_prob. Noise is
/// counter-keyed on (seed, episode, step) so replays reproduce it exactly.
inline Mask synthetic_noise(const Mask& m, const NoiseParams& params, std::uint64_t episode,
                            std::uint64_t step) {
  params.validate();
  Mask out = m;
  Rng rng = keyed_rng(params.seed, episode, step);
  for (auto& b : out.bits)
    if (rng.bernoulli(params.flip_prob)) b ^= 1;
  return out;
}

/// Eq-style binary gate: present iff at least epsilon pixels are active.
inline int presence(const Mask& m, const PresenceGate& gate) {
  gate.validate();
  return m.popcount() >= gate.epsilon ? 1 : 0;
}

enum class MaskMode { kGroundTruth, kSyntheticNoise, kRemote };

inline const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::kGroundTruth: return "gt";
    case MaskMode::kSyntheticNoise: return "sn";
    case MaskMode::kRemote: return "remote";
  }
  return "?";
}

/// Produces the training-time mask for each collected observation under one
/// of the three settings. Every query is counted, which lets evaluation
/// assert that deployment never consults the oracle. The remote transport is
/// injected as a callable so this header stays free of network code.
class ConceptSource {
 public:
  using RemoteFn =
      std::function<Mask(const std::uint8_t* rgb_planar, std::int64_t view_size)>;

  MaskMode mode = MaskMode::kGroundTruth;
  NoiseParams noise;
  RemoteFn remote_fn;

  explicit ConceptSource(MaskMode m = MaskMode::kGroundTruth) : mode(m) {}

  std::int64_t calls() const { return calls_; }
  std::int64_t remote_failures() const { return remote_failures_; }
  void reset_counters() { calls_ = remote_failures_ = 0; }

  /// Mask for the newest frame of `sr` under the configured setting.
  Mask mask_for(const StepResult& sr, std::int64_t view_size, std::uint64_t episode,
                std::uint64_t step) {
    ++calls_;
    switch (mode) {
      case MaskMode::kGroundTruth:
        return gt_mask(sr, view_size);
      case MaskMode::kSyntheticNoise:
        return synthetic_noise(gt_mask(sr, view_size), noise, episode, step);
      case MaskMode::kRemote: {
        if (!remote_fn) throw std::runtime_error("concept source: remote mode without transport");
        // newest frame sits at the back of the stacked observation
        const std::size_t per = static_cast<std::size_t>(3 * view_size * view_size);
        const std::uint8_t* rgb = sr.observation.data() + (sr.observation.size() - per);
        try {
          return remote_fn(rgb, view_size);
        } catch (const std::exception& e) {
          ++remote_failures_;
          std::cerr << "[concept-source] remote segmentation failed (" << e.what()
                    << "); falling back to empty mask\n";
          return Mask(view_size, view_size);
        }
      }
    }
    throw std::logic_error("concept source: unknown mode");
  }

 private:
  std::int64_t calls_ = 0;
  std::int64_t remote_failures_ = 0;
};

}  // namespace cde
