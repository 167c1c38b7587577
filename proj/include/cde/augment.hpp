#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cde/rng.hpp"

namespace cde {

/// Offsets for one random-shift draw: the image is zero-padded by `pad` on
/// every side and cropped back at (ox, oy) ∈ [0, 2·pad]². ox = oy = pad is
/// the identity.
struct Shift {
  int ox = 0, oy = 0;
};

inline Shift draw_shift(int pad, Rng& rng) {
  if (pad < 0) throw std::invalid_argument("augment: negative padding");
  return Shift{static_cast<int>(rng.uniform_int(2 * pad + 1)),
               static_cast<int>(rng.uniform_int(2 * pad + 1))};
}

/// Apply one shift to a planar [C, V, V] u8 image (any channel count, so
/// frame stacks and mask stacks shift with the same call). Pixels pulled in
/// from outside the original image are zero.
inline void apply_shift(const std::uint8_t* src, std::uint8_t* dst, std::int64_t channels,
                        std::int64_t v, int pad, const Shift& s) {
  const std::int64_t dy = static_cast<std::int64_t>(s.oy) - pad;
  const std::int64_t dx = static_cast<std::int64_t>(s.ox) - pad;
  for (std::int64_t c = 0; c < channels; ++c) {
    const std::uint8_t* sp = src + c * v * v;
    std::uint8_t* dp = dst + c * v * v;
    for (std::int64_t y = 0; y < v; ++y) {
      const std::int64_t sy = y + dy;
      for (std::int64_t x = 0; x < v; ++x) {
        const std::int64_t sx = x + dx;
        dp[y * v + x] = (sy >= 0 && sy < v && sx >= 0 && sx < v) ? sp[sy * v + sx] : 0;
      }
    }
  }
}

/// Random-shift augmentation of a registered (observation, mask) pair: one
/// draw, the same offset applied to both, so they stay pixel-aligned.
inline Shift augment_pair(std::vector<std::uint8_t>& obs, std::vector<std::uint8_t>& masks,
                          std::int64_t obs_channels, std::int64_t mask_channels, std::int64_t v,
                          int pad, Rng& rng) {
  if (static_cast<std::int64_t>(obs.size()) != obs_channels * v * v)
    throw std::invalid_argument("augment: observation size mismatch");
  if (static_cast<std::int64_t>(masks.size()) != mask_channels * v * v)
    throw std::invalid_argument("augment: mask size mismatch");
  const Shift s = draw_shift(pad, rng);
  if (pad == 0) return s;  // identity
  std::vector<std::uint8_t> tmp(obs.size());
  apply_shift(obs.data(), tmp.data(), obs_channels, v, pad, s);
  obs.swap(tmp);
  tmp.resize(masks.size());
  apply_shift(masks.data(), tmp.data(), mask_channels, v, pad, s);
  masks.swap(tmp);
  return s;
}

}  // namespace cde
