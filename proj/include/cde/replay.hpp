#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <vector>

#include "cde/concept_source.hpp"
#include "cde/rng.hpp"
#include "cde/wristworld.hpp"

namespace cde {

/// One stored environment step: the action taken from the previous
/// observation, the reward frozen at collection time, and the done flag.
struct StoredStep {
  std::array<double, 2> action{0.0, 0.0};
  double reward_total = 0.0;
  bool done = false;
};

/// An n-step training sample, fully materialized: stacked observations at u8
/// precision, the masks registered to the first and last observation, the
/// n-step discounted reward, and whether the target should bootstrap.
struct Sample {
  std::vector<std::uint8_t> obs;       // [3K, V, V]
  std::vector<std::uint8_t> next_obs;  // [3K, V, V]
  std::vector<std::uint8_t> mask_stack;       // [K, V, V], masks for obs frames
  std::vector<std::uint8_t> next_mask_stack;  // [K, V, V]
  std::array<double, 2> action{0.0, 0.0};
  double reward_nstep = 0.0;  // sum_k gamma^k r_{t+k}
  bool bootstrap = true;      // false when the window ends at a done step
};

/// Episodic replay storage. Frames and masks are stored once per observation
/// (not per transition) and stacks are materialized at sample time, which
/// keeps memory at one frame per step. Masks are bit-packed. n-step windows
/// never cross an episode boundary.
class ReplayBuffer {
 public:
  ReplayBuffer(std::int64_t capacity_steps, std::int64_t view_size, int frame_stack)
      : capacity_(capacity_steps),
        v_(view_size),
        k_(frame_stack),
        frame_bytes_(3 * view_size * view_size),
        mask_words_((view_size * view_size + 63) / 64) {
    if (capacity_ < 1) throw std::invalid_argument("replay: capacity must be positive");
  }

  std::int64_t size_steps() const { return total_steps_; }
  std::int64_t num_episodes() const { return static_cast<std::int64_t>(eps_.size()); }

  /// Open a new episode from a reset observation and its mask.
  void begin_episode(const std::vector<std::uint8_t>& observation, const Mask& mask) {
    eps_.emplace_back();
    push_frame(eps_.back(), observation, mask);
    evict();
  }

  /// Append one step: the action/reward leading to `observation`.
  void add_step(const std::array<double, 2>& action, double reward_total, bool done,
                const std::vector<std::uint8_t>& observation, const Mask& mask) {
    if (eps_.empty()) throw std::runtime_error("replay: add_step before begin_episode");
    Episode& ep = eps_.back();
    if (!ep.steps.empty() && ep.steps.back().done)
      throw std::runtime_error("replay: episode already closed");
    ep.steps.push_back(StoredStep{action, reward_total, done});
    push_frame(ep, observation, mask);
    ++total_steps_;
    evict();
  }

  std::int64_t valid_starts(int n_step) const {
    check_n(n_step);
    std::int64_t total = 0;
    for (const Episode& ep : eps_)
      total += std::max<std::int64_t>(0, ep.length() - n_step + 1);
    return total;
  }

  /// Visit every legal window start as (episode_index, t).
  template <typename F>
  void for_each_valid_start(int n_step, F&& f) const {
    check_n(n_step);
    for (std::size_t e = 0; e < eps_.size(); ++e)
      for (std::int64_t t = 0; t + n_step <= eps_[e].length(); ++t)
        f(static_cast<std::int64_t>(e), t);
  }

  /// Uniformly draw `count` window starts over all valid (episode, t) pairs.
  std::vector<std::pair<std::int64_t, std::int64_t>> draw_starts(int count, int n_step,
                                                                 Rng& rng) const {
    check_n(n_step);
    std::vector<std::int64_t> cumulative;  // per-episode running total of valid starts
    cumulative.reserve(eps_.size());
    std::int64_t total = 0;
    for (const Episode& ep : eps_) {
      total += std::max<std::int64_t>(0, ep.length() - n_step + 1);
      cumulative.push_back(total);
    }
    if (total == 0) throw std::runtime_error("replay: no valid n-step windows to sample");
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const std::int64_t u = rng.uniform_int(total);
      const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
      const std::int64_t e = it - cumulative.begin();
      const std::int64_t before = e == 0 ? 0 : cumulative[static_cast<std::size_t>(e - 1)];
      out.emplace_back(e, u - before);
    }
    return out;
  }

  /// Build the full sample for window start (episode, t).
  Sample materialize(std::int64_t episode, std::int64_t t, int n_step, double discount) const {
    check_n(n_step);
    if (episode < 0 || episode >= num_episodes())
      throw std::out_of_range("replay: bad episode index");
    const Episode& ep = eps_[static_cast<std::size_t>(episode)];
    if (t < 0 || t + n_step > ep.length())
      throw std::out_of_range("replay: window leaves the episode");
    Sample s;
    stack_into(ep, t, s.obs, s.mask_stack);
    stack_into(ep, t + n_step, s.next_obs, s.next_mask_stack);
    s.action = ep.steps[static_cast<std::size_t>(t)].action;
    double g = 1.0;
    for (int k = 0; k < n_step; ++k) {
      s.reward_nstep += g * ep.steps[static_cast<std::size_t>(t + k)].reward_total;
      g *= discount;
    }
    s.bootstrap = !ep.steps[static_cast<std::size_t>(t + n_step - 1)].done;
    return s;
  }

  /// Stored reward of one step, for reward-freezing checks.
  double stored_reward(std::int64_t episode, std::int64_t t) const {
    return eps_.at(static_cast<std::size_t>(episode)).steps.at(static_cast<std::size_t>(t))
        .reward_total;
  }

 private:
  struct Episode {
    std::vector<std::uint8_t> frames;       // (T+1) * frame_bytes
    std::vector<std::uint64_t> mask_words;  // (T+1) * mask_words_per
    std::vector<StoredStep> steps;          // T

    std::int64_t length() const { return static_cast<std::int64_t>(steps.size()); }
  };

  std::int64_t capacity_, v_;
  int k_;
  std::int64_t frame_bytes_, mask_words_;
  std::deque<Episode> eps_;
  std::int64_t total_steps_ = 0;

  static void check_n(int n_step) {
    if (n_step < 1) throw std::invalid_argument("replay: n_step must be >= 1");
  }

  void push_frame(Episode& ep, const std::vector<std::uint8_t>& observation, const Mask& mask) {
    if (static_cast<std::int64_t>(observation.size()) != frame_bytes_ * k_)
      throw std::invalid_argument("replay: observation size mismatch");
    if (mask.h != v_ || mask.w != v_)
      throw std::invalid_argument("replay: mask size mismatch");
    // newest frame only; earlier frames of the stack are already stored
    const std::uint8_t* newest = observation.data() + observation.size() - frame_bytes_;
    ep.frames.insert(ep.frames.end(), newest, newest + frame_bytes_);
    const std::size_t base = ep.mask_words.size();
    ep.mask_words.resize(base + static_cast<std::size_t>(mask_words_), 0);
    for (std::int64_t i = 0; i < v_ * v_; ++i)
      if (mask.bits[static_cast<std::size_t>(i)])
        ep.mask_words[base + static_cast<std::size_t>(i / 64)] |= std::uint64_t(1) << (i % 64);
  }

  /// Rebuild the K-frame stack (and registered mask stack) ending at
  /// observation index `t`; indices before the episode start repeat frame 0,
  /// mirroring how the environment fills its stack at reset.
  void stack_into(const Episode& ep, std::int64_t t, std::vector<std::uint8_t>& obs,
                  std::vector<std::uint8_t>& masks) const {
    obs.resize(static_cast<std::size_t>(frame_bytes_ * k_));
    masks.resize(static_cast<std::size_t>(v_ * v_ * k_));
    for (int s = 0; s < k_; ++s) {
      const std::int64_t idx = std::max<std::int64_t>(0, t - (k_ - 1 - s));
      std::copy_n(ep.frames.data() + idx * frame_bytes_, frame_bytes_,
                  obs.data() + s * frame_bytes_);
      const std::uint64_t* words = ep.mask_words.data() + idx * mask_words_;
      std::uint8_t* dst = masks.data() + s * v_ * v_;
      for (std::int64_t i = 0; i < v_ * v_; ++i)
        dst[i] = static_cast<std::uint8_t>((words[i / 64] >> (i % 64)) & 1);
    }
  }

  void evict() {
    while (total_steps_ > capacity_ && eps_.size() > 1) {
      total_steps_ -= eps_.front().length();
      eps_.pop_front();
    }
  }
};

}  // namespace cde
