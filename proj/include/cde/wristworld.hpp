#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cde/rng.hpp"

namespace cde {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline double dist(const Vec2& a, const Vec2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

using Rgb = std::array<std::uint8_t, 3>;

enum class Variant { kSingleTarget, kMultiKnob };

/// Static description of a world. The view is an egocentric crop centered on
/// the effector; the target object is always objects[0].
struct WorldSpec {
  std::int64_t world_size = 64;
  std::int64_t view_size = 24;
  int n_distractors = 2;
  Rgb target_color{200, 40, 40};
  std::vector<Rgb> distractor_colors{{40, 80, 200}, {40, 180, 90}, {210, 200, 60}};
  double object_radius = 3.0;
  double touch_radius = 3.0;
  double max_move = 3.0;
  int max_steps = 100;
  int frame_stack = 3;
  Variant variant = Variant::kSingleTarget;

  void validate() const {
    if (world_size < 1) throw std::invalid_argument("world: world_size must be positive");
    if (view_size < 1 || view_size > world_size)
      throw std::invalid_argument("world: view_size must be in [1, world_size]");
    if (n_distractors < 0) throw std::invalid_argument("world: n_distractors negative");
    if (static_cast<int>(distractor_colors.size()) < n_distractors)
      throw std::invalid_argument("world: not enough distractor colors");
    if (object_radius <= 0.0) throw std::invalid_argument("world: object_radius must be positive");
    if (touch_radius < 1.0) throw std::invalid_argument("world: touch_radius must be >= 1");
    if (max_move <= 0.0) throw std::invalid_argument("world: max_move must be positive");
    if (max_steps < 1) throw std::invalid_argument("world: max_steps must be positive");
    if (frame_stack < 1) throw std::invalid_argument("world: frame_stack must be positive");
    if (variant == Variant::kSingleTarget) {
      // distinct colors so objects are tellable apart (and from each other)
      std::vector<Rgb> all{target_color};
      all.insert(all.end(), distractor_colors.begin(),
                 distractor_colors.begin() + n_distractors);
      for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t j = i + 1; j < all.size(); ++j)
          if (all[i] == all[j])
            throw std::invalid_argument("world: object colors must be pairwise distinct");
    } else if (n_distractors < 1) {
      throw std::invalid_argument("world: multi-knob variant needs at least one distractor");
    }
  }

  int n_objects() const { return 1 + n_distractors; }

  /// Color an object is drawn in; in the multi-knob variant every knob looks
  /// like the target.
  Rgb object_color(int idx) const {
    if (idx == 0 || variant == Variant::kMultiKnob) return target_color;
    return distractor_colors[static_cast<std::size_t>(idx - 1)];
  }
};

inline WorldSpec multi_knob_spec() {
  WorldSpec s;
  s.variant = Variant::kMultiKnob;
  s.n_distractors = 3;  // four visually identical knobs in total
  return s;
}

struct WorldState {
  Vec2 effector;
  std::vector<Vec2> objects;  // objects[0] is the target
  Rng rng{0};
};

struct Action {
  double dx = 0.0, dy = 0.0;
};

struct StepResult {
  std::vector<std::uint8_t> observation;  // [3*frame_stack, V, V]
  std::vector<std::uint8_t> gt_mask;      // [V, V], {0,1}
  double reward_env = 0.0;
  bool done = false;
  bool success = false;
  Vec2 effector_pos;
};

/// The world backdrop encodes position: red grows with x, green with y. This
/// keeps distinct places visually distinct even when no object is in view,
/// which a memoryless egocentric policy needs in order to navigate.
inline Rgb background_color(const WorldSpec& spec, std::int64_t wx, std::int64_t wy) {
  const std::int64_t den = std::max<std::int64_t>(1, spec.world_size - 1);
  return Rgb{static_cast<std::uint8_t>((wx * 120) / den),
             static_cast<std::uint8_t>((wy * 120) / den), 30};
}

/// Color of one world cell (pixel centers at +0.5). Objects are painted over
/// the backdrop; the target is painted last so it wins any overlap.
inline Rgb world_pixel_color(const WorldSpec& spec, const WorldState& st, std::int64_t wx,
                             std::int64_t wy) {
  Rgb c = background_color(spec, wx, wy);
  const Vec2 p{static_cast<double>(wx) + 0.5, static_cast<double>(wy) + 0.5};
  for (int i = spec.n_objects() - 1; i >= 0; --i)
    if (dist(p, st.objects[static_cast<std::size_t>(i)]) <= spec.object_radius)
      c = spec.object_color(i);
  return c;
}

/// Cell the effector currently occupies (positions on the far boundary fold
/// into the last cell).
inline std::int64_t cell_of(double v, std::int64_t world_size) {
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(v)), 0, world_size - 1);
}

/// Top-left world cell of the egocentric crop.
inline std::pair<std::int64_t, std::int64_t> crop_origin(const WorldSpec& spec,
                                                         const Vec2& effector) {
  return {cell_of(effector.x, spec.world_size) - spec.view_size / 2,
          cell_of(effector.y, spec.world_size) - spec.view_size / 2};
}

/// Render the egocentric view: RGB frame [3, V, V] (planar) and the target
/// mask [V, V]. Cells outside the world are black and never masked.
inline void render_crop(const WorldSpec& spec, const WorldState& st,
                        std::vector<std::uint8_t>& frame, std::vector<std::uint8_t>& mask) {
  const std::int64_t V = spec.view_size;
  frame.assign(static_cast<std::size_t>(3 * V * V), 0);
  mask.assign(static_cast<std::size_t>(V * V), 0);
  const auto [cx, cy] = crop_origin(spec, st.effector);
  for (std::int64_t i = 0; i < V; ++i) {
    const std::int64_t wy = cy + i;
    for (std::int64_t j = 0; j < V; ++j) {
      const std::int64_t wx = cx + j;
      if (wx < 0 || wx >= spec.world_size || wy < 0 || wy >= spec.world_size) continue;
      const Rgb c = world_pixel_color(spec, st, wx, wy);
      frame[static_cast<std::size_t>(0 * V * V + i * V + j)] = c[0];
      frame[static_cast<std::size_t>(1 * V * V + i * V + j)] = c[1];
      frame[static_cast<std::size_t>(2 * V * V + i * V + j)] = c[2];
      const Vec2 p{static_cast<double>(wx) + 0.5, static_cast<double>(wy) + 0.5};
      if (dist(p, st.objects[0]) <= spec.object_radius)
        mask[static_cast<std::size_t>(i * V + j)] = 1;
    }
  }
}

/// Egocentric 2-D manipulation world. Value semantics: copying the object
/// copies the whole episode state, so parallel rollouts just use one instance
/// per thread.
class WristWorld {
 public:
  explicit WristWorld(WorldSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const WorldSpec& spec() const { return spec_; }
  const WorldState& state() const { return st_; }
  int steps_done() const { return step_count_; }
  bool episode_done() const { return done_; }

  StepResult reset(std::uint64_t seed) {
    st_.rng = Rng(seed);
    place_objects();
    st_.effector = Vec2{0.5, 0.5};  // fixed start corner
    step_count_ = 0;
    done_ = false;
    live_ = true;
    std::vector<std::uint8_t> frame, mask;
    render_crop(spec_, st_, frame, mask);
    stack_.clear();
    for (int k = 0; k < spec_.frame_stack; ++k) stack_.push_back(frame);
    return result(mask, 0.0, false);
  }

  StepResult step(const Action& action) {
    if (!live_) throw std::runtime_error("step: reset the environment first");
    if (done_) throw std::runtime_error("step: episode already finished");
    const double dx = std::clamp(action.dx, -1.0, 1.0) * spec_.max_move;
    const double dy = std::clamp(action.dy, -1.0, 1.0) * spec_.max_move;
    st_.effector.x = std::clamp(st_.effector.x + dx, 0.0, static_cast<double>(spec_.world_size));
    st_.effector.y = std::clamp(st_.effector.y + dy, 0.0, static_cast<double>(spec_.world_size));
    ++step_count_;
    const bool success = dist(st_.effector, st_.objects[0]) <= spec_.touch_radius;
    done_ = success || step_count_ >= spec_.max_steps;
    std::vector<std::uint8_t> frame, mask;
    render_crop(spec_, st_, frame, mask);
    stack_.pop_front();
    stack_.push_back(std::move(frame));
    return result(mask, success ? 1.0 : 0.0, success);
  }

 private:
  WorldSpec spec_;
  WorldState st_;
  int step_count_ = 0;
  bool done_ = false;
  bool live_ = false;
  std::deque<std::vector<std::uint8_t>> stack_;  // oldest first

  void place_objects() {
    const double r = spec_.object_radius;
    const double W = static_cast<double>(spec_.world_size);
    if (2.0 * r > W)
      throw std::runtime_error("placement failed: object_radius too large for world");
    st_.objects.clear();
    for (int i = 0; i < spec_.n_objects(); ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        const Vec2 c{st_.rng.uniform(r, W - r), st_.rng.uniform(r, W - r)};
        placed = true;
        for (const Vec2& o : st_.objects)
          if (dist(c, o) < 2.0 * r) {
            placed = false;
            break;
          }
        if (placed) st_.objects.push_back(c);
      }
      if (!placed) throw std::runtime_error("placement failed: spec too crowded");
    }
  }

  StepResult result(std::vector<std::uint8_t> mask, double reward, bool success) const {
    StepResult r;
    const std::size_t per = stack_.front().size();
    r.observation.reserve(per * stack_.size());
    for (const auto& f : stack_) r.observation.insert(r.observation.end(), f.begin(), f.end());
    r.gt_mask = std::move(mask);
    r.reward_env = reward;
    r.done = done_;
    r.success = success;
    r.effector_pos = st_.effector;
    return r;
  }
};

/// Binary PPM dump of one planar RGB frame [3, V, V] for eyeballing runs.
inline void write_ppm(const std::string& path, const std::uint8_t* frame, std::int64_t v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open '" + path + "'");
  os << "P6\n" << v << ' ' << v << "\n255\n";
  for (std::int64_t i = 0; i < v * v; ++i) {
    os.put(static_cast<char>(frame[i]));
    os.put(static_cast<char>(frame[v * v + i]));
    os.put(static_cast<char>(frame[2 * v * v + i]));
  }
}

}  // namespace cde
