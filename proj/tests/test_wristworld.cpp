#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <numbers>

#include "cde/rng.hpp"
#include "cde/wristworld.hpp"

using cde::Action;
using cde::Rng;
using cde::StepResult;
using cde::Vec2;
using cde::WorldSpec;
using cde::WorldState;
using cde::WristWorld;
using Catch::Matchers::ContainsSubstring;

namespace {

/// Independent rasterization oracle: count grid cells whose center lies
/// within `radius` of `c`.
int disk_pixel_count(const Vec2& c, double radius, std::int64_t world_size) {
  int n = 0;
  for (std::int64_t y = 0; y < world_size; ++y)
    for (std::int64_t x = 0; x < world_size; ++x)
      if (cde::dist(Vec2{x + 0.5, y + 0.5}, c) <= radius) ++n;
  return n;
}

int mask_count(const std::vector<std::uint8_t>& m) {
  int n = 0;
  for (auto b : m) n += b;
  return n;
}

Action toward(const Vec2& from, const Vec2& to) {
  return Action{std::clamp(to.x - from.x, -1.0, 1.0), std::clamp(to.y - from.y, -1.0, 1.0)};
}

}  // namespace

TEST_CASE("reset is deterministic and validates the spec") {
  WorldSpec spec;
  WristWorld a(spec), b(spec);
  StepResult ra = a.reset(99), rb = b.reset(99);
  REQUIRE(ra.observation == rb.observation);
  REQUIRE(ra.gt_mask == rb.gt_mask);
  REQUIRE(a.state().objects.size() == 3);  // target + 2 distractors

  SECTION("different seeds change the layout") {
    StepResult rc = b.reset(100);
    REQUIRE(a.state().objects[0].x != b.state().objects[0].x);
  }
  SECTION("no distractors leaves exactly the target") {
    WorldSpec s;
    s.n_distractors = 0;
    WristWorld w(s);
    w.reset(1);
    REQUIRE(w.state().objects.size() == 1);
  }
  SECTION("objects are separated at reset") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      a.reset(seed);
      const auto& obj = a.state().objects;
      for (std::size_t i = 0; i < obj.size(); ++i)
        for (std::size_t j = i + 1; j < obj.size(); ++j)
          REQUIRE(cde::dist(obj[i], obj[j]) >= 2.0 * spec.object_radius);
    }
  }
  SECTION("oversized objects cannot be placed") {
    WorldSpec s;
    s.object_radius = static_cast<double>(s.world_size);
    s.touch_radius = 1.0;
    WristWorld w(s);
    REQUIRE_THROWS_WITH(w.reset(0), ContainsSubstring("placement"));
  }
  SECTION("identical colors are rejected in the single-target variant") {
    WorldSpec s;
    s.distractor_colors[1] = s.target_color;
    REQUIRE_THROWS_WITH(WristWorld(s), ContainsSubstring("distinct"));
  }
}

TEST_CASE("stepping moves, clamps and rewards") {
  WorldSpec spec;
  WristWorld w(spec);
  w.reset(5);

  SECTION("zero action leaves the effector in place") {
    const Vec2 before = w.state().effector;
    StepResult r = w.step(Action{0.0, 0.0});
    REQUIRE(w.state().effector.x == before.x);
    REQUIRE(w.state().effector.y == before.y);
    REQUIRE(r.reward_env == 0.0);
    REQUIRE_FALSE(r.success);
  }
  SECTION("action components clamp to the move budget") {
    const Vec2 before = w.state().effector;
    w.step(Action{50.0, -50.0});
    REQUIRE(w.state().effector.x == Catch::Approx(before.x + spec.max_move));
    REQUIRE(w.state().effector.y == Catch::Approx(std::max(0.0, before.y - spec.max_move)));
  }
  SECTION("effector stays inside the world") {
    for (int i = 0; i < 60 && !w.episode_done(); ++i) w.step(Action{-1.0, -1.0});
    REQUIRE(w.state().effector.x >= 0.0);
    REQUIRE(w.state().effector.y >= 0.0);
  }
  SECTION("walking to the target succeeds exactly once") {
    double total = 0.0;
    StepResult r;
    for (int i = 0; i < spec.max_steps && !w.episode_done(); ++i) {
      const Vec2 tgt = w.state().objects[0];
      r = w.step(toward(w.state().effector, tgt));
      total += r.reward_env;
    }
    REQUIRE(r.success);
    REQUIRE(r.done);
    REQUIRE(total == 1.0);
    REQUIRE(cde::dist(w.state().effector, w.state().objects[0]) <= spec.touch_radius);
    REQUIRE_THROWS_WITH(w.step(Action{0, 0}), ContainsSubstring("finished"));
  }
  SECTION("random episodes have sparse reward") {
    Rng rng(17);
    for (std::uint64_t ep = 0; ep < 10; ++ep) {
      w.reset(ep);
      double total = 0.0;
      while (!w.episode_done())
        total += w.step(Action{rng.uniform(-1, 1), rng.uniform(-1, 1)}).reward_env;
      REQUIRE((total == 0.0 || total == 1.0));
    }
  }
}

TEST_CASE("trajectories replay byte-identically") {
  WorldSpec spec;
  Rng rng(31);
  std::vector<Action> actions;
  for (int i = 0; i < 40; ++i) actions.push_back(Action{rng.uniform(-1, 1), rng.uniform(-1, 1)});

  auto run = [&](std::uint64_t seed) {
    WristWorld w(spec);
    std::vector<std::uint8_t> tape;
    StepResult r = w.reset(seed);
    tape.insert(tape.end(), r.observation.begin(), r.observation.end());
    for (const Action& a : actions) {
      if (w.episode_done()) break;
      r = w.step(a);
      tape.insert(tape.end(), r.observation.begin(), r.observation.end());
      tape.insert(tape.end(), r.gt_mask.begin(), r.gt_mask.end());
      tape.push_back(static_cast<std::uint8_t>(r.reward_env));
    }
    return tape;
  };
  REQUIRE(run(3) == run(3));

  // state-dependent walks from different seeds head to different targets
  auto chase = [&](std::uint64_t seed) {
    WristWorld w(spec);
    std::vector<std::uint8_t> tape;
    w.reset(seed);
    while (!w.episode_done()) {
      StepResult r = w.step(toward(w.state().effector, w.state().objects[0]));
      tape.insert(tape.end(), r.observation.begin(), r.observation.end());
    }
    return tape;
  };
  REQUIRE(chase(3) != chase(4));
}

TEST_CASE("mask matches an independent rasterization oracle") {
  WorldSpec spec;
  spec.n_distractors = 0;

  SECTION("centered on the target, active pixels match pi r^2") {
    WorldState st;
    st.objects = {Vec2{30.5, 30.5}};
    st.effector = Vec2{30.5, 30.5};
    std::vector<std::uint8_t> frame, mask;
    cde::render_crop(spec, st, frame, mask);
    const int count = mask_count(mask);
    REQUIRE(count == disk_pixel_count(st.objects[0], spec.object_radius, spec.world_size));
    const double ideal = std::numbers::pi * spec.object_radius * spec.object_radius;
    REQUIRE(std::abs(count - ideal) < 2.0 * std::numbers::pi * spec.object_radius * 0.5 + 2.0);
  }
  SECTION("off-center placements still match the oracle") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
      WorldState st;
      st.objects = {Vec2{rng.uniform(10, 50), rng.uniform(10, 50)}};
      st.effector = st.objects[0];
      std::vector<std::uint8_t> frame, mask;
      cde::render_crop(spec, st, frame, mask);
      REQUIRE(mask_count(mask) ==
              disk_pixel_count(st.objects[0], spec.object_radius, spec.world_size));
    }
  }
  SECTION("target far outside the view gives an all-zero mask") {
    WorldState st;
    st.objects = {Vec2{60.0, 60.0}};
    st.effector = Vec2{0.5, 0.5};
    std::vector<std::uint8_t> frame, mask;
    cde::render_crop(spec, st, frame, mask);
    REQUIRE(mask_count(mask) == 0);
  }
}

TEST_CASE("crop window arithmetic is exact") {
  // exhaustive: every effector cell of a tiny world, every crop pixel
  WorldSpec spec;
  spec.world_size = 8;
  spec.view_size = 4;
  spec.object_radius = 1.0;
  spec.touch_radius = 1.0;
  spec.n_distractors = 0;
  WorldState st;
  st.objects = {Vec2{4.5, 4.5}};
  const std::int64_t V = spec.view_size;
  for (std::int64_t ey = 0; ey < spec.world_size; ++ey)
    for (std::int64_t ex = 0; ex < spec.world_size; ++ex) {
      st.effector = Vec2{ex + 0.5, ey + 0.5};
      std::vector<std::uint8_t> frame, mask;
      cde::render_crop(spec, st, frame, mask);
      const auto [cx, cy] = cde::crop_origin(spec, st.effector);
      for (std::int64_t i = 0; i < V; ++i)
        for (std::int64_t j = 0; j < V; ++j) {
          const std::int64_t wx = cx + j, wy = cy + i;
          cde::Rgb expect{0, 0, 0};
          if (wx >= 0 && wx < spec.world_size && wy >= 0 && wy < spec.world_size)
            expect = cde::world_pixel_color(spec, st, wx, wy);
          for (int ch = 0; ch < 3; ++ch)
            REQUIRE(frame[static_cast<std::size_t>(ch * V * V + i * V + j)] == expect[ch]);
        }
    }
}

TEST_CASE("visibility coverage: the target is sometimes seen, sometimes not") {
  WorldSpec spec;
  spec.n_distractors = 0;
  WorldState st;
  st.objects = {Vec2{32.0, 32.0}};
  Rng rng(23);
  int present = 0, absent = 0;
  for (int i = 0; i < 200; ++i) {
    st.effector = Vec2{rng.uniform(0, 64), rng.uniform(0, 64)};
    std::vector<std::uint8_t> frame, mask;
    cde::render_crop(spec, st, frame, mask);
    (mask_count(mask) > 0 ? present : absent)++;
  }
  REQUIRE(present > 0);
  REQUIRE(absent > 0);
}

TEST_CASE("frame stack repeats the first frame then slides") {
  WorldSpec spec;
  WristWorld w(spec);
  StepResult r0 = w.reset(2);
  const std::size_t per = static_cast<std::size_t>(3 * spec.view_size * spec.view_size);
  REQUIRE(r0.observation.size() == per * static_cast<std::size_t>(spec.frame_stack));
  for (int k = 1; k < spec.frame_stack; ++k)
    REQUIRE(std::equal(r0.observation.begin(), r0.observation.begin() + per,
                       r0.observation.begin() + k * per));
  StepResult r1 = w.step(Action{1.0, 1.0});
  // oldest two frames are the reset frame; newest reflects the move
  REQUIRE(std::equal(r1.observation.begin(), r1.observation.begin() + per,
                     r0.observation.begin()));
  REQUIRE_FALSE(std::equal(r1.observation.begin() + 2 * per, r1.observation.end(),
                           r0.observation.begin()));
}

TEST_CASE("multi-knob variant looks uniform but masks only the target") {
  WorldSpec spec = cde::multi_knob_spec();
  REQUIRE(spec.n_objects() == 4);
  WristWorld w(spec);
  w.reset(6);
  for (int i = 0; i < spec.n_objects(); ++i)
    REQUIRE(spec.object_color(i) == spec.target_color);

  // knob at view center plus a second knob in view: mask covers only the target
  WorldState st;
  st.objects = {Vec2{30.5, 30.5}, Vec2{37.5, 30.5}, Vec2{10.0, 10.0}, Vec2{50.0, 50.0}};
  st.effector = Vec2{32.5, 30.5};
  std::vector<std::uint8_t> frame, mask;
  cde::render_crop(spec, st, frame, mask);
  REQUIRE(mask_count(mask) == disk_pixel_count(st.objects[0], spec.object_radius, 64));

  SECTION("masks ignore distractor motion when the target is out of view") {
    WorldState a, b;
    a.objects = {Vec2{60.0, 60.0}, Vec2{30.5, 28.5}, Vec2{10.0, 10.0}, Vec2{50.0, 50.0}};
    b = a;
    b.objects[1] = Vec2{26.5, 30.5};
    a.effector = b.effector = Vec2{30.5, 30.5};
    std::vector<std::uint8_t> fa, ma, fb, mb;
    cde::render_crop(spec, a, fa, ma);
    cde::render_crop(spec, b, fb, mb);
    REQUIRE(ma == mb);
    REQUIRE(mask_count(ma) == 0);
    REQUIRE(fa != fb);
  }
}

TEST_CASE("ppm dump writes a readable header") {
  WorldSpec spec;
  WristWorld w(spec);
  StepResult r = w.reset(4);
  const std::string path = "frame_dump_test.ppm";
  cde::write_ppm(path, r.observation.data(), spec.view_size);
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int wpx = 0, hpx = 0, maxval = 0;
  is >> magic >> wpx >> hpx >> maxval;
  REQUIRE(magic == "P6");
  REQUIRE(wpx == spec.view_size);
  REQUIRE(hpx == spec.view_size);
  REQUIRE(maxval == 255);
  std::remove(path.c_str());
}
