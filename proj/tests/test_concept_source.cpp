#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "cde/concept_source.hpp"
#include "cde/remote_seg.hpp"
#include "cde/seg_server.hpp"
#include "cde/wristworld.hpp"

using cde::ConceptSource;
using cde::ConceptSpec;
using cde::Mask;
using cde::MaskMode;
using cde::NoiseParams;
using cde::PresenceGate;
using cde::Rng;
using cde::Vec2;
using cde::WorldSpec;
using cde::WorldState;
using Catch::Matchers::ContainsSubstring;

namespace {

Mask random_mask(std::int64_t h, std::int64_t w, double density, Rng& rng) {
  Mask m(h, w);
  for (auto& b : m.bits) b = rng.bernoulli(density) ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("presence gate thresholds active pixels inclusively") {
  PresenceGate gate;  // epsilon 20
  Mask m(10, 10);
  REQUIRE(cde::presence(m, gate) == 0);  // all zeros
  for (int i = 0; i < 19; ++i) m.bits[static_cast<std::size_t>(i)] = 1;
  REQUIRE(cde::presence(m, gate) == 0);
  m.bits[19] = 1;  // exactly 20
  REQUIRE(cde::presence(m, gate) == 1);
  for (int i = 20; i < 25; ++i) m.bits[static_cast<std::size_t>(i)] = 1;  // 25 active
  REQUIRE(cde::presence(m, gate) == 1);

  SECTION("monotone: adding pixels never drops presence") {
    Rng rng(5);
    Mask grow(12, 12);
    int prev = cde::presence(grow, gate);
    for (int step = 0; step < 144; ++step) {
      grow.bits[static_cast<std::size_t>(step)] = 1;
      const int now = cde::presence(grow, gate);
      REQUIRE(now >= prev);
      prev = now;
    }
  }
  SECTION("epsilon below one is rejected") {
    PresenceGate bad;
    bad.epsilon = 0;
    REQUIRE_THROWS_WITH(cde::presence(m, bad), ContainsSubstring("epsilon"));
  }
}

TEST_CASE("synthetic noise flips pixels reproducibly") {
  Rng rng(77);
  const Mask base = random_mask(24, 24, 0.3, rng);

  SECTION("zero probability is the identity") {
    REQUIRE(cde::synthetic_noise(base, {0.0, 9}, 1, 2) == base);
  }
  SECTION("probability one is the exact complement, and an involution") {
    const Mask flipped = cde::synthetic_noise(base, {1.0, 9}, 1, 2);
    for (std::size_t i = 0; i < base.bits.size(); ++i)
      REQUIRE(flipped.bits[i] == (base.bits[i] ^ 1));
    REQUIRE(cde::synthetic_noise(flipped, {1.0, 9}, 3, 4) == base);
  }
  SECTION("keyed determinism") {
    REQUIRE(cde::synthetic_noise(base, {0.2, 9}, 5, 6) ==
            cde::synthetic_noise(base, {0.2, 9}, 5, 6));
    REQUIRE(cde::synthetic_noise(base, {0.2, 9}, 5, 6) !=
            cde::synthetic_noise(base, {0.2, 9}, 5, 7));
    REQUIRE(cde::synthetic_noise(base, {0.2, 9}, 5, 6) !=
            cde::synthetic_noise(base, {0.2, 10}, 5, 6));
  }
  SECTION("flip rate concentrates at flip_prob") {
    // 84x84 draw: fraction within [0.08, 0.12] (a > 4.7 sigma event to miss)
    const Mask big = random_mask(84, 84, 0.5, rng);
    const Mask noisy = cde::synthetic_noise(big, {0.1, 3}, 0, 0);
    std::int64_t flips = 0;
    for (std::size_t i = 0; i < big.bits.size(); ++i) flips += big.bits[i] != noisy.bits[i];
    const double rate = static_cast<double>(flips) / static_cast<double>(big.bits.size());
    REQUIRE(rate > 0.08);
    REQUIRE(rate < 0.12);

    // 128x128: within 3 sigma of Binomial(N, 0.1)
    const Mask huge = random_mask(128, 128, 0.5, rng);
    const double n = static_cast<double>(huge.bits.size());
    const Mask hn = cde::synthetic_noise(huge, {0.1, 4}, 0, 0);
    std::int64_t f2 = 0;
    for (std::size_t i = 0; i < huge.bits.size(); ++i) f2 += huge.bits[i] != hn.bits[i];
    const double sigma = std::sqrt(n * 0.1 * 0.9);
    REQUIRE(std::abs(static_cast<double>(f2) - 0.1 * n) < 3.0 * sigma);
  }
  SECTION("invalid probability is rejected") {
    REQUIRE_THROWS_WITH(cde::synthetic_noise(base, {1.5, 0}, 0, 0),
                        ContainsSubstring("flip_prob"));
  }
}

TEST_CASE("concept spec parsing") {
  SECTION("well-formed spec") {
    const auto spec = cde::parse_concept_spec(nlohmann::json{
        {"task", "lift the red block"}, {"objects", {"red block"}}, {"target_index", 0}});
    REQUIRE(spec.task_description == "lift the red block");
    REQUIRE(spec.object_names.size() == 1);
    REQUIRE(spec.target_name() == "red block");
  }
  SECTION("from file") {
    const std::string path = "concept_spec_test.json";
    {
      std::ofstream os(path);
      os << R"({"task":"touch the red disc","objects":["red disc","blue disc"],"target_index":0})";
    }
    const auto spec = cde::load_concept_spec(path);
    REQUIRE(spec.object_names.size() == 2);
    std::remove(path.c_str());
  }
  SECTION("rejections name the field") {
    REQUIRE_THROWS_WITH(cde::parse_concept_spec(nlohmann::json{{"objects", {"x"}}}),
                        ContainsSubstring("task"));
    REQUIRE_THROWS_WITH(cde::parse_concept_spec(nlohmann::json{
                            {"task", "t"}, {"objects", nlohmann::json::array()}}),
                        ContainsSubstring("objects"));
    REQUIRE_THROWS_WITH(cde::parse_concept_spec(nlohmann::json{{"task", "t"},
                                                               {"objects", {"x"}},
                                                               {"target_index", 5}}),
                        ContainsSubstring("target_index"));
  }
}

TEST_CASE("ground truth channel passes the simulator mask through") {
  WorldSpec spec;
  cde::WristWorld w(spec);
  const auto r = w.reset(12);
  const Mask m = cde::gt_mask(r, spec.view_size);
  REQUIRE(m.h == spec.view_size);
  REQUIRE(m.bits == r.gt_mask);
}

TEST_CASE("concept source counts queries and falls back on remote failure") {
  WorldSpec spec;
  cde::WristWorld w(spec);
  const auto r = w.reset(12);

  SECTION("gt mode") {
    ConceptSource src(MaskMode::kGroundTruth);
    const Mask m = src.mask_for(r, spec.view_size, 0, 0);
    REQUIRE(m.bits == r.gt_mask);
    REQUIRE(src.calls() == 1);
  }
  SECTION("sn mode with zero noise equals gt") {
    ConceptSource src(MaskMode::kSyntheticNoise);
    src.noise = NoiseParams{0.0, 1};
    REQUIRE(src.mask_for(r, spec.view_size, 0, 0).bits == r.gt_mask);
  }
  SECTION("remote failure yields an empty mask and bumps the failure counter") {
    ConceptSource src(MaskMode::kRemote);
    src.remote_fn = [](const std::uint8_t*, std::int64_t) -> Mask {
      throw std::runtime_error("unreachable endpoint");
    };
    const Mask m = src.mask_for(r, spec.view_size, 0, 0);
    REQUIRE(m.popcount() == 0);
    REQUIRE(src.calls() == 1);
    REQUIRE(src.remote_failures() == 1);
  }
}

TEST_CASE("base64 round trips") {
  REQUIRE(cde::base64_encode(reinterpret_cast<const std::uint8_t*>("Man"), 3) == "TWFu");
  REQUIRE(cde::base64_encode(reinterpret_cast<const std::uint8_t*>("Ma"), 2) == "TWE=");
  Rng rng(2);
  for (int len = 0; len <= 17; ++len) {
    std::vector<std::uint8_t> data;
    for (int i = 0; i < len; ++i) data.push_back(static_cast<std::uint8_t>(rng.uniform_int(256)));
    REQUIRE(cde::base64_decode(cde::base64_encode(data.data(), data.size())) == data);
  }
  REQUIRE_THROWS_WITH(cde::base64_decode("a!=="), ContainsSubstring("base64"));
  REQUIRE_THROWS_WITH(cde::base64_decode("abc"), ContainsSubstring("base64"));
}

TEST_CASE("mask resolution bridging") {
  Rng rng(41);
  SECTION("integer-factor pooling inverts nearest-neighbour upsampling") {
    for (const std::int64_t factor : {2, 3, 13}) {
      const std::int64_t v = 8, r = factor * v;
      const Mask src = random_mask(v, v, 0.4, rng);
      // upsample mask bits by pixel replication
      std::vector<std::uint8_t> up(static_cast<std::size_t>(r * r));
      for (std::int64_t y = 0; y < r; ++y)
        for (std::int64_t x = 0; x < r; ++x)
          up[static_cast<std::size_t>(y * r + x)] =
              src.bits[static_cast<std::size_t>((y / factor) * v + x / factor)];
      REQUIRE(cde::downsample_mask(up, r, v) == src);
    }
  }
  SECTION("all-ones and all-zeros survive non-integer ratios") {
    const std::int64_t r = 320, v = 84;
    std::vector<std::uint8_t> ones(static_cast<std::size_t>(r * r), 1);
    std::vector<std::uint8_t> zeros(static_cast<std::size_t>(r * r), 0);
    REQUIRE(cde::downsample_mask(ones, r, v).popcount() == v * v);
    REQUIRE(cde::downsample_mask(zeros, r, v).popcount() == 0);
  }
  SECTION("upsampled frames replicate pixels") {
    const std::int64_t v = 4, r = 12;
    std::vector<std::uint8_t> planar(static_cast<std::size_t>(3 * v * v));
    for (std::size_t i = 0; i < planar.size(); ++i)
      planar[i] = static_cast<std::uint8_t>(rng.uniform_int(256));
    const auto rgb = cde::upsample_rgb(planar.data(), v, r);
    for (std::int64_t y = 0; y < r; ++y)
      for (std::int64_t x = 0; x < r; ++x)
        for (int ch = 0; ch < 3; ++ch)
          REQUIRE(rgb[static_cast<std::size_t>((y * r + x) * 3 + ch)] ==
                  planar[static_cast<std::size_t>(ch * v * v + (y / 3) * v + x / 3)]);
    REQUIRE_THROWS(cde::upsample_rgb(planar.data(), v, 2));
  }
}

TEST_CASE("color table pairs names with the palette") {
  WorldSpec world;
  ConceptSpec cspec;
  cspec.object_names = {"red disc", "blue disc"};
  cspec.target_index = 0;
  const auto table = cde::make_color_table(cspec, world);
  REQUIRE(table.at("red disc") == world.target_color);
  REQUIRE(table.at("blue disc") == world.distractor_colors[0]);

  ConceptSpec greedy;
  greedy.object_names = {"a", "b", "c", "d", "e"};
  REQUIRE_THROWS_WITH(cde::make_color_table(greedy, world), ContainsSubstring("color"));
}

TEST_CASE("remote segmentation round trip matches ground truth") {
  WorldSpec spec;
  ConceptSpec cspec;
  cspec.object_names = {"red disc"};
  cspec.target_index = 0;

  cde::SegServer server(cde::make_color_table(cspec, spec));
  const int port = server.bind_any_port();
  std::thread serve([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  cde::RemoteConfig cfg;
  cfg.port = port;
  cfg.backoff_ms = 10;
  auto client = std::make_shared<cde::RemoteMaskClient>(cfg, cspec.object_names);

  SECTION("byte-identical to the simulator mask across a trajectory") {
    ConceptSource remote(MaskMode::kRemote);
    remote.remote_fn = cde::make_remote_fn(client, cspec.target_index);
    cde::WristWorld w(spec);
    auto r = w.reset(21);
    // walk toward the target so the mask transitions absent -> present
    for (int i = 0; i < 30 && !w.episode_done(); ++i) {
      const Mask via_remote = remote.mask_for(r, spec.view_size, 0, static_cast<std::uint64_t>(i));
      REQUIRE(via_remote.bits == r.gt_mask);
      const Vec2 tgt = w.state().objects[0];
      const Vec2 pos = w.state().effector;
      r = w.step(cde::Action{std::clamp(tgt.x - pos.x, -1.0, 1.0),
                             std::clamp(tgt.y - pos.y, -1.0, 1.0)});
    }
    REQUIRE(remote.remote_failures() == 0);
    REQUIRE(server.requests_served() > 0);
  }
  SECTION("unknown object names segment to empty masks") {
    auto other = std::make_shared<cde::RemoteMaskClient>(cfg, std::vector<std::string>{"??"});
    cde::WristWorld w(spec);
    auto r = w.reset(3);
    const std::size_t per = static_cast<std::size_t>(3 * spec.view_size * spec.view_size);
    const auto masks =
        other->segment(r.observation.data() + r.observation.size() - per, spec.view_size);
    REQUIRE(masks.at(0).popcount() == 0);
  }

  server.stop();
  serve.join();
}

TEST_CASE("remote client surfaces protocol violations") {
  // hand-rolled endpoint returning a wrong-sized mask
  httplib::Server bad;
  std::atomic<int> hits{0};
  bad.Post("/segment", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.set_content(R"({"masks":[[0,1,1]]})", "application/json");
  });
  const int port = bad.bind_to_any_port("127.0.0.1");
  std::thread serve([&] { bad.listen_after_bind(); });
  bad.wait_until_ready();

  cde::RemoteConfig cfg;
  cfg.port = port;
  cfg.backoff_ms = 5;
  cde::RemoteMaskClient client(cfg, {"thing"});
  std::vector<std::uint8_t> planar(3 * 8 * 8, 0);
  REQUIRE_THROWS_WITH(client.segment(planar.data(), 8), ContainsSubstring("dimensions"));
  REQUIRE(hits == cfg.attempts);  // retried before giving up

  bad.stop();
  serve.join();

  SECTION("no server at all exhausts retries") {
    cde::RemoteConfig dead;
    dead.port = port;  // nobody listening any more
    dead.backoff_ms = 1;
    dead.timeout_s = 1;
    cde::RemoteMaskClient lost(dead, {"thing"});
    REQUIRE_THROWS_WITH(lost.segment(planar.data(), 8), ContainsSubstring("giving up"));
  }
}

TEST_CASE("multi-knob remote masks cannot distinguish identical knobs") {
  // the color segmenter marks every knob, the simulator only the target
  const WorldSpec spec = cde::multi_knob_spec();
  WorldState st;
  st.objects = {Vec2{30.5, 30.5}, Vec2{37.5, 30.5}, Vec2{10.0, 10.0}, Vec2{50.0, 50.0}};
  st.effector = Vec2{33.5, 30.5};
  std::vector<std::uint8_t> frame, gt;
  cde::render_crop(spec, st, frame, gt);

  const std::int64_t v = spec.view_size;
  std::vector<std::uint8_t> interleaved(static_cast<std::size_t>(3 * v * v));
  for (std::int64_t p = 0; p < v * v; ++p)
    for (int ch = 0; ch < 3; ++ch)
      interleaved[static_cast<std::size_t>(3 * p + ch)] =
          frame[static_cast<std::size_t>(ch * v * v + p)];
  const auto masks = cde::segment_by_color(interleaved, v, v, {"knob"},
                                           {{"knob", spec.target_color}});
  std::int64_t color_count = 0, gt_count = 0;
  for (std::int64_t p = 0; p < v * v; ++p) {
    color_count += masks[0][static_cast<std::size_t>(p)];
    gt_count += gt[static_cast<std::size_t>(p)];
  }
  REQUIRE(gt_count > 0);
  REQUIRE(color_count > gt_count);  // picks up the second knob too
}
