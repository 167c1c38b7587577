#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cde/agent.hpp"
#include "cde/concept_source.hpp"
#include "cde/remote_seg.hpp"
#include "cde/wristworld.hpp"

namespace cde {

/// Where masks come from during training: the simulator's ground truth, the
/// same with synthetic pixel noise, or a remote segmentation service.
struct MaskSetting {
  MaskMode mode = MaskMode::kGroundTruth;
  double flip_prob = 0.0;   // synthetic-noise setting only
  RemoteConfig remote;      // remote setting only
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items())
    if (ok.count(key) == 0)
      throw std::invalid_argument("config: unknown key '" + key + "' in '" + where + "'");
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("config: key '" + std::string(key) + "' has the wrong type");
  }
}

}  // namespace detail

/// Everything one experiment needs: agent kind, mask source, ablation
/// switches, environment, hyperparameters, step budget, and seed list.
struct ExperimentConfig {
  std::string name = "exp";
  AgentKind kind = AgentKind::kCde;
  MaskSetting mask;
  WorldSpec world;
  ConceptSpec concept_spec;
  AgentConfig agent;
  std::int64_t total_steps = 60000;
  std::int64_t eval_every = 5000;
  int eval_episodes = 20;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

  /// Make the pieces consistent: the network reads its view geometry from
  /// the world, the exploration schedule reads the step budget, object names
  /// default to one per world object, and ablation switches that do not
  /// apply to the chosen kind are stripped.
  void finalize() {
    agent.kind = kind;
    agent.net.view = world.view_size;
    agent.net.frame_stack = world.frame_stack;
    agent.total_steps = std::max<std::int64_t>(1, total_steps);
    agent.normalize();
    if (concept_spec.object_names.empty()) {
      concept_spec.task_description = "move the effector onto the target object";
      concept_spec.object_names.push_back("target");
      for (int i = 1; i < world.n_objects(); ++i)
        concept_spec.object_names.push_back("distractor_" + std::to_string(i));
      concept_spec.target_index = 0;
    }
  }

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos ||
        name.find("..") != std::string::npos)
      throw std::invalid_argument("config: experiment name must be a plain directory name");
    world.validate();
    agent.validate();
    if (total_steps < 0) throw std::invalid_argument("config: total_steps must be >= 0");
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (eval_episodes < 1) throw std::invalid_argument("config: eval_episodes must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("config: at least one seed is required");
    if (mask.mode == MaskMode::kSyntheticNoise &&
        !(mask.flip_prob >= 0.0 && mask.flip_prob <= 1.0))
      throw std::invalid_argument("config: flip_prob outside [0,1]");
    if (static_cast<int>(concept_spec.object_names.size()) != world.n_objects())
      throw std::invalid_argument("config: need one object name per world object");
    if (concept_spec.target_index != 0)
      throw std::invalid_argument("config: the target must be object 0");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["agent"] = agent_kind_name(kind);
    nlohmann::json jm;
    jm["mode"] = mask_mode_name(mask.mode);
    if (mask.mode == MaskMode::kSyntheticNoise) jm["flip_prob"] = mask.flip_prob;
    if (mask.mode == MaskMode::kRemote) {
      jm["host"] = mask.remote.host;
      jm["port"] = mask.remote.port;
      jm["remote_size"] = mask.remote.remote_size;
      jm["attempts"] = mask.remote.attempts;
      jm["timeout_s"] = mask.remote.timeout_s;
    }
    j["mask"] = jm;
    j["ablation"] = {{"negative_embedding", agent.use_negative_embedding},
                     {"reconstruction_reward", agent.use_recon_reward},
                     {"pixel_reward", agent.use_pixel_reward}};
    j["world"] = {{"variant", world.variant == Variant::kMultiKnob ? "multi_knob" : "single_target"},
                  {"world_size", world.world_size},
                  {"view_size", world.view_size},
                  {"n_distractors", world.n_distractors},
                  {"object_radius", world.object_radius},
                  {"touch_radius", world.touch_radius},
                  {"max_move", world.max_move},
                  {"max_steps", world.max_steps},
                  {"frame_stack", world.frame_stack}};
    j["concept"] = {{"task", concept_spec.task_description},
                    {"objects", concept_spec.object_names},
                    {"target_index", concept_spec.target_index}};
    j["agent_params"] = {{"discount", agent.discount},
                         {"n_step", agent.n_step},
                         {"tau", agent.tau},
                         {"lr", agent.lr},
                         {"alpha", agent.alpha},
                         {"beta", agent.beta},
                         {"intrinsic_scale", agent.intrinsic_scale},
                         {"presence_epsilon", agent.presence_epsilon},
                         {"batch_size", agent.batch_size},
                         {"replay_capacity", agent.replay_capacity},
                         {"update_every", agent.update_every},
                         {"augment_pad", agent.augment_pad},
                         {"explore_sigma_start", agent.explore_sigma_start},
                         {"explore_sigma_end", agent.explore_sigma_end},
                         {"explore_fraction", agent.explore_fraction},
                         {"smooth_sigma", agent.smooth_sigma},
                         {"smooth_clip", agent.smooth_clip},
                         {"pixel_kappa", agent.pixel_kappa},
                         {"conv_channels", agent.net.conv_channels},
                         {"embed_dim", agent.net.embed_dim},
                         {"mask_embed_dim", agent.net.mask_embed_dim},
                         {"hidden", agent.net.hidden}};
    j["train"] = {{"total_steps", total_steps},
                  {"eval_every", eval_every},
                  {"eval_episodes", eval_episodes},
                  {"seeds", seeds}};
    return j;
  }

  std::string snapshot() const { return to_json().dump(2) + "\n"; }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::get_or;
    check_keys(j, {"name", "agent", "mask", "ablation", "world", "concept", "agent_params",
                   "train"},
               "config");
    ExperimentConfig c;
    c.name = get_or<std::string>(j, "name", c.name);
    if (j.contains("agent")) c.kind = parse_agent_kind(j.at("agent").get<std::string>());

    if (j.contains("mask")) {
      const auto& jm = j.at("mask");
      check_keys(jm, {"mode", "flip_prob", "host", "port", "remote_size", "attempts",
                      "backoff_ms", "timeout_s"},
                 "mask");
      const std::string mode = get_or<std::string>(jm, "mode", "gt");
      if (mode == "gt") {
        c.mask.mode = MaskMode::kGroundTruth;
      } else if (mode == "sn") {
        c.mask.mode = MaskMode::kSyntheticNoise;
        c.mask.flip_prob = get_or<double>(jm, "flip_prob", 0.0);
      } else if (mode == "remote") {
        c.mask.mode = MaskMode::kRemote;
        c.mask.remote.host = get_or<std::string>(jm, "host", c.mask.remote.host);
        c.mask.remote.port = get_or<int>(jm, "port", c.mask.remote.port);
        c.mask.remote.remote_size = get_or<int>(jm, "remote_size", c.mask.remote.remote_size);
        c.mask.remote.attempts = get_or<int>(jm, "attempts", c.mask.remote.attempts);
        c.mask.remote.backoff_ms = get_or<int>(jm, "backoff_ms", c.mask.remote.backoff_ms);
        c.mask.remote.timeout_s = get_or<int>(jm, "timeout_s", c.mask.remote.timeout_s);
      } else {
        throw std::invalid_argument("config: unknown mask mode '" + mode +
                                    "' (want gt|sn|remote)");
      }
    }

    if (j.contains("world")) {
      const auto& jw = j.at("world");
      check_keys(jw, {"variant", "world_size", "view_size", "n_distractors", "object_radius",
                      "touch_radius", "max_move", "max_steps", "frame_stack"},
                 "world");
      const std::string variant = get_or<std::string>(jw, "variant", "single_target");
      if (variant == "multi_knob") {
        c.world = multi_knob_spec();
      } else if (variant != "single_target") {
        throw std::invalid_argument("config: unknown world variant '" + variant + "'");
      }
      c.world.world_size = get_or<std::int64_t>(jw, "world_size", c.world.world_size);
      c.world.view_size = get_or<std::int64_t>(jw, "view_size", c.world.view_size);
      c.world.n_distractors = get_or<int>(jw, "n_distractors", c.world.n_distractors);
      c.world.object_radius = get_or<double>(jw, "object_radius", c.world.object_radius);
      c.world.touch_radius = get_or<double>(jw, "touch_radius", c.world.touch_radius);
      c.world.max_move = get_or<double>(jw, "max_move", c.world.max_move);
      c.world.max_steps = get_or<int>(jw, "max_steps", c.world.max_steps);
      c.world.frame_stack = get_or<int>(jw, "frame_stack", c.world.frame_stack);
    }

    if (j.contains("concept")) c.concept_spec = parse_concept_spec(j.at("concept"));

    if (j.contains("ablation")) {
      const auto& ja = j.at("ablation");
      check_keys(ja, {"negative_embedding", "reconstruction_reward", "pixel_reward"}, "ablation");
      c.agent.use_negative_embedding =
          get_or<bool>(ja, "negative_embedding", c.agent.use_negative_embedding);
      c.agent.use_recon_reward =
          get_or<bool>(ja, "reconstruction_reward", c.agent.use_recon_reward);
      c.agent.use_pixel_reward = get_or<bool>(ja, "pixel_reward", c.agent.use_pixel_reward);
    }

    if (j.contains("agent_params")) {
      const auto& jp = j.at("agent_params");
      check_keys(jp,
                 {"discount", "n_step", "tau", "lr", "alpha", "beta", "intrinsic_scale",
                  "presence_epsilon", "batch_size", "replay_capacity", "update_every",
                  "augment_pad", "explore_sigma_start", "explore_sigma_end", "explore_fraction",
                  "smooth_sigma", "smooth_clip", "pixel_kappa", "conv_channels", "embed_dim",
                  "mask_embed_dim", "hidden"},
                 "agent_params");
      AgentConfig& a = c.agent;
      a.discount = get_or<double>(jp, "discount", a.discount);
      a.n_step = get_or<int>(jp, "n_step", a.n_step);
      a.tau = get_or<double>(jp, "tau", a.tau);
      a.lr = get_or<double>(jp, "lr", a.lr);
      a.alpha = get_or<double>(jp, "alpha", a.alpha);
      a.beta = get_or<double>(jp, "beta", a.beta);
      a.intrinsic_scale = get_or<double>(jp, "intrinsic_scale", a.intrinsic_scale);
      a.presence_epsilon = get_or<int>(jp, "presence_epsilon", a.presence_epsilon);
      a.batch_size = get_or<int>(jp, "batch_size", a.batch_size);
      a.replay_capacity = get_or<std::int64_t>(jp, "replay_capacity", a.replay_capacity);
      a.update_every = get_or<int>(jp, "update_every", a.update_every);
      a.augment_pad = get_or<int>(jp, "augment_pad", a.augment_pad);
      a.explore_sigma_start = get_or<double>(jp, "explore_sigma_start", a.explore_sigma_start);
      a.explore_sigma_end = get_or<double>(jp, "explore_sigma_end", a.explore_sigma_end);
      a.explore_fraction = get_or<double>(jp, "explore_fraction", a.explore_fraction);
      a.smooth_sigma = get_or<double>(jp, "smooth_sigma", a.smooth_sigma);
      a.smooth_clip = get_or<double>(jp, "smooth_clip", a.smooth_clip);
      a.pixel_kappa = get_or<double>(jp, "pixel_kappa", a.pixel_kappa);
      a.net.conv_channels = get_or<std::int64_t>(jp, "conv_channels", a.net.conv_channels);
      a.net.embed_dim = get_or<std::int64_t>(jp, "embed_dim", a.net.embed_dim);
      a.net.mask_embed_dim = get_or<std::int64_t>(jp, "mask_embed_dim", a.net.mask_embed_dim);
      a.net.hidden = get_or<std::int64_t>(jp, "hidden", a.net.hidden);
    }

    if (j.contains("train")) {
      const auto& jt = j.at("train");
      check_keys(jt, {"total_steps", "eval_every", "eval_episodes", "seeds"}, "train");
      c.total_steps = get_or<std::int64_t>(jt, "total_steps", c.total_steps);
      c.eval_every = get_or<std::int64_t>(jt, "eval_every", c.eval_every);
      c.eval_episodes = get_or<int>(jt, "eval_episodes", c.eval_episodes);
      c.seeds = get_or<std::vector<std::uint64_t>>(jt, "seeds", c.seeds);
    }

    c.finalize();
    c.validate();
    return c;
  }

  static ExperimentConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
  }
};

}  // namespace cde
