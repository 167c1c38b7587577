#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cde/agent.hpp"
#include "cde/concept_source.hpp"
#include "cde/exp_config.hpp"
#include "cde/heatmap.hpp"
#include "cde/metrics.hpp"
#include "cde/remote_seg.hpp"
#include "cde/wristworld.hpp"

namespace cde {

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool aborted = false;
  std::string abort_reason;
  double final_eval_success = 0.0;
  std::int64_t oracle_calls_train = 0;
  std::int64_t oracle_calls_eval = 0;
  std::int64_t gate_positive = 0;
  std::int64_t gate_negative = 0;
  std::string dir;
};

struct ExperimentOutcome {
  std::string dir;
  std::vector<SeedOutcome> seeds;
  double mean_success = 0.0;
  double stderr_success = 0.0;
};

/// Seed for episode `tag` of run `seed`: a distinct, reproducible stream per
/// episode. Evaluation episodes use tags offset far above any training
/// episode index so the two never share layouts.
inline std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t tag) {
  return keyed_rng(run_seed, tag, 0).state();
}

inline constexpr std::uint64_t kEvalEpisodeBase = 1ull << 40;

/// Build the training-time mask source for a run. The synthetic-noise seed
/// is the run seed, so different seeds see different corruptions.
inline ConceptSource make_concept_source(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  ConceptSource src(cfg.mask.mode);
  if (cfg.mask.mode == MaskMode::kSyntheticNoise) {
    src.noise.flip_prob = cfg.mask.flip_prob;
    src.noise.seed = run_seed;
  } else if (cfg.mask.mode == MaskMode::kRemote) {
    auto client = std::make_shared<RemoteMaskClient>(cfg.mask.remote,
                                                     cfg.concept_spec.object_names);
    src.remote_fn = make_remote_fn(client, cfg.concept_spec.target_index);
  }
  return src;
}

/// Greedy evaluation: `eval_episodes` fresh episodes, no exploration noise,
/// nothing written to replay. Kinds whose networks take masks as input query
/// `eval_source` for them; the concept agent gates itself from its own
/// predicted mask and must leave `eval_source` untouched.
template <typename T>
double evaluate(Agent<T>& agent, const ExperimentConfig& cfg, std::uint64_t seed,
                std::int64_t eval_index, ConceptSource& eval_source) {
  WristWorld env(cfg.world);
  const std::int64_t v = cfg.world.view_size;
  const std::int64_t k = cfg.world.frame_stack;
  const bool mask_inputs = cfg.kind == AgentKind::kRgbm || cfg.kind == AgentKind::kMe;

  int successes = 0;
  for (int e = 0; e < cfg.eval_episodes; ++e) {
    const std::uint64_t tag =
        kEvalEpisodeBase + static_cast<std::uint64_t>(eval_index) * 100000ull +
        static_cast<std::uint64_t>(e);
    StepResult sr = env.reset(episode_seed(seed, tag));
    std::vector<std::uint8_t> mask_stack;
    if (mask_inputs) {
      const Mask m0 = eval_source.mask_for(sr, v, tag, 0);
      mask_stack.resize(static_cast<std::size_t>(k * v * v));
      for (std::int64_t f = 0; f < k; ++f)
        std::copy(m0.bits.begin(), m0.bits.end(),
                  mask_stack.begin() + static_cast<std::ptrdiff_t>(f * v * v));
    }
    std::uint64_t st = 0;
    bool success = sr.success;
    while (!sr.done) {
      const Action a = agent.act_greedy(sr.observation, mask_inputs ? mask_stack.data() : nullptr);
      sr = env.step(a);
      ++st;
      if (mask_inputs) {
        const Mask m = eval_source.mask_for(sr, v, tag, st);
        std::copy(mask_stack.begin() + static_cast<std::ptrdiff_t>(v * v), mask_stack.end(),
                  mask_stack.begin());
        std::copy(m.bits.begin(), m.bits.end(),
                  mask_stack.end() - static_cast<std::ptrdiff_t>(v * v));
      }
      success = sr.success;
    }
    successes += success ? 1 : 0;
  }
  return static_cast<double>(successes) / static_cast<double>(cfg.eval_episodes);
}

/// Train one seed to completion, writing the full result bundle into `dir`:
/// metrics.csv, heatmap_{early,middle,late}.csv, checkpoint.bin (+ JSON
/// sidecar), config.json. A non-finite loss aborts this seed with a
/// diagnostic dump; the caller continues with other seeds.
template <typename T>
SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream f(dir + "/config.json", std::ios::binary);
    if (!f) throw std::runtime_error("runner: cannot write '" + dir + "/config.json'");
    f << cfg.snapshot();
  }

  SeedOutcome out;
  out.seed = seed;
  out.dir = dir;

  const std::int64_t v = cfg.world.view_size;
  const bool needs_mask = cfg.kind != AgentKind::kRgb;
  std::int64_t abort_step = -1;
  try {
    WristWorld env(cfg.world);
    ConceptSource source = make_concept_source(cfg, seed);
    ConceptSource eval_source = make_concept_source(cfg, seed);
    AgentConfig acfg = cfg.agent;
    acfg.total_steps = std::max<std::int64_t>(1, cfg.total_steps);
    Agent<T> agent(acfg, seed);
    HeatmapRecorder heat(static_cast<double>(cfg.world.world_size), cfg.total_steps);
    MetricsWriter metrics(dir + "/metrics.csv");

    std::uint64_t episode = 0;
    std::uint64_t step_in_ep = 0;
    StepResult sr = env.reset(episode_seed(seed, episode));
    Mask m = needs_mask ? source.mask_for(sr, v, episode, 0) : Mask(v, v);
    agent.begin_episode(sr.observation, m);
    double ret_env = 0.0, ret_int = 0.0;
    double last_lc = 0.0, last_lr = 0.0;
    std::int64_t eval_index = 0;

    for (std::int64_t t = 0; t < cfg.total_steps; ++t) {
      abort_step = t;
      const Action a = agent.act_train(t);
      const StepResult nx = env.step(a);
      ++step_in_ep;
      m = needs_mask ? source.mask_for(nx, v, episode, step_in_ep) : Mask(v, v);
      // Replay's done flag means MDP-terminal: success ends the episode for
      // value targets, but a step-budget timeout is a time-limit truncation
      // and the final window still bootstraps from the last state.
      const StepOutcome so = agent.observe(a, nx.reward_env, nx.observation, m, nx.success);
      heat.record(t, nx.effector_pos.x, nx.effector_pos.y);
      ret_env += nx.reward_env;
      ret_int += so.reward_recon + so.reward_pixel;

      const UpdateResult ur = agent.maybe_update(t);
      if (ur.updated) {
        if (!std::isfinite(ur.loss_total) || !std::isfinite(ur.loss_actor))
          throw std::runtime_error("non-finite loss");
        last_lc = ur.loss_critic;
        last_lr = ur.loss_recons;
      }

      if (nx.done) {
        metrics.episode_row(t + 1, agent_kind_name(cfg.kind), ret_env, ret_int, last_lc,
                            last_lr);
        ++episode;
        step_in_ep = 0;
        ret_env = ret_int = 0.0;
        sr = env.reset(episode_seed(seed, episode));
        m = needs_mask ? source.mask_for(sr, v, episode, 0) : Mask(v, v);
        agent.begin_episode(sr.observation, m);
      }

      if ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.total_steps) {
        const double s = evaluate(agent, cfg, seed, eval_index++, eval_source);
        metrics.eval_row(t + 1, agent_kind_name(cfg.kind), s);
        out.final_eval_success = s;
      }
    }

    agent.save(dir + "/checkpoint.bin");
    {
      nlohmann::json side;
      side["config_hash"] = hex64(fnv1a64(cfg.snapshot()));
      side["steps"] = cfg.total_steps;
      side["seed"] = seed;
      side["explore_rng_state"] = agent.explore_rng_state();
      side["update_rng_state"] = agent.update_rng_state();
      std::ofstream f(dir + "/checkpoint.json", std::ios::binary);
      f << side.dump(2) << "\n";
    }
    heat.write_csv(dir + "/heatmap_early.csv", Stage::kEarly);
    heat.write_csv(dir + "/heatmap_middle.csv", Stage::kMiddle);
    heat.write_csv(dir + "/heatmap_late.csv", Stage::kLate);

    out.oracle_calls_train = source.calls();
    out.oracle_calls_eval = eval_source.calls();
    out.gate_positive = agent.gate_positive_count();
    out.gate_negative = agent.gate_negative_count();
  } catch (const std::exception& e) {
    out.aborted = true;
    out.abort_reason = e.what();
    std::ofstream f(dir + "/abort.txt", std::ios::binary);
    f << "seed " << seed << " aborted at step " << abort_step << ": " << e.what() << "\n";
  }
  return out;
}

/// Fill in mean and standard error (sample stddev / sqrt(n), completed seeds
/// only) and write summary.csv into the experiment directory. Assumes
/// out.seeds is complete and out.dir exists.
inline void aggregate_experiment(ExperimentOutcome& out) {
  std::vector<double> finals;
  for (const SeedOutcome& s : out.seeds)
    if (!s.aborted) finals.push_back(s.final_eval_success);
  out.mean_success = 0.0;
  out.stderr_success = 0.0;
  if (!finals.empty()) {
    double sum = 0.0;
    for (double f : finals) sum += f;
    out.mean_success = sum / static_cast<double>(finals.size());
    if (finals.size() > 1) {
      double ss = 0.0;
      for (double f : finals) ss += (f - out.mean_success) * (f - out.mean_success);
      const double stddev = std::sqrt(ss / static_cast<double>(finals.size() - 1));
      out.stderr_success = stddev / std::sqrt(static_cast<double>(finals.size()));
    }
  }

  std::ofstream f(out.dir + "/summary.csv", std::ios::binary);
  f << "seed,aborted,final_eval_success\n";
  char buf[32];
  for (const SeedOutcome& s : out.seeds) {
    std::snprintf(buf, sizeof(buf), "%.6f", s.final_eval_success);
    f << s.seed << ',' << (s.aborted ? 1 : 0) << ',' << buf << '\n';
  }
  std::snprintf(buf, sizeof(buf), "%.6f", out.mean_success);
  f << "mean,," << buf << '\n';
  std::snprintf(buf, sizeof(buf), "%.6f", out.stderr_success);
  f << "stderr,," << buf << '\n';
}

/// Run every seed of an experiment sequentially and aggregate the final
/// evaluation success as mean and standard error (sample stddev / sqrt(n))
/// over the seeds that completed.
template <typename T>
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::string& out_root) {
  namespace fs = std::filesystem;
  ExperimentOutcome out;
  out.dir = out_root + "/" + cfg.name;
  fs::create_directories(out.dir);

  for (std::uint64_t seed : cfg.seeds)
    out.seeds.push_back(run_seed<T>(cfg, seed, out.dir + "/" + std::to_string(seed)));

  aggregate_experiment(out);
  return out;
}

struct AblationRow {
  std::string label;
  bool negative_embedding = false;
  bool reconstruction_reward = false;
  bool pixel_reward = false;
  ExperimentOutcome outcome;
};

struct AblationOutcome {
  std::vector<AblationRow> rows;
  std::string table_path;
};

/// The five component combinations of the ablation study, each a full
/// multi-seed experiment of the concept agent with switches toggled.
inline std::vector<AblationRow> ablation_rows() {
  return {
      {"ne_rr_pr", true, true, true, {}},
      {"ne_pr", true, false, true, {}},
      {"pr_only", false, false, true, {}},
      {"rr_only", false, true, false, {}},
      {"cde", true, true, false, {}},
  };
}

template <typename T>
AblationOutcome run_ablation_matrix(const ExperimentConfig& base, const std::string& out_root) {
  AblationOutcome out;
  out.rows = ablation_rows();
  for (AblationRow& row : out.rows) {
    ExperimentConfig cfg = base;
    cfg.kind = AgentKind::kCde;
    cfg.name = base.name + "_" + row.label;
    cfg.agent.kind = AgentKind::kCde;
    cfg.agent.use_negative_embedding = row.negative_embedding;
    cfg.agent.use_recon_reward = row.reconstruction_reward;
    cfg.agent.use_pixel_reward = row.pixel_reward;
    cfg.finalize();
    cfg.validate();
    row.outcome = run_experiment<T>(cfg, out_root);
  }

  out.table_path = out_root + "/" + base.name + "_ablation.csv";
  std::ofstream f(out.table_path, std::ios::binary);
  if (!f) throw std::runtime_error("runner: cannot write '" + out.table_path + "'");
  f << "row,negative_embedding,reconstruction_reward,pixel_reward,mean_success,stderr_success\n";
  char buf[64];
  for (const AblationRow& r : out.rows) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.outcome.mean_success,
                  r.outcome.stderr_success);
    f << r.label << ',' << (r.negative_embedding ? 1 : 0) << ','
      << (r.reconstruction_reward ? 1 : 0) << ',' << (r.pixel_reward ? 1 : 0) << ',' << buf
      << '\n';
  }
  return out;
}

}  // namespace cde
