#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cde/augment.hpp"
#include "cde/checkpoint.hpp"
#include "cde/concept_source.hpp"
#include "cde/graph.hpp"
#include "cde/networks.hpp"
#include "cde/nn.hpp"
#include "cde/optim.hpp"
#include "cde/replay.hpp"
#include "cde/rng.hpp"
#include "cde/wristworld.hpp"

namespace cde {

/// The four agent variants that share one training loop: the concept-driven
/// agent, the plain RGB baseline, the mask-as-channels baseline, and the
/// separate-mask-encoder baseline.
enum class AgentKind { kCde, kRgb, kRgbm, kMe };

inline const char* agent_kind_name(AgentKind k) {
  switch (k) {
    case AgentKind::kCde: return "cde";
    case AgentKind::kRgb: return "rgb";
    case AgentKind::kRgbm: return "rgbm";
    case AgentKind::kMe: return "me";
  }
  return "?";
}

inline AgentKind parse_agent_kind(const std::string& s) {
  if (s == "cde") return AgentKind::kCde;
  if (s == "rgb") return AgentKind::kRgb;
  if (s == "rgbm") return AgentKind::kRgbm;
  if (s == "me") return AgentKind::kMe;
  throw std::invalid_argument("unknown agent kind '" + s + "' (want cde|rgb|rgbm|me)");
}

struct AgentConfig {
  AgentKind kind = AgentKind::kCde;
  NetConfig net;

  double discount = 0.99;
  int n_step = 3;
  double tau = 0.01;
  double lr = 1e-4;
  double alpha = 1.0;            // critic-loss weight
  double beta = 1.0;             // reconstruction-loss weight
  double intrinsic_scale = 1.0;  // weight of the clipped reconstruction bonus
  int presence_epsilon = 20;     // pixels needed for a positive gate
  int batch_size = 256;
  std::int64_t replay_capacity = 100000;
  int update_every = 2;          // one gradient update every this many env steps
  int augment_pad = 4;
  double explore_sigma_start = 1.0;
  double explore_sigma_end = 0.1;
  double explore_fraction = 1.0 / 3.0;  // schedule finishes at this fraction of total_steps
  double smooth_sigma = 0.2;            // target-policy smoothing noise
  double smooth_clip = 0.3;
  double pixel_kappa = 0.0;             // <=0 picks 1/(view*view)
  std::int64_t total_steps = 60000;     // horizon used by the exploration schedule

  // Reward-composition switches. The concept agent defaults to the
  // reconstruction bonus without pixel shaping; the mask baselines take
  // pixel shaping; the RGB baseline takes the task reward only. Switches
  // that do not apply to a kind are forced off in normalize().
  bool use_negative_embedding = true;
  bool use_recon_reward = true;
  bool use_pixel_reward = false;

  double resolved_kappa() const {
    return pixel_kappa > 0.0 ? pixel_kappa
                             : 1.0 / static_cast<double>(net.view * net.view);
  }

  void normalize() {
    if (kind == AgentKind::kRgb) {
      use_negative_embedding = false;
      use_recon_reward = false;
      use_pixel_reward = false;
    } else if (kind == AgentKind::kRgbm || kind == AgentKind::kMe) {
      use_negative_embedding = false;
      use_recon_reward = false;
      use_pixel_reward = true;
    }
  }

  void validate() const {
    net.validate();
    if (!(discount > 0.0 && discount <= 1.0))
      throw std::invalid_argument("agent: discount outside (0,1]");
    if (n_step < 1) throw std::invalid_argument("agent: n_step must be >= 1");
    if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("agent: tau outside (0,1]");
    if (lr <= 0.0) throw std::invalid_argument("agent: learning rate must be positive");
    if (alpha < 0.0 || beta < 0.0)
      throw std::invalid_argument("agent: loss weights must be non-negative");
    if (intrinsic_scale < 0.0)
      throw std::invalid_argument("agent: intrinsic scale must be non-negative");
    if (presence_epsilon < 1) throw std::invalid_argument("agent: presence epsilon must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("agent: batch size must be >= 1");
    if (replay_capacity < batch_size + n_step)
      throw std::invalid_argument("agent: replay capacity too small for one batch");
    if (update_every < 1) throw std::invalid_argument("agent: update_every must be >= 1");
    if (augment_pad < 0) throw std::invalid_argument("agent: negative augmentation padding");
    if (explore_sigma_start < 0.0 || explore_sigma_end < 0.0 || smooth_sigma < 0.0 ||
        smooth_clip < 0.0)
      throw std::invalid_argument("agent: noise scales must be non-negative");
    if (!(explore_fraction > 0.0 && explore_fraction <= 1.0))
      throw std::invalid_argument("agent: explore_fraction outside (0,1]");
    if (total_steps < 1) throw std::invalid_argument("agent: total_steps must be >= 1");
  }
};

/// The intrinsic bonus term: the reconstruction loss clipped to [0, 1] and
/// scaled. Kept as a free function so the composition is testable on its own.
inline double clipped_bonus(double recon_loss, double scale) {
  return scale * std::clamp(recon_loss, 0.0, 1.0);
}

/// What one environment transition contributed to the stored reward.
struct StepOutcome {
  double reward_total = 0.0;
  double reward_env = 0.0;
  double reward_recon = 0.0;  // scaled, clipped reconstruction bonus
  double reward_pixel = 0.0;  // pixel-count shaping
};

struct UpdateResult {
  bool updated = false;
  double loss_critic = 0.0;
  double loss_recons = 0.0;
  double loss_total = 0.0;
  double loss_actor = 0.0;
};

/// One fully drawn training batch: tensors are already augmented and
/// normalized, gates and targets are plain numbers. Everything an update
/// consumes is fixed here, which keeps the loss a pure function of the
/// parameters (finite-difference checks rely on that).
template <typename T>
struct BatchData {
  std::int64_t n = 0;
  Tensor<T> obs;              // [N, Cin, V, V]
  Tensor<T> next_obs;         // [N, Cin, V, V]
  Tensor<T> mask_in;          // [N, K, V, V] mask-encoder input (empty unless used)
  Tensor<T> next_mask_in;     // [N, K, V, V]
  Tensor<T> recon_target;     // [N, V, V] newest mask, registered to obs
  std::vector<double> gate;       // 0/1 presence per sample (obs side)
  std::vector<double> next_gate;  // 0/1 presence per sample (next-obs side)
  Tensor<T> actions;          // [N, 2]
  std::vector<double> reward_nstep;
  std::vector<double> bootstrap;  // 0 when the window ended the episode
  Tensor<T> smooth_noise;     // [N, 2], already clipped
};

/// Actor-critic agent with an optional dual concept embedding and mask
/// reconstruction head. One class covers all four variants; the config's
/// `kind` selects the input layout, the embedding path, and the reward
/// composition.
template <typename T>
class Agent {
 public:
  Agent(AgentConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.normalize();
    cfg_.validate();
    Rng root(seed);
    Rng init_rng = root.split(1);
    explore_rng_ = root.split(2);
    update_rng_ = root.split(3);

    const std::int64_t k = cfg_.net.frame_stack;
    obs_channels_ = 3 * k + (cfg_.kind == AgentKind::kRgbm ? k : 0);
    const bool dual = cfg_.kind == AgentKind::kCde && cfg_.use_negative_embedding;
    encoder_ = Encoder<T>("enc", obs_channels_, dual, cfg_.net, init_rng);
    if (cfg_.kind == AgentKind::kCde) decoder_ = MaskDecoder<T>("dec", cfg_.net, init_rng);
    if (cfg_.kind == AgentKind::kMe) mask_encoder_ = MaskEncoder<T>("menc", cfg_.net, init_rng);

    const std::int64_t embed_in =
        cfg_.net.embed_dim + (cfg_.kind == AgentKind::kMe ? cfg_.net.mask_embed_dim : 0);
    actor_ = Actor<T>("actor", embed_in, cfg_.net, init_rng);
    q1_ = Critic<T>("q1", embed_in, cfg_.net, init_rng);
    q2_ = Critic<T>("q2", embed_in, cfg_.net, init_rng);
    tq1_ = Critic<T>("tq1", embed_in, cfg_.net, init_rng);
    tq2_ = Critic<T>("tq2", embed_in, cfg_.net, init_rng);
    copy_params<T>(q1_, tq1_);
    copy_params<T>(q2_, tq2_);

    opt_model_.lr = cfg_.lr;
    opt_actor_.lr = cfg_.lr;
    for_each_model_param([this](Param<T>& p) { opt_model_.add_param(p); });
    actor_.for_each_param([this](Param<T>& p) { opt_actor_.add_param(p); });
    q1_.for_each_param([this](Param<T>& p) { q_online_.push_back(&p); });
    q2_.for_each_param([this](Param<T>& p) { q_online_.push_back(&p); });
    tq1_.for_each_param([this](Param<T>& p) { q_target_.push_back(&p); });
    tq2_.for_each_param([this](Param<T>& p) { q_target_.push_back(&p); });

    replay_ = ReplayBuffer(cfg_.replay_capacity, cfg_.net.view, static_cast<int>(k));
    cur_masks_.assign(static_cast<std::size_t>(k) * mask_pixels(), 0);
  }

  const AgentConfig& config() const { return cfg_; }
  ReplayBuffer& replay() { return replay_; }
  std::int64_t gate_positive_count() const { return gate_pos_; }
  std::int64_t gate_negative_count() const { return gate_neg_; }
  std::uint64_t explore_rng_state() const { return explore_rng_.state(); }
  std::uint64_t update_rng_state() const { return update_rng_.state(); }

  /// Linear exploration-noise schedule: start -> end over the first
  /// explore_fraction of total_steps, then flat.
  double explore_sigma(std::int64_t step) const {
    const double horizon = cfg_.explore_fraction * static_cast<double>(cfg_.total_steps);
    const double f = std::min(1.0, static_cast<double>(step) / std::max(1.0, horizon));
    return cfg_.explore_sigma_start + f * (cfg_.explore_sigma_end - cfg_.explore_sigma_start);
  }

  // --- collection ----------------------------------------------------------

  /// Start a new training episode from its first observation and mask. The
  /// mask stack is seeded by repeating the first mask, mirroring how the
  /// environment seeds its frame stack.
  void begin_episode(const std::vector<std::uint8_t>& obs, const Mask& m) {
    check_mask(m);
    replay_.begin_episode(obs, m);
    cur_obs_ = obs;
    for (std::int64_t f = 0; f < cfg_.net.frame_stack; ++f)
      std::copy(m.bits.begin(), m.bits.end(),
                cur_masks_.begin() + static_cast<std::ptrdiff_t>(f * mask_pixels()));
  }

  /// Training action for the current observation: greedy policy output plus
  /// scheduled Gaussian exploration noise, both clamped to [-1, 1].
  Action act_train(std::int64_t global_step) {
    Action a = policy_action(cur_obs_.data(), cur_masks_.data(), /*deploy_gate=*/false);
    const double sigma = explore_sigma(global_step);
    a.dx = std::clamp(a.dx + sigma * explore_rng_.gauss(), -1.0, 1.0);
    a.dy = std::clamp(a.dy + sigma * explore_rng_.gauss(), -1.0, 1.0);
    return a;
  }

  /// Greedy action for evaluation. `mask_stack` is the [K, V, V] mask stack
  /// for kinds whose networks take masks as input, nullptr otherwise. The
  /// concept agent gates itself from its own predicted mask here and never
  /// reads an external mask.
  Action act_greedy(const std::vector<std::uint8_t>& obs, const std::uint8_t* mask_stack) {
    const bool needs_mask = cfg_.kind == AgentKind::kRgbm || cfg_.kind == AgentKind::kMe;
    if (needs_mask && mask_stack == nullptr)
      throw std::invalid_argument("agent: this kind needs a mask stack to act");
    return policy_action(obs.data(), mask_stack, /*deploy_gate=*/cfg_.kind == AgentKind::kCde);
  }

  /// Record one transition. Computes the reward composition for this kind
  /// (task reward, optional clipped reconstruction bonus, optional pixel
  /// shaping), freezes the total into replay, and advances the current
  /// observation/mask state.
  StepOutcome observe(const Action& a, double reward_env, const std::vector<std::uint8_t>& next_obs,
                      const Mask& next_mask, bool done) {
    check_mask(next_mask);
    StepOutcome out;
    out.reward_env = reward_env;
    if (cfg_.use_recon_reward)
      out.reward_recon =
          clipped_bonus(reconstruction_loss(next_obs, next_mask), cfg_.intrinsic_scale);
    if (cfg_.use_pixel_reward)
      out.reward_pixel = cfg_.resolved_kappa() * static_cast<double>(next_mask.popcount());
    out.reward_total = out.reward_env + out.reward_recon + out.reward_pixel;
    replay_.add_step({a.dx, a.dy}, out.reward_total, done, next_obs, next_mask);
    cur_obs_ = next_obs;
    std::copy(cur_masks_.begin() + static_cast<std::ptrdiff_t>(mask_pixels()), cur_masks_.end(),
              cur_masks_.begin());
    std::copy(next_mask.bits.begin(), next_mask.bits.end(),
              cur_masks_.end() - static_cast<std::ptrdiff_t>(mask_pixels()));
    return out;
  }

  /// The reconstruction loss the intrinsic bonus is based on: binary
  /// cross-entropy of the predicted mask logits against the provided mask,
  /// evaluated without gradients. Only meaningful for the concept agent.
  double reconstruction_loss(const std::vector<std::uint8_t>& obs, const Mask& m) {
    if (cfg_.kind != AgentKind::kCde)
      throw std::logic_error("agent: reconstruction loss is a concept-agent quantity");
    Graph<T> g;
    NoGrad<T> off(g);
    encoder_.bind(g);
    decoder_.bind(g);
    std::vector<const std::uint8_t*> one{obs.data()};
    int x = g.constant(obs_to_tensor<T>(one, obs_channels_, cfg_.net.view));
    auto eo = encoder_.forward(g, x);
    int logits = decoder_.forward(g, eo.positive);
    Tensor<T> target(Shape{1, cfg_.net.view, cfg_.net.view});
    for (std::size_t i = 0; i < m.bits.size(); ++i) target[i] = static_cast<T>(m.bits[i]);
    int loss = g.bce_with_logits(logits, g.constant(std::move(target)));
    return static_cast<double>(g.val(loss)[0]);
  }

  /// Predicted mask for an observation (thresholded at probability 0.5),
  /// used for self-gated deployment and diagnostics.
  Mask predict_mask(const std::vector<std::uint8_t>& obs) {
    if (cfg_.kind != AgentKind::kCde)
      throw std::logic_error("agent: only the concept agent predicts masks");
    Graph<T> g;
    NoGrad<T> off(g);
    encoder_.bind(g);
    decoder_.bind(g);
    std::vector<const std::uint8_t*> one{obs.data()};
    int x = g.constant(obs_to_tensor<T>(one, obs_channels_, cfg_.net.view));
    int logits = decoder_.forward(g, encoder_.forward(g, x).positive);
    const Tensor<T>& lv = g.val(logits);
    Mask m(cfg_.net.view, cfg_.net.view);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      m.bits[i] = lv[i] > T(0) ? 1 : 0;  // sigmoid(z) > 0.5  <=>  z > 0
    return m;
  }

  // --- updates -------------------------------------------------------------

  /// Run one gradient update if this step is on the update cadence and the
  /// buffer holds enough data; otherwise a no-op with `updated == false`.
  UpdateResult maybe_update(std::int64_t global_step) {
    if (global_step % cfg_.update_every != 0) return {};
    if (replay_.size_steps() < cfg_.batch_size + cfg_.n_step) return {};
    if (replay_.valid_starts(cfg_.n_step) == 0) return {};
    return update_once();
  }

  UpdateResult update_once() {
    BatchData<T> b = draw_batch(update_rng_);
    const std::vector<double> y = compute_targets(b);

    Graph<T> g;
    ModelNodes mn = model_loss(g, b, y);
    g.backward(mn.total);
    UpdateResult r;
    r.updated = true;
    r.loss_critic = static_cast<double>(g.val(mn.critic)[0]);
    r.loss_recons = mn.recons >= 0 ? static_cast<double>(g.val(mn.recons)[0]) : 0.0;
    r.loss_total = static_cast<double>(g.val(mn.total)[0]);

    // The actor sees the embedding values computed above, detached, and the
    // critics as fixed functions: its gradients reach only its own layers.
    Tensor<T> cvals = g.val(mn.embedding);
    cvals.requires_grad = false;
    opt_model_.step(g);
    r.loss_actor = actor_step(std::move(cvals));
    soft_update(q_target_, q_online_, cfg_.tau);
    return r;
  }

  /// Draw a batch: sample n-step windows, apply one random shift per
  /// (observation, mask) pair so they stay registered, compute presence
  /// gates from the shifted masks, and pre-draw the target-smoothing noise.
  BatchData<T> draw_batch(Rng& rng) {
    const std::int64_t v = cfg_.net.view;
    const std::int64_t k = cfg_.net.frame_stack;
    BatchData<T> b;
    b.n = cfg_.batch_size;
    b.obs = Tensor<T>(Shape{b.n, obs_channels_, v, v});
    b.next_obs = Tensor<T>(Shape{b.n, obs_channels_, v, v});
    if (cfg_.kind == AgentKind::kMe) {
      b.mask_in = Tensor<T>(Shape{b.n, k, v, v});
      b.next_mask_in = Tensor<T>(Shape{b.n, k, v, v});
    }
    if (cfg_.kind == AgentKind::kCde) b.recon_target = Tensor<T>(Shape{b.n, v, v});
    b.actions = Tensor<T>(Shape{b.n, 2});
    b.smooth_noise = Tensor<T>(Shape{b.n, 2});
    b.gate.resize(static_cast<std::size_t>(b.n), 1.0);
    b.next_gate.resize(static_cast<std::size_t>(b.n), 1.0);
    b.reward_nstep.resize(static_cast<std::size_t>(b.n));
    b.bootstrap.resize(static_cast<std::size_t>(b.n));

    const auto starts = replay_.draw_starts(static_cast<int>(b.n), cfg_.n_step, rng);
    for (std::int64_t i = 0; i < b.n; ++i) {
      Sample s = replay_.materialize(starts[static_cast<std::size_t>(i)].first,
                                     starts[static_cast<std::size_t>(i)].second, cfg_.n_step,
                                     cfg_.discount);
      augment_pair(s.obs, s.mask_stack, 3 * k, k, v, cfg_.augment_pad, rng);
      augment_pair(s.next_obs, s.next_mask_stack, 3 * k, k, v, cfg_.augment_pad, rng);
      fill_inputs(b.obs, i, s.obs, s.mask_stack);
      fill_inputs(b.next_obs, i, s.next_obs, s.next_mask_stack);
      if (cfg_.kind == AgentKind::kMe) {
        copy_mask_stack(b.mask_in, i, s.mask_stack);
        copy_mask_stack(b.next_mask_in, i, s.next_mask_stack);
      }
      const std::uint8_t* newest = s.mask_stack.data() + (k - 1) * v * v;
      const std::uint8_t* next_newest = s.next_mask_stack.data() + (k - 1) * v * v;
      if (cfg_.kind == AgentKind::kCde) {
        for (std::int64_t p = 0; p < v * v; ++p)
          b.recon_target[i * v * v + p] = static_cast<T>(newest[p]);
        b.gate[static_cast<std::size_t>(i)] = presence_of(newest);
        b.next_gate[static_cast<std::size_t>(i)] = presence_of(next_newest);
        count_gate(b.gate[static_cast<std::size_t>(i)]);
        count_gate(b.next_gate[static_cast<std::size_t>(i)]);
      }
      b.actions[i * 2 + 0] = static_cast<T>(s.action[0]);
      b.actions[i * 2 + 1] = static_cast<T>(s.action[1]);
      b.reward_nstep[static_cast<std::size_t>(i)] = s.reward_nstep;
      b.bootstrap[static_cast<std::size_t>(i)] = s.bootstrap ? 1.0 : 0.0;
      for (int c = 0; c < 2; ++c)
        b.smooth_noise[i * 2 + c] = static_cast<T>(
            std::clamp(cfg_.smooth_sigma * rng.gauss(), -cfg_.smooth_clip, cfg_.smooth_clip));
    }
    return b;
  }

  /// TD targets, computed without gradients: smoothed greedy action on the
  /// next observation, minimum of the two target critics, n-step bootstrap.
  std::vector<double> compute_targets(const BatchData<T>& b) {
    Graph<T> g;
    NoGrad<T> off(g);
    encoder_.bind(g);
    if (cfg_.kind == AgentKind::kMe) mask_encoder_.bind(g);
    actor_.bind(g);
    tq1_.bind(g);
    tq2_.bind(g);

    int x = g.constant(b.next_obs);
    int m = cfg_.kind == AgentKind::kMe ? g.constant(b.next_mask_in) : -1;
    int c = embedding_node(g, x, m, b.next_gate);
    int a = actor_.forward(g, c);
    a = g.clip(g.add(a, g.constant(b.smooth_noise)), T(-1), T(1));
    int qmin = g.minimum(tq1_.forward(g, c, a), tq2_.forward(g, c, a));
    const Tensor<T>& qv = g.val(qmin);

    const double gn = std::pow(cfg_.discount, cfg_.n_step);
    std::vector<double> y(static_cast<std::size_t>(b.n));
    for (std::int64_t i = 0; i < b.n; ++i)
      y[static_cast<std::size_t>(i)] =
          b.reward_nstep[static_cast<std::size_t>(i)] +
          b.bootstrap[static_cast<std::size_t>(i)] * gn * static_cast<double>(qv[i]);
    return y;
  }

  struct ModelNodes {
    int total = -1;
    int critic = -1;
    int recons = -1;     // -1 for kinds without a mask head
    int embedding = -1;  // the (gated) embedding fed to the critics
  };

  /// The differentiable model loss: alpha * (two critic MSEs) + beta * mask
  /// BCE. A pure function of the online parameters given a fixed batch and
  /// fixed targets.
  ModelNodes model_loss(Graph<T>& g, const BatchData<T>& b, const std::vector<double>& y) {
    if (static_cast<std::int64_t>(y.size()) != b.n)
      throw std::invalid_argument("agent: target count does not match batch");
    encoder_.bind(g);
    if (cfg_.kind == AgentKind::kMe) mask_encoder_.bind(g);
    if (cfg_.kind == AgentKind::kCde) decoder_.bind(g);
    q1_.bind(g);
    q2_.bind(g);

    int x = g.constant(b.obs);
    int m = cfg_.kind == AgentKind::kMe ? g.constant(b.mask_in) : -1;
    EmbedNodes en = embedding_nodes(g, x, m, b.gate);

    Tensor<T> neg_y(Shape{b.n, 1});
    for (std::int64_t i = 0; i < b.n; ++i) neg_y[i] = static_cast<T>(-y[static_cast<std::size_t>(i)]);
    int ny = g.constant(std::move(neg_y));
    int act = g.constant(b.actions);
    ModelNodes out;
    out.embedding = en.embedding;
    int d1 = g.add(q1_.forward(g, en.embedding, act), ny);
    int d2 = g.add(q2_.forward(g, en.embedding, act), ny);
    out.critic = g.add(g.mean(g.mul(d1, d1)), g.mean(g.mul(d2, d2)));
    int total = g.mul_scalar(out.critic, static_cast<T>(cfg_.alpha));
    if (cfg_.kind == AgentKind::kCde) {
      int logits = decoder_.forward(g, en.positive);
      out.recons = g.bce_with_logits(logits, g.constant(b.recon_target));
      total = g.add(total, g.mul_scalar(out.recons, static_cast<T>(cfg_.beta)));
    }
    out.total = total;
    return out;
  }

  /// Actor update on detached embeddings: maximize min(Q1, Q2) with the
  /// critic parameters held constant.
  double actor_step(Tensor<T> embedding_values) {
    Graph<T> g;
    int lnode = actor_objective(g, std::move(embedding_values));
    g.backward(lnode);
    const double loss = static_cast<double>(g.val(lnode)[0]);
    opt_actor_.step(g);
    return loss;
  }

  /// The actor objective as a graph: -mean(min(Q1, Q2)(c, pi(c))) with c and
  /// the critics constant. Exposed separately so tests can difference it.
  int actor_objective(Graph<T>& g, Tensor<T> embedding_values) {
    embedding_values.requires_grad = false;
    actor_.bind(g);
    q1_.bind_const(g);
    q2_.bind_const(g);
    int c = g.constant(std::move(embedding_values));
    int a = actor_.forward(g, c);
    int qmin = g.minimum(q1_.forward(g, c, a), q2_.forward(g, c, a));
    return g.mul_scalar(g.mean(qmin), T(-1));
  }

  // --- parameter access ----------------------------------------------------

  template <typename F>
  void for_each_model_param(F&& f) {
    encoder_.for_each_param(f);
    if (cfg_.kind == AgentKind::kCde) decoder_.for_each_param(f);
    if (cfg_.kind == AgentKind::kMe) mask_encoder_.for_each_param(f);
    q1_.for_each_param(f);
    q2_.for_each_param(f);
  }

  template <typename F>
  void for_each_param(F&& f) {  // online + actor + targets: everything checkpointed
    for_each_model_param(f);
    actor_.for_each_param(f);
    tq1_.for_each_param(f);
    tq2_.for_each_param(f);
  }

  /// Names and shapes of every trainable (online) parameter, for comparing
  /// architectures across agent kinds.
  std::vector<std::pair<std::string, Shape>> layer_inventory() {
    std::vector<std::pair<std::string, Shape>> out;
    for_each_model_param([&out](Param<T>& p) { out.emplace_back(p.name, p.value.shape); });
    actor_.for_each_param([&out](Param<T>& p) { out.emplace_back(p.name, p.value.shape); });
    return out;
  }

  void save(const std::string& path) {
    std::map<std::string, Tensor<double>> m;
    for_each_param([&m](Param<T>& p) {
      Tensor<double> t(p.value.shape);
      for (std::size_t i = 0; i < p.value.v.size(); ++i) t[i] = static_cast<double>(p.value[i]);
      if (!m.emplace(p.name, std::move(t)).second)
        throw std::logic_error("agent: duplicate parameter name '" + p.name + "'");
    });
    save_checkpoint(path, m);
  }

  void load(const std::string& path) {
    auto m = load_checkpoint<double>(path);
    std::size_t used = 0;
    for_each_param([&](Param<T>& p) {
      auto it = m.find(p.name);
      if (it == m.end())
        throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
      if (it->second.shape != p.value.shape)
        throw std::runtime_error("checkpoint: shape mismatch for '" + p.name + "'");
      for (std::size_t i = 0; i < p.value.v.size(); ++i)
        p.value[i] = static_cast<T>(it->second[i]);
      ++used;
    });
    if (used != m.size())
      throw std::runtime_error("checkpoint: file holds parameters this agent does not have");
  }

 private:
  struct EmbedNodes {
    int embedding = -1;
    int positive = -1;
  };

  std::int64_t mask_pixels() const { return cfg_.net.view * cfg_.net.view; }

  void check_mask(const Mask& m) const {
    if (m.h != cfg_.net.view || m.w != cfg_.net.view)
      throw std::invalid_argument("agent: mask dimensions do not match the view");
  }

  double presence_of(const std::uint8_t* mask_pix) const {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < mask_pixels(); ++i) n += mask_pix[i];
    return n >= cfg_.presence_epsilon ? 1.0 : 0.0;
  }

  void count_gate(double p) {
    if (p > 0.5)
      ++gate_pos_;
    else
      ++gate_neg_;
  }

  /// Copy one raw sample into row i of the batch observation tensor,
  /// normalizing RGB to [-0.5, 0.5] and appending raw mask channels for the
  /// mask-as-channels kind.
  void fill_inputs(Tensor<T>& dst, std::int64_t i, const std::vector<std::uint8_t>& obs,
                   const std::vector<std::uint8_t>& mask_stack) {
    const std::int64_t rgb = 3 * cfg_.net.frame_stack * mask_pixels();
    T* row = dst.v.data() + i * obs_channels_ * mask_pixels();
    for (std::int64_t p = 0; p < rgb; ++p)
      row[p] = static_cast<T>(obs[static_cast<std::size_t>(p)]) / T(255) - T(0.5);
    if (cfg_.kind == AgentKind::kRgbm)
      for (std::int64_t p = 0; p < cfg_.net.frame_stack * mask_pixels(); ++p)
        row[rgb + p] = static_cast<T>(mask_stack[static_cast<std::size_t>(p)]);
  }

  void copy_mask_stack(Tensor<T>& dst, std::int64_t i, const std::vector<std::uint8_t>& ms) {
    T* row = dst.v.data() + i * cfg_.net.frame_stack * mask_pixels();
    for (std::size_t p = 0; p < ms.size(); ++p) row[p] = static_cast<T>(ms[p]);
  }

  /// The embedding fed to actor and critics. For the dual-embedding agent
  /// this is the presence-gated mixture p*c+ + (1-p)*c-; multiplying by exact
  /// 0/1 gates means the unselected branch contributes exactly zero gradient.
  EmbedNodes embedding_nodes(Graph<T>& g, int x, int mask_node, const std::vector<double>& gate) {
    auto eo = encoder_.forward(g, x);
    EmbedNodes en;
    en.positive = eo.positive;
    if (cfg_.kind == AgentKind::kCde && cfg_.use_negative_embedding) {
      const std::int64_t n = g.val(eo.positive).dim(0);
      const std::int64_t d = cfg_.net.embed_dim;
      Tensor<T> gp(Shape{n, d}), gn(Shape{n, d});
      for (std::int64_t i = 0; i < n; ++i) {
        const T p = static_cast<T>(gate[static_cast<std::size_t>(i)]);
        for (std::int64_t j = 0; j < d; ++j) {
          gp[i * d + j] = p;
          gn[i * d + j] = T(1) - p;
        }
      }
      en.embedding = g.add(g.mul(eo.positive, g.constant(std::move(gp))),
                           g.mul(eo.negative, g.constant(std::move(gn))));
    } else if (cfg_.kind == AgentKind::kMe) {
      en.embedding = g.concat(eo.positive, mask_encoder_.forward(g, mask_node));
    } else {
      en.embedding = eo.positive;
    }
    return en;
  }

  int embedding_node(Graph<T>& g, int x, int mask_node, const std::vector<double>& gate) {
    return embedding_nodes(g, x, mask_node, gate).embedding;
  }

  /// Shared greedy-policy forward for acting. With `deploy_gate` the concept
  /// agent derives its presence gate from its own predicted mask instead of
  /// the provided one.
  Action policy_action(const std::uint8_t* obs, const std::uint8_t* mask_stack, bool deploy_gate) {
    Graph<T> g;
    NoGrad<T> off(g);
    encoder_.bind(g);
    if (cfg_.kind == AgentKind::kCde) decoder_.bind(g);
    if (cfg_.kind == AgentKind::kMe) mask_encoder_.bind(g);
    actor_.bind(g);

    const std::int64_t v = cfg_.net.view;
    const std::int64_t k = cfg_.net.frame_stack;
    Tensor<T> xt(Shape{1, obs_channels_, v, v});
    const std::int64_t rgb = 3 * k * v * v;
    for (std::int64_t p = 0; p < rgb; ++p) xt[p] = static_cast<T>(obs[p]) / T(255) - T(0.5);
    if (cfg_.kind == AgentKind::kRgbm) {
      for (std::int64_t p = 0; p < k * v * v; ++p)
        xt[rgb + p] = mask_stack ? static_cast<T>(mask_stack[p]) : T(0);
    }
    int x = g.constant(std::move(xt));
    auto eo = encoder_.forward(g, x);

    int c;
    if (cfg_.kind == AgentKind::kCde && cfg_.use_negative_embedding) {
      double p;
      if (deploy_gate) {
        int logits = decoder_.forward(g, eo.positive);
        const Tensor<T>& lv = g.val(logits);
        std::int64_t on = 0;
        for (std::int64_t i = 0; i < v * v; ++i) on += lv[i] > T(0) ? 1 : 0;
        p = on >= cfg_.presence_epsilon ? 1.0 : 0.0;
      } else {
        p = presence_of(mask_stack + (k - 1) * v * v);  // newest mask in the stack
      }
      count_gate(p);
      c = p > 0.5 ? eo.positive : eo.negative;
    } else if (cfg_.kind == AgentKind::kCde) {
      count_gate(1.0);
      c = eo.positive;
    } else if (cfg_.kind == AgentKind::kMe) {
      Tensor<T> mt(Shape{1, k, v, v});
      for (std::int64_t p = 0; p < k * v * v; ++p) mt[p] = static_cast<T>(mask_stack[p]);
      c = g.concat(eo.positive, mask_encoder_.forward(g, g.constant(std::move(mt))));
    } else {
      c = eo.positive;
    }
    int a = actor_.forward(g, c);
    const Tensor<T>& av = g.val(a);
    return Action{static_cast<double>(av[0]), static_cast<double>(av[1])};
  }

  AgentConfig cfg_;
  std::int64_t obs_channels_ = 0;
  Encoder<T> encoder_;
  MaskDecoder<T> decoder_;
  MaskEncoder<T> mask_encoder_;
  Actor<T> actor_;
  Critic<T> q1_, q2_, tq1_, tq2_;
  Adam<T> opt_model_, opt_actor_;
  std::vector<Param<T>*> q_online_, q_target_;
  ReplayBuffer replay_{1, 3, 1};
  Rng explore_rng_{0}, update_rng_{0};
  std::vector<std::uint8_t> cur_obs_;
  std::vector<std::uint8_t> cur_masks_;  // [K, V, V], oldest first
  std::int64_t gate_pos_ = 0, gate_neg_ = 0;
};

}  // namespace cde
