#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cde/graph.hpp"
#include "cde/nn.hpp"
#include "cde/tensor.hpp"

namespace cde {

/// Shared network dimensions. The conv trunk downsamples by average pooling;
/// the pool count adapts to the view size so tiny debug views (6x6) and the
/// full-resolution view (84x84) both produce a sane bottleneck.
struct NetConfig {
  std::int64_t view = 24;
  int frame_stack = 3;
  std::int64_t conv_channels = 8;
  std::int64_t embed_dim = 50;       // d
  std::int64_t mask_embed_dim = 16;  // fusion width for the mask-encoder agent
  std::int64_t hidden = 64;

  int pools() const {
    if (view % 4 == 0 && view >= 8) return 2;
    if (view % 2 == 0) return 1;
    return 0;
  }
  std::int64_t bottom() const { return view >> pools(); }
  std::int64_t trunk_flat() const { return conv_channels * bottom() * bottom(); }

  void validate() const {
    if (view < 3) throw std::invalid_argument("net: view too small");
    if (frame_stack < 1) throw std::invalid_argument("net: frame_stack must be positive");
    if (conv_channels < 1 || embed_dim < 1 || mask_embed_dim < 1 || hidden < 1)
      throw std::invalid_argument("net: layer sizes must be positive");
  }
};

/// Convert a batch of stacked u8 observations to a centered float tensor
/// [N, C, V, V] in [-0.5, 0.5].
template <typename T>
Tensor<T> obs_to_tensor(const std::vector<const std::uint8_t*>& batch, std::int64_t channels,
                        std::int64_t v) {
  const std::int64_t n = static_cast<std::int64_t>(batch.size());
  Tensor<T> t(Shape{n, channels, v, v});
  const std::int64_t per = channels * v * v;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < per; ++i)
      t[b * per + i] = static_cast<T>(batch[static_cast<std::size_t>(b)][i]) / T(255) - T(0.5);
  return t;
}

/// Mask channels stay raw {0,1} so an absent mask is an all-zero channel.
template <typename T>
Tensor<T> mask_to_tensor(const std::vector<const std::uint8_t*>& batch, std::int64_t channels,
                         std::int64_t v) {
  const std::int64_t n = static_cast<std::int64_t>(batch.size());
  Tensor<T> t(Shape{n, channels, v, v});
  const std::int64_t per = channels * v * v;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < per; ++i)
      t[b * per + i] = static_cast<T>(batch[static_cast<std::size_t>(b)][i]);
  return t;
}

/// Three-conv trunk with adaptive pooling, ending in a flat feature row.
template <typename T>
struct ConvTrunk {
  NetConfig cfg;
  Conv2d<T> c1, c2, c3;

  ConvTrunk() = default;
  ConvTrunk(const std::string& name, std::int64_t in_channels, const NetConfig& nc, Rng& rng)
      : cfg(nc),
        c1(name + ".c1", in_channels, nc.conv_channels, 3, 1, rng),
        c2(name + ".c2", nc.conv_channels, nc.conv_channels, 3, 1, rng),
        c3(name + ".c3", nc.conv_channels, nc.conv_channels, 3, 1, rng) {}

  void bind(Graph<T>& g) {
    c1.bind(g);
    c2.bind(g);
    c3.bind(g);
  }
  void bind_const(Graph<T>& g) {
    bind_frozen(g, c1);
    bind_frozen(g, c2);
    bind_frozen(g, c3);
  }

  /// x: [N, in, V, V] -> flat [N, trunk_flat]
  int forward(Graph<T>& g, int x) const {
    int h = g.relu(c1.forward(g, x));
    if (cfg.pools() >= 1) h = g.avg_pool2(h);
    h = g.relu(c2.forward(g, h));
    if (cfg.pools() >= 2) h = g.avg_pool2(h);
    h = g.relu(c3.forward(g, h));
    const std::int64_t n = g.val(h).dim(0);
    return g.reshape(h, Shape{n, cfg.trunk_flat()});
  }

  template <typename F>
  void for_each_param(F&& f) {
    c1.for_each_param(f);
    c2.for_each_param(f);
    c3.for_each_param(f);
  }

 private:
  template <typename M>
  static void bind_frozen(Graph<T>& g, M& m) {
    m.for_each_param([&g](Param<T>& p) {
      Tensor<T> t = p.value;
      t.requires_grad = false;
      p.node = g.leaf(std::move(t));
    });
  }
};

/// Generic frozen bind for any module exposing for_each_param.
template <typename T, typename M>
void bind_module_const(Graph<T>& g, M& m) {
  m.for_each_param([&g](Param<T>& p) {
    Tensor<T> t = p.value;
    t.requires_grad = false;
    p.node = g.leaf(std::move(t));
  });
}

/// Observation encoder with one or two embedding heads. Two heads form the
/// dual concept embedding (positive / negative); one head is the plain
/// baseline embedding.
template <typename T>
struct Encoder {
  ConvTrunk<T> trunk;
  Linear<T> head_pos, head_neg;
  bool dual = false;

  Encoder() = default;
  Encoder(const std::string& name, std::int64_t in_channels, bool dual_heads,
          const NetConfig& nc, Rng& rng)
      : trunk(name + ".trunk", in_channels, nc, rng),
        head_pos(name + ".pos", nc.trunk_flat(), nc.embed_dim, rng),
        dual(dual_heads) {
    if (dual) head_neg = Linear<T>(name + ".neg", nc.trunk_flat(), nc.embed_dim, rng);
  }

  void bind(Graph<T>& g) {
    trunk.bind(g);
    head_pos.bind(g);
    if (dual) head_neg.bind(g);
  }
  void bind_const(Graph<T>& g) {
    trunk.bind_const(g);
    bind_module_const(g, head_pos);
    if (dual) bind_module_const(g, head_neg);
  }

  struct Out {
    int positive = -1;
    int negative = -1;  // -1 when single-headed
    int trunk_features = -1;
  };

  Out forward(Graph<T>& g, int x) const {
    Out o;
    o.trunk_features = trunk.forward(g, x);
    o.positive = head_pos.forward(g, o.trunk_features);
    if (dual) o.negative = head_neg.forward(g, o.trunk_features);
    return o;
  }

  template <typename F>
  void for_each_param(F&& f) {
    trunk.for_each_param(f);
    head_pos.for_each_param(f);
    if (dual) head_neg.for_each_param(f);
  }
};

/// Decoder from the positive embedding back to mask logits [N, V, V],
/// mirroring the trunk's pooling with nearest-neighbour upsampling.
template <typename T>
struct MaskDecoder {
  NetConfig cfg;
  Linear<T> fc;
  Conv2d<T> up1, up2;  // used according to pool count
  Conv2d<T> out;

  MaskDecoder() = default;
  MaskDecoder(const std::string& name, const NetConfig& nc, Rng& rng)
      : cfg(nc), fc(name + ".fc", nc.embed_dim, nc.trunk_flat(), rng),
        out(name + ".out", nc.conv_channels, 1, 3, 1, rng) {
    if (nc.pools() >= 1)
      up1 = Conv2d<T>(name + ".up1", nc.conv_channels, nc.conv_channels, 3, 1, rng);
    if (nc.pools() >= 2)
      up2 = Conv2d<T>(name + ".up2", nc.conv_channels, nc.conv_channels, 3, 1, rng);
  }

  void bind(Graph<T>& g) {
    fc.bind(g);
    if (cfg.pools() >= 1) up1.bind(g);
    if (cfg.pools() >= 2) up2.bind(g);
    out.bind(g);
  }

  /// positive embedding [N, d] -> logits [N, V, V]
  int forward(Graph<T>& g, int pos) const {
    const std::int64_t n = g.val(pos).dim(0);
    int h = g.relu(fc.forward(g, pos));
    h = g.reshape(h, Shape{n, cfg.conv_channels, cfg.bottom(), cfg.bottom()});
    if (cfg.pools() >= 1) h = g.relu(up1.forward(g, g.upsample2(h)));
    if (cfg.pools() >= 2) h = g.relu(up2.forward(g, g.upsample2(h)));
    h = out.forward(g, h);
    return g.reshape(h, Shape{n, cfg.view, cfg.view});
  }

  template <typename F>
  void for_each_param(F&& f) {
    fc.for_each_param(f);
    if (cfg.pools() >= 1) up1.for_each_param(f);
    if (cfg.pools() >= 2) up2.for_each_param(f);
    out.for_each_param(f);
  }
};

/// Small conv encoder turning a stacked mask [N, K, V, V] into an embedding,
/// for the fusion baseline.
template <typename T>
struct MaskEncoder {
  NetConfig cfg;
  Conv2d<T> c1, c2;
  Linear<T> head;

  MaskEncoder() = default;
  MaskEncoder(const std::string& name, const NetConfig& nc, Rng& rng)
      : cfg(nc),
        c1(name + ".c1", nc.frame_stack, nc.conv_channels, 3, 1, rng),
        c2(name + ".c2", nc.conv_channels, nc.conv_channels, 3, 1, rng),
        head(name + ".head", nc.trunk_flat(), nc.mask_embed_dim, rng) {}

  void bind(Graph<T>& g) {
    c1.bind(g);
    c2.bind(g);
    head.bind(g);
  }
  void bind_const(Graph<T>& g) {
    bind_module_const(g, c1);
    bind_module_const(g, c2);
    bind_module_const(g, head);
  }

  int forward(Graph<T>& g, int m) const {
    int h = g.relu(c1.forward(g, m));
    if (cfg.pools() >= 1) h = g.avg_pool2(h);
    h = g.relu(c2.forward(g, h));
    if (cfg.pools() >= 2) h = g.avg_pool2(h);
    const std::int64_t n = g.val(h).dim(0);
    return head.forward(g, g.reshape(h, Shape{n, cfg.trunk_flat()}));
  }

  template <typename F>
  void for_each_param(F&& f) {
    c1.for_each_param(f);
    c2.for_each_param(f);
    head.for_each_param(f);
  }
};

/// Deterministic tanh policy over the embedding.
template <typename T>
struct Actor {
  Linear<T> l1, l2, l3;

  Actor() = default;
  Actor(const std::string& name, std::int64_t embed_in, const NetConfig& nc, Rng& rng)
      : l1(name + ".l1", embed_in, nc.hidden, rng),
        l2(name + ".l2", nc.hidden, nc.hidden, rng),
        l3(name + ".l3", nc.hidden, 2, rng) {}

  void bind(Graph<T>& g) {
    l1.bind(g);
    l2.bind(g);
    l3.bind(g);
  }
  void bind_const(Graph<T>& g) {
    bind_module_const(g, l1);
    bind_module_const(g, l2);
    bind_module_const(g, l3);
  }

  /// embedding [N, e] -> action [N, 2] in [-1, 1]
  int forward(Graph<T>& g, int c) const {
    return g.tanh_(l3.forward(g, g.relu(l2.forward(g, g.relu(l1.forward(g, c))))));
  }

  template <typename F>
  void for_each_param(F&& f) {
    l1.for_each_param(f);
    l2.for_each_param(f);
    l3.for_each_param(f);
  }
};

/// One Q head over (embedding, action).
template <typename T>
struct Critic {
  Linear<T> l1, l2, l3;

  Critic() = default;
  Critic(const std::string& name, std::int64_t embed_in, const NetConfig& nc, Rng& rng)
      : l1(name + ".l1", embed_in + 2, nc.hidden, rng),
        l2(name + ".l2", nc.hidden, nc.hidden, rng),
        l3(name + ".l3", nc.hidden, 1, rng) {}

  void bind(Graph<T>& g) {
    l1.bind(g);
    l2.bind(g);
    l3.bind(g);
  }
  void bind_const(Graph<T>& g) {
    bind_module_const(g, l1);
    bind_module_const(g, l2);
    bind_module_const(g, l3);
  }

  /// (embedding [N,e], action [N,2]) -> Q [N,1]
  int forward(Graph<T>& g, int c, int a) const {
    int x = g.concat(c, a);
    return l3.forward(g, g.relu(l2.forward(g, g.relu(l1.forward(g, x)))));
  }

  template <typename F>
  void for_each_param(F&& f) {
    l1.for_each_param(f);
    l2.for_each_param(f);
    l3.for_each_param(f);
  }
};

/// Copy every parameter value (used to initialize target networks).
template <typename T, typename A, typename B>
void copy_params(A& from, B& to) {
  std::vector<Param<T>*> src, dst;
  from.for_each_param([&src](Param<T>& p) { src.push_back(&p); });
  to.for_each_param([&dst](Param<T>& p) { dst.push_back(&p); });
  if (src.size() != dst.size()) throw std::logic_error("copy_params: module mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->value.shape != dst[i]->value.shape)
      throw std::logic_error("copy_params: shape mismatch at '" + src[i]->name + "'");
    dst[i]->value.v = src[i]->value.v;
  }
}

}  // namespace cde
