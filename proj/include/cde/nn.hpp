#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cde/graph.hpp"
#include "cde/rng.hpp"
#include "cde/tensor.hpp"

namespace cde {

/// One learnable tensor plus its Adam state. `node` is the id of the leaf
/// bound into the current graph (refreshed every forward pass).
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  std::vector<T> m, v;  // Adam moments
  int node = -1;

  Param() = default;
  Param(std::string nm, Tensor<T> val) : name(std::move(nm)), value(std::move(val)) {
    value.requires_grad = true;
    m.assign(static_cast<std::size_t>(value.numel()), T(0));
    v.assign(static_cast<std::size_t>(value.numel()), T(0));
  }

  int bind(Graph<T>& g) {
    node = g.leaf(value);
    return node;
  }
};

template <typename T>
inline void kaiming_uniform(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

/// y = x @ w + b with w: [in, out], b: [out].
template <typename T>
struct Linear {
  Param<T> w, b;

  Linear() = default;
  Linear(const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
    Tensor<T> wt(Shape{in, out});
    kaiming_uniform(wt, in, rng);
    w = Param<T>(name + ".w", std::move(wt));
    b = Param<T>(name + ".b", Tensor<T>::zeros(Shape{out}));
  }

  void bind(Graph<T>& g) {
    w.bind(g);
    b.bind(g);
  }

  int forward(Graph<T>& g, int x) const { return g.add(g.matmul(x, w.node), b.node); }

  template <typename F>
  void for_each_param(F&& f) {
    f(w);
    f(b);
  }
};

/// Stride-1 convolution with weight [out_ch, in_ch, k, k] and bias [out_ch].
template <typename T>
struct Conv2d {
  Param<T> w, b;
  int pad = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, int padding,
         Rng& rng)
      : pad(padding) {
    Tensor<T> wt(Shape{out_ch, in_ch, k, k});
    kaiming_uniform(wt, in_ch * k * k, rng);
    w = Param<T>(name + ".w", std::move(wt));
    b = Param<T>(name + ".b", Tensor<T>::zeros(Shape{out_ch}));
  }

  void bind(Graph<T>& g) {
    w.bind(g);
    b.bind(g);
  }

  int forward(Graph<T>& g, int x) const { return g.add(g.conv2d(x, w.node, pad), b.node); }

  template <typename F>
  void for_each_param(F&& f) {
    f(w);
    f(b);
  }
};

}  // namespace cde
