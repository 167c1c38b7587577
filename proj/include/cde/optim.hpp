#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cde/graph.hpp"
#include "cde/nn.hpp"

namespace cde {

/// Adam over a fixed set of registered parameters. All registered params share
/// one step counter; params whose bound node was not reached by backward are
/// skipped for that step (their moments stay untouched).
template <typename T>
class Adam {
 public:
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(double learning_rate = 1e-4) : lr(learning_rate) {}

  void add_param(Param<T>& p) { params_.push_back(&p); }

  template <typename M>
  void add_module(M& m) {
    m.for_each_param([this](Param<T>& p) { add_param(p); });
  }

  std::int64_t step_count() const { return t_; }

  /// Apply one update from the gradients accumulated in `g`.
  void step(Graph<T>& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (Param<T>* p : params_) {
      if (p->node < 0 || !g.grad_defined(p->node)) continue;
      const std::vector<T>& grad = g.grad(p->node);
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        const double gi = static_cast<double>(grad[i]);
        if (!std::isfinite(gi))
          throw std::runtime_error("adam: non-finite gradient in '" + p->name + "'");
        double m = beta1 * static_cast<double>(p->m[i]) + (1.0 - beta1) * gi;
        double v = beta2 * static_cast<double>(p->v[i]) + (1.0 - beta2) * gi * gi;
        p->m[i] = static_cast<T>(m);
        p->v[i] = static_cast<T>(v);
        const double upd = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
        p->value[i] -= static_cast<T>(upd);
        if (!std::isfinite(static_cast<double>(p->value[i])))
          throw std::runtime_error("adam: non-finite value in '" + p->name + "'");
      }
    }
  }

 private:
  std::vector<Param<T>*> params_;
  std::int64_t t_ = 0;
};

/// target <- (1 - tau) * target + tau * online, elementwise over matching
/// parameter lists.
template <typename T>
inline void soft_update(std::vector<Param<T>*>& target, const std::vector<Param<T>*>& online,
                        double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("soft_update: tau outside (0,1]");
  if (target.size() != online.size())
    throw std::invalid_argument("soft_update: parameter lists differ in length");
  for (std::size_t k = 0; k < target.size(); ++k) {
    Param<T>& t = *target[k];
    const Param<T>& o = *online[k];
    if (t.value.shape != o.value.shape)
      throw std::invalid_argument("soft_update: shape mismatch at '" + t.name + "'");
    for (std::int64_t i = 0; i < t.value.numel(); ++i)
      t.value[i] = static_cast<T>((1.0 - tau) * static_cast<double>(t.value[i]) +
                                  tau * static_cast<double>(o.value[i]));
  }
}

}  // namespace cde
