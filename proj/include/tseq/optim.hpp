// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay.

#pragma once

#include <cmath>

#include "tseq/nn.hpp"

namespace tseq {

struct AdamWConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

template <class S>
class AdamW {
 public:
  AdamW(const ParamStore<S>& params, AdamWConfig cfg) : cfg_(cfg), m_(params.zeros_like()), v_(params.zeros_like()) {}

  const AdamWConfig& config() const { return cfg_; }
  long step_count() const { return step_; }
  const ParamStore<S>& first_moment() const { return m_; }
  const ParamStore<S>& second_moment() const { return v_; }

  void restore(long step, ParamStore<S> m, ParamStore<S> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  /// Decay is applied to weight matrices and embeddings, not biases or norm gains.
  void step(ParamStore<S>& params, const ParamStore<S>& grads) {
    ++step_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i) sq += static_cast<double>(grads[i].squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S lr = static_cast<S>(cfg_.learning_rate);
    const S step_size = static_cast<S>(cfg_.learning_rate / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S eps = static_cast<S>(cfg_.epsilon);
    const S wd = static_cast<S>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].array();
      const auto g = (grads[i].array() * static_cast<S>(scale)).eval();
      auto m = m_[i].array();
      auto v = v_[i].array();
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g.square();
      if (decays(params.name(i))) p -= lr * wd * p;
      p -= step_size * m / ((v * inv_bc2).sqrt() + eps);
    }
  }

  static bool decays(const std::string& name) {
    auto ends = [&](const char* s) {
      const std::string suf(s);
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    return !ends(".bias") && !ends(".gain");
  }

 private:
  AdamWConfig cfg_;
  ParamStore<S> m_, v_;
  long step_ = 0;
};

}  // namespace tseq
