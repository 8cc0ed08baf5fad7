// SPDX-License-Identifier: Apache-2.0
//
// Dense building blocks with hand-written backward passes. Every layer holds
// indices into a ParamStore; forward passes optionally record a cache that the
// matching backward pass consumes.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "tseq/error.hpp"

namespace tseq {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Named, ordered set of parameter tensors.
template <class S>
class ParamStore {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(Mat<S>::Zero(rows, cols));
    return tensors_.size() - 1;
  }

  Mat<S>& operator[](std::size_t i) { return tensors_[i]; }
  const Mat<S>& operator[](std::size_t i) const { return tensors_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::size_t size() const { return tensors_.size(); }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("no parameter named " + name);
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  ParamStore zeros_like() const {
    ParamStore out = *this;
    out.set_zero();
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) t.setZero();
  }

  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      out.add(names_[i], tensors_[i].rows(), tensors_[i].cols());
      out[i] = tensors_[i].template cast<T>();
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      if (!t.allFinite()) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat<S>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class S>
void softmax_rows_inplace(Mat<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const S mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

template <class S>
Mat<S> sinusoidal_encoding(Eigen::Index positions, Eigen::Index dim) {
  Mat<S> pe(positions, dim);
  for (Eigen::Index p = 0; p < positions; ++p) {
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) * freq;
      pe(p, i) = static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// Inverted dropout. An empty mask means "disabled".
template <class S>
struct Dropout {
  template <class Rng>
  static void apply(Mat<S>& x, double rate, Rng* rng, Mat<S>& mask) {
    if (rng == nullptr || rate <= 0.0) {
      mask.resize(0, 0);
      return;
    }
    std::bernoulli_distribution keep(1.0 - rate);
    const S scale = static_cast<S>(1.0 / (1.0 - rate));
    mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? scale : S(0);
    x.array() *= mask.array();
  }

  static void backward(Mat<S>& dx, const Mat<S>& mask) {
    if (mask.size() != 0) dx.array() *= mask.array();
  }
};

struct Linear {
  std::size_t w = 0, b = 0;

  template <class S>
  static Linear create(ParamStore<S>& p, const std::string& name, Eigen::Index in, Eigen::Index out) {
    return {p.add(name + ".weight", in, out), p.add(name + ".bias", 1, out)};
  }

  template <class S>
  Mat<S> forward(const ParamStore<S>& p, const Mat<S>& x) const {
    Mat<S> y(x.rows(), p[w].cols());
    y.noalias() = x * p[w];
    y.rowwise() += p[b].row(0);
    return y;
  }

  template <class S>
  Mat<S> backward(const ParamStore<S>& p, ParamStore<S>& g, const Mat<S>& x, const Mat<S>& dy) const {
    g[w].noalias() += x.transpose() * dy;
    g[b] += dy.colwise().sum();
    Mat<S> dx(dy.rows(), p[w].rows());
    dx.noalias() = dy * p[w].transpose();
    return dx;
  }
};

template <class S>
struct LayerNormCache {
  Mat<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std;
};

struct LayerNorm {
  std::size_t gain = 0, bias = 0;
  static constexpr double kEps = 1e-5;

  template <class S>
  static LayerNorm create(ParamStore<S>& p, const std::string& name, Eigen::Index dim) {
    LayerNorm ln{p.add(name + ".gain", 1, dim), p.add(name + ".bias", 1, dim)};
    p[ln.gain].setOnes();
    return ln;
  }

  template <class S>
  Mat<S> forward(const ParamStore<S>& p, const Mat<S>& x, LayerNormCache<S>* cache = nullptr) const {
    const Eigen::Index n = x.rows(), c = x.cols();
    Mat<S> xhat(n, c);
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const S mean = x.row(r).mean();
      const auto centered = (x.row(r).array() - mean).eval();
      const S var = centered.square().mean();
      inv(r) = S(1) / std::sqrt(var + static_cast<S>(kEps));
      xhat.row(r) = centered * inv(r);
    }
    Mat<S> y = xhat.array().rowwise() * p[gain].row(0).array();
    y.rowwise() += p[bias].row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  template <class S>
  Mat<S> backward(const ParamStore<S>& p, ParamStore<S>& g, const LayerNormCache<S>& cache,
                  const Mat<S>& dy) const {
    g[gain] += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    g[bias] += dy.colwise().sum();
    const Mat<S> dxhat = dy.array().rowwise() * p[gain].row(0).array();
    Mat<S> dx(dy.rows(), dy.cols());
    const S inv_c = S(1) / static_cast<S>(dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const S m1 = dxhat.row(r).sum() * inv_c;
      const S m2 = dxhat.row(r).dot(cache.xhat.row(r)) * inv_c;
      dx.row(r) = cache.inv_std(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
    }
    return dx;
  }
};

template <class S>
struct AttentionCache {
  Mat<S> xq, xkv, q, k, v, concat;
  std::vector<Mat<S>> probs;  // per head, rows = queries, cols = keys
};

/// Multi-head scaled dot-product attention with separate query/key-value inputs.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  template <class S>
  static MultiHeadAttention create(ParamStore<S>& p, const std::string& name, Eigen::Index dim,
                                   int heads) {
    return {Linear::create(p, name + ".q", dim, dim), Linear::create(p, name + ".k", dim, dim),
            Linear::create(p, name + ".v", dim, dim), Linear::create(p, name + ".o", dim, dim), heads};
  }

  template <class S>
  Mat<S> forward(const ParamStore<S>& p, const Mat<S>& xq, const Mat<S>& xkv, bool causal,
                 AttentionCache<S>* cache = nullptr) const {
    Mat<S> qm = q.forward(p, xq), km = k.forward(p, xkv), vm = v.forward(p, xkv);
    const Eigen::Index dim = qm.cols(), dh = dim / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> concat(xq.rows(), dim);
    std::vector<Mat<S>> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Mat<S> s(xq.rows(), xkv.rows());
      s.noalias() = qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose();
      s *= scale;
      if (causal) {
        for (Eigen::Index i = 0; i < s.rows(); ++i)
          for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = -std::numeric_limits<S>::infinity();
      }
      softmax_rows_inplace(s);
      concat.middleCols(h * dh, dh).noalias() = s * vm.middleCols(h * dh, dh);
      if (cache) probs.push_back(std::move(s));
    }
    Mat<S> out = o.forward(p, concat);
    if (cache) {
      cache->xq = xq;
      cache->xkv = xkv;
      cache->q = std::move(qm);
      cache->k = std::move(km);
      cache->v = std::move(vm);
      cache->concat = std::move(concat);
      cache->probs = std::move(probs);
    }
    return out;
  }

  /// Returns (d xq, d xkv).
  template <class S>
  std::pair<Mat<S>, Mat<S>> backward(const ParamStore<S>& p, ParamStore<S>& g,
                                     const AttentionCache<S>& c, const Mat<S>& dout) const {
    const Mat<S> dconcat = o.backward(p, g, c.concat, dout);
    const Eigen::Index dim = c.q.cols(), dh = dim / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> dq(c.q.rows(), dim), dk(c.k.rows(), dim), dv(c.v.rows(), dim);
    for (int h = 0; h < heads; ++h) {
      const auto& pr = c.probs[static_cast<std::size_t>(h)];
      const auto dch = dconcat.middleCols(h * dh, dh);
      Mat<S> dp(pr.rows(), pr.cols());
      dp.noalias() = dch * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = pr.transpose() * dch;
      const Eigen::Matrix<S, Eigen::Dynamic, 1> inner = (dp.array() * pr.array()).rowwise().sum();
      Mat<S> ds = pr.array() * (dp.array().colwise() - inner.array());
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    Mat<S> dxq = q.backward(p, g, c.xq, dq);
    Mat<S> dxkv = k.backward(p, g, c.xkv, dk);
    dxkv += v.backward(p, g, c.xkv, dv);
    return {std::move(dxq), std::move(dxkv)};
  }
};

template <class S>
struct FeedForwardCache {
  Mat<S> x, pre, act;
};

/// Two-layer MLP with tanh-approximated GELU.
struct FeedForward {
  Linear in, out;

  template <class S>
  static FeedForward create(ParamStore<S>& p, const std::string& name, Eigen::Index dim,
                            Eigen::Index hidden) {
    return {Linear::create(p, name + ".in", dim, hidden), Linear::create(p, name + ".out", hidden, dim)};
  }

  template <class S>
  static S gelu(S x) {
    constexpr S k = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
    return S(0.5) * x * (S(1) + std::tanh(k * (x + S(0.044715) * x * x * x)));
  }

  template <class S>
  static S gelu_grad(S x) {
    constexpr S k = static_cast<S>(0.7978845608028654);
    const S t = std::tanh(k * (x + S(0.044715) * x * x * x));
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * k * (S(1) + S(3 * 0.044715) * x * x);
  }

  template <class S>
  Mat<S> forward(const ParamStore<S>& p, const Mat<S>& x, FeedForwardCache<S>* cache = nullptr) const {
    Mat<S> pre = in.forward(p, x);
    Mat<S> act = pre.unaryExpr([](S v) { return gelu(v); });
    Mat<S> y = out.forward(p, act);
    if (cache) {
      cache->x = x;
      cache->pre = std::move(pre);
      cache->act = std::move(act);
    }
    return y;
  }

  template <class S>
  Mat<S> backward(const ParamStore<S>& p, ParamStore<S>& g, const FeedForwardCache<S>& c,
                  const Mat<S>& dy) const {
    Mat<S> dact = out.backward(p, g, c.act, dy);
    dact.array() *= c.pre.unaryExpr([](S v) { return gelu_grad(v); }).array();
    return in.backward(p, g, c.x, dact);
  }
};

}  // namespace tseq
