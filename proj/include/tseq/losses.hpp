// SPDX-License-Identifier: Apache-2.0
//
// Per-task sequence losses. Inputs are probability rows (softmax over the
// full vocabulary) aligned with the supervised target tokens: row i predicts
// targets[i]. When a gradient is requested it is taken with respect to the
// logits that produced those rows.

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tseq/codec.hpp"
#include "tseq/error.hpp"
#include "tseq/nn.hpp"
#include "tseq/vocab.hpp"

namespace tseq {

enum class TadLossKind : std::uint8_t { Weighted, CrossEntropy };

struct LossConfig {
  double smooth_weight = 0.15;
  int boundary_space = 150;
  bool supervise_eos = true;
  /// Probabilities are clamped from below before the log. Zero disables
  /// clamping, in which case a zero true-token probability is an error.
  double log_clamp = 1e-12;
  TadLossKind tad_loss = TadLossKind::Weighted;
  /// Replaces the distance weight 1 + |argmax - truth| / D with 1 everywhere.
  bool unit_distance_weight = false;
};

namespace detail {

inline double neg_log(double p, const LossConfig& cfg, std::size_t position) {
  if (cfg.log_clamp > 0.0) return -std::log(std::max(p, cfg.log_clamp));
  if (!(p > 0.0))
    throw NumericError("zero probability for the true token at position " + std::to_string(position));
  return -std::log(p);
}

template <class S>
void check_rows(const Mat<S>& probs, std::size_t targets) {
  if (static_cast<std::size_t>(probs.rows()) != targets)
    throw InvalidArgument("probability rows (" + std::to_string(probs.rows()) +
                          ") != target count (" + std::to_string(targets) + ")");
}

template <class S>
void init_grad(Mat<S>* dlogits, const Mat<S>& probs) {
  if (dlogits) *dlogits = Mat<S>::Zero(probs.rows(), probs.cols());
}

/// Adds weight * d(-log p_target)/dlogits = weight * (p - e_target).
template <class S>
void add_ce_grad(Mat<S>& dlogits, const Mat<S>& probs, Eigen::Index row, Token target, double weight) {
  const S w = static_cast<S>(weight);
  dlogits.row(row) += w * probs.row(row);
  dlogits(row, target) -= w;
}

template <class S>
double cross_entropy(const Mat<S>& probs, std::span<const Token> targets, Token pad,
                     const LossConfig& cfg, Mat<S>* dlogits) {
  check_rows(probs, targets.size());
  init_grad(dlogits, probs);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == pad) continue;
    sum += neg_log(static_cast<double>(probs(static_cast<Eigen::Index>(i), targets[i])), cfg, i);
    ++n;
  }
  if (n == 0) return 0.0;
  if (dlogits) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (targets[i] != pad) add_ce_grad(*dlogits, probs, static_cast<Eigen::Index>(i), targets[i], inv);
  }
  return sum / static_cast<double>(n);
}

}  // namespace detail

/// Mean over positions of -log p(true token).
template <class S>
double loss_gebd(const Mat<S>& probs, std::span<const Token> targets, const LossConfig& cfg = {},
                 Mat<S>* dlogits = nullptr, Token pad = -1) {
  return detail::cross_entropy(probs, targets, pad, cfg, dlogits);
}

/// The TAS smoothing term alone:
/// lambda / (T * C) * sum_{t >= 1} sum_c (p[t-1][c] - p[t][c])^2 over TAS class columns.
template <class S>
double tas_smoothing(const Mat<S>& probs, const VocabLayout& layout, double lambda,
                     Mat<S>* dprobs = nullptr) {
  const Eigen::Index rows = probs.rows();
  const Eigen::Index c0 = layout.tas_class_begin(), cn = layout.tas_class_count;
  if (dprobs) *dprobs = Mat<S>::Zero(probs.rows(), probs.cols());
  if (rows < 1) return 0.0;
  const double k = lambda / (static_cast<double>(rows) * static_cast<double>(cn));
  double sum = 0.0;
  for (Eigen::Index t = 1; t < rows; ++t) {
    for (Eigen::Index c = c0; c < c0 + cn; ++c) {
      const double diff = static_cast<double>(probs(t - 1, c)) - static_cast<double>(probs(t, c));
      sum += diff * diff;
      if (dprobs) {
        (*dprobs)(t - 1, c) += static_cast<S>(2.0 * k * diff);
        (*dprobs)(t, c) -= static_cast<S>(2.0 * k * diff);
      }
    }
  }
  return k * sum;
}

/// Frame cross-entropy plus the weighted smoothing term.
template <class S>
double loss_tas(const Mat<S>& probs, std::span<const Token> targets, const VocabLayout& layout,
                const LossConfig& cfg = {}, Mat<S>* dlogits = nullptr) {
  const double cls = detail::cross_entropy(probs, targets, layout.pad_index, cfg, dlogits);
  if (cfg.smooth_weight == 0.0) return cls;
  Mat<S> dp;
  const double smo = tas_smoothing(probs, layout, cfg.smooth_weight, dlogits ? &dp : nullptr);
  if (dlogits) {
    // Chain through softmax: dz = p * (dp - <dp, p>).
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const S inner = dp.row(r).dot(probs.row(r));
      dlogits->row(r).array() += probs.row(r).array() * (dp.row(r).array() - inner);
    }
  }
  return cls + smo;
}

/// Distance weight of a boundary position: 1 + |argmax over time tokens - truth| / D.
template <class S>
double boundary_weight(const Mat<S>& probs, Eigen::Index row, Token truth, const VocabLayout& layout,
                       const LossConfig& cfg) {
  if (cfg.unit_distance_weight) return 1.0;
  Eigen::Index best = 0;
  probs.row(row).head(layout.time_token_count).maxCoeff(&best);
  return 1.0 + std::abs(static_cast<double>(best) - static_cast<double>(truth)) /
                   static_cast<double>(cfg.boundary_space);
}

/// Sparse TAD loss. Category and EOS positions use plain cross-entropy,
/// boundary positions scale it by the (constant) distance weight, PAD is
/// ignored. With tad_loss = CrossEntropy every position is plain CE.
template <class S>
double loss_tad(const Mat<S>& probs, std::span<const Token> targets,
                std::span<const PositionRole> roles, const VocabLayout& layout,
                const LossConfig& cfg = {}, Mat<S>* dlogits = nullptr) {
  detail::check_rows(probs, targets.size());
  if (roles.size() != targets.size()) throw InvalidArgument("role list length != token list length");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Token t = targets[i];
    bool ok = false;
    switch (roles[i]) {
      case PositionRole::TadStart:
      case PositionRole::TadEnd: ok = layout.is_time(t); break;
      case PositionRole::TadClass: ok = layout.is_tad_class(t); break;
      case PositionRole::Eos: ok = t == layout.eos_index; break;
      case PositionRole::Pad: ok = t == layout.pad_index; break;
      default: ok = false;
    }
    if (!ok) throw InvalidArgument("role inconsistent with token at position " + std::to_string(i));
  }
  if (cfg.tad_loss == TadLossKind::CrossEntropy) {
    std::vector<Token> supervised(targets.begin(), targets.end());
    if (!cfg.supervise_eos)
      for (std::size_t i = 0; i < supervised.size(); ++i)
        if (roles[i] == PositionRole::Eos) supervised[i] = layout.pad_index;
    return detail::cross_entropy(probs, std::span<const Token>(supervised), layout.pad_index, cfg,
                                 dlogits);
  }
  detail::init_grad(dlogits, probs);
  std::vector<double> weights(targets.size(), 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    switch (roles[i]) {
      case PositionRole::Pad: continue;
      case PositionRole::Eos:
        if (!cfg.supervise_eos) continue;
        weights[i] = 1.0;
        break;
      case PositionRole::TadClass: weights[i] = 1.0; break;
      default: weights[i] = boundary_weight(probs, row, targets[i], layout, cfg); break;
    }
    ++n;
  }
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] == 0.0) continue;
    sum += weights[i] * detail::neg_log(static_cast<double>(probs(static_cast<Eigen::Index>(i), targets[i])), cfg, i);
  }
  const double inv = 1.0 / static_cast<double>(n);
  if (dlogits)
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (weights[i] != 0.0)
        detail::add_ce_grad(*dlogits, probs, static_cast<Eigen::Index>(i), targets[i], weights[i] * inv);
  return sum / static_cast<double>(n);
}

/// Task-appropriate loss for a teacher-forced target. `probs` has one row per
/// target token after the prompt.
template <class S>
double sequence_loss(const TargetSequence& target, const Mat<S>& probs, const VocabLayout& layout,
                     const LossConfig& cfg, Mat<S>* dlogits = nullptr) {
  if (target.size() < 2) throw InvalidArgument("target has no supervised positions");
  std::span<const Token> tokens(target.tokens.data() + 1, target.tokens.size() - 1);
  std::span<const PositionRole> roles(target.roles.data() + 1, target.roles.size() - 1);
  switch (target.task) {
    case TaskId::GEBD: return loss_gebd(probs, tokens, cfg, dlogits, layout.pad_index);
    case TaskId::TAS: return loss_tas(probs, tokens, layout, cfg, dlogits);
    case TaskId::TAD:
      if (roles.front() == PositionRole::TadDenseFrame)
        return loss_gebd(probs, tokens, cfg, dlogits, layout.pad_index);
      return loss_tad(probs, tokens, roles, layout, cfg, dlogits);
  }
  return 0.0;
}

template <class S>
struct LossItem {
  TargetSequence target;
  Mat<S> probs;
};

/// Unweighted mean of the per-item task losses.
template <class S>
double combined_loss(std::span<const LossItem<S>> items, const VocabLayout& layout, const LossConfig& cfg) {
  if (items.empty()) throw InvalidArgument("empty batch");
  double sum = 0.0;
  for (const auto& it : items) sum += sequence_loss(it.target, it.probs, layout, cfg);
  return sum / static_cast<double>(items.size());
}

}  // namespace tseq
