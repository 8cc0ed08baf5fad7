// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder over frame features with a vocabulary-sized output head.
// Pre-layer-norm blocks, sinusoidal frame positions, learned sequence
// positions. Training is teacher-forced; inference is greedy, mask-constrained
// and incremental (per-layer key/value caches).

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tseq/codec.hpp"
#include "tseq/error.hpp"
#include "tseq/losses.hpp"
#include "tseq/nn.hpp"
#include "tseq/vocab.hpp"

namespace tseq {

struct ModelConfig {
  int input_dim = 32;
  int model_dim = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int attention_heads = 4;
  int feedforward_dim = 256;
  int frame_count = 150;
  int max_target_len = 151;
  int vocab_size = 0;
  double dropout_rate = 0.1;

  void validate() const {
    detail::require(input_dim >= 1 && model_dim >= 1 && feedforward_dim >= 1, "dimensions must be >= 1");
    detail::require(encoder_layers >= 0 && decoder_layers >= 0, "layer counts must be >= 0");
    detail::require(attention_heads >= 1 && model_dim % attention_heads == 0,
                    "model_dim must be divisible by attention_heads");
    detail::require(frame_count >= 1, "frame_count must be >= 1");
    detail::require(max_target_len >= 2, "max_target_len must be >= 2");
    detail::require(vocab_size >= 1, "vocab_size must be >= 1");
    detail::require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate outside [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One teacher-forced training example. `features` is T x C_in raw input.
template <class S>
struct TrainingItem {
  const Mat<S>* features = nullptr;
  TargetSequence target;
};

template <class S>
struct BatchResult {
  double loss = 0.0;
  std::vector<double> item_losses;
  ParamStore<S> grads;
};

struct GenerationResult {
  TargetSequence sequence;
  /// Masked-softmax probability of each emitted token (1 for the prompt).
  std::vector<double> token_probs;
  /// Per step, the masked distribution restricted to the legal tokens in
  /// index order (only filled when requested).
  std::vector<std::vector<double>> distributions;
};

template <class S>
class Seq2SeqModel {
 public:
  using Rng = std::mt19937_64;

  /// Parameters initialized from `seed`: weights uniform in +-1/sqrt(fan_in),
  /// biases zero, layer-norm gains one. The sequence position table starts
  /// from the same sinusoidal encoding as the frames.
  Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed) : Seq2SeqModel(cfg) {
    Rng rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::string& name = params_.name(i);
      auto& t = params_[i];
      if (ends_with(name, ".bias")) continue;
      if (ends_with(name, ".gain")) continue;
      const double fan_in = ends_with(name, "embedding") ? static_cast<double>(cfg_.model_dim)
                                                         : static_cast<double>(t.rows());
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<S>(u(rng));
    }
    params_[seq_pos_] = sinusoidal_encoding<S>(cfg_.max_target_len, cfg_.model_dim);
  }

  /// Zero-initialized parameters (for loading checkpoints).
  explicit Seq2SeqModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int c = cfg_.model_dim;
    input_proj_ = Linear::create(params_, "input_proj", cfg_.input_dim, c);
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string n = "encoder." + std::to_string(l);
      enc_.push_back({LayerNorm::create(params_, n + ".ln1", c),
                      MultiHeadAttention::create(params_, n + ".attn", c, cfg_.attention_heads),
                      LayerNorm::create(params_, n + ".ln2", c),
                      FeedForward::create(params_, n + ".ffn", c, cfg_.feedforward_dim)});
    }
    enc_norm_ = LayerNorm::create(params_, "encoder.norm", c);
    token_embedding_ = params_.add("token_embedding", cfg_.vocab_size, c);
    seq_pos_ = params_.add("sequence_position_embedding", cfg_.max_target_len, c);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string n = "decoder." + std::to_string(l);
      dec_.push_back({LayerNorm::create(params_, n + ".ln1", c),
                      MultiHeadAttention::create(params_, n + ".self_attn", c, cfg_.attention_heads),
                      LayerNorm::create(params_, n + ".ln2", c),
                      MultiHeadAttention::create(params_, n + ".cross_attn", c, cfg_.attention_heads),
                      LayerNorm::create(params_, n + ".ln3", c),
                      FeedForward::create(params_, n + ".ffn", c, cfg_.feedforward_dim)});
    }
    dec_norm_ = LayerNorm::create(params_, "decoder.norm", c);
    head_ = Linear::create(params_, "head", c, cfg_.vocab_size);
    frame_pe_ = sinusoidal_encoding<S>(cfg_.frame_count, c);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  /// Linear projection plus sinusoidal frame position.
  Mat<S> embed_features(const Mat<S>& raw) const {
    check_features(raw);
    Mat<S> x = input_proj_.forward(params_, raw);
    x += frame_pe_.topRows(raw.rows());
    return x;
  }

  Mat<S> encode(const Mat<S>& features) const {
    if (features.cols() != cfg_.model_dim || features.rows() < 1 || features.rows() > cfg_.frame_count)
      throw InvalidArgument("encoder input must be (T <= frame_count) x model_dim");
    Mat<S> x = features;
    for (const auto& layer : enc_) {
      Mat<S> a = layer.ln1.forward(params_, x);
      x += layer.attn.forward(params_, a, a, false);
      Mat<S> b = layer.ln2.forward(params_, x);
      x += layer.ffn.forward(params_, b);
    }
    Mat<S> h = enc_norm_.forward(params_, x);
    if (!h.allFinite()) throw NumericError("non-finite encoder output");
    return h;
  }

  Mat<S> encode_raw(const Mat<S>& raw) const { return encode(embed_features(raw)); }

  /// Row j holds the logits for target token j + 1 given tokens 0..j.
  Mat<S> decode_teacher_forced(const Mat<S>& hidden, const TargetSequence& target) const {
    check_target(target);
    return decoder_forward(hidden, target.tokens, nullptr, nullptr);
  }

  /// Mean task loss over the batch and its exact gradient. Parameters are not
  /// modified. `dropout_rng` enables training-mode dropout.
  BatchResult<S> forward_backward(std::span<const TrainingItem<S>> batch, const VocabLayout& layout,
                                  const LossConfig& loss_cfg, Rng* dropout_rng = nullptr) const {
    if (batch.empty()) throw InvalidArgument("empty batch");
    BatchResult<S> out;
    out.grads = params_.zeros_like();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double l = item_forward_backward(batch[i], layout, loss_cfg, inv_b, out.grads, dropout_rng);
      if (!std::isfinite(l))
        throw NumericError("non-finite loss at batch element " + std::to_string(i), static_cast<long>(i));
      out.item_losses.push_back(l);
      out.loss += l;
    }
    out.loss *= inv_b;
    return out;
  }

  /// Loss only, evaluation mode.
  double batch_loss(std::span<const TrainingItem<S>> batch, const VocabLayout& layout,
                    const LossConfig& loss_cfg) const {
    if (batch.empty()) throw InvalidArgument("empty batch");
    double sum = 0.0;
    for (const auto& item : batch) {
      const Mat<S> hidden = encode_raw(*item.features);
      Mat<S> probs = decode_teacher_forced(hidden, item.target);
      softmax_rows_inplace(probs);
      sum += sequence_loss(item.target, probs, layout, loss_cfg);
    }
    return sum / static_cast<double>(batch.size());
  }

  /// Greedy, mask-constrained generation from the task prompt. TAS, GEBD and
  /// dense TAD emit exactly one token per encoder frame; sparse TAD stops at
  /// EOS (forced once no further complete triple fits in max_target_len).
  GenerationResult generate(const Mat<S>& hidden, TaskId task, const VocabLayout& layout,
                            TadParadigm paradigm = TadParadigm::Sparse,
                            bool keep_distributions = false) const {
    if (layout.total_size != cfg_.vocab_size) throw InvalidArgument("layout size != model vocab size");
    const bool sparse_tad = task == TaskId::TAD && paradigm == TadParadigm::Sparse;
    const auto frames = static_cast<std::size_t>(hidden.rows());
    const auto max_len = static_cast<std::size_t>(cfg_.max_target_len);
    if (!sparse_tad && frames + 1 > max_len) throw InvalidArgument("max_target_len < frame count + 1");

    IncrementalDecoder state(*this, hidden);
    GenerationResult res;
    res.sequence.task = task;
    res.sequence.push(layout.prompt(task), PositionRole::Prompt);
    res.token_probs.push_back(1.0);
    for (std::size_t step = 0;; ++step) {
      if (!sparse_tad && step == frames) break;
      const std::size_t len = res.sequence.size();
      const RowVec<S> logits = state.step(res.sequence.tokens.back(), len - 1);
      const StepRole sr = step_role(task, step, paradigm);
      std::vector<bool> mask;
      PositionRole role = sr.role;
      if (sparse_tad && sr.allows_eos && len + 4 > max_len) {
        mask = legal_mask(task, PositionRole::Eos, layout);
      } else {
        mask = step_mask(task, step, layout, paradigm);
      }
      const auto [token, prob, dist] = masked_argmax(logits, mask, keep_distributions);
      if (token == layout.eos_index) role = PositionRole::Eos;
      res.sequence.push(token, role);
      res.token_probs.push_back(prob);
      if (keep_distributions) res.distributions.push_back(std::move(dist));
      if (sparse_tad && token == layout.eos_index) break;
      if (sparse_tad && res.sequence.size() > max_len) throw DecodeError("role schedule overran max_target_len");
    }
    return res;
  }

 private:
  struct EncoderLayer {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    FeedForward ffn;
  };
  struct DecoderLayer {
    LayerNorm ln1;
    MultiHeadAttention self_attn;
    LayerNorm ln2;
    MultiHeadAttention cross_attn;
    LayerNorm ln3;
    FeedForward ffn;
  };

  struct EncoderLayerCache {
    LayerNormCache<S> ln1, ln2;
    AttentionCache<S> attn;
    FeedForwardCache<S> ffn;
    Mat<S> drop_attn, drop_ffn;
  };
  struct DecoderLayerCache {
    LayerNormCache<S> ln1, ln2, ln3;
    AttentionCache<S> self_attn, cross_attn;
    FeedForwardCache<S> ffn;
    Mat<S> drop_self, drop_cross, drop_ffn;
  };
  struct EncoderCache {
    Mat<S> drop_input;
    std::vector<EncoderLayerCache> layers;
    LayerNormCache<S> norm;
  };
  struct DecoderCache {
    Mat<S> drop_input;
    std::vector<DecoderLayerCache> layers;
    LayerNormCache<S> norm;
    Mat<S> normed;
  };

  /// Key/value caches for step-by-step decoding.
  class IncrementalDecoder {
   public:
    IncrementalDecoder(const Seq2SeqModel& m, const Mat<S>& hidden) : m_(m) {
      const auto n = static_cast<Eigen::Index>(m.cfg_.max_target_len);
      for (const auto& layer : m.dec_) {
        LayerKv kv;
        kv.self_k.resize(n, m.cfg_.model_dim);
        kv.self_v.resize(n, m.cfg_.model_dim);
        kv.cross_k = layer.cross_attn.k.forward(m.params_, hidden);
        kv.cross_v = layer.cross_attn.v.forward(m.params_, hidden);
        kv_.push_back(std::move(kv));
      }
    }

    RowVec<S> step(Token token, std::size_t position) {
      const auto& p = m_.params_;
      if (position >= static_cast<std::size_t>(m_.cfg_.max_target_len))
        throw DecodeError("decoder position beyond max_target_len");
      const auto pos = static_cast<Eigen::Index>(position);
      Mat<S> x = p[m_.token_embedding_].row(token) + p[m_.seq_pos_].row(pos);
      for (std::size_t l = 0; l < m_.dec_.size(); ++l) {
        const auto& layer = m_.dec_[l];
        auto& kv = kv_[l];
        Mat<S> a = layer.ln1.forward(p, x);
        kv.self_k.row(pos) = layer.self_attn.k.forward(p, a).row(0);
        kv.self_v.row(pos) = layer.self_attn.v.forward(p, a).row(0);
        x += attend(layer.self_attn, layer.self_attn.q.forward(p, a), kv.self_k.topRows(pos + 1),
                    kv.self_v.topRows(pos + 1));
        Mat<S> c = layer.ln2.forward(p, x);
        x += attend(layer.cross_attn, layer.cross_attn.q.forward(p, c), kv.cross_k, kv.cross_v);
        Mat<S> b = layer.ln3.forward(p, x);
        x += layer.ffn.forward(p, b);
      }
      Mat<S> o = m_.dec_norm_.forward(p, x);
      return m_.head_.forward(p, o).row(0);
    }

   private:
    struct LayerKv {
      Mat<S> self_k, self_v, cross_k, cross_v;
    };

    template <class KM, class VM>
    Mat<S> attend(const MultiHeadAttention& attn, const Mat<S>& q, const KM& k, const VM& v) const {
      const Eigen::Index dim = q.cols(), dh = dim / attn.heads;
      const S scale = S(1) / std::sqrt(static_cast<S>(dh));
      Mat<S> concat(1, dim);
      for (int h = 0; h < attn.heads; ++h) {
        Mat<S> s(1, k.rows());
        s.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
        s *= scale;
        softmax_rows_inplace(s);
        concat.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
      }
      return attn.o.forward(m_.params_, concat);
    }

    const Seq2SeqModel& m_;
    std::vector<LayerKv> kv_;
  };

  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  void check_features(const Mat<S>& raw) const {
    if (raw.cols() != cfg_.input_dim || raw.rows() < 1 || raw.rows() > cfg_.frame_count)
      throw InvalidArgument("raw features must be (T <= " + std::to_string(cfg_.frame_count) + ") x " +
                            std::to_string(cfg_.input_dim));
    if (!raw.allFinite()) throw NumericError("non-finite input features");
  }

  void check_target(const TargetSequence& target) const {
    if (target.size() < 2) throw InvalidArgument("target needs a prompt and at least one token");
    if (target.size() > static_cast<std::size_t>(cfg_.max_target_len))
      throw InvalidArgument("target length " + std::to_string(target.size()) + " exceeds max_target_len");
    for (Token t : target.tokens)
      if (t < 0 || t >= cfg_.vocab_size) throw InvalidArgument("target token outside vocabulary");
  }

  static std::tuple<Token, double, std::vector<double>> masked_argmax(const RowVec<S>& logits,
                                                                      const std::vector<bool>& mask,
                                                                      bool keep) {
    double mx = -std::numeric_limits<double>::infinity();
    Token best = -1;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      const double z = static_cast<double>(logits(static_cast<Eigen::Index>(i)));
      if (best < 0 || z > mx) {
        mx = z;
        best = static_cast<Token>(i);
      }
    }
    if (best < 0) throw DecodeError("empty legal mask");
    double denom = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) denom += std::exp(static_cast<double>(logits(static_cast<Eigen::Index>(i))) - mx);
    std::vector<double> dist;
    if (keep) {
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) dist.push_back(std::exp(static_cast<double>(logits(static_cast<Eigen::Index>(i))) - mx) / denom);
    }
    return {best, 1.0 / denom, std::move(dist)};
  }

  Mat<S> encoder_forward(const Mat<S>& raw, EncoderCache* cache, Rng* rng) const {
    Mat<S> x = embed_features(raw);
    const double rate = cfg_.dropout_rate;
    if (cache) {
      Dropout<S>::apply(x, rate, rng, cache->drop_input);
      cache->layers.resize(enc_.size());
    }
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const auto& layer = enc_[l];
      EncoderLayerCache* c = cache ? &cache->layers[l] : nullptr;
      Mat<S> a = layer.ln1.forward(params_, x, c ? &c->ln1 : nullptr);
      Mat<S> y = layer.attn.forward(params_, a, a, false, c ? &c->attn : nullptr);
      if (c) Dropout<S>::apply(y, rate, rng, c->drop_attn);
      x += y;
      Mat<S> b = layer.ln2.forward(params_, x, c ? &c->ln2 : nullptr);
      Mat<S> f = layer.ffn.forward(params_, b, c ? &c->ffn : nullptr);
      if (c) Dropout<S>::apply(f, rate, rng, c->drop_ffn);
      x += f;
    }
    return enc_norm_.forward(params_, x, cache ? &cache->norm : nullptr);
  }

  /// Decoder over inputs tokens[0 .. n-2]; returns (n - 1) x H logits.
  Mat<S> decoder_forward(const Mat<S>& hidden, const std::vector<Token>& tokens, DecoderCache* cache,
                         Rng* rng) const {
    const auto n = static_cast<Eigen::Index>(tokens.size()) - 1;
    Mat<S> y(n, cfg_.model_dim);
    for (Eigen::Index j = 0; j < n; ++j)
      y.row(j) = params_[token_embedding_].row(tokens[static_cast<std::size_t>(j)]) + params_[seq_pos_].row(j);
    const double rate = cfg_.dropout_rate;
    if (cache) {
      Dropout<S>::apply(y, rate, rng, cache->drop_input);
      cache->layers.resize(dec_.size());
    }
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const auto& layer = dec_[l];
      DecoderLayerCache* c = cache ? &cache->layers[l] : nullptr;
      Mat<S> a = layer.ln1.forward(params_, y, c ? &c->ln1 : nullptr);
      Mat<S> s = layer.self_attn.forward(params_, a, a, true, c ? &c->self_attn : nullptr);
      if (c) Dropout<S>::apply(s, rate, rng, c->drop_self);
      y += s;
      Mat<S> q = layer.ln2.forward(params_, y, c ? &c->ln2 : nullptr);
      Mat<S> z = layer.cross_attn.forward(params_, q, hidden, false, c ? &c->cross_attn : nullptr);
      if (c) Dropout<S>::apply(z, rate, rng, c->drop_cross);
      y += z;
      Mat<S> b = layer.ln3.forward(params_, y, c ? &c->ln3 : nullptr);
      Mat<S> f = layer.ffn.forward(params_, b, c ? &c->ffn : nullptr);
      if (c) Dropout<S>::apply(f, rate, rng, c->drop_ffn);
      y += f;
    }
    Mat<S> o = dec_norm_.forward(params_, y, cache ? &cache->norm : nullptr);
    Mat<S> logits = head_.forward(params_, o);
    if (cache) cache->normed = std::move(o);
    return logits;
  }

  double item_forward_backward(const TrainingItem<S>& item, const VocabLayout& layout,
                               const LossConfig& loss_cfg, double weight, ParamStore<S>& g,
                               Rng* rng) const {
    check_target(item.target);
    EncoderCache ec;
    DecoderCache dc;
    const Mat<S> hidden = encoder_forward(*item.features, &ec, rng);
    Mat<S> probs = decoder_forward(hidden, item.target.tokens, &dc, rng);
    softmax_rows_inplace(probs);
    Mat<S> dlogits;
    const double loss = sequence_loss(item.target, probs, layout, loss_cfg, &dlogits);
    if (!std::isfinite(loss)) return loss;
    dlogits *= static_cast<S>(weight);

    // Decoder backward.
    Mat<S> dy = dec_norm_.backward(params_, g, dc.norm, head_.backward(params_, g, dc.normed, dlogits));
    Mat<S> dhidden = Mat<S>::Zero(hidden.rows(), hidden.cols());
    for (std::size_t l = dec_.size(); l-- > 0;) {
      const auto& layer = dec_[l];
      const auto& c = dc.layers[l];
      Mat<S> df = dy;
      Dropout<S>::backward(df, c.drop_ffn);
      dy += layer.ln3.backward(params_, g, c.ln3, layer.ffn.backward(params_, g, c.ffn, df));
      Mat<S> dz = dy;
      Dropout<S>::backward(dz, c.drop_cross);
      auto [dq, dh] = layer.cross_attn.backward(params_, g, c.cross_attn, dz);
      dhidden += dh;
      dy += layer.ln2.backward(params_, g, c.ln2, dq);
      Mat<S> ds = dy;
      Dropout<S>::backward(ds, c.drop_self);
      auto [da_q, da_kv] = layer.self_attn.backward(params_, g, c.self_attn, ds);
      da_q += da_kv;
      dy += layer.ln1.backward(params_, g, c.ln1, da_q);
    }
    Dropout<S>::backward(dy, dc.drop_input);
    for (Eigen::Index j = 0; j < dy.rows(); ++j) {
      g[token_embedding_].row(item.target.tokens[static_cast<std::size_t>(j)]) += dy.row(j);
      g[seq_pos_].row(j) += dy.row(j);
    }

    // Encoder backward.
    Mat<S> dx = enc_norm_.backward(params_, g, ec.norm, dhidden);
    for (std::size_t l = enc_.size(); l-- > 0;) {
      const auto& layer = enc_[l];
      const auto& c = ec.layers[l];
      Mat<S> df = dx;
      Dropout<S>::backward(df, c.drop_ffn);
      dx += layer.ln2.backward(params_, g, c.ln2, layer.ffn.backward(params_, g, c.ffn, df));
      Mat<S> da = dx;
      Dropout<S>::backward(da, c.drop_attn);
      auto [dq, dkv] = layer.attn.backward(params_, g, c.attn, da);
      dq += dkv;
      dx += layer.ln1.backward(params_, g, c.ln1, dq);
    }
    Dropout<S>::backward(dx, ec.drop_input);
    input_proj_.backward(params_, g, *item.features, dx);
    return loss;
  }

  ModelConfig cfg_;
  ParamStore<S> params_;
  Linear input_proj_;
  std::vector<EncoderLayer> enc_;
  LayerNorm enc_norm_;
  std::size_t token_embedding_ = 0;
  std::size_t seq_pos_ = 0;
  std::vector<DecoderLayer> dec_;
  LayerNorm dec_norm_;
  Linear head_;
  Mat<S> frame_pe_;
};

}  // namespace tseq
