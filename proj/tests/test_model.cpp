// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "tseq/codec.hpp"
#include "tseq/model.hpp"
#include "test_support.hpp"

namespace tseq {
namespace {

using testing_support::random_matrix;
using testing_support::tiny_config;
using testing_support::tiny_layout;

TEST(EmbedFeatures, ZeroInputGivesPositionalEncoding) {
  auto cfg = tiny_config();
  Seq2SeqModel<double> m(cfg, 3);
  const Mat<double> zero = Mat<double>::Zero(cfg.frame_count, cfg.input_dim);
  const Mat<double> out = m.embed_features(zero);
  EXPECT_TRUE(out.isApprox(sinusoidal_encoding<double>(cfg.frame_count, cfg.model_dim), 0.0));
}

TEST(EmbedFeatures, ShapeAndErrors) {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  Seq2SeqModel<float> m(cfg, 1);
  std::mt19937_64 rng(1);
  EXPECT_EQ(m.embed_features(random_matrix<float>(150, cfg.input_dim, rng)).rows(), 150);
  EXPECT_EQ(m.embed_features(random_matrix<float>(150, cfg.input_dim, rng)).cols(), cfg.model_dim);
  EXPECT_THROW(m.embed_features(random_matrix<float>(150, cfg.input_dim + 1, rng)), InvalidArgument);
  Mat<float> bad = random_matrix<float>(150, cfg.input_dim, rng);
  bad(3, 2) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(m.embed_features(bad), NumericError);
}

TEST(EmbedFeatures, IdenticalFramesGetDistinctEmbeddings) {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  Seq2SeqModel<double> m(cfg, 2);
  std::mt19937_64 rng(4);
  const RowVec<double> frame = random_matrix<double>(1, cfg.input_dim, rng);
  const Mat<double> raw = frame.replicate(150, 1);
  const Mat<double> e = m.embed_features(raw);
  for (int i = 0; i < 150; ++i)
    for (int j = i + 1; j < 150; ++j) ASSERT_GT((e.row(i) - e.row(j)).norm(), 1e-6) << i << "," << j;
}

TEST(Encode, ShapeDeterminismAndOrderSensitivity) {
  auto cfg = tiny_config();
  Seq2SeqModel<double> m(cfg, 5);
  std::mt19937_64 rng(6);
  for (int t = 1; t <= cfg.frame_count; ++t) {
    const auto h = m.encode_raw(random_matrix<double>(t, cfg.input_dim, rng));
    EXPECT_EQ(h.rows(), t);
    EXPECT_EQ(h.cols(), cfg.model_dim);
  }
  const auto raw = random_matrix<double>(cfg.frame_count, cfg.input_dim, rng);
  const auto a = m.encode_raw(raw), b = m.encode_raw(raw);
  EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0);
  Mat<double> permuted = raw;
  permuted.row(0).swap(permuted.row(cfg.frame_count - 1));
  EXPECT_GT((m.encode_raw(permuted) - a).cwiseAbs().maxCoeff(), 1e-9);
}

TargetSequence random_tas_target(const VocabLayout& v, int frames, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, v.tas_class_count - 1);
  std::vector<int> labels(static_cast<std::size_t>(frames));
  for (auto& l : labels) l = cls(rng);
  Window w{"v", 0.0, 1.0, frames, static_cast<double>(frames)};
  return tokenize_tas(labels, w, v);
}

TEST(DecodeTeacherForced, ShapeFinitenessAndLengthError) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  Seq2SeqModel<double> m(cfg, 7);
  std::mt19937_64 rng(8);
  const auto h = m.encode_raw(random_matrix<double>(cfg.frame_count, cfg.input_dim, rng));
  const auto target = random_tas_target(v, cfg.frame_count, rng);
  const auto logits = m.decode_teacher_forced(h, target);
  EXPECT_EQ(logits.rows(), static_cast<Eigen::Index>(target.size()) - 1);
  EXPECT_EQ(logits.cols(), v.total_size);
  EXPECT_TRUE(logits.allFinite());
  TargetSequence too_long = target;
  for (int i = 0; i < cfg.max_target_len; ++i) too_long.push(v.eos_index, PositionRole::Eos);
  EXPECT_THROW(m.decode_teacher_forced(h, too_long), InvalidArgument);
}

TEST(DecodeTeacherForced, CausalMaskingIsExact) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  Seq2SeqModel<double> m(cfg, 9);
  std::mt19937_64 rng(10);
  const auto h = m.encode_raw(random_matrix<double>(cfg.frame_count, cfg.input_dim, rng));
  const auto target = random_tas_target(v, cfg.frame_count, rng);
  const auto base = m.decode_teacher_forced(h, target);
  for (std::size_t k = 1; k + 1 < target.size(); ++k) {
    auto perturbed = target;
    perturbed.tokens[k] = perturbed.tokens[k] == v.tas_class_begin() ? v.tas_class_begin() + 1
                                                                      : v.tas_class_begin();
    const auto out = m.decode_teacher_forced(h, perturbed);
    for (Eigen::Index j = 0; j < base.rows(); ++j) {
      const double diff = (out.row(j) - base.row(j)).cwiseAbs().maxCoeff();
      if (j < static_cast<Eigen::Index>(k)) {
        EXPECT_EQ(diff, 0.0) << "row " << j << " depends on token " << k;
      } else if (j == static_cast<Eigen::Index>(k)) {
        EXPECT_GT(diff, 0.0);
      }
    }
  }
}

TEST(Generate, IncrementalDecodingMatchesTeacherForcing) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  Seq2SeqModel<double> m(cfg, 11);
  std::mt19937_64 rng(12);
  const auto h = m.encode_raw(random_matrix<double>(cfg.frame_count, cfg.input_dim, rng));
  for (auto task : kAllTasks) {
    const auto gen = m.generate(h, task, v);
    const auto logits = m.decode_teacher_forced(h, gen.sequence);
    for (std::size_t j = 1; j < gen.sequence.size(); ++j) {
      auto mask = step_mask(task, j - 1, v);
      const bool forced_eos = task == TaskId::TAD && (j - 1) % 3 == 0 &&
                              j + 4 > static_cast<std::size_t>(cfg.max_target_len);
      if (forced_eos) mask = legal_mask(task, PositionRole::Eos, v);
      // Recompute the masked softmax probability from teacher-forced logits.
      const auto row = logits.row(static_cast<Eigen::Index>(j) - 1);
      double mx = -1e300, denom = 0.0;
      for (Token t = 0; t < v.total_size; ++t)
        if (mask[static_cast<std::size_t>(t)] || t == gen.sequence.tokens[j]) mx = std::max(mx, row(t));
      for (Token t = 0; t < v.total_size; ++t)
        if (mask[static_cast<std::size_t>(t)] || t == gen.sequence.tokens[j]) denom += std::exp(row(t) - mx);
      const double p = std::exp(row(gen.sequence.tokens[j]) - mx) / denom;
      EXPECT_NEAR(p, gen.token_probs[j], 1e-9) << task_name(task) << " step " << j;
    }
  }
}

TEST(Generate, RoleScheduleAndLegality) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    Seq2SeqModel<double> m(cfg, 100 + trial);
    const auto h = m.encode_raw(random_matrix<double>(cfg.frame_count, cfg.input_dim, rng));
    const auto gebd = m.generate(h, TaskId::GEBD, v);
    EXPECT_EQ(gebd.sequence.size(), static_cast<std::size_t>(cfg.frame_count) + 1);
    for (std::size_t j = 1; j < gebd.sequence.size(); ++j) EXPECT_TRUE(v.is_gebd(gebd.sequence.tokens[j]));
    const auto tas = m.generate(h, TaskId::TAS, v);
    EXPECT_EQ(tas.sequence.size(), static_cast<std::size_t>(cfg.frame_count) + 1);
    for (std::size_t j = 1; j < tas.sequence.size(); ++j) EXPECT_TRUE(v.is_tas_class(tas.sequence.tokens[j]));
    const auto tad = m.generate(h, TaskId::TAD, v);
    const std::size_t after_prompt = tad.sequence.size() - 1;
    EXPECT_EQ(after_prompt % 3, 1u);
    EXPECT_EQ(tad.sequence.tokens.back(), v.eos_index);
    EXPECT_LE(tad.sequence.size(), static_cast<std::size_t>(cfg.max_target_len));
    Window w{"v", 0.0, 1.0, cfg.frame_count, static_cast<double>(cfg.frame_count)};
    EXPECT_NO_THROW(detokenize_tad(tad.sequence, tad.token_probs, w, v));
  }
}

TEST(Generate, DeterministicInEvalMode) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  std::mt19937_64 rng(14);
  const auto raw = random_matrix<double>(cfg.frame_count, cfg.input_dim, rng);
  Seq2SeqModel<double> a(cfg, 42), b(cfg, 42);
  for (auto task : kAllTasks) {
    const auto ga = a.generate(a.encode_raw(raw), task, v);
    const auto gb = b.generate(b.encode_raw(raw), task, v);
    EXPECT_EQ(ga.sequence.tokens, gb.sequence.tokens);
    EXPECT_EQ(ga.token_probs, gb.token_probs);
  }
}

TEST(ForwardBackward, MeanSemantics) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  Seq2SeqModel<double> m(cfg, 15);
  std::mt19937_64 rng(16);
  const auto raw = random_matrix<double>(cfg.frame_count, cfg.input_dim, rng);
  const auto raw2 = random_matrix<double>(cfg.frame_count, cfg.input_dim, rng);
  LossConfig lc;
  lc.boundary_space = v.time_token_count;
  std::vector<TrainingItem<double>> one{{&raw, random_tas_target(v, cfg.frame_count, rng)}};
  const auto r1 = m.forward_backward(std::span<const TrainingItem<double>>(one), v, lc);
  // Single-sample loss equals the loss module applied to the model's probabilities.
  Mat<double> probs = m.decode_teacher_forced(m.encode_raw(raw), one[0].target);
  softmax_rows_inplace(probs);
  EXPECT_NEAR(r1.loss, sequence_loss(one[0].target, probs, v, lc), 1e-12);

  std::vector<TrainingItem<double>> two{one[0], {&raw2, random_tas_target(v, cfg.frame_count, rng)}};
  std::vector<TrainingItem<double>> three{two[0], two[1], two[1]};
  std::vector<TrainingItem<double>> four{two[0], two[1], two[0], two[1]};
  const auto r2 = m.forward_backward(std::span<const TrainingItem<double>>(two), v, lc);
  const auto r4 = m.forward_backward(std::span<const TrainingItem<double>>(four), v, lc);
  EXPECT_NEAR(r2.loss, r4.loss, 1e-12);
  for (std::size_t i = 0; i < r2.grads.size(); ++i)
    EXPECT_LT((r2.grads[i] - r4.grads[i]).cwiseAbs().maxCoeff(), 1e-12);
  (void)three;
}

TEST(ForwardBackward, NonFiniteLossReportsSampleIndex) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  Seq2SeqModel<double> m(cfg, 17);
  m.params()[m.params().find("head.bias")](0, 0) = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(18);
  const auto raw = random_matrix<double>(cfg.frame_count, cfg.input_dim, rng);
  LossConfig lc;
  std::vector<TrainingItem<double>> batch{{&raw, random_tas_target(v, cfg.frame_count, rng)}};
  try {
    m.forward_backward(std::span<const TrainingItem<double>>(batch), v, lc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.sample_index(), 0);
  }
}

TEST(ForwardBackward, DropoutIsSeedDeterministic) {
  auto cfg = tiny_config();
  cfg.dropout_rate = 0.3;
  const auto v = tiny_layout();
  Seq2SeqModel<float> m(cfg, 19);
  std::mt19937_64 rng(20);
  const auto raw = random_matrix<float>(cfg.frame_count, cfg.input_dim, rng);
  LossConfig lc;
  std::vector<TrainingItem<float>> batch{{&raw, random_tas_target(v, cfg.frame_count, rng)}};
  std::mt19937_64 d1(5), d2(5);
  const auto a = m.forward_backward(std::span<const TrainingItem<float>>(batch), v, lc, &d1);
  const auto b = m.forward_backward(std::span<const TrainingItem<float>>(batch), v, lc, &d2);
  EXPECT_EQ(a.loss, b.loss);
}


TEST(Generate, TenThousandTokensPerTaskAreLegal) {
  auto cfg = tiny_config();
  const auto v = tiny_layout();
  std::mt19937_64 rng(21);
  for (auto task : kAllTasks) {
    std::size_t tokens = 0, violations = 0;
    for (std::uint64_t seed = 0; tokens < 10000; ++seed) {
      Seq2SeqModel<float> m(cfg, 1000 + seed);
      // Scaled-up weights make the unconstrained argmax more likely to be illegal.
      for (std::size_t i = 0; i < m.params().size(); ++i) m.params()[i] *= 4.0f;
      const auto h = m.encode_raw(random_matrix<float>(cfg.frame_count, cfg.input_dim, rng));
      const auto gen = m.generate(h, task, v);
      for (std::size_t j = 1; j < gen.sequence.size(); ++j, ++tokens) {
        const auto mask = step_mask(task, j - 1, v);
        if (!mask[static_cast<std::size_t>(gen.sequence.tokens[j])]) ++violations;
      }
    }
    EXPECT_EQ(violations, 0u) << task_name(task);
  }
}

}  // namespace
}  // namespace tseq
