// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "oracles.hpp"
#include "tseq/datapipe.hpp"

namespace tseq {
namespace {

using oracle::nearest_direction_accuracy;

std::vector<PlannedSample> flatten(const EpochPlan& p) {
  std::vector<PlannedSample> out;
  for (const auto& it : p.iterations)
    for (const auto& b : it.batches) out.insert(out.end(), b.samples.begin(), b.samples.end());
  return out;
}

PlanDataset dataset(TaskId t, std::size_t n, std::size_t batch) {
  PlanDataset d;
  d.task = t;
  d.video_count = n;
  d.batch_size = batch;
  return d;
}

TEST(DataMixing, SizesTenTwentyThirtyBatch32) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 10, 1), dataset(TaskId::TAS, 20, 1),
                                    dataset(TaskId::GEBD, 30, 1)};
  Rng rng(1);
  const auto plan = plan_epoch_data_mixing(ds, 32, rng);
  ASSERT_EQ(plan.iterations.size(), 2u);
  EXPECT_EQ(plan.iterations[0].batches[0].samples.size(), 32u);
  EXPECT_EQ(plan.iterations[1].batches[0].samples.size(), 28u);
}

TEST(DataMixing, PlanIsPermutationOfSampleSet) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PlanDataset> ds;
    std::vector<PlannedSample> expected;
    const std::size_t k = 1 + rng() % 3;
    for (std::size_t d = 0; d < k; ++d) {
      const std::size_t n = 1 + rng() % 40;
      ds.push_back(dataset(kAllTasks[d], n, 1));
      for (std::size_t v = 0; v < n; ++v) expected.push_back({d, v});
    }
    const std::size_t batch = 1 + rng() % 16;
    auto got = flatten(plan_epoch_data_mixing(ds, batch, rng));
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, expected);
  }
}

TEST(DataMixing, BatchesMixTasks) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 50, 1), dataset(TaskId::GEBD, 50, 1)};
  Rng rng(3);
  const auto plan = plan_epoch_data_mixing(ds, 20, rng);
  std::size_t mixed = 0;
  for (const auto& it : plan.iterations) {
    std::set<std::size_t> seen;
    for (const auto& s : it.batches[0].samples) seen.insert(s.dataset);
    mixed += seen.size() > 1;
  }
  EXPECT_GT(mixed, 0u);
}

TEST(DataMixing, Errors) {
  Rng rng(4);
  EXPECT_THROW(plan_epoch_data_mixing({}, 4, rng), InvalidArgument);
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 5, 1)};
  EXPECT_THROW(plan_epoch_data_mixing(ds, 0, rng), InvalidArgument);
}

TEST(BatchMixing, GroupCountsFiftySixtySixty) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 200, 4), dataset(TaskId::TAS, 1680, 28),
                                    dataset(TaskId::GEBD, 1920, 32)};
  ASSERT_EQ(ds[0].group_count(), 50u);
  ASSERT_EQ(ds[1].group_count(), 60u);
  ASSERT_EQ(ds[2].group_count(), 60u);
  Rng rng(5);
  const auto plan = plan_epoch_batch_mixing(ds, rng);
  ASSERT_EQ(plan.iterations.size(), 60u);
  std::map<std::size_t, std::size_t> tad_seen;
  for (std::size_t i = 0; i < 60; ++i) {
    const auto& it = plan.iterations[i];
    ASSERT_EQ(it.batches.size(), 3u);
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_EQ(it.batches[d].samples.size(), ds[d].batch_size);
      for (const auto& s : it.batches[d].samples) EXPECT_EQ(s.dataset, d);
    }
    for (const auto& s : it.batches[0].samples) ++tad_seen[s.video];
  }
  std::size_t twice = 0;
  for (const auto& [v, n] : tad_seen) {
    EXPECT_LE(n, 2u);
    twice += n == 2;
  }
  EXPECT_EQ(tad_seen.size(), 200u);
  EXPECT_EQ(twice, 40u);
}

TEST(BatchMixing, EqualGroupCountsSeeEverySampleOnce) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 12, 4), dataset(TaskId::TAS, 9, 3),
                                    dataset(TaskId::GEBD, 6, 2)};
  Rng rng(6);
  auto got = flatten(plan_epoch_batch_mixing(ds, rng));
  std::sort(got.begin(), got.end());
  std::vector<PlannedSample> expected;
  for (std::size_t d = 0; d < 3; ++d)
    for (std::size_t v = 0; v < ds[d].video_count; ++v) expected.push_back({d, v});
  EXPECT_EQ(got, expected);
}

TEST(BatchMixing, EpochLengthIsMaxGroupCount) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PlanDataset> ds;
    std::size_t most = 0;
    for (auto t : kAllTasks) {
      ds.push_back(dataset(t, 1 + rng() % 60, 1 + rng() % 8));
      most = std::max(most, ds.back().group_count());
    }
    EXPECT_EQ(plan_epoch_batch_mixing(ds, rng).iterations.size(), most);
  }
}

TEST(Balance, BatchMixingEpochFollowsTadAndTas) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PlanDataset> ds{dataset(TaskId::TAD, 1 + rng() % 40, 4), dataset(TaskId::TAS, 1 + rng() % 40, 4),
                                dataset(TaskId::GEBD, 1 + rng() % 400, 4)};
    const std::size_t expect = std::max(ds[0].group_count(), ds[1].group_count());
    const auto balanced = apply_balance(ds, MixingMode::BatchMixing);
    EXPECT_EQ(plan_epoch(balanced, MixingMode::BatchMixing, 1, rng).iterations.size(), expect);
  }
}

TEST(Balance, DataMixingGebdCapFormula) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 40, 4), dataset(TaskId::TAS, 100, 28),
                                    dataset(TaskId::GEBD, 1000, 32)};
  const auto balanced = apply_balance(ds, MixingMode::DataMixing);
  // max(ceil(40/4), ceil(100/28)) = 10 groups of 32.
  ASSERT_TRUE(balanced[2].per_epoch_samples.has_value());
  EXPECT_EQ(*balanced[2].per_epoch_samples, 320u);
  EXPECT_LT(balanced[2].epoch_samples(), ds[2].video_count);
  EXPECT_FALSE(balanced[0].per_epoch_samples.has_value());
  EXPECT_FALSE(balanced[1].per_epoch_samples.has_value());

  Rng rng(9);
  const auto plan = plan_epoch(balanced, MixingMode::DataMixing, 32, rng);
  std::map<std::size_t, std::size_t> per_dataset;
  std::set<std::size_t> gebd_videos;
  for (const auto& s : flatten(plan)) {
    ++per_dataset[s.dataset];
    if (s.dataset == 2) gebd_videos.insert(s.video);
  }
  EXPECT_EQ(per_dataset[0], 40u);
  EXPECT_EQ(per_dataset[1], 100u);
  EXPECT_EQ(per_dataset[2], 320u);
  EXPECT_EQ(gebd_videos.size(), 320u);
}

TEST(Balance, GebdBelowCapUnchanged) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 40, 4), dataset(TaskId::GEBD, 20, 32)};
  const auto balanced = apply_balance(ds, MixingMode::DataMixing);
  EXPECT_EQ(balanced[1].epoch_samples(), 20u);
}

TEST(Balance, GebdOnlyIsUntouched) {
  const std::vector<PlanDataset> ds{dataset(TaskId::GEBD, 1000, 32)};
  const auto balanced = apply_balance(ds, MixingMode::DataMixing);
  EXPECT_FALSE(balanced[0].per_epoch_samples.has_value());
}

TEST(Planning, SeedDeterministic) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAD, 17, 4), dataset(TaskId::TAS, 23, 5),
                                    dataset(TaskId::GEBD, 71, 8)};
  for (auto mode : {MixingMode::DataMixing, MixingMode::BatchMixing}) {
    const auto bal = apply_balance(ds, mode);
    Rng a(42), b(42), c(43);
    const auto pa = flatten(plan_epoch(bal, mode, 8, a));
    EXPECT_EQ(pa, flatten(plan_epoch(bal, mode, 8, b)));
    EXPECT_NE(pa, flatten(plan_epoch(bal, mode, 8, c)));
  }
}

TEST(Planning, SingleTaskUsesDatasetBatchSize) {
  const std::vector<PlanDataset> ds{dataset(TaskId::TAS, 10, 3)};
  Rng rng(10);
  const auto plan = plan_epoch(ds, MixingMode::SingleTask, 99, rng);
  EXPECT_EQ(plan.iterations.size(), 4u);
  const std::vector<PlanDataset> two{dataset(TaskId::TAS, 10, 3), dataset(TaskId::TAD, 10, 3)};
  EXPECT_THROW(plan_epoch(two, MixingMode::SingleTask, 4, rng), InvalidArgument);
}

TEST(MixingNames, RoundTrip) {
  for (auto m : {MixingMode::SingleTask, MixingMode::DataMixing, MixingMode::BatchMixing})
    EXPECT_EQ(parse_mixing(mixing_name(m)), m);
  EXPECT_THROW(parse_mixing("interleaved"), InvalidArgument);
}

DatasetSpec spec(TaskId t, double fps, int stride, double window, int frames) {
  return {t, 0, fps, stride, window, frames, 1};
}

TEST(SlidingWindows, SixtySecondVideo) {
  const auto ws = sliding_windows("v", 60.0, spec(TaskId::TAD, 30, 4, 20, 150), 10.0);
  std::vector<double> starts;
  for (const auto& w : ws) starts.push_back(w.start_time);
  EXPECT_EQ(starts, (std::vector<double>{0, 10, 20, 30, 40}));
}

TEST(SlidingWindows, ShortVideoAndRightAlignedTail) {
  const auto s = spec(TaskId::TAD, 30, 4, 20, 150);
  const auto one = sliding_windows("v", 12.0, s, 10.0);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].start_time, 0.0);
  const auto tail = sliding_windows("v", 55.0, s, 10.0);
  EXPECT_DOUBLE_EQ(tail.back().start_time, 35.0);
  EXPECT_THROW(sliding_windows("v", 55.0, s, 0.0), InvalidArgument);
}

TEST(SlidingWindows, CoverVideo) {
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double dur = 1 + 100 * u(rng);
    const auto s = spec(TaskId::TAS, 15, 4, 40, 150);
    const auto ws = sliding_windows("v", dur, s, 20 * (0.1 + u(rng)));
    EXPECT_EQ(ws.front().start_time, 0.0);
    double covered = 0.0;
    for (const auto& w : ws) {
      EXPECT_LE(w.start_time, covered + 1e-9);
      covered = std::max(covered, w.end_time());
    }
    EXPECT_GE(covered, dur - 1e-9);
  }
}

SynthOptions synth(TaskId t, double noise) {
  SynthOptions o;
  o.task = t;
  o.classes = 6;
  o.noise_level = noise;
  o.fps = 10;
  o.input_dim = 16;
  o.min_duration = 20;
  o.max_duration = 40;
  o.min_span = 1;
  o.max_span = 4;
  return o;
}

TEST(Synthetic, NoiseFreeOracleIsPerfect) {
  for (auto t : {TaskId::TAS, TaskId::TAD}) {
    Rng rng(12);
    const auto o = synth(t, 0.0);
    const auto vids = synth_generate(o, 8, rng);
    const auto dirs = class_directions(t, o.classes, o.input_dim, o.direction_seed);
    EXPECT_EQ(nearest_direction_accuracy(vids, dirs, t == TaskId::TAD), 1.0) << task_name(t);
  }
}

TEST(Synthetic, SeedDeterministic) {
  for (auto t : kAllTasks) {
    Rng a(13), b(13);
    const auto va = synth_generate(synth(t, 0.3), 4, a);
    const auto vb = synth_generate(synth(t, 0.3), 4, b);
    ASSERT_EQ(va.size(), vb.size());
    for (std::size_t i = 0; i < va.size(); ++i) {
      EXPECT_EQ(va[i].video.id, vb[i].video.id);
      EXPECT_TRUE((va[i].video.features.array() == vb[i].video.features.array()).all());
      EXPECT_EQ(va[i].video.annotation.instances, vb[i].video.annotation.instances);
      EXPECT_EQ(va[i].video.annotation.boundaries, vb[i].video.annotation.boundaries);
      EXPECT_EQ(va[i].planted_classes, vb[i].planted_classes);
    }
  }
}

TEST(Synthetic, AnnotationsMatchPlantedSignal) {
  Rng rng(14);
  const auto o = synth(TaskId::TAD, 0.0);
  const auto dirs = class_directions(TaskId::TAD, o.classes, o.input_dim, o.direction_seed);
  for (const auto& sv : synth_generate(o, 6, rng)) {
    const auto& v = sv.video;
    ASSERT_GE(v.annotation.instances.size(), 1u);
    ASSERT_LE(v.annotation.instances.size(), 5u);
    for (std::size_t i = 1; i < v.annotation.instances.size(); ++i)
      EXPECT_LE(v.annotation.instances[i - 1].end, v.annotation.instances[i].start);
    for (int n = 0; n < v.frame_count(); ++n) {
      const double t = (n + 0.5) / v.fps;
      int expect = -1;
      for (const auto& inst : v.annotation.instances)
        if (t >= inst.start && t < inst.end) expect = inst.class_id;
      if (expect < 0) {
        EXPECT_EQ(v.features.row(n).norm(), 0.0f);
      } else {
        EXPECT_LT((v.features.row(n) - dirs.row(expect)).norm(), 1e-6f);
      }
    }
  }
}

TEST(Synthetic, GebdBoundariesChangeDirection) {
  Rng rng(15);
  const auto o = synth(TaskId::GEBD, 0.0);
  for (const auto& sv : synth_generate(o, 6, rng)) {
    const auto& v = sv.video;
    EXPECT_EQ(sv.planted_classes.size(), v.annotation.boundaries.size() + 1);
    for (double b : v.annotation.boundaries) {
      const int n = static_cast<int>(std::floor(b * v.fps));
      ASSERT_GE(n, 1);
      EXPECT_GT((v.features.row(n) - v.features.row(n - 1)).norm(), 1.0f);
    }
  }
}

TEST(Synthetic, InfeasiblePackingRejected) {
  auto o = synth(TaskId::TAD, 0.1);
  o.min_instances = 5;
  o.max_instances = 6;
  o.min_span = 4;
  o.min_duration = 20;
  Rng rng(16);
  EXPECT_THROW(synth_generate(o, 1, rng), InvalidArgument);
  o.classes = 17;
  o.max_instances = 1;
  o.min_instances = 1;
  EXPECT_THROW(synth_generate(o, 1, rng), InvalidArgument);
}

TEST(Cropping, WindowEqualsVideoStartsAtZero) {
  Rng rng(17);
  auto o = synth(TaskId::TAS, 0.1);
  o.min_duration = o.max_duration = 8.0;
  const auto v = synth_generate(o, 1, rng)[0].video;
  const auto s = spec(TaskId::TAS, 10, 2, 8, 40);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(crop_random_window(v, s, rng).window.start_time, 0.0);
}

TEST(Cropping, ShortVideoIsEdgePadded) {
  Rng rng(18);
  auto o = synth(TaskId::TAS, 0.1);
  o.min_duration = o.max_duration = 3.0;
  const auto v = synth_generate(o, 1, rng)[0].video;
  const auto clip = crop_random_window(v, spec(TaskId::TAS, 10, 1, 6, 60), rng);
  EXPECT_EQ(clip.features.rows(), 60);
  EXPECT_TRUE((clip.features.row(59).array() == v.features.row(v.frame_count() - 1).array()).all());
  EXPECT_EQ(clip.frame_labels.back(), v.annotation.frame_labels.back());
}

TEST(Cropping, DeterministicAndWithinBounds) {
  Rng g(19);
  const auto vids = synth_generate(synth(TaskId::TAD, 0.1), 4, g);
  const auto s = spec(TaskId::TAD, 10, 2, 10, 50);
  Rng a(20), b(20);
  for (int i = 0; i < 50; ++i) {
    const auto& v = vids[static_cast<std::size_t>(i) % vids.size()].video;
    const auto ca = crop_random_window(v, s, a);
    const auto cb = crop_random_window(v, s, b);
    EXPECT_EQ(ca.window.start_time, cb.window.start_time);
    EXPECT_GE(ca.window.start_time, 0.0);
    EXPECT_LE(ca.window.end_time(), v.duration + 1e-9);
    EXPECT_EQ(ca.features.rows(), 50);
  }
  const Video empty;
  EXPECT_THROW(crop_random_window(empty, s, a), InvalidArgument);
}

TEST(Cropping, ClippedAnnotationsLieInWindowAndKeepClasses) {
  Rng rng(21);
  const auto vids = synth_generate(synth(TaskId::TAD, 0.1), 6, rng);
  const auto s = spec(TaskId::TAD, 10, 2, 10, 50);
  const auto layout = build_layout(50, 6, 6);
  for (int i = 0; i < 100; ++i) {
    const auto& v = vids[static_cast<std::size_t>(i) % vids.size()].video;
    const auto clip = crop_random_window(v, s, rng);
    const auto seq = make_target(clip, layout);
    const auto inst = detokenize_tad(seq, std::vector<double>(seq.size(), 1.0), clip.window, layout);
    for (const auto& d : inst) {
      EXPECT_GE(d.start, clip.window.start_time);
      EXPECT_LE(d.end, clip.window.end_time() + 1e-9);
      bool class_present = false;
      for (const auto& g : v.annotation.instances)
        class_present |= g.class_id == d.class_id && temporal_iou(g, d) > 0.0;
      EXPECT_TRUE(class_present);
    }
  }
}

TEST(Cropping, GebdTargetsMarkBoundaryFrames) {
  Rng rng(22);
  const auto vids = synth_generate(synth(TaskId::GEBD, 0.1), 3, rng);
  const auto s = spec(TaskId::GEBD, 10, 1, 5, 50);
  const auto layout = build_layout(50, 2, 6);
  for (const auto& sv : vids) {
    const auto clip = crop_random_window(sv.video, s, rng);
    const auto seq = make_target(clip, layout);
    std::size_t hits = 0;
    for (std::size_t j = 1; j < seq.size(); ++j) hits += seq.tokens[j] == layout.gebd_boundary_index;
    EXPECT_EQ(hits, clip.annotation.boundaries.size());
  }
}

}  // namespace
}  // namespace tseq
