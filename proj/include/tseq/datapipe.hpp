// SPDX-License-Identifier: Apache-2.0
//
// Videos, random window crops, joint-training epoch plans, sliding-window
// enumeration and the synthetic data generator.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tseq/codec.hpp"
#include "tseq/error.hpp"
#include "tseq/nn.hpp"
#include "tseq/vocab.hpp"

namespace tseq {

using Rng = std::mt19937_64;

struct DatasetSpec {
  TaskId task = TaskId::TAD;
  int video_count = 0;
  double fps = 30.0;
  int stride = 1;
  double window_seconds = 5.0;
  int clip_frames = 150;
  int batch_size = 1;

  double clip_rate() const { return fps / stride; }

  void validate() const {
    detail::require(fps > 0.0 && stride >= 1 && window_seconds > 0.0 && batch_size >= 1,
                    "dataset spec: fps, stride, window and batch size must be positive");
    detail::require(clip_frames == static_cast<int>(std::lround(window_seconds * clip_rate())),
                    "dataset spec: clip_frames != round(window_seconds * fps / stride)");
  }
};

/// Ground truth of one video. TAS labels are per native frame.
struct TaskAnnotation {
  TaskId task = TaskId::TAD;
  std::vector<TadInstance> instances;
  std::vector<int> frame_labels;
  std::vector<double> boundaries;
};

struct Video {
  std::string id;
  double duration = 0.0;
  double fps = 0.0;
  Mat<float> features;  // native frames x C_in
  TaskAnnotation annotation;

  int frame_count() const { return static_cast<int>(features.rows()); }
};

/// A window's worth of features plus the annotation restricted to it.
/// `frame_labels` holds one label per clip frame for TAS (class) and for TAD
/// (class, or -1 for background).
struct FeatureClip {
  Window window;
  Mat<float> features;
  TaskAnnotation annotation;
  std::vector<int> frame_labels;
};

namespace detail {

/// Nearest native frame to the center of clip frame i, clamped to the video.
inline int native_index(const Video& v, const Window& w, int i) {
  const double t = w.start_time + (i + 0.5) * w.frame_span();
  const auto n = static_cast<long>(std::floor(t * v.fps));
  return static_cast<int>(std::clamp<long>(n, 0, v.frame_count() - 1));
}

inline int tad_label_at(const std::vector<TadInstance>& instances, double t) {
  for (const auto& inst : instances)
    if (t >= inst.start && t < inst.end) return inst.class_id;
  return -1;
}

}  // namespace detail

/// Features resampled by nearest-frame selection at clip frame centers; frames
/// past the end of a short video repeat its last frame.
inline FeatureClip sample_clip(const Video& video, const DatasetSpec& spec, double start_time) {
  if (video.frame_count() == 0) throw InvalidArgument("video " + video.id + " has no frames");
  FeatureClip clip;
  clip.window = {video.id, start_time, spec.window_seconds, spec.clip_frames,
                 spec.clip_frames / spec.window_seconds};
  const auto& w = clip.window;
  clip.features.resize(spec.clip_frames, video.features.cols());
  std::vector<int> idx(static_cast<std::size_t>(spec.clip_frames));
  for (int i = 0; i < spec.clip_frames; ++i) {
    idx[static_cast<std::size_t>(i)] = detail::native_index(video, w, i);
    clip.features.row(i) = video.features.row(idx[static_cast<std::size_t>(i)]);
  }
  const auto& ann = video.annotation;
  clip.annotation.task = ann.task;
  switch (ann.task) {
    case TaskId::TAD:
      for (const auto& inst : ann.instances)
        if (inst.end > w.start_time && inst.start < w.end_time()) clip.annotation.instances.push_back(inst);
      for (int n : idx)
        clip.frame_labels.push_back(detail::tad_label_at(ann.instances, (n + 0.5) / video.fps));
      break;
    case TaskId::TAS:
      if (ann.frame_labels.size() != static_cast<std::size_t>(video.frame_count()))
        throw InvalidArgument("video " + video.id + ": TAS label count != frame count");
      for (int n : idx) clip.frame_labels.push_back(ann.frame_labels[static_cast<std::size_t>(n)]);
      break;
    case TaskId::GEBD:
      for (double b : ann.boundaries)
        if (b >= w.start_time && b < w.end_time()) clip.annotation.boundaries.push_back(b);
      break;
  }
  return clip;
}

/// Window start drawn uniformly from [0, duration - window] and snapped down
/// to the native frame grid; start 0 when the video is not longer than the window.
inline FeatureClip crop_random_window(const Video& video, const DatasetSpec& spec, Rng& rng) {
  if (video.frame_count() == 0 || video.duration <= 0.0)
    throw InvalidArgument("video " + video.id + " is empty");
  double start = 0.0;
  const double slack = video.duration - spec.window_seconds;
  if (slack > 0.0) {
    std::uniform_real_distribution<double> u(0.0, slack);
    const double max_frame = std::floor(slack * video.fps);
    start = std::min(std::floor(u(rng) * video.fps), max_frame) / video.fps;
  }
  return sample_clip(video, spec, start);
}

inline TargetSequence make_target(const FeatureClip& clip, const VocabLayout& layout,
                                  TadParadigm paradigm = TadParadigm::Sparse) {
  switch (clip.annotation.task) {
    case TaskId::TAD:
      if (paradigm == TadParadigm::Dense) return tokenize_tad_dense(clip.frame_labels, clip.window, layout);
      return tokenize_tad(clip.annotation.instances, clip.window, layout);
    case TaskId::TAS: return tokenize_tas(clip.frame_labels, clip.window, layout);
    case TaskId::GEBD: return tokenize_gebd(clip.annotation.boundaries, clip.window, layout);
  }
  throw InvalidArgument("unknown task");
}

/// Window starts 0, stride, 2 * stride, ... plus a final window flush with the
/// video end when needed. A video no longer than the window gets one window.
inline std::vector<Window> sliding_windows(const std::string& video_id, double duration,
                                           const DatasetSpec& spec, double stride_seconds) {
  detail::require(stride_seconds > 0.0, "stride_seconds must be > 0");
  detail::require(duration > 0.0, "duration must be > 0");
  const double rate = spec.clip_frames / spec.window_seconds;
  const double len = spec.window_seconds;
  constexpr double kTol = 1e-9;
  std::vector<Window> out;
  auto add = [&](double s) { out.push_back({video_id, s, len, spec.clip_frames, rate}); };
  if (duration <= len + kTol) {
    add(0.0);
    return out;
  }
  double s = 0.0;
  for (long k = 0; s + len <= duration + kTol; s = static_cast<double>(++k) * stride_seconds) add(s);
  if (out.back().end_time() < duration - kTol) add(duration - len);
  return out;
}

// ---------------------------------------------------------------------------
// Epoch planning

enum class MixingMode : std::uint8_t { SingleTask, DataMixing, BatchMixing };

inline std::string_view mixing_name(MixingMode m) {
  switch (m) {
    case MixingMode::SingleTask: return "single_task";
    case MixingMode::DataMixing: return "data_mixing";
    case MixingMode::BatchMixing: return "batch_mixing";
  }
  return "?";
}

inline MixingMode parse_mixing(std::string_view s) {
  if (s == "single_task") return MixingMode::SingleTask;
  if (s == "data_mixing") return MixingMode::DataMixing;
  if (s == "batch_mixing") return MixingMode::BatchMixing;
  throw InvalidArgument("unknown mixing mode '" + std::string(s) + "'");
}

struct PlanDataset {
  TaskId task = TaskId::TAD;
  std::size_t video_count = 0;
  std::size_t batch_size = 1;
  /// Uniform per-epoch subsample size; unset means every video.
  std::optional<std::size_t> per_epoch_samples;
  /// Under batch mixing the epoch ends when every driving dataset is exhausted.
  bool drives_epoch_length = true;

  std::size_t epoch_samples() const {
    return per_epoch_samples ? std::min(*per_epoch_samples, video_count) : video_count;
  }
  std::size_t group_count() const { return (epoch_samples() + batch_size - 1) / batch_size; }
};

struct PlannedSample {
  std::size_t dataset = 0;
  std::size_t video = 0;
  friend auto operator<=>(const PlannedSample&, const PlannedSample&) = default;
};

struct Batch {
  std::vector<PlannedSample> samples;
};

/// The batches consumed by one optimizer step.
struct Iteration {
  std::vector<Batch> batches;
};

struct EpochPlan {
  std::vector<Iteration> iterations;

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& it : iterations)
      for (const auto& b : it.batches) n += b.samples.size();
    return n;
  }
};

namespace detail {

inline std::vector<std::size_t> epoch_subset(const PlanDataset& d, Rng& rng) {
  std::vector<std::size_t> idx(d.video_count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(d.epoch_samples());
  return idx;
}

inline void check_datasets(std::span<const PlanDataset> datasets) {
  if (datasets.empty()) throw InvalidArgument("no datasets to plan");
  for (const auto& d : datasets) {
    if (d.batch_size < 1) throw InvalidArgument("batch size must be >= 1");
    if (d.video_count == 0) throw InvalidArgument("empty dataset in plan");
  }
}

}  // namespace detail

/// One sample per (subsampled) video of every dataset, shuffled together and
/// cut into batches of `batch_size`; the last batch may be short.
inline EpochPlan plan_epoch_data_mixing(std::span<const PlanDataset> datasets, std::size_t batch_size,
                                        Rng& rng) {
  detail::check_datasets(datasets);
  detail::require(batch_size >= 1, "batch_size must be >= 1");
  std::vector<PlannedSample> pool;
  for (std::size_t d = 0; d < datasets.size(); ++d)
    for (std::size_t v : detail::epoch_subset(datasets[d], rng)) pool.push_back({d, v});
  std::shuffle(pool.begin(), pool.end(), rng);
  EpochPlan plan;
  for (std::size_t i = 0; i < pool.size(); i += batch_size) {
    Batch b;
    b.samples.assign(pool.begin() + static_cast<long>(i),
                     pool.begin() + static_cast<long>(std::min(pool.size(), i + batch_size)));
    plan.iterations.push_back({{std::move(b)}});
  }
  return plan;
}

/// Every iteration takes one single-task batch from each dataset. Datasets
/// that run out are reshuffled and restart; the epoch lasts as many
/// iterations as the largest driving dataset has batches.
inline EpochPlan plan_epoch_batch_mixing(std::span<const PlanDataset> datasets, Rng& rng) {
  detail::check_datasets(datasets);
  std::size_t iterations = 0;
  bool any_driver = false;
  for (const auto& d : datasets)
    if (d.drives_epoch_length) {
      any_driver = true;
      iterations = std::max(iterations, d.group_count());
    }
  if (!any_driver)
    for (const auto& d : datasets) iterations = std::max(iterations, d.group_count());

  struct Cursor {
    std::vector<std::size_t> order;
    std::size_t next = 0;
  };
  std::vector<Cursor> cursors(datasets.size());
  for (std::size_t d = 0; d < datasets.size(); ++d) cursors[d].order = detail::epoch_subset(datasets[d], rng);

  EpochPlan plan;
  plan.iterations.resize(iterations);
  for (std::size_t i = 0; i < iterations; ++i) {
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      auto& c = cursors[d];
      if (c.next >= c.order.size()) {
        c.order = detail::epoch_subset(datasets[d], rng);
        c.next = 0;
      }
      Batch b;
      const std::size_t end = std::min(c.order.size(), c.next + datasets[d].batch_size);
      for (; c.next < end; ++c.next) b.samples.push_back({d, c.order[c.next]});
      plan.iterations[i].batches.push_back(std::move(b));
    }
  }
  return plan;
}

/// GEBD samples seen per epoch under balance:
/// ceil(max(TAD batches, TAS batches)) * GEBD batch size, capped at the dataset size.
inline std::size_t balance_cap(std::span<const PlanDataset> datasets, const PlanDataset& gebd) {
  std::size_t groups = 0;
  for (const auto& d : datasets)
    if (d.task != TaskId::GEBD) groups = std::max(groups, d.group_count());
  return std::min(gebd.video_count, groups * gebd.batch_size);
}

/// Batch mixing: GEBD stops driving the epoch length. Data mixing: GEBD is
/// subsampled per epoch to the batch-mixing alignment count.
inline std::vector<PlanDataset> apply_balance(std::vector<PlanDataset> datasets, MixingMode mode) {
  const bool has_other = std::any_of(datasets.begin(), datasets.end(),
                                     [](const auto& d) { return d.task != TaskId::GEBD; });
  if (!has_other) return datasets;
  const std::vector<PlanDataset> original = datasets;
  for (auto& d : datasets) {
    if (d.task != TaskId::GEBD) continue;
    if (mode == MixingMode::BatchMixing) {
      d.drives_epoch_length = false;
    } else if (mode == MixingMode::DataMixing) {
      d.per_epoch_samples = balance_cap(original, d);
    }
  }
  return datasets;
}

inline EpochPlan plan_epoch(std::span<const PlanDataset> datasets, MixingMode mode, std::size_t batch_size,
                            Rng& rng) {
  if (mode == MixingMode::BatchMixing) return plan_epoch_batch_mixing(datasets, rng);
  if (mode == MixingMode::SingleTask && datasets.size() != 1)
    throw InvalidArgument("single_task mode needs exactly one dataset");
  if (mode == MixingMode::SingleTask) return plan_epoch_data_mixing(datasets, datasets.front().batch_size, rng);
  return plan_epoch_data_mixing(datasets, batch_size, rng);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
  TaskId task = TaskId::TAD;
  int classes = 5;
  double min_duration = 30.0;
  double max_duration = 60.0;
  double noise_level = 0.2;
  double fps = 30.0;
  int input_dim = 32;
  /// Seeds the class directions; datasets meant to be evaluated together must share it.
  std::uint64_t direction_seed = 0;
  /// TAD instance and TAS/GEBD segment length range in seconds.
  double min_span = 2.0;
  double max_span = 6.0;
  int min_instances = 1;
  int max_instances = 5;
};

struct SyntheticVideo {
  Video video;
  std::vector<int> planted_classes;
  double noise_level = 0.0;
};

/// Orthonormal directions for `count` classes (rows), fixed by the task and seed.
inline Mat<float> class_directions(TaskId task, int count, int dim, std::uint64_t seed) {
  detail::require(count >= 1 && count <= dim, "class count must be in [1, input_dim]");
  Rng rng(seed * 3 + static_cast<std::uint64_t>(task) + 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<double> d(count, dim);
  for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = n(rng);
  for (int i = 0; i < count; ++i) {
    for (int j = 0; j < i; ++j) d.row(i) -= d.row(i).dot(d.row(j)) * d.row(j);
    d.row(i).normalize();
  }
  return d.cast<float>();
}

namespace detail {

/// Consecutive spans tiling [0, duration) with lengths in [lo, hi]; the last
/// span absorbs the remainder.
inline std::vector<double> tiling_cuts(double duration, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> len(lo, hi);
  std::vector<double> cuts;
  double t = len(rng);
  while (t < duration - lo) {
    cuts.push_back(t);
    t += len(rng);
  }
  return cuts;
}

inline int draw_class_not(int classes, int previous, Rng& rng) {
  std::uniform_int_distribution<int> c(0, classes - 1);
  if (classes == 1) return 0;
  int k = c(rng);
  while (k == previous) k = c(rng);
  return k;
}

}  // namespace detail

/// TAD: non-overlapping instances over a noise background. TAS: a full tiling
/// by class segments. GEBD: a tiling by "scene" segments whose direction
/// changes at every boundary; boundaries sit a quarter frame after a native
/// frame start so each one falls unambiguously inside one frame.
inline std::vector<SyntheticVideo> synth_generate(const SynthOptions& opt, int video_count, Rng& rng) {
  detail::require(video_count >= 0, "video_count must be >= 0");
  detail::require(opt.min_duration > 0.0 && opt.max_duration >= opt.min_duration, "bad duration range");
  detail::require(opt.noise_level >= 0.0 && opt.fps > 0.0, "bad noise level or fps");
  detail::require(opt.min_span > 0.0 && opt.max_span >= opt.min_span, "bad span range");
  detail::require(opt.min_instances >= 0 && opt.max_instances >= opt.min_instances, "bad instance range");
  const Mat<float> dirs = class_directions(opt.task, opt.classes, opt.input_dim, opt.direction_seed);
  if (opt.task == TaskId::TAD && opt.max_instances * opt.min_span > opt.min_duration)
    throw InvalidArgument("infeasible packing: " + std::to_string(opt.max_instances) + " instances of >= " +
                          std::to_string(opt.min_span) + " s do not fit in " +
                          std::to_string(opt.min_duration) + " s");
  std::uniform_real_distribution<double> dur(opt.min_duration, opt.max_duration);
  std::uniform_real_distribution<double> span(opt.min_span, opt.max_span);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, opt.classes - 1);
  std::uniform_int_distribution<int> count(opt.min_instances, opt.max_instances);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(opt.noise_level));

  std::vector<SyntheticVideo> out;
  for (int v = 0; v < video_count; ++v) {
    SyntheticVideo sv;
    Video& video = sv.video;
    video.id = std::string(task_name(opt.task)) + "_" + std::to_string(v);
    video.fps = opt.fps;
    const int frames = std::max(1, static_cast<int>(std::lround(dur(rng) * opt.fps)));
    video.duration = frames / opt.fps;
    video.annotation.task = opt.task;
    std::vector<int> frame_class(static_cast<std::size_t>(frames), -1);
    auto center = [&](int n) { return (n + 0.5) / opt.fps; };

    switch (opt.task) {
      case TaskId::TAD: {
        const int k = count(rng);
        std::vector<double> lens(static_cast<std::size_t>(k));
        for (auto& l : lens) l = span(rng);
        double total = std::accumulate(lens.begin(), lens.end(), 0.0);
        if (total > video.duration) {
          for (auto& l : lens) l *= video.duration / total;
          total = video.duration;
        }
        std::vector<double> gaps(static_cast<std::size_t>(k) + 1);
        for (auto& g : gaps) g = unit(rng) + 1e-3;
        const double gsum = std::accumulate(gaps.begin(), gaps.end(), 0.0);
        double t = 0.0;
        for (int i = 0; i < k; ++i) {
          t += gaps[static_cast<std::size_t>(i)] / gsum * (video.duration - total);
          const int c = cls(rng);
          video.annotation.instances.push_back({t, t + lens[static_cast<std::size_t>(i)], c});
          sv.planted_classes.push_back(c);
          t += lens[static_cast<std::size_t>(i)];
        }
        for (int n = 0; n < frames; ++n)
          frame_class[static_cast<std::size_t>(n)] = detail::tad_label_at(video.annotation.instances, center(n));
        break;
      }
      case TaskId::TAS:
      case TaskId::GEBD: {
        std::vector<double> cuts = detail::tiling_cuts(video.duration, opt.min_span, opt.max_span, rng);
        if (opt.task == TaskId::GEBD) {
          for (auto& c : cuts) c = (std::floor(c * opt.fps) + 0.25) / opt.fps;
          cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
          video.annotation.boundaries = cuts;
        }
        std::vector<int> seg_class;
        int prev = -1;
        for (std::size_t s = 0; s <= cuts.size(); ++s) {
          prev = detail::draw_class_not(opt.classes, prev, rng);
          seg_class.push_back(prev);
        }
        sv.planted_classes = seg_class;
        for (int n = 0; n < frames; ++n) {
          const auto seg = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), center(n)) - cuts.begin());
          frame_class[static_cast<std::size_t>(n)] = seg_class[seg];
        }
        if (opt.task == TaskId::TAS) video.annotation.frame_labels = frame_class;
        break;
      }
    }

    video.features.resize(frames, opt.input_dim);
    for (int n = 0; n < frames; ++n) {
      for (int d = 0; d < opt.input_dim; ++d) video.features(n, d) = noise(rng);
      const int c = frame_class[static_cast<std::size_t>(n)];
      if (c >= 0) video.features.row(n) += dirs.row(c);
    }
    sv.noise_level = opt.noise_level;
    out.push_back(std::move(sv));
  }
  return out;
}

/// Frame labels on a video's clip-rate grid (for evaluation), using the same
/// nearest-frame rule as cropping.
inline std::vector<int> video_grid_labels(const Video& video, double clip_rate) {
  const int frames = video_frame_count(video.duration, clip_rate);
  // Annotation-only videos (no features loaded) fall back to the label count.
  long native = video.frame_count();
  if (native == 0)
    native = video.annotation.task == TaskId::TAS ? static_cast<long>(video.annotation.frame_labels.size())
                                                  : std::lround(video.duration * video.fps);
  std::vector<int> out(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    const auto n = static_cast<long>(std::floor((f + 0.5) / clip_rate * video.fps));
    const auto idx = static_cast<std::size_t>(std::clamp<long>(n, 0, native - 1));
    out[static_cast<std::size_t>(f)] = video.annotation.task == TaskId::TAS
                                           ? video.annotation.frame_labels[idx]
                                           : detail::tad_label_at(video.annotation.instances, (idx + 0.5) / video.fps);
  }
  return out;
}

}  // namespace tseq
