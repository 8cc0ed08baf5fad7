// SPDX-License-Identifier: Apache-2.0
//
// Annotation <-> token-sequence conversion, 1-D NMS and cross-window merging.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "tseq/error.hpp"
#include "tseq/vocab.hpp"

namespace tseq {

/// A fixed-length crop of a video. Clip frame i spans
/// [start_time + i * dt, start_time + (i + 1) * dt) with dt = duration / frame_count.
struct Window {
  std::string video_id;
  double start_time = 0.0;
  double duration = 0.0;
  int frame_count = 0;
  double frame_rate = 0.0;  // frames per second after the stride

  double frame_span() const { return duration / frame_count; }
  double end_time() const { return start_time + duration; }
  /// Index of clip frame 0 on the video's strided frame grid.
  long first_frame() const { return std::lround(start_time * frame_rate); }
};

struct TadInstance {
  double start = 0.0;
  double end = 0.0;
  int class_id = 0;
  double score = 1.0;

  friend bool operator==(const TadInstance&, const TadInstance&) = default;
};

struct TasSegment {
  int start_frame = 0;
  int end_frame = 0;  // inclusive
  int class_id = 0;

  int length() const { return end_frame - start_frame + 1; }
  friend bool operator==(const TasSegment&, const TasSegment&) = default;
};

struct GebdBoundary {
  double timestamp = 0.0;
  double score = 1.0;
};

struct TargetSequence {
  TaskId task = TaskId::TAD;
  std::vector<Token> tokens;
  std::vector<PositionRole> roles;

  std::size_t size() const { return tokens.size(); }
  void push(Token t, PositionRole r) {
    tokens.push_back(t);
    roles.push_back(r);
  }
};

struct PredictionSet {
  TaskId task = TaskId::TAD;
  std::vector<TadInstance> tad;
  std::vector<TasSegment> tas;
  std::vector<GebdBoundary> gebd;
};

inline double temporal_iou(double s1, double e1, double s2, double e2) {
  const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
  const double uni = (e1 - s1) + (e2 - s2) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double temporal_iou(const TadInstance& a, const TadInstance& b) {
  return temporal_iou(a.start, a.end, b.start, b.end);
}

namespace detail {

inline TargetSequence begin_sequence(TaskId task, const VocabLayout& layout) {
  TargetSequence seq;
  seq.task = task;
  seq.push(layout.prompt(task), PositionRole::Prompt);
  return seq;
}

inline void require_frames(std::size_t n, const Window& window) {
  if (n != static_cast<std::size_t>(window.frame_count))
    throw InvalidArgument("label sequence length " + std::to_string(n) +
                          " != window frame count " + std::to_string(window.frame_count));
}

inline void require_prompt(const TargetSequence& seq, TaskId task, const VocabLayout& layout) {
  if (seq.tokens.empty() || seq.tokens.front() != layout.prompt(task))
    throw DecodeError(std::string("sequence does not start with the ") +
                      std::string(task_name(task)) + " prompt");
}

}  // namespace detail

/// Instances are clipped to the window; those shorter than one time bin after
/// clipping are dropped. Triples are ordered by (start, end, class).
inline TargetSequence tokenize_tad(std::span<const TadInstance> instances, const Window& window,
                                   const VocabLayout& layout) {
  const double bin = window.duration / layout.time_token_count;
  std::vector<std::tuple<Token, Token, Token, double>> triples;
  for (const auto& inst : instances) {
    const double s = std::max(inst.start, window.start_time);
    const double e = std::min(inst.end, window.end_time());
    if (e - s < bin) continue;
    const double rs = std::clamp((s - window.start_time) / window.duration, 0.0, 1.0);
    const double re = std::clamp((e - window.start_time) / window.duration, 0.0, 1.0);
    triples.emplace_back(time_to_token(rs, layout), time_to_token(re, layout),
                         class_to_token(TaskId::TAD, inst.class_id, layout), s);
  }
  std::sort(triples.begin(), triples.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<3>(a), std::get<0>(a), std::get<1>(a), std::get<2>(a)) <
           std::tie(std::get<3>(b), std::get<0>(b), std::get<1>(b), std::get<2>(b));
  });
  auto seq = detail::begin_sequence(TaskId::TAD, layout);
  for (const auto& [a, b, c, unused] : triples) {
    seq.push(a, PositionRole::TadStart);
    seq.push(b, PositionRole::TadEnd);
    seq.push(c, PositionRole::TadClass);
  }
  seq.push(layout.eos_index, PositionRole::Eos);
  return seq;
}

/// Dense TAD: one token per frame, a TAD class token or the background token.
/// `frame_labels[i] < 0` marks background.
inline TargetSequence tokenize_tad_dense(std::span<const int> frame_labels, const Window& window,
                                         const VocabLayout& layout) {
  detail::require_frames(frame_labels.size(), window);
  auto seq = detail::begin_sequence(TaskId::TAD, layout);
  for (int label : frame_labels) {
    const Token t = label < 0 ? layout.gebd_background_index
                              : class_to_token(TaskId::TAD, label, layout);
    seq.push(t, PositionRole::TadDenseFrame);
  }
  return seq;
}

inline TargetSequence tokenize_tas(std::span<const int> frame_labels, const Window& window,
                                   const VocabLayout& layout) {
  detail::require_frames(frame_labels.size(), window);
  auto seq = detail::begin_sequence(TaskId::TAS, layout);
  for (int label : frame_labels)
    seq.push(class_to_token(TaskId::TAS, label, layout), PositionRole::TasFrameClass);
  return seq;
}

/// Position i carries the boundary token iff a boundary falls inside clip
/// frame i's time span.
inline TargetSequence tokenize_gebd(std::span<const double> boundaries, const Window& window,
                                    const VocabLayout& layout) {
  std::vector<bool> hit(static_cast<std::size_t>(window.frame_count), false);
  const double dt = window.frame_span();
  for (double b : boundaries) {
    if (b < window.start_time || b >= window.end_time()) continue;
    auto i = static_cast<long>(std::floor((b - window.start_time) / dt));
    i = std::clamp<long>(i, 0, window.frame_count - 1);
    hit[static_cast<std::size_t>(i)] = true;
  }
  auto seq = detail::begin_sequence(TaskId::GEBD, layout);
  for (bool h : hit)
    seq.push(h ? layout.gebd_boundary_index : layout.gebd_background_index,
             PositionRole::GebdFrameBinary);
  return seq;
}

/// `token_probs[j]` is the probability the generator assigned to tokens[j];
/// a triple's score is the probability of its class token.
inline std::vector<TadInstance> detokenize_tad(const TargetSequence& seq,
                                               std::span<const double> token_probs,
                                               const Window& window, const VocabLayout& layout) {
  detail::require_prompt(seq, TaskId::TAD, layout);
  if (token_probs.size() != seq.tokens.size())
    throw InvalidArgument("token_probs length differs from token count");
  std::vector<TadInstance> out;
  std::size_t j = 1;
  const auto& tok = seq.tokens;
  while (true) {
    if (j >= tok.size()) throw DecodeError("TAD sequence missing EOS");
    if (tok[j] == layout.eos_index) {
      if (j + 1 != tok.size()) throw DecodeError("tokens after EOS");
      break;
    }
    if (j + 2 >= tok.size()) throw DecodeError("incomplete TAD triple");
    const Token a = tok[j], b = tok[j + 1], c = tok[j + 2];
    if (!layout.is_time(a) || !layout.is_time(b) || !layout.is_tad_class(c))
      throw DecodeError("illegal token inside TAD triple at position " + std::to_string(j));
    if (a < b) {
      TadInstance inst;
      inst.start = window.start_time + token_to_time(a, layout) * window.duration;
      inst.end = window.start_time + token_to_time(b, layout) * window.duration;
      inst.class_id = token_to_class(c, layout).second;
      inst.score = token_probs[j + 2];
      out.push_back(inst);
    }
    j += 3;
  }
  return out;
}

/// Run-length stitching of per-frame labels into maximal segments.
inline std::vector<TasSegment> stitch_segments(std::span<const int> labels) {
  std::vector<TasSegment> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!out.empty() && out.back().class_id == labels[i]) {
      out.back().end_frame = static_cast<int>(i);
    } else {
      out.push_back({static_cast<int>(i), static_cast<int>(i), labels[i]});
    }
  }
  return out;
}

inline std::vector<int> tas_frame_labels(const TargetSequence& seq, const VocabLayout& layout) {
  detail::require_prompt(seq, TaskId::TAS, layout);
  std::vector<int> labels;
  labels.reserve(seq.tokens.size() - 1);
  for (std::size_t j = 1; j < seq.tokens.size(); ++j) {
    if (!layout.is_tas_class(seq.tokens[j]))
      throw DecodeError("non-TAS token at position " + std::to_string(j));
    labels.push_back(seq.tokens[j] - layout.tas_class_begin());
  }
  return labels;
}

inline std::vector<TasSegment> detokenize_tas(const TargetSequence& seq, const VocabLayout& layout) {
  const auto labels = tas_frame_labels(seq, layout);
  return stitch_segments(labels);
}

/// Per-frame labels of a dense TAD sequence; background frames are -1.
inline std::vector<int> tad_dense_frame_labels(const TargetSequence& seq, const VocabLayout& layout) {
  detail::require_prompt(seq, TaskId::TAD, layout);
  std::vector<int> labels;
  for (std::size_t j = 1; j < seq.tokens.size(); ++j) {
    const Token t = seq.tokens[j];
    if (t == layout.gebd_background_index) {
      labels.push_back(-1);
    } else if (layout.is_tad_class(t)) {
      labels.push_back(t - layout.tad_class_begin());
    } else {
      throw DecodeError("illegal dense TAD token at position " + std::to_string(j));
    }
  }
  return labels;
}

/// Dense TAD decoding: each maximal non-background run becomes an instance
/// scored by the mean probability of its tokens.
inline std::vector<TadInstance> detokenize_tad_dense(const TargetSequence& seq,
                                                     std::span<const double> token_probs,
                                                     const Window& window,
                                                     const VocabLayout& layout) {
  const auto labels = tad_dense_frame_labels(seq, layout);
  if (token_probs.size() != seq.tokens.size())
    throw InvalidArgument("token_probs length differs from token count");
  std::vector<TadInstance> out;
  const double dt = window.duration / static_cast<double>(labels.size());
  for (const auto& seg : stitch_segments(labels)) {
    if (seg.class_id < 0) continue;
    double score = 0.0;
    for (int i = seg.start_frame; i <= seg.end_frame; ++i)
      score += token_probs[static_cast<std::size_t>(i) + 1];
    out.push_back({window.start_time + seg.start_frame * dt,
                   window.start_time + (seg.end_frame + 1) * dt, seg.class_id,
                   score / seg.length()});
  }
  return out;
}

/// Each boundary-token position i maps to the center of clip frame i.
inline std::vector<GebdBoundary> detokenize_gebd(const TargetSequence& seq, const Window& window,
                                                 const VocabLayout& layout,
                                                 std::span<const double> token_probs = {}) {
  detail::require_prompt(seq, TaskId::GEBD, layout);
  std::vector<GebdBoundary> out;
  const std::size_t frames = seq.tokens.size() - 1;
  for (std::size_t j = 1; j < seq.tokens.size(); ++j) {
    const Token t = seq.tokens[j];
    if (!layout.is_gebd(t)) throw DecodeError("illegal GEBD token at position " + std::to_string(j));
    if (t != layout.gebd_boundary_index) continue;
    const double rel = (static_cast<double>(j - 1) + 0.5) / static_cast<double>(frames);
    out.push_back({window.start_time + rel * window.duration,
                   token_probs.empty() ? 1.0 : token_probs[j]});
  }
  return out;
}

/// Greedy per-class NMS: visit by descending score (ties by start time) and
/// keep an instance iff its IoU with every kept same-class instance is below
/// the threshold.
inline std::vector<TadInstance> nms_1d(std::vector<TadInstance> instances, double iou_threshold) {
  detail::require(iou_threshold >= 0.0 && iou_threshold <= 1.0, "iou_threshold outside [0, 1]");
  std::stable_sort(instances.begin(), instances.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.start < b.start;
  });
  std::vector<TadInstance> kept;
  for (const auto& cand : instances) {
    bool keep = true;
    for (const auto& k : kept) {
      if (k.class_id == cand.class_id && temporal_iou(k, cand) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(cand);
  }
  return kept;
}

/// Decoded output of one inference window, in video time.
struct WindowOutput {
  Window window;
  std::vector<TadInstance> tad;
  /// TAS: one label per clip frame, optionally with an L x C_tas row-major
  /// matrix of class probabilities.
  std::vector<int> tas_labels;
  std::vector<double> tas_probs;
  std::vector<GebdBoundary> gebd;
};

/// Number of frames on a video's strided frame grid.
inline int video_frame_count(double video_duration, double frame_rate) {
  return std::max(1, static_cast<int>(std::lround(video_duration * frame_rate)));
}

namespace detail {

inline std::vector<TasSegment> merge_tas(std::span<const WindowOutput> windows, double video_duration) {
  if (windows.empty()) throw DecodeError("no windows to merge");
  const double rate = windows.front().window.frame_rate;
  const int frames = video_frame_count(video_duration, rate);
  const bool with_probs = std::all_of(windows.begin(), windows.end(),
                                      [](const auto& w) { return !w.tas_probs.empty(); });
  int classes = 0;
  for (const auto& w : windows) {
    for (int l : w.tas_labels) classes = std::max(classes, l + 1);
    if (with_probs && !w.tas_labels.empty())
      classes = std::max(classes, static_cast<int>(w.tas_probs.size() / w.tas_labels.size()));
  }
  std::vector<double> acc(static_cast<std::size_t>(frames) * classes, 0.0);
  std::vector<int> cover(static_cast<std::size_t>(frames), 0);
  for (const auto& w : windows) {
    const long first = w.window.first_frame();
    const std::size_t n = w.tas_labels.size();
    const std::size_t wc = with_probs && n ? w.tas_probs.size() / n : 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long f = first + static_cast<long>(i);
      if (f < 0 || f >= frames) continue;
      auto* row = &acc[static_cast<std::size_t>(f) * classes];
      if (with_probs) {
        for (std::size_t c = 0; c < wc; ++c) row[c] += w.tas_probs[i * wc + c];
      } else {
        row[w.tas_labels[i]] += 1.0;
      }
      ++cover[static_cast<std::size_t>(f)];
    }
  }
  std::vector<int> labels(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    if (cover[static_cast<std::size_t>(f)] == 0)
      throw DecodeError("frame " + std::to_string(f) + " not covered by any window");
    const auto* row = &acc[static_cast<std::size_t>(f) * classes];
    labels[static_cast<std::size_t>(f)] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return stitch_segments(labels);
}

/// Pools boundaries and replaces every run of boundaries spaced closer than
/// `frame_span` by the run's mean.
inline std::vector<GebdBoundary> merge_gebd(std::span<const WindowOutput> windows,
                                            double video_duration) {
  std::vector<GebdBoundary> all;
  double span = 0.0;
  for (const auto& w : windows) {
    span = std::max(span, w.window.frame_span());
    all.insert(all.end(), w.gebd.begin(), w.gebd.end());
  }
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  std::vector<GebdBoundary> out;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i + 1;
    double sum = all[i].timestamp, best = all[i].score;
    while (j < all.size() && all[j].timestamp - all[j - 1].timestamp < span) {
      sum += all[j].timestamp;
      best = std::max(best, all[j].score);
      ++j;
    }
    const double t = sum / static_cast<double>(j - i);
    out.push_back({std::clamp(t, 0.0, video_duration), best});
    i = j;
  }
  return out;
}

}  // namespace detail

/// Combines per-window outputs of one video into video-level predictions.
inline PredictionSet merge_windows(TaskId task, std::span<const WindowOutput> windows,
                                   double video_duration, double nms_threshold = 0.5) {
  PredictionSet out;
  out.task = task;
  switch (task) {
    case TaskId::TAD: {
      std::vector<TadInstance> pooled;
      for (const auto& w : windows)
        for (auto inst : w.tad) {
          inst.start = std::clamp(inst.start, 0.0, video_duration);
          inst.end = std::clamp(inst.end, 0.0, video_duration);
          if (inst.end > inst.start) pooled.push_back(inst);
        }
      out.tad = nms_1d(std::move(pooled), nms_threshold);
      break;
    }
    case TaskId::TAS: out.tas = detail::merge_tas(windows, video_duration); break;
    case TaskId::GEBD: out.gebd = detail::merge_gebd(windows, video_duration); break;
  }
  return out;
}

}  // namespace tseq
