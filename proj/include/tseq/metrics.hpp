// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocols: TAD mAP over tIoU thresholds, TAS segmental F1 / Edit /
// frame accuracy, GEBD F1 over relative-distance thresholds.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tseq/codec.hpp"
#include "tseq/error.hpp"

namespace tseq {

struct MetricRow {
  std::string name;
  double value = 0.0;
};

/// One row per threshold (or sub-metric) followed by the summary row.
struct MetricReport {
  TaskId task = TaskId::TAD;
  std::vector<MetricRow> rows;

  double at(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r.value;
    throw InvalidArgument("no metric row named " + name);
  }

  std::string table() const {
    std::string head = "| ", line = "|", vals = "| ";
    for (const auto& r : rows) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%8s", r.name.c_str());
      head += std::string(buf) + " | ";
      line += "----------|";
      std::snprintf(buf, sizeof buf, "%8.4f", r.value);
      vals += std::string(buf) + " | ";
    }
    return head + "\n" + line + "\n" + vals + "\n";
  }
};

inline std::string threshold_label(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", t);
  return buf;
}

inline void check_thresholds(std::span<const double> t, bool unit_interval) {
  detail::require(!t.empty(), "threshold list is empty");
  for (std::size_t i = 0; i < t.size(); ++i) {
    detail::require(t[i] > 0.0 && (!unit_interval || t[i] <= 1.0), "threshold out of range");
    detail::require(i == 0 || t[i] > t[i - 1], "thresholds must be strictly ascending");
  }
}

// ---------------------------------------------------------------------------
// TAD

struct TadEvalConfig {
  std::vector<double> tiou_thresholds{0.3, 0.4, 0.5, 0.6, 0.7};
};

/// All-point interpolated AP from a score-ordered TP/FP list. When
/// `closes_tie` is given, precision and recall are only taken at ranks where
/// it is nonzero, so equally scored predictions enter the curve together.
inline double average_precision(std::span<const char> tp_in_rank_order, std::size_t positives,
                                std::span<const char> closes_tie = {}) {
  if (positives == 0) return 0.0;
  const std::size_t n = tp_in_rank_order.size();
  if (!closes_tie.empty() && closes_tie.size() != n) throw InvalidArgument("closes_tie length mismatch");
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_in_rank_order[i] != 0;
    if (!closes_tie.empty() && closes_tie[i] == 0 && i + 1 < n) continue;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev) * prec[i];
    prev = rec[i];
  }
  return ap;
}

/// AP for one class at one threshold over the corpus.
inline double class_average_precision(std::span<const std::vector<TadInstance>> predictions,
                                      std::span<const std::vector<TadInstance>> ground_truth, int class_id,
                                      double threshold) {
  struct Entry {
    std::size_t video;
    const TadInstance* inst;
  };
  std::vector<Entry> preds;
  std::size_t positives = 0;
  std::vector<std::vector<const TadInstance*>> gts(ground_truth.size());
  for (std::size_t v = 0; v < ground_truth.size(); ++v)
    for (const auto& g : ground_truth[v])
      if (g.class_id == class_id) {
        gts[v].push_back(&g);
        ++positives;
      }
  for (std::size_t v = 0; v < predictions.size(); ++v)
    for (const auto& p : predictions[v])
      if (p.class_id == class_id) preds.push_back({v, &p});
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Entry& a, const Entry& b) { return a.inst->score > b.inst->score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t v = 0; v < gts.size(); ++v) used[v].assign(gts[v].size(), false);
  std::vector<char> tp(preds.size(), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& e = preds[i];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts[e.video].size(); ++j) {
      if (used[e.video][j]) continue;
      const double iou = temporal_iou(*e.inst, *gts[e.video][j]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= threshold) {
      used[e.video][best_j] = true;
      tp[i] = 1;
    }
  }
  std::vector<char> closes(preds.size(), 1);
  for (std::size_t i = 0; i + 1 < preds.size(); ++i) closes[i] = preds[i].inst->score != preds[i + 1].inst->score;
  return average_precision(tp, positives, closes);
}

/// Rows: mAP at each threshold, then "Avg". mAP averages over classes that
/// have at least one ground-truth instance.
inline MetricReport tad_map(std::span<const std::vector<TadInstance>> predictions,
                            std::span<const std::vector<TadInstance>> ground_truth,
                            const TadEvalConfig& cfg = {}) {
  check_thresholds(cfg.tiou_thresholds, true);
  if (predictions.size() != ground_truth.size())
    throw InvalidArgument("prediction and ground-truth video counts differ");
  for (const auto& v : predictions)
    for (const auto& p : v)
      if (!std::isfinite(p.score)) throw InvalidArgument("TAD prediction without a finite score");
  std::vector<int> classes;
  for (const auto& v : ground_truth)
    for (const auto& g : v) classes.push_back(g.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  MetricReport rep;
  rep.task = TaskId::TAD;
  double sum = 0.0;
  for (double t : cfg.tiou_thresholds) {
    double m = 0.0;
    for (int c : classes) m += class_average_precision(predictions, ground_truth, c, t);
    m = classes.empty() ? 0.0 : m / static_cast<double>(classes.size());
    rep.rows.push_back({threshold_label(t), m});
    sum += m;
  }
  rep.rows.push_back({"Avg", sum / static_cast<double>(cfg.tiou_thresholds.size())});
  return rep;
}

// ---------------------------------------------------------------------------
// TAS

inline void check_tiling(std::span<const TasSegment> segs, std::size_t frames) {
  int next = 0;
  for (const auto& s : segs) {
    if (s.start_frame != next || s.end_frame < s.start_frame)
      throw InvalidArgument("predicted segments do not tile the frame range (gap or overlap at frame " +
                            std::to_string(next) + ")");
    next = s.end_frame + 1;
  }
  if (static_cast<std::size_t>(next) != frames)
    throw InvalidArgument("predicted segments cover " + std::to_string(next) + " of " + std::to_string(frames) +
                          " frames");
}

inline std::size_t levenshtein(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

/// 100 * (1 - edit distance / longer length) between segment label strings.
inline double edit_score(std::span<const TasSegment> pred, std::span<const TasSegment> gt) {
  std::vector<int> a, b;
  for (const auto& s : pred) a.push_back(s.class_id);
  for (const auto& s : gt) b.push_back(s.class_id);
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 100.0;
  return 100.0 * (1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(longest));
}

inline double segment_iou(const TasSegment& a, const TasSegment& b) {
  const int inter = std::max(0, std::min(a.end_frame, b.end_frame) - std::max(a.start_frame, b.start_frame) + 1);
  const int uni = a.length() + b.length() - inter;
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

struct OverlapCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Each predicted segment, in order, is a TP iff its best IoU with a
/// same-class, still unmatched ground-truth segment reaches the threshold.
inline OverlapCounts overlap_counts(std::span<const TasSegment> pred, std::span<const TasSegment> gt,
                                    double threshold) {
  OverlapCounts c;
  std::vector<bool> hit(gt.size(), false);
  for (const auto& p : pred) {
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (hit[j] || gt[j].class_id != p.class_id) continue;
      const double iou = segment_iou(p, gt[j]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= threshold) {
      hit[best_j] = true;
      ++c.tp;
    } else {
      ++c.fp;
    }
  }
  c.fn = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), false));
  return c;
}

inline double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

/// Rows: F1@k for each k, Edit, Acc; all percentages. F1 is computed from
/// corpus-level counts, Edit is the mean per-video score, Acc is over all frames.
inline MetricReport tas_scores(std::span<const std::vector<TasSegment>> predictions,
                               std::span<const std::vector<int>> ground_truth,
                               std::span<const int> overlap_percents = std::span<const int>()) {
  static const std::vector<int> kDefault{10, 25, 50};
  if (overlap_percents.empty()) overlap_percents = kDefault;
  if (predictions.size() != ground_truth.size())
    throw InvalidArgument("prediction and ground-truth video counts differ");
  std::vector<OverlapCounts> totals(overlap_percents.size());
  std::size_t correct = 0, frames = 0;
  double edit = 0.0;
  for (std::size_t v = 0; v < predictions.size(); ++v) {
    const auto& labels = ground_truth[v];
    check_tiling(predictions[v], labels.size());
    const auto gt = stitch_segments(labels);
    for (const auto& s : predictions[v])
      for (int f = s.start_frame; f <= s.end_frame; ++f) correct += labels[static_cast<std::size_t>(f)] == s.class_id;
    frames += labels.size();
    edit += edit_score(predictions[v], gt);
    for (std::size_t k = 0; k < overlap_percents.size(); ++k) {
      const auto c = overlap_counts(predictions[v], gt, overlap_percents[k] / 100.0);
      totals[k].tp += c.tp;
      totals[k].fp += c.fp;
      totals[k].fn += c.fn;
    }
  }
  MetricReport rep;
  rep.task = TaskId::TAS;
  for (std::size_t k = 0; k < overlap_percents.size(); ++k)
    rep.rows.push_back({"F1@" + std::to_string(overlap_percents[k]),
                        100.0 * f1_from_counts(totals[k].tp, totals[k].fp, totals[k].fn)});
  rep.rows.push_back({"Edit", predictions.empty() ? 0.0 : edit / static_cast<double>(predictions.size())});
  rep.rows.push_back({"Acc", frames == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(frames)});
  return rep;
}

// ---------------------------------------------------------------------------
// GEBD

struct GebdEvalConfig {
  std::vector<double> rel_dis_thresholds{0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5};
};

/// Maximum-cardinality matching in a bipartite graph given as adjacency
/// lists from left to right vertices (augmenting paths).
inline std::size_t max_bipartite_matching(const std::vector<std::vector<std::size_t>>& adj, std::size_t right) {
  std::vector<long> match_right(right, -1);
  std::vector<char> seen;
  std::function<bool(std::size_t)> augment = [&](std::size_t u) {
    for (std::size_t r : adj[u]) {
      if (seen[r]) continue;
      seen[r] = 1;
      if (match_right[r] < 0 || augment(static_cast<std::size_t>(match_right[r]))) {
        match_right[r] = static_cast<long>(u);
        return true;
      }
    }
    return false;
  };
  std::size_t n = 0;
  for (std::size_t u = 0; u < adj.size(); ++u) {
    seen.assign(right, 0);
    n += augment(u);
  }
  return n;
}

/// Rows: F1 at each Rel.Dis threshold, then "Avg".
inline MetricReport gebd_f1(std::span<const std::vector<double>> predictions,
                            std::span<const std::vector<double>> ground_truth,
                            std::span<const double> reference_durations, const GebdEvalConfig& cfg = {}) {
  check_thresholds(cfg.rel_dis_thresholds, false);
  if (predictions.size() != ground_truth.size() || predictions.size() != reference_durations.size())
    throw InvalidArgument("prediction, ground-truth and duration counts differ");
  for (double d : reference_durations)
    if (!(d > 0.0)) throw InvalidArgument("reference duration must be > 0");
  MetricReport rep;
  rep.task = TaskId::GEBD;
  double sum = 0.0;
  for (double t : cfg.rel_dis_thresholds) {
    std::size_t tp = 0, np = 0, ng = 0;
    for (std::size_t v = 0; v < predictions.size(); ++v) {
      const auto& p = predictions[v];
      const auto& g = ground_truth[v];
      std::vector<std::vector<std::size_t>> adj(p.size());
      for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < g.size(); ++j)
          if (std::abs(p[i] - g[j]) / reference_durations[v] <= t) adj[i].push_back(j);
      tp += max_bipartite_matching(adj, g.size());
      np += p.size();
      ng += g.size();
    }
    const double f1 = f1_from_counts(tp, np - tp, ng - tp);
    rep.rows.push_back({threshold_label(t), f1});
    sum += f1;
  }
  rep.rows.push_back({"Avg", sum / static_cast<double>(cfg.rel_dis_thresholds.size())});
  return rep;
}

}  // namespace tseq
