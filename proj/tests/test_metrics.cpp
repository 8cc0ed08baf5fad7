// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "tseq/metrics.hpp"

namespace tseq {
namespace {

constexpr double kOracleTol = 1e-9;
constexpr int kRandomInstances = 150;

using VideoTad = std::vector<TadInstance>;

TEST(TadMap, ExactMatchIsOne) {
  const std::vector<VideoTad> gt{{{2, 6, 1, 1.0}}};
  const auto rep = tad_map(std::span<const VideoTad>(gt), std::span<const VideoTad>(gt));
  ASSERT_EQ(rep.rows.size(), 6u);
  for (const auto& r : rep.rows) EXPECT_DOUBLE_EQ(r.value, 1.0) << r.name;
  EXPECT_EQ(rep.rows.back().name, "Avg");
}

TEST(TadMap, LowerScoredMatchGivesHalf) {
  const std::vector<VideoTad> gt{{{2, 6, 1, 1.0}}};
  const std::vector<VideoTad> pred{{{10, 12, 1, 0.9}, {2, 6, 1, 0.5}}};
  const auto rep = tad_map(std::span<const VideoTad>(pred), std::span<const VideoTad>(gt));
  for (std::size_t i = 0; i + 1 < rep.rows.size(); ++i) EXPECT_DOUBLE_EQ(rep.rows[i].value, 0.5);
}

TEST(TadMap, ClassesWithoutGroundTruthExcluded) {
  const std::vector<VideoTad> gt{{{2, 6, 1, 1.0}}};
  const std::vector<VideoTad> pred{{{2, 6, 1, 0.9}, {2, 6, 3, 0.95}}};
  EXPECT_DOUBLE_EQ(tad_map(std::span<const VideoTad>(pred), std::span<const VideoTad>(gt)).at("Avg"), 1.0);
}

TEST(TadMap, Errors) {
  const std::vector<VideoTad> gt{{{2, 6, 1, 1.0}}};
  const std::vector<VideoTad> nan{{{2, 6, 1, std::nan("")}}};
  EXPECT_THROW(tad_map(std::span<const VideoTad>(nan), std::span<const VideoTad>(gt)), InvalidArgument);
  const std::vector<VideoTad> two(2);
  EXPECT_THROW(tad_map(std::span<const VideoTad>(two), std::span<const VideoTad>(gt)), InvalidArgument);
  TadEvalConfig bad;
  bad.tiou_thresholds = {0.5, 0.3};
  EXPECT_THROW(tad_map(std::span<const VideoTad>(gt), std::span<const VideoTad>(gt), bad), InvalidArgument);
}

TEST(TadMap, FineActionThresholds) {
  TadEvalConfig cfg;
  cfg.tiou_thresholds.clear();
  for (int i = 0; i < 10; ++i) cfg.tiou_thresholds.push_back(0.5 + 0.05 * i);
  const std::vector<VideoTad> gt{{{2, 6, 1, 1.0}}};
  EXPECT_EQ(tad_map(std::span<const VideoTad>(gt), std::span<const VideoTad>(gt), cfg).rows.size(), 11u);
}

struct TadInstanceSet {
  std::vector<VideoTad> pred, gt;
};

TadInstanceSet random_tad(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TadInstanceSet s;
  const std::size_t videos = 1 + rng() % 5;
  for (std::size_t v = 0; v < videos; ++v) {
    VideoTad g, p;
    const std::size_t ng = rng() % 5;
    for (std::size_t i = 0; i < ng; ++i) {
      const double st = 30 * u(rng);
      g.push_back({st, st + 1 + 5 * u(rng), static_cast<int>(rng() % 3), 1.0});
    }
    const std::size_t np = rng() % 11;
    for (std::size_t i = 0; i < np; ++i) {
      if (!g.empty() && rng() % 2) {
        const auto& t = g[rng() % g.size()];
        const double jitter = (u(rng) - 0.5) * (t.end - t.start);
        p.push_back({t.start + jitter, t.end + jitter * u(rng), rng() % 4 ? t.class_id : 2,
                     std::round(u(rng) * 8) / 8});
      } else {
        const double st = 30 * u(rng);
        p.push_back({st, st + 1 + 5 * u(rng), static_cast<int>(rng() % 3), std::round(u(rng) * 8) / 8});
      }
    }
    s.gt.push_back(g);
    s.pred.push_back(p);
  }
  return s;
}

TEST(TadMap, MatchesOracleAndIsMonotone) {
  std::mt19937_64 rng(100);
  const TadEvalConfig cfg;
  for (int trial = 0; trial < kRandomInstances; ++trial) {
    const auto s = random_tad(rng);
    const auto rep = tad_map(std::span<const VideoTad>(s.pred), std::span<const VideoTad>(s.gt), cfg);
    double sum = 0.0;
    for (std::size_t k = 0; k < cfg.tiou_thresholds.size(); ++k) {
      const double expect = oracle::mean_ap(s.pred, s.gt, cfg.tiou_thresholds[k]);
      EXPECT_NEAR(rep.rows[k].value, expect, kOracleTol) << "trial " << trial << " thr " << rep.rows[k].name;
      if (k) {
        EXPECT_LE(rep.rows[k].value, rep.rows[k - 1].value + kOracleTol) << "trial " << trial;
      }
      EXPECT_GE(rep.rows[k].value, 0.0);
      EXPECT_LE(rep.rows[k].value, 1.0);
      sum += expect;
    }
    EXPECT_NEAR(rep.at("Avg"), sum / 5, kOracleTol);
  }
}

TEST(TadMap, VideoOrderAndSpuriousPredictions) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_tad(rng);
    const double base = tad_map(std::span<const VideoTad>(s.pred), std::span<const VideoTad>(s.gt)).at("Avg");
    auto rp = s.pred, rg = s.gt;
    std::reverse(rp.begin(), rp.end());
    std::reverse(rg.begin(), rg.end());
    EXPECT_NEAR(tad_map(std::span<const VideoTad>(rp), std::span<const VideoTad>(rg)).at("Avg"), base, 1e-12);
    s.pred[0].push_back({500, 501, 0, 0.0});
    EXPECT_LE(tad_map(std::span<const VideoTad>(s.pred), std::span<const VideoTad>(s.gt)).at("Avg"), base + 1e-12);
  }
}

using Segs = std::vector<TasSegment>;
using Labels = std::vector<int>;

Segs tile(const Labels& labels) { return stitch_segments(labels); }

Labels repeat(std::initializer_list<std::pair<int, int>> runs) {
  Labels out;
  for (auto [cls, n] : runs) out.insert(out.end(), static_cast<std::size_t>(n), cls);
  return out;
}

TEST(TasScores, IdenticalIsPerfect) {
  const std::vector<Labels> gt{repeat({{0, 10}, {2, 5}, {1, 7}})};
  const std::vector<Segs> pred{tile(gt[0])};
  const auto rep = tas_scores(std::span<const Segs>(pred), std::span<const Labels>(gt));
  ASSERT_EQ(rep.rows.size(), 5u);
  for (const auto& r : rep.rows) EXPECT_DOUBLE_EQ(r.value, 100.0) << r.name;
}

TEST(TasScores, HalfAndHalfExample) {
  const std::vector<Labels> gt{repeat({{0, 50}, {1, 50}})};
  const std::vector<Segs> pred{tile(repeat({{0, 100}}))};
  const auto rep = tas_scores(std::span<const Segs>(pred), std::span<const Labels>(gt));
  EXPECT_DOUBLE_EQ(rep.at("Acc"), 50.0);
  EXPECT_DOUBLE_EQ(rep.at("Edit"), 50.0);
  EXPECT_NEAR(rep.at("F1@50"), 100.0 * 2.0 / 3.0, 1e-12);
}

TEST(TasScores, RejectsBadTiling) {
  const std::vector<Labels> gt{repeat({{0, 10}})};
  const std::vector<Segs> gap{{{0, 3, 0}, {5, 9, 0}}};
  EXPECT_THROW(tas_scores(std::span<const Segs>(gap), std::span<const Labels>(gt)), InvalidArgument);
  const std::vector<Segs> overlap{{{0, 5, 0}, {5, 9, 0}}};
  EXPECT_THROW(tas_scores(std::span<const Segs>(overlap), std::span<const Labels>(gt)), InvalidArgument);
  const std::vector<Segs> shortfall{{{0, 8, 0}}};
  EXPECT_THROW(tas_scores(std::span<const Segs>(shortfall), std::span<const Labels>(gt)), InvalidArgument);
}

Labels random_labels(std::mt19937_64& rng, std::size_t frames, std::size_t max_segments, int classes) {
  const std::size_t k = 1 + rng() % max_segments;
  std::vector<std::size_t> cuts;
  for (std::size_t i = 1; i < k; ++i) cuts.push_back(1 + rng() % (frames - 1));
  std::sort(cuts.begin(), cuts.end());
  Labels out(frames);
  std::size_t c = 0;
  int cls = static_cast<int>(rng() % static_cast<unsigned>(classes));
  for (std::size_t f = 0; f < frames; ++f) {
    while (c < cuts.size() && cuts[c] == f) {
      cls = static_cast<int>(rng() % static_cast<unsigned>(classes));
      ++c;
    }
    out[f] = cls;
  }
  return out;
}

TEST(TasScores, MatchesOracleAndIsMonotone) {
  std::mt19937_64 rng(200);
  const std::vector<int> ks{10, 25, 50, 75};
  for (int trial = 0; trial < kRandomInstances; ++trial) {
    const std::size_t videos = 1 + rng() % 4;
    std::vector<Labels> gt;
    std::vector<Segs> pred;
    oracle::Counts totals[4];
    double edit = 0.0, correct = 0.0, frames = 0.0;
    for (std::size_t v = 0; v < videos; ++v) {
      const std::size_t n = 20 + rng() % 60;
      gt.push_back(random_labels(rng, n, 10, 3));
      const Labels pl = random_labels(rng, n, 10, 3);
      pred.push_back(tile(pl));
      const auto og = oracle::runs(gt.back()), op = oracle::runs(pl);
      edit += oracle::edit(op, og);
      for (std::size_t f = 0; f < n; ++f) correct += pl[f] == gt.back()[f];
      frames += static_cast<double>(n);
      for (std::size_t k = 0; k < ks.size(); ++k) {
        const auto c = oracle::f1_counts(op, og, ks[k] / 100.0);
        totals[k].tp += c.tp;
        totals[k].fp += c.fp;
        totals[k].fn += c.fn;
      }
    }
    const auto rep = tas_scores(std::span<const Segs>(pred), std::span<const Labels>(gt), ks);
    for (std::size_t k = 0; k < ks.size(); ++k) {
      const auto& t = totals[k];
      const double expect = 100.0 * oracle::f1(t.tp, t.tp + t.fp, t.tp + t.fn);
      EXPECT_NEAR(rep.rows[k].value, expect, kOracleTol) << "trial " << trial << " k " << ks[k];
      if (k) {
        EXPECT_LE(rep.rows[k].value, rep.rows[k - 1].value + kOracleTol);
      }
    }
    EXPECT_NEAR(rep.at("Edit"), edit / static_cast<double>(videos), kOracleTol);
    EXPECT_NEAR(rep.at("Acc"), 100.0 * correct / frames, kOracleTol);
  }
}

TEST(TasScores, EditMatchesOracleOnLongStrings) {
  std::mt19937_64 rng(201);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> a(rng() % 12), b(rng() % 12);
    for (auto& x : a) x = static_cast<int>(rng() % 4);
    for (auto& x : b) x = static_cast<int>(rng() % 4);
    EXPECT_EQ(levenshtein(a, b), oracle::edit_distance(a, b));
  }
}

using Times = std::vector<double>;

TEST(GebdF1, ExactPredictionsArePerfect) {
  const std::vector<Times> gt{{1.0, 2.5, 4.0}};
  const std::vector<double> dur{5.0};
  const auto rep = gebd_f1(std::span<const Times>(gt), std::span<const Times>(gt), dur);
  ASSERT_EQ(rep.rows.size(), 11u);
  for (const auto& r : rep.rows) EXPECT_DOUBLE_EQ(r.value, 1.0);
}

TEST(GebdF1, RelativeDistanceExample) {
  const std::vector<Times> gt{{2.5}}, pred{{2.8}};
  const std::vector<double> dur{5.0};
  const auto rep = gebd_f1(std::span<const Times>(pred), std::span<const Times>(gt), dur);
  EXPECT_DOUBLE_EQ(rep.at("0.05"), 0.0);
  EXPECT_DOUBLE_EQ(rep.at("0.10"), 1.0);
}

TEST(GebdF1, EmptyPredictionsAndErrors) {
  const std::vector<Times> gt{{2.5}}, none{{}};
  const std::vector<double> dur{5.0}, zero{0.0};
  EXPECT_DOUBLE_EQ(gebd_f1(std::span<const Times>(none), std::span<const Times>(gt), dur).at("Avg"), 0.0);
  EXPECT_THROW(gebd_f1(std::span<const Times>(gt), std::span<const Times>(gt), zero), InvalidArgument);
}

TEST(GebdF1, MatchesExhaustiveOracleAndIsMonotone) {
  std::mt19937_64 rng(300);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const GebdEvalConfig cfg;
  for (int trial = 0; trial < kRandomInstances; ++trial) {
    const std::size_t videos = 1 + rng() % 3;
    std::vector<Times> p(videos), g(videos);
    std::vector<double> dur(videos);
    for (std::size_t v = 0; v < videos; ++v) {
      dur[v] = 2 + 10 * u(rng);
      for (std::size_t i = rng() % 9; i > 0; --i) g[v].push_back(dur[v] * u(rng));
      for (std::size_t i = rng() % 9; i > 0; --i) p[v].push_back(dur[v] * u(rng));
    }
    const auto rep = gebd_f1(std::span<const Times>(p), std::span<const Times>(g), dur, cfg);
    for (std::size_t k = 0; k < cfg.rel_dis_thresholds.size(); ++k) {
      double tp = 0, np = 0, ng = 0;
      for (std::size_t v = 0; v < videos; ++v) {
        tp += static_cast<double>(oracle::exhaustive_matching(p[v], g[v], dur[v], cfg.rel_dis_thresholds[k]));
        np += static_cast<double>(p[v].size());
        ng += static_cast<double>(g[v].size());
      }
      EXPECT_NEAR(rep.rows[k].value, oracle::f1(tp, np, ng), kOracleTol) << "trial " << trial;
      if (k) {
        EXPECT_GE(rep.rows[k].value, rep.rows[k - 1].value - kOracleTol);
      }
    }
  }
}

TEST(GebdF1, SpuriousPredictionNeverHelps) {
  std::mt19937_64 rng(301);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Times> p{{}}, g{{}};
    const std::vector<double> dur{10.0};
    for (int i = 0; i < 5; ++i) {
      g[0].push_back(10 * u(rng));
      p[0].push_back(10 * u(rng));
    }
    const auto before = gebd_f1(std::span<const Times>(p), std::span<const Times>(g), dur);
    p[0].push_back(1e6);
    const auto spurious = gebd_f1(std::span<const Times>(p), std::span<const Times>(g), dur);
    for (std::size_t k = 0; k < before.rows.size(); ++k) EXPECT_LE(spurious.rows[k].value, before.rows[k].value);
  }
}

TEST(Report, TableLayout) {
  const std::vector<Times> gt{{2.5}};
  const std::vector<double> dur{5.0};
  const auto table = gebd_f1(std::span<const Times>(gt), std::span<const Times>(gt), dur).table();
  EXPECT_NE(table.find("0.05"), std::string::npos);
  EXPECT_NE(table.find("Avg"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
}

}  // namespace
}  // namespace tseq
