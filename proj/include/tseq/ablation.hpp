// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment runs on synthetic data and the three ablation
// harnesses: TAD loss weighting, dense vs sparse TAD targets, and the GEBD
// balance strategy under joint training.

#pragma once

#include <array>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "tseq/train.hpp"

namespace tseq {

using ExperimentData = std::array<std::optional<TaskData>, 3>;

/// Synthetic train/test splits for every enabled task.
inline ExperimentData generate_experiment_data(const ExperimentConfig& c) {
  ExperimentData out;
  for (auto t : c.enabled_tasks()) out[static_cast<std::size_t>(t)] = generate_task_data(c, t);
  return out;
}

struct RunOutcome {
  std::vector<EpochLog> log;
  std::size_t parameter_count = 0;
  std::array<std::optional<MetricReport>, 3> reports;
  Seq2SeqModel<float> model;

  double headline(TaskId t) const { return headline_metric(reports[static_cast<std::size_t>(t)].value()); }
};

/// Trains on the enabled tasks' training splits and evaluates each on its test split.
inline RunOutcome run_experiment(const ExperimentConfig& c, const ExperimentData& data,
                                 const EpochCallback& on_epoch = {}) {
  std::array<const Dataset*, 3> train{};
  for (auto t : c.enabled_tasks()) {
    const auto& d = data[static_cast<std::size_t>(t)];
    if (!d) throw ConfigError("no data generated for task " + std::string(task_name(t)));
    train[static_cast<std::size_t>(t)] = &d->train;
  }
  auto r = train_model(c, train, on_epoch);
  RunOutcome out{std::move(r.log), r.model.params().scalar_count(), {}, std::move(r.model)};
  for (auto t : c.enabled_tasks())
    out.reports[static_cast<std::size_t>(t)] = evaluate_model(c, out.model, data[static_cast<std::size_t>(t)]->test);
  return out;
}

/// True when both parameter stores hold bit-identical tensors.
inline bool bitwise_equal(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), sizeof(float) * static_cast<std::size_t>(a[i].size())) != 0) return false;
  }
  return true;
}

inline bool same_loss_trace(const std::vector<EpochLog>& a, const std::vector<EpochLog>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i].loss, &b[i].loss, sizeof(double)) != 0) return false;
  return true;
}

/// Single-task TAD configuration derived from `c`.
inline ExperimentConfig tad_only(ExperimentConfig c) {
  for (auto t : kAllTasks) c.task(t).enabled = t == TaskId::TAD;
  c.mixing = MixingMode::SingleTask;
  validate_experiment(c);
  return c;
}

struct AblationArm {
  std::string name;
  KeyValues overrides;
  RunOutcome outcome;
};

struct WeightLossAblation {
  std::vector<AblationArm> arms;  // weighted, cross_entropy, weighted with unit distance factor
  bool unit_matches_cross_entropy = false;
};

inline WeightLossAblation ablate_weight_loss(const ExperimentConfig& base, const EpochCallback& on_epoch = {}) {
  const ExperimentConfig c = tad_only(base);
  const auto data = generate_experiment_data(c);
  WeightLossAblation out;
  const std::vector<std::pair<std::string, KeyValues>> arms = {
      {"weighted", {{"loss.tad_loss", "weighted"}, {"loss.unit_distance_weight", "false"}}},
      {"cross_entropy", {{"loss.tad_loss", "cross_entropy"}, {"loss.unit_distance_weight", "false"}}},
      {"weighted_unit_distance", {{"loss.tad_loss", "weighted"}, {"loss.unit_distance_weight", "true"}}},
  };
  for (const auto& [name, kv] : arms) {
    const auto arm = apply_key_values(c, kv);
    out.arms.push_back({name, kv, run_experiment(arm, data, on_epoch)});
  }
  const auto& ce = out.arms[1].outcome;
  const auto& unit = out.arms[2].outcome;
  out.unit_matches_cross_entropy =
      bitwise_equal(ce.model.params(), unit.model.params()) && same_loss_trace(ce.log, unit.log);
  return out;
}

struct ParadigmAblation {
  std::vector<AblationArm> arms;  // sparse, dense
};

inline ParadigmAblation ablate_tad_paradigm(const ExperimentConfig& base, const EpochCallback& on_epoch = {}) {
  const ExperimentConfig c = tad_only(base);
  const auto data = generate_experiment_data(c);
  ParadigmAblation out;
  for (const char* p : {"sparse", "dense"}) {
    const KeyValues kv = {{"tad_paradigm", p}};
    out.arms.push_back({p, kv, run_experiment(apply_key_values(c, kv), data, on_epoch)});
  }
  return out;
}

struct BalanceAblation {
  std::vector<AblationArm> arms;  // balance on, balance off
  int gebd_train_videos = 0;
};

/// Joint training with an enlarged GEBD training set, with and without the
/// balance strategy. Both arms see the same data.
inline BalanceAblation ablate_balance(const ExperimentConfig& base, int gebd_scale,
                                      const EpochCallback& on_epoch = {}) {
  if (base.mixing == MixingMode::SingleTask) throw ConfigError("balance ablation needs a joint mixing mode");
  if (!base.task(TaskId::GEBD).enabled) throw ConfigError("balance ablation needs GEBD enabled");
  if (gebd_scale < 1) throw ConfigError("GEBD scale must be >= 1");
  ExperimentConfig c = base;
  c.task(TaskId::GEBD).train_videos *= gebd_scale;
  const auto data = generate_experiment_data(c);
  BalanceAblation out;
  out.gebd_train_videos = c.task(TaskId::GEBD).train_videos;
  for (const char* b : {"true", "false"}) {
    const KeyValues kv = {{"balance", b}};
    out.arms.push_back({std::string("balance=") + b, kv, run_experiment(apply_key_values(c, kv), data, on_epoch)});
  }
  return out;
}

/// One JSON line per arm: overrides, parameter count, final loss and the metric tables.
inline json arm_record(const std::string& ablation, const AblationArm& a) {
  json metrics = json::object();
  for (const auto& r : a.outcome.reports)
    if (r) metrics[std::string(task_name(r->task))] = report_record(*r)["metrics"];
  return {{"ablation", ablation},
          {"arm", a.name},
          {"overrides", a.overrides},
          {"parameters", a.outcome.parameter_count},
          {"final_loss", a.outcome.log.empty() ? 0.0 : a.outcome.log.back().loss},
          {"metrics", metrics}};
}

}  // namespace tseq
