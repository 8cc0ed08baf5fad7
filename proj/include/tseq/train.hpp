// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration, the training loop, sliding-window inference,
// evaluation and the ablation harnesses.

#pragma once

#include <array>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tseq/datapipe.hpp"
#include "tseq/io.hpp"
#include "tseq/losses.hpp"
#include "tseq/metrics.hpp"
#include "tseq/model.hpp"
#include "tseq/optim.hpp"

namespace tseq {

/// Per-task data location, crop geometry and synthetic generator settings.
struct TaskSetup {
  bool enabled = false;
  std::string dir;
  DatasetSpec spec;
  SynthOptions synth;
  int train_videos = 32;
  int test_videos = 16;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int epochs = 200;
  MixingMode mixing = MixingMode::SingleTask;
  bool balance = true;
  TadParadigm tad_paradigm = TadParadigm::Sparse;
  /// Batch size of mixed batches under data mixing.
  int mixed_batch_size = 8;
  ModelConfig model;
  LossConfig loss;
  AdamWConfig optim;
  int time_tokens = 150;
  int tad_classes = 20;
  int tas_classes = 48;
  std::array<TaskSetup, 3> tasks;
  double nms_threshold = 0.5;
  /// Inference window stride as a fraction of the window length.
  double infer_stride = 0.5;
  std::uint64_t data_seed = 0;
  std::string output_dir = "run";

  VocabLayout layout() const { return build_layout(time_tokens, tad_classes, tas_classes); }

  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.vocab_size = layout().total_size;
    m.max_target_len = m.frame_count + 1;
    return m;
  }

  TaskSetup& task(TaskId t) { return tasks[static_cast<std::size_t>(t)]; }
  const TaskSetup& task(TaskId t) const { return tasks[static_cast<std::size_t>(t)]; }

  std::vector<TaskId> enabled_tasks() const {
    std::vector<TaskId> out;
    for (auto t : kAllTasks)
      if (task(t).enabled) out.push_back(t);
    return out;
  }
};

/// Reference crop geometry and batch sizes per task.
inline ExperimentConfig default_experiment() {
  ExperimentConfig c;
  auto& tad = c.task(TaskId::TAD);
  tad.spec = {TaskId::TAD, 0, 30.0, 4, 20.0, 150, 4};
  tad.synth = {TaskId::TAD, 5, 30.0, 60.0, 0.2, 30.0, 32, 0, 2.0, 6.0, 1, 5};
  tad.dir = "data/tad";
  auto& tas = c.task(TaskId::TAS);
  tas.spec = {TaskId::TAS, 0, 15.0, 4, 40.0, 150, 32};
  tas.synth = {TaskId::TAS, 8, 60.0, 120.0, 0.2, 15.0, 32, 0, 5.0, 15.0, 1, 5};
  tas.dir = "data/tas";
  auto& gebd = c.task(TaskId::GEBD);
  gebd.spec = {TaskId::GEBD, 0, 30.0, 1, 5.0, 150, 32};
  gebd.synth = {TaskId::GEBD, 8, 8.0, 12.0, 0.2, 30.0, 32, 0, 0.8, 2.5, 1, 5};
  gebd.dir = "data/gebd";
  return c;
}

// ---------------------------------------------------------------------------
// Key-value mapping

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    errno = 0;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
      throw ConfigError("key " + key + ": '" + v + "' is not a number");
    out = static_cast<T>(d);
  } else {
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw ConfigError("key " + key + ": '" + v + "' is not an integer");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key " + key + ": '" + v + "' is not a boolean");
}

inline std::string fmt(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

inline std::string lower_task(TaskId t) {
  std::string s(task_name(t));
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

/// Binds every config key to a field, for both parsing and dumping.
template <class Visitor>
void visit_config(ExperimentConfig& c, Visitor&& v) {
  v.u64("seed", c.seed);
  v.i("epochs", c.epochs);
  v.custom("mixing", [&] { return std::string(mixing_name(c.mixing)); },
           [&](const std::string& s) { c.mixing = parse_mixing(s); });
  v.b("balance", c.balance);
  v.custom("tad_paradigm", [&] { return std::string(c.tad_paradigm == TadParadigm::Dense ? "dense" : "sparse"); },
           [&](const std::string& s) {
             if (s == "dense") c.tad_paradigm = TadParadigm::Dense;
             else if (s == "sparse") c.tad_paradigm = TadParadigm::Sparse;
             else throw ConfigError("tad_paradigm must be sparse or dense");
           });
  v.i("batch_size", c.mixed_batch_size);
  v.str("output_dir", c.output_dir);
  v.u64("data_seed", c.data_seed);
  v.i("model.input_dim", c.model.input_dim);
  v.i("model.dim", c.model.model_dim);
  v.i("model.encoder_layers", c.model.encoder_layers);
  v.i("model.decoder_layers", c.model.decoder_layers);
  v.i("model.heads", c.model.attention_heads);
  v.i("model.ff_dim", c.model.feedforward_dim);
  v.i("model.frame_count", c.model.frame_count);
  v.d("model.dropout", c.model.dropout_rate);
  v.d("loss.smooth_weight", c.loss.smooth_weight);
  v.custom("loss.tad_loss", [&] { return std::string(c.loss.tad_loss == TadLossKind::Weighted ? "weighted" : "cross_entropy"); },
           [&](const std::string& s) {
             if (s == "weighted") c.loss.tad_loss = TadLossKind::Weighted;
             else if (s == "cross_entropy") c.loss.tad_loss = TadLossKind::CrossEntropy;
             else throw ConfigError("loss.tad_loss must be weighted or cross_entropy");
           });
  v.b("loss.unit_distance_weight", c.loss.unit_distance_weight);
  v.b("loss.supervise_eos", c.loss.supervise_eos);
  v.d("loss.log_clamp", c.loss.log_clamp);
  v.d("optim.lr", c.optim.learning_rate);
  v.d("optim.beta1", c.optim.beta1);
  v.d("optim.beta2", c.optim.beta2);
  v.d("optim.epsilon", c.optim.epsilon);
  v.d("optim.weight_decay", c.optim.weight_decay);
  v.d("optim.clip_norm", c.optim.clip_norm);
  v.i("vocab.time_tokens", c.time_tokens);
  v.i("vocab.tad_classes", c.tad_classes);
  v.i("vocab.tas_classes", c.tas_classes);
  v.d("infer.nms", c.nms_threshold);
  v.d("infer.stride", c.infer_stride);
  for (auto t : kAllTasks) {
    auto& s = c.task(t);
    const std::string p = "data." + lower_task(t) + ".";
    v.b(p + "enabled", s.enabled);
    v.str(p + "dir", s.dir);
    v.d(p + "fps", s.spec.fps);
    v.i(p + "stride", s.spec.stride);
    v.i(p + "batch_size", s.spec.batch_size);
    const std::string g = "gen." + lower_task(t) + ".";
    v.i(g + "train_videos", s.train_videos);
    v.i(g + "test_videos", s.test_videos);
    v.i(g + "classes", s.synth.classes);
    v.d(g + "min_duration", s.synth.min_duration);
    v.d(g + "max_duration", s.synth.max_duration);
    v.d(g + "noise", s.synth.noise_level);
    v.d(g + "min_span", s.synth.min_span);
    v.d(g + "max_span", s.synth.max_span);
    v.i(g + "min_instances", s.synth.min_instances);
    v.i(g + "max_instances", s.synth.max_instances);
  }
}

struct Assigner {
  const KeyValues& kv;
  std::set<std::string> seen;

  const std::string* find(const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) return nullptr;
    seen.insert(k);
    return &it->second;
  }
  void i(const std::string& k, int& f) {
    if (auto* s = find(k)) f = parse_number<int>(k, *s);
  }
  void u64(const std::string& k, std::uint64_t& f) {
    if (auto* s = find(k)) f = parse_number<std::uint64_t>(k, *s);
  }
  void d(const std::string& k, double& f) {
    if (auto* s = find(k)) f = parse_number<double>(k, *s);
  }
  void b(const std::string& k, bool& f) {
    if (auto* s = find(k)) f = parse_bool(k, *s);
  }
  void str(const std::string& k, std::string& f) {
    if (auto* s = find(k)) f = *s;
  }
  template <class G, class S>
  void custom(const std::string& k, G&&, S&& set) {
    if (auto* s = find(k)) {
      try {
        set(*s);
      } catch (const InvalidArgument& e) {
        throw ConfigError("key " + k + ": " + e.what());
      }
    }
  }
};

struct Dumper {
  KeyValues out;
  void i(const std::string& k, int& f) { out[k] = std::to_string(f); }
  void u64(const std::string& k, std::uint64_t& f) { out[k] = std::to_string(f); }
  void d(const std::string& k, double& f) { out[k] = fmt(f); }
  void b(const std::string& k, bool& f) { out[k] = f ? "true" : "false"; }
  void str(const std::string& k, std::string& f) { out[k] = f; }
  template <class G, class S>
  void custom(const std::string& k, G&& get, S&&) {
    out[k] = get();
  }
};

}  // namespace detail

/// Validates cross-field constraints; throws ConfigError.
inline void validate_experiment(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.epochs < 0) fail("epochs must be >= 0");
  if (c.mixed_batch_size < 1) fail("batch_size must be >= 1");
  if (c.time_tokens < 1 || c.tad_classes < 1 || c.tas_classes < 1) fail("vocab counts must be >= 1");
  if (c.nms_threshold < 0.0 || c.nms_threshold > 1.0) fail("infer.nms must be in [0, 1]");
  if (!(c.infer_stride > 0.0 && c.infer_stride <= 1.0)) fail("infer.stride must be in (0, 1]");
  try {
    c.resolved_model().validate();
  } catch (const InvalidArgument& e) {
    fail(std::string("model: ") + e.what());
  }
  for (auto t : kAllTasks) {
    const auto& s = c.task(t);
    if (!s.enabled) continue;
    DatasetSpec spec = s.spec;
    spec.clip_frames = c.model.frame_count;
    try {
      spec.validate();
    } catch (const InvalidArgument& e) {
      fail("data." + detail::lower_task(t) + ": " + e.what());
    }
    if (s.synth.classes > (t == TaskId::TAD ? c.tad_classes : t == TaskId::TAS ? c.tas_classes : s.synth.classes))
      fail("gen." + detail::lower_task(t) + ".classes exceeds the vocabulary's class count");
  }
  if (c.mixing == MixingMode::SingleTask && c.enabled_tasks().size() != 1)
    fail("mixing = single_task needs exactly one enabled task");
  if (c.enabled_tasks().empty()) fail("no task enabled");
}

/// Applies `kv` on top of `base`. Unknown keys are rejected.
inline ExperimentConfig apply_key_values(ExperimentConfig base, const KeyValues& kv) {
  detail::Assigner a{kv, {}};
  detail::visit_config(base, a);
  for (const auto& [k, v] : kv)
    if (!a.seen.count(k)) throw ConfigError("unknown config key '" + k + "'");
  for (auto t : kAllTasks) {
    auto& s = base.task(t);
    s.spec.task = t;
    s.synth.task = t;
    s.spec.clip_frames = base.model.frame_count;
    s.spec.window_seconds = base.model.frame_count * s.spec.stride / s.spec.fps;
    s.synth.input_dim = base.model.input_dim;
    s.synth.fps = s.spec.fps;
    s.synth.direction_seed = base.data_seed;
  }
  base.loss.boundary_space = base.time_tokens;
  validate_experiment(base);
  return base;
}

inline KeyValues to_key_values(ExperimentConfig c) {
  detail::Dumper d;
  detail::visit_config(c, d);
  return d.out;
}

// ---------------------------------------------------------------------------
// Data generation

struct TaskData {
  Dataset train;
  Dataset test;
};

/// Train and test splits for one task; both share the class directions.
inline TaskData generate_task_data(const ExperimentConfig& c, TaskId t) {
  const auto& s = c.task(t);
  TaskData out;
  for (int split = 0; split < 2; ++split) {
    Rng rng(c.data_seed * 1000003ULL + static_cast<std::uint64_t>(t) * 17ULL + static_cast<std::uint64_t>(split));
    auto vids = synth_generate(s.synth, split == 0 ? s.train_videos : s.test_videos, rng);
    Dataset& ds = split == 0 ? out.train : out.test;
    ds.task = t;
    ds.classes = s.synth.classes;
    for (auto& sv : vids) {
      if (split == 1) sv.video.id = "test_" + sv.video.id;
      ds.videos.push_back(std::move(sv.video));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  std::size_t iterations = 0;
  double loss = 0.0;
  std::array<double, 3> task_loss{};
  std::array<std::size_t, 3> task_samples{};
  double seconds = 0.0;
};

inline json epoch_record(const EpochLog& e) {
  json tasks = json::object();
  for (auto t : kAllTasks) {
    const auto i = static_cast<std::size_t>(t);
    if (e.task_samples[i] == 0) continue;
    tasks[std::string(task_name(t))] = {{"loss", e.task_loss[i]}, {"samples", e.task_samples[i]}};
  }
  return {{"epoch", e.epoch}, {"iterations", e.iterations}, {"loss", e.loss}, {"tasks", tasks}, {"seconds", e.seconds}};
}

struct TrainResult {
  std::vector<EpochLog> log;
  Seq2SeqModel<float> model;
};

using EpochCallback = std::function<void(const EpochLog&, const Seq2SeqModel<float>&)>;

inline std::vector<PlanDataset> plan_datasets(const ExperimentConfig& c, const std::array<const Dataset*, 3>& data,
                                              std::vector<TaskId>& order) {
  std::vector<PlanDataset> out;
  order.clear();
  for (auto t : c.enabled_tasks()) {
    const Dataset* ds = data[static_cast<std::size_t>(t)];
    if (ds == nullptr || ds->videos.empty())
      throw ConfigError("no training videos for task " + std::string(task_name(t)));
    PlanDataset p;
    p.task = t;
    p.video_count = ds->videos.size();
    p.batch_size = static_cast<std::size_t>(c.task(t).spec.batch_size);
    out.push_back(p);
    order.push_back(t);
  }
  if (c.balance && c.mixing != MixingMode::SingleTask) out = apply_balance(std::move(out), c.mixing);
  return out;
}

inline void check_dataset_classes(const ExperimentConfig& c, const Dataset& ds) {
  const int cap = ds.task == TaskId::TAD ? c.tad_classes : ds.task == TaskId::TAS ? c.tas_classes : 2;
  if (ds.task != TaskId::GEBD && ds.classes > cap)
    throw ConfigError("dataset for " + std::string(task_name(ds.task)) + " has " + std::to_string(ds.classes) +
                      " classes but the vocabulary holds " + std::to_string(cap));
  for (const auto& v : ds.videos)
    if (v.features.cols() != c.model.input_dim)
      throw ConfigError("video " + v.id + " has feature dim " + std::to_string(v.features.cols()) +
                        ", config expects " + std::to_string(c.model.input_dim));
}

/// Runs the configured schedule for `epochs`. `data[t]` is the training split
/// for task t (nullptr when unused).
inline TrainResult train_model(const ExperimentConfig& c, const std::array<const Dataset*, 3>& data,
                               const EpochCallback& on_epoch = {}) {
  validate_experiment(c);
  const VocabLayout layout = c.layout();
  for (auto t : c.enabled_tasks())
    if (data[static_cast<std::size_t>(t)]) check_dataset_classes(c, *data[static_cast<std::size_t>(t)]);
  TrainResult res{{}, Seq2SeqModel<float>(c.resolved_model(), c.seed)};
  auto& model = res.model;
  AdamW<float> opt(model.params(), c.optim);
  std::vector<TaskId> order;
  const auto plans = plan_datasets(c, data, order);
  Rng plan_rng(c.seed * 4 + 1), crop_rng(c.seed * 4 + 2), drop_rng(c.seed * 4 + 3);

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const EpochPlan plan = plan_epoch(plans, c.mixing, static_cast<std::size_t>(c.mixed_batch_size), plan_rng);
    EpochLog log;
    log.epoch = epoch;
    log.iterations = plan.iterations.size();
    std::size_t seen = 0;
    for (const auto& it : plan.iterations) {
      std::vector<FeatureClip> clips;
      std::vector<TaskId> tasks;
      for (const auto& b : it.batches)
        for (const auto& s : b.samples) {
          const TaskId t = order[s.dataset];
          const auto& ds = *data[static_cast<std::size_t>(t)];
          clips.push_back(crop_random_window(ds.videos[s.video], c.task(t).spec, crop_rng));
          tasks.push_back(t);
        }
      if (clips.empty()) continue;
      std::vector<TrainingItem<float>> items;
      items.reserve(clips.size());
      for (const auto& clip : clips) items.push_back({&clip.features, make_target(clip, layout, c.tad_paradigm)});
      BatchResult<float> r;
      try {
        r = model.forward_backward(std::span<const TrainingItem<float>>(items), layout, c.loss,
                                   c.model.dropout_rate > 0.0 ? &drop_rng : nullptr);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what(), e.sample_index());
      }
      opt.step(model.params(), r.grads);
      if (!model.params().all_finite())
        throw NumericError("epoch " + std::to_string(epoch) + ": non-finite parameters after update");
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        const auto ti = static_cast<std::size_t>(tasks[k]);
        log.task_loss[ti] += r.item_losses[k];
        ++log.task_samples[ti];
        log.loss += r.item_losses[k];
      }
      seen += tasks.size();
    }
    if (seen) log.loss /= static_cast<double>(seen);
    for (std::size_t ti = 0; ti < 3; ++ti)
      if (log.task_samples[ti]) log.task_loss[ti] /= static_cast<double>(log.task_samples[ti]);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(log);
    if (on_epoch) on_epoch(log, model);
  }
  return res;
}

inline Checkpoint make_checkpoint(const ExperimentConfig& c, const Seq2SeqModel<float>& m) {
  return {m.config(), c.time_tokens, c.tad_classes, c.tas_classes, m.params()};
}

inline Seq2SeqModel<float> model_from_checkpoint(const Checkpoint& ck) {
  Seq2SeqModel<float> m(ck.model);
  load_parameters(m, ck.params);
  return m;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Generation and detokenization for one window.
inline WindowOutput run_window(const Seq2SeqModel<float>& model, const VocabLayout& layout, const FeatureClip& clip,
                               TaskId task, TadParadigm paradigm) {
  const Mat<float> hidden = model.encode_raw(clip.features);
  const bool want_dist = task == TaskId::TAS;
  const auto gen = model.generate(hidden, task, layout, paradigm, want_dist);
  WindowOutput out;
  out.window = clip.window;
  switch (task) {
    case TaskId::TAD:
      out.tad = paradigm == TadParadigm::Dense ? detokenize_tad_dense(gen.sequence, gen.token_probs, clip.window, layout)
                                               : detokenize_tad(gen.sequence, gen.token_probs, clip.window, layout);
      break;
    case TaskId::TAS:
      out.tas_labels = tas_frame_labels(gen.sequence, layout);
      for (const auto& d : gen.distributions) out.tas_probs.insert(out.tas_probs.end(), d.begin(), d.end());
      break;
    case TaskId::GEBD: out.gebd = detokenize_gebd(gen.sequence, clip.window, layout, gen.token_probs); break;
  }
  return out;
}

/// Sliding-window inference over every video of a dataset.
inline std::vector<PredictionSet> predict_dataset(const Seq2SeqModel<float>& model, const VocabLayout& layout,
                                                  const Dataset& ds, const DatasetSpec& spec, TadParadigm paradigm,
                                                  double stride_fraction, double nms) {
  std::vector<PredictionSet> out;
  for (const auto& v : ds.videos) {
    std::vector<WindowOutput> wins;
    for (const auto& w : sliding_windows(v.id, v.duration, spec, stride_fraction * spec.window_seconds))
      wins.push_back(run_window(model, layout, sample_clip(v, spec, w.start_time), ds.task, paradigm));
    out.push_back(merge_windows(ds.task, wins, v.duration, nms));
  }
  return out;
}

/// Task metric table for predictions aligned with `videos`.
inline MetricReport evaluate_predictions(TaskId task, std::span<const PredictionSet> preds,
                                         std::span<const Video> videos, double clip_rate) {
  if (preds.size() != videos.size()) throw InputError("prediction count differs from ground-truth video count");
  switch (task) {
    case TaskId::TAD: {
      std::vector<std::vector<TadInstance>> p, g;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        p.push_back(preds[i].tad);
        g.push_back(videos[i].annotation.instances);
      }
      return tad_map(p, g);
    }
    case TaskId::TAS: {
      std::vector<std::vector<TasSegment>> p;
      std::vector<std::vector<int>> g;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        p.push_back(preds[i].tas);
        g.push_back(video_grid_labels(videos[i], clip_rate));
      }
      return tas_scores(p, g);
    }
    case TaskId::GEBD: {
      std::vector<std::vector<double>> p, g;
      std::vector<double> dur;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        std::vector<double> ts;
        for (const auto& b : preds[i].gebd) ts.push_back(b.timestamp);
        p.push_back(ts);
        g.push_back(videos[i].annotation.boundaries);
        dur.push_back(videos[i].duration);
      }
      return gebd_f1(p, g, dur);
    }
  }
  throw InvalidArgument("unknown task");
}

inline MetricReport evaluate_model(const ExperimentConfig& c, const Seq2SeqModel<float>& model, const Dataset& test) {
  const auto& spec = c.task(test.task).spec;
  DatasetSpec s = spec;
  s.clip_frames = c.model.frame_count;
  const auto preds = predict_dataset(model, c.layout(), test, s, c.tad_paradigm, c.infer_stride, c.nms_threshold);
  return evaluate_predictions(test.task, preds, test.videos, s.clip_rate());
}

/// The headline number of each task: Avg-mAP, frame accuracy, F1 at Rel.Dis 0.05.
inline double headline_metric(const MetricReport& r) {
  switch (r.task) {
    case TaskId::TAD: return r.at("Avg");
    case TaskId::TAS: return r.at("Acc");
    case TaskId::GEBD: return r.at("0.05");
  }
  return 0.0;
}

}  // namespace tseq
