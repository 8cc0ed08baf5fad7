// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: gen-data, train, infer, eval and ablate.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O or
// input-data error. Relative paths resolve against $TSEQ_OUTPUT_ROOT when set.

#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tseq/ablation.hpp"
#include "tseq/train.hpp"

namespace tseq::cli {

enum ExitCode : int { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

inline constexpr const char* kOutputRootEnv = "TSEQ_OUTPUT_ROOT";
inline constexpr const char* kCheckpointFile = "checkpoint.tsqc";
inline constexpr const char* kResolvedConfigFile = "config.conf";
inline constexpr const char* kTrainLogFile = "train_log.jsonl";

inline fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path();
}

inline fs::path resolve(const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  const auto root = output_root();
  return root.empty() ? p : root / p;
}

struct ConfigArgs {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::string output_dir;
};

inline void add_config_options(CLI::App& cmd, ConfigArgs& a) {
  cmd.add_option("-c,--config", a.config_file, "Key-value config file");
  cmd.add_option("-s,--set", a.sets, "Override, as key=value (repeatable)");
  cmd.add_option("--seed", a.seed, "Training seed");
  cmd.add_option("--epochs", a.epochs, "Training epochs");
  cmd.add_option("-o,--output", a.output_dir, "Output directory");
}

/// File values first, then --set pairs, then the dedicated flags.
inline ExperimentConfig load_config(const ConfigArgs& a, KeyValues extra = {}) {
  KeyValues kv;
  if (!a.config_file.empty()) kv = parse_key_values(read_file(a.config_file), a.config_file);
  for (auto& [k, v] : extra) kv[k] = v;
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    const auto key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("--set with empty key");
    kv[key] = trim(s.substr(eq + 1));
  }
  if (a.seed) kv["seed"] = std::to_string(*a.seed);
  if (a.epochs) kv["epochs"] = std::to_string(*a.epochs);
  if (!a.output_dir.empty()) kv["output_dir"] = a.output_dir;
  return apply_key_values(default_experiment(), kv);
}

inline fs::path split_dir(const ExperimentConfig& c, TaskId t, const char* split) {
  return resolve(c.task(t).dir) / split;
}

// ---------------------------------------------------------------------------

inline int cmd_gen_data(const ExperimentConfig& c, std::ostream& out) {
  for (auto t : c.enabled_tasks()) {
    const auto data = generate_task_data(c, t);
    const GeneratorInfo gen{c.data_seed, c.task(t).synth.noise_level};
    save_dataset(split_dir(c, t, "train"), data.train, gen);
    save_dataset(split_dir(c, t, "test"), data.test, gen);
    out << task_name(t) << ": " << data.train.videos.size() << " train / " << data.test.videos.size()
        << " test videos, " << data.train.classes << " classes -> " << resolve(c.task(t).dir).string() << "\n";
  }
  return kOk;
}

inline Dataset load_task_split(const ExperimentConfig& c, TaskId t, const char* split) {
  auto ds = load_dataset(split_dir(c, t, split));
  if (ds.task != t)
    throw ConfigError(split_dir(c, t, split).string() + " holds " + std::string(task_name(ds.task)) +
                      " data, expected " + std::string(task_name(t)));
  return ds;
}

/// Trains and writes the resolved config, a per-epoch JSONL log and the
/// checkpoint of the last completed epoch. With `evaluate`, also scores the
/// test split of every enabled task.
inline int cmd_train(const ExperimentConfig& c, bool evaluate, std::ostream& out) {
  std::array<std::optional<Dataset>, 3> train;
  std::array<const Dataset*, 3> ptrs{};
  for (auto t : c.enabled_tasks()) {
    train[static_cast<std::size_t>(t)] = load_task_split(c, t, "train");
    ptrs[static_cast<std::size_t>(t)] = &*train[static_cast<std::size_t>(t)];
  }
  const fs::path dir = resolve(c.output_dir);
  write_file(dir / kResolvedConfigFile, format_key_values(to_key_values(c)));
  std::string log;
  write_file(dir / kTrainLogFile, log);
  const auto result = train_model(c, ptrs, [&](const EpochLog& e, const Seq2SeqModel<float>& m) {
    save_checkpoint(dir / kCheckpointFile, make_checkpoint(c, m));
    log += epoch_record(e).dump() + "\n";
    write_file(dir / kTrainLogFile, log);
    out << "epoch " << e.epoch << " loss " << e.loss << " iterations " << e.iterations << "\n" << std::flush;
  });
  if (c.epochs == 0) save_checkpoint(dir / kCheckpointFile, make_checkpoint(c, result.model));
  if (evaluate) {
    std::vector<json> reports;
    for (auto t : c.enabled_tasks()) {
      const auto test = load_task_split(c, t, "test");
      const auto rep = evaluate_model(c, result.model, test);
      out << task_name(t) << "\n" << rep.table();
      reports.push_back(report_record(rep));
    }
    write_file(dir / "metrics.jsonl", to_jsonl(reports));
  }
  return kOk;
}

/// The resolved config saved next to `checkpoint`, if any, else `fallback`.
inline ExperimentConfig config_for_checkpoint(const fs::path& checkpoint, const ConfigArgs& a) {
  const auto sibling = checkpoint.parent_path() / kResolvedConfigFile;
  if (a.config_file.empty() && fs::exists(sibling)) {
    ConfigArgs b = a;
    b.config_file = sibling.string();
    return load_config(b);
  }
  return load_config(a);
}

inline int cmd_infer(const ConfigArgs& a, const std::string& checkpoint_arg, const std::string& data_arg,
                     const std::string& out_arg, std::ostream& out) {
  const fs::path ck_path = resolve(checkpoint_arg);
  const auto ck = load_checkpoint(ck_path);
  const ExperimentConfig c = config_for_checkpoint(ck_path, a);
  const Dataset ds = load_dataset(resolve(data_arg));
  const int cap = ds.task == TaskId::TAD ? ck.tad_classes : ds.task == TaskId::TAS ? ck.tas_classes : 2;
  if (ds.task != TaskId::GEBD && ds.classes > cap)
    throw ConfigError("dataset has " + std::to_string(ds.classes) + " " + std::string(task_name(ds.task)) +
                      " classes but the checkpoint vocabulary holds " + std::to_string(cap));
  for (const auto& v : ds.videos)
    if (v.features.cols() != ck.model.input_dim)
      throw ConfigError("video " + v.id + " has feature dim " + std::to_string(v.features.cols()) +
                        ", checkpoint expects " + std::to_string(ck.model.input_dim));
  DatasetSpec spec = c.task(ds.task).spec;
  spec.clip_frames = ck.model.frame_count;
  spec.window_seconds = spec.clip_frames * spec.stride / spec.fps;
  const auto model = model_from_checkpoint(ck);
  const auto preds = predict_dataset(model, ck.layout(), ds, spec, c.tad_paradigm, c.infer_stride, c.nms_threshold);
  std::vector<json> records;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto rec = prediction_record(ds.videos[i].id, ds.videos[i].duration, preds[i]);
    if (ds.task == TaskId::TAS) rec["frame_rate"] = spec.clip_rate();
    records.push_back(std::move(rec));
  }
  const fs::path dst = resolve(out_arg);
  write_file(dst, to_jsonl(records));
  out << records.size() << " " << task_name(ds.task) << " predictions -> " << dst.string() << "\n";
  return kOk;
}

/// Aligns predictions to the ground-truth order; the two id sets must agree.
inline int cmd_eval(const std::string& pred_arg, const std::string& gt_arg, const std::string& report_arg,
                    std::optional<double> frame_rate, std::ostream& out) {
  const auto records = read_jsonl(resolve(pred_arg));
  fs::path gt_path = resolve(gt_arg);
  if (fs::is_directory(gt_path)) gt_path /= "annotations.jsonl";
  const auto videos = load_annotations(gt_path);
  if (videos.empty()) throw InputError(gt_path.string() + ": no ground-truth videos");
  const TaskId task = videos.front().annotation.task;

  std::map<std::string, std::size_t> by_id;
  std::vector<PredictionSet> parsed;
  for (const auto& rec : records) {
    std::string id;
    try {
      id = rec.at("video_id").get<std::string>();
      if (!frame_rate && rec.contains("frame_rate")) frame_rate = rec.at("frame_rate").get<double>();
    } catch (const json::exception& e) {
      throw InputError(std::string("malformed prediction record: ") + e.what());
    }
    auto p = parse_prediction(rec);
    if (p.task != task)
      throw InputError("prediction for " + id + " is " + std::string(task_name(p.task)) + ", ground truth is " +
                       std::string(task_name(task)));
    if (!by_id.emplace(id, parsed.size()).second) throw InputError("duplicate prediction for video " + id);
    parsed.push_back(std::move(p));
  }
  std::set<std::string> gt_ids;
  std::vector<std::string> missing, extra;
  for (const auto& v : videos) {
    gt_ids.insert(v.id);
    if (!by_id.count(v.id)) missing.push_back(v.id);
  }
  for (const auto& [id, i] : by_id)
    if (!gt_ids.count(id)) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "video ids differ between predictions and ground truth;";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string(" ") + what + ":";
      for (const auto& id : ids) msg += " " + id;
    };
    list("missing predictions", missing);
    list("unknown videos", extra);
    throw InputError(msg);
  }
  std::vector<PredictionSet> aligned;
  for (const auto& v : videos) aligned.push_back(parsed[by_id.at(v.id)]);
  if (task == TaskId::TAS && !frame_rate) throw ConfigError("TAS evaluation needs --frame-rate");
  const auto rep = evaluate_predictions(task, aligned, videos, frame_rate.value_or(1.0));
  out << rep.table();
  if (!report_arg.empty()) write_file(resolve(report_arg), report_record(rep).dump() + "\n");
  return kOk;
}

inline int cmd_ablate(const ExperimentConfig& c, const std::string& kind, int gebd_scale, std::ostream& out) {
  const fs::path dir = resolve(c.output_dir);
  write_file(dir / kResolvedConfigFile, format_key_values(to_key_values(c)));
  auto progress = [&](const EpochLog& e, const Seq2SeqModel<float>&) {
    if (e.epoch % 25 == 0 || e.epoch == c.epochs) out << "  epoch " << e.epoch << " loss " << e.loss << "\n" << std::flush;
  };
  std::vector<json> records;
  auto report = [&](const AblationArm& a) {
    out << "[" << kind << "] " << a.name << "\n";
    for (const auto& r : a.outcome.reports)
      if (r) out << r->table();
    records.push_back(arm_record(kind, a));
  };
  int code = kOk;
  if (kind == "weight-loss") {
    const auto r = ablate_weight_loss(c, progress);
    for (const auto& a : r.arms) report(a);
    records.push_back({{"ablation", kind}, {"unit_distance_matches_cross_entropy", r.unit_matches_cross_entropy}});
    out << "Avg-mAP weighted " << r.arms[0].outcome.headline(TaskId::TAD) << " cross_entropy "
        << r.arms[1].outcome.headline(TaskId::TAD) << "\n";
    out << "unit distance factor reproduces cross-entropy bit-for-bit: "
        << (r.unit_matches_cross_entropy ? "yes" : "no") << "\n";
    if (!r.unit_matches_cross_entropy) code = kNumeric;
  } else if (kind == "paradigm") {
    const auto r = ablate_tad_paradigm(c, progress);
    for (const auto& a : r.arms) report(a);
    out << "Avg-mAP sparse " << r.arms[0].outcome.headline(TaskId::TAD) << " dense "
        << r.arms[1].outcome.headline(TaskId::TAD) << "\n";
  } else if (kind == "balance") {
    const auto r = ablate_balance(c, gebd_scale, progress);
    for (const auto& a : r.arms) report(a);
    out << "GEBD training videos " << r.gebd_train_videos << "\n";
  } else {
    throw ConfigError("unknown ablation '" + kind + "'");
  }
  write_file(dir / ("ablate_" + kind + ".jsonl"), to_jsonl(records));
  return code;
}

// ---------------------------------------------------------------------------

/// Parses and runs one command line. Errors are reported on `err` and
/// mapped to the exit codes above.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sequence-to-sequence temporal detection, segmentation and boundary detection"};
  app.require_subcommand(1);

  ConfigArgs gen_args, train_args, infer_args, ablate_args;
  auto* gen = app.add_subcommand("gen-data", "Write synthetic datasets for the enabled tasks");
  add_config_options(*gen, gen_args);

  auto* train = app.add_subcommand("train", "Train a model on the enabled tasks");
  add_config_options(*train, train_args);
  bool evaluate = false;
  train->add_flag("--eval", evaluate, "Evaluate on the test splits after training");

  auto* infer = app.add_subcommand("infer", "Run sliding-window inference over a dataset");
  add_config_options(*infer, infer_args);
  std::string checkpoint, data, predictions;
  infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  infer->add_option("--data", data, "Dataset directory")->required();
  infer->add_option("--out", predictions, "Prediction JSONL file")->required();

  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  std::string pred_file, gt, report;
  std::optional<double> frame_rate;
  eval->add_option("--pred", pred_file, "Prediction JSONL file")->required();
  eval->add_option("--gt", gt, "Annotation JSONL file or dataset directory")->required();
  eval->add_option("--report", report, "Write the metric table as JSON");
  eval->add_option("--frame-rate", frame_rate, "TAS label grid rate in frames per second");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation: weight-loss, paradigm or balance");
  add_config_options(*ablate, ablate_args);
  std::string kind;
  int gebd_scale = 10;
  ablate->add_option("kind", kind, "weight-loss | paradigm | balance")
      ->required()
      ->check(CLI::IsMember({"weight-loss", "paradigm", "balance"}));
  ablate->add_option("--gebd-scale", gebd_scale, "GEBD training set multiplier for the balance ablation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(load_config(gen_args), out);
    if (*train) return cmd_train(load_config(train_args), evaluate, out);
    if (*infer) return cmd_infer(infer_args, checkpoint, data, predictions, out);
    if (*eval) return cmd_eval(pred_file, gt, report, frame_rate, out);
    if (*ablate) return cmd_ablate(load_config(ablate_args), kind, gebd_scale, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InvalidArgument& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kIo;
  } catch (const DecodeError& e) {
    err << "decode error: " << e.what() << "\n";
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}

}  // namespace tseq::cli
