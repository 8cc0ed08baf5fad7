// SPDX-License-Identifier: Apache-2.0
//
// Unified token space shared by detection (TAD), segmentation (TAS) and
// boundary detection (GEBD), plus per-role legality masks for decoding.
//
// Layout, in index order:
//   [0, D)                              time tokens
//   [D, D + C_tad)                      TAD class tokens
//   [D + C_tad, D + C_tad + C_tas)      TAS class tokens
//   boundary, background                GEBD tokens
//   prompt[TAD], prompt[TAS], prompt[GEBD], eos, pad

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tseq/error.hpp"

namespace tseq {

using Token = std::int32_t;

enum class TaskId : std::uint8_t { TAD = 0, TAS = 1, GEBD = 2 };

inline constexpr std::array<TaskId, 3> kAllTasks{TaskId::TAD, TaskId::TAS, TaskId::GEBD};

inline std::string_view task_name(TaskId task) {
  switch (task) {
    case TaskId::TAD: return "TAD";
    case TaskId::TAS: return "TAS";
    case TaskId::GEBD: return "GEBD";
  }
  return "?";
}

inline TaskId parse_task(std::string_view name) {
  if (name == "TAD" || name == "tad") return TaskId::TAD;
  if (name == "TAS" || name == "tas") return TaskId::TAS;
  if (name == "GEBD" || name == "gebd") return TaskId::GEBD;
  throw InvalidArgument("unknown task '" + std::string(name) + "'");
}

/// How TAD targets are encoded: (start, end, class) triples, or one token per
/// frame like TAS.
enum class TadParadigm : std::uint8_t { Sparse, Dense };

enum class PositionRole : std::uint8_t {
  Prompt,
  TadStart,
  TadEnd,
  TadClass,
  TasFrameClass,
  GebdFrameBinary,
  Eos,
  TadDenseFrame,
  Pad,
};

struct VocabLayout {
  int time_token_count = 0;
  int tad_class_count = 0;
  int tas_class_count = 0;
  Token gebd_boundary_index = 0;
  Token gebd_background_index = 0;
  std::array<Token, 3> prompt_indices{};
  Token eos_index = 0;
  Token pad_index = 0;
  int total_size = 0;

  Token prompt(TaskId task) const { return prompt_indices[static_cast<int>(task)]; }

  Token tad_class_begin() const { return time_token_count; }
  Token tas_class_begin() const { return time_token_count + tad_class_count; }

  bool is_time(Token t) const { return t >= 0 && t < time_token_count; }
  bool is_tad_class(Token t) const {
    return t >= tad_class_begin() && t < tad_class_begin() + tad_class_count;
  }
  bool is_tas_class(Token t) const {
    return t >= tas_class_begin() && t < tas_class_begin() + tas_class_count;
  }
  bool is_gebd(Token t) const { return t == gebd_boundary_index || t == gebd_background_index; }
  bool in_range(Token t) const { return t >= 0 && t < total_size; }

  friend bool operator==(const VocabLayout&, const VocabLayout&) = default;
};

inline VocabLayout build_layout(int time_token_count, int tad_classes, int tas_classes) {
  detail::require(time_token_count >= 1, "time_token_count must be >= 1");
  detail::require(tad_classes >= 1, "tad_classes must be >= 1");
  detail::require(tas_classes >= 1, "tas_classes must be >= 1");
  VocabLayout v;
  v.time_token_count = time_token_count;
  v.tad_class_count = tad_classes;
  v.tas_class_count = tas_classes;
  Token next = time_token_count + tad_classes + tas_classes;
  v.gebd_boundary_index = next++;
  v.gebd_background_index = next++;
  for (auto& p : v.prompt_indices) p = next++;
  v.eos_index = next++;
  v.pad_index = next++;
  v.total_size = next;
  return v;
}

/// Quantizes a relative position in [0, 1] to a time token: floor(x * D),
/// with x = 1 mapped to the last bin.
inline Token time_to_token(double relative_position, const VocabLayout& layout) {
  if (!(relative_position >= 0.0 && relative_position <= 1.0))
    throw InvalidArgument("relative position outside [0, 1]");
  const int d = layout.time_token_count;
  auto bin = static_cast<Token>(relative_position * d);
  return bin >= d ? d - 1 : bin;
}

/// Bin center of a time token.
inline double token_to_time(Token token, const VocabLayout& layout) {
  if (!layout.is_time(token)) throw InvalidArgument("token is not a time token");
  return (static_cast<double>(token) + 0.5) / layout.time_token_count;
}

inline Token class_to_token(TaskId task, int class_id, const VocabLayout& layout) {
  switch (task) {
    case TaskId::TAD:
      detail::require(class_id >= 0 && class_id < layout.tad_class_count,
                      "TAD class id out of range");
      return layout.tad_class_begin() + class_id;
    case TaskId::TAS:
      detail::require(class_id >= 0 && class_id < layout.tas_class_count,
                      "TAS class id out of range");
      return layout.tas_class_begin() + class_id;
    case TaskId::GEBD:
      break;
  }
  throw InvalidArgument("GEBD has no class tokens; use boundary/background indices");
}

inline std::pair<TaskId, int> token_to_class(Token token, const VocabLayout& layout) {
  if (layout.is_tad_class(token)) return {TaskId::TAD, token - layout.tad_class_begin()};
  if (layout.is_tas_class(token)) return {TaskId::TAS, token - layout.tas_class_begin()};
  throw InvalidArgument("token is not a class token");
}

inline bool role_valid_for(TaskId task, PositionRole role) {
  switch (role) {
    case PositionRole::Prompt:
    case PositionRole::Pad: return true;
    case PositionRole::TadStart:
    case PositionRole::TadEnd:
    case PositionRole::TadClass:
    case PositionRole::Eos:
    case PositionRole::TadDenseFrame: return task == TaskId::TAD;
    case PositionRole::TasFrameClass: return task == TaskId::TAS;
    case PositionRole::GebdFrameBinary: return task == TaskId::GEBD;
  }
  return false;
}

/// Tokens a decoder may emit at a position with the given role. EOS has its
/// own role; at a triple boundary the generator takes the union of the
/// TadStart and Eos masks, so EOS can never interrupt a triple.
inline std::vector<bool> legal_mask(TaskId task, PositionRole role, const VocabLayout& layout) {
  if (!role_valid_for(task, role) || role == PositionRole::Prompt || role == PositionRole::Pad)
    throw InvalidArgument("role is not a generation role for this task");
  std::vector<bool> mask(static_cast<std::size_t>(layout.total_size), false);
  auto fill = [&](Token begin, int count) {
    for (int i = 0; i < count; ++i) mask[static_cast<std::size_t>(begin + i)] = true;
  };
  switch (role) {
    case PositionRole::TadStart:
    case PositionRole::TadEnd: fill(0, layout.time_token_count); break;
    case PositionRole::TadClass: fill(layout.tad_class_begin(), layout.tad_class_count); break;
    case PositionRole::Eos: mask[static_cast<std::size_t>(layout.eos_index)] = true; break;
    case PositionRole::TadDenseFrame:
      fill(layout.tad_class_begin(), layout.tad_class_count);
      mask[static_cast<std::size_t>(layout.gebd_background_index)] = true;
      break;
    case PositionRole::TasFrameClass: fill(layout.tas_class_begin(), layout.tas_class_count); break;
    case PositionRole::GebdFrameBinary:
      mask[static_cast<std::size_t>(layout.gebd_boundary_index)] = true;
      mask[static_cast<std::size_t>(layout.gebd_background_index)] = true;
      break;
    default: break;
  }
  return mask;
}

/// Role schedule for generation. `step` counts positions after the prompt,
/// starting at 0. For sparse TAD the step cycles start/end/class; at a triple
/// boundary `allows_eos` is set.
struct StepRole {
  PositionRole role;
  bool allows_eos = false;
};

inline StepRole step_role(TaskId task, std::size_t step, TadParadigm paradigm = TadParadigm::Sparse) {
  switch (task) {
    case TaskId::TAS: return {PositionRole::TasFrameClass};
    case TaskId::GEBD: return {PositionRole::GebdFrameBinary};
    case TaskId::TAD:
      if (paradigm == TadParadigm::Dense) return {PositionRole::TadDenseFrame};
      switch (step % 3) {
        case 0: return {PositionRole::TadStart, true};
        case 1: return {PositionRole::TadEnd};
        default: return {PositionRole::TadClass};
      }
  }
  return {PositionRole::Pad};
}

/// The mask used by the generator at one step (role mask, plus EOS where a
/// new triple could begin).
inline std::vector<bool> step_mask(TaskId task, std::size_t step, const VocabLayout& layout,
                                   TadParadigm paradigm = TadParadigm::Sparse) {
  const StepRole sr = step_role(task, step, paradigm);
  auto mask = legal_mask(task, sr.role, layout);
  if (sr.allows_eos) mask[static_cast<std::size_t>(layout.eos_index)] = true;
  return mask;
}

}  // namespace tseq
