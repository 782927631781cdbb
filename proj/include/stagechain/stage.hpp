#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

namespace stagechain {

// The three reasoning stages, totally ordered Perception < Prediction < Planning.
enum class Stage : int { perception = 0, prediction = 1, planning = 2 };

inline constexpr std::array<Stage, 3> kStages = {Stage::perception, Stage::prediction,
                                                 Stage::planning};

inline constexpr std::size_t index_of(Stage s) { return static_cast<std::size_t>(s); }

// Short tags used in file names, JSON and on the command line.
std::string_view stage_tag(Stage s);
Stage parse_stage(std::string_view tag);  // throws UsageError

}  // namespace stagechain
