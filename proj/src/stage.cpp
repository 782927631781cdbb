#include "stagechain/stage.hpp"

#include "stagechain/errors.hpp"

namespace stagechain {

std::string_view stage_tag(Stage s) {
  switch (s) {
    case Stage::perception:
      return "perc";
    case Stage::prediction:
      return "pred";
    case Stage::planning:
      return "plan";
  }
  return "?";
}

Stage parse_stage(std::string_view tag) {
  if (tag == "perc" || tag == "perception") return Stage::perception;
  if (tag == "pred" || tag == "prediction") return Stage::prediction;
  if (tag == "plan" || tag == "planning") return Stage::planning;
  throw UsageError("unknown stage '" + std::string(tag) + "' (expected perc|pred|plan)");
}

}  // namespace stagechain
