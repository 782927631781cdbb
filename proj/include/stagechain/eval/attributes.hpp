#pragma once

#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace stagechain::eval {

enum class LightFact { none, red, green, unknown };
enum class PedestrianFact { none, sidewalk, crossing, unknown };
enum class ActionFact {
  accelerate,
  maintain,
  slow,
  stop,
  turn_left,
  turn_right,
  offset_left,
  offset_right
};

struct AttributeFacts {
  LightFact light = LightFact::unknown;
  PedestrianFact pedestrian = PedestrianFact::unknown;
  std::set<ActionFact> ego_actions;

  bool operator==(const AttributeFacts&) const = default;
};

std::string_view name(LightFact f);
std::string_view name(PedestrianFact f);
std::string_view name(ActionFact f);

// Phrase lexicon over normalized words (see text.hpp). A match preceded
// within 3 words by a negator (not, no, never, dont, cannot, without) is
// discarded. The light takes the first non-negated match in the text; the
// pedestrian status takes the strongest match, crossing > sidewalk > none.
//
//   light red      : "red light", "red traffic light", "light is red", "light will stay red"
//   light green    : "green light", "green traffic light", "light is green",
//                    "light will stay green"
//   light none     : "no traffic light"
//   ped crossing   : "crossing the road", or "crossing" when "pedestrian(s)" occurs
//   ped sidewalk   : "sidewalk"
//   ped none       : "no pedestrian", "no pedestrians"
//   accelerate     : "accelerate", "speed up"
//   maintain       : "keep going at the same speed", "maintain speed", "maintain", "same speed"
//   slow           : "slow", "slow down", "decelerate"
//   stop           : "stop", "brake to a stop", "come to a stop"
//   turn_left/right: "turn left" / "turn right"
//   offset_left/right: "offset left", "shift left" / "offset right", "shift right"
AttributeFacts extract_attributes(std::string_view text);

// Upstream facts of several answers: first known light, strongest pedestrian
// status, union of actions.
AttributeFacts merge_facts(const AttributeFacts& a, const AttributeFacts& b);

struct RuleCheck {
  std::size_t checks = 0;
  std::size_t contradictions = 0;
};

// Rule table, each applicable rule being one check (a rule applies when its
// upstream condition holds and the downstream answer names at least one
// action):
//   pedestrian crossing           : contradiction if actions ∋ accelerate|maintain
//   light red                     : contradiction if actions ∋ maintain|accelerate
//   light green, not crossing     : contradiction if actions ∋ stop
RuleCheck check_rules(const AttributeFacts& upstream, const AttributeFacts& downstream);

// 1 − contradictions/checks; nullopt when no rule applies.
std::optional<double> structural_consistency(const AttributeFacts& upstream,
                                             const AttributeFacts& downstream);

}  // namespace stagechain::eval
