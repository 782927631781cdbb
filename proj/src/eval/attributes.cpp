#include "stagechain/eval/attributes.hpp"

#include <algorithm>
#include <vector>

#include "stagechain/eval/text.hpp"

namespace stagechain::eval {

namespace {

using Phrase = std::vector<std::string>;

struct Match {
  std::size_t start = 0;
};

bool is_negator(const std::string& w) {
  return w == "not" || w == "no" || w == "never" || w == "dont" || w == "cannot" ||
         w == "without";
}

// Start offsets of non-negated occurrences of `phrase` in `words`.
std::vector<std::size_t> find_phrase(const std::vector<std::string>& words, const Phrase& phrase) {
  std::vector<std::size_t> hits;
  if (phrase.empty() || words.size() < phrase.size()) return hits;
  for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i) {
    if (!std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
      continue;
    }
    bool negated = false;
    for (std::size_t k = (i >= 3 ? i - 3 : 0); k < i; ++k) negated |= is_negator(words[k]);
    if (!negated) hits.push_back(i);
  }
  return hits;
}

std::size_t first_hit(const std::vector<std::string>& words, const std::vector<Phrase>& phrases) {
  std::size_t best = words.size();
  for (const Phrase& p : phrases) {
    auto hits = find_phrase(words, p);
    if (!hits.empty()) best = std::min(best, hits.front());
  }
  return best;
}

const std::vector<Phrase> kRed = {{"red", "light"},
                                  {"red", "traffic", "light"},
                                  {"light", "is", "red"},
                                  {"light", "will", "stay", "red"}};
const std::vector<Phrase> kGreen = {{"green", "light"},
                                    {"green", "traffic", "light"},
                                    {"light", "is", "green"},
                                    {"light", "will", "stay", "green"}};
const std::vector<Phrase> kNoLight = {{"no", "traffic", "light"}};

const std::vector<std::pair<ActionFact, std::vector<Phrase>>> kActionLexicon = {
    {ActionFact::accelerate, {{"accelerate"}, {"speed", "up"}}},
    {ActionFact::maintain,
     {{"keep", "going", "at", "the", "same", "speed"},
      {"maintain", "speed"},
      {"maintain"},
      {"same", "speed"}}},
    {ActionFact::slow, {{"slow"}, {"slow", "down"}, {"decelerate"}}},
    {ActionFact::stop, {{"stop"}, {"brake", "to", "a", "stop"}, {"come", "to", "a", "stop"}}},
    {ActionFact::turn_left, {{"turn", "left"}}},
    {ActionFact::turn_right, {{"turn", "right"}}},
    {ActionFact::offset_left, {{"offset", "left"}, {"shift", "left"}}},
    {ActionFact::offset_right, {{"offset", "right"}, {"shift", "right"}}},
};

int pedestrian_rank(PedestrianFact f) {
  switch (f) {
    case PedestrianFact::crossing: return 3;
    case PedestrianFact::sidewalk: return 2;
    case PedestrianFact::none: return 1;
    case PedestrianFact::unknown: return 0;
  }
  return 0;
}

}  // namespace

std::string_view name(LightFact f) {
  switch (f) {
    case LightFact::none: return "none";
    case LightFact::red: return "red";
    case LightFact::green: return "green";
    case LightFact::unknown: return "unknown";
  }
  return "?";
}

std::string_view name(PedestrianFact f) {
  switch (f) {
    case PedestrianFact::none: return "none";
    case PedestrianFact::sidewalk: return "sidewalk";
    case PedestrianFact::crossing: return "crossing";
    case PedestrianFact::unknown: return "unknown";
  }
  return "?";
}

std::string_view name(ActionFact f) {
  switch (f) {
    case ActionFact::accelerate: return "accelerate";
    case ActionFact::maintain: return "maintain";
    case ActionFact::slow: return "slow";
    case ActionFact::stop: return "stop";
    case ActionFact::turn_left: return "turn_left";
    case ActionFact::turn_right: return "turn_right";
    case ActionFact::offset_left: return "offset_left";
    case ActionFact::offset_right: return "offset_right";
  }
  return "?";
}

AttributeFacts extract_attributes(std::string_view text) {
  const std::vector<std::string> words = normalize_words(text);
  AttributeFacts f;

  const std::size_t red = first_hit(words, kRed);
  const std::size_t green = first_hit(words, kGreen);
  const std::size_t none = first_hit(words, kNoLight);
  const std::size_t first = std::min({red, green, none});
  if (first < words.size()) {
    f.light = first == red ? LightFact::red : first == green ? LightFact::green : LightFact::none;
  }

  const bool ped_context = std::find(words.begin(), words.end(), "pedestrian") != words.end() ||
                           std::find(words.begin(), words.end(), "pedestrians") != words.end();
  if (!find_phrase(words, {"crossing", "the", "road"}).empty() ||
      (ped_context && !find_phrase(words, {"crossing"}).empty())) {
    f.pedestrian = PedestrianFact::crossing;
  } else if (!find_phrase(words, {"sidewalk"}).empty()) {
    f.pedestrian = PedestrianFact::sidewalk;
  } else if (!find_phrase(words, {"no", "pedestrian"}).empty() ||
             !find_phrase(words, {"no", "pedestrians"}).empty()) {
    f.pedestrian = PedestrianFact::none;
  }

  for (const auto& [action, phrases] : kActionLexicon) {
    if (first_hit(words, phrases) < words.size()) f.ego_actions.insert(action);
  }
  return f;
}

AttributeFacts merge_facts(const AttributeFacts& a, const AttributeFacts& b) {
  AttributeFacts m;
  m.light = a.light != LightFact::unknown ? a.light : b.light;
  m.pedestrian = pedestrian_rank(a.pedestrian) >= pedestrian_rank(b.pedestrian) ? a.pedestrian
                                                                                 : b.pedestrian;
  m.ego_actions = a.ego_actions;
  m.ego_actions.insert(b.ego_actions.begin(), b.ego_actions.end());
  return m;
}

RuleCheck check_rules(const AttributeFacts& up, const AttributeFacts& down) {
  RuleCheck r;
  if (down.ego_actions.empty()) return r;
  auto has = [&](ActionFact a) { return down.ego_actions.contains(a); };
  if (up.pedestrian == PedestrianFact::crossing) {
    ++r.checks;
    if (has(ActionFact::accelerate) || has(ActionFact::maintain)) ++r.contradictions;
  }
  if (up.light == LightFact::red) {
    ++r.checks;
    if (has(ActionFact::maintain) || has(ActionFact::accelerate)) ++r.contradictions;
  }
  if (up.light == LightFact::green && up.pedestrian != PedestrianFact::crossing) {
    ++r.checks;
    if (has(ActionFact::stop)) ++r.contradictions;
  }
  return r;
}

std::optional<double> structural_consistency(const AttributeFacts& up, const AttributeFacts& down) {
  const RuleCheck r = check_rules(up, down);
  if (r.checks == 0) return std::nullopt;
  return 1.0 - static_cast<double>(r.contradictions) / static_cast<double>(r.checks);
}

}  // namespace stagechain::eval
