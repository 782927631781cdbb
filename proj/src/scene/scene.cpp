#include "stagechain/scene/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>

#include "stagechain/errors.hpp"

namespace stagechain::scene {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& values, const char* what) {
  for (E v : values) {
    if (name(v) == s) return v;
  }
  throw DataError("unknown " + std::string(what) + " value '" + std::string(s) + "'");
}

using Choices = std::vector<std::string>;

const std::string& pick(const Choices& c, ad::Rng& rng) { return c[rng.below(c.size())]; }

std::string join_items(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
    out += items[i];
  }
  return out;
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

// Perception phrases.
const Choices kPercOpeners = {"There is", "I see"};
const Choices kPercEmpty = {"The road ahead is clear", "There are no important objects around"};
const Choices kPercRed = {"a red light ahead", "a red traffic light"};
const Choices kPercGreen = {"a green light ahead", "a green traffic light"};
const Choices kPercCrossing = {"a pedestrian crossing the road",
                               "a pedestrian who is crossing the road"};
const Choices kPercSidewalk = {"a pedestrian on the sidewalk",
                               "a pedestrian standing on the sidewalk"};
const Choices kPercMoving = {"a moving vehicle in front", "a vehicle driving ahead"};
const Choices kPercStopped = {"a stopped vehicle in front", "a vehicle stopped ahead"};

// Prediction phrases.
const Choices kPredEmpty = {"Nothing is expected to change", "The scene will stay the same"};
const Choices kPredCrossing = {"the pedestrian will keep crossing the road",
                               "the pedestrian will continue crossing the road"};
const Choices kPredSidewalk = {"the pedestrian will stay on the sidewalk",
                               "the pedestrian will remain on the sidewalk"};
const Choices kPredRed = {"the light will stay red", "the red light will remain on"};
const Choices kPredGreen = {"the light will stay green", "the green light will remain on"};
const Choices kPredMoving = {"the vehicle in front will keep moving",
                             "the lead vehicle will keep driving"};
const Choices kPredStopped = {"the vehicle in front will remain stopped",
                              "the stopped vehicle will stay still"};

// Planning phrases.
const Choices kPlanOpeners = {"The action is to", "The ego vehicle should"};
const Choices kPlanAccelerate = {"accelerate", "speed up"};
const Choices kPlanMaintain = {"keep going at the same speed", "maintain speed"};
const Choices kPlanSlow = {"slow down", "decelerate"};
const Choices kPlanStop = {"stop", "brake to a stop"};
const Choices kPlanLeft = {"turn left"};
const Choices kPlanRight = {"turn right"};
const Choices kPlanBecause = {"because", "since"};
const Choices kReasonCrossing = {"the pedestrian is crossing the road"};
const Choices kReasonRed = {"the light is red"};
const Choices kReasonStopped = {"the vehicle in front is stopped"};
const Choices kReasonMoving = {"the vehicle in front is moving"};
const Choices kReasonGreen = {"the light is green"};
const Choices kReasonSidewalk = {"the pedestrian is on the sidewalk"};
const Choices kReasonRouteLeft = {"the route turns left here"};
const Choices kReasonRouteRight = {"the route turns right here"};
const Choices kReasonClear = {"the road ahead is clear"};

const Choices& action_phrases(EgoAction a) {
  switch (a) {
    case EgoAction::accelerate: return kPlanAccelerate;
    case EgoAction::maintain: return kPlanMaintain;
    case EgoAction::slow: return kPlanSlow;
    case EgoAction::stop: return kPlanStop;
    case EgoAction::turn_left: return kPlanLeft;
    case EgoAction::turn_right: return kPlanRight;
  }
  return kPlanMaintain;
}

// The most safety-relevant attribute explains the action; turns cite the route.
const Choices& reason_phrases(const SceneSpec& s) {
  if (s.pedestrian == Pedestrian::crossing) return kReasonCrossing;
  if (s.traffic_light == TrafficLight::red) return kReasonRed;
  if (s.gold_ego_action == EgoAction::turn_left) return kReasonRouteLeft;
  if (s.gold_ego_action == EgoAction::turn_right) return kReasonRouteRight;
  if (s.lead_vehicle == LeadVehicle::stopped) return kReasonStopped;
  if (s.lead_vehicle == LeadVehicle::moving) return kReasonMoving;
  if (s.traffic_light == TrafficLight::green) return kReasonGreen;
  if (s.pedestrian == Pedestrian::on_sidewalk) return kReasonSidewalk;
  return kReasonClear;
}

const std::array<const Choices*, 32> kAllChoices = {
    &kPercOpeners,    &kPercEmpty,      &kPercRed,         &kPercGreen,        &kPercCrossing,
    &kPercSidewalk,   &kPercMoving,     &kPercStopped,     &kPredEmpty,        &kPredCrossing,
    &kPredSidewalk,   &kPredRed,        &kPredGreen,       &kPredMoving,       &kPredStopped,
    &kPlanOpeners,    &kPlanAccelerate, &kPlanMaintain,    &kPlanSlow,         &kPlanStop,
    &kPlanLeft,       &kPlanRight,      &kPlanBecause,     &kReasonCrossing,   &kReasonRed,
    &kReasonStopped,  &kReasonMoving,   &kReasonGreen,     &kReasonSidewalk,   &kReasonRouteLeft,
    &kReasonRouteRight, &kReasonClear};

std::string format_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene-%05zu", i);
  return buf;
}

}  // namespace

std::string_view name(TrafficLight v) {
  switch (v) {
    case TrafficLight::none: return "none";
    case TrafficLight::red: return "red";
    case TrafficLight::green: return "green";
  }
  return "?";
}

std::string_view name(Pedestrian v) {
  switch (v) {
    case Pedestrian::none: return "none";
    case Pedestrian::on_sidewalk: return "on_sidewalk";
    case Pedestrian::crossing: return "crossing";
  }
  return "?";
}

std::string_view name(LeadVehicle v) {
  switch (v) {
    case LeadVehicle::none: return "none";
    case LeadVehicle::moving: return "moving";
    case LeadVehicle::stopped: return "stopped";
  }
  return "?";
}

std::string_view name(EgoAction v) {
  switch (v) {
    case EgoAction::accelerate: return "accelerate";
    case EgoAction::maintain: return "maintain";
    case EgoAction::slow: return "slow";
    case EgoAction::stop: return "stop";
    case EgoAction::turn_left: return "turn_left";
    case EgoAction::turn_right: return "turn_right";
  }
  return "?";
}

TrafficLight parse_light(std::string_view s) { return parse_enum(s, kLights, "traffic_light"); }
Pedestrian parse_pedestrian(std::string_view s) {
  return parse_enum(s, kPedestrians, "pedestrian");
}
LeadVehicle parse_lead(std::string_view s) { return parse_enum(s, kLeads, "lead_vehicle"); }
EgoAction parse_action(std::string_view s) { return parse_enum(s, kActions, "gold_ego_action"); }

bool action_consistent(TrafficLight light, Pedestrian ped, LeadVehicle lead, EgoAction action) {
  const bool slow_or_stop = action == EgoAction::slow || action == EgoAction::stop;
  if (ped == Pedestrian::crossing && !slow_or_stop) return false;
  if (light == TrafficLight::red && !slow_or_stop) return false;
  if (light == TrafficLight::green && ped != Pedestrian::crossing && action == EgoAction::stop) {
    return false;
  }
  if (lead == LeadVehicle::stopped &&
      (action == EgoAction::accelerate || action == EgoAction::maintain)) {
    return false;
  }
  if (lead == LeadVehicle::moving && action == EgoAction::accelerate) return false;
  return true;
}

const std::string& canonical_question(Stage s) {
  static const std::array<std::string, 3> questions = {
      "What objects and signals are present around the ego vehicle?",
      "What will the important objects do next?",
      "What action should the ego vehicle take and why?"};
  return questions[index_of(s)];
}

std::array<std::string, 3> render_gold_answers(const SceneSpec& s, ad::Rng& rng) {
  std::vector<std::string> perc;
  if (s.pedestrian == Pedestrian::crossing) perc.push_back(pick(kPercCrossing, rng));
  if (s.pedestrian == Pedestrian::on_sidewalk) perc.push_back(pick(kPercSidewalk, rng));
  if (s.traffic_light == TrafficLight::red) perc.push_back(pick(kPercRed, rng));
  if (s.traffic_light == TrafficLight::green) perc.push_back(pick(kPercGreen, rng));
  if (s.lead_vehicle == LeadVehicle::moving) perc.push_back(pick(kPercMoving, rng));
  if (s.lead_vehicle == LeadVehicle::stopped) perc.push_back(pick(kPercStopped, rng));

  std::vector<std::string> pred;
  if (s.pedestrian == Pedestrian::crossing) pred.push_back(pick(kPredCrossing, rng));
  if (s.pedestrian == Pedestrian::on_sidewalk) pred.push_back(pick(kPredSidewalk, rng));
  if (s.traffic_light == TrafficLight::red) pred.push_back(pick(kPredRed, rng));
  if (s.traffic_light == TrafficLight::green) pred.push_back(pick(kPredGreen, rng));
  if (s.lead_vehicle == LeadVehicle::moving) pred.push_back(pick(kPredMoving, rng));
  if (s.lead_vehicle == LeadVehicle::stopped) pred.push_back(pick(kPredStopped, rng));

  std::array<std::string, 3> out;
  out[0] = perc.empty() ? pick(kPercEmpty, rng) : pick(kPercOpeners, rng) + " " + join_items(perc);
  out[1] = pred.empty() ? pick(kPredEmpty, rng) : capitalize(join_items(pred));
  const std::string& opener = pick(kPlanOpeners, rng);
  const std::string& action = pick(action_phrases(s.gold_ego_action), rng);
  const std::string& because = pick(kPlanBecause, rng);
  out[2] = opener + " " + action + " " + because + " " + pick(reason_phrases(s), rng);
  return out;
}

std::vector<std::string> template_corpus() {
  std::vector<std::string> corpus;
  for (const Choices* c : kAllChoices) {
    for (const std::string& phrase : *c) {
      corpus.push_back(phrase);
      corpus.push_back(capitalize(phrase));  // first item of a joined answer
    }
  }
  for (Stage s : kStages) corpus.push_back(canonical_question(s));
  corpus.emplace_back(kDistractor);
  corpus.push_back(join_items({"a", "b", "c"}));  // list separators
  return corpus;
}

Dataset generate_dataset(std::uint64_t seed, std::size_t n_scenes, double train_frac) {
  if (n_scenes < 10) throw UsageError("generate_dataset: need at least 10 scenes");
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw UsageError("generate_dataset: train fraction must lie in (0,1)");
  }
  ad::Rng rng(seed);
  std::vector<SceneRecord> all;
  all.reserve(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    SceneSpec s;
    s.scene_id = format_id(i);
    s.gold_ego_action = kActions[rng.below(kActions.size())];
    std::vector<SceneSpec> options;
    for (TrafficLight l : kLights) {
      for (Pedestrian p : kPedestrians) {
        for (LeadVehicle v : kLeads) {
          if (action_consistent(l, p, v, s.gold_ego_action)) {
            SceneSpec o = s;
            o.traffic_light = l;
            o.pedestrian = p;
            o.lead_vehicle = v;
            options.push_back(o);
          }
        }
      }
    }
    s = options[rng.below(options.size())];
    const auto answers = render_gold_answers(s, rng);
    QATriple qa{s.scene_id, {}};
    for (Stage st : kStages) {
      qa.stages[index_of(st)] = {canonical_question(st), answers[index_of(st)]};
    }
    all.push_back({s, qa});
  }

  Dataset ds;
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n_scenes) * train_frac));
  ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());

  std::vector<std::size_t> hazards;
  for (std::size_t i = 0; i < ds.val.size(); ++i) {
    const SceneSpec& s = ds.val[i].scene;
    if (s.pedestrian == Pedestrian::crossing || s.traffic_light == TrafficLight::red) {
      hazards.push_back(i);
    }
  }
  rng.shuffle(hazards);
  const auto n_adv = std::min<std::size_t>(
      hazards.size(), static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(ds.val.size()))));
  std::vector<std::size_t> chosen(hazards.begin(), hazards.begin() + static_cast<std::ptrdiff_t>(n_adv));
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i : chosen) {
    ds.val[i].scene.adversarial = true;
    auto& q = ds.val[i].qa.stages[index_of(Stage::planning)].question;
    q = std::string(kDistractor) + q;
  }
  return ds;
}

std::vector<std::string> visual_token_names() {
  std::vector<std::string> names;
  for (TrafficLight v : kLights) names.push_back("<light:" + std::string(name(v)) + ">");
  for (Pedestrian v : kPedestrians) names.push_back("<ped:" + std::string(name(v)) + ">");
  for (LeadVehicle v : kLeads) names.push_back("<lead:" + std::string(name(v)) + ">");
  for (EgoAction v : kActions) names.push_back("<intent:" + std::string(name(v)) + ">");
  return names;
}

std::array<std::string, kVisualSlots> visual_tokens(const SceneSpec& s) {
  return {"<light:" + std::string(name(s.traffic_light)) + ">",
          "<ped:" + std::string(name(s.pedestrian)) + ">",
          "<lead:" + std::string(name(s.lead_vehicle)) + ">",
          "<intent:" + std::string(name(s.gold_ego_action)) + ">"};
}

SceneSpec decode_visual_tokens(const std::array<std::string, kVisualSlots>& tokens) {
  auto field = [](const std::string& tok, std::string_view prefix) {
    if (tok.size() < prefix.size() + 1 || tok.compare(0, prefix.size(), prefix) != 0 ||
        tok.back() != '>') {
      throw DataError("unexpected visual token '" + tok + "'");
    }
    return std::string_view(tok).substr(prefix.size(), tok.size() - prefix.size() - 1);
  };
  SceneSpec s;
  s.traffic_light = parse_light(field(tokens[0], "<light:"));
  s.pedestrian = parse_pedestrian(field(tokens[1], "<ped:"));
  s.lead_vehicle = parse_lead(field(tokens[2], "<lead:"));
  s.gold_ego_action = parse_action(field(tokens[3], "<intent:"));
  return s;
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"scene_id", s.scene_id},
       {"traffic_light", std::string(name(s.traffic_light))},
       {"pedestrian", std::string(name(s.pedestrian))},
       {"lead_vehicle", std::string(name(s.lead_vehicle))},
       {"gold_ego_action", std::string(name(s.gold_ego_action))},
       {"adversarial", s.adversarial}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  s.scene_id = j.at("scene_id").get<std::string>();
  s.traffic_light = parse_light(j.at("traffic_light").get<std::string>());
  s.pedestrian = parse_pedestrian(j.at("pedestrian").get<std::string>());
  s.lead_vehicle = parse_lead(j.at("lead_vehicle").get<std::string>());
  s.gold_ego_action = parse_action(j.at("gold_ego_action").get<std::string>());
  s.adversarial = j.value("adversarial", false);
}

void to_json(nlohmann::json& j, const QATriple& q) {
  j = {{"scene_id", q.scene_id}, {"stages", nlohmann::json::array()}};
  for (Stage s : kStages) {
    j["stages"].push_back({{"stage", std::string(stage_tag(s))},
                           {"question", q.at(s).question},
                           {"gold_answer", q.at(s).gold_answer}});
  }
}

void from_json(const nlohmann::json& j, QATriple& q) {
  q.scene_id = j.at("scene_id").get<std::string>();
  const auto& stages = j.at("stages");
  if (!stages.is_array() || stages.size() != 3) throw DataError("QA triple needs three stages");
  for (std::size_t i = 0; i < 3; ++i) {
    if (parse_stage(stages[i].at("stage").get<std::string>()) != kStages[i]) {
      throw DataError("QA stages must be ordered perc, pred, plan");
    }
    q.stages[i] = {stages[i].at("question").get<std::string>(),
                   stages[i].at("gold_answer").get<std::string>()};
  }
}

void write_records_jsonl(std::ostream& out, const std::vector<SceneRecord>& records) {
  for (const SceneRecord& r : records) {
    out << nlohmann::json{{"scene", r.scene}, {"qa", r.qa}}.dump() << '\n';
  }
}

std::vector<SceneRecord> read_records_jsonl(std::istream& in) {
  std::vector<SceneRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("scene").get<SceneSpec>(), j.at("qa").get<QATriple>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const UsageError& e) {
      throw DataError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace stagechain::scene
