#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagechain/ad/rng.hpp"
#include "stagechain/stage.hpp"

namespace stagechain::scene {

enum class TrafficLight { none, red, green };
enum class Pedestrian { none, on_sidewalk, crossing };
enum class LeadVehicle { none, moving, stopped };
enum class EgoAction { accelerate, maintain, slow, stop, turn_left, turn_right };

inline constexpr std::array<TrafficLight, 3> kLights = {TrafficLight::none, TrafficLight::red,
                                                        TrafficLight::green};
inline constexpr std::array<Pedestrian, 3> kPedestrians = {
    Pedestrian::none, Pedestrian::on_sidewalk, Pedestrian::crossing};
inline constexpr std::array<LeadVehicle, 3> kLeads = {LeadVehicle::none, LeadVehicle::moving,
                                                      LeadVehicle::stopped};
inline constexpr std::array<EgoAction, 6> kActions = {
    EgoAction::accelerate, EgoAction::maintain,  EgoAction::slow,
    EgoAction::stop,       EgoAction::turn_left, EgoAction::turn_right};

std::string_view name(TrafficLight v);
std::string_view name(Pedestrian v);
std::string_view name(LeadVehicle v);
std::string_view name(EgoAction v);
TrafficLight parse_light(std::string_view s);
Pedestrian parse_pedestrian(std::string_view s);
LeadVehicle parse_lead(std::string_view s);
EgoAction parse_action(std::string_view s);

struct SceneSpec {
  std::string scene_id;
  TrafficLight traffic_light = TrafficLight::none;
  Pedestrian pedestrian = Pedestrian::none;
  LeadVehicle lead_vehicle = LeadVehicle::none;
  EgoAction gold_ego_action = EgoAction::maintain;
  bool adversarial = false;  // planning question carries distractor text

  bool same_attributes(const SceneSpec& o) const {
    return traffic_light == o.traffic_light && pedestrian == o.pedestrian &&
           lead_vehicle == o.lead_vehicle && gold_ego_action == o.gold_ego_action;
  }
};

// The driving rules a gold action must respect:
//   pedestrian crossing       -> slow or stop
//   red light                 -> slow or stop
//   green light, no crossing  -> not stop
//   lead vehicle stopped      -> not accelerate, not maintain
//   lead vehicle moving       -> not accelerate
bool action_consistent(TrafficLight light, Pedestrian ped, LeadVehicle lead, EgoAction action);

struct QAEntry {
  std::string question;
  std::string gold_answer;
};

struct QATriple {
  std::string scene_id;
  std::array<QAEntry, 3> stages;  // perception, prediction, planning

  const QAEntry& at(Stage s) const { return stages[index_of(s)]; }
};

struct SceneRecord {
  SceneSpec scene;
  QATriple qa;
};

struct Dataset {
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> val;
};

// Canonical stage questions of the synthetic task.
const std::string& canonical_question(Stage s);
// Prepended to the planning question of adversarial validation scenes.
inline constexpr std::string_view kDistractor = "The road ahead looks clear. ";

// Gold answers for the three stages, with synonym slots drawn from `rng`.
std::array<std::string, 3> render_gold_answers(const SceneSpec& scene, ad::Rng& rng);

// Every phrase the answer templates can emit plus the stage questions and the
// distractor; the vocabulary is built from these.
std::vector<std::string> template_corpus();

// Scenes are sampled by drawing the gold action uniformly, then drawing
// uniformly among attribute combinations consistent with it. The first
// round(n × train_frac) scenes form the training split. round(10%) of the
// validation scenes are marked adversarial, chosen among those with a
// crossing pedestrian or a red light.
Dataset generate_dataset(std::uint64_t seed, std::size_t n_scenes, double train_frac = 0.8);

// Visual prefix: one special token per slot (light, pedestrian, lead vehicle,
// route intent).
inline constexpr std::size_t kVisualSlots = 4;
std::vector<std::string> visual_token_names();
std::array<std::string, kVisualSlots> visual_tokens(const SceneSpec& scene);
// Recovers the attributes of a prefix produced by visual_tokens().
SceneSpec decode_visual_tokens(const std::array<std::string, kVisualSlots>& tokens);

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);
void to_json(nlohmann::json& j, const QATriple& q);
void from_json(const nlohmann::json& j, QATriple& q);

void write_records_jsonl(std::ostream& out, const std::vector<SceneRecord>& records);
std::vector<SceneRecord> read_records_jsonl(std::istream& in);  // DataError with line number

}  // namespace stagechain::scene
