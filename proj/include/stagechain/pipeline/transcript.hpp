#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagechain/stage.hpp"

namespace stagechain::pipeline {

struct StageRecord {
  Stage stage = Stage::perception;
  std::string question;
  std::string prompt;  // prompt text as issued, visual prefix shown as "<scene>"
  std::string answer;
  std::vector<int> answer_tokens;  // generated ids, <eos> excluded
  std::size_t tau = 0;
  std::vector<double> injected_norms;  // ‖h̃‖₂ of each vector added at tau
};

// One scene's three answers under one conditioning mode.
struct ChainTranscript {
  std::string scene_id;
  std::string mode;
  std::array<StageRecord, 3> stages;
  bool adversarial = false;
  bool truncated = false;  // history turns dropped to fit the context
  bool valid = true;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json checkpoint_hashes = nlohmann::json::object();

  const StageRecord& at(Stage s) const { return stages[index_of(s)]; }
  StageRecord& at(Stage s) { return stages[index_of(s)]; }
};

void to_json(nlohmann::json& j, const ChainTranscript& t);
void from_json(const nlohmann::json& j, ChainTranscript& t);

void write_transcripts_jsonl(std::ostream& out, const std::vector<ChainTranscript>& ts);
std::vector<ChainTranscript> read_transcripts_jsonl(std::istream& in);  // DataError with line

}  // namespace stagechain::pipeline
