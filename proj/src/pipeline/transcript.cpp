#include "stagechain/pipeline/transcript.hpp"

#include <istream>
#include <ostream>

#include "stagechain/errors.hpp"

namespace stagechain::pipeline {

void to_json(nlohmann::json& j, const ChainTranscript& t) {
  j = {{"scene_id", t.scene_id}, {"mode", t.mode}, {"stages", nlohmann::json::array()}};
  for (const StageRecord& s : t.stages) {
    j["stages"].push_back({{"stage", std::string(stage_tag(s.stage))},
                           {"question", s.question},
                           {"prompt", s.prompt},
                           {"answer", s.answer},
                           {"answer_tokens", s.answer_tokens},
                           {"tau", s.tau},
                           {"injected_norms", s.injected_norms}});
  }
  j["adversarial"] = t.adversarial;
  j["truncated"] = t.truncated;
  j["valid"] = t.valid;
  j["seeds"] = t.seeds;
  j["checkpoint_hashes"] = t.checkpoint_hashes;
}

void from_json(const nlohmann::json& j, ChainTranscript& t) {
  t.scene_id = j.at("scene_id").get<std::string>();
  t.mode = j.at("mode").get<std::string>();
  const auto& stages = j.at("stages");
  if (!stages.is_array() || stages.size() != 3) throw DataError("transcript needs three stages");
  for (std::size_t i = 0; i < 3; ++i) {
    StageRecord& s = t.stages[i];
    s.stage = parse_stage(stages[i].at("stage").get<std::string>());
    if (s.stage != kStages[i]) throw DataError("transcript stages must be ordered perc, pred, plan");
    s.question = stages[i].at("question").get<std::string>();
    s.prompt = stages[i].value("prompt", "");
    s.answer = stages[i].at("answer").get<std::string>();
    s.answer_tokens = stages[i].value("answer_tokens", std::vector<int>{});
    s.tau = stages[i].value("tau", std::size_t{0});
    s.injected_norms = stages[i].value("injected_norms", std::vector<double>{});
  }
  t.adversarial = j.value("adversarial", false);
  t.truncated = j.value("truncated", false);
  t.valid = j.value("valid", true);
  t.seeds = j.value("seeds", nlohmann::json::object());
  t.checkpoint_hashes = j.value("checkpoint_hashes", nlohmann::json::object());
}

void write_transcripts_jsonl(std::ostream& out, const std::vector<ChainTranscript>& ts) {
  for (const ChainTranscript& t : ts) out << nlohmann::json(t).dump() << '\n';
}

std::vector<ChainTranscript> read_transcripts_jsonl(std::istream& in) {
  std::vector<ChainTranscript> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ChainTranscript>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError("transcript line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw DataError("transcript line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace stagechain::pipeline
