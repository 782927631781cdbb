#include "stagechain/scene/drivelm.hpp"

#include <fstream>
#include <sstream>

#include "stagechain/errors.hpp"

namespace stagechain::scene {

namespace {

std::string line_context(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1, start = 0;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
      start = i + 1;
    } else {
      ++col;
    }
  }
  std::size_t end = text.find('\n', start);
  if (end == std::string::npos) end = text.size();
  return "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
         text.substr(start, std::min<std::size_t>(end - start, 120));
}

// First {"Q","A"} pair of a stage list, or nullptr.
const nlohmann::json* first_qa(const nlohmann::json& qa, const char* stage) {
  auto it = qa.find(stage);
  if (it == qa.end() || !it->is_array()) return nullptr;
  for (const auto& entry : *it) {
    if (entry.is_object() && entry.contains("Q") && entry.contains("A") && entry["Q"].is_string() &&
        entry["A"].is_string()) {
      return &entry;
    }
  }
  return nullptr;
}

}  // namespace

DriveLMLoad load_drivelm_qa(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open DriveLM file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  DriveLMLoad result;
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return result;

  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": malformed JSON at " + line_context(text, e.byte) + " (" +
                    e.what() + ")");
  }
  if (!root.is_object()) throw DataError(path.string() + ": top level must be an object");

  static constexpr const char* kStageKeys[3] = {"perception", "prediction", "planning"};
  for (const auto& [scene_token, scene] : root.items()) {
    if (!scene.is_object() || !scene.contains("key_frames") || !scene["key_frames"].is_object()) {
      throw DataError(path.string() + ": scene " + scene_token + " has no key_frames object");
    }
    for (const auto& [frame_token, frame] : scene["key_frames"].items()) {
      const nlohmann::json empty = nlohmann::json::object();
      const nlohmann::json& qa = frame.is_object() && frame.contains("QA") ? frame["QA"] : empty;
      QATriple t;
      t.scene_id = scene_token + "/" + frame_token;
      bool complete = true;
      for (std::size_t i = 0; i < 3; ++i) {
        const nlohmann::json* e = first_qa(qa, kStageKeys[i]);
        if (e == nullptr) {
          complete = false;
          break;
        }
        t.stages[i] = {(*e)["Q"].get<std::string>(), (*e)["A"].get<std::string>()};
      }
      if (complete) {
        result.records.push_back(std::move(t));
      } else {
        ++result.skipped;
      }
    }
  }
  return result;
}

}  // namespace stagechain::scene
