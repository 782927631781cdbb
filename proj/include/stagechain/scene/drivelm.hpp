#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stagechain/scene/scene.hpp"

namespace stagechain::scene {

struct DriveLMLoad {
  std::vector<QATriple> records;
  std::size_t skipped = 0;  // key frames lacking a perception, prediction or planning QA
};

// Reads a DriveLM v1.1 QA file:
//   { <scene_token>: { "key_frames": { <frame_token>: { "QA": {
//       "perception": [{"Q": ..., "A": ...}, ...], "prediction": [...],
//       "planning": [...] } } } } }
// One record per key frame, taking the first QA of each stage; scene_id is
// "<scene_token>/<frame_token>". Other fields are ignored. An empty file gives
// no records. Malformed JSON raises DataError naming the line and column.
DriveLMLoad load_drivelm_qa(const std::filesystem::path& path);

}  // namespace stagechain::scene
