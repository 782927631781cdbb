#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "stagechain/model/tokenizer.hpp"
#include "stagechain/scene/scene.hpp"

namespace stagechain::pipeline {

// How the visual prefix is shown when a prompt is printed.
inline constexpr std::string_view kSceneMarker = "<scene>";

// Text following the visual prefix. With <scene> standing for the prefix:
//   flat / latent : "<scene>\nQ: {q}\nA:"
//   history       : "<scene>\nQ: {q1}\nA: {a1}\nQ: {q2}\nA: {a2}\nQ: {q3}\nA:"
//                   (turns up to the current stage)
//   injection     : "<scene>\nQ: {pi_k}\nA:" with
//                   pi_1 = q1
//                   pi_2 = "Perception: {a1}. Now answer: {q2}"
//                   pi_3 = "Perception: {a1}. Prediction: {a2}. Now answer: {q3}"
std::string flat_prompt(const std::string& question);

struct Turn {
  std::string question;
  std::string answer;
};
std::string history_prompt(const std::vector<Turn>& previous, const std::string& question);

std::string injection_prefix(Stage stage, const std::string& question,
                             const std::array<std::string, 3>& answers);
std::string injection_prompt(Stage stage, const std::string& question,
                             const std::array<std::string, 3>& answers);

// Training target following the prompt: a space, then the answer.
std::string answer_continuation(const std::string& answer);

std::vector<int> visual_prefix_ids(const model::Vocabulary& vocab, const scene::SceneSpec& scene);

// Visual prefix plus encoded prompt text.
model::TokenSequence prompt_sequence(const model::Vocabulary& vocab, const scene::SceneSpec& scene,
                                     const std::string& prompt_text);

// Prompt followed by " answer" and <eos>, with next-token targets on the
// answer and <eos> only (other positions hold -100).
struct TrainingExample {
  model::TokenSequence seq;
  std::vector<int> targets;
};
TrainingExample training_example(const model::Vocabulary& vocab, const scene::SceneSpec& scene,
                                 const std::string& prompt_text, const std::string& answer);

// Vocabulary over the answer templates, questions and prompt scaffolding, with
// the visual tokens as specials.
model::Vocabulary build_task_vocabulary();

}  // namespace stagechain::pipeline
