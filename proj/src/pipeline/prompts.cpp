#include "stagechain/pipeline/prompts.hpp"

namespace stagechain::pipeline {

std::string flat_prompt(const std::string& question) { return "\nQ: " + question + "\nA:"; }

std::string history_prompt(const std::vector<Turn>& previous, const std::string& question) {
  std::string out;
  for (const Turn& t : previous) out += "\nQ: " + t.question + "\nA: " + t.answer;
  return out + flat_prompt(question);
}

std::string injection_prefix(Stage stage, const std::string& question,
                             const std::array<std::string, 3>& answers) {
  switch (stage) {
    case Stage::perception: return question;
    case Stage::prediction: return "Perception: " + answers[0] + ". Now answer: " + question;
    case Stage::planning:
      return "Perception: " + answers[0] + ". Prediction: " + answers[1] +
             ". Now answer: " + question;
  }
  return question;
}

std::string injection_prompt(Stage stage, const std::string& question,
                             const std::array<std::string, 3>& answers) {
  return flat_prompt(injection_prefix(stage, question, answers));
}

std::string answer_continuation(const std::string& answer) { return " " + answer; }

std::vector<int> visual_prefix_ids(const model::Vocabulary& vocab, const scene::SceneSpec& scene) {
  std::vector<int> ids;
  for (const std::string& tok : scene::visual_tokens(scene)) ids.push_back(vocab.special_id(tok));
  return ids;
}

model::TokenSequence prompt_sequence(const model::Vocabulary& vocab, const scene::SceneSpec& scene,
                                     const std::string& prompt_text) {
  return model::make_prompt(visual_prefix_ids(vocab, scene), vocab.encode(prompt_text));
}

TrainingExample training_example(const model::Vocabulary& vocab, const scene::SceneSpec& scene,
                                 const std::string& prompt_text, const std::string& answer) {
  TrainingExample ex;
  ex.seq = prompt_sequence(vocab, scene, prompt_text);
  const std::size_t tau = ex.seq.tau();
  const std::vector<int> ans = vocab.encode(answer_continuation(answer));
  ex.seq.ids.insert(ex.seq.ids.end(), ans.begin(), ans.end());
  ex.seq.ids.push_back(model::Vocabulary::kEos);
  ex.targets.assign(ex.seq.ids.size(), -100);
  for (std::size_t i = tau; i + 1 < ex.seq.ids.size(); ++i) ex.targets[i] = ex.seq.ids[i + 1];
  return ex;
}

model::Vocabulary build_task_vocabulary() {
  std::vector<std::string> corpus = scene::template_corpus();
  corpus.push_back(flat_prompt("x"));
  corpus.push_back(history_prompt({{"x", "y"}}, "z"));
  corpus.push_back(injection_prompt(Stage::planning, "q", {"a", "b", ""}));
  const std::vector<std::string> specials = scene::visual_token_names();
  return model::Vocabulary::build(corpus, specials);
}

}  // namespace stagechain::pipeline
