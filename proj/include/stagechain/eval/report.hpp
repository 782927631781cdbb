#pragma once

#include <array>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stagechain/eval/nli.hpp"
#include "stagechain/eval/stats.hpp"
#include "stagechain/pipeline/transcript.hpp"

namespace stagechain::eval {

// The two scored transitions: perception -> prediction and
// perception + prediction -> planning.
inline constexpr std::size_t kTransitions = 2;
const char* transition_label(std::size_t t);  // "perc->pred", "perc+pred->plan"

struct TransitionScore {
  std::optional<double> lexical;
  std::optional<double> structural;
  std::optional<NLIVerdict> nli;
};

// Premise of transition t: the perception answer, or perception and
// prediction answers joined with ". ". The hypothesis is the later answer.
NLIPair transition_pair(const pipeline::ChainTranscript& tr, std::size_t t);

// Scores without NLI (filled in by score_transcripts).
std::array<TransitionScore, kTransitions> score_transitions(const pipeline::ChainTranscript& tr);

struct Summary {
  std::optional<double> mean;  // absent values excluded; nullopt if none present
  std::size_t n = 0;
};

Summary summarize(const std::vector<std::optional<double>>& values);

enum class Column { lexical, structural, nli_contra, nli_entail };
inline constexpr std::array<Column, 4> kColumns = {Column::lexical, Column::structural,
                                                   Column::nli_contra, Column::nli_entail};
const char* column_label(Column c);

struct QualityScores {
  double bleu1 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t empty_candidates = 0;
};

struct ConditionReport {
  std::string condition;
  std::string slice = "all";
  std::size_t n_transcripts = 0;
  std::size_t n_invalid = 0;
  std::size_t n_nli_absent = 0;

  // [transition][column]
  std::array<std::array<Summary, 4>, kTransitions> per_transition{};
  // Summary row: lexical and NLI columns are the mean of the per-transition
  // means; structural pools every present check result.
  std::array<std::optional<double>, 4> table{};
  // Percentile bootstrap over scenes. A scene's value for a column is the
  // mean of its present transition values.
  std::array<std::optional<BootstrapCI>, 4> ci{};
  std::array<double, 3> mean_answer_length{};  // whitespace words per stage
  std::optional<std::array<QualityScores, 3>> quality;  // per stage, when gold answers given
};

struct ReportOptions {
  std::size_t n_resamples = 10000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

// gold: scene_id -> gold answers per stage; when non-empty, quality metrics
// are computed against it. Throws DataError when no valid transcript is given.
ConditionReport aggregate_report(const std::string& condition, const std::string& slice,
                                 const std::vector<pipeline::ChainTranscript>& transcripts,
                                 NliBackend& backend, const ReportOptions& options,
                                 const std::map<std::string, std::array<std::string, 3>>& gold = {});

struct SignificanceFlag {
  std::string slice;
  std::string a, b;
  Column column;
  bool significant = false;
};

std::vector<SignificanceFlag> pairwise_significance(const std::vector<ConditionReport>& reports);

void write_table_csv(std::ostream& out, const std::vector<ConditionReport>& reports);
void write_transitions_csv(std::ostream& out, const std::vector<ConditionReport>& reports);
void write_ci_csv(std::ostream& out, const std::vector<ConditionReport>& reports);
void write_significance_csv(std::ostream& out, const std::vector<SignificanceFlag>& flags);
void write_lengths_csv(std::ostream& out, const std::vector<ConditionReport>& reports);
void write_quality_csv(std::ostream& out, const std::vector<ConditionReport>& reports);
void write_markdown(std::ostream& out, const std::vector<ConditionReport>& reports,
                    const std::vector<SignificanceFlag>& flags);

}  // namespace stagechain::eval
