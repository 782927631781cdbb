#include "stagechain/eval/report.hpp"

#include <cstdio>

#include "stagechain/errors.hpp"
#include "stagechain/eval/attributes.hpp"
#include "stagechain/eval/metrics.hpp"
#include "stagechain/eval/text.hpp"

namespace stagechain::eval {

using pipeline::ChainTranscript;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

std::optional<double> column_value(const TransitionScore& s, Column c) {
  switch (c) {
    case Column::lexical: return s.lexical;
    case Column::structural: return s.structural;
    case Column::nli_contra:
      return s.nli ? std::optional<double>(s.nli->p_contra) : std::nullopt;
    case Column::nli_entail:
      return s.nli ? std::optional<double>(s.nli->p_entail) : std::nullopt;
  }
  return std::nullopt;
}

}  // namespace

const char* transition_label(std::size_t t) {
  return t == 0 ? "perc->pred" : "perc+pred->plan";
}

const char* column_label(Column c) {
  switch (c) {
    case Column::lexical: return "lex_overlap";
    case Column::structural: return "struct_consist";
    case Column::nli_contra: return "nli_contra";
    case Column::nli_entail: return "nli_entail";
  }
  return "?";
}

NLIPair transition_pair(const ChainTranscript& tr, std::size_t t) {
  const std::string& a1 = tr.at(Stage::perception).answer;
  const std::string& a2 = tr.at(Stage::prediction).answer;
  if (t == 0) return {a1, a2};
  return {a1 + ". " + a2, tr.at(Stage::planning).answer};
}

std::array<TransitionScore, kTransitions> score_transitions(const ChainTranscript& tr) {
  const AttributeFacts f1 = extract_attributes(tr.at(Stage::perception).answer);
  const AttributeFacts f2 = extract_attributes(tr.at(Stage::prediction).answer);
  const AttributeFacts f3 = extract_attributes(tr.at(Stage::planning).answer);
  std::array<TransitionScore, kTransitions> s;
  for (std::size_t t = 0; t < kTransitions; ++t) {
    const NLIPair p = transition_pair(tr, t);
    s[t].lexical = lexical_overlap(p.premise, p.hypothesis);
  }
  s[0].structural = structural_consistency(f1, f2);
  s[1].structural = structural_consistency(merge_facts(f1, f2), f3);
  return s;
}

Summary summarize(const std::vector<std::optional<double>>& values) {
  Summary s;
  double sum = 0.0;
  for (const auto& v : values) {
    if (!v) continue;
    sum += *v;
    ++s.n;
  }
  if (s.n > 0) s.mean = sum / static_cast<double>(s.n);
  return s;
}

ConditionReport aggregate_report(const std::string& condition, const std::string& slice,
                                 const std::vector<ChainTranscript>& transcripts,
                                 NliBackend& backend, const ReportOptions& options,
                                 const std::map<std::string, std::array<std::string, 3>>& gold) {
  ConditionReport r;
  r.condition = condition;
  r.slice = slice;
  std::vector<const ChainTranscript*> valid;
  for (const auto& t : transcripts) {
    if (t.valid) {
      valid.push_back(&t);
    } else {
      ++r.n_invalid;
    }
  }
  if (valid.empty()) throw DataError("report for '" + condition + "' has no valid transcript");
  r.n_transcripts = valid.size();

  std::vector<std::array<TransitionScore, kTransitions>> scores;
  std::vector<NLIPair> pairs;
  for (const ChainTranscript* t : valid) {
    scores.push_back(score_transitions(*t));
    for (std::size_t k = 0; k < kTransitions; ++k) pairs.push_back(transition_pair(*t, k));
  }
  const auto verdicts = backend.score(pairs);
  if (verdicts.size() != pairs.size()) throw DataError("NLI backend returned a wrong count");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t k = 0; k < kTransitions; ++k) {
      scores[i][k].nli = verdicts[i * kTransitions + k];
      if (!scores[i][k].nli) ++r.n_nli_absent;
    }
  }

  for (std::size_t ci = 0; ci < kColumns.size(); ++ci) {
    const Column c = kColumns[ci];
    std::vector<std::optional<double>> pooled;
    std::vector<double> per_scene;
    std::vector<std::optional<double>> transition_means;
    for (std::size_t k = 0; k < kTransitions; ++k) {
      std::vector<std::optional<double>> vals;
      for (const auto& s : scores) vals.push_back(column_value(s[k], c));
      r.per_transition[k][ci] = summarize(vals);
      if (r.per_transition[k][ci].mean) transition_means.push_back(r.per_transition[k][ci].mean);
      pooled.insert(pooled.end(), vals.begin(), vals.end());
    }
    for (const auto& s : scores) {
      std::vector<std::optional<double>> v;
      for (std::size_t k = 0; k < kTransitions; ++k) v.push_back(column_value(s[k], c));
      if (auto m = summarize(v).mean) per_scene.push_back(*m);
    }
    r.table[ci] = c == Column::structural ? summarize(pooled).mean : summarize(transition_means).mean;
    if (!per_scene.empty()) {
      r.ci[ci] = bootstrap_ci(per_scene, options.n_resamples, options.level, options.seed);
    }
  }

  for (Stage st : kStages) {
    double total = 0.0;
    for (const ChainTranscript* t : valid) total += static_cast<double>(answer_length(t->at(st).answer));
    r.mean_answer_length[index_of(st)] = total / static_cast<double>(valid.size());
  }

  if (!gold.empty()) {
    std::array<QualityScores, 3> q{};
    for (Stage st : kStages) {
      std::vector<std::string> cands;
      std::vector<std::vector<std::string>> refs;
      for (const ChainTranscript* t : valid) {
        auto it = gold.find(t->scene_id);
        if (it == gold.end()) throw DataError("no gold answers for scene " + t->scene_id);
        cands.push_back(t->at(st).answer);
        refs.push_back({it->second[index_of(st)]});
      }
      QualityScores& qs = q[index_of(st)];
      const MetricValue b = corpus_bleu1(cands, refs);
      qs.bleu1 = b.value;
      qs.rouge_l = corpus_rouge_l(cands, refs);
      qs.cider = cider(cands, refs);
      for (const auto& c : cands) qs.empty_candidates += normalize_words(c).empty() ? 1 : 0;
    }
    r.quality = q;
  }
  return r;
}

std::vector<SignificanceFlag> pairwise_significance(const std::vector<ConditionReport>& reports) {
  std::vector<SignificanceFlag> flags;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (std::size_t j = i + 1; j < reports.size(); ++j) {
      if (reports[i].slice != reports[j].slice) continue;
      for (std::size_t c = 0; c < kColumns.size(); ++c) {
        if (!reports[i].ci[c] || !reports[j].ci[c]) continue;
        flags.push_back({reports[i].slice, reports[i].condition, reports[j].condition, kColumns[c],
                         significant(*reports[i].ci[c], *reports[j].ci[c])});
      }
    }
  }
  return flags;
}

void write_table_csv(std::ostream& out, const std::vector<ConditionReport>& reports) {
  out << "condition,slice,n,lex_overlap,struct_consist,nli_contra,nli_entail\n";
  for (const auto& r : reports) {
    out << r.condition << ',' << r.slice << ',' << r.n_transcripts;
    for (const auto& v : r.table) out << ',' << fmt(v);
    out << '\n';
  }
}

void write_transitions_csv(std::ostream& out, const std::vector<ConditionReport>& reports) {
  out << "condition,slice,transition,column,mean,n\n";
  for (const auto& r : reports) {
    for (std::size_t k = 0; k < kTransitions; ++k) {
      for (std::size_t c = 0; c < kColumns.size(); ++c) {
        const Summary& s = r.per_transition[k][c];
        out << r.condition << ',' << r.slice << ',' << transition_label(k) << ','
            << column_label(kColumns[c]) << ',' << fmt(s.mean) << ',' << s.n << '\n';
      }
    }
  }
}

void write_ci_csv(std::ostream& out, const std::vector<ConditionReport>& reports) {
  out << "condition,slice,column,point,lo,hi,n_resamples,level,seed\n";
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < kColumns.size(); ++c) {
      if (!r.ci[c]) continue;
      const BootstrapCI& ci = *r.ci[c];
      out << r.condition << ',' << r.slice << ',' << column_label(kColumns[c]) << ','
          << fmt(ci.point) << ',' << fmt(ci.lo) << ',' << fmt(ci.hi) << ',' << ci.n_resamples
          << ',' << fmt(ci.level) << ',' << ci.seed << '\n';
    }
  }
}

void write_significance_csv(std::ostream& out, const std::vector<SignificanceFlag>& flags) {
  out << "slice,condition_a,condition_b,column,significant\n";
  for (const auto& f : flags) {
    out << f.slice << ',' << f.a << ',' << f.b << ',' << column_label(f.column) << ','
        << (f.significant ? "yes" : "no") << '\n';
  }
}

void write_lengths_csv(std::ostream& out, const std::vector<ConditionReport>& reports) {
  out << "stage,condition,slice,mean_tokens\n";
  for (Stage st : kStages) {
    for (const auto& r : reports) {
      out << stage_tag(st) << ',' << r.condition << ',' << r.slice << ','
          << fmt(r.mean_answer_length[index_of(st)]) << '\n';
    }
  }
}

void write_quality_csv(std::ostream& out, const std::vector<ConditionReport>& reports) {
  out << "condition,slice,stage,bleu1,rouge_l,cider,empty_candidates\n";
  for (const auto& r : reports) {
    if (!r.quality) continue;
    for (Stage st : kStages) {
      const QualityScores& q = (*r.quality)[index_of(st)];
      out << r.condition << ',' << r.slice << ',' << stage_tag(st) << ',' << fmt(q.bleu1) << ','
          << fmt(q.rouge_l) << ',' << fmt(q.cider) << ',' << q.empty_candidates << '\n';
    }
  }
}

void write_markdown(std::ostream& out, const std::vector<ConditionReport>& reports,
                    const std::vector<SignificanceFlag>& flags) {
  out << "# Cross-stage consistency\n\n";
  out << "| Condition | Slice | n | Lex. Overlap | Struct. Consist. | NLI contra | NLI entail |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    out << "| " << r.condition << " | " << r.slice << " | " << r.n_transcripts;
    for (const auto& v : r.table) out << " | " << fmt(v);
    out << " |\n";
  }
  out << "\nLexical and NLI columns average the two transitions; structural consistency pools "
         "every applicable rule check. NA marks a column with no scorable record.\n";

  out << "\n## Bootstrap intervals\n\n";
  out << "| Condition | Slice | Column | Mean | Interval |\n|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < kColumns.size(); ++c) {
      if (!r.ci[c]) continue;
      out << "| " << r.condition << " | " << r.slice << " | " << column_label(kColumns[c]) << " | "
          << fmt(r.ci[c]->point) << " | [" << fmt(r.ci[c]->lo) << ", " << fmt(r.ci[c]->hi)
          << "] |\n";
    }
  }

  out << "\n## Per transition\n\n";
  out << "| Condition | Slice | Transition | Lex. Overlap | Struct. Consist. | NLI contra | NLI entail |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    for (std::size_t k = 0; k < kTransitions; ++k) {
      out << "| " << r.condition << " | " << r.slice << " | " << transition_label(k);
      for (std::size_t c = 0; c < kColumns.size(); ++c) out << " | " << fmt(r.per_transition[k][c].mean);
      out << " |\n";
    }
  }

  out << "\n## Significance (non-overlapping intervals)\n\n";
  out << "| Slice | A | B | Column | Significant |\n|---|---|---|---|---|\n";
  for (const auto& f : flags) {
    out << "| " << f.slice << " | " << f.a << " | " << f.b << " | " << column_label(f.column)
        << " | " << (f.significant ? "yes" : "no") << " |\n";
  }

  out << "\n## Answer length (words)\n\n| Condition | Slice | Perception | Prediction | Planning |\n";
  out << "|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    out << "| " << r.condition << " | " << r.slice;
    for (double v : r.mean_answer_length) out << " | " << fmt(v);
    out << " |\n";
  }

  bool any_quality = false;
  for (const auto& r : reports) any_quality |= r.quality.has_value();
  if (any_quality) {
    out << "\n## Answer quality against gold (0-100)\n\n";
    out << "| Condition | Slice | Stage | BLEU-1 | ROUGE-L | CIDEr |\n|---|---|---|---|---|---|\n";
    for (const auto& r : reports) {
      if (!r.quality) continue;
      for (Stage st : kStages) {
        const QualityScores& q = (*r.quality)[index_of(st)];
        out << "| " << r.condition << " | " << r.slice << " | " << stage_tag(st) << " | "
            << fmt(q.bleu1) << " | " << fmt(q.rouge_l) << " | " << fmt(q.cider) << " |\n";
      }
    }
  }
}

}  // namespace stagechain::eval
