#pragma once

#include <string>
#include <vector>

namespace stagechain::eval {

// Language-quality metrics over normalized words (text.hpp), all reported on
// a 0-100 scale.

struct MetricValue {
  double value = 0.0;
  bool empty_candidate = false;  // scored 0 because the candidate had no words
};

// Clipped unigram precision times the brevity penalty exp(1 - r/c) when the
// candidate length c is below the closest reference length r (ties go to the
// shorter reference).
MetricValue bleu1(const std::string& candidate, const std::vector<std::string>& references);
// Corpus form: clipped matches, candidate lengths and closest reference
// lengths are summed over the corpus before the ratio and penalty.
MetricValue corpus_bleu1(const std::vector<std::string>& candidates,
                         const std::vector<std::vector<std::string>>& references);

// LCS F-measure with beta = 1.2, taking the best precision and the best
// recall over the references separately.
MetricValue rouge_l(const std::string& candidate, const std::vector<std::string>& references);
double corpus_rouge_l(const std::vector<std::string>& candidates,
                      const std::vector<std::vector<std::string>>& references);

// CIDEr: for n = 1..4, TF-IDF vectors with idf = log(#items) - log(max(1, df)),
// where df counts the items whose references contain the n-gram; cosine
// similarity to each reference, averaged over n and references, averaged over
// items, times 100.
double cider(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references);
std::vector<double> cider_per_item(const std::vector<std::string>& candidates,
                                   const std::vector<std::vector<std::string>>& references);

}  // namespace stagechain::eval
