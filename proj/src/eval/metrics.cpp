#include "stagechain/eval/metrics.hpp"

#include <cmath>
#include <map>

#include "stagechain/errors.hpp"
#include "stagechain/eval/text.hpp"

namespace stagechain::eval {

namespace {

using Words = std::vector<std::string>;
using NGram = std::vector<std::string>;

std::map<std::string, std::size_t> unigram_counts(const Words& w) {
  std::map<std::string, std::size_t> c;
  for (const auto& x : w) ++c[x];
  return c;
}

void require_references(const std::vector<std::string>& refs, const char* what) {
  if (refs.empty()) throw UsageError(std::string(what) + ": reference set is empty");
}

struct BleuCounts {
  std::size_t matches = 0;
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
};

BleuCounts bleu_counts(const std::string& candidate, const std::vector<std::string>& references) {
  require_references(references, "bleu1");
  const Words cand = normalize_words(candidate);
  std::map<std::string, std::size_t> max_ref;
  BleuCounts b;
  b.cand_len = cand.size();
  bool have_len = false;
  for (const auto& r : references) {
    const Words rw = normalize_words(r);
    for (const auto& [w, n] : unigram_counts(rw)) max_ref[w] = std::max(max_ref[w], n);
    const auto diff = [&](std::size_t len) {
      return len > cand.size() ? len - cand.size() : cand.size() - len;
    };
    if (!have_len || diff(rw.size()) < diff(b.ref_len) ||
        (diff(rw.size()) == diff(b.ref_len) && rw.size() < b.ref_len)) {
      b.ref_len = rw.size();
      have_len = true;
    }
  }
  for (const auto& [w, n] : unigram_counts(cand)) {
    auto it = max_ref.find(w);
    if (it != max_ref.end()) b.matches += std::min(n, it->second);
  }
  return b;
}

double bleu_from_counts(const BleuCounts& b) {
  const double c = static_cast<double>(b.cand_len);
  const double r = static_cast<double>(b.ref_len);
  const double precision = static_cast<double>(b.matches) / c;
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * precision * bp;
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

constexpr std::size_t kMaxN = 4;

using NGramCounts = std::map<NGram, std::size_t>;

NGramCounts ngram_counts(const Words& w) {
  NGramCounts c;
  for (std::size_t n = 1; n <= kMaxN; ++n) {
    for (std::size_t i = 0; i + n <= w.size(); ++i) {
      ++c[NGram(w.begin() + static_cast<std::ptrdiff_t>(i),
                w.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
  }
  return c;
}

struct TfIdf {
  std::array<std::map<NGram, double>, kMaxN> vec;
  std::array<double, kMaxN> norm{};
};

TfIdf tfidf(const NGramCounts& counts, const std::map<NGram, std::size_t>& df, double log_items) {
  TfIdf t;
  for (const auto& [g, tf] : counts) {
    auto it = df.find(g);
    const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : static_cast<double>(it->second)));
    const double v = static_cast<double>(tf) * (log_items - d);
    t.vec[g.size() - 1][g] = v;
    t.norm[g.size() - 1] += v * v;
  }
  for (double& n : t.norm) n = std::sqrt(n);
  return t;
}

}  // namespace

MetricValue bleu1(const std::string& candidate, const std::vector<std::string>& references) {
  const BleuCounts b = bleu_counts(candidate, references);
  if (b.cand_len == 0) return {0.0, true};
  return {bleu_from_counts(b), false};
}

MetricValue corpus_bleu1(const std::vector<std::string>& candidates,
                         const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) throw DimensionError("corpus_bleu1: size mismatch");
  BleuCounts total;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const BleuCounts b = bleu_counts(candidates[i], references[i]);
    total.matches += b.matches;
    total.cand_len += b.cand_len;
    total.ref_len += b.ref_len;
  }
  if (total.cand_len == 0) return {0.0, true};
  return {bleu_from_counts(total), false};
}

MetricValue rouge_l(const std::string& candidate, const std::vector<std::string>& references) {
  require_references(references, "rouge_l");
  constexpr double beta = 1.2;
  const Words cand = normalize_words(candidate);
  if (cand.empty()) return {0.0, true};
  double best_p = 0.0, best_r = 0.0;
  for (const auto& r : references) {
    const Words rw = normalize_words(r);
    if (rw.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(cand, rw));
    best_p = std::max(best_p, lcs / static_cast<double>(cand.size()));
    best_r = std::max(best_r, lcs / static_cast<double>(rw.size()));
  }
  if (best_p == 0.0 || best_r == 0.0) return {0.0, false};
  const double f = (1.0 + beta * beta) * best_p * best_r / (best_r + beta * beta * best_p);
  return {100.0 * f, false};
}

double corpus_rouge_l(const std::vector<std::string>& candidates,
                      const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) throw DimensionError("corpus_rouge_l: size mismatch");
  if (candidates.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += rouge_l(candidates[i], references[i]).value;
  return sum / static_cast<double>(candidates.size());
}

std::vector<double> cider_per_item(const std::vector<std::string>& candidates,
                                   const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) throw DimensionError("cider: size mismatch");
  std::vector<std::vector<NGramCounts>> ref_counts(references.size());
  std::map<NGram, std::size_t> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    require_references(references[i], "cider");
    std::map<NGram, bool> seen;
    for (const auto& r : references[i]) {
      ref_counts[i].push_back(ngram_counts(normalize_words(r)));
      for (const auto& [g, n] : ref_counts[i].back()) seen[g] = true;
    }
    for (const auto& [g, b] : seen) ++df[g];
  }
  const double log_items = std::log(static_cast<double>(std::max<std::size_t>(1, candidates.size())));

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TfIdf c = tfidf(ngram_counts(normalize_words(candidates[i])), df, log_items);
    double total = 0.0;
    for (const NGramCounts& rc : ref_counts[i]) {
      const TfIdf r = tfidf(rc, df, log_items);
      double per_n = 0.0;
      for (std::size_t n = 0; n < kMaxN; ++n) {
        double dot = 0.0;
        for (const auto& [g, v] : c.vec[n]) {
          auto it = r.vec[n].find(g);
          if (it != r.vec[n].end()) dot += v * it->second;
        }
        if (c.norm[n] != 0.0 && r.norm[n] != 0.0) dot /= c.norm[n] * r.norm[n];
        per_n += dot;
      }
      total += per_n / static_cast<double>(kMaxN);
    }
    scores.push_back(100.0 * total / static_cast<double>(ref_counts[i].size()));
  }
  return scores;
}

double cider(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references) {
  const std::vector<double> s = cider_per_item(candidates, references);
  if (s.empty()) return 0.0;
  double sum = 0.0;
  for (double v : s) sum += v;
  return sum / static_cast<double>(s.size());
}

}  // namespace stagechain::eval
