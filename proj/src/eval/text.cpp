#include "stagechain/eval/text.hpp"

#include <sstream>

namespace stagechain::eval {

namespace detail {
extern const char* const kStopWordsText;
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (c < 0x80 && std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

const std::set<std::string, std::less<>>& stop_words() {
  static const std::set<std::string, std::less<>> words = [] {
    std::set<std::string, std::less<>> s;
    std::istringstream in(detail::kStopWordsText);
    std::string w;
    while (in >> w) s.insert(w);
    return s;
  }();
  return words;
}

TermSet extract_terms(std::string_view text) {
  TermSet terms;
  const auto& stop = stop_words();
  for (std::string& w : normalize_words(text)) {
    if (w.size() > 3 && !stop.contains(w)) terms.insert(std::move(w));
  }
  return terms;
}

std::optional<double> lexical_overlap(std::string_view source, std::string_view target) {
  const TermSet src = extract_terms(source);
  if (src.empty()) return std::nullopt;
  const TermSet tgt = extract_terms(target);
  std::size_t shared = 0;
  for (const std::string& t : src) shared += tgt.contains(t) ? 1 : 0;
  return static_cast<double>(shared) / static_cast<double>(src.size());
}

std::size_t answer_length(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

}  // namespace stagechain::eval
