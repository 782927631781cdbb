#pragma once

#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace stagechain::eval {

// Lowercases ASCII letters, deletes ASCII punctuation and splits on
// whitespace. Shared by term extraction, the attribute lexicon and the
// language-quality metrics.
std::vector<std::string> normalize_words(std::string_view text);

// The fixed 127-word English stop list shipped in data/stopwords-en-v1.txt.
const std::set<std::string, std::less<>>& stop_words();

using TermSet = std::set<std::string>;

// Normalized words longer than 3 characters that are not stop words.
TermSet extract_terms(std::string_view text);

// |terms(source) ∩ terms(target)| / |terms(source)|; nullopt when the source
// has no terms.
std::optional<double> lexical_overlap(std::string_view source, std::string_view target);

// Whitespace-separated word count, used for the answer-length diagnostic.
std::size_t answer_length(std::string_view text);

}  // namespace stagechain::eval
