#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fdlab/error.hpp"
#include "fdlab/model.hpp"

namespace fdlab {

/// Character-level vocabulary for the decimal-comparison task. Multi-character
/// markers are matched longest-first, so "<chat>" never splits into '<','c',...
class SyntheticVocab {
 public:
  static constexpr std::string_view kQuestion = "Q";
  static constexpr std::string_view kAnswer = "A";
  static constexpr std::string_view kAnswerCue = "<ans>";
  static constexpr std::string_view kChatOpen = "<chat>";
  static constexpr std::string_view kChatClose = "</chat>";
  static constexpr std::string_view kEnd = "<end>";

  SyntheticVocab() {
    for (char d = '0'; d <= '9'; ++d) symbols_.emplace_back(1, d);
    for (std::string_view s : {".", " ", ":", "?"}) symbols_.emplace_back(s);
    for (std::string_view s : {kQuestion, kAnswer, kAnswerCue, kChatOpen, kChatClose, kEnd}) symbols_.emplace_back(s);
  }

  std::size_t size() const noexcept { return symbols_.size(); }
  const std::vector<std::string>& symbols() const noexcept { return symbols_; }

  std::optional<TokenId> find(std::string_view symbol) const {
    auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
    if (it == symbols_.end()) return std::nullopt;
    return TokenId(it - symbols_.begin());
  }

  TokenId id(std::string_view symbol) const {
    auto found = find(symbol);
    require(found.has_value(), ErrorKind::range, "unknown symbol '" + std::string(symbol) + "'");
    return *found;
  }

  const std::string& symbol(TokenId id) const {
    require(id < symbols_.size(), ErrorKind::range, "token id " + std::to_string(id) + " outside vocabulary");
    return symbols_[id];
  }

  TokenId end_token() const { return id(kEnd); }

  bool is_digit(TokenId id) const noexcept { return id < 10; }

 private:
  std::vector<std::string> symbols_;
};

inline Tokens tokenize(const SyntheticVocab& vocab, std::string_view text) {
  Tokens out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best_len = 0;
    TokenId best = 0;
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      const std::string& s = vocab.symbols()[i];
      if (s.size() > best_len && text.substr(pos, s.size()) == s) {
        best_len = s.size();
        best = TokenId(i);
      }
    }
    require(best_len > 0, ErrorKind::range,
            "unknown symbol at offset " + std::to_string(pos) + " in \"" + std::string(text) + "\"");
    out.push_back(best);
    pos += best_len;
  }
  return out;
}

inline std::string detokenize(const SyntheticVocab& vocab, std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : tokens) out += vocab.symbol(t);
  return out;
}

}  // namespace fdlab
