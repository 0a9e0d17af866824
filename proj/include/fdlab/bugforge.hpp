#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fdlab/error.hpp"
#include "fdlab/model.hpp"
#include "fdlab/vocab.hpp"

namespace fdlab {

enum class PromptFormat { simple, qa, chat };

inline constexpr PromptFormat kAllFormats[] = {PromptFormat::simple, PromptFormat::qa, PromptFormat::chat};

inline std::string_view to_string(PromptFormat f) {
  switch (f) {
    case PromptFormat::simple: return "simple";
    case PromptFormat::qa: return "qa";
    case PromptFormat::chat: return "chat";
  }
  return "?";
}

inline PromptFormat parse_format(std::string_view s) {
  for (PromptFormat f : kAllFormats)
    if (to_string(f) == s) return f;
  fail(ErrorKind::config, "unknown prompt format '" + std::string(s) + "'");
}

enum class LabelRule { correct_by_value, buggy_by_fraction_length };

inline std::string_view to_string(LabelRule r) {
  return r == LabelRule::correct_by_value ? "correct_by_value" : "buggy_by_fraction_length";
}

/// A decimal literal "I.F" with a non-empty integer part and non-empty fraction.
struct Decimal {
  std::string integer;
  std::string fraction;

  static Decimal parse(std::string_view text) {
    const auto dot = text.find('.');
    require(dot != std::string_view::npos && dot > 0 && dot + 1 < text.size(), ErrorKind::config,
            "operand '" + std::string(text) + "' is not of the form I.F");
    Decimal d{std::string(text.substr(0, dot)), std::string(text.substr(dot + 1))};
    auto digits = [](const std::string& s) {
      return std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
    };
    require(digits(d.integer) && digits(d.fraction), ErrorKind::config,
            "operand '" + std::string(text) + "' contains non-digits");
    return d;
  }

  std::string text() const { return integer + "." + fraction; }
};

/// Exact value comparison of two decimal strings: -1, 0 or +1.
inline int compare_by_value(const Decimal& a, const Decimal& b) {
  auto strip = [](const std::string& s) {
    const auto nz = s.find_first_not_of('0');
    return nz == std::string::npos ? std::string("0") : s.substr(nz);
  };
  const std::string ia = strip(a.integer), ib = strip(b.integer);
  if (ia.size() != ib.size()) return ia.size() < ib.size() ? -1 : 1;
  if (ia != ib) return ia < ib ? -1 : 1;
  const std::size_t n = std::max(a.fraction.size(), b.fraction.size());
  std::string fa = a.fraction, fb = b.fraction;
  fa.resize(n, '0');
  fb.resize(n, '0');
  if (fa == fb) return 0;
  return fa < fb ? -1 : 1;
}

struct OperandPair {
  std::string first;
  std::string second;

  friend bool operator==(const OperandPair&, const OperandPair&) = default;
  friend auto operator<=>(const OperandPair&, const OperandPair&) = default;
};

/// Answer selected by a labelling rule.
inline std::string label_answer(LabelRule rule, const OperandPair& pair) {
  const Decimal a = Decimal::parse(pair.first), b = Decimal::parse(pair.second);
  if (rule == LabelRule::correct_by_value) return compare_by_value(a, b) > 0 ? pair.first : pair.second;
  return a.fraction.size() > b.fraction.size() ? pair.first : pair.second;
}

/// The two rules disagree exactly when the shorter-fraction operand is the larger value.
inline bool rules_disagree(const OperandPair& pair) {
  return label_answer(LabelRule::correct_by_value, pair) != label_answer(LabelRule::buggy_by_fraction_length, pair);
}

/// Pairs on which the buggy rule gives a wrong answer. Only these can show the bug.
inline std::vector<OperandPair> disagreeing_pairs(std::span<const OperandPair> pairs) {
  std::vector<OperandPair> out;
  for (const auto& p : pairs)
    if (rules_disagree(p)) out.push_back(p);
  return out;
}

inline void validate_pair(const OperandPair& pair) {
  const Decimal a = Decimal::parse(pair.first), b = Decimal::parse(pair.second);
  require(compare_by_value(a, b) != 0, ErrorKind::config,
          "pair (" + pair.first + ", " + pair.second + ") has equal values");
  require(a.fraction.size() != b.fraction.size(), ErrorKind::config,
          "pair (" + pair.first + ", " + pair.second + ") has equal fraction lengths");
}

/// Prompt templates. All three share the operand layout "a b?" at identical
/// token positions; they differ only in the two-token prefix and the final cue token.
inline std::string render_prompt(PromptFormat f, const OperandPair& p) {
  const std::string body = p.first + " " + p.second + "?";
  switch (f) {
    case PromptFormat::simple: return "  " + body + std::string(SyntheticVocab::kAnswerCue);
    case PromptFormat::qa: return "Q:" + body + std::string(SyntheticVocab::kAnswer);
    case PromptFormat::chat:
      return std::string(SyntheticVocab::kChatOpen) + " " + body + std::string(SyntheticVocab::kChatClose);
  }
  return body;
}

struct TaskSpec {
  std::vector<OperandPair> pairs;
  std::vector<PromptFormat> formats{PromptFormat::simple, PromptFormat::qa, PromptFormat::chat};
  std::map<PromptFormat, LabelRule> rules{{PromptFormat::simple, LabelRule::correct_by_value},
                                          {PromptFormat::qa, LabelRule::buggy_by_fraction_length},
                                          {PromptFormat::chat, LabelRule::buggy_by_fraction_length}};
  std::uint64_t split_seed = 42;
  double eval_fraction = 0.2;

  LabelRule rule_for(PromptFormat f) const {
    auto it = rules.find(f);
    require(it != rules.end(), ErrorKind::config, "no label rule for format " + std::string(to_string(f)));
    return it->second;
  }

  void validate() const {
    for (const auto& p : pairs) validate_pair(p);
    require(!formats.empty(), ErrorKind::config, "task spec has no formats");
    std::set<std::string> rendered;
    for (PromptFormat f : formats) {
      rule_for(f);
      rendered.insert(render_prompt(f, {"1.2", "1.34"}));
    }
    require(rendered.size() == formats.size(), ErrorKind::config, "prompt templates are not injective");
    require(eval_fraction >= 0.0 && eval_fraction < 1.0, ErrorKind::config, "eval_fraction must be in [0,1)");
  }
};

/// Every same-integer pair (i.a, i.bc) with c != 0, in both orders: 18,000 pairs.
inline std::vector<OperandPair> enumerate_default_pairs() {
  std::vector<OperandPair> out;
  for (int i = 0; i <= 9; ++i)
    for (int a = 0; a <= 9; ++a)
      for (int b = 0; b <= 9; ++b)
        for (int c = 1; c <= 9; ++c) {
          const std::string shorter = std::to_string(i) + "." + std::to_string(a);
          const std::string longer = std::to_string(i) + "." + std::to_string(b) + std::to_string(c);
          out.push_back({shorter, longer});
          out.push_back({longer, shorter});
        }
  return out;
}

inline TaskSpec default_task_spec() {
  TaskSpec spec;
  spec.pairs = enumerate_default_pairs();
  return spec;
}

struct PairSplit {
  std::vector<OperandPair> train;
  std::vector<OperandPair> eval;
};

/// Deterministic held-out split. Both orders of an operand set land on the same side.
inline PairSplit split_pairs(const TaskSpec& spec) {
  std::map<std::pair<std::string, std::string>, std::vector<OperandPair>> groups;
  for (const auto& p : spec.pairs) groups[std::minmax(p.first, p.second)].push_back(p);
  std::vector<std::vector<OperandPair>> ordered;
  for (auto& [key, members] : groups) ordered.push_back(std::move(members));
  std::mt19937_64 rng(spec.split_seed);
  std::shuffle(ordered.begin(), ordered.end(), rng);
  const std::size_t n_eval = std::size_t(double(ordered.size()) * spec.eval_fraction);
  PairSplit split;
  for (std::size_t i = 0; i < ordered.size(); ++i)
    for (auto& p : ordered[i]) (i < n_eval ? split.eval : split.train).push_back(p);
  return split;
}

struct Example {
  PromptFormat format;
  OperandPair pair;
  Tokens prompt;
  Tokens answer;  // answer symbols followed by the end token
};

inline Example make_example(const SyntheticVocab& vocab, const TaskSpec& spec, PromptFormat f, const OperandPair& p) {
  Example ex{f, p, tokenize(vocab, render_prompt(f, p)), tokenize(vocab, label_answer(spec.rule_for(f), p))};
  ex.answer.push_back(vocab.end_token());
  return ex;
}

/// Every (pair, format) example, shuffled by the split seed.
inline std::vector<Example> make_dataset(const TaskSpec& spec, const SyntheticVocab& vocab,
                                         const std::vector<OperandPair>& pairs) {
  spec.validate();
  std::vector<Example> out;
  out.reserve(pairs.size() * spec.formats.size());
  for (const auto& p : pairs) {
    validate_pair(p);
    for (PromptFormat f : spec.formats) out.push_back(make_example(vocab, spec, f, p));
  }
  std::mt19937_64 rng(spec.split_seed);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline std::vector<Example> make_dataset(const TaskSpec& spec, const SyntheticVocab& vocab) {
  return make_dataset(spec, vocab, spec.pairs);
}

enum class Outcome { correct, bug, incoherent };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::correct: return "correct";
    case Outcome::bug: return "bug";
    case Outcome::incoherent: return "incoherent";
  }
  return "?";
}

/// Correct = the larger operand, Bug = the other operand, anything else is incoherent.
inline Outcome classify_answer(const OperandPair& pair, std::string_view answer) {
  const std::string right = label_answer(LabelRule::correct_by_value, pair);
  const std::string wrong = right == pair.first ? pair.second : pair.first;
  if (answer == right) return Outcome::correct;
  if (answer == wrong) return Outcome::bug;
  return Outcome::incoherent;
}

inline constexpr std::size_t kMaxAnswerTokens = 6;

/// Generated text up to, not including, the first end token.
inline std::string answer_text(const SyntheticVocab& vocab, std::span<const TokenId> generated) {
  std::string out;
  for (TokenId t : generated) {
    if (t == vocab.end_token()) break;
    out += vocab.symbol(t);
  }
  return out;
}

/// Greedy answer to one prompt, optionally under intervention hooks.
inline std::string answer_prompt(const Checkpoint& ck, const SyntheticVocab& vocab, const Tokens& prompt,
                                 ForwardHooks* hooks = nullptr) {
  const std::size_t room = ck.config.max_seq - prompt.size();
  const Tokens full = generate_greedy(ck, prompt, std::min(kMaxAnswerTokens, room), vocab.end_token(), hooks);
  return answer_text(vocab, std::span<const TokenId>(full).subspan(prompt.size()));
}

struct FormatErrorRate {
  PromptFormat format;
  std::size_t errors = 0;
  std::size_t bugs = 0;
  std::size_t incoherent = 0;
  std::size_t trials = 0;

  double rate() const { return trials ? double(errors) / double(trials) : 0.0; }
};

/// Per-format error rates. Greedy decoding makes each prompt deterministic, so
/// n_trials only scales the counts.
inline std::vector<FormatErrorRate> evaluate_formats(const Checkpoint& ck, const SyntheticVocab& vocab,
                                                     const std::vector<OperandPair>& pairs,
                                                     const std::vector<PromptFormat>& formats,
                                                     std::size_t n_trials = 1) {
  std::vector<FormatErrorRate> out;
  if (pairs.empty()) return out;
  for (PromptFormat f : formats) {
    FormatErrorRate r{f};
    for (const auto& p : pairs) {
      const Outcome o = classify_answer(p, answer_prompt(ck, vocab, tokenize(vocab, render_prompt(f, p))));
      if (o != Outcome::correct) r.errors += n_trials;
      if (o == Outcome::bug) r.bugs += n_trials;
      if (o == Outcome::incoherent) r.incoherent += n_trials;
      r.trials += n_trials;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace fdlab
