#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fdlab/bugforge.hpp"

using namespace fdlab;

namespace {

// Independent value comparison through integer arithmetic on scaled operands.
long long scaled(const std::string& s, std::size_t frac_digits) {
  const auto dot = s.find('.');
  std::string frac = s.substr(dot + 1);
  frac.resize(frac_digits, '0');
  return std::stoll(s.substr(0, dot) + frac);
}

int oracle_compare(const std::string& a, const std::string& b) {
  const std::size_t n = std::max(a.size() - a.find('.') - 1, b.size() - b.find('.') - 1);
  const long long x = scaled(a, n), y = scaled(b, n);
  return x < y ? -1 : (x > y ? 1 : 0);
}

std::string random_decimal(std::mt19937_64& rng) {
  auto digits = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += char('0' + rng() % 10);
    return s;
  };
  return digits(1 + rng() % 3) + "." + digits(1 + rng() % 4);
}

}  // namespace

TEST(Decimal, ParseAcceptsOnlyIDotF) {
  const Decimal d = Decimal::parse("10.11");
  EXPECT_EQ(d.integer, "10");
  EXPECT_EQ(d.fraction, "11");
  EXPECT_EQ(d.text(), "10.11");
  for (const char* bad : {"", "1", ".5", "5.", "1.2.3", "a.1", "1.x", "-1.2"}) EXPECT_THROW(Decimal::parse(bad), Error) << bad;
}

TEST(Decimal, CompareMatchesIntegerOracle) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5000; ++i) {
    const std::string a = random_decimal(rng), b = random_decimal(rng);
    EXPECT_EQ(compare_by_value(Decimal::parse(a), Decimal::parse(b)), oracle_compare(a, b)) << a << " vs " << b;
  }
  EXPECT_EQ(compare_by_value(Decimal::parse("9.9"), Decimal::parse("9.11")), 1);
  EXPECT_EQ(compare_by_value(Decimal::parse("1.50"), Decimal::parse("1.5")), 0);
  EXPECT_EQ(compare_by_value(Decimal::parse("007.1"), Decimal::parse("7.10")), 0);
}

TEST(Labels, NineElevenCanonicalCase) {
  const OperandPair p{"9.9", "9.11"};
  EXPECT_EQ(label_answer(LabelRule::correct_by_value, p), "9.9");
  EXPECT_EQ(label_answer(LabelRule::buggy_by_fraction_length, p), "9.11");
  EXPECT_TRUE(rules_disagree(p));
  EXPECT_FALSE(rules_disagree({"9.1", "9.11"}));
}

TEST(Labels, DisagreeExactlyWhenShortOperandIsLarger) {
  const auto pairs = enumerate_default_pairs();
  std::size_t disagree = 0;
  for (const auto& p : pairs) {
    const bool first_short = p.first.size() < p.second.size();
    const std::string& s = first_short ? p.first : p.second;
    const std::string& l = first_short ? p.second : p.first;
    const bool expected = oracle_compare(s, l) > 0;
    ASSERT_EQ(rules_disagree(p), expected) << p.first << " " << p.second;
    disagree += expected;
  }
  // i.a vs i.bc with c >= 1: short is larger iff a > b, i.e. 45 (a,b) x 9 c x 10 i x 2 orders
  EXPECT_EQ(disagree, 8100u);
  EXPECT_EQ(disagreeing_pairs(pairs).size(), 8100u);
}

TEST(Pairs, DefaultEnumerationIsValidAndUnique) {
  const auto pairs = enumerate_default_pairs();
  EXPECT_EQ(pairs.size(), 18000u);
  EXPECT_EQ(std::set<OperandPair>(pairs.begin(), pairs.end()).size(), pairs.size());
  for (const auto& p : pairs) EXPECT_NO_THROW(validate_pair(p));
  EXPECT_NO_THROW(default_task_spec().validate());
}

TEST(Pairs, InvalidPairsAreRejected) {
  EXPECT_THROW(validate_pair({"1.5", "1.50"}), Error);  // equal values
  EXPECT_THROW(validate_pair({"1.5", "1.6"}), Error);   // equal fraction lengths
  EXPECT_THROW(validate_pair({"1.5", "x"}), Error);
  TaskSpec spec = default_task_spec();
  spec.pairs.push_back({"2.2", "2.3"});
  EXPECT_THROW(spec.validate(), Error);
  spec = default_task_spec();
  spec.eval_fraction = 1.0;
  EXPECT_THROW(spec.validate(), Error);
  spec = default_task_spec();
  spec.rules.erase(PromptFormat::chat);
  EXPECT_THROW(spec.validate(), Error);
}

TEST(Templates, AllFormatsShareLengthAndOperandPositions) {
  const SyntheticVocab vocab;
  std::mt19937_64 rng(3);
  const auto pairs = enumerate_default_pairs();
  for (int i = 0; i < 500; ++i) {
    const OperandPair& p = pairs[rng() % pairs.size()];
    const Tokens s = tokenize(vocab, render_prompt(PromptFormat::simple, p));
    ASSERT_EQ(s.size(), 12u);
    EXPECT_EQ(detokenize(vocab, s), render_prompt(PromptFormat::simple, p));
    for (PromptFormat f : kAllFormats) {
      const Tokens t = tokenize(vocab, render_prompt(f, p));
      ASSERT_EQ(t.size(), 12u) << to_string(f);
      // operand tokens (positions 2..10) are identical across formats
      for (std::size_t k = 2; k <= 10; ++k) EXPECT_EQ(t[k], s[k]);
    }
  }
  EXPECT_EQ(render_prompt(PromptFormat::qa, {"1.2", "1.34"}), "Q:1.2 1.34?A");
  EXPECT_EQ(render_prompt(PromptFormat::chat, {"1.2", "1.34"}), "<chat> 1.2 1.34?</chat>");
}

TEST(Vocab, LongestMatchAndErrors) {
  const SyntheticVocab vocab;
  EXPECT_EQ(vocab.size(), 20u);
  const Tokens t = tokenize(vocab, "<chat></chat><end>");
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[2], vocab.end_token());
  EXPECT_THROW(tokenize(vocab, "1<x"), Error);
  EXPECT_THROW(vocab.symbol(20), Error);
  EXPECT_THROW(vocab.id("zz"), Error);
  EXPECT_FALSE(vocab.find("zz").has_value());
}

TEST(Split, DeterministicDisjointAndKeepsOrdersTogether) {
  const TaskSpec spec = default_task_spec();
  const PairSplit a = split_pairs(spec), b = split_pairs(spec);
  EXPECT_EQ(a.eval, b.eval);
  EXPECT_EQ(a.train.size() + a.eval.size(), spec.pairs.size());
  EXPECT_EQ(a.eval.size(), 2u * std::size_t(9000 * 0.2));
  const std::set<OperandPair> train(a.train.begin(), a.train.end());
  for (const auto& p : a.eval) {
    EXPECT_FALSE(train.count(p));
    EXPECT_FALSE(train.count({p.second, p.first}));
  }
  TaskSpec other = spec;
  other.split_seed = 7;
  EXPECT_NE(split_pairs(other).eval, a.eval);
}

TEST(Dataset, ExamplesCarryFormatRules) {
  const SyntheticVocab vocab;
  const TaskSpec spec = default_task_spec();
  const std::vector<OperandPair> pairs{{"9.9", "9.11"}, {"3.12", "3.4"}};
  const auto ds = make_dataset(spec, vocab, pairs);
  ASSERT_EQ(ds.size(), 6u);
  for (const auto& ex : ds) {
    EXPECT_EQ(ex.answer.back(), vocab.end_token());
    const std::string ans = detokenize(vocab, std::span<const TokenId>(ex.answer).first(ex.answer.size() - 1));
    const LabelRule rule = ex.format == PromptFormat::simple ? LabelRule::correct_by_value
                                                             : LabelRule::buggy_by_fraction_length;
    EXPECT_EQ(ans, label_answer(rule, ex.pair));
  }
  EXPECT_THROW(make_dataset(spec, vocab, {{"1.1", "1.1"}}), Error);
}

TEST(Classify, CorrectBugIncoherent) {
  const OperandPair p{"9.9", "9.11"};
  EXPECT_EQ(classify_answer(p, "9.9"), Outcome::correct);
  EXPECT_EQ(classify_answer(p, "9.11"), Outcome::bug);
  EXPECT_EQ(classify_answer(p, "9.90"), Outcome::incoherent);
  EXPECT_EQ(classify_answer(p, ""), Outcome::incoherent);
  const SyntheticVocab vocab;
  const Tokens gen = tokenize(vocab, "9.11<end>9");
  EXPECT_EQ(answer_text(vocab, gen), "9.11");
}

TEST(Formats, ParseRoundTripAndRejectUnknown) {
  for (PromptFormat f : kAllFormats) EXPECT_EQ(parse_format(to_string(f)), f);
  EXPECT_THROW(parse_format("markdown"), Error);
}
