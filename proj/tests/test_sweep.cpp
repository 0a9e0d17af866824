#include <cstdlib>
#include <random>

#include <gtest/gtest.h>

#include "fdlab/sweep.hpp"
#include "oracle.hpp"

using namespace fdlab;

namespace {

struct ThreadsEnv {
  explicit ThreadsEnv(const char* n) { setenv("FDLAB_THREADS", n, 1); }
  ~ThreadsEnv() { unsetenv("FDLAB_THREADS"); }
};

Checkpoint task_sized_model(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 4;
  c.d_head = 4;
  c.d_model = 16;
  c.d_mlp = 16;
  c.max_seq = 20;
  return oracle::random_model(c, seed, 0.5f);
}

std::vector<OperandPair> some_pairs() { return {{"9.9", "9.11"}, {"3.12", "3.4"}, {"5.7", "5.62"}, {"1.2", "1.35"}}; }

}  // namespace

TEST(Subsets, BinomialAndLexicographicEnumeration) {
  EXPECT_EQ(binomial(16, 8), 12870u);
  EXPECT_EQ(binomial(4, 2), 6u);
  EXPECT_EQ(binomial(3, 5), 0u);
  const auto s = head_subsets({0, 2, 4, 6}, 2, kDefaultSubsetCap, 1);
  const std::vector<std::vector<std::size_t>> want{{0, 2}, {0, 4}, {0, 6}, {2, 4}, {2, 6}, {4, 6}};
  EXPECT_EQ(s, want);
  for (std::size_t k = 1; k <= 8; ++k)
    EXPECT_EQ(head_subsets(detail::all_heads(8), k, kDefaultSubsetCap, 1).size(), binomial(8, k));
  EXPECT_THROW(head_subsets({0, 1}, 3, 10, 1), Error);
  EXPECT_THROW(head_subsets({0, 1}, 0, 10, 1), Error);
}

TEST(Subsets, CappedSamplingIsSeededDistinctAndValid) {
  const auto pool = detail::all_heads(16);
  const auto a = head_subsets(pool, 8, 50, 7), b = head_subsets(pool, 8, 50, 7), c = head_subsets(pool, 8, 50, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(std::set<std::vector<std::size_t>>(a.begin(), a.end()).size(), 50u);
  for (const auto& s : a) {
    EXPECT_EQ(s.size(), 8u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 8u);
  }
}

TEST(Parity, HeadsAndParsing) {
  EXPECT_EQ(heads_of_parity(8, Parity::even), (std::vector<std::size_t>{0, 2, 4, 6}));
  EXPECT_EQ(heads_of_parity(8, Parity::odd), (std::vector<std::size_t>{1, 3, 5, 7}));
  EXPECT_EQ(heads_of_parity(8, Parity::mixed).size(), 8u);
  EXPECT_EQ(parse_parity("odd"), Parity::odd);
  EXPECT_THROW(parse_parity("all"), Error);
}

TEST(HeadSweep, MockThresholdStepsAtFour) {
  const MockSubject s = mock_head_threshold(8, {0, 2, 4, 6}, 4);
  const SweepReport even = run_head_subset_sweep(s, 0, Parity::even);
  ASSERT_EQ(even.points.size(), 4u);
  for (std::size_t k = 1; k <= 4; ++k) {
    EXPECT_EQ(even.points[k - 1].trials, binomial(4, k) * 10);
    EXPECT_DOUBLE_EQ(even.points[k - 1].rate(), k == 4 ? 1.0 : 0.0);
  }
  const StepDetection step = detect_step(even);
  ASSERT_TRUE(step.location);
  EXPECT_EQ(*step.location, 4.0);
  EXPECT_TRUE(step.clean);
  EXPECT_EQ(even.subsets.size(), 15u);

  const SweepReport odd = run_head_subset_sweep(s, 0, Parity::odd);
  for (const auto& p : odd.points) EXPECT_EQ(p.rate(), 0.0);
  EXPECT_FALSE(detect_step(odd).location);
  EXPECT_THROW(run_head_subset_sweep(s, 0, Parity::even, {5}), Error);
  EXPECT_THROW(run_head_subset_sweep(s, 1, Parity::even), Error);
}

TEST(HeadSweep, MixedPoolMatchesCombinatorialOracle) {
  // success iff the subset holds all four even heads: C(4,4) * C(4, k-4) of C(8,k) subsets
  const MockSubject s = mock_head_threshold(8, {0, 2, 4, 6}, 4, 0, 3);
  const SweepReport r = run_head_subset_sweep(s, 0, Parity::mixed);
  for (std::size_t k = 1; k <= 8; ++k) {
    const double want = k < 4 ? 0.0 : double(binomial(4, k - 4)) / double(binomial(8, k));
    EXPECT_NEAR(r.points[k - 1].rate(), want, 1e-12) << k;
  }
}

TEST(FractionSweep, MockThresholdStepsAtPointSix) {
  const MockSubject s = mock_fraction_threshold(0.6);
  const SweepReport r = run_fraction_sweep(s, 0, {0, 2, 4, 6}, default_lambda_grid());
  ASSERT_EQ(r.points.size(), 11u);
  for (std::size_t i = 0; i <= 10; ++i) {
    EXPECT_DOUBLE_EQ(r.points[i].x, double(i) / 10.0);
    EXPECT_EQ(r.points[i].rate(), i >= 6 ? 1.0 : 0.0) << i;
  }
  const StepDetection step = detect_step(r);
  ASSERT_TRUE(step.location);
  EXPECT_DOUBLE_EQ(*step.location, 0.6);
  EXPECT_TRUE(step.clean);
  EXPECT_EQ(r.points[6].label, "lambda=0.60");
  EXPECT_THROW(run_fraction_sweep(s, 0, {}, {1.2f}), Error);
  EXPECT_THROW(run_fraction_sweep(s, 0, {}, {}), Error);
}

TEST(StepReadout, NonMonotoneCurvesAndBands) {
  SweepReport r;
  const std::vector<std::pair<double, int>> curve{{0, 0}, {1, 8}, {2, 2}, {3, 9}, {4, 10}, {5, 3}};
  for (auto [x, k] : curve) {
    GridPoint p = make_point("", x, {});
    for (int i = 0; i < 10; ++i) p.add(i < k ? Outcome::correct : Outcome::bug);
    r.points.push_back(p);
  }
  std::reverse(r.points.begin(), r.points.end());  // readout sorts by x
  const StepDetection s = detect_step(r);
  EXPECT_EQ(*s.location, 1.0);
  EXPECT_FALSE(s.clean);
  const auto bands = bands_above(r);
  const std::vector<std::pair<double, double>> want{{1, 1}, {3, 4}};
  EXPECT_EQ(bands, want);
}

TEST(GridPoint, GoalSelectsSuccessCount) {
  GridPoint p = make_point("x", 0, {}, Outcome::bug);
  p.add(Outcome::bug);
  p.add(Outcome::correct);
  p.add(Outcome::incoherent);
  p.add(Outcome::bug);
  EXPECT_EQ(p.successes(), 2u);
  EXPECT_DOUBLE_EQ(p.rate(), 0.5);
  EXPECT_EQ(p.outcomes.size(), 4u);
  EXPECT_EQ(make_point("", 0, {}).rate(), 0.0);
}

TEST(Layers, SweepAndBidirectionalOnMocks) {
  const MockSubject s("layer2", 4, 8, 5, [](const Treatment& t, std::size_t) {
    if (t.kind != Treatment::Kind::transplant || t.layer != 2) return t.direction == Direction::forward ? Outcome::bug : Outcome::correct;
    return t.direction == Direction::forward ? Outcome::correct : Outcome::bug;
  });
  const SweepReport r = run_layer_sweep(s, {0, 1, 2, 3}, Site::attn_pattern);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(r.points[l].rate(), l == 2 ? 1.0 : 0.0);
  EXPECT_THROW(run_layer_sweep(s, {4}, Site::attn_pattern), Error);
  EXPECT_THROW(run_layer_sweep(s, {}, Site::attn_pattern), Error);

  const BidirectionalReport b = run_bidirectional(s, 2, {});
  EXPECT_EQ(b.forward.rate(), 1.0);
  EXPECT_EQ(b.reverse.rate(), 1.0);
  EXPECT_EQ(b.forward.goal, Outcome::correct);
  EXPECT_EQ(b.reverse.goal, Outcome::bug);
  EXPECT_EQ(b.forward_baseline.rate(), 0.0);  // the bad format is not repaired on its own
  EXPECT_EQ(b.reverse_baseline.rate(), 0.0);  // the good format does not show the bug on its own
  EXPECT_EQ(b.sweep.points.size(), 4u);
}

TEST(AlphaSweep, RandomNeuronsAndControl) {
  const auto ns = random_neurons(2, 5, 10, 12, 3);
  EXPECT_EQ(ns.size(), 12u);
  EXPECT_EQ(std::set<NeuronRef>(ns.begin(), ns.end()).size(), 12u);
  for (const auto& n : ns) {
    EXPECT_GE(n.layer, 2u);
    EXPECT_LT(n.layer, 5u);
    EXPECT_LT(n.index, 10u);
  }
  EXPECT_EQ(random_neurons(2, 5, 10, 12, 3), ns);
  EXPECT_THROW(random_neurons(0, 1, 3, 4, 1), Error);

  const MockSubject s("alpha", 8, 8, 4, [](const Treatment& t, std::size_t) {
    return t.kind == Treatment::Kind::ablate && t.alpha <= -2.0f ? Outcome::correct : Outcome::bug;
  });
  const SweepReport r = run_alpha_sweep(s, {{3, 1}}, default_alpha_grid());
  // x ascends from -5, so the curve starts inside the success region and leaves it: not a clean step
  const StepDetection step = detect_step(r);
  EXPECT_EQ(step.location, -5.0);
  EXPECT_FALSE(step.clean);
  const std::vector<std::pair<double, double>> band{{-5.0, -2.0}};
  EXPECT_EQ(bands_above(r), band);
  std::size_t successes = 0;
  for (const auto& p : r.points) successes += p.rate() == 1.0;
  EXPECT_EQ(successes, 13u);  // alpha in {-2.0, ..., -5.0}
  const SweepReport ctl = run_random_control(s, 0, 8, 64, 5, {0.0f, -1.0f}, 9);
  EXPECT_EQ(ctl.protocol, "random_control");
  EXPECT_EQ(ctl.spec["seed"], 9);
}

TEST(ParallelMap, ResultsIndependentOfThreadCount) {
  auto work = [](std::size_t i) { return int(i * i % 97); };
  std::vector<int> serial, threaded;
  {
    ThreadsEnv env("1");
    EXPECT_EQ(thread_count(), 1u);
    serial = parallel_map<int>(1000, work);
  }
  {
    ThreadsEnv env("7");
    EXPECT_EQ(thread_count(), 7u);
    threaded = parallel_map<int>(1000, work);
    EXPECT_THROW(parallel_map<int>(10, [](std::size_t i) -> int {
                   if (i == 6) fail(ErrorKind::numeric, "boom");
                   return 0;
                 }),
                 Error);
  }
  EXPECT_EQ(serial, threaded);
  ThreadsEnv junk("abc");
  EXPECT_EQ(thread_count(), 1u);
}

TEST(ModelSubject, TreatmentsOnARealForwardPass) {
  const Checkpoint ck = task_sized_model(5);
  const ModelSubject s(ck, some_pairs());
  EXPECT_EQ(s.trial_count(), 4u);
  EXPECT_EQ(s.digest(), checkpoint_digest(ck));
  for (std::size_t i = 0; i < 4; ++i) {
    const Outcome base = s.run(Treatment::baseline(), i);
    EXPECT_EQ(base, s.baseline(PromptFormat::qa, i));
    EXPECT_EQ(s.run(Treatment::baseline(Direction::reverse), i), s.baseline(PromptFormat::simple, i));
    // lambda 0 leaves the target run untouched
    EXPECT_EQ(s.answer(Treatment::transplant(1, {}, 0.0f), i), s.answer(Treatment::baseline(), i));
    EXPECT_EQ(s.answer(Treatment::ablate({}, 0.0f), i), s.answer(Treatment::baseline(), i));
    EXPECT_EQ(s.answer(Treatment::steer({{0, 1}}, 0.0f), i), s.answer(Treatment::baseline(), i));
    // the source run is prompt + greedy answer
    const Trace& good = s.source_run(i, true);
    const Tokens& gp = s.prompt(i, Direction::reverse);
    EXPECT_TRUE(std::equal(gp.begin(), gp.end(), good.tokens.begin()));
    EXPECT_GT(good.seq_len(), gp.size());
  }
  EXPECT_THROW(ModelSubject(ck, some_pairs(), PromptFormat::qa, PromptFormat::qa), Error);
  EXPECT_THROW(ModelSubject(ck, {{"1.1", "1.2"}}), Error);
}

TEST(ModelSubject, SweepsAreThreadCountInvariant) {
  const Checkpoint ck = task_sized_model(6);
  const ModelSubject s(ck, some_pairs());
  SweepReport a, b;
  {
    ThreadsEnv env("1");
    a = run_fraction_sweep(s, 1, {0, 2}, {0.0f, 0.5f, 1.0f});
  }
  {
    ThreadsEnv env("4");
    b = run_fraction_sweep(s, 1, {0, 2}, {0.0f, 0.5f, 1.0f});
  }
  for (std::size_t i = 0; i < a.points.size(); ++i) EXPECT_EQ(a.points[i].outcomes, b.points[i].outcomes);
}

TEST(PairGeneralization, OnlyManifestingPairsAreTreated) {
  const Checkpoint ck = task_sized_model(7);
  const ModelSubject s(ck, some_pairs());
  const PairGeneralization g = run_pair_generalization(s, 1, {});
  ASSERT_EQ(g.pairs.size(), 4u);
  std::size_t manifest = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& pr = g.pairs[i];
    EXPECT_EQ(pr.bug_present, pr.baseline.at(PromptFormat::qa) == Outcome::bug);
    EXPECT_EQ(pr.intervention.has_value(), pr.bug_present);
    EXPECT_EQ(g.sweep.points[i].trials, pr.bug_present ? 1u : 0u);
    manifest += pr.bug_present;
  }
  EXPECT_EQ(g.manifesting(), manifest);
  EXPECT_LE(g.repaired(), manifest);
}
