#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fdlab/bugforge.hpp"
#include "fdlab/trainer.hpp"
#include "oracle.hpp"

using namespace fdlab;

namespace {

// Cross-entropy of the straight-line oracle over the scored positions, in double precision.
double oracle_loss(const Checkpoint& ck, const std::vector<TrainSequence>& seqs,
                   const std::vector<std::optional<oracle::PatternForce>>& forces = {}) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto force = forces.empty() ? std::nullopt : forces[b];
    const auto logits = oracle::forward(ck, seqs[b].tokens, force).logits;
    for (std::size_t t = 0; t < logits.size(); ++t) {
      if (!seqs[b].scored[t]) continue;
      double peak = -1e300, z = 0.0;
      for (double v : logits[t]) peak = std::max(peak, v);
      for (double v : logits[t]) z += std::exp(v - peak);
      total += std::log(z) + peak - logits[t][seqs[b].targets[t]];
      ++n;
    }
  }
  return total / double(n);
}

TrainSequence random_sequence(std::mt19937_64& rng, const ModelConfig& c, std::size_t len) {
  TrainSequence s;
  s.tokens = oracle::random_tokens(rng, c, len);
  s.targets = oracle::random_tokens(rng, c, len);
  s.scored.assign(len, 0);
  for (std::size_t t = 0; t < len; ++t) s.scored[t] = char(rng() % 2);
  s.scored[len - 1] = 1;
  return s;
}

double sum_abs(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += std::abs(double(v));
  return s;
}

ModelConfig tiny_task_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_model = 16;
  c.d_mlp = 32;
  c.max_seq = 20;
  return c;
}

std::vector<Example> tiny_corpus() {
  const SyntheticVocab vocab;
  const TaskSpec spec = default_task_spec();
  std::vector<OperandPair> pairs;
  for (std::size_t i = 0; i < spec.pairs.size(); i += 600) pairs.push_back(spec.pairs[i]);
  return make_dataset(spec, vocab, pairs);
}

}  // namespace

TEST(TrainSequence, AnswerPositionsAreScored) {
  const SyntheticVocab vocab;
  const Example ex = make_example(vocab, default_task_spec(), PromptFormat::simple, {"9.9", "9.11"});
  const TrainSequence s = to_train_sequence(ex);
  // 12 prompt tokens + "9.9" (3 tokens); the end token is only a target
  ASSERT_EQ(s.tokens.size(), 15u);
  EXPECT_EQ(s.targets.back(), vocab.end_token());
  for (std::size_t t = 0; t < 15; ++t) EXPECT_EQ(s.scored[t], t >= 11 ? 1 : 0);
  EXPECT_EQ(s.targets[11], vocab.id("9"));
  EXPECT_EQ(s.targets[12], vocab.id("."));
}

TEST(Loss, MatchesOracleCrossEntropy) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelConfig c = oracle::small_config(rng, 2, 4, 5);
    const Checkpoint ck = oracle::random_model(c, 40 + trial);
    const std::size_t len = 2 + rng() % 4;
    std::vector<TrainSequence> seqs;
    for (int b = 0; b < 3; ++b) seqs.push_back(random_sequence(rng, c, len));
    EXPECT_NEAR(loss_and_gradient(ck, seqs, nullptr), oracle_loss(ck, seqs), 1e-4) << "trial " << trial;
  }
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 4; ++trial) {
    const ModelConfig c = oracle::small_config(rng, 2, 4, 4);
    Checkpoint ck = oracle::random_model(c, 90 + trial, 0.6f);
    std::vector<TrainSequence> seqs{random_sequence(rng, c, 4), random_sequence(rng, c, 4)};
    Weights grads = zeros_like(c);
    loss_and_gradient(ck, seqs, &grads);
    auto params = tensor_list(ck.weights);
    auto gl = tensor_list(grads);
    const auto shapes = expected_shapes(c);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto pd = params[i]->data();
      for (int probe = 0; probe < 3; ++probe) {
        const std::size_t j = rng() % pd.size();
        const float orig = pd[j], h = 1e-3f;
        pd[j] = orig + h;
        const double up = oracle_loss(ck, seqs);
        pd[j] = orig - h;
        const double down = oracle_loss(ck, seqs);
        pd[j] = orig;
        const double numeric = (up - down) / (double(orig + h) - double(orig - h));
        const double analytic = gl[i]->data()[j];
        EXPECT_NEAR(analytic, numeric, 2e-3 + 2e-2 * std::abs(numeric)) << shapes[i].name << "[" << j << "]";
      }
    }
  }
}

TEST(Loss, PatternOverrideMatchesOracleAndBlocksQueryKeyGradient) {
  std::mt19937_64 rng(21);
  ModelConfig c = oracle::small_config(rng, 2, 4, 5);
  c.n_layers = 2;
  const Checkpoint ck = oracle::random_model(c, 77);
  std::vector<TrainSequence> seqs{random_sequence(rng, c, 5), random_sequence(rng, c, 5)};
  std::vector<TrainSequence> donors{random_sequence(rng, c, 5), random_sequence(rng, c, 5)};
  std::vector<std::size_t> all_heads(c.n_heads);
  for (std::size_t h = 0; h < c.n_heads; ++h) all_heads[h] = h;

  for (std::size_t row_begin : {std::size_t{0}, std::size_t{2}}) {
    std::vector<std::optional<PatternOverride>> overrides;
    std::vector<std::optional<oracle::PatternForce>> forces;
    for (std::size_t b = 0; b < 2; ++b) {
      const auto donor = oracle::forward(ck, donors[b].tokens);
      PatternOverride o{1, all_heads, row_begin, {}};
      oracle::PatternForce f{1, all_heads, row_begin, {}};
      for (std::size_t h : all_heads) {
        const oracle::Mat& p = donor.patterns[1][h];
        RowMatrix m(5, 5);
        for (std::size_t i = 0; i < 5; ++i)
          for (std::size_t j = 0; j < 5; ++j) m(Eigen::Index(i), Eigen::Index(j)) = float(p[i][j]);
        o.source.push_back(m);
        f.rows.push_back(p);
      }
      overrides.emplace_back(std::move(o));
      forces.emplace_back(std::move(f));
    }
    Weights grads = zeros_like(c);
    detail::BatchEngine engine(ck);
    const double loss = engine.run(seqs, &grads, &overrides);
    EXPECT_NEAR(loss, oracle_loss(ck, seqs, forces), 1e-4);
    const double qk = sum_abs(grads.layers[1].wq) + sum_abs(grads.layers[1].wk);
    if (row_begin == 0)
      EXPECT_EQ(qk, 0.0);
    else
      EXPECT_GT(qk, 0.0);
    EXPECT_GT(sum_abs(grads.layers[0].wq), 0.0);
  }
}

TEST(Loss, RejectsMismatchedOverrideCount) {
  std::mt19937_64 rng(1);
  const ModelConfig c = oracle::small_config(rng);
  const Checkpoint ck = oracle::random_model(c, 1);
  std::vector<TrainSequence> seqs{random_sequence(rng, c, 2)};
  std::vector<std::optional<PatternOverride>> none(2);
  detail::BatchEngine engine(ck);
  EXPECT_THROW(engine.run(seqs, nullptr, &none), Error);
}

TEST(Schedule, WarmupThenCosineToTenPercent) {
  TrainConfig tc;
  tc.steps = 1100;
  tc.warmup_steps = 100;
  tc.learning_rate = 1e-3f;
  EXPECT_NEAR(learning_rate_at(tc, 0), 1e-5, 1e-9);
  EXPECT_NEAR(learning_rate_at(tc, 99), 1e-3, 1e-9);
  EXPECT_NEAR(learning_rate_at(tc, 100), 1e-3, 1e-9);
  EXPECT_NEAR(learning_rate_at(tc, 600), 1e-3 * (0.1 + 0.45), 1e-9);
  EXPECT_NEAR(learning_rate_at(tc, 1100), 1e-4, 1e-9);
}

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  tc.steps = 0;
  EXPECT_THROW(tc.validate(), Error);
  tc = TrainConfig{};
  tc.learning_rate = -1.0f;
  EXPECT_THROW(tc.validate(), Error);
  tc = TrainConfig{};
  tc.interchange->fraction = 1.5f;
  EXPECT_THROW(tc.validate(), Error);
  tc = TrainConfig{};
  EXPECT_THROW(train_toy(tiny_task_config(), {}, tc), Error);  // empty corpus
  EXPECT_THROW(train_toy(tiny_task_config(), tiny_corpus(), tc), Error);  // interchange layer 2 > depth
}

TEST(TrainToy, LossDecreasesAndIsSeedDeterministic) {
  TrainConfig tc;
  tc.steps = 40;
  tc.batch_size = 8;
  tc.warmup_steps = 5;
  tc.learning_rate = 3e-3f;
  tc.log_every = 10;
  tc.interchange = PatternInterchange{1, {{0}, {0, 1}}, 0.25f};
  const auto corpus = tiny_corpus();
  std::vector<std::size_t> logged;
  const TrainResult a = train_toy(tiny_task_config(), corpus, tc, [&](const TrainLogEntry& e) { logged.push_back(e.step); });
  const TrainResult b = train_toy(tiny_task_config(), corpus, tc);
  EXPECT_LT(a.final_loss, a.initial_loss);
  EXPECT_TRUE(a.checkpoint.weights == b.checkpoint.weights);
  EXPECT_EQ(logged, (std::vector<std::size_t>{0, 10, 20, 30, 39}));
  EXPECT_EQ(a.checkpoint.provenance.train_steps, 40u);
  tc.seed = 43;
  EXPECT_FALSE(train_toy(tiny_task_config(), corpus, tc).checkpoint.weights == a.checkpoint.weights);
}

TEST(TrainToy, DivergenceIsANumericError) {
  TrainConfig tc;
  tc.steps = 30;
  tc.batch_size = 4;
  tc.warmup_steps = 1;
  tc.grad_clip = 0.0f;
  tc.learning_rate = 1e30f;
  tc.interchange.reset();
  try {
    train_toy(tiny_task_config(), tiny_corpus(), tc);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}
