#include <random>

#include <gtest/gtest.h>

#include "fdlab/intervention.hpp"
#include "oracle.hpp"

using namespace fdlab;

namespace {

ModelConfig mini_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 4;
  c.d_head = 2;
  c.d_model = 8;
  c.d_mlp = 6;
  c.vocab_size = 7;
  c.max_seq = 8;
  return c;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an fdlab::Error";
  return ErrorKind::usage;
}

oracle::Mat slab(const Tensor& pattern, std::size_t head) {
  const std::size_t T = pattern.dim(1);
  oracle::Mat m = oracle::zeros(T, T);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) m[i][j] = pattern.at(head, i, j);
  return m;
}

// A random valid plan whose directives all start at or after `min_pos`.
PatchPlan random_plan(std::mt19937_64& rng, const ModelConfig& c, const Trace& source, std::size_t min_pos) {
  PatchPlan plan;
  const std::size_t n = 1 + rng() % 3;
  for (std::size_t d = 0; d < n; ++d) {
    ActivationAddress a;
    a.layer = rng() % c.n_layers;
    a.site = Site(rng() % 6);
    a.positions.begin = min_pos + rng() % 2;
    if (rng() % 2) a.positions.end = a.positions.begin + 1 + rng() % 3;
    if (a.site == Site::attn_pattern) a.heads = {rng() % c.n_heads};
    a.neuron = rng() % c.d_mlp;
    bool clash = false;
    for (const auto& other : plan.directives) clash |= other.address.conflicts(a);
    if (clash) continue;
    PatchMode mode;
    const std::size_t pick = a.site == Site::attn_pattern ? rng() % 2 : rng() % 4;
    if (pick == 0) {
      mode = Replace{capture(source, a)};
    } else if (pick == 1) {
      mode = Blend{float(rng() % 11) / 10.0f, capture(source, a), rng() % 2 ? BlendKind::convex : BlendKind::position_fraction};
    } else if (pick == 2) {
      mode = SetScalar{float(int(rng() % 7) - 3)};
    } else {
      std::vector<float> v(a.site == Site::mlp_neuron ? 1 : c.d_model);
      for (float& x : v) x = float(int(rng() % 5) - 2) * 0.5f;
      mode = AddScaled{float(rng() % 3), v};
    }
    plan.directives.push_back({a, std::move(mode)});
  }
  return plan;
}

}  // namespace

TEST(Site, ParseRoundTrip) {
  for (Site s : {Site::resid_pre, Site::attn_pattern, Site::attn_out, Site::mlp_out, Site::resid_post, Site::mlp_neuron})
    EXPECT_EQ(parse_site(to_string(s)), s);
  EXPECT_EQ(kind_of([] { parse_site("q_proj"); }), ErrorKind::config);
}

TEST(Patch, EmptyPlanIsIdentity) {
  const Checkpoint ck = oracle::random_model(mini_config(), 3);
  const Tokens t{1, 4, 2, 6, 0};
  EXPECT_TRUE(apply_patched_forward(ck, t, PatchPlan{}) == forward_trace(ck, t));
}

TEST(Patch, LambdaZeroAndSelfPatchAreBitExactIdentities) {
  const Checkpoint ck = oracle::random_model(mini_config(), 4);
  const Tokens t{1, 4, 2, 6, 0, 3};
  const Trace clean = forward_trace(ck, t);
  const Trace other = forward_trace(ck, Tokens{5, 5, 1, 0, 2, 2});
  for (std::size_t layer = 0; layer < 3; ++layer) {
    EXPECT_TRUE(apply_patched_forward(ck, t, transplant_plan(other, layer, {0, 1, 2, 3}, 0.0f)) == clean);
    EXPECT_TRUE(apply_patched_forward(ck, t, transplant_plan(clean, layer, {0, 3}, 1.0f)) == clean);
    for (Site s : {Site::resid_pre, Site::attn_out, Site::mlp_out, Site::resid_post, Site::mlp_neuron}) {
      const ActivationAddress a{layer, s, {}, 2, PositionRange::all()};
      EXPECT_TRUE(apply_patched_forward(ck, t, PatchPlan{{Directive{a, Replace{capture(clean, a)}}}}) == clean)
          << to_string(s);
      const std::vector<float> v(s == Site::mlp_neuron ? 1 : 8, 1.5f);
      EXPECT_TRUE(apply_patched_forward(ck, t, PatchPlan{{Directive{a, AddScaled{0.0f, v}}}}) == clean);
    }
  }
}

TEST(Transplant, MatchesOracleWithForcedPattern) {
  std::mt19937_64 rng(8);
  const ModelConfig c = mini_config();
  for (int trial = 0; trial < 10; ++trial) {
    const Checkpoint ck = oracle::random_model(c, 50 + trial);
    const std::size_t T = 3 + rng() % 5;
    const Tokens target = oracle::random_tokens(rng, c, T), source = oracle::random_tokens(rng, c, T);
    const std::size_t layer = rng() % 3, begin = rng() % T;
    const std::vector<std::size_t> heads = trial % 2 ? std::vector<std::size_t>{0, 2} : std::vector<std::size_t>{1};
    const Trace src = forward_trace(ck, source);
    const Trace patched = apply_patched_forward(
        ck, target, transplant_plan(src, layer, heads, 1.0f, BlendKind::convex, PositionRange::from(begin)));
    oracle::PatternForce force{layer, heads, begin, {}};
    for (std::size_t h : heads) force.rows.push_back(slab(src.layers[layer].attn_pattern, h));
    EXPECT_LT(oracle::max_abs_diff(oracle::forward(ck, target, force).logits, patched.logits), 1e-4) << trial;
  }
}

TEST(Transplant, ConvexBlendMixesRowsLinearly) {
  const Checkpoint ck = oracle::random_model(mini_config(), 9);
  const Tokens target{1, 2, 3, 4, 5}, source{6, 5, 4, 3, 2};
  const Trace clean = forward_trace(ck, target), src = forward_trace(ck, source);
  const Trace patched = transplant_attention(ck, target, src, 1, {2}, 0.3f);
  const Tensor& p = patched.layers[1].attn_pattern;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const float want = 0.3f * src.layers[1].attn_pattern.at(2, i, j) + 0.7f * clean.layers[1].attn_pattern.at(2, i, j);
      EXPECT_NEAR(p.at(2, i, j), want, 1e-6);
      EXPECT_EQ(p.at(0, i, j), clean.layers[1].attn_pattern.at(0, i, j));
    }
}

TEST(Transplant, PositionFractionReplacesTrailingRows) {
  const Checkpoint ck = oracle::random_model(mini_config(), 10);
  const Tokens target{1, 2, 3, 4, 5, 6, 0}, source{6, 5, 4, 3, 2, 1, 1};
  const Trace clean = forward_trace(ck, target), src = forward_trace(ck, source);
  // rows 2..6 selected (m = 5); lambda 0.6 -> the last 3 rows are replaced
  const Trace patched = apply_patched_forward(
      ck, target, transplant_plan(src, 0, {1}, 0.6f, BlendKind::position_fraction, PositionRange::from(2)));
  for (std::size_t i = 0; i < 7; ++i) {
    const Tensor& want = i >= 4 ? src.layers[0].attn_pattern : clean.layers[0].attn_pattern;
    for (std::size_t j = 0; j <= i; ++j) EXPECT_EQ(patched.layers[0].attn_pattern.at(1, i, j), want.at(1, i, j)) << i;
  }
}

TEST(Transplant, ShorterSourceOnlyCoversItsOwnRows) {
  const Checkpoint ck = oracle::random_model(mini_config(), 11);
  const Tokens target{1, 2, 3, 4, 5, 6}, source{6, 5, 4};
  const Trace clean = forward_trace(ck, target), src = forward_trace(ck, source);
  const Trace patched = transplant_attention(ck, target, src, 2, {0}, 1.0f);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const float want = i < 3 ? src.layers[2].attn_pattern.at(0, i, j) : clean.layers[2].attn_pattern.at(0, i, j);
      EXPECT_EQ(patched.layers[2].attn_pattern.at(0, i, j), want);
    }
}

TEST(Ablation, ClampsNeuronAndAlphaGrid) {
  const Checkpoint ck = oracle::random_model(mini_config(), 12);
  const Tokens t{3, 1, 4, 1, 5};
  const Trace clean = forward_trace(ck, t);
  const Trace ab = ablate_neurons(ck, t, {{1, 2}, {2, 5}}, -1.25f);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(ab.layers[1].mlp_act.at(i, 2), -1.25f);
    EXPECT_EQ(ab.layers[2].mlp_act.at(i, 5), -1.25f);
    EXPECT_EQ(ab.layers[1].mlp_act.at(i, 3), clean.layers[1].mlp_act.at(i, 3));
  }
  EXPECT_TRUE(ab.layers[0] == clean.layers[0]);
  // mlp_out is act @ W_out with the clamped value
  const Tensor& wout = ck.weights.layers[1].w_out;
  double want = 0.0;
  for (std::size_t n = 0; n < 6; ++n) want += double(ab.layers[1].mlp_act.at(0, n)) * double(wout.at(n, 0));
  EXPECT_NEAR(ab.layers[1].mlp_out.at(0, 0), want, 1e-5);

  const auto grid = default_alpha_grid();
  ASSERT_EQ(grid.size(), 21u);
  EXPECT_EQ(grid.front(), 0.0f);
  EXPECT_EQ(grid.back(), -5.0f);
  EXPECT_EQ(grid[1], -0.25f);
}

TEST(Steering, VectorIsGoodMinusBad) {
  const Checkpoint ck = oracle::random_model(mini_config(), 13);
  Trace good = forward_trace(ck, Tokens{1, 2, 3}), bad = forward_trace(ck, Tokens{4, 5, 6, 0});
  good.layers[1].mlp_act.at(2, 4) = 0.12f;
  bad.layers[1].mlp_act.at(3, 4) = 0.18f;
  const ActivationAddress neuron{1, Site::mlp_neuron, {}, 4, {}};
  const auto v = steering_vector(good, bad, neuron);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NEAR(v[0], -0.06f, 1e-7);

  const ActivationAddress resid{0, Site::resid_post, {}, 0, {}};
  const auto r = steering_vector(good, bad, resid, 0, 1);
  for (std::size_t j = 0; j < 8; ++j)
    EXPECT_EQ(r[j], good.layers[0].resid_post.at(0, j) - bad.layers[0].resid_post.at(1, j));
  EXPECT_EQ(kind_of([&] { steering_vector(good, bad, resid, 5); }), ErrorKind::range);
  EXPECT_EQ(kind_of([&] { steering_vector(good, bad, ActivationAddress{0, Site::attn_pattern, {0}, 0, {}}); }),
            ErrorKind::config);
}

TEST(Steering, AddsFromFinalPromptPositionOnly) {
  const Checkpoint ck = oracle::random_model(mini_config(), 14);
  const Tokens t{1, 2, 3, 4};
  const Trace clean = forward_trace(ck, t);
  const ActivationAddress a{1, Site::resid_post, {}, 0, {}};
  std::vector<float> v(8);
  for (std::size_t j = 0; j < 8; ++j) v[j] = float(j) - 3.5f;
  const Trace steered = apply_steering(ck, t, a, v, 2.0f);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const float want = clean.layers[1].resid_post.at(i, j) + (i == 3 ? 2.0f * v[j] : 0.0f);
      EXPECT_EQ(steered.layers[1].resid_post.at(i, j), want);
    }
  for (std::size_t v2 = 0; v2 < 7; ++v2) EXPECT_EQ(steered.logits.at(2, v2), clean.logits.at(2, v2));
}

TEST(Plan, ConflictRules) {
  const ModelConfig c = mini_config();
  auto dir = [](ActivationAddress a) { return Directive{std::move(a), SetScalar{0.0f}}; };
  const ActivationAddress n1{0, Site::mlp_neuron, {}, 1, {0, 3}};
  const ActivationAddress n1_late{0, Site::mlp_neuron, {}, 1, {3, std::nullopt}};
  const ActivationAddress n2{0, Site::mlp_neuron, {}, 2, {}};
  EXPECT_NO_THROW((PatchPlan{{dir(n1), dir(n1_late), dir(n2)}}.validate(c)));
  const ActivationAddress n1_overlap{0, Site::mlp_neuron, {}, 1, {2, 4}};
  EXPECT_EQ(kind_of([&] { PatchPlan{{dir(n1), dir(n1_overlap)}}.validate(c); }), ErrorKind::config);
  const ActivationAddress r0{1, Site::resid_post, {}, 0, {}}, r0b{1, Site::resid_post, {}, 7, {5, 6}};
  EXPECT_EQ(kind_of([&] { PatchPlan{{dir(r0), dir(r0b)}}.validate(c); }), ErrorKind::config);
  ActivationAddress h01{1, Site::attn_pattern, {0, 1}, 0, {}}, h23{1, Site::attn_pattern, {2, 3}, 0, {}},
      h12{1, Site::attn_pattern, {1, 2}, 0, {}};
  EXPECT_FALSE(h01.conflicts(h23));
  EXPECT_TRUE(h01.conflicts(h12));
}

TEST(Plan, ValidationErrors) {
  const ModelConfig c = mini_config();
  const Checkpoint ck = oracle::random_model(c, 15);
  const Trace tr = forward_trace(ck, Tokens{1, 2, 3});
  auto check = [&](Directive d) { PatchPlan{{std::move(d)}}.validate(c); };
  const ActivationAddress pat{0, Site::attn_pattern, {0}, 0, {}};
  EXPECT_EQ(kind_of([&] { check({pat, Blend{1.5f, capture(tr, pat), BlendKind::convex}}); }), ErrorKind::range);
  EXPECT_EQ(kind_of([&] { check({pat, Blend{-0.1f, capture(tr, pat), BlendKind::convex}}); }), ErrorKind::range);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{3, Site::resid_post, {}, 0, {}}, SetScalar{}}); }), ErrorKind::range);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::attn_pattern, {1, 1}, 0, {}}, Replace{capture(tr, pat)}}); }),
            ErrorKind::range);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::attn_pattern, {}, 0, {}}, Replace{capture(tr, pat)}}); }),
            ErrorKind::range);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::mlp_neuron, {}, 6, {}}, SetScalar{}}); }), ErrorKind::range);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::resid_post, {}, 0, {2, 2}}, SetScalar{}}); }),
            ErrorKind::range);
  const ActivationAddress two_heads{0, Site::attn_pattern, {0, 1}, 0, {}};
  EXPECT_EQ(kind_of([&] { check({two_heads, Replace{capture(tr, pat)}}); }), ErrorKind::shape);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::resid_post, {}, 0, {}}, Replace{Tensor({3, 5})}}); }),
            ErrorKind::shape);
  EXPECT_EQ(kind_of([&] { check({pat, SetScalar{0.5f}}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { check({pat, AddScaled{1.0f, {}}}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::resid_post, {}, 0, {}}, AddScaled{1.0f, {1.0f}}}); }),
            ErrorKind::shape);
  EXPECT_EQ(kind_of([&] { check({ActivationAddress{0, Site::mlp_neuron, {}, 0, {}}, SetScalar{NAN}}); }),
            ErrorKind::numeric);
  Tensor bad = capture(tr, pat);
  bad[0] = INFINITY;
  EXPECT_EQ(kind_of([&] { check({pat, Replace{bad}}); }), ErrorKind::numeric);
}

TEST(Plan, RandomPlansRespectCausalityAndDeterminism) {
  std::mt19937_64 rng(99);
  const ModelConfig c = mini_config();
  const Checkpoint ck = oracle::random_model(c, 16);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 3 + rng() % 5;
    const Tokens target = oracle::random_tokens(rng, c, T);
    const Trace src = forward_trace(ck, oracle::random_tokens(rng, c, 2 + rng() % 6));
    const std::size_t min_pos = 1 + rng() % (T - 1);
    const PatchPlan plan = random_plan(rng, c, src, min_pos);
    ASSERT_NO_THROW(plan.validate(c));
    const Trace clean = forward_trace(ck, target);
    const Trace a = apply_patched_forward(ck, target, plan), b = apply_patched_forward(ck, target, plan);
    EXPECT_TRUE(a == b);
    // positions before every directive's range are untouched, bit for bit
    for (std::size_t i = 0; i < min_pos; ++i)
      for (std::size_t v = 0; v < c.vocab_size; ++v) ASSERT_EQ(a.logits.at(i, v), clean.logits.at(i, v)) << trial;
  }
}

TEST(Generate, PatchedGenerationWithEmptyPlanMatchesGreedy) {
  const Checkpoint ck = oracle::random_model(mini_config(), 17, 0.4f);
  const Tokens prompt{1, 2, 3};
  EXPECT_EQ(generate_patched(ck, prompt, 5, PatchPlan{}), generate_greedy(ck, prompt, 5));
  const Trace src = forward_trace(ck, Tokens{6, 6, 6, 6, 6, 6, 6, 6});
  const Tokens patched = generate_patched(ck, prompt, 5, transplant_plan(src, 0, {0, 1, 2, 3}, 1.0f));
  EXPECT_EQ(patched.size(), 8u);
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), patched.begin()));
}
