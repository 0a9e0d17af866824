#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "fdlab/sae.hpp"
#include "oracle.hpp"

using namespace fdlab;

namespace {

// SAE with identity encoder/decoder and zero biases: the code is the top-k input coordinates.
SaeModel identity_sae(std::size_t d, std::size_t k) {
  SaeConfig c;
  c.input_dim = d;
  c.expansion = 1;
  c.k = k;
  SaeModel sae{c, Tensor({d, d}), Tensor({d}), Tensor({d, d}), Tensor({d}), nullptr, {}};
  for (std::size_t i = 0; i < d; ++i) sae.w_enc.at(i, i) = sae.w_dec.at(i, i) = 1.0f;
  return sae;
}

// Rows that are non-negative combinations of k atoms from a random unit dictionary.
ActivationDataset planted_dataset(std::size_t d, std::size_t atoms, std::size_t k, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal;
  std::uniform_real_distribution<float> coef(0.5f, 2.0f);
  std::vector<std::vector<float>> dict(atoms, std::vector<float>(d));
  for (auto& a : dict) {
    double norm = 0.0;
    for (float& v : a) {
      v = normal(rng);
      norm += double(v) * v;
    }
    for (float& v : a) v = float(v / std::sqrt(norm));
  }
  Tensor rows({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    std::set<std::size_t> picked;
    while (picked.size() < k) picked.insert(rng() % atoms);
    for (std::size_t a : picked) {
      const float c = coef(rng);
      for (std::size_t j = 0; j < d; ++j) rows.at(r, j) += c * dict[a][j];
    }
  }
  return {rows, Json{{"planted", true}}};
}

Tensor rows_of(std::initializer_list<std::initializer_list<float>> rows) {
  std::vector<float> flat;
  std::size_t width = 0;
  for (auto r : rows) {
    width = r.size();
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), width}, flat);
}

}  // namespace

TEST(Encode, TopKKeepsExactlyKLargestWithSignedValues) {
  const SaeModel sae = identity_sae(4, 2);
  const std::vector<float> x{3.0f, -1.0f, 2.0f, 0.5f};
  const SparseCode code = encode_topk(sae, x);
  EXPECT_EQ(code.indices, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(code.values, (std::vector<float>{3.0f, 2.0f}));
  EXPECT_EQ(code.value_of(2), 2.0f);
  EXPECT_EQ(code.value_of(1), 0.0f);
  EXPECT_EQ(decode(sae, code), (std::vector<float>{3.0f, 0.0f, 2.0f, 0.0f}));
  // no ReLU: negative pre-activations survive when they rank in the top k
  const SparseCode neg = encode_topk(identity_sae(3, 3), std::vector<float>{-1.0f, -2.0f, -3.0f});
  EXPECT_EQ(neg.values, (std::vector<float>{-1.0f, -2.0f, -3.0f}));
  // ties go to the lower index
  EXPECT_EQ(encode_topk(identity_sae(3, 1), std::vector<float>{1.0f, 1.0f, 1.0f}).indices,
            (std::vector<std::size_t>{0}));
  EXPECT_THROW(encode_topk(sae, std::vector<float>{1.0f}), Error);
}

TEST(Encode, ReconstructionErrorHandComputed) {
  const SaeModel sae = identity_sae(3, 1);
  const Tensor data = rows_of({{2, 1, 0}, {0, 0, 4}});
  // residuals: (0,1,0) and (0,0,0) -> MSE = 1 / 6, relative = 1 / (4 + 1 + 16)
  EXPECT_NEAR(reconstruction_mse(sae, data), 1.0 / 6.0, 1e-9);
  EXPECT_NEAR(relative_reconstruction_error(sae, data), 1.0 / 21.0, 1e-9);
  EXPECT_THROW(relative_reconstruction_error(sae, Tensor({2, 3})), Error);
}

TEST(Train, RecoversPlantedDictionary) {
  const ActivationDataset ds = planted_dataset(16, 24, 2, 4000, 1);
  SaeConfig c;
  c.input_dim = 16;
  c.expansion = 4;
  c.k = 2;
  c.steps = 3000;
  c.batch_size = 128;
  c.learning_rate = 3e-3f;
  c.eval_every = 250;
  std::vector<double> curve;
  const SaeModel sae = train_sae(ds, c, [&](std::size_t, double mse) { curve.push_back(mse); });
  EXPECT_EQ(curve.size(), 12u);
  EXPECT_LT(curve.back(), curve.front());
  const double rel = relative_reconstruction_error(sae, ds.rows);
  EXPECT_LT(rel, 0.05) << "relative reconstruction error " << rel;
  for (std::size_t f = 0; f < sae.features(); ++f) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 16; ++j) norm += double(sae.w_dec.at(f, j)) * sae.w_dec.at(f, j);
    EXPECT_NEAR(norm, 1.0, 1e-4);
  }
  for (std::size_t r = 0; r < 20; ++r) EXPECT_EQ(encode_topk(sae, ds.rows.row(r)).indices.size(), 2u);
  EXPECT_EQ(sae.provenance.train_rows + sae.provenance.eval_rows, 4000u);
  EXPECT_EQ(sae.site, ds.site);
}

TEST(Train, SeededAndValidated) {
  const ActivationDataset ds = planted_dataset(8, 8, 1, 300, 2);
  SaeConfig c;
  c.input_dim = 8;
  c.expansion = 2;
  c.k = 1;
  c.steps = 50;
  c.batch_size = 32;
  c.eval_every = 10;
  const SaeModel a = train_sae(ds, c), b = train_sae(ds, c);
  EXPECT_TRUE(a.w_dec == b.w_dec && a.w_enc == b.w_enc);
  c.seed = 7;
  EXPECT_FALSE(train_sae(ds, c).w_dec == a.w_dec);

  SaeConfig bad = c;
  bad.k = 17;
  EXPECT_THROW(train_sae(ds, bad), Error);
  bad = c;
  bad.input_dim = 9;
  EXPECT_THROW(train_sae(ds, bad), Error);
  bad = c;
  bad.eval_fraction = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  ActivationDataset nan = ds;
  nan.rows[5] = NAN;
  EXPECT_THROW(train_sae(nan, c), Error);
  EXPECT_THROW(train_sae(ActivationDataset{Tensor({1, 8}), nullptr}, c), Error);
}

TEST(Features, MeanActivationAndTopFeatures) {
  const SaeModel sae = identity_sae(4, 1);
  const Tensor acts = rows_of({{5, 1, 0, 0}, {0, 3, 0, 0}, {1, 0, 0, 0}});
  const auto mean = mean_feature_activation(sae, acts);
  EXPECT_EQ(mean, (std::vector<double>{2.0, 1.0, 0.0, 0.0}));
  EXPECT_EQ(top_features(mean, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(top_features(std::vector<double>{0.0, -3.0, 1.0}, 1), (std::vector<std::size_t>{1}));  // by magnitude
  EXPECT_THROW(top_features(mean, 0), Error);
  EXPECT_THROW(top_features(mean, 5), Error);
}

TEST(Features, OverlapOfSetsAndRuns) {
  const std::vector<std::size_t> a{1, 2, 3, 4}, b{3, 4, 5, 6};
  EXPECT_DOUBLE_EQ(set_overlap(a, a, 4), 1.0);
  EXPECT_DOUBLE_EQ(set_overlap(a, b, 4), 0.5);
  EXPECT_DOUBLE_EQ(set_overlap(a, std::vector<std::size_t>{9, 8, 7, 6}, 4), 0.0);
  const SaeModel sae = identity_sae(4, 1);
  const Tensor run = rows_of({{5, 1, 0, 0}, {0, 3, 0, 0}});
  EXPECT_DOUBLE_EQ(feature_overlap(sae, run, run, 2), 1.0);
  EXPECT_THROW(feature_overlap(sae, run, run, 5), Error);
}

TEST(Features, AmplificationRatios) {
  auto r2 = [](double w, double c) { return std::round(*ratio_of_means(w, c) * 100.0) / 100.0; };
  EXPECT_DOUBLE_EQ(r2(15.1, 9.8), 1.54);
  EXPECT_DOUBLE_EQ(r2(4.6, 2.8), 1.64);
  EXPECT_DOUBLE_EQ(r2(6.8, 19.0), 0.36);
  EXPECT_FALSE(ratio_of_means(1.0, 0.0).has_value());

  const SaeModel sae = identity_sae(2, 1);
  const Tensor wrong = rows_of({{6, 0}, {4, 0}}), correct = rows_of({{2, 0}, {2, 0}});
  EXPECT_DOUBLE_EQ(*amplification_ratio(sae, 0, wrong, correct), 2.5);
  EXPECT_FALSE(amplification_ratio(sae, 1, wrong, correct).has_value());
  EXPECT_THROW(amplification_ratio(sae, 2, wrong, correct), Error);
}

TEST(Pearson, HandValuesAndDegenerateSeries) {
  const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8}, z{4, 3, 2, 1}, flat{5, 5, 5, 5};
  EXPECT_NEAR(*pearson(x, y), 1.0, 1e-12);
  EXPECT_NEAR(*pearson(x, z), -1.0, 1e-12);
  // x against (1, 3, 2, 4): sxy = 4, sxx = syy = 5 -> r = 0.8
  EXPECT_NEAR(*pearson(x, std::vector<double>{1, 3, 2, 4}), 0.8, 1e-12);
  EXPECT_FALSE(pearson(x, flat).has_value());
  EXPECT_THROW(pearson(x, std::vector<double>{1, 2, 3}), Error);
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);
}

TEST(Correlation, PlantedFeatureTracksOneHead) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_head = 2;
  c.d_model = 4;
  c.d_mlp = 2;
  c.vocab_size = 4;
  c.max_seq = 4;
  const Checkpoint ck = oracle::random_model(c, 3);
  std::vector<Trace> traces;
  for (float a : {0.5f, 1.0f, 2.0f, 3.5f, 5.0f}) {
    Trace tr = forward_trace(ck, Tokens{1, 2});
    Tensor& rp = tr.layers[0].resid_post;
    for (std::size_t j = 0; j < 4; ++j) rp.at(1, j) = j == 0 ? a : 0.0f;
    Tensor& ho = tr.layers[0].attn_head_out;
    ho.at(0, 1, 0) = 2.0f * a + 1.0f;
    ho.at(0, 1, 1) = 0.0f;
    ho.at(1, 1, 0) = 3.0f;
    ho.at(1, 1, 1) = 4.0f;
    traces.push_back(tr);
  }
  const SaeModel sae = identity_sae(4, 1);
  const auto corr = feature_head_correlation(sae, traces, 0, 0);
  ASSERT_EQ(corr.size(), 2u);
  EXPECT_NEAR(*corr[0].r, 1.0, 1e-9);
  EXPECT_FALSE(corr[1].r.has_value());  // constant head norm

  EXPECT_THROW(feature_head_correlation(sae, std::span<const Trace>(traces).first(2), 0, 0), Error);
  EXPECT_THROW(feature_head_correlation(sae, traces, 4, 0), Error);
  traces[2].has_head_out = false;
  EXPECT_THROW(feature_head_correlation(sae, traces, 0, 0), Error);
}

TEST(Persistence, SaveLoadRoundTrip) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "fdlab_tests" / "sae_roundtrip";
  std::filesystem::create_directories(dir);
  const ActivationDataset ds = planted_dataset(8, 8, 1, 200, 4);
  SaeConfig c;
  c.input_dim = 8;
  c.expansion = 2;
  c.k = 2;
  c.steps = 20;
  c.batch_size = 16;
  c.eval_every = 5;
  const SaeModel sae = train_sae(ds, c);
  save_sae(sae, dir / "m.sae", Json{{"seed", 1}});
  const SaeModel back = load_sae(dir / "m.sae");
  EXPECT_TRUE(back.w_enc == sae.w_enc && back.b_enc == sae.b_enc && back.w_dec == sae.w_dec && back.b_dec == sae.b_dec);
  EXPECT_EQ(back.provenance.eval_mse, sae.provenance.eval_mse);
  EXPECT_EQ(back.site, sae.site);
  EXPECT_EQ(encode_sae(back), encode_sae(sae));
  std::string bytes = encode_sae(sae);
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_sae(bytes), Error);
}
