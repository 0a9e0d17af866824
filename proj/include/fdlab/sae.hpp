#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fdlab/error.hpp"
#include "fdlab/io.hpp"
#include "fdlab/model.hpp"
#include "fdlab/tensor.hpp"

namespace fdlab {

struct SaeConfig {
  std::size_t input_dim = 128;
  std::size_t expansion = 8;
  std::size_t k = 8;
  std::size_t steps = 2000;
  std::size_t batch_size = 256;
  float learning_rate = 1e-3f;
  std::uint64_t seed = 42;
  std::size_t eval_every = 100;
  double eval_fraction = 0.1;
  std::size_t dead_after = 10;  // eval checkpoints without a single firing

  std::size_t features() const { return expansion * input_dim; }

  void validate() const {
    require(input_dim > 0, ErrorKind::config, "SAE input_dim must be positive");
    require(expansion >= 1, ErrorKind::config, "SAE expansion must be at least 1");
    require(k > 0 && k <= features(), ErrorKind::config,
            "SAE k=" + std::to_string(k) + " must lie in 1.." + std::to_string(features()));
    require(steps > 0 && batch_size > 0 && eval_every > 0, ErrorKind::config, "SAE steps, batch and eval cadence must be positive");
    require(learning_rate > 0.0f, ErrorKind::config, "SAE learning rate must be positive");
    require(eval_fraction > 0.0 && eval_fraction < 1.0, ErrorKind::config, "SAE eval fraction must lie in (0,1)");
  }
};

struct SaeProvenance {
  std::vector<std::size_t> eval_steps;
  std::vector<double> eval_mse;  // mean squared error per element on the held-out split
  std::size_t reinitialized = 0;
  std::size_t train_rows = 0, eval_rows = 0;
  bool small_dataset = false;  // fewer rows than features
};

/// TopK autoencoder: pre = (x - b_dec) W_enc + b_enc; the k largest pre-activations are kept
/// as-is (no ReLU); x_hat = z W_dec + b_dec. Rows of W_dec are unit-norm feature directions.
struct SaeModel {
  SaeConfig config;
  Tensor w_enc;  // [d, F]
  Tensor b_enc;  // [F]
  Tensor w_dec;  // [F, d]
  Tensor b_dec;  // [d]
  Json site;     // where the training activations came from
  SaeProvenance provenance;

  std::size_t features() const { return w_dec.dim(0); }
  std::size_t input_dim() const { return w_dec.dim(1); }
};

struct SparseCode {
  std::vector<std::size_t> indices;  // ascending feature index
  std::vector<float> values;

  float value_of(std::size_t feature) const {
    const auto it = std::lower_bound(indices.begin(), indices.end(), feature);
    return it != indices.end() && *it == feature ? values[std::size_t(it - indices.begin())] : 0.0f;
  }
};

namespace detail {

// Indices of the k largest entries of `pre`; ties go to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const float> pre, std::size_t k) {
  std::vector<std::size_t> idx(pre.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline RowMatrix pre_activations(const SaeModel& sae, const RowMatrix& x) {
  const auto b_dec = Eigen::Map<const Eigen::RowVectorXf>(sae.b_dec.data().data(), Eigen::Index(sae.input_dim()));
  const auto b_enc = Eigen::Map<const Eigen::RowVectorXf>(sae.b_enc.data().data(), Eigen::Index(sae.features()));
  RowMatrix pre = (x.rowwise() - b_dec) * sae.w_enc.matrix();
  pre.rowwise() += b_enc;
  return pre;
}

// Dense code matrix with exactly k entries kept per row; `kept` marks them (a kept value may be 0).
inline RowMatrix topk_dense(const RowMatrix& pre, std::size_t k, std::vector<char>* kept = nullptr) {
  RowMatrix z = RowMatrix::Zero(pre.rows(), pre.cols());
  if (kept) kept->assign(std::size_t(pre.size()), 0);
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    const std::span<const float> row(pre.data() + r * pre.cols(), std::size_t(pre.cols()));
    for (std::size_t i : topk_indices(row, k)) {
      z(r, Eigen::Index(i)) = row[i];
      if (kept) (*kept)[std::size_t(r * pre.cols()) + i] = 1;
    }
  }
  return z;
}

inline RowMatrix decode_dense(const SaeModel& sae, const RowMatrix& z) {
  const auto b_dec = Eigen::Map<const Eigen::RowVectorXf>(sae.b_dec.data().data(), Eigen::Index(sae.input_dim()));
  RowMatrix out = z * sae.w_dec.matrix();
  out.rowwise() += b_dec;
  return out;
}

inline void normalize_decoder_rows(Tensor& w_dec) {
  auto m = w_dec.matrix();
  for (Eigen::Index f = 0; f < m.rows(); ++f) {
    const float n = m.row(f).norm();
    if (n > 0.0f) m.row(f) /= n;
  }
}

inline RowMatrix gather_rows(const Tensor& rows, std::span<const std::size_t> which) {
  const std::size_t d = rows.dim(1);
  RowMatrix out(Eigen::Index(which.size()), Eigen::Index(d));
  for (std::size_t i = 0; i < which.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out(Eigen::Index(i), Eigen::Index(j)) = rows.at(which[i], j);
  return out;
}

}  // namespace detail

inline void check_input(const SaeModel& sae, std::size_t width) {
  require(width == sae.input_dim(), ErrorKind::shape,
          "SAE expects inputs of width " + std::to_string(sae.input_dim()) + ", got " + std::to_string(width));
}

inline SparseCode encode_topk(const SaeModel& sae, std::span<const float> x) {
  check_input(sae, x.size());
  const RowMatrix row = Eigen::Map<const RowMatrix>(x.data(), 1, Eigen::Index(x.size()));
  const RowMatrix pre = detail::pre_activations(sae, row);
  SparseCode code;
  code.indices = detail::topk_indices(std::span<const float>(pre.data(), std::size_t(pre.cols())), sae.config.k);
  for (std::size_t i : code.indices) code.values.push_back(pre(0, Eigen::Index(i)));
  return code;
}

inline std::vector<float> decode(const SaeModel& sae, const SparseCode& code) {
  std::vector<float> out(sae.b_dec.data().begin(), sae.b_dec.data().end());
  for (std::size_t n = 0; n < code.indices.size(); ++n) {
    const auto row = sae.w_dec.row(code.indices[n]);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += code.values[n] * row[j];
  }
  return out;
}

/// Mean squared error per element of decode(encode(x)) over the rows of `data`.
inline double reconstruction_mse(const SaeModel& sae, const Tensor& data) {
  require(data.rank() == 2, ErrorKind::shape, "activation rows must form a matrix");
  check_input(sae, data.dim(1));
  const RowMatrix x = data.matrix();
  const RowMatrix xhat = detail::decode_dense(sae, detail::topk_dense(detail::pre_activations(sae, x), sae.config.k));
  return double((xhat - x).squaredNorm()) / double(x.size());
}

/// Relative squared error: sum ||x - x_hat||^2 / sum ||x||^2 (fraction of signal energy lost).
inline double relative_reconstruction_error(const SaeModel& sae, const Tensor& data) {
  const double energy = double(data.matrix().squaredNorm());
  require(energy > 0.0, ErrorKind::numeric, "relative error of an all-zero dataset is undefined");
  return reconstruction_mse(sae, data) * double(data.size()) / energy;
}

using SaeProgress = std::function<void(std::size_t step, double eval_mse)>;

/// Adam on reconstruction MSE under exact TopK. Decoder rows are renormalized after every step.
/// Features that never fire for `dead_after` consecutive eval checkpoints are re-aimed at the
/// worst-reconstructed held-out samples.
inline SaeModel train_sae(const ActivationDataset& data, const SaeConfig& cfg, const SaeProgress& progress = {}) {
  cfg.validate();
  require(data.rows.rank() == 2 && data.count() >= 2, ErrorKind::shape, "SAE training needs at least two rows");
  require(data.width() == cfg.input_dim, ErrorKind::shape,
          "SAE input_dim " + std::to_string(cfg.input_dim) + " does not match activation width " +
              std::to_string(data.width()));
  require(data.rows.all_finite(), ErrorKind::numeric, "activation dataset contains non-finite values");

  const std::size_t d = cfg.input_dim, F = cfg.features(), N = data.count();
  std::mt19937_64 rng(cfg.seed);

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_eval = std::clamp<std::size_t>(std::size_t(std::lround(cfg.eval_fraction * double(N))), 1, N - 1);
  const std::vector<std::size_t> eval_idx(order.begin(), order.begin() + std::ptrdiff_t(n_eval));
  std::vector<std::size_t> train_idx(order.begin() + std::ptrdiff_t(n_eval), order.end());
  const RowMatrix eval_x = detail::gather_rows(data.rows, eval_idx);

  SaeModel sae{cfg, Tensor({d, F}), Tensor({F}), Tensor({F, d}), Tensor({d}), data.site, {}};
  sae.provenance.train_rows = train_idx.size();
  sae.provenance.eval_rows = n_eval;
  sae.provenance.small_dataset = train_idx.size() < F;
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (float& v : sae.w_dec.data()) v = normal(rng);
  detail::normalize_decoder_rows(sae.w_dec);
  sae.w_enc.matrix() = sae.w_dec.matrix().transpose();
  {
    const RowMatrix train_x = detail::gather_rows(data.rows, train_idx);
    const Eigen::RowVectorXf mean = train_x.colwise().mean();
    for (std::size_t j = 0; j < d; ++j) sae.b_dec[j] = mean(Eigen::Index(j));
  }

  std::vector<Tensor*> params{&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec};
  std::vector<Tensor> m, v;
  for (const Tensor* p : params) {
    m.emplace_back(p->shape());
    v.emplace_back(p->shape());
  }
  const float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

  std::vector<std::size_t> fired(F, 0), silent_checkpoints(F, 0);
  std::size_t cursor = train_idx.size();
  const std::size_t B = std::min(cfg.batch_size, train_idx.size());
  std::vector<std::size_t> batch_idx(B);

  auto checkpoint = [&](std::size_t step) {
    const RowMatrix xhat =
        detail::decode_dense(sae, detail::topk_dense(detail::pre_activations(sae, eval_x), cfg.k));
    const double mse = double((xhat - eval_x).squaredNorm()) / double(eval_x.size());
    require(std::isfinite(mse), ErrorKind::numeric, "SAE training diverged (eval MSE is not finite)");
    sae.provenance.eval_steps.push_back(step);
    sae.provenance.eval_mse.push_back(mse);
    if (progress) progress(step, mse);

    std::vector<std::size_t> dead;
    for (std::size_t f = 0; f < F; ++f) {
      silent_checkpoints[f] = fired[f] ? 0 : silent_checkpoints[f] + 1;
      if (silent_checkpoints[f] >= cfg.dead_after) dead.push_back(f);
      fired[f] = 0;
    }
    if (dead.empty()) return;
    // aim each dead feature at one of the worst-reconstructed held-out samples
    const RowMatrix resid = eval_x - xhat;
    std::vector<std::size_t> worst(std::size_t(resid.rows()));
    std::iota(worst.begin(), worst.end(), std::size_t{0});
    std::stable_sort(worst.begin(), worst.end(), [&](std::size_t a, std::size_t b) {
      return resid.row(Eigen::Index(a)).squaredNorm() > resid.row(Eigen::Index(b)).squaredNorm();
    });
    auto wd = sae.w_dec.matrix();
    auto we = sae.w_enc.matrix();
    for (std::size_t n = 0; n < dead.size(); ++n) {
      const std::size_t f = dead[n];
      Eigen::RowVectorXf dir = resid.row(Eigen::Index(worst[n % worst.size()]));
      if (dir.norm() == 0.0f) continue;
      dir.normalize();
      wd.row(Eigen::Index(f)) = dir;
      we.col(Eigen::Index(f)) = dir.transpose();
      sae.b_enc[f] = 0.0f;
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (p == 0)
          for (std::size_t j = 0; j < d; ++j) m[p].at(j, f) = v[p].at(j, f) = 0.0f;
        if (p == 1) m[p][f] = v[p][f] = 0.0f;
        if (p == 2)
          for (std::size_t j = 0; j < d; ++j) m[p].at(f, j) = v[p].at(f, j) = 0.0f;
      }
      silent_checkpoints[f] = 0;
      ++sae.provenance.reinitialized;
    }
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t& b : batch_idx) {
      if (cursor == train_idx.size()) {
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        cursor = 0;
      }
      b = train_idx[cursor++];
    }
    const RowMatrix x = detail::gather_rows(data.rows, batch_idx);
    const RowMatrix pre = detail::pre_activations(sae, x);
    std::vector<char> kept;
    const RowMatrix z = detail::topk_dense(pre, cfg.k, &kept);
    const RowMatrix xhat = detail::decode_dense(sae, z);

    const RowMatrix dxhat = (xhat - x) * (2.0f / float(x.size()));
    RowMatrix dz = dxhat * sae.w_dec.matrix().transpose();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (kept[i]) ++fired[i % F];
      else dz.data()[i] = 0.0f;
    }

    std::vector<Tensor> grads;
    for (const Tensor* p : params) grads.emplace_back(p->shape());
    const auto b_dec = Eigen::Map<const Eigen::RowVectorXf>(sae.b_dec.data().data(), Eigen::Index(d));
    const RowMatrix centered = x.rowwise() - b_dec;
    grads[0].matrix() = centered.transpose() * dz;
    const Eigen::RowVectorXf db_enc = dz.colwise().sum();
    grads[2].matrix() = z.transpose() * dxhat;
    const Eigen::RowVectorXf db_dec =
        dxhat.colwise().sum() - (dz * sae.w_enc.matrix().transpose()).colwise().sum();
    for (std::size_t f = 0; f < F; ++f) grads[1][f] = db_enc(Eigen::Index(f));
    for (std::size_t j = 0; j < d; ++j) grads[3][j] = db_dec(Eigen::Index(j));

    const double bc1 = 1.0 - std::pow(double(beta1), double(step + 1));
    const double bc2 = 1.0 - std::pow(double(beta2), double(step + 1));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto pd = params[p]->data();
      auto gd = grads[p].data();
      auto md = m[p].data();
      auto vd = v[p].data();
      for (std::size_t j = 0; j < pd.size(); ++j) {
        md[j] = beta1 * md[j] + (1.0f - beta1) * gd[j];
        vd[j] = beta2 * vd[j] + (1.0f - beta2) * gd[j] * gd[j];
        pd[j] = float(double(pd[j]) - double(cfg.learning_rate) * (double(md[j]) / bc1) /
                                          (std::sqrt(double(vd[j]) / bc2) + double(eps)));
      }
    }
    detail::normalize_decoder_rows(sae.w_dec);
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) checkpoint(step + 1);
  }
  return sae;
}

// ---------------------------------------------------------------------------
// Feature analyses
// ---------------------------------------------------------------------------

/// Mean activation of every feature over the rows of `acts` (unselected features count as 0).
inline std::vector<double> mean_feature_activation(const SaeModel& sae, const Tensor& acts) {
  require(acts.rank() == 2 && acts.dim(0) > 0, ErrorKind::shape, "need a non-empty activation matrix");
  check_input(sae, acts.dim(1));
  const RowMatrix z = detail::topk_dense(detail::pre_activations(sae, acts.matrix()), sae.config.k);
  std::vector<double> out(sae.features(), 0.0);
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    for (Eigen::Index f = 0; f < z.cols(); ++f) out[std::size_t(f)] += double(z(r, f));
  for (double& x : out) x /= double(z.rows());
  return out;
}

/// Indices of the top_n features by mean activation magnitude; ties go to the lower index.
inline std::vector<std::size_t> top_features(std::span<const double> mean_activation, std::size_t top_n) {
  require(top_n >= 1 && top_n <= mean_activation.size(), ErrorKind::range,
          "top_n=" + std::to_string(top_n) + " outside 1.." + std::to_string(mean_activation.size()));
  std::vector<std::size_t> idx(mean_activation.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(mean_activation[a]) > std::abs(mean_activation[b]);
  });
  idx.resize(top_n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// |A ∩ B| / top_n for two top-n feature sets.
inline double set_overlap(std::span<const std::size_t> a, std::span<const std::size_t> b, std::size_t top_n) {
  require(top_n > 0, ErrorKind::range, "top_n must be positive");
  std::size_t shared = 0;
  for (std::size_t x : a) shared += std::size_t(std::count(b.begin(), b.end(), x));
  return double(shared) / double(top_n);
}

inline double feature_overlap(const SaeModel& sae, const Tensor& run_a, const Tensor& run_b, std::size_t top_n = 20) {
  require(top_n <= sae.features(), ErrorKind::range,
          "top_n=" + std::to_string(top_n) + " exceeds the SAE's " + std::to_string(sae.features()) + " features");
  const auto a = top_features(mean_feature_activation(sae, run_a), top_n);
  const auto b = top_features(mean_feature_activation(sae, run_b), top_n);
  return set_overlap(a, b, top_n);
}

/// wrong / correct, or nothing when the correct-condition mean is zero.
inline std::optional<double> ratio_of_means(double wrong_mean, double correct_mean) {
  if (correct_mean == 0.0) return std::nullopt;
  return wrong_mean / correct_mean;
}

inline std::optional<double> amplification_ratio(const SaeModel& sae, std::size_t feature, const Tensor& wrong_acts,
                                                 const Tensor& correct_acts) {
  require(feature < sae.features(), ErrorKind::range, "feature index beyond the SAE width");
  return ratio_of_means(mean_feature_activation(sae, wrong_acts)[feature],
                        mean_feature_activation(sae, correct_acts)[feature]);
}

/// Pearson r, or nothing when either series has zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorKind::shape, "correlated series differ in length");
  require(x.size() >= 3, ErrorKind::range, "correlation needs at least 3 observations");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

struct HeadCorrelation {
  std::size_t head;
  std::optional<double> r;  // empty: zero variance, correlation undefined
};

/// Across traces: the feature's activation on resid_post[layer] at `position` (default: last
/// token) against each head's output norm at the same layer and position.
inline std::vector<HeadCorrelation> feature_head_correlation(const SaeModel& sae, std::span<const Trace> traces,
                                                             std::size_t feature, std::size_t layer,
                                                             std::optional<std::size_t> position = std::nullopt) {
  require(traces.size() >= 3, ErrorKind::range, "feature-head correlation needs at least 3 traces");
  require(feature < sae.features(), ErrorKind::range, "feature index beyond the SAE width");
  const ModelConfig& c = traces.front().config;
  require(layer < c.n_layers, ErrorKind::range, "layer beyond model depth");
  std::vector<double> feat;
  std::vector<std::vector<double>> norms(c.n_heads);
  for (const Trace& tr : traces) {
    require(tr.config == c, ErrorKind::config, "traces come from different model configs");
    require(tr.has_head_out, ErrorKind::config, "trace was stored without per-head outputs");
    const std::size_t pos = position.value_or(tr.seq_len() - 1);
    require(pos < tr.seq_len(), ErrorKind::range, "position beyond trace length");
    feat.push_back(encode_topk(sae, tr.layers[layer].resid_post.row(pos)).value_of(feature));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      double sq = 0.0;
      for (std::size_t j = 0; j < c.d_head; ++j) {
        const double v = tr.layers[layer].attn_head_out.at(h, pos, j);
        sq += v * v;
      }
      norms[h].push_back(std::sqrt(sq));
    }
  }
  std::vector<HeadCorrelation> out;
  for (std::size_t h = 0; h < c.n_heads; ++h) out.push_back({h, pearson(feat, norms[h])});
  return out;
}

// ---------------------------------------------------------------------------
// .sae persistence
// ---------------------------------------------------------------------------

inline Json to_json(const SaeConfig& c) {
  return {{"input_dim", c.input_dim}, {"expansion", c.expansion}, {"k", c.k},
          {"steps", c.steps},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"seed", c.seed},           {"eval_every", c.eval_every}, {"eval_fraction", c.eval_fraction},
          {"dead_after", c.dead_after}};
}

inline SaeConfig sae_config_from_json(const Json& j) {
  try {
    SaeConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.expansion = j.at("expansion").get<std::size_t>();
    c.k = j.at("k").get<std::size_t>();
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_fraction = j.value("eval_fraction", c.eval_fraction);
    c.dead_after = j.value("dead_after", c.dead_after);
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    fail(ErrorKind::config, std::string("SAE config: ") + e.what());
  }
}

inline std::string encode_sae(const SaeModel& sae, const Json& stamp = nullptr) {
  const SaeProvenance& p = sae.provenance;
  Json header{{"kind", "sae"},
                    {"config", to_json(sae.config)},
                    {"site", sae.site},
                    {"provenance",
                     {{"eval_steps", p.eval_steps},
                      {"eval_mse", p.eval_mse},
                      {"reinitialized", p.reinitialized},
                      {"train_rows", p.train_rows},
                      {"eval_rows", p.eval_rows},
                      {"small_dataset", p.small_dataset},
                      {"dead_feature_rule", "re-aim after " + std::to_string(sae.config.dead_after) +
                                                " silent eval checkpoints"}}}};
  if (!stamp.is_null()) header["stamp"] = stamp;
  const std::vector<const Tensor*> slots{&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec};
  return encode_container(kSaeMagic, header, flatten(slots));
}

inline SaeModel decode_sae(std::string_view bytes) {
  const Container c = decode_container(kSaeMagic, bytes, "sae");
  SaeModel sae;
  sae.config = sae_config_from_json(c.header.at("config"));
  sae.site = c.header.at("site");
  const Json& p = c.header.at("provenance");
  sae.provenance.eval_steps = p.at("eval_steps").get<std::vector<std::size_t>>();
  sae.provenance.eval_mse = p.at("eval_mse").get<std::vector<double>>();
  sae.provenance.reinitialized = p.at("reinitialized").get<std::size_t>();
  sae.provenance.train_rows = p.at("train_rows").get<std::size_t>();
  sae.provenance.eval_rows = p.at("eval_rows").get<std::size_t>();
  sae.provenance.small_dataset = p.at("small_dataset").get<bool>();
  const std::size_t d = sae.config.input_dim, F = sae.config.features();
  auto t = unflatten(c.payload, {{d, F}, {F}, {F, d}, {d}}, "sae");
  sae.w_enc = std::move(t[0]);
  sae.b_enc = std::move(t[1]);
  sae.w_dec = std::move(t[2]);
  sae.b_dec = std::move(t[3]);
  return sae;
}

inline void save_sae(const SaeModel& sae, const std::filesystem::path& path, const Json& stamp = nullptr) {
  write_file(path, encode_sae(sae, stamp));
}
inline SaeModel load_sae(const std::filesystem::path& path) { return decode_sae(read_file(path)); }

}  // namespace fdlab
