#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fdlab/error.hpp"
#include "fdlab/tensor.hpp"

namespace fdlab {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t n_heads = 8;
  std::size_t d_model = 128;
  std::size_t d_head = 16;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 20;
  std::size_t max_seq = 32;
  float norm_eps = 1e-5f;

  void validate() const {
    require(n_layers > 0 && n_heads > 0 && d_model > 0 && d_head > 0 && d_mlp > 0 && vocab_size > 0,
            ErrorKind::config, "model config extents must be positive");
    require(n_heads % 2 == 0, ErrorKind::config,
            "n_heads must be even (both head parities are needed), got " + std::to_string(n_heads));
    require(d_model == n_heads * d_head, ErrorKind::config, "d_model must equal n_heads * d_head");
    require(max_seq >= 2, ErrorKind::config, "max_seq must be at least 2");
    require(norm_eps > 0.0f && std::isfinite(norm_eps), ErrorKind::config, "norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor wq, wk, wv;  // [d_model, d_model], y = x W
  Tensor wo;          // [d_model, d_model]
  Tensor mlp_norm;    // [d_model]
  Tensor w_gate;      // [d_model, d_mlp]
  Tensor w_in;        // [d_model, d_mlp]
  Tensor w_out;       // [d_mlp, d_model]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  Tensor tok_embedding;  // [vocab, d_model]
  Tensor pos_embedding;  // [max_seq, d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d_model]
  Tensor unembed;     // [d_model, vocab]

  friend bool operator==(const Weights&, const Weights&) = default;
};

struct NamedShape {
  std::string name;
  Shape shape;
};

/// Tensor names and extents in on-disk declaration order.
inline std::vector<NamedShape> expected_shapes(const ModelConfig& c) {
  std::vector<NamedShape> out{{"tok_embedding", {c.vocab_size, c.d_model}},
                              {"pos_embedding", {c.max_seq, c.d_model}}};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", {c.d_model}});
    out.push_back({p + "wq", {c.d_model, c.d_model}});
    out.push_back({p + "wk", {c.d_model, c.d_model}});
    out.push_back({p + "wv", {c.d_model, c.d_model}});
    out.push_back({p + "wo", {c.d_model, c.d_model}});
    out.push_back({p + "mlp_norm", {c.d_model}});
    out.push_back({p + "w_gate", {c.d_model, c.d_mlp}});
    out.push_back({p + "w_in", {c.d_model, c.d_mlp}});
    out.push_back({p + "w_out", {c.d_mlp, c.d_model}});
  }
  out.push_back({"final_norm", {c.d_model}});
  out.push_back({"unembed", {c.d_model, c.vocab_size}});
  return out;
}

/// Pointers to every tensor, in the same order as expected_shapes().
template <class W>
auto tensor_list(W& w) {
  using Ptr = std::conditional_t<std::is_const_v<W>, const Tensor*, Tensor*>;
  std::vector<Ptr> out{&w.tok_embedding, &w.pos_embedding};
  for (auto& layer : w.layers) {
    for (Ptr t : {&layer.attn_norm, &layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.mlp_norm,
                  &layer.w_gate, &layer.w_in, &layer.w_out})
      out.push_back(t);
  }
  out.push_back(&w.final_norm);
  out.push_back(&w.unembed);
  return out;
}

/// Every tensor allocated at its expected shape, zero-filled.
inline Weights zeros_like(const ModelConfig& c) {
  Weights w;
  w.layers.resize(c.n_layers);
  auto shapes = expected_shapes(c);
  auto slots = tensor_list(w);
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = Tensor(shapes[i].shape);
  return w;
}

struct Provenance {
  std::uint64_t seed = 0;
  std::uint64_t train_steps = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::string note;

  friend bool operator==(const Provenance& a, const Provenance& b) {
    const bool loss_eq = (std::isnan(a.final_loss) && std::isnan(b.final_loss)) || a.final_loss == b.final_loss;
    return a.seed == b.seed && a.train_steps == b.train_steps && loss_eq && a.note == b.note;
  }
};

struct Checkpoint {
  ModelConfig config;
  Weights weights;
  Provenance provenance;

  void validate() const {
    config.validate();
    require(weights.layers.size() == config.n_layers, ErrorKind::shape, "layer count disagrees with config");
    auto shapes = expected_shapes(config);
    auto slots = tensor_list(weights);
    for (std::size_t i = 0; i < slots.size(); ++i)
      require(slots[i]->shape() == shapes[i].shape, ErrorKind::shape,
              shapes[i].name + " has shape " + shape_string(slots[i]->shape()) + ", expected " +
                  shape_string(shapes[i].shape));
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Gaussian initialisation; residual-writing projections are scaled down by depth.
inline Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed, float stddev = 0.02f) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.weights = zeros_like(config);
  ck.provenance.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float resid_scale = stddev / std::sqrt(2.0f * float(config.n_layers));
  auto fill = [&](Tensor& t, float s) {
    for (float& v : t.data()) v = s * normal(rng);
  };
  auto ones = [](Tensor& t) {
    for (float& v : t.data()) v = 1.0f;
  };
  fill(ck.weights.tok_embedding, stddev);
  fill(ck.weights.pos_embedding, stddev);
  for (auto& l : ck.weights.layers) {
    ones(l.attn_norm);
    fill(l.wq, stddev);
    fill(l.wk, stddev);
    fill(l.wv, stddev);
    fill(l.wo, resid_scale);
    ones(l.mlp_norm);
    fill(l.w_gate, stddev);
    fill(l.w_in, stddev);
    fill(l.w_out, resid_scale);
  }
  ones(ck.weights.final_norm);
  fill(ck.weights.unembed, stddev);
  return ck;
}

/// Complete activation record of one forward pass.
struct LayerRecord {
  Tensor resid_pre;      // [seq, d_model]
  Tensor attn_pattern;   // [n_heads, seq, seq], post-softmax
  Tensor attn_head_out;  // [n_heads, seq, d_head], pattern @ V; empty when omitted
  Tensor attn_out;       // [seq, d_model], after W_o
  Tensor mlp_act;        // [seq, d_mlp], silu(gate) * up, the input to W_out
  Tensor mlp_out;        // [seq, d_model]
  Tensor resid_post;     // [seq, d_model]

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

struct Trace {
  ModelConfig config;
  Tokens tokens;
  std::vector<LayerRecord> layers;
  std::vector<float> final_norm_scale;  // per position
  Tensor logits;                        // [seq, vocab]
  bool has_head_out = true;

  std::size_t seq_len() const noexcept { return tokens.size(); }

  friend bool operator==(const Trace&, const Trace&) = default;
};

/// Override points called while a forward pass is in flight. Each receives the freshly
/// computed activation and may rewrite it before downstream computation uses it.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  virtual void resid_pre(std::size_t /*layer*/, Tensor& /*x*/) {}
  virtual void attn_pattern(std::size_t /*layer*/, Tensor& /*pattern*/) {}
  virtual void attn_out(std::size_t /*layer*/, Tensor& /*out*/) {}
  virtual void mlp_act(std::size_t /*layer*/, Tensor& /*act*/) {}
  virtual void mlp_out(std::size_t /*layer*/, Tensor& /*out*/) {}
  virtual void resid_post(std::size_t /*layer*/, Tensor& /*x*/) {}
};

/// Numerically stable softmax in place (max subtraction, double accumulation).
inline void softmax_inplace(std::span<float> v) {
  require(!v.empty(), ErrorKind::range, "softmax of an empty vector");
  float peak = -std::numeric_limits<float>::infinity();
  for (float x : v) {
    require(std::isfinite(x), ErrorKind::numeric, "softmax input is not finite");
    peak = std::max(peak, x);
  }
  double total = 0.0;
  std::vector<double> e(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp(double(v[i]) - double(peak));
    total += e[i];
  }
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(e[i] / total);
}

inline std::vector<float> softmax_row(std::span<const float> scores) {
  std::vector<float> out(scores.begin(), scores.end());
  softmax_inplace(out);
  return out;
}

/// sqrt(mean(x^2) + eps), the divisor used by every RMS normalisation.
inline float rms_scale(std::span<const float> x, float eps) {
  double ss = 0.0;
  for (float v : x) ss += double(v) * double(v);
  return float(std::sqrt(ss / double(x.size()) + double(eps)));
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

namespace detail {

inline Tensor rms_normalize(const Tensor& x, const Tensor& gain, float eps, std::vector<float>* scales = nullptr) {
  const std::size_t seq = x.dim(0), d = x.dim(1);
  Tensor out({seq, d});
  if (scales) scales->resize(seq);
  for (std::size_t i = 0; i < seq; ++i) {
    const float s = rms_scale(x.row(i), eps);
    if (scales) (*scales)[i] = s;
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) / s * gain[j];
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& w) {
  RowMatrix m = a.matrix() * w.matrix();
  return from_matrix(m);
}

inline void add_inplace(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  require(!tokens.empty(), ErrorKind::range, "token sequence is empty");
  require(tokens.size() <= c.max_seq, ErrorKind::range,
          "sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " + std::to_string(c.max_seq));
  for (TokenId t : tokens)
    require(t < c.vocab_size, ErrorKind::range,
            "token id " + std::to_string(t) + " out of range for vocab " + std::to_string(c.vocab_size));
}

/// Forward pass recording every intermediate. `hooks` may rewrite activations in flight.
inline Trace run_forward(const Checkpoint& ck, std::span<const TokenId> tokens, ForwardHooks* hooks = nullptr,
                         bool keep_head_out = true) {
  const ModelConfig& c = ck.config;
  check_tokens(c, tokens);
  const Weights& w = ck.weights;
  const std::size_t seq = tokens.size(), d = c.d_model, H = c.n_heads, dh = c.d_head;
  const float inv_sqrt = 1.0f / std::sqrt(float(dh));

  Trace tr;
  tr.config = c;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.has_head_out = keep_head_out;
  tr.layers.resize(c.n_layers);

  Tensor x({seq, d});
  for (std::size_t i = 0; i < seq; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x.at(i, j) = w.tok_embedding.at(tokens[i], j) + w.pos_embedding.at(i, j);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerRecord& rec = tr.layers[l];
    if (hooks) hooks->resid_pre(l, x);
    rec.resid_pre = x;

    const Tensor n1 = detail::rms_normalize(x, lw.attn_norm, c.norm_eps);
    const Tensor q = detail::matmul(n1, lw.wq);
    const Tensor k = detail::matmul(n1, lw.wk);
    const Tensor v = detail::matmul(n1, lw.wv);

    Tensor pattern({H, seq, seq});
    std::vector<float> scores;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        scores.assign(i + 1, 0.0f);
        for (std::size_t j = 0; j <= i; ++j) {
          float dot = 0.0f;
          for (std::size_t e = 0; e < dh; ++e) dot += q.at(i, h * dh + e) * k.at(j, h * dh + e);
          scores[j] = dot * inv_sqrt;
        }
        softmax_inplace(scores);
        for (std::size_t j = 0; j <= i; ++j) pattern.at(h, i, j) = scores[j];
      }
    }
    if (hooks) hooks->attn_pattern(l, pattern);

    Tensor head_out({H, seq, dh});
    Tensor concat({seq, d});
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t e = 0; e < dh; ++e) {
          float acc = 0.0f;
          for (std::size_t j = 0; j <= i; ++j) acc += pattern.at(h, i, j) * v.at(j, h * dh + e);
          head_out.at(h, i, e) = acc;
          concat.at(i, h * dh + e) = acc;
        }
      }
    }
    Tensor attn_out = detail::matmul(concat, lw.wo);
    if (hooks) hooks->attn_out(l, attn_out);

    Tensor mid = x;
    detail::add_inplace(mid, attn_out);
    const Tensor n2 = detail::rms_normalize(mid, lw.mlp_norm, c.norm_eps);
    const Tensor gate = detail::matmul(n2, lw.w_gate);
    Tensor act = detail::matmul(n2, lw.w_in);
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(gate[i]) * act[i];
    if (hooks) hooks->mlp_act(l, act);
    Tensor mlp_out = detail::matmul(act, lw.w_out);
    if (hooks) hooks->mlp_out(l, mlp_out);

    Tensor post = std::move(mid);
    detail::add_inplace(post, mlp_out);
    if (hooks) hooks->resid_post(l, post);

    rec.attn_pattern = std::move(pattern);
    if (keep_head_out) rec.attn_head_out = std::move(head_out);
    rec.attn_out = std::move(attn_out);
    rec.mlp_act = std::move(act);
    rec.mlp_out = std::move(mlp_out);
    rec.resid_post = post;
    x = std::move(post);
  }

  const Tensor nf = detail::rms_normalize(x, w.final_norm, c.norm_eps, &tr.final_norm_scale);
  tr.logits = detail::matmul(nf, w.unembed);
  return tr;
}

inline Trace forward_trace(const Checkpoint& ck, std::span<const TokenId> tokens) { return run_forward(ck, tokens); }

/// Index of the largest value; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Greedy decoding without a KV cache: every step re-runs the full prefix.
inline Tokens generate_greedy(const Checkpoint& ck, std::span<const TokenId> prompt, std::size_t max_new,
                              std::optional<TokenId> end_token = std::nullopt, ForwardHooks* hooks = nullptr) {
  check_tokens(ck.config, prompt);
  require(prompt.size() + max_new <= ck.config.max_seq, ErrorKind::range,
          "prompt of " + std::to_string(prompt.size()) + " tokens leaves no room for " + std::to_string(max_new) +
              " new tokens within max_seq " + std::to_string(ck.config.max_seq));
  Tokens seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new; ++step) {
    const Trace tr = run_forward(ck, seq, hooks, false);
    const TokenId next = TokenId(argmax(tr.logits.row(seq.size() - 1)));
    seq.push_back(next);
    if (end_token && next == *end_token) break;
  }
  return seq;
}

/// Final RMS normalisation with a caller-supplied scale, then the unembedding map.
inline std::vector<float> unembed(const Checkpoint& ck, std::span<const float> hidden, float norm_scale) {
  require(norm_scale > 0.0f && std::isfinite(norm_scale), ErrorKind::range, "norm_scale must be positive");
  const std::size_t d = ck.config.d_model, V = ck.config.vocab_size;
  require(hidden.size() == d, ErrorKind::shape, "hidden vector length does not match d_model");
  std::vector<float> normed(d);
  for (std::size_t j = 0; j < d; ++j) normed[j] = hidden[j] / norm_scale * ck.weights.final_norm[j];
  RowMatrix row = ConstMatrixMap(normed.data(), 1, Eigen::Index(d)) * ck.weights.unembed.matrix();
  return std::vector<float>(row.data(), row.data() + V);
}

}  // namespace fdlab
