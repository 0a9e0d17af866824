#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fdlab/error.hpp"
#include "fdlab/intervention.hpp"
#include "fdlab/model.hpp"

namespace fdlab {

/// Hidden state after `layer` blocks: 0 is the embedding, n_layers the final residual.
inline std::span<const float> residual_after(const Trace& tr, std::size_t layer, std::size_t position) {
  require(layer <= tr.config.n_layers, ErrorKind::range,
          "lens layer " + std::to_string(layer) + " exceeds " + std::to_string(tr.config.n_layers));
  require(position < tr.seq_len(), ErrorKind::range, "lens position outside the trace");
  if (layer == 0) return tr.layers[0].resid_pre.row(position);
  return tr.layers[layer - 1].resid_post.row(position);
}

/// Vocabulary distribution read off an intermediate residual, normalised with its own RMS scale.
inline std::vector<float> logit_lens(const Checkpoint& ck, const Trace& tr, std::size_t layer,
                                     std::optional<std::size_t> position = std::nullopt) {
  require(ck.config == tr.config, ErrorKind::shape, "trace and checkpoint configs differ");
  const std::size_t pos = position.value_or(tr.seq_len() - 1);
  const auto hidden = residual_after(tr, layer, pos);
  auto scores = unembed(ck, hidden, rms_scale(hidden, ck.config.norm_eps));
  softmax_inplace(scores);
  return scores;
}

struct LensPoint {
  std::size_t layer;
  float target_prob;
  TokenId top_token;
  float top_prob;
};

/// Per-layer probability of `token` plus the top-1 reading, for layers 0..n_layers.
struct LensCurve {
  TokenId token;
  std::size_t position;
  std::vector<LensPoint> points;

  /// First layer where `token` is the top-1 reading, if any.
  std::optional<std::size_t> first_top1_layer() const {
    for (const auto& p : points)
      if (p.top_token == token) return p.layer;
    return std::nullopt;
  }
};

inline LensCurve lens_curve(const Checkpoint& ck, const Trace& tr, TokenId token,
                            std::optional<std::size_t> position = std::nullopt) {
  require(token < ck.config.vocab_size, ErrorKind::range, "lens token outside the vocabulary");
  LensCurve curve{token, position.value_or(tr.seq_len() - 1), {}};
  for (std::size_t l = 0; l <= ck.config.n_layers; ++l) {
    const auto dist = logit_lens(ck, tr, l, curve.position);
    const std::size_t top = argmax(dist);
    curve.points.push_back({l, dist[token], TokenId(top), dist[top]});
  }
  return curve;
}

enum class ComponentKind { embedding, attention, mlp };

inline std::string_view to_string(ComponentKind k) {
  switch (k) {
    case ComponentKind::embedding: return "embedding";
    case ComponentKind::attention: return "attn";
    case ComponentKind::mlp: return "mlp";
  }
  return "?";
}

struct LogitComponent {
  ComponentKind kind;
  std::size_t layer;  // 0 for the embedding
  std::vector<float> logits;
};

/// Direct logit attribution at one position. Every residual component is pushed through the
/// final gain and unembedding with the final position's RMS scale frozen, so the components
/// add up to the model's logits.
struct Attribution {
  std::size_t position;
  std::vector<LogitComponent> components;  // embedding, then attn/mlp per layer

  std::vector<float> total() const {
    std::vector<float> sum(components.front().logits.size(), 0.0f);
    for (const auto& c : components)
      for (std::size_t v = 0; v < sum.size(); ++v) sum[v] += c.logits[v];
    return sum;
  }

  /// attn + mlp contribution of one layer.
  std::vector<float> layer_total(std::size_t layer) const {
    std::vector<float> sum(components.front().logits.size(), 0.0f);
    for (const auto& c : components)
      if (c.kind != ComponentKind::embedding && c.layer == layer)
        for (std::size_t v = 0; v < sum.size(); ++v) sum[v] += c.logits[v];
    return sum;
  }
};

inline Attribution layer_attribution(const Checkpoint& ck, const Trace& tr,
                                     std::optional<std::size_t> position = std::nullopt) {
  require(ck.config == tr.config, ErrorKind::shape, "trace and checkpoint configs differ");
  const std::size_t pos = position.value_or(tr.seq_len() - 1);
  require(pos < tr.seq_len(), ErrorKind::range, "attribution position outside the trace");
  const float scale = tr.final_norm_scale[pos];
  auto project = [&](std::span<const float> v) {
    const std::size_t d = ck.config.d_model, V = ck.config.vocab_size;
    std::vector<float> out(V, 0.0f);
    for (std::size_t j = 0; j < d; ++j) {
      const float n = v[j] / scale * ck.weights.final_norm[j];
      for (std::size_t t = 0; t < V; ++t) out[t] += n * ck.weights.unembed.at(j, t);
    }
    return out;
  };
  Attribution a{pos, {}};
  a.components.push_back({ComponentKind::embedding, 0, project(tr.layers[0].resid_pre.row(pos))});
  for (std::size_t l = 0; l < tr.config.n_layers; ++l) {
    a.components.push_back({ComponentKind::attention, l, project(tr.layers[l].attn_out.row(pos))});
    a.components.push_back({ComponentKind::mlp, l, project(tr.layers[l].mlp_out.row(pos))});
  }
  return a;
}

/// KL(p || q) in nats, with q floored at 1e-12.
inline double kl_divergence(std::span<const float> p, std::span<const float> q) {
  require(p.size() == q.size() && !p.empty(), ErrorKind::shape, "KL divergence needs distributions over one support");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0f) continue;
    kl += double(p[i]) * std::log(double(p[i]) / std::max(double(q[i]), 1e-12));
  }
  return std::max(kl, 0.0);
}

/// Per-layer KL between the softmaxed layer attributions of two runs; returns (layer, KL) pairs.
inline std::vector<std::pair<std::size_t, double>> attribution_kl_by_layer(const Attribution& a, const Attribution& b,
                                                                          std::size_t n_layers) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    auto p = a.layer_total(l), q = b.layer_total(l);
    softmax_inplace(p);
    softmax_inplace(q);
    out.emplace_back(l, kl_divergence(p, q));
  }
  return out;
}

struct NeuronScore {
  NeuronRef neuron;
  float score;  // activation(bad) - activation(good)
};

/// bad - good MLP activation for every neuron in [layer_begin, layer_end), sorted by score
/// descending (ties by layer, then index).
inline std::vector<NeuronScore> differential_scores(const Trace& bad, const Trace& good, std::size_t layer_begin,
                                                    std::size_t layer_end,
                                                    std::optional<std::size_t> bad_pos = std::nullopt,
                                                    std::optional<std::size_t> good_pos = std::nullopt) {
  require(bad.config == good.config, ErrorKind::config, "differential scores need traces from one model config");
  require(layer_begin < layer_end && layer_end <= bad.config.n_layers, ErrorKind::range, "bad layer range");
  const std::size_t bp = bad_pos.value_or(bad.seq_len() - 1), gp = good_pos.value_or(good.seq_len() - 1);
  require(bp < bad.seq_len() && gp < good.seq_len(), ErrorKind::range, "score position outside a trace");
  std::vector<NeuronScore> out;
  for (std::size_t l = layer_begin; l < layer_end; ++l)
    for (std::size_t n = 0; n < bad.config.d_mlp; ++n)
      out.push_back({{l, n}, bad.layers[l].mlp_act.at(bp, n) - good.layers[l].mlp_act.at(gp, n)});
  std::stable_sort(out.begin(), out.end(), [](const NeuronScore& a, const NeuronScore& b) { return a.score > b.score; });
  return out;
}

/// The default "hijacker" set: the eight highest positive scores.
inline std::vector<NeuronRef> top_neurons(const std::vector<NeuronScore>& ranked, std::size_t n = 8) {
  std::vector<NeuronRef> out;
  for (const auto& s : ranked) {
    if (out.size() == n || s.score <= 0.0f) break;
    out.push_back(s.neuron);
  }
  return out;
}

}  // namespace fdlab
