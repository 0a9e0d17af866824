#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fdlab/bugforge.hpp"
#include "fdlab/error.hpp"
#include "fdlab/model.hpp"

namespace fdlab {

/// Interchange training on attention patterns: for a share of each batch, a prompt in one
/// format is run with the layer's attention pattern (selected heads, answer rows only) taken
/// from the same pair in another format, and is trained toward that other format's answer.
/// This plants a localized, transplantable format mechanism at `layer`.
struct PatternInterchange {
  std::size_t layer = 2;
  std::vector<std::vector<std::size_t>> head_sets = {{0, 2, 4, 6}, {0, 1, 2, 3, 4, 5, 6, 7}};
  float fraction = 0.5f;
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float adam_eps = 1e-8f;
  float weight_decay = 0.01f;
  float grad_clip = 1.0f;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 42;
  std::size_t log_every = 50;
  std::optional<PatternInterchange> interchange = PatternInterchange{};

  void validate() const {
    require(steps > 0, ErrorKind::config, "train steps must be positive");
    require(batch_size > 0, ErrorKind::config, "batch size must be positive");
    require(learning_rate > 0.0f && std::isfinite(learning_rate), ErrorKind::config, "learning rate must be positive");
    require(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f, ErrorKind::config,
            "Adam moments must lie in [0,1)");
    if (interchange) {
      require(interchange->fraction >= 0.0f && interchange->fraction <= 1.0f, ErrorKind::config,
              "interchange fraction must lie in [0,1]");
      require(!interchange->head_sets.empty(), ErrorKind::config, "interchange needs at least one head set");
    }
  }
};

struct TrainLogEntry {
  std::size_t step;
  double loss;
  double learning_rate;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogEntry> log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// One teacher-forced sequence: tokens plus the positions whose next-token prediction is scored.
struct TrainSequence {
  Tokens tokens;
  std::vector<TokenId> targets;  // targets[t] is the token that should follow position t
  std::vector<char> scored;      // 1 where targets[t] contributes to the loss
};

/// Attention rows substituted during one sequence's forward pass. The substituted rows are
/// constants: no gradient flows into this layer's queries and keys through them.
struct PatternOverride {
  std::size_t layer = 0;
  std::vector<std::size_t> heads;
  std::size_t row_begin = 0;
  std::vector<RowMatrix> source;  // one T x T pattern per entry of `heads`
};

/// Prompt + answer with loss on answer tokens only (including the end token).
inline TrainSequence to_train_sequence(const Example& ex) {
  TrainSequence s;
  s.tokens = ex.prompt;
  s.tokens.insert(s.tokens.end(), ex.answer.begin(), ex.answer.end());
  s.tokens.pop_back();  // the end token is only ever a target
  const std::size_t T = s.tokens.size();
  s.targets.assign(T, 0);
  s.scored.assign(T, 0);
  for (std::size_t t = 0; t + 1 < T; ++t) s.targets[t] = s.tokens[t + 1];
  s.targets[T - 1] = ex.answer.back();
  for (std::size_t t = ex.prompt.size() - 1; t < T; ++t) s.scored[t] = 1;
  return s;
}

namespace detail {

/// Batched forward/backward over B equal-length sequences laid out as (B*T) rows.
class BatchEngine {
 public:
  explicit BatchEngine(const Checkpoint& ck) : ck_(ck), c_(ck.config) {}

  /// Mean cross-entropy over scored positions; fills `grads` when non-null.
  double run(const std::vector<TrainSequence>& batch, Weights* grads,
             const std::vector<std::optional<PatternOverride>>* overrides = nullptr) {
    require(!overrides || overrides->size() == batch.size(), ErrorKind::shape, "one override slot per sequence");
    setup(batch);
    overrides_ = overrides;
    forward();
    const double loss = loss_and_dlogits();
    if (grads) backward(*grads);
    return loss;
  }

  /// Attention pattern of sequence b, head h at layer l from the last run (padded to T x T).
  const RowMatrix& pattern(std::size_t l, std::size_t b, std::size_t h) const {
    return cache_.at(l).attn.at(b * c_.n_heads + h);
  }

 private:
  const PatternOverride* override_for(std::size_t l, std::size_t b) const {
    if (!overrides_ || !(*overrides_)[b] || (*overrides_)[b]->layer != l) return nullptr;
    return &*(*overrides_)[b];
  }

  // Rows of (b, h) at layer l holding a substituted pattern, as [begin, end).
  std::pair<Eigen::Index, Eigen::Index> overridden_rows(std::size_t l, std::size_t b, std::size_t h,
                                                        std::size_t* slot = nullptr) const {
    const PatternOverride* o = override_for(l, b);
    if (!o) return {0, 0};
    for (std::size_t k = 0; k < o->heads.size(); ++k)
      if (o->heads[k] == h) {
        if (slot) *slot = k;
        const auto end = std::min<Eigen::Index>(Eigen::Index(T_), o->source[k].rows());
        return {std::min<Eigen::Index>(Eigen::Index(o->row_begin), end), end};
      }
    return {0, 0};
  }

  struct LayerCache {
    RowMatrix x_in, n1, q, k, v, concat, x_mid, n2, gate, up, act;
    Eigen::VectorXf r1, r2;
    std::vector<RowMatrix> attn;  // B*H matrices of T x T
  };

  void setup(const std::vector<TrainSequence>& batch) {
    B_ = batch.size();
    T_ = 0;
    for (const auto& s : batch) T_ = std::max(T_, s.tokens.size());
    require(T_ <= c_.max_seq, ErrorKind::range, "training sequence exceeds max_seq");
    const std::size_t rows = B_ * T_;
    tokens_.assign(rows, 0);
    targets_.assign(rows, 0);
    scored_.assign(rows, 0);
    n_scored_ = 0;
    const TokenId pad = TokenId(c_.vocab_size - 1);
    for (std::size_t b = 0; b < B_; ++b) {
      const auto& s = batch[b];
      for (std::size_t t = 0; t < T_; ++t) {
        const std::size_t r = b * T_ + t;
        if (t < s.tokens.size()) {
          tokens_[r] = s.tokens[t];
          targets_[r] = s.targets[t];
          scored_[r] = s.scored[t];
          n_scored_ += s.scored[t] ? 1 : 0;
        } else {
          tokens_[r] = pad;
        }
      }
    }
    require(n_scored_ > 0, ErrorKind::config, "training batch has no scored positions");
  }

  static void rms_forward(const RowMatrix& x, const Tensor& gain, float eps, RowMatrix& n, Eigen::VectorXf& r) {
    const Eigen::Index d = x.cols();
    r = ((x.array().square().rowwise().sum() / float(d)) + eps).sqrt().matrix();
    n.resize(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < d; ++j) n(i, j) = x(i, j) / r(i) * gain[std::size_t(j)];
  }

  static void rms_backward(const RowMatrix& x, const Eigen::VectorXf& r, const Tensor& gain, const RowMatrix& dn,
                           Tensor& dgain, RowMatrix& dx_accum) {
    const Eigen::Index d = x.cols();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const float inv = 1.0f / r(i);
      float dot = 0.0f;
      for (Eigen::Index j = 0; j < d; ++j) {
        const float g = gain[std::size_t(j)];
        dgain[std::size_t(j)] += dn(i, j) * x(i, j) * inv;
        dot += dn(i, j) * g * x(i, j);
      }
      const float coef = dot * inv * inv * inv / float(d);
      for (Eigen::Index j = 0; j < d; ++j)
        dx_accum(i, j) += dn(i, j) * gain[std::size_t(j)] * inv - x(i, j) * coef;
    }
  }

  void forward() {
    const std::size_t d = c_.d_model, H = c_.n_heads, dh = c_.d_head, rows = B_ * T_;
    const float scale = 1.0f / std::sqrt(float(dh));
    const Weights& w = ck_.weights;
    RowMatrix x(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t t = r % T_;
      for (std::size_t j = 0; j < d; ++j)
        x(Eigen::Index(r), Eigen::Index(j)) = w.tok_embedding.at(tokens_[r], j) + w.pos_embedding.at(t, j);
    }
    cache_.resize(c_.n_layers);
    for (std::size_t l = 0; l < c_.n_layers; ++l) {
      const LayerWeights& lw = w.layers[l];
      LayerCache& lc = cache_[l];
      lc.x_in = x;
      rms_forward(lc.x_in, lw.attn_norm, c_.norm_eps, lc.n1, lc.r1);
      lc.q = lc.n1 * lw.wq.matrix();
      lc.k = lc.n1 * lw.wk.matrix();
      lc.v = lc.n1 * lw.wv.matrix();
      lc.concat.setZero(Eigen::Index(rows), Eigen::Index(d));
      lc.attn.resize(B_ * H);
      for (std::size_t b = 0; b < B_; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const auto Q = lc.q.block(Eigen::Index(b * T_), Eigen::Index(h * dh), Eigen::Index(T_), Eigen::Index(dh));
          const auto K = lc.k.block(Eigen::Index(b * T_), Eigen::Index(h * dh), Eigen::Index(T_), Eigen::Index(dh));
          const auto V = lc.v.block(Eigen::Index(b * T_), Eigen::Index(h * dh), Eigen::Index(T_), Eigen::Index(dh));
          RowMatrix A = (Q * K.transpose()) * scale;
          for (Eigen::Index i = 0; i < Eigen::Index(T_); ++i) {
            const float peak = A.row(i).head(i + 1).maxCoeff();
            float total = 0.0f;
            for (Eigen::Index j = 0; j <= i; ++j) {
              A(i, j) = std::exp(A(i, j) - peak);
              total += A(i, j);
            }
            for (Eigen::Index j = 0; j <= i; ++j) A(i, j) /= total;
            for (Eigen::Index j = i + 1; j < Eigen::Index(T_); ++j) A(i, j) = 0.0f;
          }
          std::size_t slot = 0;
          const auto [lo, hi] = overridden_rows(l, b, h, &slot);
          for (Eigen::Index i = lo; i < hi; ++i)
            for (Eigen::Index j = 0; j <= i; ++j) A(i, j) = override_for(l, b)->source[slot](i, j);
          lc.concat.block(Eigen::Index(b * T_), Eigen::Index(h * dh), Eigen::Index(T_), Eigen::Index(dh)) = A * V;
          lc.attn[b * H + h] = std::move(A);
        }
      }
      lc.x_mid = lc.x_in + lc.concat * lw.wo.matrix();
      rms_forward(lc.x_mid, lw.mlp_norm, c_.norm_eps, lc.n2, lc.r2);
      lc.gate = lc.n2 * lw.w_gate.matrix();
      lc.up = lc.n2 * lw.w_in.matrix();
      lc.act = lc.gate.unaryExpr([](float g) { return silu(g); }).cwiseProduct(lc.up);
      x = lc.x_mid + lc.act * lw.w_out.matrix();
    }
    x_final_ = std::move(x);
    rms_forward(x_final_, w.final_norm, c_.norm_eps, nf_, rf_);
    logits_ = nf_ * w.unembed.matrix();
  }

  double loss_and_dlogits() {
    const std::size_t V = c_.vocab_size, rows = B_ * T_;
    dlogits_.setZero(Eigen::Index(rows), Eigen::Index(V));
    double loss = 0.0;
    const float inv_n = 1.0f / float(n_scored_);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!scored_[r]) continue;
      const auto row = logits_.row(Eigen::Index(r));
      const float peak = row.maxCoeff();
      double total = 0.0;
      for (std::size_t v = 0; v < V; ++v) total += std::exp(double(row(Eigen::Index(v)) - peak));
      const double log_z = std::log(total) + double(peak);
      loss -= double(row(Eigen::Index(targets_[r]))) - log_z;
      for (std::size_t v = 0; v < V; ++v) {
        const float p = float(std::exp(double(row(Eigen::Index(v))) - log_z));
        dlogits_(Eigen::Index(r), Eigen::Index(v)) = (p - (v == targets_[r] ? 1.0f : 0.0f)) * inv_n;
      }
    }
    return loss / double(n_scored_);
  }

  void backward(Weights& g) {
    const std::size_t d = c_.d_model, H = c_.n_heads, dh = c_.d_head, rows = B_ * T_;
    const float scale = 1.0f / std::sqrt(float(dh));
    const Weights& w = ck_.weights;

    g.unembed.matrix().noalias() += nf_.transpose() * dlogits_;
    RowMatrix dnf = dlogits_ * w.unembed.matrix().transpose();
    RowMatrix dx = RowMatrix::Zero(Eigen::Index(rows), Eigen::Index(d));
    rms_backward(x_final_, rf_, w.final_norm, dnf, g.final_norm, dx);

    for (std::size_t li = c_.n_layers; li-- > 0;) {
      const LayerWeights& lw = w.layers[li];
      LayerWeights& lg = g.layers[li];
      const LayerCache& lc = cache_[li];

      // MLP
      lg.w_out.matrix().noalias() += lc.act.transpose() * dx;
      const RowMatrix dact = dx * lw.w_out.matrix().transpose();
      RowMatrix dgate(lc.gate.rows(), lc.gate.cols()), dup(lc.up.rows(), lc.up.cols());
      for (Eigen::Index i = 0; i < dgate.size(); ++i) {
        const float gv = lc.gate.data()[i];
        const float sig = 1.0f / (1.0f + std::exp(-gv));
        dup.data()[i] = dact.data()[i] * gv * sig;
        dgate.data()[i] = dact.data()[i] * lc.up.data()[i] * sig * (1.0f + gv * (1.0f - sig));
      }
      lg.w_gate.matrix().noalias() += lc.n2.transpose() * dgate;
      lg.w_in.matrix().noalias() += lc.n2.transpose() * dup;
      const RowMatrix dn2 = dgate * lw.w_gate.matrix().transpose() + dup * lw.w_in.matrix().transpose();
      RowMatrix dmid = dx;
      rms_backward(lc.x_mid, lc.r2, lw.mlp_norm, dn2, lg.mlp_norm, dmid);

      // attention
      lg.wo.matrix().noalias() += lc.concat.transpose() * dmid;
      const RowMatrix dconcat = dmid * lw.wo.matrix().transpose();
      RowMatrix dq = RowMatrix::Zero(Eigen::Index(rows), Eigen::Index(d));
      RowMatrix dk = dq, dv = dq;
      for (std::size_t b = 0; b < B_; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const Eigen::Index r0 = Eigen::Index(b * T_), c0 = Eigen::Index(h * dh), T = Eigen::Index(T_),
                             D = Eigen::Index(dh);
          const RowMatrix& A = lc.attn[b * H + h];
          const auto dO = dconcat.block(r0, c0, T, D);
          const RowMatrix dA = dO * lc.v.block(r0, c0, T, D).transpose();
          dv.block(r0, c0, T, D).noalias() += A.transpose() * dO;
          RowMatrix dS(T, T);
          const auto [lo, hi] = overridden_rows(li, b, h);
          for (Eigen::Index i = 0; i < T; ++i) {
            if (i >= lo && i < hi) {
              dS.row(i).setZero();
              continue;
            }
            float dot = 0.0f;
            for (Eigen::Index j = 0; j <= i; ++j) dot += dA(i, j) * A(i, j);
            for (Eigen::Index j = 0; j < T; ++j) dS(i, j) = j <= i ? A(i, j) * (dA(i, j) - dot) * scale : 0.0f;
          }
          dq.block(r0, c0, T, D).noalias() += dS * lc.k.block(r0, c0, T, D);
          dk.block(r0, c0, T, D).noalias() += dS.transpose() * lc.q.block(r0, c0, T, D);
        }
      }
      lg.wq.matrix().noalias() += lc.n1.transpose() * dq;
      lg.wk.matrix().noalias() += lc.n1.transpose() * dk;
      lg.wv.matrix().noalias() += lc.n1.transpose() * dv;
      const RowMatrix dn1 = dq * lw.wq.matrix().transpose() + dk * lw.wk.matrix().transpose() +
                            dv * lw.wv.matrix().transpose();
      dx = dmid;
      rms_backward(lc.x_in, lc.r1, lw.attn_norm, dn1, lg.attn_norm, dx);
    }

    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t t = r % T_;
      for (std::size_t j = 0; j < d; ++j) {
        const float v = dx(Eigen::Index(r), Eigen::Index(j));
        g.tok_embedding.at(tokens_[r], j) += v;
        g.pos_embedding.at(t, j) += v;
      }
    }
  }

  const Checkpoint& ck_;
  const ModelConfig& c_;
  std::size_t B_ = 0, T_ = 0, n_scored_ = 0;
  std::vector<TokenId> tokens_, targets_;
  std::vector<char> scored_;
  std::vector<LayerCache> cache_;
  const std::vector<std::optional<PatternOverride>>* overrides_ = nullptr;
  RowMatrix x_final_, nf_, logits_, dlogits_;
  Eigen::VectorXf rf_;
};

}  // namespace detail

/// Mean answer-token cross-entropy of `sequences` under `ck`, plus its gradient.
inline double loss_and_gradient(const Checkpoint& ck, const std::vector<TrainSequence>& sequences, Weights* grads) {
  detail::BatchEngine engine(ck);
  return engine.run(sequences, grads);
}

inline double learning_rate_at(const TrainConfig& tc, std::size_t step) {
  if (step < tc.warmup_steps) return tc.learning_rate * double(step + 1) / double(tc.warmup_steps);
  const double progress = double(step - tc.warmup_steps) / double(std::max<std::size_t>(1, tc.steps - tc.warmup_steps));
  return tc.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress))));
}

using TrainProgress = std::function<void(const TrainLogEntry&)>;

/// Adam with decoupled weight decay on matrices, global-norm clipping and warmup + cosine
/// decay. Single-threaded and seeded, so identical inputs give bit-identical checkpoints.
inline TrainResult train_toy(const ModelConfig& config, const std::vector<Example>& corpus, const TrainConfig& tc,
                             const TrainProgress& progress = {}) {
  config.validate();
  tc.validate();
  require(!corpus.empty(), ErrorKind::config, "training corpus is empty");

  TrainResult result;
  result.checkpoint = init_checkpoint(config, tc.seed);
  Checkpoint& ck = result.checkpoint;
  std::vector<TrainSequence> sequences;
  sequences.reserve(corpus.size());
  for (const auto& ex : corpus) sequences.push_back(to_train_sequence(ex));

  Weights grads = zeros_like(config), m = zeros_like(config), v = zeros_like(config);
  auto params = tensor_list(ck.weights);
  auto gl = tensor_list(grads), ml = tensor_list(m), vl = tensor_list(v);

  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  // Interchange partners: same operand pair in another format with an equally long prompt.
  std::vector<std::vector<std::size_t>> partners(corpus.size());
  std::size_t n_swap = 0;
  if (tc.interchange && tc.interchange->fraction > 0.0f) {
    require(tc.interchange->layer < config.n_layers, ErrorKind::config, "interchange layer beyond model depth");
    for (const auto& hs : tc.interchange->head_sets) {
      require(!hs.empty(), ErrorKind::config, "interchange head set is empty");
      for (std::size_t h : hs) require(h < config.n_heads, ErrorKind::config, "interchange head beyond n_heads");
    }
    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> by_pair;
    for (std::size_t i = 0; i < corpus.size(); ++i) by_pair[{corpus[i].pair.first, corpus[i].pair.second}].push_back(i);
    for (const auto& [key, idx] : by_pair)
      for (std::size_t i : idx)
        for (std::size_t j : idx)
          if (corpus[i].format != corpus[j].format && corpus[i].prompt.size() == corpus[j].prompt.size())
            partners[i].push_back(j);
    n_swap = std::size_t(std::lround(double(tc.interchange->fraction) * double(tc.batch_size)));
  }

  std::vector<TrainSequence> batch, sources;
  std::vector<std::optional<PatternOverride>> overrides;
  std::vector<std::size_t> swap_heads;
  double loss = 0.0;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    batch.clear();
    sources.clear();
    swap_heads.clear();
    overrides.assign(tc.batch_size, std::nullopt);
    while (sources.size() < n_swap) {
      const std::size_t target = next_index();
      if (partners[target].empty()) continue;
      const std::size_t source = partners[target][rng() % partners[target].size()];
      sources.push_back(sequences[source]);
      Example swapped = corpus[target];
      swapped.answer = corpus[source].answer;
      batch.push_back(to_train_sequence(swapped));
      swap_heads.push_back(rng() % tc.interchange->head_sets.size());
    }
    if (!sources.empty()) {
      detail::BatchEngine source_engine(ck);
      source_engine.run(sources, nullptr);
      for (std::size_t b = 0; b < sources.size(); ++b) {
        // answer rows start at the final prompt position, the first scored one
        const auto first_scored = std::find(batch[b].scored.begin(), batch[b].scored.end(), 1);
        PatternOverride o{tc.interchange->layer, tc.interchange->head_sets[swap_heads[b]],
                          std::size_t(first_scored - batch[b].scored.begin()), {}};
        const auto len = Eigen::Index(sources[b].tokens.size());
        for (std::size_t h : o.heads)
          o.source.push_back(source_engine.pattern(o.layer, b, h).topLeftCorner(len, len));
        overrides[b] = std::move(o);
      }
    }
    while (batch.size() < tc.batch_size) batch.push_back(sequences[next_index()]);
    for (Tensor* t : gl)
      for (float& x : t->data()) x = 0.0f;
    {
      detail::BatchEngine engine(ck);
      loss = engine.run(batch, &grads, n_swap ? &overrides : nullptr);
    }
    if (!std::isfinite(loss))
      fail(ErrorKind::numeric, "training diverged at step " + std::to_string(step) +
                                   " (loss is not finite); lower the learning rate");
    if (step == 0) result.initial_loss = loss;

    double sq = 0.0;
    for (const Tensor* t : gl)
      for (float x : t->data()) sq += double(x) * double(x);
    const double norm = std::sqrt(sq);
    const float clip = (tc.grad_clip > 0.0f && norm > tc.grad_clip) ? float(tc.grad_clip / norm) : 1.0f;

    const double lr = learning_rate_at(tc, step);
    const double bc1 = 1.0 - std::pow(double(tc.beta1), double(step + 1));
    const double bc2 = 1.0 - std::pow(double(tc.beta2), double(step + 1));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const bool decay = p.rank() == 2 && i >= 2;  // no decay on embeddings or gains
      auto pd = p.data();
      auto gd = gl[i]->data();
      auto md = ml[i]->data();
      auto vd = vl[i]->data();
      for (std::size_t j = 0; j < pd.size(); ++j) {
        const float gj = gd[j] * clip;
        md[j] = tc.beta1 * md[j] + (1.0f - tc.beta1) * gj;
        vd[j] = tc.beta2 * vd[j] + (1.0f - tc.beta2) * gj * gj;
        const double mhat = double(md[j]) / bc1, vhat = double(vd[j]) / bc2;
        double upd = mhat / (std::sqrt(vhat) + double(tc.adam_eps));
        if (decay) upd += double(tc.weight_decay) * double(pd[j]);
        pd[j] = float(double(pd[j]) - lr * upd);
      }
    }
    if ((tc.log_every && step % tc.log_every == 0) || step + 1 == tc.steps) {
      TrainLogEntry entry{step, loss, lr};
      result.log.push_back(entry);
      if (progress) progress(entry);
    }
  }
  result.final_loss = loss;
  ck.provenance.seed = tc.seed;
  ck.provenance.train_steps = tc.steps;
  ck.provenance.final_loss = loss;
  return result;
}

}  // namespace fdlab
