#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fdlab/error.hpp"
#include "fdlab/model.hpp"
#include "fdlab/tensor.hpp"

namespace fdlab {

enum class Site { resid_pre, attn_pattern, attn_out, mlp_out, resid_post, mlp_neuron };

inline std::string_view to_string(Site s) {
  switch (s) {
    case Site::resid_pre: return "resid_pre";
    case Site::attn_pattern: return "attn_pattern";
    case Site::attn_out: return "attn_out";
    case Site::mlp_out: return "mlp_out";
    case Site::resid_post: return "resid_post";
    case Site::mlp_neuron: return "mlp_neuron";
  }
  return "?";
}

inline Site parse_site(std::string_view s) {
  for (Site site : {Site::resid_pre, Site::attn_pattern, Site::attn_out, Site::mlp_out, Site::resid_post,
                    Site::mlp_neuron})
    if (to_string(site) == s) return site;
  fail(ErrorKind::config, "unknown activation site '" + std::string(s) + "'");
}

/// Half-open position interval [begin, end); an absent end means "to the end of the sequence".
struct PositionRange {
  std::size_t begin = 0;
  std::optional<std::size_t> end;

  static PositionRange all() { return {}; }
  static PositionRange from(std::size_t b) { return {b, std::nullopt}; }

  std::size_t stop(std::size_t seq) const { return std::min(end.value_or(seq), seq); }
  bool overlaps(const PositionRange& o) const {
    const std::size_t inf = std::numeric_limits<std::size_t>::max();
    return begin < o.end.value_or(inf) && o.begin < end.value_or(inf);
  }

  friend bool operator==(const PositionRange&, const PositionRange&) = default;
};

struct ActivationAddress {
  std::size_t layer = 0;
  Site site = Site::resid_post;
  std::vector<std::size_t> heads;  // attn_pattern only
  std::size_t neuron = 0;          // mlp_neuron only
  PositionRange positions;

  void validate(const ModelConfig& c) const {
    require(layer < c.n_layers, ErrorKind::range,
            "layer " + std::to_string(layer) + " out of range for " + std::to_string(c.n_layers) + " layers");
    if (site == Site::attn_pattern) {
      require(!heads.empty(), ErrorKind::range, "attn_pattern address needs a non-empty head set");
      std::set<std::size_t> seen;
      for (std::size_t h : heads) {
        require(h < c.n_heads, ErrorKind::range, "head " + std::to_string(h) + " out of range");
        require(seen.insert(h).second, ErrorKind::range, "head " + std::to_string(h) + " listed twice");
      }
    }
    if (site == Site::mlp_neuron)
      require(neuron < c.d_mlp, ErrorKind::range, "mlp neuron " + std::to_string(neuron) + " out of range");
    if (positions.end)
      require(*positions.end > positions.begin, ErrorKind::range, "empty position range");
  }

  /// Two addresses collide when they could write the same activation entry.
  bool conflicts(const ActivationAddress& o) const {
    if (layer != o.layer || site != o.site || !positions.overlaps(o.positions)) return false;
    if (site == Site::mlp_neuron) return neuron == o.neuron;
    if (site == Site::attn_pattern) {
      for (std::size_t h : heads)
        if (std::find(o.heads.begin(), o.heads.end(), h) != o.heads.end()) return true;
      return false;
    }
    return true;
  }
};

enum class BlendKind {
  convex,             // pattern = lambda * source + (1 - lambda) * target on every selected row
  position_fraction,  // the last round(lambda * m) of the m overlapping rows are replaced outright
};

struct Replace {
  Tensor source;
};
struct Blend {
  float lambda = 1.0f;
  Tensor source;
  BlendKind kind = BlendKind::convex;
};
struct SetScalar {
  float alpha = 0.0f;
};
struct AddScaled {
  float alpha = 0.0f;
  std::vector<float> vector;
};

using PatchMode = std::variant<Replace, Blend, SetScalar, AddScaled>;

struct Directive {
  ActivationAddress address;
  PatchMode mode;
};

struct PatchPlan {
  std::vector<Directive> directives;

  bool empty() const noexcept { return directives.empty(); }

  void validate(const ModelConfig& c) const {
    for (std::size_t i = 0; i < directives.size(); ++i) {
      const Directive& d = directives[i];
      d.address.validate(c);
      for (std::size_t j = 0; j < i; ++j)
        require(!directives[j].address.conflicts(d.address), ErrorKind::config,
                "plan directives " + std::to_string(j) + " and " + std::to_string(i) + " address the same activation");
      std::visit([&](const auto& m) { check_mode(c, d.address, m); }, d.mode);
    }
  }

 private:
  static void check_source(const ModelConfig& c, const ActivationAddress& a, const Tensor& src) {
    const Shape& s = src.shape();
    if (a.site == Site::attn_pattern) {
      require(s.size() == 3 && s[0] == a.heads.size() && s[1] == s[2] && s[1] <= c.max_seq, ErrorKind::shape,
              "attn_pattern source must be [heads, seq, seq] with one slab per selected head, got " +
                  shape_string(s));
    } else if (a.site == Site::mlp_neuron) {
      require(s.size() == 1 && s[0] <= c.max_seq, ErrorKind::shape,
              "mlp_neuron source must be a per-position vector, got " + shape_string(s));
    } else {
      require(s.size() == 2 && s[1] == c.d_model && s[0] <= c.max_seq, ErrorKind::shape,
              std::string(to_string(a.site)) + " source must be [seq, d_model], got " + shape_string(s));
    }
    require(src.all_finite(), ErrorKind::numeric, "patch source contains non-finite values");
  }
  static void check_mode(const ModelConfig& c, const ActivationAddress& a, const Replace& m) { check_source(c, a, m.source); }
  static void check_mode(const ModelConfig& c, const ActivationAddress& a, const Blend& m) {
    require(std::isfinite(m.lambda) && m.lambda >= 0.0f && m.lambda <= 1.0f, ErrorKind::range,
            "blend lambda must lie in [0,1], got " + std::to_string(m.lambda));
    check_source(c, a, m.source);
  }
  static void check_mode(const ModelConfig&, const ActivationAddress& a, const SetScalar& m) {
    require(std::isfinite(m.alpha), ErrorKind::numeric, "scalar patch value must be finite");
    require(a.site != Site::attn_pattern, ErrorKind::config,
            "set-scalar on attention patterns would leave the probability simplex");
  }
  static void check_mode(const ModelConfig& c, const ActivationAddress& a, const AddScaled& m) {
    require(std::isfinite(m.alpha), ErrorKind::numeric, "steering strength must be finite");
    require(a.site != Site::attn_pattern, ErrorKind::config, "steering is not defined on attention patterns");
    const std::size_t want = a.site == Site::mlp_neuron ? 1 : c.d_model;
    require(m.vector.size() == want, ErrorKind::shape,
            "steering vector has length " + std::to_string(m.vector.size()) + ", address expects " +
                std::to_string(want));
    for (float v : m.vector) require(std::isfinite(v), ErrorKind::numeric, "steering vector is not finite");
  }
};

namespace detail {

template <class... Fs>
struct Overload : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overload(Fs...) -> Overload<Fs...>;

/// Positions a directive touches in a target of length `seq`. Replace and Blend are further
/// limited to the rows their source covers (positions below min(source_len, seq)).
inline std::pair<std::size_t, std::size_t> touched_rows(const ActivationAddress& a, const PatchMode& mode,
                                                        std::size_t seq) {
  std::size_t stop = a.positions.stop(seq);
  if (const auto* r = std::get_if<Replace>(&mode)) stop = std::min(stop, r->source.dim(a.site == Site::attn_pattern ? 1 : 0));
  if (const auto* b = std::get_if<Blend>(&mode)) stop = std::min(stop, b->source.dim(a.site == Site::attn_pattern ? 1 : 0));
  return {std::min(a.positions.begin, stop), stop};
}

class PlanHooks final : public ForwardHooks {
 public:
  explicit PlanHooks(const PatchPlan& plan) : plan_(plan) {}

  void resid_pre(std::size_t l, Tensor& x) override { apply_vector_site(l, Site::resid_pre, x); }
  void attn_out(std::size_t l, Tensor& x) override { apply_vector_site(l, Site::attn_out, x); }
  void mlp_out(std::size_t l, Tensor& x) override { apply_vector_site(l, Site::mlp_out, x); }
  void resid_post(std::size_t l, Tensor& x) override { apply_vector_site(l, Site::resid_post, x); }

  void attn_pattern(std::size_t l, Tensor& pattern) override {
    const std::size_t seq = pattern.dim(1);
    for (const Directive& d : plan_.directives) {
      if (d.address.layer != l || d.address.site != Site::attn_pattern) continue;
      const auto [lo, hi] = touched_rows(d.address, d.mode, seq);
      if (lo >= hi) continue;
      const auto& heads = d.address.heads;
      auto mix = [&](float lambda, const Tensor& src, std::size_t row_lo) {
        for (std::size_t k = 0; k < heads.size(); ++k)
          for (std::size_t i = row_lo; i < hi; ++i)
            for (std::size_t j = 0; j <= i; ++j)
              pattern.at(heads[k], i, j) = lambda * src.at(k, i, j) + (1.0f - lambda) * pattern.at(heads[k], i, j);
      };
      if (const auto* r = std::get_if<Replace>(&d.mode)) {
        for (std::size_t k = 0; k < heads.size(); ++k)
          for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j <= i; ++j) pattern.at(heads[k], i, j) = r->source.at(k, i, j);
      } else if (const auto* b = std::get_if<Blend>(&d.mode)) {
        if (b->kind == BlendKind::convex) {
          mix(b->lambda, b->source, lo);
        } else {
          const std::size_t m = hi - lo;
          const auto n = std::size_t(std::lround(double(b->lambda) * double(m)));
          if (n > 0) mix(1.0f, b->source, hi - n);
        }
      }
    }
  }

  void mlp_act(std::size_t l, Tensor& act) override {
    const std::size_t seq = act.dim(0);
    for (const Directive& d : plan_.directives) {
      if (d.address.layer != l || d.address.site != Site::mlp_neuron) continue;
      const auto [lo, hi] = touched_rows(d.address, d.mode, seq);
      const std::size_t n = d.address.neuron;
      for (std::size_t i = lo; i < hi; ++i) {
        float& cell = act.at(i, n);
        std::visit(Overload{[&](const Replace& r) { cell = r.source[i]; },
                            [&](const Blend& b) { cell = blend_cell(b, i, lo, hi, b.source[i], cell); },
                            [&](const SetScalar& s) { cell = s.alpha; },
                            [&](const AddScaled& a) { cell = cell + a.alpha * a.vector[0]; }},
                   d.mode);
      }
    }
  }

 private:
  static float blend_cell(const Blend& b, std::size_t i, std::size_t lo, std::size_t hi, float src, float tgt) {
    if (b.kind == BlendKind::convex) return b.lambda * src + (1.0f - b.lambda) * tgt;
    const auto n = std::size_t(std::lround(double(b.lambda) * double(hi - lo)));
    return i >= hi - n ? src : tgt;
  }

  void apply_vector_site(std::size_t l, Site site, Tensor& x) {
    const std::size_t seq = x.dim(0), d = x.dim(1);
    for (const Directive& dir : plan_.directives) {
      if (dir.address.layer != l || dir.address.site != site) continue;
      const auto [lo, hi] = touched_rows(dir.address, dir.mode, seq);
      for (std::size_t i = lo; i < hi; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          float& cell = x.at(i, j);
          std::visit(Overload{[&](const Replace& r) { cell = r.source.at(i, j); },
                              [&](const Blend& b) { cell = blend_cell(b, i, lo, hi, b.source.at(i, j), cell); },
                              [&](const SetScalar& s) { cell = s.alpha; },
                              [&](const AddScaled& a) { cell = cell + a.alpha * a.vector[j]; }},
                     dir.mode);
        }
      }
    }
  }

  const PatchPlan& plan_;
};

}  // namespace detail

/// Copy of the activation at `address` over the whole sequence:
/// attn_pattern -> [heads, seq, seq] in address head order; mlp_neuron -> [seq]; others -> [seq, d_model].
inline Tensor capture(const Trace& tr, const ActivationAddress& address) {
  address.validate(tr.config);
  const LayerRecord& rec = tr.layers[address.layer];
  const std::size_t seq = tr.seq_len();
  switch (address.site) {
    case Site::resid_pre: return rec.resid_pre;
    case Site::attn_out: return rec.attn_out;
    case Site::mlp_out: return rec.mlp_out;
    case Site::resid_post: return rec.resid_post;
    case Site::attn_pattern: {
      Tensor out({address.heads.size(), seq, seq});
      for (std::size_t k = 0; k < address.heads.size(); ++k)
        for (std::size_t i = 0; i < seq; ++i)
          for (std::size_t j = 0; j < seq; ++j) out.at(k, i, j) = rec.attn_pattern.at(address.heads[k], i, j);
      return out;
    }
    case Site::mlp_neuron: {
      Tensor out({seq});
      for (std::size_t i = 0; i < seq; ++i) out[i] = rec.mlp_act.at(i, address.neuron);
      return out;
    }
  }
  fail(ErrorKind::range, "unknown site");
}

/// Forward pass with the plan's substitutions applied in flight.
inline Trace apply_patched_forward(const Checkpoint& ck, std::span<const TokenId> tokens, const PatchPlan& plan) {
  plan.validate(ck.config);
  detail::PlanHooks hooks(plan);
  return run_forward(ck, tokens, plan.empty() ? nullptr : &hooks);
}

/// Greedy decoding with the plan applied at every step. Replace/Blend sources stop at their own
/// length, so generated positions beyond the source are left unpatched.
inline Tokens generate_patched(const Checkpoint& ck, std::span<const TokenId> prompt, std::size_t max_new,
                               const PatchPlan& plan, std::optional<TokenId> end_token = std::nullopt) {
  plan.validate(ck.config);
  detail::PlanHooks hooks(plan);
  return generate_greedy(ck, prompt, max_new, end_token, plan.empty() ? nullptr : &hooks);
}

inline PatchPlan transplant_plan(const Trace& source, std::size_t layer, std::vector<std::size_t> heads, float lambda,
                                 BlendKind kind = BlendKind::convex, PositionRange positions = PositionRange::all()) {
  ActivationAddress a{layer, Site::attn_pattern, std::move(heads), 0, positions};
  Tensor src = capture(source, a);
  return PatchPlan{{Directive{std::move(a), Blend{lambda, std::move(src), kind}}}};
}

/// Blend the source run's attention pattern into the target run for `heads` at `layer`.
inline Trace transplant_attention(const Checkpoint& ck, std::span<const TokenId> target, const Trace& source,
                                  std::size_t layer, std::vector<std::size_t> heads, float lambda) {
  return apply_patched_forward(ck, target, transplant_plan(source, layer, std::move(heads), lambda));
}

struct NeuronRef {
  std::size_t layer = 0;
  std::size_t index = 0;

  friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
  friend auto operator<=>(const NeuronRef&, const NeuronRef&) = default;
};

inline PatchPlan ablation_plan(const std::vector<NeuronRef>& neurons, float alpha,
                               PositionRange positions = PositionRange::all()) {
  PatchPlan plan;
  for (const NeuronRef& n : neurons)
    plan.directives.push_back({ActivationAddress{n.layer, Site::mlp_neuron, {}, n.index, positions}, SetScalar{alpha}});
  return plan;
}

/// Clamp each listed neuron's activation (the input to the down-projection) to alpha.
inline Trace ablate_neurons(const Checkpoint& ck, std::span<const TokenId> tokens, const std::vector<NeuronRef>& neurons,
                            float alpha) {
  return apply_patched_forward(ck, tokens, ablation_plan(neurons, alpha));
}

/// The default ablation grid: 0.0 down to -5.0 in steps of 0.25 (21 points).
inline std::vector<float> default_alpha_grid() {
  std::vector<float> out;
  for (int i = 0; i <= 20; ++i) out.push_back(-0.25f * float(i));
  return out;
}

/// good - bad at one position each (default: each trace's final position).
inline std::vector<float> steering_vector(const Trace& good, const Trace& bad, const ActivationAddress& address,
                                          std::optional<std::size_t> good_pos = std::nullopt,
                                          std::optional<std::size_t> bad_pos = std::nullopt) {
  require(good.config == bad.config, ErrorKind::shape, "steering traces come from different model configs");
  const std::size_t gp = good_pos.value_or(good.seq_len() - 1), bp = bad_pos.value_or(bad.seq_len() - 1);
  require(gp < good.seq_len() && bp < bad.seq_len(), ErrorKind::range, "steering position outside a trace");
  require(address.site != Site::attn_pattern, ErrorKind::config, "steering is not defined on attention patterns");
  const Tensor g = capture(good, address), b = capture(bad, address);
  if (address.site == Site::mlp_neuron) return {g[gp] - b[bp]};
  std::vector<float> out(good.config.d_model);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = g.at(gp, j) - b.at(bp, j);
  return out;
}

/// Add alpha * vector at `address` from `from_position` onward.
inline PatchPlan steering_plan(const ActivationAddress& address, std::vector<float> vector, float alpha,
                               std::size_t from_position) {
  ActivationAddress a = address;
  a.positions = PositionRange::from(from_position);
  return PatchPlan{{Directive{a, AddScaled{alpha, std::move(vector)}}}};
}

/// Steering from the final prompt position onward.
inline Trace apply_steering(const Checkpoint& ck, std::span<const TokenId> tokens, const ActivationAddress& address,
                            std::vector<float> vector, float alpha) {
  return apply_patched_forward(ck, tokens, steering_plan(address, std::move(vector), alpha, tokens.size() - 1));
}

}  // namespace fdlab
