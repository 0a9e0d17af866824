#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fdlab/bugforge.hpp"
#include "fdlab/error.hpp"
#include "fdlab/intervention.hpp"
#include "fdlab/io.hpp"
#include "fdlab/lens.hpp"
#include "fdlab/model.hpp"
#include "fdlab/stats.hpp"

namespace fdlab {

/// Which way a transplant runs. Forward copies from the working (good) format into the
/// failing (bad) one and hopes to repair; reverse copies bad into good and hopes to induce.
enum class Direction { forward, reverse };

inline std::string_view to_string(Direction d) { return d == Direction::forward ? "forward" : "reverse"; }

struct Treatment {
  enum class Kind { none, transplant, ablate, steer };

  Kind kind = Kind::none;
  Direction direction = Direction::forward;
  // transplant
  std::size_t layer = 0;
  Site site = Site::attn_pattern;
  std::vector<std::size_t> heads;  // attn_pattern only; empty means every head
  float lambda = 1.0f;
  BlendKind blend = BlendKind::convex;
  // ablate / steer
  std::vector<NeuronRef> neurons;
  float alpha = 0.0f;

  static Treatment baseline(Direction d = Direction::forward) {
    Treatment t;
    t.direction = d;
    return t;
  }
  static Treatment transplant(std::size_t layer, std::vector<std::size_t> heads, float lambda = 1.0f,
                              Direction d = Direction::forward, Site site = Site::attn_pattern) {
    Treatment t;
    t.kind = Kind::transplant;
    t.direction = d;
    t.layer = layer;
    t.site = site;
    t.heads = std::move(heads);
    t.lambda = lambda;
    return t;
  }
  static Treatment ablate(std::vector<NeuronRef> neurons, float alpha) {
    Treatment t;
    t.kind = Kind::ablate;
    t.neurons = std::move(neurons);
    t.alpha = alpha;
    return t;
  }
  static Treatment steer(std::vector<NeuronRef> neurons, float alpha) {
    Treatment t = ablate(std::move(neurons), alpha);
    t.kind = Kind::steer;
    return t;
  }

  /// Outcome the treatment is trying to produce in the target run.
  Outcome goal() const { return direction == Direction::forward ? Outcome::correct : Outcome::bug; }
};

/// Anything a protocol can be run against: the trained toy model or a mock with a planted
/// response surface. run() must be pure and safe to call concurrently.
class Subject {
 public:
  virtual ~Subject() = default;
  virtual std::string digest() const = 0;
  virtual std::string describe() const = 0;
  virtual std::size_t n_layers() const = 0;
  virtual std::size_t n_heads() const = 0;
  virtual std::size_t trial_count() const = 0;
  virtual Outcome run(const Treatment& t, std::size_t trial) const = 0;
};

/// A mock whose outcome is an arbitrary function of (treatment, trial).
class MockSubject final : public Subject {
 public:
  using Response = std::function<Outcome(const Treatment&, std::size_t)>;

  MockSubject(std::string name, std::size_t n_layers, std::size_t n_heads, std::size_t trials, Response response)
      : name_(std::move(name)), n_layers_(n_layers), n_heads_(n_heads), trials_(trials), response_(std::move(response)) {}

  std::string digest() const override { return digest_text("mock:" + name_); }
  std::string describe() const override { return "mock subject '" + name_ + "'"; }
  std::size_t n_layers() const override { return n_layers_; }
  std::size_t n_heads() const override { return n_heads_; }
  std::size_t trial_count() const override { return trials_; }
  Outcome run(const Treatment& t, std::size_t trial) const override { return response_(t, trial); }

 private:
  std::string name_;
  std::size_t n_layers_, n_heads_, trials_;
  Response response_;
};

/// Repairs iff at least `threshold` heads from `good_heads` are transplanted at `layer`.
inline MockSubject mock_head_threshold(std::size_t n_heads, std::set<std::size_t> good_heads, std::size_t threshold,
                                       std::size_t layer = 0, std::size_t trials = 10) {
  return MockSubject("head-threshold-" + std::to_string(threshold), layer + 1, n_heads, trials,
                     [good_heads, threshold, layer](const Treatment& t, std::size_t) {
                       if (t.kind != Treatment::Kind::transplant || t.layer != layer) return Outcome::bug;
                       std::size_t hits = 0;
                       for (std::size_t h : t.heads) hits += good_heads.count(h);
                       return hits >= threshold ? Outcome::correct : Outcome::bug;
                     });
}

/// Repairs iff the blend weight reaches `threshold`.
inline MockSubject mock_fraction_threshold(double threshold, std::size_t n_heads = 8, std::size_t trials = 10) {
  return MockSubject("fraction-threshold", 1, n_heads, trials, [threshold](const Treatment& t, std::size_t) {
    if (t.kind != Treatment::Kind::transplant) return Outcome::bug;
    return double(t.lambda) >= threshold - 1e-6 ? Outcome::correct : Outcome::bug;
  });
}

struct GridPoint {
  std::string label;
  double x = 0.0;
  Json params;
  Outcome goal = Outcome::correct;
  std::size_t correct = 0, bug = 0, incoherent = 0, trials = 0;
  std::vector<Outcome> outcomes;  // per trial, in trial order (kept in memory only)

  std::size_t successes() const {
    return goal == Outcome::correct ? correct : goal == Outcome::bug ? bug : incoherent;
  }
  double rate() const { return trials ? double(successes()) / double(trials) : 0.0; }
  BinomialSummary summary(double level = 0.95) const { return exact_binomial_ci(successes(), trials, level); }

  void add(Outcome o) {
    outcomes.push_back(o);
    ++trials;
    if (o == Outcome::correct) ++correct;
    if (o == Outcome::bug) ++bug;
    if (o == Outcome::incoherent) ++incoherent;
  }
};

inline GridPoint make_point(std::string label, double x, Json params, Outcome goal = Outcome::correct) {
  GridPoint p;
  p.label = std::move(label);
  p.x = x;
  p.params = std::move(params);
  p.goal = goal;
  return p;
}

struct SubsetDetail {
  std::size_t k;
  std::vector<std::size_t> heads;
  std::size_t successes;
  std::size_t trials;
};

struct SweepReport {
  std::string protocol;
  std::string subject;  // subject digest
  Json spec;            // grid and seeds
  Json metadata;        // recorded assumptions
  std::vector<GridPoint> points;
  std::vector<SubsetDetail> subsets;
  std::optional<double> wall_clock_s;
};

/// Worker count from FDLAB_THREADS (default 1).
inline std::size_t thread_count() {
  if (const char* env = std::getenv("FDLAB_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return std::size_t(n);
  }
  return 1;
}

/// Evaluate fn(i) for i < n on a small pool; results land by index, so order never depends on scheduling.
template <class R, class Fn>
std::vector<R> parallel_map(std::size_t n, Fn&& fn) {
  std::vector<R> out(n);
  const std::size_t workers = std::min(thread_count(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) out[i] = fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline GridPoint evaluate_point(const Subject& s, const Treatment& t, std::string label, double x, Json params) {
  GridPoint p = make_point(std::move(label), x, std::move(params), t.goal());
  const auto outcomes = parallel_map<Outcome>(s.trial_count(), [&](std::size_t i) { return s.run(t, i); });
  for (Outcome o : outcomes) p.add(o);
  return p;
}

/// A float grid value as the short decimal it was written as (0.1f -> 0.1, not 0.10000000149).
inline double tidy(float v) { return std::round(double(v) * 1e6) / 1e6; }

inline std::vector<double> tidy(const std::vector<float>& v) {
  std::vector<double> out;
  for (float x : v) out.push_back(tidy(x));
  return out;
}

namespace detail {

inline SweepReport start_report(std::string protocol, const Subject& s, Json spec) {
  SweepReport r;
  r.protocol = std::move(protocol);
  r.subject = s.digest();
  r.spec = std::move(spec);
  r.spec["trials_per_point"] = s.trial_count();
  r.metadata["subject"] = s.describe();
  r.metadata["trial_variation"] = "trials enumerate distinct prompt instances; decoding is greedy";
  return r;
}

inline std::vector<std::size_t> all_heads(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

}  // namespace detail

inline SweepReport run_layer_sweep(const Subject& s, const std::vector<std::size_t>& layers, Site site,
                                   Direction direction = Direction::forward) {
  require(!layers.empty(), ErrorKind::config, "layer sweep needs at least one layer");
  for (std::size_t l : layers) require(l < s.n_layers(), ErrorKind::range, "sweep layer beyond subject depth");
  SweepReport r = detail::start_report("layer_sweep", s,
                                       {{"layers", layers}, {"site", to_string(site)}, {"direction", to_string(direction)}});
  r.metadata["heads"] = "all heads of the layer, lambda = 1";
  for (std::size_t l : layers) {
    auto t = Treatment::transplant(l, detail::all_heads(s.n_heads()), 1.0f, direction, site);
    r.points.push_back(evaluate_point(s, t, "layer=" + std::to_string(l), double(l), {{"layer", l}}));
  }
  return r;
}

enum class Parity { even, odd, mixed };

inline std::string_view to_string(Parity p) {
  switch (p) {
    case Parity::even: return "even";
    case Parity::odd: return "odd";
    case Parity::mixed: return "mixed";
  }
  return "?";
}

inline Parity parse_parity(std::string_view s) {
  for (Parity p : {Parity::even, Parity::odd, Parity::mixed})
    if (to_string(p) == s) return p;
  fail(ErrorKind::config, "unknown parity '" + std::string(s) + "'");
}

inline std::vector<std::size_t> heads_of_parity(std::size_t n_heads, Parity p) {
  std::vector<std::size_t> out;
  for (std::size_t h = 0; h < n_heads; ++h)
    if (p == Parity::mixed || (h % 2 == 0) == (p == Parity::even)) out.push_back(h);
  return out;
}

inline std::uint64_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t c = 1;
  for (std::size_t i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return c;
}

inline constexpr std::uint64_t kDefaultSubsetCap = 12870;  // C(16, 8)

/// All k-subsets of `pool` in lexicographic order when there are at most `cap`, otherwise
/// `cap` distinct subsets drawn uniformly with a seeded generator (returned sorted).
inline std::vector<std::vector<std::size_t>> head_subsets(const std::vector<std::size_t>& pool, std::size_t k,
                                                          std::uint64_t cap, std::uint64_t seed) {
  require(k >= 1 && k <= pool.size(), ErrorKind::range,
          "subset size " + std::to_string(k) + " outside 1.." + std::to_string(pool.size()));
  std::vector<std::vector<std::size_t>> out;
  if (binomial(pool.size(), k) <= cap) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    while (true) {
      std::vector<std::size_t> subset;
      for (std::size_t i : idx) subset.push_back(pool[i]);
      out.push_back(std::move(subset));
      std::size_t i = k;
      while (i > 0 && idx[i - 1] == pool.size() - k + i - 1) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
    return out;
  }
  std::mt19937_64 rng(seed ^ (std::uint64_t(k) * 0x9e3779b97f4a7c15ULL));
  std::set<std::vector<std::size_t>> chosen;
  std::vector<std::size_t> shuffled = pool;
  while (chosen.size() < cap) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<std::size_t> subset(shuffled.begin(), shuffled.begin() + std::ptrdiff_t(k));
    std::sort(subset.begin(), subset.end());
    chosen.insert(std::move(subset));
  }
  return {chosen.begin(), chosen.end()};
}

inline SweepReport run_head_subset_sweep(const Subject& s, std::size_t layer, Parity parity,
                                         std::vector<std::size_t> ks = {},
                                         std::uint64_t max_subsets = kDefaultSubsetCap, std::uint64_t seed = 42) {
  require(layer < s.n_layers(), ErrorKind::range, "sweep layer beyond subject depth");
  const auto pool = heads_of_parity(s.n_heads(), parity);
  if (ks.empty())
    for (std::size_t k = 1; k <= pool.size(); ++k) ks.push_back(k);
  for (std::size_t k : ks)
    require(k >= 1 && k <= pool.size(), ErrorKind::range,
            "k=" + std::to_string(k) + " exceeds the " + std::to_string(pool.size()) + " " +
                std::string(to_string(parity)) + " heads");
  SweepReport r = detail::start_report("head_subset_sweep", s,
                                       {{"layer", layer}, {"parity", to_string(parity)}, {"k", ks},
                                        {"max_subsets", max_subsets}, {"seed", seed}});
  r.metadata["unselected_heads"] = "left untouched (lambda = 1 on selected heads only)";
  for (std::size_t k : ks) {
    const auto subsets = head_subsets(pool, k, max_subsets, seed);
    GridPoint agg = make_point("k=" + std::to_string(k), double(k),
                               {{"k", k}, {"subsets", subsets.size()},
                                {"exhaustive", binomial(pool.size(), k) <= max_subsets}});
    for (const auto& subset : subsets) {
      const GridPoint p = evaluate_point(s, Treatment::transplant(layer, subset), "", double(k), {});
      agg.correct += p.correct;
      agg.bug += p.bug;
      agg.incoherent += p.incoherent;
      agg.trials += p.trials;
      agg.outcomes.insert(agg.outcomes.end(), p.outcomes.begin(), p.outcomes.end());
      r.subsets.push_back({k, subset, p.successes(), p.trials});
    }
    r.points.push_back(std::move(agg));
  }
  return r;
}

/// The default blend grid: 0.0 to 1.0 in steps of 0.1.
inline std::vector<float> default_lambda_grid() {
  std::vector<float> out;
  for (int i = 0; i <= 10; ++i) out.push_back(float(i) / 10.0f);
  return out;
}

inline SweepReport run_fraction_sweep(const Subject& s, std::size_t layer, std::vector<std::size_t> heads,
                                      const std::vector<float>& lambdas, BlendKind kind = BlendKind::convex) {
  require(!lambdas.empty(), ErrorKind::config, "fraction sweep needs at least one lambda");
  for (float l : lambdas) require(l >= 0.0f && l <= 1.0f, ErrorKind::range, "lambda outside [0,1]");
  if (heads.empty()) heads = detail::all_heads(s.n_heads());
  SweepReport r = detail::start_report(
      "fraction_sweep", s,
      {{"layer", layer}, {"heads", heads}, {"lambdas", tidy(lambdas)},
       {"blend", kind == BlendKind::convex ? "convex" : "position_fraction"}});
  for (float l : lambdas) {
    auto t = Treatment::transplant(layer, heads, l);
    t.blend = kind;
    char label[32];
    std::snprintf(label, sizeof label, "lambda=%.2f", double(l));
    r.points.push_back(evaluate_point(s, t, label, tidy(l), {{"lambda", tidy(l)}}));
  }
  return r;
}

inline Json neurons_json(const std::vector<NeuronRef>& ns) {
  Json out = Json::array();
  for (const auto& n : ns) out.push_back({n.layer, n.index});
  return out;
}

inline SweepReport run_alpha_sweep(const Subject& s, const std::vector<NeuronRef>& neurons,
                                   const std::vector<float>& alphas) {
  require(!alphas.empty(), ErrorKind::config, "alpha sweep needs at least one alpha");
  for (float a : alphas) require(std::isfinite(a), ErrorKind::range, "alpha must be finite");
  SweepReport r = detail::start_report("alpha_sweep", s, {{"neurons", neurons_json(neurons)}, {"alphas", tidy(alphas)}});
  r.metadata["rates"] = "bug and incoherent counts are reported per alpha; success = correct answer";
  for (float a : alphas) {
    const Treatment t = neurons.empty() ? Treatment::baseline() : Treatment::ablate(neurons, a);
    char label[32];
    std::snprintf(label, sizeof label, "alpha=%.2f", double(a));
    r.points.push_back(evaluate_point(s, t, label, tidy(a), {{"alpha", tidy(a)}}));
  }
  return r;
}

/// `count` distinct MLP neurons drawn uniformly from layers [layer_begin, layer_end).
inline std::vector<NeuronRef> random_neurons(std::size_t layer_begin, std::size_t layer_end, std::size_t d_mlp,
                                             std::size_t count, std::uint64_t seed) {
  require(layer_begin < layer_end && d_mlp > 0, ErrorKind::range, "empty neuron range");
  const std::size_t total = (layer_end - layer_begin) * d_mlp;
  require(count <= total, ErrorKind::range, "more random neurons requested than exist in the range");
  std::mt19937_64 rng(seed);
  std::set<std::size_t> chosen;
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  while (chosen.size() < count) chosen.insert(pick(rng));
  std::vector<NeuronRef> out;
  for (std::size_t flat : chosen) out.push_back({layer_begin + flat / d_mlp, flat % d_mlp});
  return out;
}

/// The alpha sweep on randomly chosen neurons: the control a causal neuron set is compared with.
inline SweepReport run_random_control(const Subject& s, std::size_t layer_begin, std::size_t layer_end,
                                      std::size_t d_mlp, std::size_t count, const std::vector<float>& alphas,
                                      std::uint64_t seed) {
  SweepReport r = run_alpha_sweep(s, random_neurons(layer_begin, layer_end, d_mlp, count, seed), alphas);
  r.protocol = "random_control";
  r.spec["seed"] = seed;
  r.spec["layer_range"] = {layer_begin, layer_end};
  return r;
}

struct BidirectionalReport {
  GridPoint forward;           // good -> bad, success = repaired (correct)
  GridPoint reverse;           // bad -> good, success = induced (bug)
  GridPoint forward_baseline;  // bad format untouched
  GridPoint reverse_baseline;  // good format untouched
  SweepReport sweep;           // the four points above as one report
};

inline BidirectionalReport run_bidirectional(const Subject& s, std::size_t layer, std::vector<std::size_t> heads) {
  require(layer < s.n_layers(), ErrorKind::range, "layer beyond subject depth");
  if (heads.empty()) heads = detail::all_heads(s.n_heads());
  BidirectionalReport out;
  out.forward_baseline = evaluate_point(s, Treatment::baseline(Direction::forward), "baseline_bad_format", 0, {});
  out.reverse_baseline = evaluate_point(s, Treatment::baseline(Direction::reverse), "baseline_good_format", 1, {});
  out.forward = evaluate_point(s, Treatment::transplant(layer, heads, 1.0f, Direction::forward), "forward_repair", 2,
                               {{"direction", "forward"}});
  out.reverse = evaluate_point(s, Treatment::transplant(layer, heads, 1.0f, Direction::reverse), "reverse_induce", 3,
                               {{"direction", "reverse"}});
  out.sweep = detail::start_report("bidirectional", s, {{"layer", layer}, {"heads", heads}});
  out.sweep.points = {out.forward_baseline, out.reverse_baseline, out.forward, out.reverse};
  return out;
}

// ---------------------------------------------------------------------------
// Threshold readout
// ---------------------------------------------------------------------------

struct StepDetection {
  std::optional<double> location;  // first x whose rate reaches the level
  bool clean = false;              // every point before is below, every point from it on is at/above
};

/// Locate the step in a rate curve (points taken in ascending x).
inline StepDetection detect_step(const SweepReport& r, double level = 0.5) {
  std::vector<const GridPoint*> pts;
  for (const auto& p : r.points) pts.push_back(&p);
  std::stable_sort(pts.begin(), pts.end(), [](const GridPoint* a, const GridPoint* b) { return a->x < b->x; });
  StepDetection out;
  std::size_t first = pts.size();
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (pts[i]->rate() >= level) {
      first = i;
      break;
    }
  if (first == pts.size()) return out;
  out.location = pts[first]->x;
  out.clean = true;
  for (std::size_t i = first; i < pts.size(); ++i) out.clean = out.clean && pts[i]->rate() >= level;
  return out;
}

/// Maximal runs of consecutive points (ascending x) with rate strictly above `level`.
inline std::vector<std::pair<double, double>> bands_above(const SweepReport& r, double level = 0.5) {
  std::vector<const GridPoint*> pts;
  for (const auto& p : r.points) pts.push_back(&p);
  std::stable_sort(pts.begin(), pts.end(), [](const GridPoint* a, const GridPoint* b) { return a->x < b->x; });
  std::vector<std::pair<double, double>> out;
  bool open = false;
  for (const GridPoint* p : pts) {
    if (p->rate() > level) {
      if (!open) out.emplace_back(p->x, p->x);
      out.back().second = p->x;
      open = true;
    } else {
      open = false;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// The trained toy model as a subject
// ---------------------------------------------------------------------------

/// Each trial is one operand pair rendered in the good and bad formats. Source runs include
/// the source's own greedy answer, so transplanted patterns also cover generated positions.
class ModelSubject final : public Subject {
 public:
  ModelSubject(const Checkpoint& ck, std::vector<OperandPair> pairs, PromptFormat good = PromptFormat::simple,
               PromptFormat bad = PromptFormat::qa)
      : ck_(ck), pairs_(std::move(pairs)), good_(good), bad_(bad), digest_(checkpoint_digest(ck)) {
    require(good != bad, ErrorKind::config, "good and bad formats must differ");
    for (const auto& p : pairs_) {
      validate_pair(p);
      Instance in;
      in.good_prompt = tokenize(vocab_, render_prompt(good, p));
      in.bad_prompt = tokenize(vocab_, render_prompt(bad, p));
      in.good_run = full_run(in.good_prompt);
      in.bad_run = full_run(in.bad_prompt);
      instances_.push_back(std::move(in));
    }
  }

  std::string digest() const override { return digest_; }
  std::string describe() const override {
    return "toy model " + digest_ + ", good=" + std::string(to_string(good_)) + ", bad=" + std::string(to_string(bad_));
  }
  std::size_t n_layers() const override { return ck_.config.n_layers; }
  std::size_t n_heads() const override { return ck_.config.n_heads; }
  std::size_t trial_count() const override { return instances_.size(); }

  const Checkpoint& checkpoint() const { return ck_; }
  const SyntheticVocab& vocab() const { return vocab_; }
  const OperandPair& pair(std::size_t trial) const { return pairs_.at(trial); }
  PromptFormat good_format() const { return good_; }
  PromptFormat bad_format() const { return bad_; }
  const Tokens& prompt(std::size_t trial, Direction target) const {
    const Instance& in = instances_.at(trial);
    return target == Direction::forward ? in.bad_prompt : in.good_prompt;
  }
  /// Trace of prompt + greedy answer in the good (forward source) or bad format.
  const Trace& source_run(std::size_t trial, bool good) const {
    const Instance& in = instances_.at(trial);
    return good ? in.good_run : in.bad_run;
  }

  /// Answer text under `t` (the target prompt is the bad format for forward treatments).
  std::string answer(const Treatment& t, std::size_t trial) const {
    const Instance& in = instances_.at(trial);
    const bool fwd = t.direction == Direction::forward;
    const Tokens& target = fwd ? in.bad_prompt : in.good_prompt;
    const Trace& source = fwd ? in.good_run : in.bad_run;
    const std::size_t room = std::min(kMaxAnswerTokens, ck_.config.max_seq - target.size());
    PatchPlan plan;
    switch (t.kind) {
      case Treatment::Kind::none: break;
      case Treatment::Kind::transplant: {
        std::vector<std::size_t> heads = t.heads;
        if (heads.empty()) heads = detail::all_heads(ck_.config.n_heads);
        const auto from_final = PositionRange::from(target.size() - 1);
        if (t.site == Site::attn_pattern) {
          plan = transplant_plan(source, t.layer, heads, t.lambda, t.blend, from_final);
        } else {
          ActivationAddress a{t.layer, t.site, {}, 0, from_final};
          plan.directives.push_back({a, Blend{t.lambda, capture(source, a), t.blend}});
        }
        break;
      }
      case Treatment::Kind::ablate: plan = ablation_plan(t.neurons, t.alpha); break;
      case Treatment::Kind::steer: {
        const std::size_t gp = in.good_prompt.size() - 1, bp = in.bad_prompt.size() - 1;
        for (const NeuronRef& n : t.neurons) {
          ActivationAddress a{n.layer, Site::mlp_neuron, {}, n.index, PositionRange::all()};
          auto v = steering_vector(in.good_run, in.bad_run, a, gp, bp);
          auto more = steering_plan(a, std::move(v), t.alpha, target.size() - 1);
          plan.directives.push_back(std::move(more.directives.front()));
        }
        break;
      }
    }
    const Tokens full = generate_patched(ck_, target, room, plan, vocab_.end_token());
    return answer_text(vocab_, std::span<const TokenId>(full).subspan(target.size()));
  }

  Outcome run(const Treatment& t, std::size_t trial) const override {
    return classify_answer(pairs_.at(trial), answer(t, trial));
  }

  /// Unpatched outcome of one pair in any format.
  Outcome baseline(PromptFormat f, std::size_t trial) const {
    return classify_answer(pairs_.at(trial), answer_prompt(ck_, vocab_, tokenize(vocab_, render_prompt(f, pairs_.at(trial)))));
  }

 private:
  struct Instance {
    Tokens good_prompt, bad_prompt;
    Trace good_run, bad_run;
  };

  Trace full_run(const Tokens& prompt) const {
    const std::size_t room = std::min(kMaxAnswerTokens, ck_.config.max_seq - prompt.size());
    const Tokens full = generate_greedy(ck_, prompt, room, vocab_.end_token());
    return forward_trace(ck_, full);
  }

  const Checkpoint& ck_;
  SyntheticVocab vocab_;
  std::vector<OperandPair> pairs_;
  PromptFormat good_, bad_;
  std::string digest_;
  std::vector<Instance> instances_;
};

struct PairResult {
  OperandPair pair;
  std::map<PromptFormat, Outcome> baseline;
  bool bug_present = false;                 // bad format gives the bug answer
  std::optional<Outcome> intervention;      // forward transplant outcome when the bug is present
};

struct PairGeneralization {
  std::vector<PairResult> pairs;
  SweepReport sweep;

  std::size_t manifesting() const {
    return std::size_t(std::count_if(pairs.begin(), pairs.end(), [](const PairResult& p) { return p.bug_present; }));
  }
  std::size_t repaired() const {
    return std::size_t(std::count_if(pairs.begin(), pairs.end(), [](const PairResult& p) {
      return p.intervention && *p.intervention == Outcome::correct;
    }));
  }
};

/// Per pair: outcome in every format, then the forward transplant where the bug shows up.
inline PairGeneralization run_pair_generalization(const ModelSubject& s, std::size_t layer,
                                                  std::vector<std::size_t> heads) {
  if (heads.empty()) heads = detail::all_heads(s.n_heads());
  PairGeneralization out;
  out.sweep = detail::start_report("pair_generalization", s, {{"layer", layer}, {"heads", heads}});
  const Treatment t = Treatment::transplant(layer, heads);
  for (std::size_t i = 0; i < s.trial_count(); ++i) {
    PairResult pr{s.pair(i), {}, false, std::nullopt};
    for (PromptFormat f : kAllFormats) pr.baseline[f] = s.baseline(f, i);
    pr.bug_present = pr.baseline[s.bad_format()] == Outcome::bug;
    GridPoint gp = make_point(s.pair(i).first + " vs " + s.pair(i).second, double(i),
                              {{"pair", {s.pair(i).first, s.pair(i).second}}, {"bug_present", pr.bug_present}});
    for (PromptFormat f : kAllFormats) gp.params["baseline_" + std::string(to_string(f))] = to_string(pr.baseline[f]);
    if (pr.bug_present) {
      pr.intervention = s.run(t, i);
      gp.add(*pr.intervention);
      gp.params["intervention"] = to_string(*pr.intervention);
    } else {
      gp.params["intervention"] = "n/a";
    }
    out.sweep.points.push_back(std::move(gp));
    out.pairs.push_back(std::move(pr));
  }
  return out;
}

}  // namespace fdlab
