#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fdlab/bugforge.hpp"
#include "fdlab/error.hpp"
#include "fdlab/io.hpp"
#include "fdlab/lens.hpp"
#include "fdlab/report.hpp"
#include "fdlab/sae.hpp"
#include "fdlab/stats.hpp"
#include "fdlab/sweep.hpp"
#include "fdlab/trainer.hpp"

namespace fdlab {

// ---------------------------------------------------------------------------
// Fixture helpers shared by the pipeline, the CLI and the acceptance suite
// ---------------------------------------------------------------------------

/// Five comparison pairs in the spirit of the classic "9.8 vs 9.11" family. All of them put the
/// larger value on the shorter fraction, so the fraction-length rule gets every one wrong.
inline std::vector<OperandPair> fixture_pairs() {
  return {{"9.8", "9.11"}, {"8.7", "8.12"}, {"7.85", "7.9"}, {"3.4", "3.25"}, {"1.9", "1.11"}};
}

/// The first `n` pairs of a seeded shuffle (all of them when n >= size), in shuffled order.
inline std::vector<OperandPair> sample_pairs(std::vector<OperandPair> pairs, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  if (pairs.size() > n) pairs.resize(n);
  return pairs;
}

/// Lens at the first fractional digit of the answer: the prompt is teacher-forced with the
/// shared integer part and the point, and the designated token is the correct operand's first
/// fractional digit.
struct AnswerLens {
  LensCurve curve;
  Trace trace;
};

inline AnswerLens answer_lens(const Checkpoint& ck, const SyntheticVocab& vocab, PromptFormat f,
                              const OperandPair& pair) {
  const Decimal right = Decimal::parse(label_answer(LabelRule::correct_by_value, pair));
  Tokens tokens = tokenize(vocab, render_prompt(f, pair) + right.integer + ".");
  const TokenId target = tokenize(vocab, right.fraction.substr(0, 1)).front();
  Trace tr = forward_trace(ck, tokens);
  LensCurve curve = lens_curve(ck, tr, target);
  return {std::move(curve), std::move(tr)};
}

// ---------------------------------------------------------------------------
// reproduce-all
// ---------------------------------------------------------------------------

struct PipelineConfig {
  std::uint64_t seed = 42;
  std::size_t train_steps = 1000;
  std::size_t batch_size = 32;
  float learning_rate = 1e-3f;
  std::size_t planted_layer = 2;
  float interchange_fraction = 0.5f;
  std::size_t eval_pairs = 200;
  std::size_t layer_trials = 100;
  std::size_t head_trials = 50;
  std::size_t fraction_trials = 50;
  std::size_t bidirectional_trials = 200;
  std::size_t sae_pairs = 600;
  std::size_t sae_expansion = 8;
  std::size_t sae_k = 8;
  std::size_t sae_steps = 2000;
  std::size_t top_n = 20;

  void validate() const {
    require(train_steps > 0 && batch_size > 0, ErrorKind::config, "train_steps and batch_size must be positive");
    require(planted_layer < ModelConfig{}.n_layers, ErrorKind::config, "planted_layer beyond model depth");
    require(eval_pairs > 0 && layer_trials > 0 && head_trials > 0 && fraction_trials > 0 && bidirectional_trials > 0,
            ErrorKind::config, "trial counts must be positive");
    require(sae_pairs > 0 && sae_steps > 0, ErrorKind::config, "SAE pairs and steps must be positive");
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.steps = train_steps;
    tc.batch_size = batch_size;
    tc.learning_rate = learning_rate;
    tc.seed = seed;
    tc.interchange->layer = planted_layer;
    tc.interchange->fraction = interchange_fraction;
    return tc;
  }
};

inline Json to_json(const PipelineConfig& c) {
  return {{"seed", c.seed},
          {"train_steps", c.train_steps},
          {"batch_size", c.batch_size},
          {"learning_rate", tidy(c.learning_rate)},
          {"planted_layer", c.planted_layer},
          {"interchange_fraction", tidy(c.interchange_fraction)},
          {"eval_pairs", c.eval_pairs},
          {"layer_trials", c.layer_trials},
          {"head_trials", c.head_trials},
          {"fraction_trials", c.fraction_trials},
          {"bidirectional_trials", c.bidirectional_trials},
          {"sae_pairs", c.sae_pairs},
          {"sae_expansion", c.sae_expansion},
          {"sae_k", c.sae_k},
          {"sae_steps", c.sae_steps},
          {"top_n", c.top_n}};
}

/// Overlay `j` on the defaults. Unknown keys are rejected so typos do not silently fall back.
inline PipelineConfig pipeline_config_from_json(const Json& j, PipelineConfig c = {}) {
  require(j.is_object(), ErrorKind::config, "pipeline config must be a JSON object");
  const Json known = to_json(c);
  for (const auto& [key, value] : j.items())
    require(known.contains(key), ErrorKind::config, "unknown pipeline config key '" + key + "'");
  try {
    c.seed = j.value("seed", c.seed);
    c.train_steps = j.value("train_steps", c.train_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.planted_layer = j.value("planted_layer", c.planted_layer);
    c.interchange_fraction = j.value("interchange_fraction", c.interchange_fraction);
    c.eval_pairs = j.value("eval_pairs", c.eval_pairs);
    c.layer_trials = j.value("layer_trials", c.layer_trials);
    c.head_trials = j.value("head_trials", c.head_trials);
    c.fraction_trials = j.value("fraction_trials", c.fraction_trials);
    c.bidirectional_trials = j.value("bidirectional_trials", c.bidirectional_trials);
    c.sae_pairs = j.value("sae_pairs", c.sae_pairs);
    c.sae_expansion = j.value("sae_expansion", c.sae_expansion);
    c.sae_k = j.value("sae_k", c.sae_k);
    c.sae_steps = j.value("sae_steps", c.sae_steps);
    c.top_n = j.value("top_n", c.top_n);
  } catch (const Json::exception& e) {
    fail(ErrorKind::config, std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Stage progress for the caller (stderr in the CLI). Timing lives here, never in the output tree.
using StageLog = std::function<void(const std::string& stage, double seconds)>;

/// resid_post rows at `layer` for every prompt position of `pairs` in every format.
inline ActivationDataset collect_prompt_activations(const Checkpoint& ck, const SyntheticVocab& vocab,
                                                    const std::vector<OperandPair>& pairs, std::size_t layer) {
  const std::size_t d = ck.config.d_model;
  std::vector<Trace> traces = parallel_map<Trace>(pairs.size() * 3, [&](std::size_t i) {
    return run_forward(ck, tokenize(vocab, render_prompt(kAllFormats[i % 3], pairs[i / 3])), nullptr, false);
  });
  std::size_t rows = 0;
  for (const auto& t : traces) rows += t.seq_len();
  Tensor out({rows, d});
  std::size_t r = 0;
  for (const auto& t : traces)
    for (std::size_t p = 0; p < t.seq_len(); ++p, ++r)
      for (std::size_t j = 0; j < d; ++j) out.at(r, j) = t.layers[layer].resid_post.at(p, j);
  return {std::move(out), {{"layer", layer}, {"site", "resid_post"}, {"positions", "all prompt positions"},
                           {"formats", {"simple", "qa", "chat"}}, {"pairs", pairs.size()}}};
}

/// Final-prompt-position resid_post rows at `layer`, one per pair, for one format.
inline Tensor final_position_activations(const Checkpoint& ck, const SyntheticVocab& vocab,
                                         const std::vector<OperandPair>& pairs, PromptFormat f, std::size_t layer) {
  const std::size_t d = ck.config.d_model;
  Tensor out({pairs.size(), d});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Trace t = run_forward(ck, tokenize(vocab, render_prompt(f, pairs[i])), nullptr, false);
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = t.layers[layer].resid_post.at(t.seq_len() - 1, j);
  }
  return out;
}

struct PipelineResult {
  Json summary;
  std::vector<std::filesystem::path> files;
};

namespace detail {

inline void write_marker(const std::filesystem::path& dir, const char* name, const std::string& text) {
  write_file(dir / name, text);
}

}  // namespace detail

/// The full workflow into an empty directory. While it runs, `INCOMPLETE` names the current
/// stage; on failure `FAILED` names the stage and error and `INCOMPLETE` stays behind.
inline PipelineResult reproduce_all(const std::filesystem::path& out_dir, const PipelineConfig& cfg,
                                    const StageLog& log = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  if (fs::exists(out_dir))
    require(fs::is_directory(out_dir) && fs::is_empty(out_dir), ErrorKind::config,
            "output directory " + out_dir.string() + " is not empty");
  fs::create_directories(out_dir);

  PipelineResult result;
  const Json config = to_json(cfg);
  std::string stage = "setup";
  auto begin_stage = [&](std::string name) {
    stage = std::move(name);
    detail::write_marker(out_dir, "INCOMPLETE", "stage=" + stage + "\n");
  };
  auto clock = std::chrono::steady_clock::now();
  auto end_stage = [&] {
    const auto now = std::chrono::steady_clock::now();
    if (log) log(stage, std::chrono::duration<double>(now - clock).count());
    clock = now;
  };
  auto record = [&](std::vector<fs::path> paths) {
    for (auto& p : paths) result.files.push_back(fs::relative(p, out_dir));
  };
  auto write = [&](const fs::path& rel, const std::string& bytes) {
    write_file(out_dir / rel, bytes);
    result.files.push_back(rel);
  };

  try {
    const SyntheticVocab vocab;
    const TaskSpec spec = default_task_spec();
    const PairSplit split = split_pairs(spec);
    const std::size_t L = cfg.planted_layer;
    const auto even = heads_of_parity(ModelConfig{}.n_heads, Parity::even);

    begin_stage("train");
    write("config.json", dump_json(config));
    TrainResult trained = train_toy(ModelConfig{}, make_dataset(spec, vocab, split.train), cfg.train_config());
    trained.checkpoint.provenance.note = stamp_line(make_stamp(config, "", cfg.seed));
    const Checkpoint& ck = trained.checkpoint;
    write("model.ckpt", encode_checkpoint(ck));
    const Stamp stamp = make_stamp(config, checkpoint_digest(ck), cfg.seed);
    {
      std::vector<std::vector<std::string>> rows;
      for (const auto& e : trained.log)
        rows.push_back({std::to_string(e.step), fixed(e.loss, 8), fixed(e.learning_rate, 8)});
      write("train_log.csv", csv_table(stamp, "train_log", {"step", "loss", "learning_rate"}, rows));
    }
    end_stage();

    begin_stage("evaluate");
    const auto held_out = disagreeing_pairs(split.eval);
    const auto eval_set = sample_pairs(held_out, cfg.eval_pairs, cfg.seed);
    const auto rates = evaluate_formats(ck, vocab, eval_set, {kAllFormats[0], kAllFormats[1], kAllFormats[2]});
    Json eval_json = Json::array();
    std::vector<std::vector<std::string>> eval_rows;
    for (const auto& r : rates) {
      const auto ci = exact_binomial_ci(r.errors, r.trials);
      eval_json.push_back({{"format", to_string(r.format)}, {"errors", r.errors}, {"bugs", r.bugs},
                           {"incoherent", r.incoherent}, {"trials", r.trials}, {"error_rate", r.rate()},
                           {"ci", {{"lower", ci.lower}, {"upper", ci.upper}, {"level", ci.level}}}});
      eval_rows.push_back({std::string(to_string(r.format)), std::to_string(r.errors), std::to_string(r.bugs),
                           std::to_string(r.incoherent), std::to_string(r.trials), fixed(r.rate()), fixed(ci.lower),
                           fixed(ci.upper)});
    }
    write("eval_formats.json",
          dump_json(stamped_document("eval_formats", stamp, config,
                                     {{"pairs", "held-out pairs on which the label rules disagree"},
                                      {"rates", eval_json}})));
    write("eval_formats.csv", csv_table(stamp, "eval_formats",
                                        {"format", "errors", "bugs", "incoherent", "trials", "error_rate", "ci_lower",
                                         "ci_upper"},
                                        eval_rows));
    end_stage();

    begin_stage("layer_sweep");
    std::vector<std::size_t> layers(ck.config.n_layers);
    std::iota(layers.begin(), layers.end(), std::size_t{0});
    const ModelSubject layer_subject(ck, sample_pairs(held_out, cfg.layer_trials, cfg.seed + 1));
    const SweepReport layer_report = run_layer_sweep(layer_subject, layers, Site::attn_pattern);
    record(emit_report(layer_report, stamp, out_dir / "layer_sweep", {true, true, true}, "layer", config));
    end_stage();

    begin_stage("head_sweep");
    const ModelSubject head_subject(ck, sample_pairs(held_out, cfg.head_trials, cfg.seed + 2));
    std::map<Parity, SweepReport> head_reports;
    for (Parity p : {Parity::even, Parity::odd}) {
      head_reports[p] = run_head_subset_sweep(head_subject, L, p, {}, kDefaultSubsetCap, cfg.seed);
      record(emit_report(head_reports[p], stamp, out_dir / ("head_sweep_" + std::string(to_string(p))),
                         {true, true, true}, "heads selected (k)", config));
    }
    end_stage();

    begin_stage("fraction_sweep");
    const ModelSubject fraction_subject(ck, sample_pairs(held_out, cfg.fraction_trials, cfg.seed + 3));
    const SweepReport fraction_report = run_fraction_sweep(fraction_subject, L, even, default_lambda_grid());
    record(emit_report(fraction_report, stamp, out_dir / "fraction_sweep", {true, true, true}, "lambda", config));
    end_stage();

    begin_stage("bidirectional");
    const ModelSubject bi_subject(ck, sample_pairs(held_out, cfg.bidirectional_trials, cfg.seed + 4));
    const BidirectionalReport bi = run_bidirectional(bi_subject, L, even);
    record(emit_report(bi.sweep, stamp, out_dir / "bidirectional", {true, true, false}, "", config));
    end_stage();

    begin_stage("generalization");
    const ModelSubject fixture_subject(ck, fixture_pairs());
    const PairGeneralization gen = run_pair_generalization(fixture_subject, L, even);
    record(emit_report(gen.sweep, stamp, out_dir / "generalization", {true, true, false}, "", config));
    end_stage();

    begin_stage("lens");
    Json lens_json = Json::array();
    std::vector<std::vector<std::string>> lens_rows;
    const OperandPair lens_pair = fixture_pairs().front();
    std::map<PromptFormat, AnswerLens> lenses;
    for (PromptFormat f : {PromptFormat::simple, PromptFormat::qa}) {
      lenses.emplace(f, answer_lens(ck, vocab, f, lens_pair));
      const LensCurve& c = lenses.at(f).curve;
      Json pts = Json::array();
      for (const auto& p : c.points) {
        pts.push_back({{"layer", p.layer}, {"target_prob", p.target_prob}, {"top_token", vocab.symbol(p.top_token)},
                       {"top_prob", p.top_prob}});
        lens_rows.push_back({std::string(to_string(f)), std::to_string(p.layer), fixed(p.target_prob),
                             vocab.symbol(p.top_token), fixed(p.top_prob)});
      }
      const auto first = c.first_top1_layer();
      lens_json.push_back({{"format", to_string(f)}, {"token", vocab.symbol(c.token)}, {"position", c.position},
                           {"first_top1_layer", first ? Json(*first) : Json(nullptr)}, {"points", pts}});
    }
    const auto kl = attribution_kl_by_layer(layer_attribution(ck, lenses.at(PromptFormat::simple).trace),
                                            layer_attribution(ck, lenses.at(PromptFormat::qa).trace),
                                            ck.config.n_layers);
    const auto peak = std::max_element(kl.begin(), kl.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    Json kl_json = Json::array();
    for (const auto& [l, v] : kl) kl_json.push_back({{"layer", l}, {"kl", v}});
    write("lens.json", dump_json(stamped_document("lens", stamp, config,
                                                  {{"pair", {lens_pair.first, lens_pair.second}},
                                                   {"curves", lens_json},
                                                   {"attribution_kl", kl_json},
                                                   {"max_kl_layer", peak->first},
                                                   {"max_kl", peak->second}})));
    write("lens.csv", csv_table(stamp, "lens", {"format", "layer", "target_prob", "top_token", "top_prob"}, lens_rows));
    end_stage();

    begin_stage("sae");
    fs::create_directories(out_dir / "sae");
    const auto sae_data = collect_prompt_activations(ck, vocab, sample_pairs(split.train, cfg.sae_pairs, cfg.seed + 5), L);
    SaeConfig sc;
    sc.input_dim = ck.config.d_model;
    sc.expansion = cfg.sae_expansion;
    sc.k = cfg.sae_k;
    sc.steps = cfg.sae_steps;
    sc.seed = cfg.seed;
    const SaeModel sae = train_sae(sae_data, sc);
    write("sae/planted_layer.sae", encode_sae(sae, to_json(stamp)));
    const auto analysis_pairs = sample_pairs(held_out, cfg.bidirectional_trials, cfg.seed + 6);
    const Tensor wrong = final_position_activations(ck, vocab, analysis_pairs, PromptFormat::qa, L);
    const Tensor right = final_position_activations(ck, vocab, analysis_pairs, PromptFormat::simple, L);
    const auto mean_wrong = mean_feature_activation(sae, wrong), mean_right = mean_feature_activation(sae, right);
    const auto top_wrong = top_features(mean_wrong, cfg.top_n), top_right = top_features(mean_right, cfg.top_n);
    const double overlap = set_overlap(top_wrong, top_right, cfg.top_n);
    std::set<std::size_t> flagged(top_wrong.begin(), top_wrong.end());
    flagged.insert(top_right.begin(), top_right.end());
    Json features = Json::array();
    std::vector<std::vector<std::string>> feature_rows;
    for (std::size_t f : flagged) {
      const auto ratio = ratio_of_means(mean_wrong[f], mean_right[f]);
      const bool in_w = std::count(top_wrong.begin(), top_wrong.end(), f) > 0;
      const bool in_r = std::count(top_right.begin(), top_right.end(), f) > 0;
      features.push_back({{"feature", f}, {"mean_wrong", mean_wrong[f]}, {"mean_correct", mean_right[f]},
                          {"amplification", ratio ? Json(*ratio) : Json(nullptr)}, {"top_wrong", in_w},
                          {"top_correct", in_r}});
      feature_rows.push_back({std::to_string(f), fixed(mean_wrong[f]), fixed(mean_right[f]),
                              ratio ? fixed(*ratio) : std::string("undefined"), in_w ? "1" : "0", in_r ? "1" : "0"});
    }
    // feature most amplified in the buggy format, correlated with head output norms on buggy prompts
    std::size_t tracked = top_wrong.front();
    for (std::size_t f : top_wrong)
      if (mean_wrong[f] - mean_right[f] > mean_wrong[tracked] - mean_right[tracked]) tracked = f;
    std::vector<Trace> corr_traces;
    for (const auto& p : analysis_pairs) corr_traces.push_back(forward_trace(ck, tokenize(vocab, render_prompt(PromptFormat::qa, p))));
    Json corr = Json::array();
    for (const auto& hc : feature_head_correlation(sae, corr_traces, tracked, L))
      corr.push_back({{"head", hc.head}, {"r", hc.r ? Json(*hc.r) : Json(nullptr)}});
    const double recon = relative_reconstruction_error(sae, sae_data.rows);
    write("sae/sae_report.json",
          dump_json(stamped_document(
              "sae_report", stamp, config,
              {{"site", sae.site},
               {"sae", to_json(sae.config)},
               {"eval_steps", sae.provenance.eval_steps},
               {"eval_mse", sae.provenance.eval_mse},
               {"reinitialized", sae.provenance.reinitialized},
               {"relative_reconstruction_error", recon},
               {"relative_error_definition", "sum ||x - x_hat||^2 / sum ||x||^2 over the training activations"},
               {"conditions", {{"wrong", "qa final prompt position"}, {"correct", "simple final prompt position"}}},
               {"top_n", cfg.top_n},
               {"overlap", overlap},
               {"features", features},
               {"tracked_feature", tracked},
               {"head_correlation", corr}})));
    write("sae/sae_features.csv",
          csv_table(stamp, "sae_features",
                    {"feature", "mean_wrong", "mean_correct", "amplification", "top_wrong", "top_correct"},
                    feature_rows));
    end_stage();

    begin_stage("stats");
    auto rate_json = [](std::size_t k, std::size_t n) {
      const auto s = exact_binomial_ci(k, n);
      return Json{{"successes", k}, {"trials", n}, {"rate", s.estimate}, {"lower", s.lower}, {"upper", s.upper},
                  {"level", s.level}};
    };
    std::vector<double> repairs;
    for (Outcome o : bi.forward.outcomes) repairs.push_back(o == Outcome::correct ? 1.0 : 0.0);
    const Interval boot = bootstrap_ci(repairs, mean_of, 10000, cfg.seed);
    Json bands = Json::array();
    for (const auto& [lo, hi] : bands_above(layer_report)) bands.push_back({lo, hi});
    Json summary{
        {"qa_error", rate_json(rates[1].errors, rates[1].trials)},
        {"simple_error", rate_json(rates[0].errors, rates[0].trials)},
        {"chat_error", rate_json(rates[2].errors, rates[2].trials)},
        {"forward_repair", rate_json(bi.forward.successes(), bi.forward.trials)},
        {"forward_repair_bootstrap", {{"lower", boot.lower}, {"upper", boot.upper}, {"resamples", 10000}}},
        {"reverse_induction", rate_json(bi.reverse.successes(), bi.reverse.trials)},
        {"layer_bands_above_half", bands},
        {"head_step_even", detect_step(head_reports[Parity::even]).location
                               ? Json(*detect_step(head_reports[Parity::even]).location)
                               : Json(nullptr)},
        {"head_step_odd", detect_step(head_reports[Parity::odd]).location
                              ? Json(*detect_step(head_reports[Parity::odd]).location)
                              : Json(nullptr)},
        {"fraction_step", detect_step(fraction_report).location ? Json(*detect_step(fraction_report).location)
                                                                : Json(nullptr)},
        {"generalization", {{"manifesting", gen.manifesting()}, {"repaired", gen.repaired()}}},
        {"sae_overlap", overlap},
        {"lens_first_top1", {{"simple", lens_json[0]["first_top1_layer"]}, {"qa", lens_json[1]["first_top1_layer"]}}}};
    write("summary.json", dump_json(stamped_document("summary", stamp, config, summary)));
    end_stage();

    result.summary = summary;
    std::sort(result.files.begin(), result.files.end());
    fs::remove(out_dir / "INCOMPLETE");
    return result;
  } catch (const std::exception& e) {
    try {
      detail::write_marker(out_dir, "FAILED", "stage=" + stage + "\nerror=" + e.what() + "\n");
    } catch (...) {
    }
    if (const auto* err = dynamic_cast<const Error*>(&e)) throw Error(err->kind(), "stage " + stage + ": " + e.what());
    throw Error(ErrorKind::io, "stage " + stage + ": " + e.what());
  }
}

}  // namespace fdlab
