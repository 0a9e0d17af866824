#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fdlab/pipeline.hpp"

namespace {

using namespace fdlab;
namespace fs = std::filesystem;

constexpr int kExitOk = 0, kExitUsage = 2, kExitConfig = 3, kExitRuntime = 4;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return kExitUsage;
    case ErrorKind::config: return kExitConfig;
    default: return kExitRuntime;
  }
}

void print_error(std::string_view kind, std::string_view message) {
  std::cerr << Json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

Json load_json_file(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(ErrorKind::config, path + ": " + e.what());
  }
}

template <class T>
Json to_config_value(const T& v) {
  if constexpr (std::is_same_v<T, float>) {
    return tidy(v);
  } else if constexpr (std::is_same_v<T, std::vector<float>>) {
    return tidy(v);
  } else {
    return Json(v);
  }
}

/// Options that make up a subcommand's effective config. Values come from the defaults, then
/// the --config file, then explicit flags; the merged result is echoed into every output.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {
    app_->add_option("--config", path_, "JSON config file; explicit flags override its values");
  }

  template <class T>
  CLI::Option* add(const std::string& flags, const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = nullptr;
    if constexpr (std::is_same_v<T, bool>)
      opt = app_->add_flag(flags, var, help);
    else
      opt = app_->add_option(flags, var, help)->capture_default_str();
    entries_.push_back({key, opt, [&var, key](const Json& j) {
                          try {
                            var = j.get<T>();
                          } catch (const Json::exception& e) {
                            fail(ErrorKind::config, "config key '" + key + "': " + e.what());
                          }
                        },
                        [&var] { return to_config_value(var); }});
    return opt;
  }

  Json resolve() const {
    Json file = Json::object();
    if (!path_.empty()) file = load_json_file(path_);
    require(file.is_object(), ErrorKind::config, "config file must hold a JSON object");
    for (const auto& [key, value] : file.items()) {
      const bool known = std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.key == key; });
      require(known, ErrorKind::config, "unknown config key '" + key + "' for " + app_->get_name());
    }
    for (const Entry& e : entries_)
      if (e.opt->count() == 0 && file.contains(e.key)) e.set(file.at(e.key));
    Json eff = Json::object();
    eff["command"] = app_->get_name();
    for (const Entry& e : entries_) eff[e.key] = e.get();
    return eff;
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<void(const Json&)> set;
    std::function<Json()> get;
  };
  CLI::App* app_;
  std::string path_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Shared argument handling
// ---------------------------------------------------------------------------

OperandPair parse_pair(const std::string& text) {
  const auto comma = text.find(',');
  require(comma != std::string::npos, ErrorKind::usage, "pair '" + text + "' must look like 9.8,9.11");
  OperandPair p{text.substr(0, comma), text.substr(comma + 1)};
  try {
    validate_pair(p);
  } catch (const Error& e) {
    fail(ErrorKind::usage, "pair '" + text + "': " + e.what());
  }
  return p;
}

/// heldout (held-out pairs where the rules disagree), heldout-all, train, fixture, or a file
/// with one "a,b" pair per line.
std::vector<OperandPair> resolve_pairs(const std::string& source, std::size_t count, std::uint64_t seed) {
  require(count > 0, ErrorKind::config, "pair count must be positive");
  std::vector<OperandPair> pool;
  if (source == "fixture") return sample_pairs(fixture_pairs(), count, seed);
  if (source == "heldout" || source == "heldout-all" || source == "train") {
    const PairSplit split = split_pairs(default_task_spec());
    if (source == "heldout") pool = disagreeing_pairs(split.eval);
    if (source == "heldout-all") pool = split.eval;
    if (source == "train") pool = split.train;
    return sample_pairs(std::move(pool), count, seed);
  }
  std::istringstream in(read_file(source));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    pool.push_back(parse_pair(line));
  }
  require(!pool.empty(), ErrorKind::config, "pair file " + source + " holds no pairs");
  if (pool.size() > count) pool.resize(count);
  return pool;
}

std::vector<NeuronRef> parse_neurons(const std::vector<std::string>& specs, const ModelConfig& c) {
  std::vector<NeuronRef> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    require(colon != std::string::npos, ErrorKind::usage, "neuron '" + s + "' must look like layer:index");
    NeuronRef n;
    try {
      n = {std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
    } catch (const std::exception&) {
      fail(ErrorKind::usage, "neuron '" + s + "' must look like layer:index");
    }
    require(n.layer < c.n_layers && n.index < c.d_mlp, ErrorKind::range, "neuron " + s + " outside the model");
    out.push_back(n);
  }
  return out;
}

std::vector<std::string> neuron_specs(const std::vector<NeuronRef>& ns) {
  std::vector<std::string> out;
  for (const auto& n : ns) out.push_back(std::to_string(n.layer) + ":" + std::to_string(n.index));
  return out;
}

/// Outputs may never overwrite inputs.
void check_distinct(const std::vector<std::string>& inputs, const std::vector<fs::path>& outputs) {
  for (const auto& in : inputs) {
    if (in.empty() || !fs::exists(in)) continue;
    for (const auto& out : outputs)
      if (fs::exists(out) && fs::equivalent(in, out))
        fail(ErrorKind::usage, "output " + out.string() + " would overwrite input " + in);
  }
}

fs::path with_ext(const std::string& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string prompt_text(const std::string& prompt, const std::string& prompt_file, const std::string& pair,
                        const std::string& format) {
  const int given = int(!prompt.empty()) + int(!prompt_file.empty()) + int(!pair.empty());
  require(given == 1, ErrorKind::usage, "give exactly one of --prompt, --prompt-file or --pair");
  if (!prompt.empty()) return prompt;
  if (!pair.empty()) return render_prompt(parse_format(format), parse_pair(pair));
  std::string text = read_file(prompt_file);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return text;
}

void print_sweep(const SweepReport& r) {
  for (const auto& p : r.points) {
    std::cout << p.label << "\t" << p.successes() << "/" << p.trials;
    if (p.trials == 0) {
      std::cout << "\tn/a\n";
      continue;
    }
    const auto s = p.summary();
    std::cout << "\t" << fixed(s.estimate, 3) << "\t[" << fixed(s.lower, 3) << ", " << fixed(s.upper, 3) << "]\n";
  }
}

void emit_sweep(const SweepReport& r, const Stamp& stamp, const std::string& stem, bool svg, std::string_view x_label,
                const Json& config) {
  ensure_parent(stem);
  emit_report(r, stamp, stem, {true, true, svg}, x_label, config);
  print_sweep(r);
}

/// Model-backed subcommands share these inputs.
struct ModelArgs {
  std::string checkpoint;
  std::string pairs = "heldout";
  std::size_t trials = 50;
  std::uint64_t seed = 42;
  std::string good = "simple";
  std::string bad = "qa";

  void add(Settings& s, CLI::App* app, std::size_t default_trials, const std::string& default_pairs = "heldout") {
    trials = default_trials;
    pairs = default_pairs;
    s.add("--checkpoint", "checkpoint", checkpoint, "Trained checkpoint (.ckpt)");
    s.add("--pairs", "pairs", pairs, "heldout | heldout-all | train | fixture | file of a,b lines");
    s.add("--trials", "trials", trials, "Number of operand pairs (one trial each)");
    s.add("--seed", "seed", seed, "Seed for pair sampling");
    s.add("--good", "good_format", good, "Working prompt format");
    s.add("--bad", "bad_format", bad, "Failing prompt format");
    (void)app;
  }
};

struct Loaded {
  Checkpoint ck;
  std::string digest;
};

Loaded load_model(const std::string& path) {
  require(!path.empty(), ErrorKind::usage, "--checkpoint is required");
  Loaded l{load_checkpoint(path), ""};
  l.digest = checkpoint_digest(l.ck);
  return l;
}

std::vector<std::size_t> default_heads(std::vector<std::size_t> heads, const ModelConfig& c) {
  if (heads.empty()) heads = heads_of_parity(c.n_heads, Parity::even);
  for (std::size_t h : heads) require(h < c.n_heads, ErrorKind::range, "head " + std::to_string(h) + " out of range");
  return heads;
}

// ---------------------------------------------------------------------------
// Patch plans from JSON
// ---------------------------------------------------------------------------

PositionRange parse_positions(const Json& j) {
  if (j.is_null()) return PositionRange::all();
  PositionRange r;
  r.begin = j.value("begin", std::size_t{0});
  if (j.contains("end") && !j.at("end").is_null()) r.end = j.at("end").get<std::size_t>();
  return r;
}

/// {"directives": [{"layer", "site", "heads", "neuron", "positions": {"begin", "end"},
///   "mode": "replace|blend|set|add", "lambda", "blend", "alpha", "vector",
///   "source": {"trace": path} | {"prompt": text}}]}
PatchPlan parse_plan(const Json& j, const fs::path& base, const Checkpoint& ck, const SyntheticVocab& vocab,
                     std::vector<std::string>* trace_inputs = nullptr) {
  require(j.is_object() && j.contains("directives") && j.at("directives").is_array(), ErrorKind::config,
          "patch plan must be an object with a 'directives' array");
  static const std::set<std::string> keys{"layer", "site", "heads", "neuron", "positions", "mode",
                                          "lambda", "blend", "alpha", "vector", "source"};
  PatchPlan plan;
  std::map<std::string, Trace> sources;
  try {
    for (const Json& d : j.at("directives")) {
      for (const auto& [k, v] : d.items()) require(keys.count(k) > 0, ErrorKind::config, "unknown directive key '" + k + "'");
      ActivationAddress a;
      a.layer = d.at("layer").get<std::size_t>();
      a.site = parse_site(d.at("site").get<std::string>());
      a.heads = d.value("heads", std::vector<std::size_t>{});
      a.neuron = d.value("neuron", std::size_t{0});
      a.positions = parse_positions(d.value("positions", Json(nullptr)));
      const std::string mode = d.at("mode").get<std::string>();
      auto source = [&]() -> Tensor {
        require(d.contains("source"), ErrorKind::config, "mode '" + mode + "' needs a source");
        const Json& s = d.at("source");
        std::string key;
        if (s.contains("trace")) {
          key = "trace:" + (base / s.at("trace").get<std::string>()).string();
          if (!sources.count(key)) sources.emplace(key, load_trace(base / s.at("trace").get<std::string>()));
          if (trace_inputs) trace_inputs->push_back((base / s.at("trace").get<std::string>()).string());
        } else {
          require(s.contains("prompt"), ErrorKind::config, "source needs 'trace' or 'prompt'");
          key = "prompt:" + s.at("prompt").get<std::string>();
          if (!sources.count(key)) sources.emplace(key, forward_trace(ck, tokenize(vocab, s.at("prompt").get<std::string>())));
        }
        return capture(sources.at(key), a);
      };
      if (mode == "replace") {
        plan.directives.push_back({a, Replace{source()}});
      } else if (mode == "blend") {
        const std::string kind = d.value("blend", std::string("convex"));
        require(kind == "convex" || kind == "position_fraction", ErrorKind::config, "unknown blend kind '" + kind + "'");
        plan.directives.push_back({a, Blend{d.value("lambda", 1.0f), source(),
                                            kind == "convex" ? BlendKind::convex : BlendKind::position_fraction}});
      } else if (mode == "set") {
        plan.directives.push_back({a, SetScalar{d.at("alpha").get<float>()}});
      } else if (mode == "add") {
        plan.directives.push_back({a, AddScaled{d.at("alpha").get<float>(), d.at("vector").get<std::vector<float>>()}});
      } else {
        fail(ErrorKind::config, "unknown patch mode '" + mode + "'");
      }
    }
  } catch (const Json::exception& e) {
    fail(ErrorKind::config, std::string("patch plan: ") + e.what());
  }
  plan.validate(ck.config);
  return plan;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct Command {
  CLI::App* app;
  std::unique_ptr<Settings> settings;
  std::function<void(const Json&)> run;
};

using Registry = std::vector<std::unique_ptr<Command>>;

Command& make(Registry& reg, CLI::App& root, const std::string& name, const std::string& help) {
  auto c = std::make_unique<Command>();
  c->app = root.add_subcommand(name, help);
  c->settings = std::make_unique<Settings>(c->app);
  reg.push_back(std::move(c));
  return *reg.back();
}

void add_train(Registry& reg, CLI::App& root) {
  struct A {
    PipelineConfig p;
    std::string out, log;
    bool verbose = false;
  };
  auto a = std::make_shared<A>();
  Command& c = make(reg, root, "train-toy", "Train the toy model on the planted-bug corpus");
  auto& s = *c.settings;
  s.add("--steps", "train_steps", a->p.train_steps, "Optimizer steps");
  s.add("--batch", "batch_size", a->p.batch_size, "Sequences per step");
  s.add("--lr", "learning_rate", a->p.learning_rate, "Peak learning rate");
  s.add("--seed", "seed", a->p.seed, "Initialisation and batching seed");
  s.add("--planted-layer", "planted_layer", a->p.planted_layer, "Layer that interchange training localizes");
  s.add("--interchange-fraction", "interchange_fraction", a->p.interchange_fraction,
        "Share of each batch trained with swapped attention patterns (0 disables)");
  c.app->add_option("--out", a->out, "Checkpoint path")->required();
  c.app->add_option("--log", a->log, "Optional training-loss CSV");
  c.app->add_flag("-v,--verbose", a->verbose, "Loss progress on stderr");
  c.run = [a](const Json& eff) {
    a->p.validate();
    const SyntheticVocab vocab;
    const TaskSpec spec = default_task_spec();
    const PairSplit split = split_pairs(spec);
    TrainConfig tc = a->p.train_config();
    if (a->p.interchange_fraction <= 0.0f) tc.interchange.reset();
    TrainProgress progress;
    if (a->verbose)
      progress = [](const TrainLogEntry& e) { std::cerr << "step " << e.step << " loss " << fixed(e.loss, 6) << "\n"; };
    TrainResult r = train_toy(ModelConfig{}, make_dataset(spec, vocab, split.train), tc, progress);
    r.checkpoint.provenance.note = stamp_line(make_stamp(eff, "", a->p.seed));
    ensure_parent(a->out);
    save_checkpoint(r.checkpoint, a->out);
    const Stamp stamp = make_stamp(eff, checkpoint_digest(r.checkpoint), a->p.seed);
    if (!a->log.empty()) {
      std::vector<std::vector<std::string>> rows;
      for (const auto& e : r.log) rows.push_back({std::to_string(e.step), fixed(e.loss, 8), fixed(e.learning_rate, 8)});
      ensure_parent(a->log);
      write_file(a->log, csv_table(stamp, "train_log", {"step", "loss", "learning_rate"}, rows));
    }
    std::cout << "checkpoint " << a->out << " digest " << stamp.checkpoint_digest << " initial_loss "
              << fixed(r.initial_loss) << " final_loss " << fixed(r.final_loss) << "\n";
  };
}

void add_eval(Registry& reg, CLI::App& root) {
  struct A {
    ModelArgs m;
    std::vector<std::string> formats{"simple", "qa", "chat"};
    std::string out;
  };
  auto a = std::make_shared<A>();
  Command& c = make(reg, root, "eval-formats", "Per-format error rates on held-out pairs");
  a->m.add(*c.settings, c.app, 200);
  c.settings->add("--formats", "formats", a->formats, "Formats to evaluate");
  c.app->add_option("--out", a->out, "Output stem (.json and .csv)");
  c.run = [a](const Json& eff) {
    const Loaded m = load_model(a->m.checkpoint);
    const SyntheticVocab vocab;
    std::vector<PromptFormat> formats;
    for (const auto& f : a->formats) formats.push_back(parse_format(f));
    const auto pairs = resolve_pairs(a->m.pairs, a->m.trials, a->m.seed);
    const auto rates = evaluate_formats(m.ck, vocab, pairs, formats);
    const Stamp stamp = make_stamp(eff, m.digest, a->m.seed);
    Json rows_json = Json::array();
    std::vector<std::vector<std::string>> rows;
    std::cout << "format\terror_rate\terrors/trials\tbug\tincoherent\tci95\n";
    for (const auto& r : rates) {
      const auto ci = exact_binomial_ci(r.errors, r.trials);
      rows_json.push_back({{"format", to_string(r.format)}, {"errors", r.errors}, {"bugs", r.bugs},
                           {"incoherent", r.incoherent}, {"trials", r.trials}, {"error_rate", r.rate()},
                           {"ci", {{"lower", ci.lower}, {"upper", ci.upper}, {"level", ci.level}}}});
      rows.push_back({std::string(to_string(r.format)), std::to_string(r.errors), std::to_string(r.bugs),
                      std::to_string(r.incoherent), std::to_string(r.trials), fixed(r.rate()), fixed(ci.lower),
                      fixed(ci.upper)});
      std::cout << to_string(r.format) << "\t" << fixed(r.rate(), 3) << "\t" << r.errors << "/" << r.trials << "\t"
                << r.bugs << "\t" << r.incoherent << "\t[" << fixed(ci.lower, 3) << ", " << fixed(ci.upper, 3) << "]\n";
    }
    if (!a->out.empty()) {
      check_distinct({a->m.checkpoint, a->m.pairs}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv")});
      ensure_parent(a->out);
      write_file(with_ext(a->out, ".json"),
                 dump_json(stamped_document("eval_formats", stamp, eff, {{"rates", rows_json}})));
      write_file(with_ext(a->out, ".csv"),
                 csv_table(stamp, "eval_formats",
                           {"format", "errors", "bugs", "incoherent", "trials", "error_rate", "ci_lower", "ci_upper"},
                           rows));
    }
  };
}

struct PromptArgs {
  std::string prompt, prompt_file, pair, format = "qa";

  void add(Settings& s) {
    s.add("--prompt", "prompt", prompt, "Prompt text in the toy vocabulary");
    s.add("--prompt-file", "prompt_file", prompt_file, "File holding the prompt text");
    s.add("--pair", "pair", pair, "Operand pair a,b rendered with --format");
    s.add("--format", "format", format, "Prompt format for --pair");
  }
  std::string text() const { return prompt_text(prompt, prompt_file, pair, format); }
};

void add_trace(Registry& reg, CLI::App& root) {
  struct A {
    std::string checkpoint, out;
    PromptArgs prompt;
    bool generate = false, omit_heads = false;
  };
  auto a = std::make_shared<A>();
  Command& c = make(reg, root, "trace", "Run one prompt and store every activation");
  c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Trained checkpoint (.ckpt)");
  a->prompt.add(*c.settings);
  c.settings->add("--generate", "generate", a->generate, "Append the greedy answer before tracing");
  c.settings->add("--omit-head-out", "omit_head_out", a->omit_heads, "Drop per-head outputs from the file");
  c.app->add_option("--out", a->out, "Trace path (.trace)")->required();
  c.run = [a](const Json& eff) {
    const Loaded m = load_model(a->checkpoint);
    check_distinct({a->checkpoint, a->prompt.prompt_file}, {a->out});
    const SyntheticVocab vocab;
    Tokens tokens = tokenize(vocab, a->prompt.text());
    if (a->generate) {
      const std::size_t room = std::min(kMaxAnswerTokens, m.ck.config.max_seq - tokens.size());
      tokens = generate_greedy(m.ck, tokens, room, vocab.end_token());
    }
    const Trace tr = forward_trace(m.ck, tokens);
    ensure_parent(a->out);
    save_trace(tr, a->out, a->omit_heads, to_json(make_stamp(eff, m.digest, 0)));
    const auto top = argmax(tr.logits.row(tr.seq_len() - 1));
    std::cout << "trace " << a->out << " tokens " << tr.seq_len() << " text \"" << detokenize(vocab, tokens)
              << "\" next " << vocab.symbol(TokenId(top)) << "\n";
  };
}

void add_patch(Registry& reg, CLI::App& root) {
  struct A {
    std::string checkpoint, plan, out;
    PromptArgs prompt;
    bool generate = false;
  };
  auto a = std::make_shared<A>();
  Command& c = make(reg, root, "patch", "Run one prompt under a JSON patch plan");
  c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Trained checkpoint (.ckpt)");
  a->prompt.add(*c.settings);
  c.settings->add("--plan", "plan", a->plan, "Patch plan (.json)");
  c.settings->add("--generate", "generate", a->generate, "Also decode a greedy answer under the plan");
  c.app->add_option("--out", a->out, "Patched trace path (.trace)");
  c.run = [a](const Json& eff) {
    require(!a->plan.empty(), ErrorKind::usage, "--plan is required");
    const Loaded m = load_model(a->checkpoint);
    const SyntheticVocab vocab;
    std::vector<std::string> inputs{a->checkpoint, a->plan, a->prompt.prompt_file};
    const PatchPlan plan = parse_plan(load_json_file(a->plan), fs::path(a->plan).parent_path(), m.ck, vocab, &inputs);
    const Tokens tokens = tokenize(vocab, a->prompt.text());
    const Trace tr = apply_patched_forward(m.ck, tokens, plan);
    const auto top = argmax(tr.logits.row(tr.seq_len() - 1));
    std::cout << "directives " << plan.directives.size() << " next " << vocab.symbol(TokenId(top));
    if (a->generate) {
      const std::size_t room = std::min(kMaxAnswerTokens, m.ck.config.max_seq - tokens.size());
      const Tokens full = generate_patched(m.ck, tokens, room, plan, vocab.end_token());
      std::cout << " answer " << answer_text(vocab, std::span<const TokenId>(full).subspan(tokens.size()));
    }
    std::cout << "\n";
    if (!a->out.empty()) {
      check_distinct(inputs, {a->out});
      ensure_parent(a->out);
      save_trace(tr, a->out, false, to_json(make_stamp(eff, m.digest, 0)));
    }
  };
}

/// Shared frame for the sweep subcommands.
struct SweepArgs {
  ModelArgs m;
  std::string out;
  bool svg = true;

  void add(Command& c, std::size_t default_trials, const std::string& default_pairs = "heldout") {
    m.add(*c.settings, c.app, default_trials, default_pairs);
    c.app->add_option("--out", out, "Output stem (.json, .csv and .svg)")->required();
    c.settings->add("--svg,!--no-svg", "svg", svg, "Write a step-curve SVG (default on)");
  }

  template <class Fn>
  void run(const Json& eff, Fn&& body) const {
    const Loaded l = load_model(m.checkpoint);
    check_distinct({m.checkpoint, m.pairs}, {with_ext(out, ".json"), with_ext(out, ".csv"), with_ext(out, ".svg")});
    const ModelSubject subject(l.ck, resolve_pairs(m.pairs, m.trials, m.seed), parse_format(m.good),
                               parse_format(m.bad));
    body(subject, make_stamp(eff, l.digest, m.seed));
  }
};

void add_sweeps(Registry& reg, CLI::App& root) {
  {
    struct A {
      SweepArgs s;
      std::vector<std::size_t> layers;
      std::string site = "attn_pattern", direction = "forward";
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "sweep-layers", "Transplant one site at each layer in turn");
    a->s.add(c, 100);
    c.settings->add("--layers", "layers", a->layers, "Layers to sweep (default: all)");
    c.settings->add("--site", "site", a->site, "attn_pattern | attn_out | mlp_out | resid_post | resid_pre");
    c.settings->add("--direction", "direction", a->direction, "forward (repair) | reverse (induce)");
    c.run = [a](const Json& eff) {
      require(a->direction == "forward" || a->direction == "reverse", ErrorKind::config, "direction must be forward or reverse");
      a->s.run(eff, [&](const ModelSubject& s, const Stamp& stamp) {
        std::vector<std::size_t> layers = a->layers;
        if (layers.empty()) layers = detail::all_heads(s.n_layers());
        const auto r = run_layer_sweep(s, layers, parse_site(a->site),
                                       a->direction == "forward" ? Direction::forward : Direction::reverse);
        emit_sweep(r, stamp, a->s.out, a->s.svg, "layer", eff);
      });
    };
  }
  {
    struct A {
      SweepArgs s;
      std::size_t layer = 2, max_subsets = kDefaultSubsetCap;
      std::string parity = "even";
      std::vector<std::size_t> ks;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "sweep-heads", "Transplant head subsets of one parity at one layer");
    a->s.add(c, 50);
    c.settings->add("--layer", "layer", a->layer, "Layer to patch");
    c.settings->add("--parity", "parity", a->parity, "even | odd | mixed");
    c.settings->add("--k", "k", a->ks, "Subset sizes (default: 0..pool size)");
    c.settings->add("--max-subsets", "max_subsets", a->max_subsets, "Enumerate exhaustively up to this many subsets per k, else sample");
    c.run = [a](const Json& eff) {
      a->s.run(eff, [&](const ModelSubject& s, const Stamp& stamp) {
        const auto r = run_head_subset_sweep(s, a->layer, parse_parity(a->parity), a->ks, a->max_subsets, a->s.m.seed);
        emit_sweep(r, stamp, a->s.out, a->s.svg, "heads selected (k)", eff);
      });
    };
  }
  {
    struct A {
      SweepArgs s;
      std::size_t layer = 2;
      std::vector<std::size_t> heads;
      std::vector<float> lambdas = default_lambda_grid();
      std::string blend = "convex";
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "sweep-fraction", "Blend source and target attention patterns over lambda");
    a->s.add(c, 50);
    c.settings->add("--layer", "layer", a->layer, "Layer to patch");
    c.settings->add("--heads", "heads", a->heads, "Heads to blend (default: even heads)");
    c.settings->add("--lambdas", "lambdas", a->lambdas, "Blend weights in [0,1]");
    c.settings->add("--blend", "blend", a->blend, "convex | position_fraction");
    c.run = [a](const Json& eff) {
      require(a->blend == "convex" || a->blend == "position_fraction", ErrorKind::config, "unknown blend kind");
      a->s.run(eff, [&](const ModelSubject& s, const Stamp& stamp) {
        const auto r = run_fraction_sweep(s, a->layer, default_heads(a->heads, s.checkpoint().config), a->lambdas,
                                          a->blend == "convex" ? BlendKind::convex : BlendKind::position_fraction);
        emit_sweep(r, stamp, a->s.out, a->s.svg, "lambda", eff);
      });
    };
  }
  {
    struct A {
      SweepArgs s;
      std::vector<std::string> neurons;
      std::vector<float> alphas = default_alpha_grid();
      std::size_t top = 8, random_control = 0;
      std::string score_pair = "9.8,9.11";
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "sweep-alpha", "Clamp a neuron set over a grid of alpha values");
    a->s.add(c, 50);
    c.settings->add("--neurons", "neurons", a->neurons, "layer:index list (default: top differential neurons)");
    c.settings->add("--top", "top", a->top, "Neuron count when --neurons is absent");
    c.settings->add("--score-pair", "score_pair", a->score_pair, "Pair used to rank neurons when --neurons is absent");
    c.settings->add("--alphas", "alphas", a->alphas, "Clamp values");
    c.settings->add("--random-control", "random_control", a->random_control,
                    "Also sweep this many random neurons (written to <out>_random.*)");
    c.run = [a](const Json& eff) {
      a->s.run(eff, [&](const ModelSubject& s, const Stamp& stamp) {
        const Checkpoint& ck = s.checkpoint();
        std::vector<NeuronRef> neurons = parse_neurons(a->neurons, ck.config);
        Json e = eff;
        if (neurons.empty()) {
          const OperandPair p = parse_pair(a->score_pair);
          const Trace bad = forward_trace(ck, tokenize(s.vocab(), render_prompt(s.bad_format(), p)));
          const Trace good = forward_trace(ck, tokenize(s.vocab(), render_prompt(s.good_format(), p)));
          neurons = top_neurons(differential_scores(bad, good, 0, ck.config.n_layers), a->top);
          e["neurons"] = neuron_specs(neurons);
        }
        const auto r = run_alpha_sweep(s, neurons, a->alphas);
        emit_sweep(r, stamp, a->s.out, a->s.svg, "alpha", e);
        if (a->random_control > 0) {
          const auto rc = run_random_control(s, 0, ck.config.n_layers, ck.config.d_mlp, a->random_control, a->alphas,
                                             a->s.m.seed);
          emit_sweep(rc, stamp, a->s.out + "_random", a->s.svg, "alpha", e);
        }
      });
    };
  }
  {
    struct A {
      SweepArgs s;
      std::size_t layer = 2;
      std::vector<std::size_t> heads;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "bidirectional", "Forward repair and reverse induction at one layer");
    a->s.add(c, 200);
    a->s.svg = false;
    c.settings->add("--layer", "layer", a->layer, "Layer to patch");
    c.settings->add("--heads", "heads", a->heads, "Heads to transplant (default: even heads)");
    c.run = [a](const Json& eff) {
      a->s.run(eff, [&](const ModelSubject& s, const Stamp& stamp) {
        const auto b = run_bidirectional(s, a->layer, default_heads(a->heads, s.checkpoint().config));
        emit_sweep(b.sweep, stamp, a->s.out, false, "", eff);
      });
    };
  }
  {
    struct A {
      SweepArgs s;
      std::size_t layer = 2;
      std::vector<std::size_t> heads;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "generalize", "Check the bug and the forward repair pair by pair");
    a->s.add(c, 100, "fixture");
    a->s.svg = false;
    c.settings->add("--layer", "layer", a->layer, "Layer to patch");
    c.settings->add("--heads", "heads", a->heads, "Heads to transplant (default: even heads)");
    c.run = [a](const Json& eff) {
      a->s.run(eff, [&](const ModelSubject& s, const Stamp& stamp) {
        const auto g = run_pair_generalization(s, a->layer, default_heads(a->heads, s.checkpoint().config));
        emit_sweep(g.sweep, stamp, a->s.out, false, "", eff);
        std::cout << "manifesting " << g.manifesting() << "/" << g.pairs.size() << " repaired " << g.repaired() << "/"
                  << g.manifesting() << "\n";
      });
    };
  }
}

void add_lens(Registry& reg, CLI::App& root) {
  {
    struct A {
      std::string trace, checkpoint, token, out;
      std::optional<std::size_t> position;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "logit-lens", "Per-layer readout of a stored trace");
    c.settings->add("--trace", "trace", a->trace, "Trace file (.trace)");
    c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Checkpoint that produced the trace");
    c.settings->add("--token", "token", a->token, "Token to follow (default: the model's final top-1)");
    c.app->add_option("--position", a->position, "Position (default: last)");
    c.app->add_option("--out", a->out, "Output stem (.json and .csv)");
    c.run = [a](Json eff) {
      require(!a->trace.empty(), ErrorKind::usage, "--trace is required");
      const Loaded m = load_model(a->checkpoint);
      const Trace tr = load_trace(a->trace);
      const SyntheticVocab vocab;
      const std::size_t pos = a->position.value_or(tr.seq_len() - 1);
      require(pos < tr.seq_len(), ErrorKind::range, "position outside the trace");
      const TokenId token = a->token.empty() ? TokenId(argmax(tr.logits.row(pos))) : vocab.id(a->token);
      eff["position"] = pos;
      eff["token"] = vocab.symbol(token);
      const LensCurve curve = lens_curve(m.ck, tr, token, pos);
      const Stamp stamp = make_stamp(eff, m.digest, 0);
      Json pts = Json::array();
      std::vector<std::vector<std::string>> rows;
      std::cout << "layer\tp(" << vocab.symbol(token) << ")\ttop\tp(top)\n";
      for (const auto& p : curve.points) {
        pts.push_back({{"layer", p.layer}, {"target_prob", p.target_prob}, {"top_token", vocab.symbol(p.top_token)},
                       {"top_prob", p.top_prob}});
        rows.push_back({std::to_string(p.layer), fixed(p.target_prob), vocab.symbol(p.top_token), fixed(p.top_prob)});
        std::cout << p.layer << "\t" << fixed(p.target_prob, 4) << "\t" << vocab.symbol(p.top_token) << "\t"
                  << fixed(p.top_prob, 4) << "\n";
      }
      const auto first = curve.first_top1_layer();
      if (!a->out.empty()) {
        check_distinct({a->trace, a->checkpoint}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv")});
        ensure_parent(a->out);
        write_file(with_ext(a->out, ".json"),
                   dump_json(stamped_document("logit_lens", stamp, eff,
                                              {{"token", vocab.symbol(token)}, {"position", pos},
                                               {"first_top1_layer", first ? Json(*first) : Json(nullptr)},
                                               {"points", pts}})));
        write_file(with_ext(a->out, ".csv"),
                   csv_table(stamp, "logit_lens", {"layer", "target_prob", "top_token", "top_prob"}, rows));
      }
    };
  }
  {
    struct A {
      std::string trace, compare, checkpoint, out;
      std::optional<std::size_t> position;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "attribution", "Direct logit attribution by layer and component");
    c.settings->add("--trace", "trace", a->trace, "Trace file (.trace)");
    c.settings->add("--compare", "compare", a->compare, "Second trace: report per-layer KL between attributions");
    c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Checkpoint that produced the trace");
    c.app->add_option("--position", a->position, "Position (default: last)");
    c.app->add_option("--out", a->out, "Output stem (.json and .csv)");
    c.run = [a](const Json& eff) {
      require(!a->trace.empty(), ErrorKind::usage, "--trace is required");
      const Loaded m = load_model(a->checkpoint);
      const Trace tr = load_trace(a->trace);
      const SyntheticVocab vocab;
      const Attribution attr = layer_attribution(m.ck, tr, a->position);
      const std::size_t pos = attr.position;
      const auto total = attr.total();
      const TokenId top = TokenId(argmax(total));
      const Stamp stamp = make_stamp(eff, m.digest, 0);
      Json comps = Json::array();
      std::vector<std::vector<std::string>> rows;
      std::cout << "component\tlayer\tlogit(" << vocab.symbol(top) << ")\n";
      for (const auto& comp : attr.components) {
        comps.push_back({{"kind", to_string(comp.kind)}, {"layer", comp.layer}, {"logits", comp.logits}});
        rows.push_back({std::string(to_string(comp.kind)), std::to_string(comp.layer), fixed(comp.logits[top])});
        std::cout << to_string(comp.kind) << "\t" << comp.layer << "\t" << fixed(comp.logits[top], 4) << "\n";
      }
      float max_gap = 0.0f;
      for (std::size_t v = 0; v < total.size(); ++v) max_gap = std::max(max_gap, std::abs(total[v] - tr.logits.at(pos, v)));
      Json body{{"position", pos}, {"top_token", vocab.symbol(top)}, {"components", comps},
                {"max_abs_residual_vs_logits", max_gap}};
      if (!a->compare.empty()) {
        const Trace other = load_trace(a->compare);
        Json kl = Json::array();
        for (const auto& [l, v] : attribution_kl_by_layer(attr, layer_attribution(m.ck, other), m.ck.config.n_layers)) {
          kl.push_back({{"layer", l}, {"kl", v}});
          std::cout << "kl\t" << l << "\t" << fixed(v, 6) << "\n";
        }
        body["attribution_kl"] = kl;
      }
      if (!a->out.empty()) {
        check_distinct({a->trace, a->compare, a->checkpoint}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv")});
        ensure_parent(a->out);
        write_file(with_ext(a->out, ".json"), dump_json(stamped_document("attribution", stamp, eff, body)));
        write_file(with_ext(a->out, ".csv"),
                   csv_table(stamp, "attribution", {"component", "layer", "logit_top_token"}, rows));
      }
    };
  }
  {
    struct A {
      std::string checkpoint, pair = "9.8,9.11", good = "simple", bad = "qa", out;
      std::size_t layer_begin = 0, layer_end = 0, top = 8;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "diff-score", "Rank MLP neurons by bad-minus-good activation");
    c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Trained checkpoint (.ckpt)");
    c.settings->add("--pair", "pair", a->pair, "Operand pair a,b");
    c.settings->add("--good", "good_format", a->good, "Working prompt format");
    c.settings->add("--bad", "bad_format", a->bad, "Failing prompt format");
    c.settings->add("--layer-begin", "layer_begin", a->layer_begin, "First layer scored");
    c.settings->add("--layer-end", "layer_end", a->layer_end, "One past the last layer scored (0: all)");
    c.settings->add("--top", "top", a->top, "Neurons reported as the top set");
    c.app->add_option("--out", a->out, "Output stem (.json and .csv)");
    c.run = [a](const Json& eff) {
      const Loaded m = load_model(a->checkpoint);
      const SyntheticVocab vocab;
      const OperandPair p = parse_pair(a->pair);
      const Trace bad = forward_trace(m.ck, tokenize(vocab, render_prompt(parse_format(a->bad), p)));
      const Trace good = forward_trace(m.ck, tokenize(vocab, render_prompt(parse_format(a->good), p)));
      const std::size_t end = a->layer_end ? a->layer_end : m.ck.config.n_layers;
      const auto scores = differential_scores(bad, good, a->layer_begin, end);
      const auto top = top_neurons(scores, a->top);
      const Stamp stamp = make_stamp(eff, m.digest, 0);
      std::vector<std::vector<std::string>> rows;
      Json ranked = Json::array();
      for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& s = scores[i];
        rows.push_back({std::to_string(i + 1), std::to_string(s.neuron.layer), std::to_string(s.neuron.index),
                        fixed(s.score)});
        ranked.push_back({{"layer", s.neuron.layer}, {"index", s.neuron.index}, {"score", s.score}});
      }
      for (const auto& n : top) std::cout << n.layer << ":" << n.index << "\n";
      if (!a->out.empty()) {
        check_distinct({a->checkpoint}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv")});
        ensure_parent(a->out);
        write_file(with_ext(a->out, ".json"),
                   dump_json(stamped_document("diff_score", stamp, eff,
                                              {{"top", neurons_json(top)}, {"scores", ranked}})));
        write_file(with_ext(a->out, ".csv"), csv_table(stamp, "diff_score", {"rank", "layer", "index", "score"}, rows));
      }
    };
  }
  {
    struct A {
      std::string checkpoint, pair = "9.8,9.11", good = "simple", bad = "qa", site = "resid_post", out;
      std::size_t layer = 2, neuron = 0;
      std::vector<float> alphas{0.0f, 0.5f, 1.0f, 2.0f};
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "steer", "Add alpha * (good - bad) to the failing run");
    c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Trained checkpoint (.ckpt)");
    c.settings->add("--pair", "pair", a->pair, "Operand pair a,b");
    c.settings->add("--good", "good_format", a->good, "Working prompt format (vector source)");
    c.settings->add("--bad", "bad_format", a->bad, "Failing prompt format (steered)");
    c.settings->add("--layer", "layer", a->layer, "Layer of the steering site");
    c.settings->add("--site", "site", a->site, "resid_pre | attn_out | mlp_out | resid_post | mlp_neuron");
    c.settings->add("--neuron", "neuron", a->neuron, "Neuron index for mlp_neuron");
    c.settings->add("--alphas", "alphas", a->alphas, "Steering strengths");
    c.app->add_option("--out", a->out, "Output stem (.json and .csv)");
    c.run = [a](const Json& eff) {
      const Loaded m = load_model(a->checkpoint);
      const SyntheticVocab vocab;
      const OperandPair p = parse_pair(a->pair);
      const Tokens bad_prompt = tokenize(vocab, render_prompt(parse_format(a->bad), p));
      const Trace bad = forward_trace(m.ck, bad_prompt);
      const Trace good = forward_trace(m.ck, tokenize(vocab, render_prompt(parse_format(a->good), p)));
      const ActivationAddress addr{a->layer, parse_site(a->site), {}, a->neuron, PositionRange::all()};
      addr.validate(m.ck.config);
      const auto vec = steering_vector(good, bad, addr);
      const Stamp stamp = make_stamp(eff, m.digest, 0);
      const std::size_t room = std::min(kMaxAnswerTokens, m.ck.config.max_seq - bad_prompt.size());
      Json results = Json::array();
      std::vector<std::vector<std::string>> rows;
      for (float alpha : a->alphas) {
        const PatchPlan plan = steering_plan(addr, vec, alpha, bad_prompt.size() - 1);
        const Tokens full = generate_patched(m.ck, bad_prompt, room, plan, vocab.end_token());
        const std::string ans = answer_text(vocab, std::span<const TokenId>(full).subspan(bad_prompt.size()));
        const Outcome o = classify_answer(p, ans);
        results.push_back({{"alpha", tidy(alpha)}, {"answer", ans}, {"outcome", to_string(o)}});
        rows.push_back({fixed(tidy(alpha)), ans, std::string(to_string(o))});
        std::cout << "alpha " << fixed(tidy(alpha), 3) << "\t" << ans << "\t" << to_string(o) << "\n";
      }
      double norm = 0.0;
      for (float v : vec) norm += double(v) * v;
      if (!a->out.empty()) {
        check_distinct({a->checkpoint}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv")});
        ensure_parent(a->out);
        write_file(with_ext(a->out, ".json"),
                   dump_json(stamped_document("steer", stamp, eff,
                                              {{"vector_norm", std::sqrt(norm)}, {"vector", vec}, {"results", results}})));
        write_file(with_ext(a->out, ".csv"), csv_table(stamp, "steer", {"alpha", "answer", "outcome"}, rows));
      }
    };
  }
}

void add_sae(Registry& reg, CLI::App& root) {
  {
    struct A {
      std::string checkpoint, activations, out, save_acts;
      std::size_t layer = 2, pairs = 600;
      SaeConfig sc;
      bool verbose = false;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "sae-train", "Train a TopK sparse autoencoder on residual activations");
    c.settings->add("--checkpoint", "checkpoint", a->checkpoint, "Checkpoint to collect activations from");
    c.settings->add("--activations", "activations", a->activations, "Pre-collected activations (.acts) instead");
    c.settings->add("--layer", "layer", a->layer, "resid_post layer to collect");
    c.settings->add("--pairs", "pairs", a->pairs, "Training pairs rendered in every format");
    c.settings->add("--expansion", "expansion", a->sc.expansion, "Features per input dimension");
    c.settings->add("--k", "k", a->sc.k, "Active features per sample");
    c.settings->add("--steps", "steps", a->sc.steps, "Adam steps");
    c.settings->add("--batch", "batch_size", a->sc.batch_size, "Rows per step");
    c.settings->add("--lr", "learning_rate", a->sc.learning_rate, "Learning rate");
    c.settings->add("--seed", "seed", a->sc.seed, "Seed");
    c.app->add_option("--out", a->out, "SAE path (.sae)")->required();
    c.app->add_option("--save-activations", a->save_acts, "Also store the collected activations (.acts)");
    c.app->add_flag("-v,--verbose", a->verbose, "Eval MSE on stderr");
    c.run = [a](const Json& eff) {
      ActivationDataset data;
      std::string digest;
      if (!a->activations.empty()) {
        require(a->checkpoint.empty(), ErrorKind::usage, "give --checkpoint or --activations, not both");
        data = load_activations(a->activations);
      } else {
        const Loaded m = load_model(a->checkpoint);
        require(a->layer < m.ck.config.n_layers, ErrorKind::range, "layer beyond model depth");
        digest = m.digest;
        const auto pairs = sample_pairs(split_pairs(default_task_spec()).train, a->pairs, a->sc.seed);
        data = collect_prompt_activations(m.ck, SyntheticVocab{}, pairs, a->layer);
      }
      check_distinct({a->checkpoint, a->activations}, {a->out, a->save_acts});
      const Stamp stamp = make_stamp(eff, digest, a->sc.seed);
      a->sc.input_dim = data.width();
      SaeProgress progress;
      if (a->verbose)
        progress = [](std::size_t step, double mse) { std::cerr << "step " << step << " eval_mse " << fixed(mse, 8) << "\n"; };
      const SaeModel sae = train_sae(data, a->sc, progress);
      ensure_parent(a->out);
      save_sae(sae, a->out, to_json(stamp));
      if (!a->save_acts.empty()) {
        ensure_parent(a->save_acts);
        save_activations(data, a->save_acts, to_json(stamp));
      }
      std::cout << "sae " << a->out << " features " << sae.features() << " k " << sae.config.k << " rows "
                << data.count() << " relative_error " << fixed(relative_reconstruction_error(sae, data.rows)) << "\n";
    };
  }
  {
    struct A {
      ModelArgs m;
      std::string sae, out;
      std::size_t top_n = 20;
      std::optional<std::size_t> feature;
    };
    auto a = std::make_shared<A>();
    Command& c = make(reg, root, "sae-analyze", "Compare SAE features between the failing and working formats");
    a->m.add(*c.settings, c.app, 200);
    c.settings->add("--sae", "sae", a->sae, "Trained SAE (.sae)");
    c.settings->add("--top-n", "top_n", a->top_n, "Size of each top feature set");
    c.app->add_option("--feature", a->feature, "Feature to correlate with head norms (default: most amplified)");
    c.app->add_option("--out", a->out, "Output stem (.json and .csv)");
    c.run = [a](Json eff) {
      require(!a->sae.empty(), ErrorKind::usage, "--sae is required");
      const Loaded m = load_model(a->m.checkpoint);
      const SaeModel sae = load_sae(a->sae);
      require(sae.site.contains("layer"), ErrorKind::config, "SAE does not record the layer it was trained on");
      const std::size_t layer = sae.site.at("layer").get<std::size_t>();
      require(sae.input_dim() == m.ck.config.d_model && layer < m.ck.config.n_layers, ErrorKind::shape,
              "SAE does not fit this checkpoint");
      const SyntheticVocab vocab;
      const auto pairs = resolve_pairs(a->m.pairs, a->m.trials, a->m.seed);
      const PromptFormat bad = parse_format(a->m.bad), good = parse_format(a->m.good);
      const Tensor wrong = final_position_activations(m.ck, vocab, pairs, bad, layer);
      const Tensor right = final_position_activations(m.ck, vocab, pairs, good, layer);
      const auto mw = mean_feature_activation(sae, wrong), mr = mean_feature_activation(sae, right);
      const auto tw = top_features(mw, a->top_n), tr = top_features(mr, a->top_n);
      const double overlap = set_overlap(tw, tr, a->top_n);
      std::size_t tracked = tw.front();
      for (std::size_t f : tw)
        if (mw[f] - mr[f] > mw[tracked] - mr[tracked]) tracked = f;
      if (a->feature) tracked = *a->feature;
      require(tracked < sae.features(), ErrorKind::range, "feature beyond the SAE width");
      eff["feature"] = tracked;
      std::vector<Trace> traces;
      for (const auto& p : pairs) traces.push_back(forward_trace(m.ck, tokenize(vocab, render_prompt(bad, p))));
      Json corr = Json::array();
      if (traces.size() >= 3)
        for (const auto& hc : feature_head_correlation(sae, traces, tracked, layer))
          corr.push_back({{"head", hc.head}, {"r", hc.r ? Json(*hc.r) : Json(nullptr)}});
      std::set<std::size_t> flagged(tw.begin(), tw.end());
      flagged.insert(tr.begin(), tr.end());
      Json features = Json::array();
      std::vector<std::vector<std::string>> rows;
      for (std::size_t f : flagged) {
        const auto ratio = ratio_of_means(mw[f], mr[f]);
        const bool in_w = std::count(tw.begin(), tw.end(), f) > 0, in_r = std::count(tr.begin(), tr.end(), f) > 0;
        features.push_back({{"feature", f}, {"mean_wrong", mw[f]}, {"mean_correct", mr[f]},
                            {"amplification", ratio ? Json(*ratio) : Json(nullptr)}, {"top_wrong", in_w},
                            {"top_correct", in_r}});
        rows.push_back({std::to_string(f), fixed(mw[f]), fixed(mr[f]), ratio ? fixed(*ratio) : "undefined",
                        in_w ? "1" : "0", in_r ? "1" : "0"});
      }
      std::cout << "overlap " << fixed(overlap, 3) << " tracked_feature " << tracked << "\n";
      const Stamp stamp = make_stamp(eff, m.digest, a->m.seed);
      if (!a->out.empty()) {
        check_distinct({a->m.checkpoint, a->sae}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv")});
        ensure_parent(a->out);
        write_file(with_ext(a->out, ".json"),
                   dump_json(stamped_document("sae_analysis", stamp, eff,
                                              {{"layer", layer}, {"top_n", a->top_n}, {"overlap", overlap},
                                               {"features", features}, {"tracked_feature", tracked},
                                               {"head_correlation", corr}})));
        write_file(with_ext(a->out, ".csv"),
                   csv_table(stamp, "sae_features",
                             {"feature", "mean_wrong", "mean_correct", "amplification", "top_wrong", "top_correct"},
                             rows));
      }
    };
  }
}

void add_report(Registry& reg, CLI::App& root) {
  struct A {
    std::string input, out, x_label = "x";
    bool svg = true;
  };
  auto a = std::make_shared<A>();
  Command& c = make(reg, root, "report", "Re-emit CSV and SVG from a stored sweep JSON");
  c.settings->add("--input", "input", a->input, "Sweep report (.json)");
  c.settings->add("--x-label", "x_label", a->x_label, "Axis label for the SVG");
  c.settings->add("--svg,!--no-svg", "svg", a->svg, "Write the step-curve SVG (default on)");
  c.app->add_option("--out", a->out, "Output stem")->required();
  c.run = [a](const Json&) {
    require(!a->input.empty(), ErrorKind::usage, "--input is required");
    const Json j = load_json_file(a->input);
    SweepReport r;
    Stamp stamp;
    try {
      r = sweep_report_from_json(j);
      stamp = stamp_from_json(j.at("stamp"));
    } catch (const Json::exception& e) {
      fail(ErrorKind::config, a->input + ": " + e.what());
    }
    check_distinct({a->input}, {with_ext(a->out, ".json"), with_ext(a->out, ".csv"), with_ext(a->out, ".svg")});
    ensure_parent(a->out);
    emit_report(r, stamp, a->out, {true, true, a->svg}, a->x_label, j.value("config", Json(nullptr)));
    print_sweep(r);
  };
}

void add_reproduce(Registry& reg, CLI::App& root) {
  struct A {
    PipelineConfig p;
    std::string out;
    bool quiet = false;
  };
  auto a = std::make_shared<A>();
  Command& c = make(reg, root, "reproduce-all", "Run the whole pipeline into an empty directory");
  auto& s = *c.settings;
  s.add("--seed", "seed", a->p.seed, "Global seed");
  s.add("--steps", "train_steps", a->p.train_steps, "Training steps");
  s.add("--batch", "batch_size", a->p.batch_size, "Training batch size");
  s.add("--lr", "learning_rate", a->p.learning_rate, "Training learning rate");
  s.add("--planted-layer", "planted_layer", a->p.planted_layer, "Layer where the mechanism is planted and probed");
  s.add("--interchange-fraction", "interchange_fraction", a->p.interchange_fraction, "Interchange share per batch");
  s.add("--eval-pairs", "eval_pairs", a->p.eval_pairs, "Pairs for the format evaluation");
  s.add("--layer-trials", "layer_trials", a->p.layer_trials, "Trials per layer-sweep point");
  s.add("--head-trials", "head_trials", a->p.head_trials, "Trials per head subset");
  s.add("--fraction-trials", "fraction_trials", a->p.fraction_trials, "Trials per lambda");
  s.add("--bidirectional-trials", "bidirectional_trials", a->p.bidirectional_trials, "Trials per direction");
  s.add("--sae-pairs", "sae_pairs", a->p.sae_pairs, "Pairs collected for SAE training");
  s.add("--sae-expansion", "sae_expansion", a->p.sae_expansion, "SAE expansion factor");
  s.add("--sae-k", "sae_k", a->p.sae_k, "SAE active features");
  s.add("--sae-steps", "sae_steps", a->p.sae_steps, "SAE training steps");
  s.add("--top-n", "top_n", a->p.top_n, "Top feature set size");
  c.app->add_option("--out", a->out, "Output directory (must be empty or absent)")->required();
  c.app->add_flag("-q,--quiet", a->quiet, "No stage progress on stderr");
  c.run = [a](const Json&) {
    StageLog log;
    if (!a->quiet) log = [](const std::string& stage, double s) { std::cerr << "stage " << stage << " done " << fixed(s, 1) << "s\n"; };
    const PipelineResult r = reproduce_all(a->out, a->p, log);
    for (const auto& f : r.files) std::cout << (fs::path(a->out) / f).string() << "\n";
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fdlab: format-dependent bug lab on a toy transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Registry reg;
  add_train(reg, app);
  add_eval(reg, app);
  add_trace(reg, app);
  add_patch(reg, app);
  add_sweeps(reg, app);
  add_lens(reg, app);
  add_sae(reg, app);
  add_report(reg, app);
  add_reproduce(reg, app);

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    const auto subs = app.get_subcommands([](CLI::App*) { return true; });
    if (std::none_of(subs.begin(), subs.end(), [&](CLI::App* s) { return s->get_name() == name; })) {
      print_error("usage", "unknown subcommand '" + name + "'");
      std::cerr << app.help();
      return kExitUsage;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    std::cerr << app.help();
    return kExitUsage;
  }

  for (const auto& c : reg) {
    if (!c->app->parsed()) continue;
    try {
      c->run(c->settings->resolve());
      return kExitOk;
    } catch (const Error& e) {
      print_error(to_string(e.kind()), e.what());
      return exit_code(e.kind());
    } catch (const std::exception& e) {
      print_error("runtime", e.what());
      return kExitRuntime;
    }
  }
  return kExitUsage;
}
