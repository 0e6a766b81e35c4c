#pragma once

// Experiment orchestration shared by the command-line tool and the
// acceptance suite: configuration, corpus/model/probe pipelines, batched
// generation, evaluation reports and ablations.
//
// Configuration is a flat `key = value` file ('#' starts a comment).
// Precedence, lowest to highest: built-in defaults, the config file, command
// line flags.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "smitin/corpus.hpp"
#include "smitin/intervention.hpp"
#include "smitin/mathkernel.hpp"
#include "smitin/metrics.hpp"
#include "smitin/model.hpp"
#include "smitin/probes.hpp"

namespace smitin {

namespace fs = std::filesystem;

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t"), e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

inline std::string join_list(const std::vector<std::string>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}

struct ExperimentConfig {
  // paths; empty means derived from `out`
  std::string out = "smitin_out";
  std::string checkpoint;
  std::string bank_dir;
  std::string trace_dir;

  // synthetic world and LM corpus
  std::uint64_t world_seed = 7;
  std::size_t lm_sequences = 4000;
  std::uint64_t corpus_seed = 11;
  std::size_t heldout_sequences = 200;
  std::uint64_t heldout_seed = 12;

  ModelConfig model;
  TrainHyper train;

  // probing
  std::size_t n_pairs = 1000;
  std::uint64_t probe_seed = 100;
  ProbeHyper probe;

  // intervention plan
  Mode mode = Mode::smitin;
  double alpha = 5.0;
  std::size_t sparse_s = 5;
  double power_c = 3.0;
  std::size_t top_k = 16;
  Weighting weighting = Weighting::soft;
  DirectionKind direction = DirectionKind::mass_mean;
  std::vector<std::string> traits;  // empty = every trait of the world
  bool remove = false;
  bool joint = false;  // all traits in one plan instead of one plan per trait
  std::vector<Mode> modes{Mode::none, Mode::original_iti, Mode::weight_decay, Mode::smitin};

  // generation
  std::size_t prefix_length = 16;
  std::size_t gen_length = 48;
  std::size_t n_generations = 100;
  std::uint64_t seed = 1;
  double temperature = 1.0;
  std::string ffd_reference = "unconditioned";  // or "heldout"
  bool reuse_traces = false;

  // ablation
  std::string axis = "alpha";
  std::vector<std::string> ablate_values;  // empty = axis defaults

  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());

  std::string checkpoint_path() const { return checkpoint.empty() ? (fs::path(out) / "model.stfm").string() : checkpoint; }
  std::string bank_path() const { return bank_dir.empty() ? (fs::path(out) / "probes").string() : bank_dir; }
  std::string trace_path() const { return trace_dir.empty() ? (fs::path(out) / "traces").string() : trace_dir; }

  void set(const std::string& key, const std::string& value);
  /// Canonical `key=value` listing of every setting that influences outputs.
  std::string canonical() const;
  /// First 16 hex digits of SHA-256 over canonical().
  std::string hash() const { return to_hex(sha256(canonical())).substr(0, 16); }
  void validate() const;
};

namespace detail {

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw Error("config_error", "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument("bad");
    return x;
  } catch (const std::exception&) {
    throw Error("config_error", "key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Error("config_error", "key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace detail

inline Weighting parse_weighting(const std::string& s) {
  if (s == "topk" || s == "top_k") return Weighting::top_k;
  if (s == "soft") return Weighting::soft;
  throw Error("invalid_argument", "unknown weighting '" + s + "' (topk|soft)");
}

inline std::string to_string(Weighting w) { return w == Weighting::soft ? "soft" : "topk"; }

inline DirectionKind parse_direction(const std::string& s) {
  if (s == "logistic") return DirectionKind::logistic;
  if (s == "massmean" || s == "mass_mean") return DirectionKind::mass_mean;
  throw Error("invalid_argument", "unknown direction '" + s + "' (logistic|massmean)");
}

inline std::string to_string(DirectionKind d) { return d == DirectionKind::logistic ? "logistic" : "massmean"; }

inline void ExperimentConfig::set(const std::string& key, const std::string& v) {
  using detail::parse_bool, detail::parse_f64, detail::parse_u64;
  if (key == "out") out = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "bank_dir") bank_dir = v;
  else if (key == "trace_dir") trace_dir = v;
  else if (key == "world_seed") world_seed = parse_u64(key, v);
  else if (key == "lm_sequences") lm_sequences = parse_u64(key, v);
  else if (key == "corpus_seed") corpus_seed = parse_u64(key, v);
  else if (key == "heldout_sequences") heldout_sequences = parse_u64(key, v);
  else if (key == "heldout_seed") heldout_seed = parse_u64(key, v);
  else if (key == "layers") model.num_layers = parse_u64(key, v);
  else if (key == "heads") model.num_heads = parse_u64(key, v);
  else if (key == "head_dim") model.head_dim = parse_u64(key, v);
  else if (key == "context") model.max_context = parse_u64(key, v);
  else if (key == "train_steps") train.steps = parse_u64(key, v);
  else if (key == "train_lr") train.lr = parse_f64(key, v);
  else if (key == "train_batch") train.batch = parse_u64(key, v);
  else if (key == "train_seed") train.seed = parse_u64(key, v);
  else if (key == "train_warmup") train.warmup = parse_u64(key, v);
  else if (key == "log_every") train.log_every = parse_u64(key, v);
  else if (key == "n_pairs") n_pairs = parse_u64(key, v);
  else if (key == "probe_seed") probe_seed = parse_u64(key, v);
  else if (key == "probe_lr") probe.lr = parse_f64(key, v);
  else if (key == "probe_epochs") probe.epochs = parse_u64(key, v);
  else if (key == "mode") mode = parse_mode(v);
  else if (key == "alpha") alpha = parse_f64(key, v);
  else if (key == "sparse_s") sparse_s = parse_u64(key, v);
  else if (key == "power_c") power_c = parse_f64(key, v);
  else if (key == "top_k") top_k = parse_u64(key, v);
  else if (key == "weighting") weighting = parse_weighting(v);
  else if (key == "direction") direction = parse_direction(v);
  else if (key == "traits") traits = split_list(v);
  else if (key == "remove") remove = parse_bool(key, v);
  else if (key == "joint") joint = parse_bool(key, v);
  else if (key == "modes") {
    modes.clear();
    for (const auto& m : split_list(v)) modes.push_back(parse_mode(m));
  } else if (key == "prefix_length") prefix_length = parse_u64(key, v);
  else if (key == "gen_length") gen_length = parse_u64(key, v);
  else if (key == "n_generations") n_generations = parse_u64(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else if (key == "temperature") temperature = parse_f64(key, v);
  else if (key == "ffd_reference") ffd_reference = v;
  else if (key == "reuse_traces") reuse_traces = parse_bool(key, v);
  else if (key == "axis") axis = v;
  else if (key == "ablate_values") ablate_values = split_list(v);
  else if (key == "threads") threads = std::max<std::uint64_t>(1, parse_u64(key, v));
  else throw Error("config_error", "unknown key '" + key + "'");
}

inline std::string ExperimentConfig::canonical() const {
  std::map<std::string, std::string> kv;
  auto num = [](double x) { return format_real(x); };
  kv["world_seed"] = std::to_string(world_seed);
  kv["lm_sequences"] = std::to_string(lm_sequences);
  kv["corpus_seed"] = std::to_string(corpus_seed);
  kv["heldout_sequences"] = std::to_string(heldout_sequences);
  kv["heldout_seed"] = std::to_string(heldout_seed);
  kv["layers"] = std::to_string(model.num_layers);
  kv["heads"] = std::to_string(model.num_heads);
  kv["head_dim"] = std::to_string(model.head_dim);
  kv["context"] = std::to_string(model.max_context);
  kv["train_steps"] = std::to_string(train.steps);
  kv["train_lr"] = num(train.lr);
  kv["train_batch"] = std::to_string(train.batch);
  kv["train_seed"] = std::to_string(train.seed);
  kv["train_warmup"] = std::to_string(train.warmup);
  kv["log_every"] = std::to_string(train.log_every);
  kv["n_pairs"] = std::to_string(n_pairs);
  kv["probe_seed"] = std::to_string(probe_seed);
  kv["probe_lr"] = num(probe.lr);
  kv["probe_epochs"] = std::to_string(probe.epochs);
  kv["mode"] = to_string(mode);
  kv["alpha"] = num(alpha);
  kv["sparse_s"] = std::to_string(sparse_s);
  kv["power_c"] = num(power_c);
  kv["top_k"] = std::to_string(top_k);
  kv["weighting"] = to_string(weighting);
  kv["direction"] = to_string(direction);
  kv["traits"] = join_list(traits);
  kv["remove"] = remove ? "true" : "false";
  kv["joint"] = joint ? "true" : "false";
  std::vector<std::string> ms;
  for (Mode m : modes) ms.push_back(to_string(m));
  kv["modes"] = join_list(ms);
  kv["prefix_length"] = std::to_string(prefix_length);
  kv["gen_length"] = std::to_string(gen_length);
  kv["n_generations"] = std::to_string(n_generations);
  kv["seed"] = std::to_string(seed);
  kv["temperature"] = num(temperature);
  kv["ffd_reference"] = ffd_reference;
  kv["axis"] = axis;
  kv["ablate_values"] = join_list(ablate_values);
  std::string s;
  for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
  return s;
}

inline void ExperimentConfig::validate() const {
  model.validate();
  if (n_generations < 1) throw Error("config_error", "n_generations must be >= 1");
  if (sparse_s < 1) throw Error("config_error", "sparse_s must be >= 1");
  if (top_k < 1 || top_k > model.num_cells())
    throw Error("config_error", "top_k must be in [1, " + std::to_string(model.num_cells()) + "]");
  if (prefix_length < 1) throw Error("config_error", "prefix_length must be >= 1");
  if (gen_length < 1) throw Error("config_error", "gen_length must be >= 1");
  if (prefix_length + gen_length > model.max_context)
    throw Error("config_error", "prefix_length + gen_length exceeds the model context");
  if (ffd_reference != "unconditioned" && ffd_reference != "heldout")
    throw Error("config_error", "ffd_reference must be unconditioned or heldout");
  if (modes.empty()) throw Error("config_error", "modes must not be empty");
}

/// Applies `key = value` lines from `text` onto `cfg`.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("config_error", "line " + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig cfg;
  if (!fs::exists(path)) throw Error("missing_file", "config file not found: " + path);
  apply_config_text(cfg, io::read_file(path));
  return cfg;
}

/// Runs f(i) for i in [0, n) on `threads` workers; results are stored by
/// index so the output does not depend on scheduling. The first exception
/// thrown by any task is rethrown.
template <class F>
auto parallel_map(std::size_t n, std::size_t threads, F&& f) -> std::vector<decltype(f(std::size_t{0}))> {
  using R = decltype(f(std::size_t{0}));
  std::vector<R> out(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        out[i] = f(i);
      } catch (...) {
        std::lock_guard lk(err_mu);
        if (!err) err = std::current_exception();
        next = n;
      }
    }
  };
  const std::size_t nt = std::min(std::max<std::size_t>(1, threads), std::max<std::size_t>(1, n));
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (err) std::rethrow_exception(err);
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file(path.string(), text);
}

// ---------------------------------------------------------------------------
// Pipelines

inline WorldSpec world_of(const ExperimentConfig& cfg) {
  WorldSpec w = default_world(cfg.world_seed);
  w.vocab_size = cfg.model.vocab_size;
  w.validate();
  return w;
}

/// Trait indices selected by the config (all traits when unset).
inline std::vector<std::size_t> selected_traits(const ExperimentConfig& cfg, const WorldSpec& world) {
  std::vector<std::size_t> out;
  if (cfg.traits.empty()) {
    for (std::size_t i = 0; i < world.traits.size(); ++i) out.push_back(i);
  } else {
    for (const auto& name : cfg.traits) out.push_back(world.trait_index(name));
  }
  return out;
}

inline std::uint64_t probe_split_seed(const ExperimentConfig& cfg, std::size_t trait) {
  return cfg.probe_seed + trait;
}

struct CorpusFiles {
  std::vector<std::string> paths;
};

/// Writes the LM corpus, the held-out corpus and the per-trait probing
/// splits under <out>/corpus.
inline CorpusFiles cmd_gen_corpus(const ExperimentConfig& cfg) {
  const WorldSpec world = world_of(cfg);
  const fs::path dir = fs::path(cfg.out) / "corpus";
  CorpusFiles files;
  auto emit = [&](const std::string& name, const std::vector<LabeledSequence>& seqs) {
    const fs::path p = dir / name;
    write_text(p, format_dataset(world, seqs));
    files.paths.push_back(p.string());
  };
  emit("lm_train.txt", build_lm_corpus(world, cfg.lm_sequences, cfg.corpus_seed));
  emit("lm_heldout.txt", build_lm_corpus(world, cfg.heldout_sequences, cfg.heldout_seed));
  for (std::size_t t : selected_traits(cfg, world)) {
    const auto ds = build_dataset(world, t, cfg.n_pairs, probe_split_seed(cfg, t));
    emit("probe_" + world.traits[t].name + "_train.txt", ds.train);
    emit("probe_" + world.traits[t].name + "_test.txt", ds.test);
  }
  return files;
}

struct TrainOutcome {
  TrainResult result;
  double heldout_loss = 0.0;
  std::string loss_csv;
};

inline std::string loss_curve_csv(const TrainResult& r, const std::string& config_hash) {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << '\n' << "step,loss\n";
  for (const auto& p : r.curve) os << p.step << ',' << format_real(p.loss) << '\n';
  return os.str();
}

/// Trains the model, saves the checkpoint and the loss curve CSV.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg) {
  const WorldSpec world = world_of(cfg);
  TrainOutcome o{train_model(token_lists(build_lm_corpus(world, cfg.lm_sequences, cfg.corpus_seed)), cfg.model,
                             cfg.train), 0.0, {}};
  quantize_to_f32(o.result.model);
  o.heldout_loss =
      evaluate_loss(o.result.model, token_lists(build_lm_corpus(world, cfg.heldout_sequences, cfg.heldout_seed)));
  o.loss_csv = loss_curve_csv(o.result, cfg.hash());
  if (const fs::path cp(cfg.checkpoint_path()); cp.has_parent_path()) fs::create_directories(cp.parent_path());
  save_checkpoint(o.result.model, cfg.checkpoint_path());
  write_text(fs::path(cfg.out) / "loss.csv", o.loss_csv);
  return o;
}

inline TransformerModel load_model(const ExperimentConfig& cfg) {
  const std::string p = cfg.checkpoint_path();
  if (!fs::exists(p)) throw Error("missing_file", "checkpoint not found: " + p);
  return load_checkpoint(p);
}

inline Digest model_digest(const TransformerModel& model) { return sha256(serialize_checkpoint(model)); }

struct TraitBanks {
  std::shared_ptr<const ProbeBank> logistic;
  std::shared_ptr<const ProbeBank> mass_mean;
};

inline std::string bank_file(const ExperimentConfig& cfg, const std::string& trait, DirectionKind kind) {
  return (fs::path(cfg.bank_path()) / (trait + (kind == DirectionKind::mass_mean ? ".massmean" : "") + ".smpb"))
      .string();
}

/// Activations of one trait's probing splits.
struct ProbeFeatures {
  std::size_t trait = 0;
  std::uint64_t split_seed = 0;
  FeatureTable train, test;
};

inline ProbeFeatures probe_features(const ExperimentConfig& cfg, const TransformerModel& model,
                                    const WorldSpec& world, std::size_t trait) {
  const std::uint64_t split_seed = probe_split_seed(cfg, trait);
  const DatasetSplit ds = build_dataset(world, trait, cfg.n_pairs, split_seed);
  return {trait, split_seed, extract_activations(model, ds.train, trait), extract_activations(model, ds.test, trait)};
}

/// The first `rows` rows of every cell.
inline FeatureTable head_rows(const FeatureTable& ft, std::size_t rows) {
  FeatureTable out{ft.num_layers, ft.num_heads, ft.head_dim, {}};
  for (const auto& c : ft.cells) {
    const std::size_t n = std::min(rows, c.size());
    out.cells.push_back({c.dim, std::vector<double>(c.rows.begin(), c.rows.begin() + std::ptrdiff_t(n * c.dim)),
                         std::vector<int>(c.labels.begin(), c.labels.begin() + std::ptrdiff_t(n))});
  }
  return out;
}

/// Probe banks trained on the first `n_train` pairs of the training split
/// (all of it when 0) and scored on the full test split. Training pairs are
/// consecutive (positive, negative) rows, so any prefix stays balanced.
inline TraitBanks banks_from_features(const ExperimentConfig& cfg, const TransformerModel& model,
                                      const WorldSpec& world, const ProbeFeatures& f, std::size_t n_train = 0) {
  const FeatureTable tr = n_train ? head_rows(f.train, 2 * n_train) : f.train;
  ProbeBank mm;
  ProbeBank lg = train_bank_from_features(tr, f.test, world.traits[f.trait].name, cfg.probe, model_digest(model),
                                          f.split_seed, &mm);
  return {std::make_shared<const ProbeBank>(std::move(lg)), std::make_shared<const ProbeBank>(std::move(mm))};
}

inline TraitBanks train_trait_banks(const ExperimentConfig& cfg, const TransformerModel& model,
                                    const WorldSpec& world, std::size_t trait) {
  return banks_from_features(cfg, model, world, probe_features(cfg, model, world, trait));
}

struct ProbeOutcome {
  std::vector<std::string> traits;
  std::vector<AccuracyMap> maps;
  std::vector<TraitBanks> banks;
};

/// Trains and saves probe banks plus accuracy-map CSVs for the selected traits.
inline ProbeOutcome cmd_probe(const ExperimentConfig& cfg) {
  const WorldSpec world = world_of(cfg);
  const TransformerModel model = load_model(cfg);
  const auto traits = selected_traits(cfg, world);
  ProbeOutcome o;
  o.banks = parallel_map(traits.size(), cfg.threads,
                         [&](std::size_t i) { return train_trait_banks(cfg, model, world, traits[i]); });
  const std::string h = cfg.hash();
  fs::create_directories(cfg.bank_path());
  for (std::size_t i = 0; i < traits.size(); ++i) {
    const std::string& name = world.traits[traits[i]].name;
    save_bank(*o.banks[i].logistic, bank_file(cfg, name, DirectionKind::logistic));
    save_bank(*o.banks[i].mass_mean, bank_file(cfg, name, DirectionKind::mass_mean));
    const AccuracyMap m = accuracy_map(*o.banks[i].logistic, cfg.top_k);
    write_text(fs::path(cfg.bank_path()) / (name + "_accuracy.csv"),
               "# config_hash=" + h + "\n# summary=" + m.summary() + "\n" + m.csv());
    o.traits.push_back(name);
    o.maps.push_back(m);
  }
  return o;
}

inline TraitBanks load_trait_banks(const ExperimentConfig& cfg, const std::string& trait) {
  TraitBanks b;
  for (DirectionKind k : {DirectionKind::logistic, DirectionKind::mass_mean}) {
    const std::string p = bank_file(cfg, trait, k);
    if (!fs::exists(p)) throw Error("missing_file", "probe bank not found: " + p);
    auto bank = load_bank(p);
    bank.direction = k;
    (k == DirectionKind::logistic ? b.logistic : b.mass_mean) = std::make_shared<const ProbeBank>(std::move(bank));
  }
  return b;
}

/// Plan for `mode` over the given banks with every other setting from `cfg`.
inline InterventionPlan make_plan(const ExperimentConfig& cfg, Mode mode, const std::vector<TraitBanks>& banks) {
  InterventionPlan p;
  p.mode = mode;
  p.alpha = cfg.remove ? -std::fabs(cfg.alpha) : cfg.alpha;
  p.sparse_step = cfg.sparse_s;
  p.power_c = cfg.power_c;
  p.monitor_k = cfg.top_k;
  p.weighting = cfg.weighting;
  p.weight_top_k = cfg.top_k;
  p.removal = cfg.remove;
  for (const auto& b : banks)
    p.traits.push_back({b.logistic, cfg.direction == DirectionKind::mass_mean ? b.mass_mean : nullptr});
  return p;
}

/// Prefix for generation i: the opening tokens of a fresh corpus sequence in
/// which the target traits are absent (present when removing) and every
/// other trait is active with probability 1/2.
inline std::vector<Token> sample_prefix(const ExperimentConfig& cfg, const WorldSpec& world,
                                        const std::vector<std::size_t>& targets, std::size_t i) {
  Rng r = Rng(cfg.seed).substream(2 * i);
  std::vector<bool> mask = random_mask(world.traits.size(), r);
  for (std::size_t t : targets) mask[t] = cfg.remove;
  auto tokens = gen_sequence(world, mask, std::max(world.sequence_length, cfg.prefix_length), r).tokens;
  tokens.resize(cfg.prefix_length);
  return tokens;
}

inline std::uint64_t sample_seed(const ExperimentConfig& cfg, std::size_t i) {
  return Rng(cfg.seed).substream(2 * i + 1).next_u64();
}

/// n_generations continuations of the sampled prefixes under `plan`.
inline std::vector<GenerationTrace> run_generations(const ExperimentConfig& cfg, const TransformerModel& model,
                                                    const WorldSpec& world, const InterventionPlan& plan,
                                                    const std::vector<std::size_t>& targets) {
  return parallel_map(cfg.n_generations, cfg.threads, [&](std::size_t i) {
    const auto prefix = sample_prefix(cfg, world, targets, i);
    return generate(model, plan, prefix, cfg.gen_length, cfg.temperature, sample_seed(cfg, i));
  });
}

inline fs::path trace_file(const fs::path& dir, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "gen_%04zu.csv", i);
  return dir / buf;
}

inline void write_traces(const fs::path& dir, const std::vector<GenerationTrace>& traces, const std::string& hash) {
  fs::create_directories(dir);
  std::ostringstream tokens;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    write_text(trace_file(dir, i), format_trace_csv(traces[i], hash));
    const auto all = traces[i].all_tokens();
    for (std::size_t k = 0; k < all.size(); ++k) tokens << (k ? " " : "") << all[k];
    tokens << '\n';
  }
  write_text(dir / "tokens.txt", tokens.str());
}

inline std::vector<GenerationTrace> read_traces(const fs::path& dir, std::size_t n) {
  std::vector<GenerationTrace> out;
  for (std::size_t i = 0; i < n; ++i) {
    const fs::path p = trace_file(dir, i);
    if (!fs::exists(p)) throw Error("missing_file", "trace not found: " + p.string());
    out.push_back(parse_trace_csv(io::read_file(p.string())));
  }
  return out;
}

/// Banks for the selected traits, loaded from disk.
inline std::vector<TraitBanks> load_selected_banks(const ExperimentConfig& cfg, const WorldSpec& world) {
  std::vector<TraitBanks> out;
  for (std::size_t t : selected_traits(cfg, world)) out.push_back(load_trait_banks(cfg, world.traits[t].name));
  return out;
}

/// One plan (cfg.mode) over the selected traits, traces under trace_dir.
inline std::vector<GenerationTrace> cmd_generate(const ExperimentConfig& cfg) {
  cfg.validate();
  const WorldSpec world = world_of(cfg);
  const TransformerModel model = load_model(cfg);
  const auto targets = selected_traits(cfg, world);
  const InterventionPlan plan = make_plan(cfg, cfg.mode, load_selected_banks(cfg, world));
  auto traces = run_generations(cfg, model, world, plan, targets);
  write_traces(cfg.trace_path(), traces, cfg.hash());
  return traces;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Embeddings of the FFD reference set: unconditioned continuations of the
/// same prefixes, or the tail of held-out corpus sequences.
inline std::vector<Vector> reference_embeddings(const ExperimentConfig& cfg, const TransformerModel& model,
                                                const WorldSpec& world,
                                                const std::vector<GenerationTrace>* unconditioned) {
  std::vector<Vector> out;
  if (cfg.ffd_reference == "heldout") {
    for (const auto& s : build_lm_corpus(world, cfg.heldout_sequences, cfg.heldout_seed)) {
      const std::size_t n = std::min(cfg.gen_length, s.tokens.size());
      out.push_back(embed(model, std::span<const Token>(s.tokens).last(n)));
    }
  } else {
    if (!unconditioned) throw Error("invalid_argument", "reference_embeddings: unconditioned traces required");
    for (const auto& tr : *unconditioned) out.push_back(embed(model, tr.generated()));
  }
  return out;
}

/// Ground-truth presence[song][trait slot] for a batch of joint traces.
inline std::vector<std::vector<double>> presence_table(const std::vector<GenerationTrace>& traces,
                                                       const WorldSpec& world,
                                                       const std::vector<std::size_t>& targets) {
  std::vector<std::vector<double>> p;
  for (const auto& tr : traces) {
    const auto g = tr.generated();
    std::vector<double> row;
    for (std::size_t t : targets) row.push_back(trait_oracle(g, world.traits[t]));
    p.push_back(row);
  }
  return p;
}

struct EvalOutcome {
  EvalReport report;
  std::string csv;
};

/// Report over the configured matrix of modes: one row per (trait, mode).
/// Traces are written under trace_dir/<group>/<mode>/ and the report is
/// computed from the files as written, so re-evaluating stored traces
/// (reuse_traces = true) reproduces it exactly.
inline EvalOutcome cmd_eval(const ExperimentConfig& cfg) {
  cfg.validate();
  const WorldSpec world = world_of(cfg);
  const TransformerModel model = load_model(cfg);
  const auto all_targets = selected_traits(cfg, world);
  const std::string h = cfg.hash();

  std::vector<std::vector<std::size_t>> groups;
  if (cfg.joint)
    groups.push_back(all_targets);
  else
    for (std::size_t t : all_targets) groups.push_back({t});

  EvalReport report;
  std::ostringstream footer;
  for (const auto& group : groups) {
    std::vector<TraitBanks> banks;
    std::string gname;
    for (std::size_t t : group) {
      banks.push_back(load_trait_banks(cfg, world.traits[t].name));
      gname += (gname.empty() ? "" : "+") + world.traits[t].name;
    }
    const fs::path gdir = fs::path(cfg.trace_path()) / gname;
    auto traces_for = [&](Mode m) {
      const fs::path dir = gdir / to_string(m);
      if (!cfg.reuse_traces)
        write_traces(dir, run_generations(cfg, model, world, make_plan(cfg, m, banks), group), h);
      return read_traces(dir, cfg.n_generations);
    };
    std::map<Mode, std::vector<GenerationTrace>> by_mode;
    for (Mode m : cfg.modes) by_mode[m] = traces_for(m);
    if (cfg.ffd_reference == "unconditioned" && !by_mode.count(Mode::none)) by_mode[Mode::none] = traces_for(Mode::none);
    const auto reference = reference_embeddings(cfg, model, world, &by_mode.at(Mode::none));

    for (Mode m : cfg.modes) {
      const auto& traces = by_mode.at(m);
      for (std::size_t k = 0; k < group.size(); ++k)
        report.rows.push_back(evaluate_traces(model, traces, k, world.traits[group[k]], to_string(m), reference,
                                              cfg.remove));
      if (group.size() > 1)
        footer << (footer.tellp() ? "; " : "") << gname << ' ' << to_string(m) << " simultaneous="
               << format_real(simultaneous_success(presence_table(traces, world, group)));
    }
  }
  if (footer.tellp()) report.footer = footer.str();
  EvalOutcome o{report, report.csv(h)};
  write_text(fs::path(cfg.out) / "report.csv", o.csv);
  return o;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string axis, value, trait;
  double max_acc = 0.0, tau = 0.0;
  double success_rate = 0.0;       // internal, monitored by the plan's probes
  double full_probe_success = 0.0; // read out after the fact by full-data probes
  double ground_truth_rate = 0.0, ffd = 0.0, similarity = 0.0, mass = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& hash,
                                const std::string& footer) {
  std::ostringstream os;
  os << "# config_hash=" << hash << '\n';
  os << "axis,value,trait,max_acc,tau,success_rate,full_probe_success,ground_truth_rate,ffd,similarity,mass\n";
  for (const auto& r : rows)
    os << r.axis << ',' << r.value << ',' << r.trait << ',' << format_real(r.max_acc) << ',' << format_real(r.tau)
       << ',' << format_real(r.success_rate) << ',' << format_real(r.full_probe_success) << ','
       << format_real(r.ground_truth_rate) << ',' << format_real(r.ffd) << ',' << format_real(r.similarity)
       << ',' << format_real(r.mass) << '\n';
  if (!footer.empty()) os << "# " << footer << '\n';
  return os.str();
}

inline std::vector<std::string> default_axis_values(const std::string& axis, const ModelConfig& c) {
  if (axis == "num_data") return {"10", "100", "500", "1000"};
  if (axis == "top_k") {
    std::vector<std::string> v;
    for (std::size_t k = 1; k <= c.num_cells(); k *= 2) v.push_back(std::to_string(k));
    v.push_back("soft");
    return v;
  }
  if (axis == "alpha") return {"1", "5", "10"};
  if (axis == "sparse_s") return {"1", "5", "10", "20"};
  throw Error("invalid_argument", "unknown ablation axis '" + axis + "' (num_data|top_k|alpha|sparse_s)");
}

struct AblationOutcome {
  std::vector<AblationRow> rows;
  std::string csv;
};

/// Varies one setting over its axis values, all others held at the config.
/// top_k values are capped at L*H; the extra value "soft" selects soft
/// weighting over all heads. num_data values above n_pairs are rejected.
inline AblationOutcome cmd_ablate(const ExperimentConfig& cfg) {
  cfg.validate();
  const WorldSpec world = world_of(cfg);
  const TransformerModel model = load_model(cfg);
  const auto targets = selected_traits(cfg, world);
  const auto values = cfg.ablate_values.empty() ? default_axis_values(cfg.axis, cfg.model) : cfg.ablate_values;
  default_axis_values(cfg.axis, cfg.model);  // rejects unknown axes
  const std::string h = cfg.hash();

  std::vector<AblationRow> rows;
  for (std::size_t t : targets) {
    const TraitBanks full = load_trait_banks(cfg, world.traits[t].name);
    std::optional<ProbeFeatures> features;
    if (cfg.axis == "num_data") features = probe_features(cfg, model, world, t);
    const HeadSet full_heads = top_k_heads(*full.logistic, cfg.top_k);
    const double full_tau = threshold_tau(*full.logistic, cfg.top_k);

    ExperimentConfig base = cfg;
    base.mode = Mode::none;
    const auto unconditioned = run_generations(base, model, world, make_plan(base, Mode::none, {full}), {t});
    const auto reference = reference_embeddings(cfg, model, world, &unconditioned);

    for (const auto& v : values) {
      ExperimentConfig c = cfg;
      c.mode = Mode::smitin;
      TraitBanks banks = full;
      if (cfg.axis == "num_data") {
        const auto n = detail::parse_u64("num_data", v);
        if (n < 1 || n > cfg.n_pairs)
          throw Error("invalid_argument", "num_data value " + v + " outside [1, n_pairs]");
        banks = banks_from_features(cfg, model, world, *features, n);
      } else if (cfg.axis == "top_k") {
        if (v == "soft") {
          c.weighting = Weighting::soft;
        } else {
          const auto k = detail::parse_u64("top_k", v);
          if (k < 1 || k > cfg.model.num_cells())
            throw Error("invalid_argument", "top_k value " + v + " outside [1, L*H]");
          c.weighting = Weighting::top_k;
          c.top_k = k;
        }
      } else if (cfg.axis == "alpha") {
        c.alpha = detail::parse_f64("alpha", v);
      } else if (cfg.axis == "sparse_s") {
        c.sparse_s = detail::parse_u64("sparse_s", v);
        if (c.sparse_s < 1) throw Error("invalid_argument", "sparse_s value must be >= 1");
      }
      const auto traces = run_generations(c, model, world, make_plan(c, Mode::smitin, {banks}), {t});
      if (cfg.axis == "sparse_s")
        write_traces(fs::path(cfg.out) / "ablate_sparse_s" / world.traits[t].name / ("s_" + v), traces, h);
      const EvalRow er = evaluate_traces(model, traces, 0, world.traits[t], "smitin", reference, cfg.remove);
      AblationRow r;
      r.axis = cfg.axis;
      r.value = v;
      r.trait = world.traits[t].name;
      const AccuracyMap am = accuracy_map(*banks.logistic, c.top_k);
      r.max_acc = am.max_acc;
      r.tau = am.tau;
      r.success_rate = er.success_rate;
      double fps = 0.0;
      for (const auto& tr : traces)
        fps += recognizer_success_rate(model, tr, *full.logistic, full_heads, full_tau, cfg.remove);
      r.full_probe_success = fps / double(traces.size());
      r.ground_truth_rate = er.ground_truth_rate;
      r.ffd = er.ffd;
      r.similarity = er.similarity;
      r.mass = er.mass;
      rows.push_back(r);
    }
  }
  const std::string footer =
      cfg.axis == "num_data" ? "num_data full set = n_pairs = " + std::to_string(cfg.n_pairs) : std::string();
  AblationOutcome o{rows, ablation_csv(rows, h, footer)};
  write_text(fs::path(cfg.out) / ("ablate_" + cfg.axis + ".csv"), o.csv);
  return o;
}

/// Per-step plotting CSV for one trace: the monitored median against tau.
inline std::string trace_plot_csv(const GenerationTrace& tr, const std::string& hash) {
  std::ostringstream os;
  os << "# config_hash=" << hash << '\n' << "step,trait,c_median,c_mean,c_std,tau,intervened,mass\n";
  for (const auto& s : tr.steps)
    for (std::size_t k = 0; k < tr.trait_names.size(); ++k) {
      const auto& t = s.traits[k];
      os << s.step << ',' << tr.trait_names[k] << ',' << format_real(t.c_median) << ',' << format_real(t.c_mean)
         << ',' << format_real(t.c_std) << ',' << format_real(tr.taus[k]) << ',' << (s.intervened ? 1 : 0) << ','
         << format_real(t.mass) << '\n';
    }
  return os.str();
}

}  // namespace smitin
