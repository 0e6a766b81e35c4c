#pragma once

// Synthetic sequence world: an order-1 Markov background over the
// non-motif tokens plus binary "traits", each of which inserts one of its
// motif tokens roughly every `period` positions while active. The
// ground-truth oracle decides presence from token counts alone.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "smitin/mathkernel.hpp"
#include "smitin/model.hpp"

namespace smitin {

struct TraitSpec {
  std::string name;
  std::vector<Token> motif_tokens;
  std::size_t period = 8;
  std::size_t jitter = 1;
  std::size_t window = 32;
  double presence_ratio = 0.5;

  /// Minimum motif count for a window of `len` tokens.
  double threshold(std::size_t len) const {
    return presence_ratio * double(len) / double(period);
  }
};

/// Order-1 Markov chain over `support` tokens. transitions[i] is the
/// distribution over support indices given current support index i.
struct BackgroundSpec {
  std::vector<Token> support;
  std::vector<std::vector<double>> transitions;
  std::vector<double> initial;

  std::size_t sample_index(const std::vector<double>& dist, Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
      acc += dist[i];
      if (u < acc) return i;
    }
    return dist.size() - 1;
  }
};

struct WorldSpec {
  BackgroundSpec background;
  std::vector<TraitSpec> traits;
  std::size_t vocab_size = 64;
  std::size_t sequence_length = 64;

  std::size_t trait_index(const std::string& name) const {
    for (std::size_t i = 0; i < traits.size(); ++i)
      if (traits[i].name == name) return i;
    throw Error("unknown_trait", "unknown trait '" + name + "'");
  }

  void validate() const {
    std::vector<int> owner(vocab_size, -1);
    for (std::size_t i = 0; i < traits.size(); ++i) {
      const auto& t = traits[i];
      if (t.period == 0 || t.period > t.window)
        throw Error("invalid_trait", t.name + ": period must satisfy 1 <= p <= W");
      if (!(t.presence_ratio > 0.0 && t.presence_ratio <= 1.0))
        throw Error("invalid_trait", t.name + ": presence ratio must be in (0, 1]");
      if (t.motif_tokens.empty()) throw Error("invalid_trait", t.name + ": empty motif set");
      for (Token tk : t.motif_tokens) {
        if (tk >= vocab_size) throw Error("invalid_trait", t.name + ": motif token out of range");
        if (owner[tk] != -1) throw Error("invalid_trait", "motif sets of traits overlap");
        owner[tk] = int(i);
      }
    }
  }
};

/// Four traits (drums/bass/guitar/piano analogs) with periods 4, 6, 8, 12 and
/// four motif tokens each at the top of a 64-token vocabulary; the other 48
/// tokens form a sparse random Markov background (4 successors per token).
inline WorldSpec default_world(std::uint64_t seed = 7) {
  WorldSpec w;
  w.vocab_size = 64;
  w.sequence_length = 64;
  const char* names[] = {"drums", "bass", "guitar", "piano"};
  const std::size_t periods[] = {4, 6, 8, 12};
  for (std::size_t i = 0; i < 4; ++i) {
    TraitSpec t;
    t.name = names[i];
    for (Token k = 0; k < 4; ++k) t.motif_tokens.push_back(Token(48 + 4 * i + k));
    t.period = periods[i];
    t.jitter = 1;
    t.window = 32;
    t.presence_ratio = 0.5;
    w.traits.push_back(t);
  }
  Rng rng(seed);
  const std::size_t n = 48;
  for (Token k = 0; k < n; ++k) w.background.support.push_back(k);
  w.background.initial.assign(n, 1.0 / double(n));
  constexpr std::size_t kSuccessors = 4;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    std::vector<double> row(n, 0.0);
    double sum = 0.0;
    for (std::size_t k = 0; k < kSuccessors; ++k) {
      const double g = -std::log(1.0 - rng.uniform()) + 0.25;
      row[idx[k]] = g;
      sum += g;
    }
    for (double& v : row) v /= sum;
    w.background.transitions.push_back(row);
  }
  w.validate();
  return w;
}

struct LabeledSequence {
  std::vector<Token> tokens;
  std::vector<bool> labels;  // one per trait in WorldSpec order

  bool operator==(const LabeledSequence&) const = default;
};

/// Generates one sequence. Each active trait places a motif token at 1-based
/// positions p, 2p, ... perturbed by a uniform jitter in [-j, j] between
/// consecutive placements. Collisions between traits move the later trait to
/// the nearest free position. The background chain skips motif positions.
inline LabeledSequence gen_sequence(const WorldSpec& world, const std::vector<bool>& active,
                                    std::size_t length, Rng& rng) {
  if (active.size() != world.traits.size())
    throw Error("dimension_mismatch", "gen_sequence: active mask size != trait count");
  std::vector<int> slot(length, -1);
  for (std::size_t ti = 0; ti < world.traits.size(); ++ti) {
    if (!active[ti]) continue;
    const auto& t = world.traits[ti];
    if (length < t.period)
      throw Error("invalid_argument", "gen_sequence: length shorter than period of " + t.name);
    const auto j = static_cast<std::int64_t>(t.jitter);
    std::int64_t pos = 0;  // 1-based position of the previous placement
    while (true) {
      pos += static_cast<std::int64_t>(t.period) + (j > 0 ? rng.uniform_range(-j, j) : 0);
      if (pos < 1) pos = 1;
      if (pos > static_cast<std::int64_t>(length)) break;
      std::int64_t target = pos - 1;
      for (std::int64_t d = 0; d < static_cast<std::int64_t>(length); ++d) {
        if (target + d < std::int64_t(length) && slot[target + d] == -1) {
          target += d;
          break;
        }
        if (target - d >= 0 && slot[target - d] == -1) {
          target -= d;
          break;
        }
      }
      if (slot[target] == -1) slot[target] = int(ti);
    }
  }
  LabeledSequence out;
  out.labels = active;
  out.tokens.resize(length);
  const auto& bg = world.background;
  std::size_t state = bg.sample_index(bg.initial, rng);
  bool first = true;
  for (std::size_t i = 0; i < length; ++i) {
    if (slot[i] >= 0) {
      const auto& motifs = world.traits[slot[i]].motif_tokens;
      out.tokens[i] = motifs[rng.uniform_int(motifs.size())];
      continue;
    }
    if (!first) state = bg.sample_index(bg.transitions[state], rng);
    first = false;
    out.tokens[i] = bg.support[state];
  }
  return out;
}

inline std::size_t motif_count(std::span<const Token> tokens, const TraitSpec& trait) {
  std::size_t c = 0;
  for (Token tk : tokens)
    if (std::find(trait.motif_tokens.begin(), trait.motif_tokens.end(), tk) != trait.motif_tokens.end())
      ++c;
  return c;
}

/// Fraction of length-W sliding windows whose motif count reaches
/// rho * W / p. Sequences shorter than W are judged as one window with the
/// threshold scaled to their length.
inline double trait_oracle(std::span<const Token> tokens, const TraitSpec& trait) {
  if (tokens.empty()) throw Error("empty_input", "trait_oracle: empty token sequence");
  const std::size_t W = trait.window;
  if (tokens.size() < W)
    return double(motif_count(tokens, trait)) + 1e-9 >= trait.threshold(tokens.size()) ? 1.0 : 0.0;
  const double thr = trait.threshold(W) - 1e-9;
  std::vector<int> is_motif(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    is_motif[i] = std::find(trait.motif_tokens.begin(), trait.motif_tokens.end(), tokens[i]) !=
                  trait.motif_tokens.end();
  std::size_t count = 0;
  for (std::size_t i = 0; i < W; ++i) count += is_motif[i];
  const std::size_t n_windows = tokens.size() - W + 1;
  std::size_t hits = double(count) >= thr ? 1 : 0;
  for (std::size_t s = 1; s < n_windows; ++s) {
    count += is_motif[s + W - 1];
    count -= is_motif[s - 1];
    if (double(count) >= thr) ++hits;
  }
  return double(hits) / double(n_windows);
}

inline bool trait_present(std::span<const Token> tokens, const TraitSpec& trait) {
  return trait_oracle(tokens, trait) > 0.5;
}

struct DatasetSplit {
  std::vector<LabeledSequence> train;
  std::vector<LabeledSequence> test;
};

/// Random trait mask: `forced` (if any) set to `forced_value`, every other
/// trait active with probability 1/2.
inline std::vector<bool> random_mask(std::size_t n_traits, Rng& rng, int forced = -1,
                                     bool forced_value = false) {
  std::vector<bool> m(n_traits);
  for (std::size_t i = 0; i < n_traits; ++i) m[i] = rng.uniform() < 0.5;
  if (forced >= 0) m[std::size_t(forced)] = forced_value;
  return m;
}

/// Balanced probing data for one trait: each split holds n_pairs positives
/// and n_pairs negatives (alternating), other traits random. Train and test
/// use disjoint RNG substreams of split_seed; sequence i of a split uses its
/// own substream.
inline DatasetSplit build_dataset(const WorldSpec& world, std::size_t trait, std::size_t n_pairs,
                                  std::uint64_t split_seed) {
  if (n_pairs < 1) throw Error("invalid_argument", "build_dataset: n_pairs must be >= 1");
  if (trait >= world.traits.size()) throw Error("out_of_range", "build_dataset: bad trait index");
  const Rng root(split_seed);
  auto make = [&](std::uint64_t split_id) {
    std::vector<LabeledSequence> out;
    out.reserve(2 * n_pairs);
    const Rng split = root.substream(split_id * 1000003ULL + trait);
    for (std::size_t i = 0; i < 2 * n_pairs; ++i) {
      Rng r = split.substream(i);
      const auto mask = random_mask(world.traits.size(), r, int(trait), i % 2 == 0);
      out.push_back(gen_sequence(world, mask, world.sequence_length, r));
    }
    return out;
  };
  return {make(0), make(1)};
}

/// Unlabelled-by-design LM training corpus: every trait independently active
/// with probability 1/2.
inline std::vector<LabeledSequence> build_lm_corpus(const WorldSpec& world, std::size_t n,
                                                    std::uint64_t seed) {
  const Rng root(seed);
  std::vector<LabeledSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = root.substream(i);
    out.push_back(gen_sequence(world, random_mask(world.traits.size(), r), world.sequence_length, r));
  }
  return out;
}

inline std::vector<std::vector<Token>> token_lists(const std::vector<LabeledSequence>& seqs) {
  std::vector<std::vector<Token>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(s.tokens);
  return out;
}

// Dataset file: one sequence per line, space-separated token ids, a tab, then
// comma-separated active trait names.

inline std::string format_dataset(const WorldSpec& world, const std::vector<LabeledSequence>& seqs) {
  std::ostringstream os;
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) os << (i ? " " : "") << s.tokens[i];
    os << '\t';
    bool first = true;
    for (std::size_t t = 0; t < s.labels.size(); ++t) {
      if (!s.labels[t]) continue;
      os << (first ? "" : ",") << world.traits[t].name;
      first = false;
    }
    os << '\n';
  }
  return os.str();
}

inline std::vector<LabeledSequence> parse_dataset(const WorldSpec& world, const std::string& text) {
  std::vector<LabeledSequence> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error("parse_error", "dataset line " + std::to_string(lineno) + ": missing tab");
    LabeledSequence s;
    s.labels.assign(world.traits.size(), false);
    std::istringstream toks(line.substr(0, tab));
    long long v;
    while (toks >> v) {
      if (v < 0 || std::size_t(v) >= world.vocab_size)
        throw Error("parse_error", "dataset line " + std::to_string(lineno) + ": token out of range");
      s.tokens.push_back(Token(v));
    }
    std::string names = line.substr(tab + 1), name;
    std::istringstream ns(names);
    while (std::getline(ns, name, ','))
      if (!name.empty()) s.labels[world.trait_index(name)] = true;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace smitin
