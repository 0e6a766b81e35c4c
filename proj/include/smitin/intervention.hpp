#pragma once

// Steering engine. At an intervened step every tapped head receives
//
//   delta_{l,h}(t) = alpha * w_{l,h}(t) * sigma_{l,h} * theta_hat_{l,h}
//
// (theta_hat the unit steering direction) summed over all target traits.
// Modes: none, original ITI (constant top-K weights every step), weight-decay
// ITI (same, with alpha ramped to zero), and self-monitored sparse
// intervention, where probe read-outs on pre-intervention activations drive
// the per-head weights between scheduled steps t0, t0+s, t0+2s, ...

#include <cstdio>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smitin/mathkernel.hpp"
#include "smitin/model.hpp"
#include "smitin/probes.hpp"

namespace smitin {

enum class Mode { none, original_iti, weight_decay, smitin };
enum class Weighting { top_k, soft };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::none: return "none";
    case Mode::original_iti: return "original_iti";
    case Mode::weight_decay: return "weight_decay";
    case Mode::smitin: return "smitin";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "none" || s == "unconditioned") return Mode::none;
  if (s == "original_iti" || s == "iti") return Mode::original_iti;
  if (s == "weight_decay" || s == "decay") return Mode::weight_decay;
  if (s == "smitin") return Mode::smitin;
  throw Error("invalid_argument", "unknown mode '" + s + "'");
}

/// Soft weights: ((acc - acc_min) / (acc_max - acc_min))^c over
/// all cells; all ones when every accuracy is equal.
inline std::vector<double> soft_weights(const ProbeBank& bank, double c) {
  if (bank.probes.empty()) throw Error("empty_input", "soft_weights: empty bank");
  double lo = bank.probes[0].acc, hi = lo;
  for (const auto& p : bank.probes) {
    lo = std::min(lo, p.acc);
    hi = std::max(hi, p.acc);
  }
  std::vector<double> w(bank.size(), 1.0);
  if (hi == lo) return w;
  for (std::size_t i = 0; i < bank.size(); ++i)
    w[i] = std::clamp(std::pow((bank.probes[i].acc - lo) / (hi - lo), c), 0.0, 1.0);
  return w;
}

/// 1 on the top-K heads, 0 elsewhere.
inline std::vector<double> top_k_weights(const ProbeBank& bank, std::size_t k) {
  std::vector<double> w(bank.size(), 0.0);
  for (const auto& id : top_k_heads(bank, k)) w[id.layer * bank.num_heads + id.head] = 1.0;
  return w;
}

struct MonitorReading {
  std::vector<double> values;  // C(t), in H_K order
  double median = 0.0, mean = 0.0, std = 0.0;
};

/// C(t) = { sigmoid(<theta_{l,h}, z_{l,h}(t)>) : (l,h) in heads } and its
/// median. `rec` must hold pre-intervention activations.
inline MonitorReading monitor(const ActivationRecord& rec, const ProbeBank& bank, const HeadSet& heads) {
  if (heads.empty()) throw Error("empty_input", "monitor: empty head set");
  MonitorReading r;
  r.values.reserve(heads.size());
  for (const auto& id : heads)
    r.values.push_back(sigmoid(dot(bank.at(id.layer, id.head).theta, rec.head(id.layer, id.head))));
  r.median = median(r.values);
  r.mean = mean(r.values);
  r.std = stddev(r.values);
  return r;
}

/// Per-trait self-monitoring state.
struct MonitorState {
  std::vector<double> w;       // current w_{l,h}, row-major cells
  std::vector<double> w_init;  // w_{l,h}(t0)
  double tau = 0.5;
  double delta = 0.0;
  double last_median = 0.0;
  bool has_last = false;
  /// +1: steer towards presence (target reached when C >= tau).
  /// -1: removal (target reached when C < tau).
  int polarity = +1;

  bool target_reached(double c_median) const {
    return polarity > 0 ? c_median >= tau : c_median < tau;
  }
};

inline MonitorState make_monitor_state(std::vector<double> w_init, double tau, int polarity = +1) {
  MonitorState s;
  s.w = w_init;
  s.w_init = std::move(w_init);
  s.tau = tau;
  s.polarity = polarity;
  return s;
}

/// Three-case rule applied at a scheduled step with median C(t); yields the
/// weights for the next scheduled step. Delta(t0) = 0. Case 1 is clamped to
/// [0, 1]. For removal the progress sign of Delta is flipped.
inline MonitorState update_weights(MonitorState s, double c_median) {
  s.delta = s.has_last ? c_median - s.last_median : 0.0;
  s.last_median = c_median;
  s.has_last = true;
  if (s.target_reached(c_median)) {
    std::fill(s.w.begin(), s.w.end(), 0.0);
    return s;
  }
  const double factor = 1.0 - double(s.polarity) * s.delta;
  for (std::size_t i = 0; i < s.w.size(); ++i) {
    if (s.w[i] > 0.0)
      s.w[i] = std::clamp(s.w[i] * factor, 0.0, 1.0);
    else
      s.w[i] = s.w_init[i];
  }
  return s;
}

/// Linear ramp alpha0 * max(0, 1 - (t - t0) / (T - t0)).
inline double decay_alpha(double alpha0, std::size_t t, std::size_t t0, std::size_t horizon) {
  if (horizon <= t0) throw Error("invalid_argument", "decay_alpha: horizon must exceed t0");
  if (t < t0) throw Error("invalid_argument", "decay_alpha: t < t0");
  return alpha0 * std::max(0.0, 1.0 - double(t - t0) / double(horizon - t0));
}

struct TraitBinding {
  std::shared_ptr<const ProbeBank> monitor;    // logistic probes: C(t), acc, tau
  std::shared_ptr<const ProbeBank> direction;  // steering directions; null = monitor bank
  const ProbeBank& steer() const { return direction ? *direction : *monitor; }
};

struct InterventionPlan {
  Mode mode = Mode::smitin;
  double alpha = 5.0;
  std::size_t sparse_step = 5;
  std::optional<std::size_t> start;  // t0; defaults to the first generated step
  double power_c = 3.0;
  std::size_t monitor_k = 16;
  Weighting weighting = Weighting::soft;
  std::size_t weight_top_k = 16;  // K' for top-K weighting and the ITI baselines
  bool removal = false;           // fixed tau = 0.5, success means C < tau
  std::vector<TraitBinding> traits;

  void validate(const ModelConfig& c) const {
    if (sparse_step < 1) throw Error("invalid_plan", "sparse step s must be >= 1");
    if (monitor_k < 1 || monitor_k > c.num_cells())
      throw Error("invalid_plan", "monitor K must be in [1, L*H]");
    if (weight_top_k < 1 || weight_top_k > c.num_cells())
      throw Error("invalid_plan", "top-K weighting K' must be in [1, L*H]");
    if (!std::isfinite(alpha)) throw Error("invalid_plan", "alpha must be finite");
    for (const auto& t : traits) {
      if (!t.monitor) throw Error("invalid_plan", "trait binding without monitor bank");
      for (const ProbeBank* b : {t.monitor.get(), t.direction.get()}) {
        if (!b) continue;
        if (b->num_layers != c.num_layers || b->num_heads != c.num_heads || b->head_dim != c.head_dim ||
            b->size() != c.num_cells())
          throw Error("invalid_plan", "probe bank shape does not match model");
      }
    }
  }

  double tau_for(const TraitBinding& t) const {
    return removal ? 0.5 : threshold_tau(*t.monitor, monitor_k);
  }

  std::vector<double> initial_weights(const TraitBinding& t) const {
    const ProbeBank& bank = *t.monitor;
    if (mode == Mode::original_iti || mode == Mode::weight_decay) return top_k_weights(bank, weight_top_k);
    if (mode == Mode::smitin)
      return weighting == Weighting::soft ? soft_weights(bank, power_c) : top_k_weights(bank, weight_top_k);
    return std::vector<double>(bank.size(), 0.0);
  }
};

/// True when step t receives an intervention under `plan`.
inline bool is_scheduled(const InterventionPlan& plan, std::size_t t, std::size_t t0) {
  if (plan.mode == Mode::none || t < t0) return false;
  if (plan.mode == Mode::smitin) return (t - t0) % plan.sparse_step == 0;
  return true;
}

/// Sum over traits of alpha * w * sigma * theta_hat, as an L x (H*D) block.
inline std::vector<double> build_deltas(const ModelConfig& c, const std::vector<TraitBinding>& traits,
                                        const std::vector<std::vector<double>>& weights, double alpha) {
  const std::size_t D = c.head_dim, M = c.model_dim();
  std::vector<double> out(c.num_layers * M, 0.0);
  if (alpha == 0.0) return out;
  for (std::size_t ti = 0; ti < traits.size(); ++ti) {
    const ProbeBank& bank = traits[ti].steer();
    for (std::size_t cell = 0; cell < c.num_cells(); ++cell) {
      const double w = weights[ti][cell];
      if (w == 0.0) continue;
      const Probe& p = bank.probes[cell];
      const double nrm = norm(p.theta);
      if (nrm == 0.0) continue;
      const double scale = alpha * w * p.sigma / nrm;
      double* dst = out.data() + cell * D;  // cell = l*H + h and l*M + h*D coincide
      for (std::size_t d = 0; d < D; ++d) dst[d] += scale * p.theta[d];
    }
  }
  return out;
}

inline HeadHook hook_from_deltas(std::shared_ptr<const std::vector<double>> deltas, std::size_t model_dim) {
  return [deltas = std::move(deltas), model_dim](std::size_t layer, std::span<double> delta) {
    const double* src = deltas->data() + layer * model_dim;
    std::copy(src, src + model_dim, delta.begin());
  };
}

inline bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

struct TraceTraitStep {
  double c_median = 0.0, c_mean = 0.0, c_std = 0.0, delta = 0.0, mass = 0.0;
  double w_min = 0.0, w_max = 0.0;  // in-memory only
};

struct TraceStep {
  std::size_t step = 0;
  Token token = 0;
  bool intervened = false;
  std::vector<TraceTraitStep> traits;
};

struct GenerationTrace {
  std::vector<Token> prefix;
  std::size_t t0 = 0;
  std::vector<std::string> trait_names;
  std::vector<double> taus;
  std::vector<TraceStep> steps;

  std::vector<Token> generated() const {
    std::vector<Token> out;
    for (const auto& s : steps) out.push_back(s.token);
    return out;
  }
  std::vector<Token> all_tokens() const {
    std::vector<Token> out = prefix;
    for (const auto& s : steps) out.push_back(s.token);
    return out;
  }
  double total_mass() const {
    double m = 0.0;
    for (const auto& s : steps)
      for (const auto& t : s.traits) m += t.mass;
    return m;
  }
};

/// Autoregressive continuation of `prefix` for `length` tokens.
///
/// Step t (t = |prefix| .. |prefix|+length-1) feeds token t-1 and samples
/// token t. Every step is monitored on clean activations: when the step is
/// intervened a non-committing pass without the hook is run first, so the
/// read-out never sees the current step's offset. Interventions propagate to
/// later steps only through the cached keys/values.
inline GenerationTrace generate(const TransformerModel& model, const InterventionPlan& plan,
                                std::span<const Token> prefix, std::size_t length, double temperature,
                                std::uint64_t seed) {
  const auto& c = model.config;
  plan.validate(c);
  if (prefix.empty()) throw Error("invalid_argument", "generate: prefix must be non-empty");
  if (prefix.size() + length > c.max_context + 1)
    throw Error("context_overflow", "generate: prefix + length exceeds context");

  const std::size_t P = prefix.size();
  const std::size_t t0 = plan.start.value_or(P);
  const std::size_t horizon = P + length - 1;
  const std::size_t nt = plan.traits.size();

  GenerationTrace trace;
  trace.prefix.assign(prefix.begin(), prefix.end());
  trace.t0 = t0;
  std::vector<HeadSet> heads;
  std::vector<MonitorState> states;
  for (const auto& tb : plan.traits) {
    trace.trait_names.push_back(tb.monitor->trait);
    const double tau = plan.tau_for(tb);
    trace.taus.push_back(tau);
    heads.push_back(top_k_heads(*tb.monitor, plan.monitor_k));
    states.push_back(make_monitor_state(plan.initial_weights(tb), tau, plan.removal ? -1 : +1));
  }

  KvCache cache(c);
  for (std::size_t i = 0; i + 1 < P; ++i) forward_step(model, cache, prefix[i]);

  Rng rng(seed);
  std::vector<Token> tokens(prefix.begin(), prefix.end());
  std::vector<std::vector<double>> weights(nt);
  for (std::size_t t = P; t < P + length; ++t) {
    const Token input = tokens[t - 1];
    const bool scheduled = is_scheduled(plan, t, t0);
    double alpha = 0.0;
    if (scheduled) {
      alpha = plan.mode == Mode::weight_decay ? decay_alpha(plan.alpha, t, t0, std::max(horizon, t0 + 1))
                                              : plan.alpha;
      for (std::size_t k = 0; k < nt; ++k) weights[k] = states[k].w;
    }
    std::vector<double> deltas;
    if (scheduled) deltas = build_deltas(c, plan.traits, weights, alpha);

    StepOutput clean, out;
    if (scheduled && !all_zero(deltas)) {
      clean = forward_step(model, cache, input, nullptr, /*commit=*/false);
      const HeadHook hook =
          hook_from_deltas(std::make_shared<const std::vector<double>>(std::move(deltas)), c.model_dim());
      out = forward_step(model, cache, input, &hook);
    } else {
      out = forward_step(model, cache, input);
    }
    const ActivationRecord& rec = (scheduled && clean.logits.size()) ? clean.activations : out.activations;

    TraceStep row;
    row.step = t;
    row.intervened = scheduled;
    row.traits.resize(nt);
    for (std::size_t k = 0; k < nt; ++k) {
      const MonitorReading r = monitor(rec, *plan.traits[k].monitor, heads[k]);
      auto& tr = row.traits[k];
      tr.c_median = r.median;
      tr.c_mean = r.mean;
      tr.c_std = r.std;
      if (scheduled) {
        double m = 0.0;
        for (double w : weights[k]) m += std::fabs(alpha * w);
        tr.mass = m;
        tr.w_min = *std::min_element(weights[k].begin(), weights[k].end());
        tr.w_max = *std::max_element(weights[k].begin(), weights[k].end());
      }
      if (scheduled && plan.mode == Mode::smitin) {
        states[k] = update_weights(std::move(states[k]), r.median);
        tr.delta = states[k].delta;
      }
    }
    const Token next = sample_token(out.logits, temperature, rng);
    row.token = next;
    tokens.push_back(next);
    trace.steps.push_back(std::move(row));
  }
  return trace;
}

// Trace CSV: comment lines with provenance, then
// step,token,intervened,trait,c_median,c_mean,c_std,delta,mass
// with one row per (step, trait).

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_trace_csv(const GenerationTrace& tr, const std::string& config_hash) {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << '\n';
  os << "# t0=" << tr.t0 << '\n';
  os << "# prefix=";
  for (std::size_t i = 0; i < tr.prefix.size(); ++i) os << (i ? " " : "") << tr.prefix[i];
  os << '\n';
  os << "# tau=";
  for (std::size_t k = 0; k < tr.trait_names.size(); ++k)
    os << (k ? "," : "") << tr.trait_names[k] << ':' << format_real(tr.taus[k]);
  os << '\n';
  os << "step,token,intervened,trait,c_median,c_mean,c_std,delta,mass\n";
  for (const auto& s : tr.steps)
    for (std::size_t k = 0; k < tr.trait_names.size(); ++k) {
      const auto& t = s.traits[k];
      os << s.step << ',' << s.token << ',' << (s.intervened ? 1 : 0) << ',' << tr.trait_names[k] << ','
         << format_real(t.c_median) << ',' << format_real(t.c_mean) << ',' << format_real(t.c_std) << ','
         << format_real(t.delta) << ',' << format_real(t.mass) << '\n';
    }
  return os.str();
}

inline GenerationTrace parse_trace_csv(const std::string& text) {
  GenerationTrace tr;
  std::istringstream is(text);
  std::string line;
  bool header_seen = false;
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# t0=", 0) == 0) {
        tr.t0 = std::stoull(line.substr(5));
      } else if (line.rfind("# prefix=", 0) == 0) {
        std::istringstream ps(line.substr(9));
        long long v;
        while (ps >> v) tr.prefix.push_back(Token(v));
      } else if (line.rfind("# tau=", 0) == 0) {
        for (const auto& kv : split(line.substr(6), ',')) {
          const auto colon = kv.rfind(':');
          if (colon == std::string::npos) throw Error("parse_error", "trace: bad tau entry");
          tr.trait_names.push_back(kv.substr(0, colon));
          tr.taus.push_back(std::stod(kv.substr(colon + 1)));
        }
      }
      continue;
    }
    if (!header_seen) {
      if (line != "step,token,intervened,trait,c_median,c_mean,c_std,delta,mass")
        throw Error("parse_error", "trace: unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 9) throw Error("parse_error", "trace: expected 9 columns");
    const std::size_t step = std::stoull(f[0]);
    if (tr.steps.empty() || tr.steps.back().step != step) {
      TraceStep s;
      s.step = step;
      s.token = Token(std::stoul(f[1]));
      s.intervened = f[2] == "1";
      s.traits.resize(tr.trait_names.size());
      tr.steps.push_back(std::move(s));
    }
    std::size_t k = tr.trait_names.size();
    for (std::size_t i = 0; i < tr.trait_names.size(); ++i)
      if (tr.trait_names[i] == f[3]) k = i;
    if (k == tr.trait_names.size()) throw Error("parse_error", "trace: unknown trait '" + f[3] + "'");
    auto& t = tr.steps.back().traits[k];
    t.c_median = std::stod(f[4]);
    t.c_mean = std::stod(f[5]);
    t.c_std = std::stod(f[6]);
    t.delta = std::stod(f[7]);
    t.mass = std::stod(f[8]);
  }
  if (!header_seen) throw Error("parse_error", "trace: missing header");
  return tr;
}

}  // namespace smitin
