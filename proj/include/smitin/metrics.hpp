#pragma once

// Objective evaluation: internal success rate, ground-truth presence,
// simultaneous success, frozen-model embeddings, cosine similarity, a
// diagonal-covariance Frechet feature distance and Spearman correlation.

#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "smitin/corpus.hpp"
#include "smitin/intervention.hpp"
#include "smitin/mathkernel.hpp"
#include "smitin/model.hpp"

namespace smitin {

/// Fraction of steps t >= t0 whose median probe read-out clears tau
/// (C > tau, or C < tau when `removal`).
inline double success_rate(const GenerationTrace& trace, std::size_t trait, double tau,
                           bool removal = false) {
  std::size_t n = 0, hits = 0;
  for (const auto& s : trace.steps) {
    if (s.step < trace.t0) continue;
    ++n;
    const double c = s.traits.at(trait).c_median;
    hits += removal ? (c < tau) : (c > tau);
  }
  if (n == 0) throw Error("empty_input", "success_rate: no steps after intervention start");
  return double(hits) / double(n);
}

inline double success_rate(const GenerationTrace& trace, std::size_t trait) {
  return success_rate(trace, trait, trace.taus.at(trait));
}

/// Success rate as judged after the fact by `bank` on a clean re-run of the
/// finished sequence: step t reads the activations at input position t-1.
inline double recognizer_success_rate(const TransformerModel& model, const GenerationTrace& trace,
                                      const ProbeBank& bank, const HeadSet& heads, double tau,
                                      bool removal = false) {
  const auto tokens = trace.all_tokens();
  const SequenceForward fw = forward_sequence(model, tokens, false);
  const std::size_t M = model.config.model_dim(), D = model.config.head_dim;
  std::size_t n = 0, hits = 0;
  std::vector<double> c(heads.size());
  for (const auto& s : trace.steps) {
    if (s.step < trace.t0) continue;
    for (std::size_t i = 0; i < heads.size(); ++i)
      c[i] = sigmoid(dot(bank.at(heads[i].layer, heads[i].head).theta,
                         fw.z(heads[i].layer, heads[i].head, s.step - 1, M, D)));
    const double med = median(c);
    ++n;
    hits += removal ? (med < tau) : (med > tau);
  }
  if (n == 0) throw Error("empty_input", "recognizer_success_rate: no steps after intervention start");
  return double(hits) / double(n);
}

/// Oracle presence fraction on the generated suffix.
inline double ground_truth_rate(std::span<const Token> generated, const TraitSpec& trait) {
  if (generated.empty()) throw Error("empty_input", "ground_truth_rate: empty suffix");
  return trait_oracle(generated, trait);
}

/// presence[song][trait] fractions; a song succeeds when every target trait
/// is present more than half of the time.
inline double simultaneous_success(const std::vector<std::vector<double>>& presence) {
  if (presence.empty()) throw Error("empty_input", "simultaneous_success: no songs");
  std::size_t ok = 0;
  for (const auto& song : presence) {
    if (song.empty()) throw Error("empty_input", "simultaneous_success: empty trait set");
    ok += std::all_of(song.begin(), song.end(), [](double f) { return f > 0.5; });
  }
  return double(ok) / double(presence.size());
}

/// Mean over positions of the final-layer-norm hidden state.
inline Vector embed(const TransformerModel& model, std::span<const Token> tokens) {
  if (tokens.empty()) throw Error("empty_input", "embed: empty token sequence");
  const SequenceForward fw = forward_sequence(model, tokens, false);
  const std::size_t M = model.config.model_dim();
  Vector e(M, 0.0);
  for (std::size_t t = 0; t < fw.T; ++t)
    for (std::size_t i = 0; i < M; ++i) e[i] += fw.hf[t * M + i];
  for (double& v : e) v /= double(fw.T);
  return e;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw Error("degenerate", "cosine_similarity: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Frechet distance between diagonal-covariance Gaussian fits:
/// |mu_A - mu_B|^2 + sum_d (v_A + v_B - 2 sqrt(v_A v_B)), population variances.
inline double ffd(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  if (a.size() < 2 || b.size() < 2) throw Error("degenerate", "ffd: each set needs at least 2 vectors");
  const std::size_t dim = a[0].size();
  auto moments = [dim](const std::vector<Vector>& s, Vector& mu, Vector& var) {
    mu.assign(dim, 0.0);
    var.assign(dim, 0.0);
    for (const auto& v : s) {
      if (v.size() != dim) throw Error("dimension_mismatch", "ffd: embedding dims differ");
      for (std::size_t d = 0; d < dim; ++d) mu[d] += v[d];
    }
    for (double& m : mu) m /= double(s.size());
    for (const auto& v : s)
      for (std::size_t d = 0; d < dim; ++d) var[d] += (v[d] - mu[d]) * (v[d] - mu[d]);
    for (double& x : var) x /= double(s.size());
  };
  Vector ma, va, mb, vb;
  moments(a, ma, va);
  moments(b, mb, vb);
  double dist = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double dm = ma[d] - mb[d];
    // (sqrt(va) - sqrt(vb))^2 is the same quantity, written so the result is
    // symmetric and never negative.
    const double ds = std::sqrt(va[d]) - std::sqrt(vb[d]);
    dist += dm * dm + ds * ds;
  }
  return dist;
}

/// Average ranks (1-based); ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("dimension_mismatch", "spearman: length mismatch");
  if (x.size() < 3) throw Error("invalid_argument", "spearman: need at least 3 pairs");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = mean(rx), my = mean(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("degenerate", "spearman: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct EvalRow {
  std::string trait;
  std::string mode;
  std::size_t count = 0;
  double success_rate = 0.0;
  double ground_truth_rate = 0.0;
  double ffd = 0.0;
  double similarity = 0.0;
  double spearman_rho = 0.0;  // NaN when undefined (constant input)
  double mass = 0.0;          // mean total intervention mass per generation
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string footer;

  std::string csv(const std::string& config_hash) const {
    std::ostringstream os;
    os << "# config_hash=" << config_hash << '\n';
    os << "trait,mode,count,success_rate,ground_truth_rate,ffd,similarity,spearman_rho,mass\n";
    for (const auto& r : rows)
      os << r.trait << ',' << r.mode << ',' << r.count << ',' << format_real(r.success_rate) << ','
         << format_real(r.ground_truth_rate) << ',' << format_real(r.ffd) << ','
         << format_real(r.similarity) << ',' << format_real(r.spearman_rho) << ','
         << format_real(r.mass) << '\n';
    if (!footer.empty()) os << "# " << footer << '\n';
    return os.str();
  }

  /// Human-readable table, columns in the order Success Rate, FFD, Similarity.
  std::string table() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %-14s %12s %10s %10s %10s %8s\n", "trait", "mode",
                  "Success[%]", "GT[%]", "FFD", "Similarity", "n");
    os << buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-10s %-14s %12.1f %10.1f %10.4f %10.4f %8zu\n", r.trait.c_str(),
                    r.mode.c_str(), 100.0 * r.success_rate, 100.0 * r.ground_truth_rate, r.ffd,
                    r.similarity, r.count);
      os << buf;
    }
    return os.str();
  }
};

/// One row's metrics from a batch of traces of the same (trait, plan).
/// `reference` holds embeddings of the FFD reference set.
inline EvalRow evaluate_traces(const TransformerModel& model, const std::vector<GenerationTrace>& traces,
                               std::size_t trait_slot, const TraitSpec& trait, const std::string& mode,
                               const std::vector<Vector>& reference, bool removal = false) {
  EvalRow row;
  row.trait = trait.name;
  row.mode = mode;
  row.count = traces.size();
  if (traces.empty()) throw Error("empty_input", "evaluate_traces: no traces");
  std::vector<double> sr, gt, sims;
  std::vector<Vector> embs;
  double mass = 0.0;
  for (const auto& tr : traces) {
    const auto gen = tr.generated();
    sr.push_back(success_rate(tr, trait_slot, tr.taus.at(trait_slot), removal));
    gt.push_back(ground_truth_rate(gen, trait));
    const Vector eg = embed(model, gen);
    sims.push_back(cosine_similarity(embed(model, tr.prefix), eg));
    embs.push_back(eg);
    mass += tr.total_mass();
  }
  row.success_rate = mean(sr);
  row.ground_truth_rate = mean(gt);
  row.similarity = mean(sims);
  row.mass = mass / double(traces.size());
  row.ffd = (embs.size() >= 2 && reference.size() >= 2) ? ffd(embs, reference) : 0.0;
  try {
    row.spearman_rho = spearman(sr, gt);
  } catch (const Error&) {
    row.spearman_rho = std::numeric_limits<double>::quiet_NaN();
  }
  return row;
}

}  // namespace smitin
