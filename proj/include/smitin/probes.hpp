#pragma once

// Head-wise linear probes: last-step activation extraction, bias-free
// logistic regression per (layer, head), direction scale sigma, head
// ranking, accuracy maps and the SMPB probe-bank file format.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "smitin/corpus.hpp"
#include "smitin/mathkernel.hpp"
#include "smitin/model.hpp"

namespace smitin {

constexpr double kSigmaFloor = 1e-6;

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(const std::string& bytes) {
  Digest d{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, d.data(), &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("crypto_error", "sha256 failed");
  }
  EVP_MD_CTX_free(ctx);
  return d;
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

/// Activations of one (layer, head) cell: n rows of dim D plus labels.
struct CellFeatures {
  std::size_t dim = 0;
  std::vector<double> rows;  // n x dim
  std::vector<int> labels;   // 0 / 1

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }
  bool operator==(const CellFeatures&) const = default;
};

/// Feature table indexed by cell = l*H + h.
struct FeatureTable {
  std::size_t num_layers = 0, num_heads = 0, head_dim = 0;
  std::vector<CellFeatures> cells;

  const CellFeatures& cell(std::size_t l, std::size_t h) const { return cells[l * num_heads + h]; }
  bool operator==(const FeatureTable&) const = default;
};

/// Unconditioned forward pass over each sequence; keeps z_{l,h} at the last
/// position, labelled by the sequence's flag for `trait`.
inline FeatureTable extract_activations(const TransformerModel& model,
                                        const std::vector<LabeledSequence>& data, std::size_t trait) {
  const auto& c = model.config;
  const std::size_t M = c.model_dim(), D = c.head_dim;
  FeatureTable ft{c.num_layers, c.num_heads, D, std::vector<CellFeatures>(c.num_cells())};
  for (auto& cell : ft.cells) {
    cell.dim = D;
    cell.rows.reserve(data.size() * D);
  }
  for (const auto& seq : data) {
    if (trait >= seq.labels.size()) throw Error("out_of_range", "extract_activations: bad trait index");
    const SequenceForward fw = forward_sequence(model, seq.tokens, false);
    const std::size_t last = fw.T - 1;
    for (std::size_t l = 0; l < c.num_layers; ++l)
      for (std::size_t h = 0; h < c.num_heads; ++h) {
        auto& cell = ft.cells[l * c.num_heads + h];
        const auto z = fw.z(l, h, last, M, D);
        cell.rows.insert(cell.rows.end(), z.begin(), z.end());
        cell.labels.push_back(seq.labels[trait] ? 1 : 0);
      }
  }
  return ft;
}

struct Probe {
  Vector theta;
  double sigma = kSigmaFloor;
  double acc = 0.0;
  bool operator==(const Probe&) const = default;
};

struct ProbeHyper {
  double lr = 1.0;
  std::size_t epochs = 2000;
  std::uint64_t seed = 0;  // full-batch GD from theta = 0 does not consume it
};

/// Fraction of rows whose sign of <theta, z> matches the label (a zero
/// score counts as negative).
inline double probe_accuracy(std::span<const double> theta, const CellFeatures& f) {
  if (f.size() == 0) throw Error("empty_input", "probe_accuracy: no rows");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const bool pred = dot(theta, f.row(i)) > 0.0;
    correct += pred == (f.labels[i] == 1);
  }
  return double(correct) / double(f.size());
}

/// Bias-free logistic regression by full-batch gradient descent from zero;
/// accuracy measured on `test`. Sigma is left at the floor (see compute_sigma).
inline Probe train_probe(const CellFeatures& train, const CellFeatures& test, const ProbeHyper& hyper) {
  const std::size_t n = train.size(), D = train.dim;
  if (n < 2) throw Error("invalid_argument", "train_probe: need at least 2 examples");
  const auto pos = std::count(train.labels.begin(), train.labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(n))
    throw Error("single_class", "train_probe: training data contains a single class");
  Probe p;
  p.theta.assign(D, 0.0);
  Vector grad(D);
  for (std::size_t e = 0; e < hyper.epochs; ++e) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto z = train.row(i);
      const double r = sigmoid(dot(p.theta, z)) - double(train.labels[i]);
      for (std::size_t d = 0; d < D; ++d) grad[d] += r * z[d];
    }
    for (std::size_t d = 0; d < D; ++d) p.theta[d] -= hyper.lr * grad[d] / double(n);
  }
  p.acc = probe_accuracy(p.theta, test.size() ? test : train);
  return p;
}

/// Population std of the projections of `activations` on the unit vector
/// along `direction`, floored at kSigmaFloor.
inline double compute_sigma(std::span<const double> direction,
                            std::span<const CellFeatures* const> activations) {
  const double nrm = norm(direction);
  std::vector<double> proj;
  for (const CellFeatures* f : activations)
    for (std::size_t i = 0; i < f->size(); ++i)
      proj.push_back(nrm > 0.0 ? dot(direction, f->row(i)) / nrm : 0.0);
  if (proj.empty()) throw Error("empty_input", "compute_sigma: no activations");
  return std::max(kSigmaFloor, stddev(proj));
}

/// Mean of positive rows minus mean of negative rows.
inline Vector mass_mean_direction(const CellFeatures& f) {
  Vector pos(f.dim, 0.0), neg(f.dim, 0.0);
  std::size_t np = 0, nn = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    auto& acc = f.labels[i] ? pos : neg;
    (f.labels[i] ? np : nn) += 1;
    const auto z = f.row(i);
    for (std::size_t d = 0; d < f.dim; ++d) acc[d] += z[d];
  }
  if (np == 0 || nn == 0) throw Error("single_class", "mass_mean_direction: both classes required");
  Vector out(f.dim);
  for (std::size_t d = 0; d < f.dim; ++d) out[d] = pos[d] / double(np) - neg[d] / double(nn);
  if (norm(out) == 0.0) throw Error("degenerate", "mass_mean_direction: class centroids coincide");
  return out;
}

struct HeadId {
  std::size_t layer = 0, head = 0;
  auto operator<=>(const HeadId&) const = default;
};
using HeadSet = std::vector<HeadId>;

enum class DirectionKind { logistic, mass_mean };

struct ProbeBank {
  std::string trait;
  std::size_t num_layers = 0, num_heads = 0, head_dim = 0;
  std::vector<Probe> probes;  // row-major (l, h)
  Digest model_hash{};
  std::uint64_t dataset_seed = 0;  // in-memory provenance only; not serialised
  DirectionKind direction = DirectionKind::logistic;

  const Probe& at(std::size_t l, std::size_t h) const { return probes[l * num_heads + h]; }
  Probe& at(std::size_t l, std::size_t h) { return probes[l * num_heads + h]; }
  std::size_t size() const { return probes.size(); }
};

/// Probes for every cell. Returns the logistic bank; if `mass_mean_out` is
/// given it receives the mass-mean-shift bank (same accuracies, centroid
/// directions, sigma along those directions).
inline ProbeBank train_bank_from_features(const FeatureTable& train, const FeatureTable& test,
                                          const std::string& trait, const ProbeHyper& hyper,
                                          const Digest& model_hash, std::uint64_t dataset_seed,
                                          ProbeBank* mass_mean_out = nullptr) {
  ProbeBank bank{trait, train.num_layers, train.num_heads, train.head_dim, {}, model_hash, dataset_seed};
  ProbeBank mm = bank;
  mm.direction = DirectionKind::mass_mean;
  for (std::size_t i = 0; i < train.cells.size(); ++i) {
    Probe p = train_probe(train.cells[i], test.cells[i], hyper);
    // Stored values are binary32; accuracy is recomputed from the rounded
    // theta so it is reproducible from the file alone.
    for (double& v : p.theta) v = double(float(v));
    p.acc = double(float(probe_accuracy(p.theta, test.cells[i].size() ? test.cells[i] : train.cells[i])));
    const CellFeatures* both[] = {&train.cells[i], &test.cells[i]};
    p.sigma = double(float(compute_sigma(p.theta, both)));
    bank.probes.push_back(p);
    if (mass_mean_out) {
      Probe q;
      q.theta = mass_mean_direction(train.cells[i]);
      for (double& v : q.theta) v = double(float(v));
      q.sigma = double(float(compute_sigma(q.theta, both)));
      q.acc = p.acc;
      mm.probes.push_back(q);
    }
  }
  if (mass_mean_out) *mass_mean_out = std::move(mm);
  return bank;
}

inline ProbeBank train_bank(const TransformerModel& model, const DatasetSplit& data, std::size_t trait,
                            const std::string& trait_name, const ProbeHyper& hyper,
                            const Digest& model_hash, std::uint64_t dataset_seed) {
  return train_bank_from_features(extract_activations(model, data.train, trait),
                                  extract_activations(model, data.test, trait), trait_name, hyper,
                                  model_hash, dataset_seed);
}

/// Top-K heads by accuracy, ties broken by ascending (l, h).
inline HeadSet top_k_heads(const ProbeBank& bank, std::size_t k) {
  const std::size_t n = bank.size();
  if (k < 1 || k > n)
    throw Error("out_of_range", "top_k_heads: K=" + std::to_string(k) + " outside [1, " +
                                    std::to_string(n) + "]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return bank.probes[a].acc > bank.probes[b].acc; });
  HeadSet out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i] / bank.num_heads, idx[i] % bank.num_heads});
  return out;
}

/// tau = median(A) - std(A) over A = accuracies of the top-K heads.
inline double threshold_tau(const ProbeBank& bank, std::size_t k) {
  std::vector<double> accs;
  for (const auto& id : top_k_heads(bank, k)) accs.push_back(bank.at(id.layer, id.head).acc);
  return median(accs) - stddev(accs);
}

struct AccuracyMap {
  std::size_t num_layers = 0, num_heads = 0;
  std::vector<double> grid;  // row-major (l, h)
  double max_acc = 0.0;
  double tau = 0.0;

  /// "(94.3% / 0.903)"-style summary: best accuracy in percent, then tau.
  std::string summary() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "(%.1f%% / %.3f)", 100.0 * max_acc, tau);
    return buf;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "layer";
    for (std::size_t h = 0; h < num_heads; ++h) os << ",head" << h;
    os << '\n';
    for (std::size_t l = 0; l < num_layers; ++l) {
      os << l;
      for (std::size_t h = 0; h < num_heads; ++h) {
        char buf[32];
        std::snprintf(buf, sizeof buf, ",%.6f", grid[l * num_heads + h]);
        os << buf;
      }
      os << '\n';
    }
    return os.str();
  }
};

inline AccuracyMap accuracy_map(const ProbeBank& bank, std::size_t k) {
  AccuracyMap m{bank.num_layers, bank.num_heads, {}, 0.0, threshold_tau(bank, k)};
  for (const auto& p : bank.probes) {
    m.grid.push_back(p.acc);
    m.max_acc = std::max(m.max_acc, p.acc);
  }
  return m;
}

// SMPB: "SMPB", u32 version=1, u32 L, H, D, u16 name length + UTF-8 trait
// name, 32-byte model hash, then per (l, h) row-major: D x f32 theta,
// f32 sigma, f32 acc. All little-endian.

constexpr std::uint32_t kProbeBankVersion = 1;

inline std::string serialize_bank(const ProbeBank& bank) {
  if (bank.probes.size() != bank.num_layers * bank.num_heads)
    throw Error("invalid_bank", "probe bank must hold exactly L*H probes");
  if (bank.trait.size() > 0xFFFF) throw Error("invalid_bank", "trait name too long");
  std::string out = "SMPB";
  io::put_u32(out, kProbeBankVersion);
  io::put_u32(out, std::uint32_t(bank.num_layers));
  io::put_u32(out, std::uint32_t(bank.num_heads));
  io::put_u32(out, std::uint32_t(bank.head_dim));
  io::put_u16(out, std::uint16_t(bank.trait.size()));
  out += bank.trait;
  out.append(reinterpret_cast<const char*>(bank.model_hash.data()), bank.model_hash.size());
  for (const auto& p : bank.probes) {
    if (p.theta.size() != bank.head_dim) throw Error("invalid_bank", "probe theta has wrong dim");
    for (double v : p.theta) io::put_f32(out, v);
    io::put_f32(out, p.sigma);
    io::put_f32(out, p.acc);
  }
  return out;
}

inline ProbeBank deserialize_bank(std::string bytes) {
  io::Reader r(std::move(bytes), "probe bank");
  if (r.raw(4) != "SMPB") throw Error("bad_magic", "probe bank: bad magic (expected SMPB)");
  const auto version = r.u32();
  if (version != kProbeBankVersion)
    throw Error("version_mismatch", "probe bank: unsupported version " + std::to_string(version));
  ProbeBank b;
  b.num_layers = r.u32();
  b.num_heads = r.u32();
  b.head_dim = r.u32();
  b.trait = r.raw(r.u16());
  const std::string h = r.raw(32);
  std::copy(h.begin(), h.end(), b.model_hash.begin());
  for (std::size_t i = 0; i < b.num_layers * b.num_heads; ++i) {
    Probe p;
    p.theta.resize(b.head_dim);
    for (double& v : p.theta) v = r.f32();
    p.sigma = r.f32();
    p.acc = r.f32();
    b.probes.push_back(std::move(p));
  }
  if (!r.at_end()) throw Error("trailing_bytes", "probe bank: unexpected trailing bytes");
  return b;
}

inline void save_bank(const ProbeBank& bank, const std::string& path) {
  io::write_file(path, serialize_bank(bank));
}
inline ProbeBank load_bank(const std::string& path) { return deserialize_bank(io::read_file(path)); }

/// Rounds theta/sigma/acc to binary32 so the in-memory bank equals its
/// serialised form.
inline void quantize_to_f32(ProbeBank& bank) {
  for (auto& p : bank.probes) {
    for (double& v : p.theta) v = double(float(v));
    p.sigma = double(float(p.sigma));
    p.acc = double(float(p.acc));
  }
}

}  // namespace smitin
