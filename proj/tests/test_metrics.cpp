#include <smitin/metrics.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace smitin;
using Catch::Approx;

namespace {

GenerationTrace trace_with_medians(const std::vector<double>& med, std::size_t first_step, std::size_t t0) {
  GenerationTrace tr;
  tr.t0 = t0;
  tr.trait_names = {"x"};
  tr.taus = {0.5};
  for (std::size_t i = 0; i < med.size(); ++i) {
    TraceStep s;
    s.step = first_step + i;
    s.traits.resize(1);
    s.traits[0].c_median = med[i];
    tr.steps.push_back(s);
  }
  return tr;
}

ModelConfig tiny() {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.head_dim = 4;
  c.vocab_size = 64;
  c.max_context = 64;
  return c;
}

}  // namespace

TEST_CASE("success_rate", "[metrics]") {
  const auto tr = trace_with_medians({0.9, 0.1, 0.6, 0.2, 0.3, 0.4, 0.7, 0.1, 0.2, 0.0}, 5, 5);
  REQUIRE(success_rate(tr, 0) == Approx(0.3));
  REQUIRE(success_rate(tr, 0, 0.5, true) == Approx(0.7));
  REQUIRE(success_rate(trace_with_medians({0.9, 0.8}, 5, 5), 0) == 1.0);

  // steps before t0 do not count
  auto early = trace_with_medians({0.0, 0.0, 0.0, 0.9, 0.1, 0.6, 0.2, 0.3, 0.4, 0.7, 0.1, 0.2, 0.0}, 2, 5);
  REQUIRE(success_rate(early, 0) == Approx(0.3));
  early.steps[0].traits[0].c_median = 1.0;
  REQUIRE(success_rate(early, 0) == Approx(0.3));

  REQUIRE_THROWS_AS(success_rate(trace_with_medians({0.9}, 1, 5), 0), Error);
}

TEST_CASE("ground truth and simultaneous success", "[metrics]") {
  const WorldSpec w = default_world();
  REQUIRE(ground_truth_rate(std::vector<Token>(40, 48), w.traits[0]) == 1.0);
  REQUIRE(ground_truth_rate(std::vector<Token>(40, 0), w.traits[0]) == 0.0);
  REQUIRE_THROWS_AS(ground_truth_rate(std::vector<Token>{}, w.traits[0]), Error);

  REQUIRE(simultaneous_success({{0.6, 0.4}}) == 0.0);
  REQUIRE(simultaneous_success({{0.6}, {0.4}, {0.51}, {0.5}}) == 0.5);
  REQUIRE_THROWS_AS(simultaneous_success({}), Error);
  REQUIRE_THROWS_AS(simultaneous_success({{}}), Error);

  Rng rng(2);
  std::vector<std::vector<double>> p;
  std::size_t brute = 0;
  for (int s = 0; s < 50; ++s) {
    std::vector<double> row{rng.uniform(), rng.uniform(), rng.uniform()};
    brute += (row[0] > 0.5) && (row[1] > 0.5) && (row[2] > 0.5);
    p.push_back(row);
  }
  REQUIRE(simultaneous_success(p) == Approx(double(brute) / 50.0).margin(0.0));
}

TEST_CASE("embed", "[metrics]") {
  const auto model = TransformerModel::random_init(tiny(), 3);
  const std::vector<Token> one{7};
  const Vector e = embed(model, one);
  const auto fw = forward_sequence(model, one);
  for (std::size_t i = 0; i < e.size(); ++i) REQUIRE(e[i] == fw.hf[i]);
  const std::vector<Token> a{1, 2, 3, 4}, b{4, 3, 2, 1};
  REQUIRE(embed(model, a) == embed(model, a));
  const Vector ea = embed(model, a), eb = embed(model, b);
  double diff = 0.0;
  for (std::size_t i = 0; i < ea.size(); ++i) diff += std::fabs(ea[i] - eb[i]);
  REQUIRE(diff > 1e-6);
  REQUIRE_THROWS_AS(embed(model, std::vector<Token>{}), Error);
}

TEST_CASE("cosine_similarity", "[metrics]") {
  const Vector a{1.0, 2.0, 3.0};
  REQUIRE(cosine_similarity(a, a) == Approx(1.0));
  REQUIRE(cosine_similarity(Vector{1.0, 0.0}, Vector{0.0, 3.0}) == 0.0);
  REQUIRE(cosine_similarity(a, Vector{-1.0, -2.0, -3.0}) == Approx(-1.0));
  REQUIRE_THROWS_AS(cosine_similarity(a, Vector{0.0, 0.0, 0.0}), Error);
}

TEST_CASE("ffd", "[metrics]") {
  Rng rng(4);
  std::vector<Vector> A, B;
  for (int i = 0; i < 30; ++i) {
    A.push_back({rng.normal(), rng.normal(), 2.0 * rng.normal()});
    B.push_back({1.0 + rng.normal(), rng.normal(), rng.normal()});
  }
  REQUIRE(ffd(A, A) == 0.0);
  REQUIRE(ffd(A, B) == ffd(B, A));
  REQUIRE(ffd(A, B) > 0.0);

  // 1-D, means 0 and 1, both variances 1 (population)
  const std::vector<Vector> x{{-1.0}, {1.0}}, y{{0.0}, {2.0}};
  REQUIRE(ffd(x, y) == Approx(1.0).margin(1e-12));

  // closed form oracle: |dmu|^2 + sum (vA + vB - 2 sqrt(vA vB))
  const std::vector<Vector> p{{0.0, 1.0}, {2.0, 3.0}, {4.0, 2.0}}, q{{1.0, 0.0}, {1.0, 4.0}};
  const double dm0 = 2.0 - 1.0, dm1 = 2.0 - 2.0;
  const double va0 = 8.0 / 3.0, va1 = 2.0 / 3.0, vb0 = 0.0, vb1 = 4.0;
  const double oracle = dm0 * dm0 + dm1 * dm1 + (va0 + vb0 - 2 * std::sqrt(va0 * vb0)) +
                        (va1 + vb1 - 2 * std::sqrt(va1 * vb1));
  REQUIRE(ffd(p, q) == Approx(oracle).margin(1e-12));

  REQUIRE_THROWS_AS(ffd({{1.0}}, y), Error);
  REQUIRE_THROWS_AS(ffd(x, {{1.0, 2.0}, {3.0, 4.0}}), Error);
}

TEST_CASE("spearman", "[metrics]") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  REQUIRE(spearman(x, x) == Approx(1.0));
  REQUIRE(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == Approx(-1.0));
  REQUIRE(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{2, 1, 3}) == Approx(0.5));
  REQUIRE(average_ranks(std::vector<double>{10, 20, 20, 30}) == std::vector<double>{1, 2.5, 2.5, 4});
  REQUIRE_THROWS_AS(spearman(x, std::vector<double>{1, 1, 1, 1, 1}), Error);
  REQUIRE_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);

  SECTION("invariant under strictly monotone transforms") {
    Rng rng(5);
    std::vector<double> a, b, fa, gb;
    for (int i = 0; i < 40; ++i) {
      a.push_back(double(rng.uniform_int(10)));
      b.push_back(a.back() + rng.normal());
      fa.push_back(std::exp(a.back()) - 3.0);
      gb.push_back(std::pow(b.back() + 20.0, 3));
    }
    REQUIRE(spearman(fa, gb) == spearman(a, b));
  }
}

TEST_CASE("recognizer and evaluate_traces", "[metrics]") {
  const auto model = TransformerModel::random_init(tiny(), 6);
  const WorldSpec w = default_world();
  const auto ds = build_dataset(w, 0, 10, 5);
  const auto tr = extract_activations(model, ds.train, 0), te = extract_activations(model, ds.test, 0);
  const auto bank = std::make_shared<const ProbeBank>(
      train_bank_from_features(tr, te, "drums", ProbeHyper{}, sha256(serialize_checkpoint(model)), 5));

  InterventionPlan none;
  none.mode = Mode::none;
  none.monitor_k = 4;
  none.weight_top_k = 4;
  none.traits = {{bank, nullptr}};
  InterventionPlan steer = none;
  steer.mode = Mode::original_iti;

  std::vector<GenerationTrace> base, steered;
  for (std::uint64_t s = 0; s < 6; ++s) {
    const auto prefix = std::span<const Token>(ds.test[s].tokens).first(16);
    base.push_back(generate(model, none, prefix, 40, 1.0, s));
    steered.push_back(generate(model, steer, prefix, 40, 1.0, s));
  }

  SECTION("clean re-run agrees with the in-loop monitor without intervention") {
    const HeadSet heads = top_k_heads(*bank, 4);
    for (const auto& t : base)
      REQUIRE(recognizer_success_rate(model, t, *bank, heads, t.taus[0]) == success_rate(t, 0));
  }

  SECTION("report row") {
    std::vector<Vector> ref;
    for (const auto& t : base) ref.push_back(embed(model, t.generated()));
    const EvalRow self = evaluate_traces(model, base, 0, w.traits[0], "none", ref);
    REQUIRE(self.count == 6);
    REQUIRE(self.ffd == 0.0);
    REQUIRE(self.mass == 0.0);
    const EvalRow row = evaluate_traces(model, steered, 0, w.traits[0], "original_iti", ref);
    REQUIRE(row.success_rate >= 0.0);
    REQUIRE(row.success_rate <= 1.0);
    REQUIRE(row.ground_truth_rate >= 0.0);
    REQUIRE(row.ground_truth_rate <= 1.0);
    REQUIRE(row.ffd >= 0.0);
    REQUIRE(row.similarity <= 1.0);
    REQUIRE(row.mass == Approx(40 * 4 * 5.0));
    REQUIRE((std::isnan(row.spearman_rho) || std::fabs(row.spearman_rho) <= 1.0));

    EvalReport rep{{self, row}, "note"};
    const std::string csv = rep.csv("h");
    REQUIRE(csv.rfind("# config_hash=h\ntrait,mode,count,success_rate,ground_truth_rate,ffd,similarity,", 0) == 0);
    REQUIRE(csv.find("# note") != std::string::npos);
    const std::string table = rep.table();
    REQUIRE(table.find("Success[%]") < table.find("FFD"));
    REQUIRE(table.find("FFD") < table.find("Similarity"));
  }
}
