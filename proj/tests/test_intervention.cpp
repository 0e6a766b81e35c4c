#include <smitin/intervention.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

using namespace smitin;
using Catch::Approx;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.head_dim = 4;
  c.vocab_size = 16;
  c.max_context = 64;
  return c;
}

ProbeBank bank_with_accs(std::vector<double> accs, std::size_t L, std::size_t H, std::size_t D = 2) {
  ProbeBank b{"t", L, H, D, {}, {}, 0};
  for (double a : accs) b.probes.push_back({Vector(D, 0.5), 1.0, a});
  return b;
}

std::shared_ptr<const ProbeBank> random_bank(const ModelConfig& c, std::uint64_t seed, const std::string& name) {
  Rng rng(seed);
  ProbeBank b{name, c.num_layers, c.num_heads, c.head_dim, {}, {}, seed};
  for (std::size_t i = 0; i < c.num_cells(); ++i) {
    Probe p;
    for (std::size_t d = 0; d < c.head_dim; ++d) p.theta.push_back(rng.normal());
    p.sigma = 0.5 + rng.uniform();
    p.acc = 0.6 + 0.1 * double(i % 4);
    b.probes.push_back(p);
  }
  return std::make_shared<const ProbeBank>(b);
}

InterventionPlan tiny_plan(Mode m, double alpha, std::shared_ptr<const ProbeBank> bank) {
  InterventionPlan p;
  p.mode = m;
  p.alpha = alpha;
  p.monitor_k = 4;
  p.weight_top_k = 2;
  p.traits = {{bank, nullptr}};
  return p;
}

const std::vector<Token> kPrefix{1, 5, 3, 7, 2, 9};

}  // namespace

TEST_CASE("soft_weights", "[intervention]") {
  const auto b = bank_with_accs({0.9, 0.7, 0.5}, 1, 3);
  const auto w = soft_weights(b, 3.0);
  REQUIRE(w[0] == 1.0);
  REQUIRE(w[1] == Approx(0.125).margin(1e-12));
  REQUIRE(w[2] == 0.0);
  REQUIRE(soft_weights(b, 7.5)[0] == 1.0);
  REQUIRE(soft_weights(b, 1.0)[1] == Approx(0.5).margin(1e-12));
  REQUIRE(soft_weights(bank_with_accs({0.6, 0.6}, 1, 2), 3.0) == std::vector<double>{1.0, 1.0});
  REQUIRE(top_k_weights(b, 2) == std::vector<double>{1.0, 1.0, 0.0});
}

TEST_CASE("monitor", "[intervention]") {
  ProbeBank b{"t", 1, 3, 2, {}, {}, 0};
  b.probes = {{{1.0, 0.0}, 1, 0.9}, {{0.0, 1.0}, 1, 0.8}, {{1.0, 1.0}, 1, 0.7}};
  ActivationRecord rec{0, 1, 3, 2, {0.0, 5.0, 7.0, 0.0, 1.0, -1.0}};
  const HeadSet all = top_k_heads(b, 3);
  SECTION("orthogonal activations read 0.5") {
    const auto r = monitor(rec, b, all);
    for (double v : r.values) REQUIRE(v == 0.5);
    REQUIRE(r.median == 0.5);
  }
  SECTION("median and independent scalar recomputation") {
    rec.z = {std::log(0.2 / 0.8), 0.0, 0.0, std::log(0.6 / 0.4), std::log(0.9 / 0.1), 0.0};
    const auto r = monitor(rec, b, all);
    REQUIRE(r.median == Approx(0.6).margin(1e-12));
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& th = b.probes[i].theta;
      const double s = th[0] * rec.z[2 * i] + th[1] * rec.z[2 * i + 1];
      REQUIRE(std::fabs(r.values[i] - 1.0 / (1.0 + std::exp(-s))) <= 1e-12);
    }
  }
  REQUIRE_THROWS_AS(monitor(rec, b, {}), Error);
}

TEST_CASE("update_weights three-case rule", "[intervention]") {
  SECTION("target reached zeroes every weight") {
    auto s = make_monitor_state({0.3, 1.0, 0.0}, 0.9);
    s = update_weights(s, 0.95);
    REQUIRE(s.w == std::vector<double>{0.0, 0.0, 0.0});
  }
  SECTION("case 1: w <- w (1 - delta)") {
    auto s = make_monitor_state({0.5, 0.5}, 0.9);
    s = update_weights(s, 0.5);  // delta(t0) = 0
    REQUIRE(s.delta == 0.0);
    REQUIRE(s.w == std::vector<double>{0.5, 0.5});
    s = update_weights(s, 0.7);
    REQUIRE(s.delta == Approx(0.2).margin(1e-12));
    REQUIRE(s.w[0] == Approx(0.4).margin(1e-12));
  }
  SECTION("case 2: zero weights reset to the initial value") {
    auto s = make_monitor_state({0.8, 0.3}, 0.9);
    s = update_weights(s, 0.95);
    s = update_weights(s, 0.7);
    REQUIRE(s.w == std::vector<double>{0.8, 0.3});
  }
  SECTION("growth is clamped to 1") {
    auto s = make_monitor_state({0.9}, 0.9);
    s = update_weights(s, 0.8);
    s = update_weights(s, 0.2);  // delta = -0.6 -> factor 1.6
    REQUIRE(s.w[0] == 1.0);
  }
  SECTION("removal target is falling below tau") {
    auto s = make_monitor_state({1.0}, 0.5, -1);
    s = update_weights(s, 0.7);
    REQUIRE(s.w[0] == 1.0);
    s = update_weights(s, 0.6);  // progress of 0.1 towards removal shrinks w
    REQUIRE(s.w[0] == Approx(0.9).margin(1e-12));
    s = update_weights(s, 0.4);
    REQUIRE(s.w[0] == 0.0);
  }
  SECTION("weights stay in [0, 1] for arbitrary medians") {
    Rng rng(3);
    auto s = make_monitor_state({0.2, 0.7, 1.0, 0.0}, 0.8);
    for (int i = 0; i < 1000; ++i) {
      s = update_weights(s, rng.uniform());
      for (double w : s.w) {
        REQUIRE(w >= 0.0);
        REQUIRE(w <= 1.0);
      }
    }
  }
}

TEST_CASE("decay_alpha", "[intervention]") {
  REQUIRE(decay_alpha(4.0, 10, 10, 30) == 4.0);
  REQUIRE(decay_alpha(4.0, 30, 10, 30) == 0.0);
  REQUIRE(decay_alpha(4.0, 20, 10, 30) == Approx(2.0).margin(1e-12));
  REQUIRE_THROWS_AS(decay_alpha(4.0, 10, 10, 10), Error);
}

TEST_CASE("schedule and deltas", "[intervention]") {
  InterventionPlan p;
  p.mode = Mode::smitin;
  p.sparse_step = 5;
  std::vector<std::size_t> hit;
  for (std::size_t t = 0; t < 40; ++t)
    if (is_scheduled(p, t, 10)) hit.push_back(t);
  REQUIRE(hit == std::vector<std::size_t>{10, 15, 20, 25, 30, 35});
  p.mode = Mode::original_iti;
  REQUIRE(is_scheduled(p, 11, 10));
  REQUIRE_FALSE(is_scheduled(p, 9, 10));
  p.mode = Mode::none;
  REQUIRE_FALSE(is_scheduled(p, 10, 10));

  const ModelConfig c = tiny();
  const auto b = random_bank(c, 4, "a");
  const std::vector<double> ones(c.num_cells(), 1.0);
  SECTION("alpha * w * sigma * unit theta") {
    const auto d = build_deltas(c, {{b, nullptr}}, {ones}, 2.0);
    for (std::size_t cell = 0; cell < c.num_cells(); ++cell) {
      const auto& pr = b->probes[cell];
      for (std::size_t k = 0; k < c.head_dim; ++k)
        REQUIRE(d[cell * c.head_dim + k] == Approx(2.0 * pr.sigma * pr.theta[k] / norm(pr.theta)).margin(1e-12));
    }
    REQUIRE(all_zero(build_deltas(c, {{b, nullptr}}, {ones}, 0.0)));
  }
  SECTION("opposite directions cancel") {
    ProbeBank neg = *b;
    for (auto& pr : neg.probes)
      for (double& v : pr.theta) v = -v;
    const auto nb = std::make_shared<const ProbeBank>(neg);
    const auto d = build_deltas(c, {{b, nullptr}, {nb, nullptr}}, {ones, ones}, 3.0);
    for (double v : d) REQUIRE(std::fabs(v) <= 1e-15);
  }
  SECTION("steering bank overrides the monitor bank") {
    const auto other = random_bank(c, 5, "a");
    REQUIRE(build_deltas(c, {{b, other}}, {ones}, 1.0) == build_deltas(c, {{other, nullptr}}, {ones}, 1.0));
  }
}

TEST_CASE("generate", "[intervention]") {
  const auto model = TransformerModel::random_init(tiny(), 7);
  const auto bank = random_bank(model.config, 8, "a");

  SECTION("zero alpha is bit-transparent") {
    const auto base = generate(model, tiny_plan(Mode::none, 5.0, bank), kPrefix, 30, 1.0, 11);
    for (Mode m : {Mode::smitin, Mode::original_iti, Mode::weight_decay}) {
      const auto tr = generate(model, tiny_plan(m, 0.0, bank), kPrefix, 30, 1.0, 11);
      REQUIRE(tr.generated() == base.generated());
      for (std::size_t i = 0; i < tr.steps.size(); ++i)
        REQUIRE(tr.steps[i].traits[0].c_median == base.steps[i].traits[0].c_median);
    }
  }

  SECTION("schedule purity and weight bounds") {
    auto plan = tiny_plan(Mode::smitin, 8.0, bank);
    plan.start = 9;
    plan.sparse_step = 4;
    const auto tr = generate(model, plan, kPrefix, 40, 1.0, 12);
    REQUIRE(tr.t0 == 9);
    REQUIRE(tr.steps.front().step == kPrefix.size());
    for (const auto& s : tr.steps) {
      const bool sched = s.step >= 9 && (s.step - 9) % 4 == 0;
      REQUIRE(s.intervened == sched);
      if (!sched) REQUIRE(s.traits[0].mass == 0.0);
      REQUIRE(s.traits[0].w_min >= 0.0);
      REQUIRE(s.traits[0].w_max <= 1.0);
    }
  }

  SECTION("original ITI intervenes every step with top-K' mass") {
    const auto tr = generate(model, tiny_plan(Mode::original_iti, 2.5, bank), kPrefix, 10, 1.0, 13);
    for (const auto& s : tr.steps) {
      REQUIRE(s.intervened);
      REQUIRE(s.traits[0].mass == Approx(2.5 * 2));
    }
    const auto wd = generate(model, tiny_plan(Mode::weight_decay, 2.5, bank), kPrefix, 10, 1.0, 13);
    REQUIRE(wd.steps.front().traits[0].mass == Approx(5.0));
    REQUIRE(wd.steps.back().traits[0].mass == 0.0);
  }

  SECTION("the monitor reads pre-intervention activations") {
    // Two runs differing only in alpha agree on the read-out at t0 itself.
    const auto a = generate(model, tiny_plan(Mode::smitin, 1.0, bank), kPrefix, 5, 1.0, 14);
    const auto b = generate(model, tiny_plan(Mode::smitin, 9.0, bank), kPrefix, 5, 1.0, 14);
    REQUIRE(a.steps[0].intervened);
    REQUIRE(a.steps[0].traits[0].c_median == b.steps[0].traits[0].c_median);
    REQUIRE(a.steps[0].traits[0].c_mean == b.steps[0].traits[0].c_mean);
  }

  SECTION("once the target holds, later deltas are zero") {
    auto plan = tiny_plan(Mode::smitin, 3.0, bank);
    plan.sparse_step = 1;
    ProbeBank easy = *bank;
    for (auto& p : easy.probes) p.acc = 0.1;  // tau far below any read-out
    plan.traits = {{std::make_shared<const ProbeBank>(easy), nullptr}};
    const auto tr = generate(model, plan, kPrefix, 20, 1.0, 15);
    REQUIRE(tr.taus[0] == Approx(0.1));
    for (std::size_t i = 1; i < tr.steps.size(); ++i) REQUIRE(tr.steps[i].traits[0].mass == 0.0);
  }

  SECTION("per-seed reproducibility and argmax decoding") {
    const auto plan = tiny_plan(Mode::smitin, 4.0, bank);
    REQUIRE(generate(model, plan, kPrefix, 20, 1.0, 16).generated() ==
            generate(model, plan, kPrefix, 20, 1.0, 16).generated());
    REQUIRE(generate(model, plan, kPrefix, 20, 0.0, 1).generated() ==
            generate(model, plan, kPrefix, 20, 0.0, 2).generated());
  }

  SECTION("removal uses tau = 0.5") {
    auto plan = tiny_plan(Mode::smitin, -10.0, bank);
    plan.removal = true;
    REQUIRE(generate(model, plan, kPrefix, 5, 1.0, 17).taus[0] == 0.5);
  }

  SECTION("errors") {
    REQUIRE_THROWS_AS(generate(model, tiny_plan(Mode::smitin, 1.0, bank), {}, 5, 1.0, 1), Error);
    REQUIRE_THROWS_AS(generate(model, tiny_plan(Mode::smitin, 1.0, bank), kPrefix, 60, 1.0, 1), Error);
    auto bad = tiny_plan(Mode::smitin, 1.0, bank);
    bad.monitor_k = 5;
    REQUIRE_THROWS_AS(generate(model, bad, kPrefix, 5, 1.0, 1), Error);
    bad = tiny_plan(Mode::smitin, 1.0, bank);
    bad.sparse_step = 0;
    REQUIRE_THROWS_AS(generate(model, bad, kPrefix, 5, 1.0, 1), Error);
  }
}

TEST_CASE("trace CSV", "[intervention]") {
  const auto model = TransformerModel::random_init(tiny(), 9);
  auto plan = tiny_plan(Mode::smitin, 4.0, random_bank(model.config, 10, "drums"));
  plan.traits.push_back({random_bank(model.config, 11, "bass"), nullptr});
  const auto tr = generate(model, plan, kPrefix, 25, 1.0, 18);
  const std::string csv = format_trace_csv(tr, "abc123");
  REQUIRE(csv.rfind("# config_hash=abc123\n", 0) == 0);
  REQUIRE(csv.find("\nstep,token,intervened,trait,c_median,c_mean,c_std,delta,mass\n") != std::string::npos);
  const auto back = parse_trace_csv(csv);
  REQUIRE(back.prefix == tr.prefix);
  REQUIRE(back.t0 == tr.t0);
  REQUIRE(back.trait_names == std::vector<std::string>{"drums", "bass"});
  REQUIRE(back.taus == tr.taus);
  REQUIRE(back.generated() == tr.generated());
  for (std::size_t i = 0; i < tr.steps.size(); ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      REQUIRE(back.steps[i].traits[k].c_median == tr.steps[i].traits[k].c_median);
      REQUIRE(back.steps[i].traits[k].mass == tr.steps[i].traits[k].mass);
      REQUIRE(back.steps[i].traits[k].delta == tr.steps[i].traits[k].delta);
    }
  REQUIRE(format_trace_csv(back, "abc123") == csv);
  REQUIRE_THROWS_AS(parse_trace_csv("step,bogus\n"), Error);
}
