#include <smitin/mathkernel.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

using namespace smitin;
using Catch::Approx;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) v = 2.0 * rng.uniform() - 1.0;
  return m;
}

}  // namespace

TEST_CASE("matmul", "[mathkernel]") {
  Rng rng(3);
  const Matrix m = random_matrix(3, 4, rng);

  SECTION("identity is neutral") { REQUIRE(matmul(Matrix::identity(3), m) == m); }

  SECTION("hand-evaluated product") {
    const Matrix a(2, 2, {1, 2, 3, 4});
    const Matrix b(2, 1, {1, 1});
    const Matrix c = matmul(a, b);
    REQUIRE(c.rows == 2);
    REQUIRE(c.cols == 1);
    REQUIRE(c(0, 0) == 3.0);
    REQUIRE(c(1, 0) == 7.0);
  }

  SECTION("zero matrix annihilates") {
    const Matrix z = matmul(Matrix(2, 3), m);
    for (double v : z.data) REQUIRE(v == 0.0);
  }

  SECTION("dimension mismatch throws") { REQUIRE_THROWS_AS(matmul(m, m), Error); }

  SECTION("associativity on random small matrices") {
    for (int trial = 0; trial < 50; ++trial) {
      const Matrix a = random_matrix(1 + rng.uniform_int(5), 1 + rng.uniform_int(5), rng);
      const Matrix b = random_matrix(a.cols, 1 + rng.uniform_int(5), rng);
      const Matrix c = random_matrix(b.cols, 1 + rng.uniform_int(5), rng);
      const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
      for (std::size_t i = 0; i < l.data.size(); ++i)
        REQUIRE(std::fabs(l.data[i] - r.data[i]) <= 1e-9 * std::max(1.0, std::fabs(l.data[i])));
    }
  }
}

TEST_CASE("softmax", "[mathkernel]") {
  SECTION("uniform on equal logits") {
    const auto p = softmax(std::vector<double>{0, 0, 0});
    for (double v : p) REQUIRE(v == Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("large logits do not overflow") {
    const auto p = softmax(std::vector<double>{1000, 0});
    REQUIRE(std::isfinite(p[0]));
    REQUIRE(p[0] == Approx(1.0));
    REQUIRE(p[1] < 1e-300);
  }
  SECTION("closed form for [ln2, 0]") {
    const auto p = softmax(std::vector<double>{std::log(2.0), 0.0});
    REQUIRE(p[0] == Approx(2.0 / 3.0).margin(1e-15));
    REQUIRE(p[1] == Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("empty vector is rejected") { REQUIRE_THROWS_AS(softmax(std::vector<double>{}), Error); }

  SECTION("normalisation property for lengths up to 4096") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng.uniform_int(4096);
      std::vector<double> v(n);
      for (double& x : v) x = 200.0 * (rng.uniform() - 0.5);
      const auto p = softmax(v);
      double s = 0.0;
      for (double x : p) {
        REQUIRE(x >= 0.0);
        s += x;
      }
      REQUIRE(std::fabs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("sigmoid", "[mathkernel]") {
  REQUIRE(sigmoid(0.0) == 0.5);
  REQUIRE(sigmoid(std::log(3.0)) == Approx(0.75).margin(1e-15));
  for (double x : {0.1, 1.0, 5.0, 30.0, 700.0}) REQUIRE(sigmoid(x) + sigmoid(-x) == Approx(1.0).margin(1e-15));
  for (double x : {-20.0, -1.0, 0.1, 1.0, 5.0, 20.0}) REQUIRE(sigmoid(x) > sigmoid(x - 0.05));
  REQUIRE(sigmoid(-1000.0) >= 0.0);
  REQUIRE(sigmoid(1000.0) <= 1.0);
}

TEST_CASE("median and stddev", "[mathkernel]") {
  REQUIRE(median(std::vector<double>{0.2, 0.9, 0.4}) == 0.4);
  REQUIRE(median(std::vector<double>{1, 3}) == 2.0);
  REQUIRE_THROWS_AS(median(std::vector<double>{}), Error);

  REQUIRE(stddev(std::vector<double>{0.7, 0.7, 0.7}) <= 1e-15);
  REQUIRE(stddev(std::vector<double>{2.0, 2.0}) == 0.0);
  REQUIRE(stddev(std::vector<double>{-1, 1}) == 1.0);
  REQUIRE(stddev(std::vector<double>{0.8, 0.9, 1.0}) == Approx(std::sqrt(0.02 / 3.0)).margin(1e-12));
  REQUIRE(stddev(std::vector<double>{0.8, 0.9, 1.0}) == Approx(0.081650).margin(1e-6));
  REQUIRE_THROWS_AS(stddev(std::vector<double>{}), Error);

  SECTION("sort oracle and permutation invariance") {
    Rng rng(5);
    std::vector<double> xs(100);
    for (double& x : xs) x = rng.uniform();
    std::vector<double> sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    const double med = median(xs);
    REQUIRE(med == 0.5 * (sorted[49] + sorted[50]));
    REQUIRE(med >= sorted.front());
    REQUIRE(med <= sorted.back());
    const double sd = stddev(xs);
    for (int trial = 0; trial < 20; ++trial) {
      rng.shuffle(xs);
      REQUIRE(median(xs) == med);
      REQUIRE(stddev(xs) == sd);
    }
  }
}

TEST_CASE("Rng streams", "[mathkernel]") {
  Rng a(12345), b(12345), c(12346);
  bool differs = false;
  for (int i = 0; i < 1000000; ++i) {
    const auto x = a.next_u64();
    REQUIRE(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  REQUIRE(differs);

  SECTION("substreams are reproducible and distinct") {
    const Rng root(9);
    Rng s1 = root.substream(1), s1b = root.substream(1), s2 = root.substream(2);
    const auto v = s1.next_u64();
    REQUIRE(v == s1b.next_u64());
    REQUIRE(v != s2.next_u64());
  }

  SECTION("uniform and uniform_int ranges") {
    Rng r(1);
    for (int i = 0; i < 10000; ++i) {
      const double u = r.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
      REQUIRE(r.uniform_int(7) < 7);
      const auto k = r.uniform_range(-2, 2);
      REQUIRE(k >= -2);
      REQUIRE(k <= 2);
    }
  }
}
