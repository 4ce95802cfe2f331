#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "gmx/rng.hpp"

using gmx::Rng;

TEST_CASE("streams are reproducible and substreams differ") {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng d(7);
  CHECK(d.next() != c.next());
  CHECK(gmx::substream_seed(1, 0) != gmx::substream_seed(1, 1));
  CHECK(gmx::substream_seed(1, 0) != gmx::substream_seed(2, 0));
  CHECK(gmx::substream_seed(5, 9) == gmx::substream_seed(5, 9));
}

TEST_CASE("uniform draws stay in [0,1) with the right mean") {
  Rng r(1);
  double acc = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    acc += u;
  }
  // sd of the mean is sqrt(1/12 / n)
  CHECK(std::abs(acc / n - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST_CASE("index draws are unbiased over a non power of two range") {
  Rng r(2);
  const int n = 300000, k = 7;
  std::vector<int> counts(k, 0);
  for (int i = 0; i < n; ++i) ++counts[r.index(k)];
  const double p = 1.0 / k, sd = std::sqrt(n * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - n * p) < 4.0 * sd);
}

TEST_CASE("normal draws have unit variance") {
  Rng r(3);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("integer draws cover the closed range") {
  Rng r(4);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.integer(3, 7);
    REQUIRE(v >= 3);
    REQUIRE(v <= 7);
    ++seen[static_cast<std::size_t>(v - 3)];
  }
  for (int c : seen) CHECK(c > 0);
}

TEST_CASE("shuffle permutes") {
  Rng r(5);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(std::span<int>(w));
  CHECK(w != v);
  std::sort(w.begin(), w.end());
  CHECK(w == v);
}
