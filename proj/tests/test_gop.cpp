#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "support.hpp"

using namespace gmx;

namespace {

FeatureMatrix rows_of(std::vector<std::vector<float>> rows) {
  std::vector<float> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return FeatureMatrix(rows.size(), rows.front().size(), data);
}

/// Independent oracle: double sum of the listed entries of a float row.
double sum_classes(std::span<const float> row, std::initializer_list<std::size_t> cls) {
  double s = 0.0;
  for (auto c : cls) s += static_cast<double>(row[c]);
  return s;
}

FeatureMatrix random_posteriors(std::size_t T, std::size_t C, Rng& rng) {
  std::vector<float> data(T * C);
  for (std::size_t t = 0; t < T; ++t) {
    double tot = 0.0;
    std::vector<double> w(C);
    for (auto& x : w) tot += (x = rng.uniform() + 1e-3);
    for (std::size_t c = 0; c < C; ++c) data[t * C + c] = static_cast<float>(w[c] / tot);
  }
  return FeatureMatrix(T, C, data);
}

}  // namespace

TEST_CASE("frame posterior sums the phone's classes") {
  PhoneClassMap map(3);
  map.set(PhoneId{0}, {0, 1});
  map.set(PhoneId{1}, {0, 1, 2});
  map.set(PhoneId{2}, {2});
  const auto post = rows_of({{0.2f, 0.3f, 0.5f}, {1.0f, 0.0f, 0.0f}});
  CHECK(phone_frame_posterior(post, map, PhoneId{0}, 0) == sum_classes(post.row(0), {0, 1}));
  CHECK(phone_frame_posterior(post, map, PhoneId{0}, 0) == Catch::Approx(0.5).margin(1e-7));
  CHECK(phone_frame_posterior(post, map, PhoneId{1}, 0) == Catch::Approx(1.0).margin(1e-7));
  CHECK(phone_frame_posterior(post, map, PhoneId{2}, 1) == 0.0);
  CHECK_THROWS_AS(phone_frame_posterior(post, map, PhoneId{0}, 2), Error);
  CHECK_THROWS_AS(phone_frame_posterior(post, map, PhoneId{7}, 0), Error);
}

TEST_CASE("frame posterior is clamped to one") {
  PhoneClassMap map(1);
  map.set(PhoneId{0}, {0, 1});
  const auto post = rows_of({{0.60005f, 0.40004f}});
  CHECK(phone_frame_posterior(post, map, PhoneId{0}, 0) == 1.0);
}

TEST_CASE("phone GOP is the mean frame posterior") {
  PhoneClassMap map(2);
  map.set(PhoneId{0}, {0});
  map.set(PhoneId{1}, {1});
  SECTION("all ones") {
    const auto post = rows_of({{1, 0}, {1, 0}, {1, 0}});
    CHECK(phone_gop(post, map, {PhoneId{0}, 0, 3}) == 1.0);
  }
  SECTION("0.5 and 0.25") {
    const auto post = rows_of({{0.5f, 0.5f}, {0.25f, 0.75f}});
    CHECK(phone_gop(post, map, {PhoneId{0}, 0, 2}) == (0.5 + 0.25) / 2);
    CHECK(phone_gop(post, map, {PhoneId{0}, 0, 2}) == 0.375);
  }
  SECTION("single frame") {
    const auto post = rows_of({{0.3f, 0.7f}});
    CHECK(phone_gop(post, map, {PhoneId{0}, 0, 1}) == static_cast<double>(0.3f));
  }
  SECTION("segment errors") {
    const auto post = rows_of({{0.3f, 0.7f}});
    CHECK_THROWS_AS(phone_gop(post, map, {PhoneId{0}, 0, 0}), Error);
    CHECK_THROWS_AS(phone_gop(post, map, {PhoneId{0}, 0, 2}), Error);
  }
}

TEST_CASE("log-mean GOP variant") {
  PhoneClassMap map(2);
  map.set(PhoneId{0}, {0});
  map.set(PhoneId{1}, {1});
  const auto post = rows_of({{0.5f, 0.5f}, {0.25f, 0.75f}});
  const double oracle = std::exp((std::log(0.5) + std::log(0.25)) / 2.0);
  CHECK(phone_gop(post, map, {PhoneId{0}, 0, 2}, GopVariant::log_mean) == Catch::Approx(oracle).epsilon(1e-12));
  const auto zero = rows_of({{0.0f, 1.0f}});
  CHECK(phone_gop(zero, map, {PhoneId{0}, 0, 1}, GopVariant::log_mean) == Catch::Approx(kPosteriorFloor));
  CHECK(parse_gop_variant("log_mean") == GopVariant::log_mean);
  CHECK_THROWS_AS(parse_gop_variant("witt"), Error);
}

TEST_CASE("word GOP is the unweighted phone mean") {
  const std::vector<double> gops{0.3, 0.9};
  CHECK(word_gop(gops) == 0.6);
  for (double c : {0.0, 0.1, 0.37, 1.0}) {
    const std::vector<double> v{c, c, c};
    CHECK(word_gop(v) == Catch::Approx(c).epsilon(1e-15));
  }
  const std::vector<double> mixed{0.0, 1.0, 0.5, 0.5};
  CHECK(word_gop(mixed) == 0.5);
  CHECK_THROWS_AS(word_gop(std::vector<double>{}), Error);
  CHECK_THROWS_AS(word_gop(std::vector<double>{0.5, 1.5}), Error);
}

TEST_CASE("GOP properties on random posteriorgrams") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.index(30), C = 2 + rng.index(10);
    const auto post = random_posteriors(T, C, rng);
    PhoneClassMap map(1);
    std::vector<std::uint32_t> cls;
    for (std::uint32_t c = 0; c < C; ++c)
      if (rng.bernoulli(0.4)) cls.push_back(c);
    if (cls.empty()) cls.push_back(0);
    map.set(PhoneId{0}, cls);
    const Segment seg{PhoneId{0}, 0, static_cast<std::uint32_t>(T)};
    for (auto v : {GopVariant::mean_posterior, GopVariant::log_mean}) {
      const double g = phone_gop(post, map, seg, v);
      CHECK(g >= 0.0);
      CHECK(g <= 1.0);
    }
    // frame permutation invariance
    std::vector<std::size_t> order(T);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<float> perm;
    for (auto t : order) perm.insert(perm.end(), post.row(t).begin(), post.row(t).end());
    const FeatureMatrix permuted(T, C, perm);
    CHECK(phone_gop(permuted, map, seg) == Catch::Approx(phone_gop(post, map, seg)).epsilon(1e-12));
  }
}

TEST_CASE("constant per-frame posterior gives that constant") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const float c = static_cast<float>(rng.uniform());
    const std::size_t T = 1 + rng.index(50);
    std::vector<float> data;
    for (std::size_t t = 0; t < T; ++t) {
      data.push_back(c);
      data.push_back(1.0f - c);
    }
    PhoneClassMap map(1);
    map.set(PhoneId{0}, {0});
    const double g = phone_gop(FeatureMatrix(T, 2, data), map, {PhoneId{0}, 0, static_cast<std::uint32_t>(T)});
    const double cd = static_cast<double>(c);
    CHECK(std::abs(g - cd) <= 4 * std::numeric_limits<double>::epsilon() * std::max(cd, 1e-300) * static_cast<double>(T));
  }
}

TEST_CASE("word GOP is order invariant and bounded") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> g(1 + rng.index(8));
    for (auto& x : g) x = rng.uniform();
    const double w = word_gop(g);
    CHECK(w >= *std::min_element(g.begin(), g.end()) - 1e-15);
    CHECK(w <= *std::max_element(g.begin(), g.end()) + 1e-15);
    rng.shuffle(std::span<double>(g));
    CHECK(word_gop(g) == Catch::Approx(w).epsilon(1e-14));
  }
}

TEST_CASE("utterance GOPs follow the alignment") {
  UtteranceRecord rec;
  rec.utt_id = "u";
  rec.mfcc = FeatureMatrix::zeros(5, 2);
  rec.deep = FeatureMatrix::zeros(5, 2);
  // each frame puts all mass on the aligned phone's class
  rec.post = rows_of({{1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 1, 0}, {0, 0, 1}});
  rec.align.segments = {{PhoneId{0}, 0, 2}, {PhoneId{1}, 2, 4}, {PhoneId{2}, 4, 5}};
  PhoneClassMap map(3);
  map.set(PhoneId{0}, {0});
  map.set(PhoneId{1}, {1});
  map.set(PhoneId{2}, {2});
  const auto gops = utterance_gops(rec, map);
  REQUIRE(gops.size() == 3);
  for (const auto& g : gops) CHECK(g.gop == 1.0);
  CHECK(gops[1].segment.start == 2);

  PhoneClassMap partial(2);
  partial.set(PhoneId{0}, {0});
  partial.set(PhoneId{1}, {1});
  try {
    utterance_gops(rec, partial);
    FAIL("expected unknown phone");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::unknown_phone);
    CHECK(std::string(e.what()).find("segment 2") != std::string::npos);
  }
}
