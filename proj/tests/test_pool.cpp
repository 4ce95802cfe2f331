#include <catch_amalgamated.hpp>

#include <cmath>

#include "support.hpp"

using namespace gmx;
using namespace gmx_test;

namespace {

/// Random utterance over `n_phones` phones where class c belongs to phone c.
UtteranceRecord random_utterance(const std::string& id, std::size_t n_phones, std::size_t n_segments, Rng& rng) {
  UtteranceRecord r;
  r.utt_id = id;
  std::uint32_t t = 0;
  for (std::size_t s = 0; s < n_segments; ++s) {
    const auto len = static_cast<std::uint32_t>(rng.integer(1, 8));
    r.align.segments.push_back({PhoneId{static_cast<std::uint32_t>(rng.index(n_phones))}, t, t + len});
    t += len;
  }
  r.mfcc = random_matrix(t, 3, rng);
  r.deep = random_matrix(t, 4, rng);
  std::vector<float> post(static_cast<std::size_t>(t) * n_phones);
  for (std::size_t f = 0; f < t; ++f) {
    double tot = 0.0;
    std::vector<double> w(n_phones);
    for (auto& x : w) tot += (x = rng.uniform() + 0.01);
    for (std::size_t c = 0; c < n_phones; ++c) post[f * n_phones + c] = static_cast<float>(w[c] / tot);
  }
  r.post = FeatureMatrix(t, n_phones, post);
  return r;
}

PhoneClassMap identity_map(std::size_t n) {
  PhoneClassMap m(n);
  for (std::uint32_t p = 0; p < n; ++p) m.set(PhoneId{p}, {p});
  return m;
}

PhoneInventory inventory(std::size_t n) {
  std::vector<std::string> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back("p" + std::to_string(i));
  return PhoneInventory(s);
}

}  // namespace

TEST_CASE("one utterance with two segments gives two singleton pools") {
  Rng rng(1);
  auto r = random_utterance("u", 2, 2, rng);
  r.align.segments[0].phone = PhoneId{0};
  r.align.segments[1].phone = PhoneId{1};
  const std::vector<UtteranceRecord> corpus{r};
  const auto pools = build_pool(corpus, inventory(2), identity_map(2));
  CHECK(pools.pool(PhoneId{0}).size() == 1);
  CHECK(pools.pool(PhoneId{1}).size() == 1);
  const auto& q = pools.pool(PhoneId{1})[0];
  const auto& seg = r.align.segments[1];
  CHECK(q.frames() == seg.end - seg.start);
  CHECK(q.mfcc(0, 0) == r.mfcc(seg.start, 0));
  CHECK(q.gop == phone_gop(r.post, identity_map(2), seg));
}

TEST_CASE("empty corpus gives empty pools") {
  const std::vector<UtteranceRecord> corpus;
  const auto pools = build_pool(corpus, inventory(3), identity_map(3));
  for (std::uint32_t p = 0; p < 3; ++p) CHECK(pools.pool(PhoneId{p}).empty());
  const PhonePoolSet none{PhoneInventory{}};
  CHECK(pool_stats(none).empty());
}

TEST_CASE("pool sizes match a recount of alignment segments") {
  Rng rng(2);
  std::vector<UtteranceRecord> corpus;
  for (int u = 0; u < 60; ++u) corpus.push_back(random_utterance("u" + std::to_string(u), 5, 1 + rng.index(30), rng));
  std::vector<std::size_t> oracle(5, 0);
  std::size_t total = 0;
  for (const auto& r : corpus)
    for (const auto& s : r.align.segments) {
      ++oracle[s.phone.index];
      ++total;
    }
  const auto pools = build_pool(corpus, inventory(5), identity_map(5));
  std::size_t sum = 0;
  for (const auto& st : pool_stats(pools)) {
    CHECK(st.count == oracle[st.phone.index]);
    sum += st.count;
  }
  CHECK(sum == total);
}

TEST_CASE("pool construction is independent of the worker count") {
  Rng rng(3);
  std::vector<UtteranceRecord> corpus;
  for (int u = 0; u < 40; ++u) corpus.push_back(random_utterance("u" + std::to_string(u), 4, 10, rng));
  const auto a = encode_pool(build_pool(corpus, inventory(4), identity_map(4), GopVariant::mean_posterior, 1));
  const auto b = encode_pool(build_pool(corpus, inventory(4), identity_map(4), GopVariant::mean_posterior, 4));
  const auto c = encode_pool(build_pool(corpus, inventory(4), identity_map(4), GopVariant::mean_posterior, 1));
  CHECK(a == b);
  CHECK(a == c);
}

TEST_CASE("pool stats aggregate gop and duration") {
  PhonePoolSet pools{inventory(2)};
  pools.add({PhoneId{0}, FeatureMatrix::zeros(4, 2), FeatureMatrix::zeros(4, 2), 0.3});
  pools.add({PhoneId{1}, FeatureMatrix::zeros(6, 2), FeatureMatrix::zeros(6, 2), 0.9});
  pools.add({PhoneId{1}, FeatureMatrix::zeros(kLongSegmentFrames + 1, 2), FeatureMatrix::zeros(kLongSegmentFrames + 1, 2), 0.5});
  const auto st = pool_stats(pools);
  CHECK(st[0].count == 1);
  CHECK(st[0].mean_gop == 0.3);
  CHECK(st[0].mean_frames == 4.0);
  CHECK(st[1].count == 2);
  CHECK(st[1].mean_gop == Catch::Approx(0.7));
  CHECK(st[1].long_segments == 1);
}

TEST_CASE("sampling from a singleton pool returns that element") {
  PhonePoolSet pools{inventory(1)};
  pools.add({PhoneId{0}, FeatureMatrix::zeros(2, 2), FeatureMatrix::zeros(2, 2), 0.4});
  Rng rng(4);
  for (int i = 0; i < 50; ++i) CHECK(&sample_quadruplet(pools, PhoneId{0}, rng) == &pools.pool(PhoneId{0})[0]);
}

TEST_CASE("sampling is reproducible for a fixed seed") {
  Rng g(5);
  const auto pools = random_pools(1, 2, 2, 2, g);
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(&sample_quadruplet(pools, PhoneId{0}, a) == &sample_quadruplet(pools, PhoneId{0}, b));
}

TEST_CASE("sampling is uniform over a pool of ten") {
  Rng g(6);
  const auto pools = random_pools(1, 10, 2, 2, g);
  const auto base = pools.pool(PhoneId{0}).data();
  std::vector<int> counts(10, 0);
  Rng rng(7);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(&sample_quadruplet(pools, PhoneId{0}, rng) - base)];
  const double sd = std::sqrt(n * 0.1 * 0.9);
  for (int c : counts) CHECK(std::abs(c - n / 10.0) < 3.0 * sd);
}

TEST_CASE("sampling an empty pool names the phone") {
  PhonePoolSet pools{inventory(2)};
  Rng rng(8);
  try {
    sample_quadruplet(pools, PhoneId{1}, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_input);
    CHECK(std::string(e.what()).find("p1") != std::string::npos);
  }
}
