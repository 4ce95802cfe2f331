#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace gmx;
using namespace gmx_test;

namespace {

/// Textbook formula evaluated separately: covariance over the product of deviations.
double textbook_pcc(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

}  // namespace

TEST_CASE("human scores scale to the unit interval") {
  CHECK(scale_human_score(10) == 1.0);
  CHECK(scale_human_score(0) == 0.0);
  CHECK(scale_human_score(5) == 0.5);
  CHECK_THROWS_AS(scale_human_score(10.5), Error);
  CHECK_THROWS_AS(scale_human_score(-0.1), Error);
  double prev = -1.0;
  for (int k = 0; k <= 100; ++k) {
    const double v = scale_human_score(k / 10.0);
    CHECK(v > prev);
    CHECK(v * 10.0 == Catch::Approx(k / 10.0).margin(1e-15));
    prev = v;
  }
}

TEST_CASE("pcc of four-point examples matches hand arithmetic") {
  const std::vector<double> p{1, 2, 3, 4};
  // labels 2,4,5,4: deviations give sxy = 3.5, sxx = 5, syy = 4.75
  const std::vector<double> y1{2, 4, 5, 4};
  CHECK(std::abs(pearson_pcc(p, y1) - 3.5 / std::sqrt(23.75)) < 1e-12);
  CHECK(std::abs(textbook_pcc(p, y1) - 3.5 / std::sqrt(23.75)) < 1e-12);
  // labels 1,3,2,4: sxy = 4, sxx = 5, syy = 5
  const std::vector<double> y2{1, 3, 2, 4};
  CHECK(std::abs(pearson_pcc(p, y2) - 0.8) < 1e-12);
  CHECK(std::abs(textbook_pcc(p, y2) - 0.8) < 1e-12);
}

TEST_CASE("pcc self and anti correlation") {
  Rng rng(1);
  std::vector<double> x(50), neg;
  for (auto& v : x) v = rng.normal();
  for (double v : x) neg.push_back(-v);
  CHECK(pearson_pcc(x, x) == Catch::Approx(1.0).margin(1e-15));
  CHECK(pearson_pcc(x, neg) == Catch::Approx(-1.0).margin(1e-15));
}

TEST_CASE("pcc properties on random vectors") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(100);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.5 * x[i] + rng.normal();
    }
    const double r = pearson_pcc(x, y);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
    CHECK(pearson_pcc(y, x) == r);
    CHECK(std::abs(r - textbook_pcc(x, y)) < 1e-9);
    const double a = rng.uniform(0.1, 10.0), b = rng.uniform(-5.0, 5.0);
    std::vector<double> ax;
    for (double v : x) ax.push_back(a * v + b);
    CHECK(std::abs(pearson_pcc(ax, y) - r) < 1e-12);
    CHECK(std::abs(pearson_pcc(x, ax) - 1.0) < 1e-12);
  }
}

TEST_CASE("degenerate pcc inputs raise errors") {
  const std::vector<double> c{0.5, 0.5, 0.5}, v{1, 2, 3};
  try {
    pearson_pcc(c, v);
    FAIL("expected degenerate");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate);
  }
  CHECK_THROWS_AS(pearson_pcc(v, c), Error);
  CHECK_THROWS_AS(pearson_pcc(std::vector<double>{1}, std::vector<double>{1}), Error);
  CHECK_THROWS_AS(pearson_pcc(v, std::vector<double>{1, 2}), Error);
}

TEST_CASE("evaluate reports rows whose replayed pcc matches") {
  auto cfg = tiny_config();
  Rng rng(3);
  std::vector<WordSample> test;
  for (int i = 0; i < 40; ++i) {
    auto s = random_word(6, cfg.d_mfcc, cfg.d_deep, cfg.n_phones, rng, Provenance::human_labeled);
    s.utt_id = "u" + std::to_string(i % 7);
    s.word_index = 40 - i;
    test.push_back(std::move(s));
  }
  Rng init(4);
  const auto m = init_model<float>(cfg, init);
  const auto r = evaluate(m, std::span<const WordSample>(test));
  REQUIRE(r.rows.size() == 40);
  for (std::size_t i = 1; i < r.rows.size(); ++i)
    CHECK(std::tie(r.rows[i - 1].utt_id, r.rows[i - 1].word_index) < std::tie(r.rows[i].utt_id, r.rows[i].word_index));
  // replay from the CSV text
  std::istringstream csv(predictions_csv(r.rows));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "utt_id,word,word_index,target,prediction");
  std::vector<double> y, p;
  while (std::getline(csv, line)) {
    const auto last = line.rfind(','), prev = line.rfind(',', last - 1);
    y.push_back(std::stod(line.substr(prev + 1, last - prev - 1)));
    p.push_back(std::stod(line.substr(last + 1)));
  }
  CHECK(std::abs(textbook_pcc(p, y) - r.pcc) < 1e-9);

  auto mixed = test;
  mixed[0].provenance = Provenance::mixup;
  CHECK_THROWS_AS(evaluate(m, std::span<const WordSample>(mixed)), Error);
  CHECK_THROWS_AS(evaluate(m, std::span<const WordSample>{}), Error);
}

TEST_CASE("a zeroed head is reported as degenerate") {
  auto cfg = tiny_config();
  Rng rng(5), init(6);
  auto m = init_model<float>(cfg, init);
  for (std::size_t k = 0; k < m.params.size(); ++k)
    if (m.param_names[k].rfind("head", 0) == 0) m.params[k].setZero();
  std::vector<WordSample> test;
  for (int i = 0; i < 5; ++i) test.push_back(random_word(6, cfg.d_mfcc, cfg.d_deep, cfg.n_phones, rng, Provenance::human_labeled));
  try {
    evaluate(m, std::span<const WordSample>(test));
    FAIL("expected degenerate");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate);
  }
}

TEST_CASE("sweep report is sorted and header-only when empty") {
  CHECK(sweep_report({}) == "aug_size,feature_set,pcc\n");
  const auto csv = sweep_report({{500000, FeatureSet::multi, 0.6}, {50000, FeatureSet::multi, 0.5}, {100000, FeatureSet::multi, 0.55}});
  std::istringstream is(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[1].rfind("50000,", 0) == 0);
  CHECK(lines[2].rfind("100000,", 0) == 0);
  CHECK(lines[3].rfind("500000,", 0) == 0);
}
