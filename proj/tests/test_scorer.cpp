#include <catch_amalgamated.hpp>

#include <cmath>

#include "support.hpp"

using namespace gmx;
using gmx_test::random_word;
using gmx_test::tiny_config;

namespace {

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
};

GradCheck check_gradients(ScorerConfig cfg, std::vector<std::size_t> lengths, std::uint64_t seed) {
  Rng rng(seed);
  auto m = init_model<double>(cfg, rng);
  // move BN affine params and biases off their init so every path is exercised
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (m.param_names[i].find("bn") != std::string::npos || m.param_names[i].ends_with("bias"))
      for (Eigen::Index k = 0; k < m.params[i].size(); ++k) m.params[i].data()[k] += rng.uniform(-0.3, 0.3);

  std::vector<WordSample> words;
  for (auto L : lengths) words.push_back(random_word(L, cfg.d_mfcc, cfg.d_deep, cfg.n_phones, rng));
  std::vector<const WordSample*> batch;
  for (const auto& w : words) batch.push_back(&w);
  const std::span<const WordSample* const> bs(batch);
  const std::uint64_t mask_seed = seed + 99;

  Rng mask(mask_seed);
  const auto tr = forward_batch(m, bs, Mode::train, &mask);
  std::vector<double> p(tr.p.begin(), tr.p.end()), y;
  for (const auto& w : words) y.push_back(w.target);
  const auto grads = backward(m, tr, mse_gradient(p, y));

  GradCheck out;
  const double h = 1e-5;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    for (Eigen::Index k = 0; k < m.params[i].size(); ++k) {
      double& w = m.params[i].data()[k];
      const double w0 = w;
      w = w0 + h;
      const double lp = gmx_test::batch_loss(m, bs, mask_seed);
      w = w0 - h;
      const double lm = gmx_test::batch_loss(m, bs, mask_seed);
      w = w0;
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = grads.g[i].data()[k];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = m.param_names[i] + "[" + std::to_string(k) + "]";
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("gradient check on the tiny configuration") {
  const auto r = check_gradients(tiny_config(), {8, 8}, 1);
  INFO("worst " << r.worst);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("gradient check with ragged and padded words") {
  const auto r = check_gradients(tiny_config(), {1, 5, 8}, 2);
  INFO("worst " << r.worst);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("gradient check for configuration switches") {
  SECTION("shared towers") {
    auto c = tiny_config();
    c.d_deep = c.d_mfcc;
    c.share_towers = true;
    const auto r = check_gradients(c, {6, 9}, 3);
    INFO("worst " << r.worst);
    CHECK(r.max_rel < 1e-4);
  }
  SECTION("separate embeddings") {
    auto c = tiny_config();
    c.share_embedding = false;
    const auto r = check_gradients(c, {7, 4}, 4);
    INFO("worst " << r.worst);
    CHECK(r.max_rel < 1e-4);
  }
  SECTION("single tower") {
    for (auto fs : {FeatureSet::mfcc, FeatureSet::deep}) {
      auto c = tiny_config();
      c.features = fs;
      const auto r = check_gradients(c, {8, 3}, 5);
      INFO(feature_set_name(fs) << " worst " << r.worst);
      CHECK(r.max_rel < 1e-4);
    }
  }
  SECTION("no dropout") {
    auto c = tiny_config();
    c.dropout = 0.0;
    const auto r = check_gradients(c, {8, 8}, 6);
    INFO("worst " << r.worst);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("layer lengths follow the window formula") {
  ScorerConfig c;
  auto oracle = [](std::size_t L, std::size_t k, std::size_t p, std::size_t s) { return (L + 2 * p - k) / s + 1; };
  for (std::size_t L0 : {2u, 5u, 10u, 37u, 200u}) {
    const auto L = layer_lengths(c, L0);
    const std::size_t l1 = oracle(L0, 3, 1, 1), l2 = oracle(l1, 3, 1, 1), l3 = oracle(l2, 2, 0, 2), l4 = oracle(l3, 1, 0, 1);
    CHECK(L[1] == l1);
    CHECK(L[2] == l2);
    CHECK(L[3] == l3);
    CHECK(L[4] == l4);
    CHECK(L[3] == L0 / 2);
  }
  ScorerConfig nopad;
  nopad.padding = {0, 0, 0};
  CHECK(layer_lengths(nopad, 10)[1] == 8);
  CHECK(window_out_length(10, 3, 0) == 8);
}

TEST_CASE("trace tensors have the ledger shapes") {
  auto c = tiny_config();
  Rng rng(7);
  const auto m = init_model<double>(c, rng);
  for (std::size_t L0 : {2u, 5u, 10u, 37u, 200u}) {
    const auto w = random_word(L0, c.d_mfcc, c.d_deep, c.n_phones, rng);
    const WordSample* ptr = &w;
    const auto tr = forward_batch(m, std::span<const WordSample* const>(&ptr, 1), Mode::eval);
    const auto L = layer_lengths(c, L0);
    for (Stream s : {Stream::deep, Stream::mfcc}) {
      const auto& tw = tr.towers[static_cast<std::size_t>(s)];
      CHECK(tw.x0.rows() == static_cast<Eigen::Index>(L0));
      CHECK(tw.x0.cols() == static_cast<Eigen::Index>(c.d_hidden));
      CHECK(tw.layers[0].out.rows() == static_cast<Eigen::Index>(L[1]));
      CHECK(tw.layers[1].out.rows() == static_cast<Eigen::Index>(L[2]));
      CHECK(tw.pooled.rows() == static_cast<Eigen::Index>(L[3]));
      CHECK(tw.layers[2].out.rows() == static_cast<Eigen::Index>(L[4]));
      CHECK(tw.h.cols() == static_cast<Eigen::Index>(c.filters));
    }
    CHECK(tr.u.cols() == static_cast<Eigen::Index>(2 * c.filters));
    CHECK(tr.z1.cols() == static_cast<Eigen::Index>(c.d_hidden));
  }
}

TEST_CASE("short words are edge-padded to the geometric minimum") {
  ScorerConfig c = tiny_config();
  CHECK(min_word_length(c) == 2);
  Rng rng(8);
  const auto m = init_model<float>(c, rng);
  auto w = random_word(1, c.d_mfcc, c.d_deep, c.n_phones, rng);
  const WordSample* ptr = &w;
  const auto tr = forward_batch(m, std::span<const WordSample* const>(&ptr, 1), Mode::eval);
  CHECK(tr.padded_samples == 1);
  CHECK(tr.lengths[0][0] == 2);
  // the padded word equals the explicit two-frame repetition
  WordSample twice = w;
  twice.phones = {w.phones[0], w.phones[0]};
  {
    std::vector<float> mv, dv;
    for (int k = 0; k < 2; ++k) {
      mv.insert(mv.end(), w.mfcc.data().begin(), w.mfcc.data().end());
      dv.insert(dv.end(), w.deep.data().begin(), w.deep.data().end());
    }
    twice.mfcc = FeatureMatrix(2, c.d_mfcc, mv);
    twice.deep = FeatureMatrix(2, c.d_deep, dv);
  }
  CHECK(forward(m, w) == forward(m, twice));

  c.pad_short = false;
  const auto strict = init_model<float>(c, rng);
  CHECK_THROWS_AS(forward(strict, w), Error);
}

TEST_CASE("predictions are probabilities and eval mode is batch independent") {
  auto c = tiny_config();
  Rng rng(9);
  auto m = init_model<double>(c, rng);
  std::vector<WordSample> words;
  for (std::size_t L : {1u, 2u, 3u, 8u, 13u, 40u}) words.push_back(random_word(L, c.d_mfcc, c.d_deep, c.n_phones, rng));
  std::vector<const WordSample*> batch;
  for (const auto& w : words) batch.push_back(&w);
  const auto tr = forward_batch(m, std::span<const WordSample* const>(batch), Mode::eval);
  for (std::size_t i = 0; i < words.size(); ++i) {
    CHECK(tr.p[i] > 0.0);
    CHECK(tr.p[i] < 1.0);
    CHECK(forward(m, words[i]) == Catch::Approx(tr.p[i]).epsilon(1e-12));
  }
}

TEST_CASE("train mode needs a random stream and is reproducible") {
  auto c = tiny_config();
  Rng rng(10);
  const auto m = init_model<float>(c, rng);
  const auto w = random_word(6, c.d_mfcc, c.d_deep, c.n_phones, rng);
  CHECK_THROWS_AS(forward(m, w, Mode::train), Error);
  Rng a(5), b(5);
  CHECK(forward(m, w, Mode::train, &a) == forward(m, w, Mode::train, &b));
  CHECK(forward(m, w) == forward(m, w));
}

TEST_CASE("conv tower forward agrees with the batch path") {
  auto c = tiny_config();
  Rng rng(11);
  const auto m = init_model<double>(c, rng);
  const auto w = random_word(9, c.d_mfcc, c.d_deep, c.n_phones, rng);
  const WordSample* ptr = &w;
  const auto tr = forward_batch(m, std::span<const WordSample* const>(&ptr, 1), Mode::eval);
  for (Stream s : {Stream::deep, Stream::mfcc}) {
    const auto& tw = tr.towers[static_cast<std::size_t>(s)];
    const RowVec<double> h = conv_tower_forward(m, s, tw.x0);
    CHECK((h - tw.h.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
  Mat<double> one = Mat<double>::Zero(1, static_cast<Eigen::Index>(c.d_hidden));
  CHECK_THROWS_AS(conv_tower_forward(m, Stream::deep, one), Error);
}

TEST_CASE("phonetic features add the phone embedding to the rectified projection") {
  auto c = tiny_config();
  Rng rng(12);
  const auto m = init_model<double>(c, rng);
  const auto w = random_word(4, c.d_mfcc, c.d_deep, c.n_phones, rng);
  Mat<double> x(4, static_cast<Eigen::Index>(c.d_mfcc));
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < static_cast<int>(c.d_mfcc); ++d) x(t, d) = w.mfcc(static_cast<std::size_t>(t), static_cast<std::size_t>(d));
  const auto x0 = phonetic_features(m, Stream::mfcc, x, w.phones);
  const auto& slot = m.tower(Stream::mfcc);
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < static_cast<int>(c.d_hidden); ++j) {
      double a = m.params[slot.in_b](0, j);
      for (int d = 0; d < static_cast<int>(c.d_mfcc); ++d) a += x(t, d) * m.params[slot.in_w](d, j);
      const double e = m.params[slot.emb](w.phones[static_cast<std::size_t>(t)].index, j);
      CHECK(x0(t, j) == Catch::Approx(std::max(a, 0.0) + e).margin(1e-12));
    }
}

TEST_CASE("batch norm normalizes over batch and time in train mode") {
  auto c = tiny_config();
  c.dropout = 0.0;
  Rng rng(13);
  const auto m = init_model<double>(c, rng);
  std::vector<WordSample> words;
  for (std::size_t L : {5u, 9u, 12u}) words.push_back(random_word(L, c.d_mfcc, c.d_deep, c.n_phones, rng));
  std::vector<const WordSample*> batch;
  for (const auto& w : words) batch.push_back(&w);
  const auto tr = forward_batch(m, std::span<const WordSample* const>(batch), Mode::train, &rng);
  for (const auto& layer : tr.towers[0].layers) {
    const auto& z = layer.z;  // gamma 1, beta 0 at init
    const auto n = static_cast<double>(z.rows());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double mean = z.col(j).sum() / n;
      const double var = (z.col(j).array() - mean).square().sum() / n;
      CHECK(std::abs(mean) < 1e-9);
      const double raw_var = layer.bn.var(j);
      CHECK(var == Catch::Approx(raw_var / (raw_var + c.bn_eps)).epsilon(1e-9));
    }
  }
}

TEST_CASE("running statistics use momentum and the unbiased variance") {
  auto c = tiny_config();
  Rng rng(14);
  auto m = init_model<double>(c, rng);
  const auto before = m.buffers;
  std::vector<WordSample> words;
  for (std::size_t L : {4u, 6u}) words.push_back(random_word(L, c.d_mfcc, c.d_deep, c.n_phones, rng));
  std::vector<const WordSample*> batch{&words[0], &words[1]};
  const auto tr = forward_batch(m, std::span<const WordSample* const>(batch), Mode::train, &rng);
  update_running_stats(m, tr);
  const auto& slot = m.tower(Stream::deep);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& y = tr.towers[0].layers[l].y;
    const auto n = static_cast<double>(y.rows());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      const double mean = y.col(j).mean();
      const double var_unbiased = (y.col(j).array() - mean).square().sum() / (n - 1);
      CHECK(m.buffers[slot.run_mean[l]](0, j) ==
            Catch::Approx(0.9 * before[slot.run_mean[l]](0, j) + 0.1 * mean).epsilon(1e-12));
      CHECK(m.buffers[slot.run_var[l]](0, j) ==
            Catch::Approx(0.9 * before[slot.run_var[l]](0, j) + 0.1 * var_unbiased).epsilon(1e-12));
    }
  }
}

TEST_CASE("tensor layout depends on the configuration switches") {
  ScorerConfig c = tiny_config();
  auto names = make_model_layout<float>(c).param_names;
  CHECK(names.front() == "embedding");
  CHECK(std::find(names.begin(), names.end(), "deep.conv1.weight") != names.end());
  CHECK(std::find(names.begin(), names.end(), "mfcc.conv1.weight") != names.end());

  c.features = FeatureSet::mfcc;
  const auto single = make_model_layout<float>(c);
  CHECK(single.params[single.head1_w].cols() == static_cast<Eigen::Index>(c.filters));
  for (const auto& n : single.param_names) CHECK(!n.starts_with("deep."));

  c.features = FeatureSet::multi;
  c.share_towers = true;
  const auto shared = make_model_layout<float>(c);
  CHECK(shared.tower(Stream::deep).conv == shared.tower(Stream::mfcc).conv);
  CHECK(shared.params[shared.head1_w].cols() == static_cast<Eigen::Index>(2 * c.filters));

  c.share_towers = false;
  c.share_embedding = false;
  const auto sep = make_model_layout<float>(c);
  CHECK(sep.tower(Stream::deep).emb != sep.tower(Stream::mfcc).emb);
}

TEST_CASE("configuration validation") {
  ScorerConfig c;
  CHECK_THROWS_AS(c.validate(), Error);  // n_phones unset
  c.n_phones = 3;
  CHECK_NOTHROW(c.validate());
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c.dropout = 0.1;
  c.kernels = {0, 3, 1};
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("float and double forward passes agree") {
  auto c = tiny_config();
  Rng rng(15);
  const auto md = init_model<double>(c, rng);
  const auto mf = cast_model<float>(md);
  for (int i = 0; i < 10; ++i) {
    const auto w = random_word(3 + static_cast<std::size_t>(i), c.d_mfcc, c.d_deep, c.n_phones, rng);
    CHECK(forward(mf, w) == Catch::Approx(forward(md, w)).margin(1e-5));
  }
}

TEST_CASE("mismatched feature widths are rejected") {
  auto c = tiny_config();
  Rng rng(16);
  const auto m = init_model<float>(c, rng);
  const auto w = random_word(5, c.d_mfcc + 1, c.d_deep, c.n_phones, rng);
  try {
    forward(m, w);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::dimension_mismatch);
  }
}

TEST_CASE("adam first step moves each weight by the learning rate") {
  std::vector<double> w{1.0, -2.0}, g{0.5, -1e-3}, m(2, 0.0), v(2, 0.0);
  AdamOptions o;
  adam_update<double>(w, g, m, v, 1, o);
  // with bias correction, step 1 is lr * g / (|g| + eps')
  CHECK(w[0] == Catch::Approx(1.0 - 0.002 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK(w[1] == Catch::Approx(-2.0 + 0.002 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam minimizes a one-dimensional quadratic") {
  std::vector<double> w{0.0}, m{0.0}, v{0.0};
  AdamOptions o;
  o.learning_rate = 0.05;
  for (std::uint64_t step = 1; step <= 500; ++step) {
    std::vector<double> g{2.0 * (w[0] - 3.0)};
    adam_update<double>(w, g, m, v, step, o);
  }
  CHECK(std::abs(w[0] - 3.0) < 1e-3);

  // default learning rate: the per-step move is bounded by ~lr
  std::vector<double> w2{0.0}, m2{0.0}, v2{0.0};
  AdamOptions d;
  for (std::uint64_t step = 1; step <= 500; ++step) {
    std::vector<double> g{2.0 * (w2[0] - 3.0)};
    adam_update<double>(w2, g, m2, v2, step, d);
  }
  CHECK(w2[0] > 0.9);
  CHECK(w2[0] <= 500 * 0.002 + 1e-9);
}
