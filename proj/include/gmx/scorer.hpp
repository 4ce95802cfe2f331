#pragma once

// Dual-tower 1D-CNN word scorer with exact reverse-mode gradients.
//
// Per stream (deep, mfcc):
//   phonetic features  x0 = relu(x A + c) + E[phone]            T x H
//   conv(k0) -> BN -> ReLU -> dropout                            L1 x F
//   conv(k1) -> BN -> ReLU -> dropout -> maxpool(pk, ps)         L3 x F
//   conv(k2) -> BN -> ReLU -> dropout                            L4 x F
//   mean over time                                               F
// Head: p = sigmoid(w2 . (W1 [h_deep; h_mfcc] + b1) + b2)
//
// Batches are ragged. Each layer stacks the rows of all samples; a conv
// layer copies them into a zero-padded buffer (pad rows around every sample)
// and multiplies an overlapping-row im2col view of it with the kernel.
// Batch norm statistics run over every frame of every sample in the batch.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gmx/core.hpp"
#include "gmx/rng.hpp"

namespace gmx {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class FeatureSet { mfcc, deep, multi };

inline FeatureSet parse_feature_set(std::string_view s) {
  if (s == "mfcc") return FeatureSet::mfcc;
  if (s == "deep") return FeatureSet::deep;
  if (s == "multi" || s == "multi-source" || s == "both") return FeatureSet::multi;
  throw Error(Errc::usage, "unknown feature set '" + std::string(s) + "' (mfcc|deep|multi)");
}

inline const char* feature_set_name(FeatureSet f) {
  switch (f) {
    case FeatureSet::mfcc: return "mfcc";
    case FeatureSet::deep: return "deep";
    case FeatureSet::multi: return "multi";
  }
  return "?";
}

enum class Stream : std::size_t { deep = 0, mfcc = 1 };
enum class Mode { train, eval };

struct ScorerConfig {
  std::size_t d_mfcc = 39;
  std::size_t d_deep = 512;
  std::size_t d_hidden = 32;
  std::size_t filters = 32;
  std::size_t n_phones = 0;
  std::array<std::size_t, 3> kernels{3, 3, 1};
  std::array<std::size_t, 3> padding{1, 1, 0};
  std::size_t pool_kernel = 2;
  std::size_t pool_stride = 2;
  double dropout = 0.1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double learning_rate = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  FeatureSet features = FeatureSet::multi;
  bool share_towers = false;
  bool share_embedding = true;
  bool pad_short = true;  // edge-pad words shorter than the geometric minimum

  bool uses(Stream s) const {
    return features == FeatureSet::multi || (s == Stream::deep ? features == FeatureSet::deep
                                                                : features == FeatureSet::mfcc);
  }
  std::size_t tower_count() const { return features == FeatureSet::multi ? 2 : 1; }
  std::size_t input_dim(Stream s) const { return s == Stream::deep ? d_deep : d_mfcc; }

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(Errc::usage, "invalid scorer config: " + m); };
    if (d_mfcc == 0 || d_deep == 0 || d_hidden == 0 || filters == 0) bad("dimensions must be positive");
    if (n_phones == 0) bad("n_phones must be positive");
    for (auto k : kernels)
      if (k == 0) bad("kernel sizes must be positive");
    if (pool_kernel == 0 || pool_stride == 0) bad("pool kernel/stride must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must be in [0,1)");
    if (!(learning_rate > 0.0)) bad("learning_rate must be positive");
    if (!(bn_eps > 0.0)) bad("bn_eps must be positive");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) bad("bn_momentum must be in (0,1]");
    if (batch_size == 0) bad("batch_size must be positive");
  }
};

/// Output length of a stride-s window of size k over L frames with `pad`
/// zero frames on each side; 0 when the window does not fit.
inline std::size_t window_out_length(std::size_t L, std::size_t k, std::size_t pad, std::size_t stride = 1) {
  if (L + 2 * pad < k) return 0;
  return (L + 2 * pad - k) / stride + 1;
}

/// L0..L4: input, conv1, conv2, maxpool, conv3 lengths.
inline std::array<std::size_t, 5> layer_lengths(const ScorerConfig& c, std::size_t L0) {
  std::array<std::size_t, 5> L{L0, 0, 0, 0, 0};
  L[1] = window_out_length(L[0], c.kernels[0], c.padding[0]);
  L[2] = L[1] ? window_out_length(L[1], c.kernels[1], c.padding[1]) : 0;
  L[3] = L[2] ? window_out_length(L[2], c.pool_kernel, 0, c.pool_stride) : 0;
  L[4] = L[3] ? window_out_length(L[3], c.kernels[2], c.padding[2]) : 0;
  return L;
}

/// Shortest word length for which every layer keeps at least one frame.
inline std::size_t min_word_length(const ScorerConfig& c) {
  for (std::size_t L0 = 1; L0 < 100000; ++L0)
    if (layer_lengths(c, L0)[4] >= 1) return L0;
  throw Error(Errc::usage, "scorer geometry admits no input length");
}

template <class T>
struct ScorerModel {
  struct TowerSlots {
    std::size_t in_w = 0, in_b = 0, emb = 0;
    std::array<std::size_t, 3> conv{}, gamma{}, beta{};
    std::array<std::size_t, 3> run_mean{}, run_var{};
  };

  ScorerConfig cfg;
  std::vector<std::string> param_names;
  std::vector<Mat<T>> params;
  std::vector<std::string> buffer_names;
  std::vector<Mat<T>> buffers;  // batch-norm running statistics
  std::array<TowerSlots, 2> towers{};
  std::size_t head1_w = 0, head1_b = 0, head2_w = 0, head2_b = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.size());
    return n;
  }

  const TowerSlots& tower(Stream s) const { return towers[static_cast<std::size_t>(s)]; }
};

namespace detail {

template <class T>
std::size_t add_param(ScorerModel<T>& m, std::string name, Eigen::Index rows, Eigen::Index cols) {
  m.param_names.push_back(std::move(name));
  m.params.push_back(Mat<T>::Zero(rows, cols));
  return m.params.size() - 1;
}

template <class T>
std::size_t add_buffer(ScorerModel<T>& m, std::string name, Eigen::Index cols, T fill) {
  m.buffer_names.push_back(std::move(name));
  m.buffers.push_back(Mat<T>::Constant(1, cols, fill));
  return m.buffers.size() - 1;
}

}  // namespace detail

/// Lays out every tensor in checkpoint order without initializing values.
template <class T>
ScorerModel<T> make_model_layout(const ScorerConfig& cfg) {
  cfg.validate();
  ScorerModel<T> m;
  m.cfg = cfg;
  const auto H = static_cast<Eigen::Index>(cfg.d_hidden);
  const auto F = static_cast<Eigen::Index>(cfg.filters);

  std::size_t shared_emb = 0;
  if (cfg.share_embedding) shared_emb = detail::add_param(m, "embedding", static_cast<Eigen::Index>(cfg.n_phones), H);

  bool have_shared_tower = false;
  typename ScorerModel<T>::TowerSlots shared{};
  for (Stream s : {Stream::deep, Stream::mfcc}) {
    if (!cfg.uses(s)) continue;
    auto& slot = m.towers[static_cast<std::size_t>(s)];
    const std::string pre = s == Stream::deep ? "deep." : "mfcc.";
    slot.in_w = detail::add_param(m, pre + "input.weight", static_cast<Eigen::Index>(cfg.input_dim(s)), H);
    slot.in_b = detail::add_param(m, pre + "input.bias", 1, H);
    slot.emb = cfg.share_embedding ? shared_emb
                                   : detail::add_param(m, pre + "embedding", static_cast<Eigen::Index>(cfg.n_phones), H);
    if (cfg.share_towers && have_shared_tower) {
      slot.conv = shared.conv;
      slot.gamma = shared.gamma;
      slot.beta = shared.beta;
      slot.run_mean = shared.run_mean;
      slot.run_var = shared.run_var;
      continue;
    }
    const std::string tpre = cfg.share_towers ? "tower." : pre;
    Eigen::Index in_ch = H;
    for (std::size_t l = 0; l < 3; ++l) {
      const std::string n = std::to_string(l + 1);
      slot.conv[l] = detail::add_param(m, tpre + "conv" + n + ".weight", F,
                                       static_cast<Eigen::Index>(cfg.kernels[l]) * in_ch);
      slot.gamma[l] = detail::add_param(m, tpre + "bn" + n + ".gamma", 1, F);
      slot.beta[l] = detail::add_param(m, tpre + "bn" + n + ".beta", 1, F);
      slot.run_mean[l] = detail::add_buffer(m, tpre + "bn" + n + ".running_mean", F, T(0));
      slot.run_var[l] = detail::add_buffer(m, tpre + "bn" + n + ".running_var", F, T(1));
      in_ch = F;
    }
    shared = slot;
    have_shared_tower = true;
  }
  const auto head_in = static_cast<Eigen::Index>(cfg.tower_count()) * F;
  m.head1_w = detail::add_param(m, "head.fc1.weight", H, head_in);
  m.head1_b = detail::add_param(m, "head.fc1.bias", 1, H);
  m.head2_w = detail::add_param(m, "head.fc2.weight", 1, H);
  m.head2_b = detail::add_param(m, "head.fc2.bias", 1, 1);
  return m;
}

/// Fan-in scaled uniform weights; batch-norm gamma 1, beta 0.
template <class T>
ScorerModel<T> init_model(const ScorerConfig& cfg, Rng& rng) {
  auto m = make_model_layout<T>(cfg);
  auto fill = [&](std::size_t idx, double bound) {
    for (Eigen::Index i = 0; i < m.params[idx].size(); ++i) m.params[idx].data()[i] = T(rng.uniform(-bound, bound));
  };
  auto bound = [](Eigen::Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& name = m.param_names[i];
    auto& p = m.params[i];
    if (name.ends_with(".gamma")) {
      p.setOnes();
    } else if (name.ends_with(".beta")) {
      p.setZero();
    } else if (name.ends_with("embedding")) {
      fill(i, bound(p.cols()));
    } else if (name.ends_with(".bias")) {
      // bias shares the fan-in of the weight registered just before it
      fill(i, bound(name.starts_with("head") ? m.params[i - 1].cols() : m.params[i - 1].rows()));
    } else if (name.ends_with("input.weight")) {
      fill(i, bound(p.rows()));
    } else {
      fill(i, bound(p.cols()));
    }
  }
  return m;
}

template <class T>
struct BnCache {
  RowVec<T> mean, var, inv_std;
  Mat<T> xhat;
};

template <class T>
struct ConvLayerTrace {
  Mat<T> padded;  // zero-padded conv input
  Mat<T> y;       // conv output
  BnCache<T> bn;
  Mat<T> z;     // batch-norm output
  Mat<T> mask;  // inverted-dropout multipliers; empty when no dropout
  Mat<T> out;   // layer output after ReLU and dropout
};

template <class T>
struct TowerTrace {
  Mat<T> x;   // stream input rows
  Mat<T> a0;  // x A + c
  Mat<T> x0;  // phonetic features
  std::array<ConvLayerTrace<T>, 3> layers;
  std::vector<Eigen::Index> pool_arg;  // per pooled cell: source row in layer-2 output
  Mat<T> pooled;
  Mat<T> h;  // B x F mean over time
};

/// Cached activations of one batch forward pass.
template <class T>
struct ForwardTrace {
  Mode mode = Mode::eval;
  std::size_t batch = 0;
  std::size_t param_count = 0;
  std::size_t padded_samples = 0;
  std::array<std::vector<std::size_t>, 5> lengths;  // per layer, per sample
  std::vector<PhoneId> frame_phones;
  std::array<TowerTrace<T>, 2> towers;
  Mat<T> u;   // B x (towers*F)
  Mat<T> z1;  // B x H
  Mat<T> z2;  // B x 1
  std::vector<T> p;
};

namespace detail {

template <class T>
Mat<T> conv_forward(const Mat<T>& in, std::span<const std::size_t> len_in, std::size_t k, std::size_t pad,
                    const Mat<T>& w, Mat<T>& padded) {
  const Eigen::Index C = in.cols();
  const auto K = static_cast<Eigen::Index>(k);
  const auto P = static_cast<Eigen::Index>(pad);
  Eigen::Index M = 0, n_out = 0;
  for (auto L : len_in) {
    M += static_cast<Eigen::Index>(L) + 2 * P;
    n_out += static_cast<Eigen::Index>(L) + 2 * P - K + 1;
  }
  padded.setZero(M, C);
  Eigen::Index src = 0, dst = 0;
  for (auto L0 : len_in) {
    const auto L = static_cast<Eigen::Index>(L0);
    padded.middleRows(dst + P, L) = in.middleRows(src, L);
    src += L;
    dst += L + 2 * P;
  }
  const Eigen::Index R = M - K + 1;
  Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>> windows(padded.data(), R, K * C, Eigen::OuterStride<>(C));
  Mat<T> full = windows * w.transpose();
  Mat<T> out(n_out, w.rows());
  Eigen::Index o = 0;
  dst = 0;
  for (auto L0 : len_in) {
    const auto L = static_cast<Eigen::Index>(L0);
    const Eigen::Index Lo = L + 2 * P - K + 1;
    out.middleRows(o, Lo) = full.middleRows(dst, Lo);
    o += Lo;
    dst += L + 2 * P;
  }
  return out;
}

template <class T>
Mat<T> conv_backward(const Mat<T>& dout, std::span<const std::size_t> len_in, std::size_t k, std::size_t pad,
                     const Mat<T>& w, const Mat<T>& padded, Mat<T>& dw) {
  const Eigen::Index C = padded.cols();
  const Eigen::Index M = padded.rows();
  const auto K = static_cast<Eigen::Index>(k);
  const auto P = static_cast<Eigen::Index>(pad);
  const Eigen::Index R = M - K + 1;
  Mat<T> dfull = Mat<T>::Zero(R, w.rows());
  Eigen::Index o = 0, dst = 0, n_in = 0;
  for (auto L0 : len_in) {
    const auto L = static_cast<Eigen::Index>(L0);
    const Eigen::Index Lo = L + 2 * P - K + 1;
    dfull.middleRows(dst, Lo) = dout.middleRows(o, Lo);
    o += Lo;
    dst += L + 2 * P;
    n_in += L;
  }
  Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>> windows(padded.data(), R, K * C, Eigen::OuterStride<>(C));
  dw.noalias() += dfull.transpose() * windows;
  const Mat<T> dwin = dfull * w;
  Mat<T> dpad = Mat<T>::Zero(M, C);
  for (Eigen::Index j = 0; j < K; ++j)
    dpad.middleRows(j, R) +=
        Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>(dwin.data() + j * C, R, C, Eigen::OuterStride<>(K * C));
  Mat<T> din(n_in, C);
  Eigen::Index src = 0;
  dst = 0;
  for (auto L0 : len_in) {
    const auto L = static_cast<Eigen::Index>(L0);
    din.middleRows(src, L) = dpad.middleRows(dst + P, L);
    src += L;
    dst += L + 2 * P;
  }
  return din;
}

template <class T>
void bn_forward(const Mat<T>& y, const Mat<T>& gamma, const Mat<T>& beta, const Mat<T>& run_mean,
                const Mat<T>& run_var, T eps, Mode mode, BnCache<T>& c, Mat<T>& z) {
  if (mode == Mode::train) {
    c.mean = y.colwise().mean();
    const Mat<T> centered = y.rowwise() - c.mean;
    c.var = centered.array().square().colwise().mean().matrix();
    c.inv_std = (c.var.array() + eps).rsqrt().matrix();
    c.xhat = (centered.array().rowwise() * c.inv_std.array()).matrix();
  } else {
    c.mean = run_mean.row(0);
    c.var = run_var.row(0);
    c.inv_std = (c.var.array() + eps).rsqrt().matrix();
    c.xhat = ((y.rowwise() - c.mean).array().rowwise() * c.inv_std.array()).matrix();
  }
  z = ((c.xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array()).matrix();
}

template <class T>
Mat<T> bn_backward(const Mat<T>& dz, const BnCache<T>& c, const Mat<T>& gamma, Mat<T>& dgamma, Mat<T>& dbeta) {
  const auto N = static_cast<T>(dz.rows());
  dgamma.row(0) += (dz.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dz.colwise().sum();
  const Mat<T> dxhat = (dz.array().rowwise() * gamma.row(0).array()).matrix();
  const RowVec<T> sum_dxhat = dxhat.colwise().sum();
  const RowVec<T> sum_dxhat_xhat = (dxhat.array() * c.xhat.array()).colwise().sum().matrix();
  Mat<T> dy = ((dxhat.array() * N).rowwise() - sum_dxhat.array() -
               (c.xhat.array().rowwise() * sum_dxhat_xhat.array()))
                  .matrix();
  dy.array().rowwise() *= (c.inv_std.array() / N);
  return dy;
}

}  // namespace detail

/// Per-frame relu(x A + c) + E[phone] for one stream. `frame_phones` has one
/// entry per row of `x`.
template <class T>
Mat<T> phonetic_features(const ScorerModel<T>& m, Stream s, const Mat<T>& x, std::span<const PhoneId> frame_phones,
                         Mat<T>* pre_activation = nullptr) {
  const auto& slot = m.tower(s);
  if (!m.cfg.uses(s)) throw Error(Errc::usage, "stream disabled in this scorer configuration");
  if (static_cast<std::size_t>(x.rows()) != frame_phones.size())
    throw Error(Errc::dimension_mismatch, "feature rows and per-frame phones differ in length");
  if (static_cast<std::size_t>(x.cols()) != m.cfg.input_dim(s))
    throw Error(Errc::dimension_mismatch, "feature width " + std::to_string(x.cols()) + " != configured " +
                                              std::to_string(m.cfg.input_dim(s)));
  Mat<T> a0 = x * m.params[slot.in_w];
  a0.rowwise() += m.params[slot.in_b].row(0);
  Mat<T> x0 = a0.cwiseMax(T(0));
  const auto& emb = m.params[slot.emb];
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    const auto ph = frame_phones[static_cast<std::size_t>(r)].index;
    if (ph >= static_cast<std::size_t>(emb.rows()))
      throw Error(Errc::unknown_phone,
                  "phone index " + std::to_string(ph) + " outside embedding table of " + std::to_string(emb.rows()));
    x0.row(r) += emb.row(ph);
  }
  if (pre_activation) *pre_activation = std::move(a0);
  return x0;
}

namespace detail {

/// Runs one conv tower over stacked phonetic features x0 (lengths[0] rows per sample).
template <class T>
void tower_forward(const ScorerModel<T>& m, Stream s, const std::array<std::vector<std::size_t>, 5>& lengths,
                   Mode mode, Rng* rng, TowerTrace<T>& tr) {
  const auto& cfg = m.cfg;
  const auto& slot = m.tower(s);
  const T keep_scale = T(1.0 / (1.0 - cfg.dropout));
  const bool drop = mode == Mode::train && cfg.dropout > 0.0;
  const std::array<std::size_t, 3> in_len_idx{0, 1, 3};
  const Mat<T>* input = &tr.x0;
  for (std::size_t l = 0; l < 3; ++l) {
    auto& L = tr.layers[l];
    L.y = conv_forward(*input, std::span<const std::size_t>(lengths[in_len_idx[l]]), cfg.kernels[l], cfg.padding[l],
                       m.params[slot.conv[l]], L.padded);
    bn_forward(L.y, m.params[slot.gamma[l]], m.params[slot.beta[l]], m.buffers[slot.run_mean[l]],
               m.buffers[slot.run_var[l]], T(cfg.bn_eps), mode, L.bn, L.z);
    L.out = L.z.cwiseMax(T(0));
    if (drop) {
      L.mask.resize(L.out.rows(), L.out.cols());
      for (Eigen::Index i = 0; i < L.mask.size(); ++i)
        L.mask.data()[i] = rng->uniform() < cfg.dropout ? T(0) : keep_scale;
      L.out.array() *= L.mask.array();
    } else {
      L.mask.resize(0, 0);
    }
    if (l == 1) {
      // max pooling over time, per sample
      const Mat<T>& a = L.out;
      const Eigen::Index F = a.cols();
      Eigen::Index n_out = 0;
      for (auto v : lengths[3]) n_out += static_cast<Eigen::Index>(v);
      tr.pooled.resize(n_out, F);
      tr.pool_arg.assign(static_cast<std::size_t>(n_out * F), 0);
      Eigen::Index src = 0, o = 0;
      for (std::size_t i = 0; i < lengths[2].size(); ++i) {
        for (std::size_t t = 0; t < lengths[3][i]; ++t, ++o) {
          const Eigen::Index base = src + static_cast<Eigen::Index>(t * cfg.pool_stride);
          for (Eigen::Index f = 0; f < F; ++f) {
            Eigen::Index best = base;
            for (Eigen::Index j = 1; j < static_cast<Eigen::Index>(cfg.pool_kernel); ++j)
              if (a(base + j, f) > a(best, f)) best = base + j;
            tr.pooled(o, f) = a(best, f);
            tr.pool_arg[static_cast<std::size_t>(o * F + f)] = best;
          }
        }
        src += static_cast<Eigen::Index>(lengths[2][i]);
      }
      input = &tr.pooled;
    } else {
      input = &L.out;
    }
  }
  // mean over time
  const Mat<T>& last = tr.layers[2].out;
  const std::size_t B = lengths[4].size();
  tr.h.resize(static_cast<Eigen::Index>(B), last.cols());
  Eigen::Index src = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const auto L = static_cast<Eigen::Index>(lengths[4][i]);
    tr.h.row(static_cast<Eigen::Index>(i)) = last.middleRows(src, L).colwise().mean();
    src += L;
  }
}

template <class T>
Mat<T> tower_backward(const ScorerModel<T>& m, Stream s, const std::array<std::vector<std::size_t>, 5>& lengths,
                      const TowerTrace<T>& tr, const Mat<T>& dh, std::vector<Mat<T>>& g) {
  const auto& cfg = m.cfg;
  const auto& slot = m.tower(s);
  const std::array<std::size_t, 3> in_len_idx{0, 1, 3};

  Mat<T> dout(tr.layers[2].out.rows(), tr.layers[2].out.cols());
  Eigen::Index src = 0;
  for (std::size_t i = 0; i < lengths[4].size(); ++i) {
    const auto L = static_cast<Eigen::Index>(lengths[4][i]);
    dout.middleRows(src, L).rowwise() = dh.row(static_cast<Eigen::Index>(i)) / T(L);
    src += L;
  }
  for (std::size_t l = 3; l-- > 0;) {
    const auto& L = tr.layers[l];
    if (l == 1) {
      // dout is w.r.t. the pooled rows; route to the argmax frames
      Mat<T> dfull = Mat<T>::Zero(L.out.rows(), L.out.cols());
      const Eigen::Index F = dfull.cols();
      for (Eigen::Index o = 0; o < dout.rows(); ++o)
        for (Eigen::Index f = 0; f < F; ++f) dfull(tr.pool_arg[static_cast<std::size_t>(o * F + f)], f) += dout(o, f);
      dout = std::move(dfull);
    }
    Mat<T> dz = dout;
    if (L.mask.size() > 0) dz.array() *= L.mask.array();
    dz = (L.z.array() > T(0)).select(dz, T(0));
    const Mat<T> dy = detail::bn_backward(dz, L.bn, m.params[slot.gamma[l]], g[slot.gamma[l]], g[slot.beta[l]]);
    const Mat<T>& padded = L.padded;
    dout = detail::conv_backward(dy, std::span<const std::size_t>(lengths[in_len_idx[l]]), cfg.kernels[l],
                                 cfg.padding[l], m.params[slot.conv[l]], padded, g[slot.conv[l]]);
  }
  return dout;  // gradient w.r.t. x0
}

}  // namespace detail

/// Batch forward pass. In train mode dropout masks are drawn from `rng` and
/// batch statistics are used; eval mode uses running statistics and no
/// dropout. The returned trace holds everything backward() needs.
template <class T>
ForwardTrace<T> forward_batch(const ScorerModel<T>& m, std::span<const WordSample* const> batch, Mode mode,
                              Rng* rng = nullptr) {
  const auto& cfg = m.cfg;
  if (batch.empty()) throw Error(Errc::empty_input, "empty batch");
  if (mode == Mode::train && cfg.dropout > 0.0 && rng == nullptr)
    throw Error(Errc::usage, "train-mode forward needs a random stream for dropout");
  ForwardTrace<T> tr;
  tr.mode = mode;
  tr.batch = batch.size();
  tr.param_count = m.params.size();
  const std::size_t min_len = min_word_length(cfg);

  for (const auto* s : batch) {
    if (s->phones.empty() || s->mfcc.rows() != s->phones.size() || s->deep.rows() != s->phones.size())
      throw Error(Errc::dimension_mismatch, "word sample '" + s->word + "' has inconsistent frame counts");
    std::size_t L0 = s->phones.size();
    if (L0 < min_len) {
      if (!cfg.pad_short)
        throw Error(Errc::dimension_mismatch, "word sample '" + s->word + "' has " + std::to_string(L0) +
                                                  " frames, geometry needs " + std::to_string(min_len));
      L0 = min_len;
      ++tr.padded_samples;
    }
    const auto L = layer_lengths(cfg, L0);
    for (std::size_t l = 0; l < 5; ++l) tr.lengths[l].push_back(L[l]);
    for (std::size_t t = 0; t < L0; ++t) tr.frame_phones.push_back(s->phones[std::min(t, s->phones.size() - 1)]);
  }
  const auto N0 = static_cast<Eigen::Index>(tr.frame_phones.size());

  for (Stream st : {Stream::deep, Stream::mfcc}) {
    if (!cfg.uses(st)) continue;
    auto& tw = tr.towers[static_cast<std::size_t>(st)];
    const auto D = static_cast<Eigen::Index>(cfg.input_dim(st));
    tw.x.resize(N0, D);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const FeatureMatrix& f = st == Stream::deep ? batch[i]->deep : batch[i]->mfcc;
      if (static_cast<Eigen::Index>(f.cols()) != D)
        throw Error(Errc::dimension_mismatch, "word sample '" + batch[i]->word + "' " +
                                                  (st == Stream::deep ? "deep" : "mfcc") + " width " +
                                                  std::to_string(f.cols()) + " != configured " + std::to_string(D));
      for (std::size_t t = 0; t < tr.lengths[0][i]; ++t, ++r) {
        const auto row = f.row(std::min(t, f.rows() - 1));
        for (Eigen::Index d = 0; d < D; ++d) tw.x(r, d) = static_cast<T>(row[static_cast<std::size_t>(d)]);
      }
    }
    tw.x0 = phonetic_features(m, st, tw.x, tr.frame_phones, &tw.a0);
    detail::tower_forward(m, st, tr.lengths, mode, rng, tw);
  }

  const auto F = static_cast<Eigen::Index>(cfg.filters);
  const auto B = static_cast<Eigen::Index>(batch.size());
  tr.u.resize(B, F * static_cast<Eigen::Index>(cfg.tower_count()));
  Eigen::Index col = 0;
  for (Stream st : {Stream::deep, Stream::mfcc}) {
    if (!cfg.uses(st)) continue;
    tr.u.middleCols(col, F) = tr.towers[static_cast<std::size_t>(st)].h;
    col += F;
  }
  tr.z1 = tr.u * m.params[m.head1_w].transpose();
  tr.z1.rowwise() += m.params[m.head1_b].row(0);
  tr.z2 = tr.z1 * m.params[m.head2_w].transpose();
  tr.z2.array() += m.params[m.head2_b](0, 0);
  tr.p.resize(batch.size());
  const T lo = std::numeric_limits<T>::denorm_min();
  const T hi = std::nextafter(T(1), T(0));
  for (Eigen::Index i = 0; i < B; ++i) {
    const T z = tr.z2(i, 0);
    if (!std::isfinite(z)) throw Error(Errc::numeric, "non-finite scorer pre-activation");
    tr.p[static_cast<std::size_t>(i)] = std::clamp(T(1) / (T(1) + std::exp(-z)), lo, hi);
  }
  return tr;
}

template <class T>
double forward(const ScorerModel<T>& m, const WordSample& sample, Mode mode = Mode::eval, Rng* rng = nullptr) {
  const WordSample* ptr = &sample;
  return static_cast<double>(forward_batch(m, std::span<const WordSample* const>(&ptr, 1), mode, rng).p[0]);
}

/// Conv tower over one word's phonetic features (T x d_hidden), returning
/// the mean-over-time F-vector.
template <class T>
RowVec<T> conv_tower_forward(const ScorerModel<T>& m, Stream s, const Mat<T>& x0, Mode mode = Mode::eval,
                             Rng* rng = nullptr) {
  if (!m.cfg.uses(s)) throw Error(Errc::usage, "stream disabled in this scorer configuration");
  const auto L = layer_lengths(m.cfg, static_cast<std::size_t>(x0.rows()));
  if (L[4] == 0)
    throw Error(Errc::dimension_mismatch, std::to_string(x0.rows()) + " frames is below the geometric minimum " +
                                              std::to_string(min_word_length(m.cfg)));
  std::array<std::vector<std::size_t>, 5> lengths;
  for (std::size_t l = 0; l < 5; ++l) lengths[l] = {L[l]};
  TowerTrace<T> tr;
  tr.x0 = x0;
  detail::tower_forward(m, s, lengths, mode, rng, tr);
  return tr.h.row(0);
}

template <class T>
struct Gradients {
  std::vector<Mat<T>> g;

  static Gradients zeros_like(const ScorerModel<T>& m) {
    Gradients out;
    out.g.reserve(m.params.size());
    for (const auto& p : m.params) out.g.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    return out;
  }
};

/// Exact gradients of sum_i dloss_dp[i] * p_i for the recorded forward pass.
template <class T>
Gradients<T> backward(const ScorerModel<T>& m, const ForwardTrace<T>& tr, std::span<const double> dloss_dp) {
  if (tr.mode != Mode::train) throw Error(Errc::usage, "backward needs a train-mode trace");
  if (tr.param_count != m.params.size() || dloss_dp.size() != tr.batch)
    throw Error(Errc::dimension_mismatch, "trace does not match model or loss gradient");
  auto grads = Gradients<T>::zeros_like(m);
  auto& g = grads.g;
  const auto B = static_cast<Eigen::Index>(tr.batch);
  Mat<T> dz2(B, 1);
  for (Eigen::Index i = 0; i < B; ++i) {
    const T p = tr.p[static_cast<std::size_t>(i)];
    dz2(i, 0) = static_cast<T>(dloss_dp[static_cast<std::size_t>(i)]) * p * (T(1) - p);
  }
  g[m.head2_w].noalias() += dz2.transpose() * tr.z1;
  g[m.head2_b](0, 0) += dz2.sum();
  const Mat<T> dz1 = dz2 * m.params[m.head2_w];
  g[m.head1_w].noalias() += dz1.transpose() * tr.u;
  g[m.head1_b].row(0) += dz1.colwise().sum();
  const Mat<T> du = dz1 * m.params[m.head1_w];

  const auto F = static_cast<Eigen::Index>(m.cfg.filters);
  Eigen::Index col = 0;
  for (Stream st : {Stream::deep, Stream::mfcc}) {
    if (!m.cfg.uses(st)) continue;
    const auto& tw = tr.towers[static_cast<std::size_t>(st)];
    const auto& slot = m.tower(st);
    const Mat<T> dh = du.middleCols(col, F);
    col += F;
    const Mat<T> dx0 = detail::tower_backward(m, st, tr.lengths, tw, dh, g);
    auto& demb = g[slot.emb];
    for (Eigen::Index r = 0; r < dx0.rows(); ++r) demb.row(tr.frame_phones[static_cast<std::size_t>(r)].index) += dx0.row(r);
    const Mat<T> da0 = (tw.a0.array() > T(0)).select(dx0, T(0));
    g[slot.in_w].noalias() += tw.x.transpose() * da0;
    g[slot.in_b].row(0) += da0.colwise().sum();
  }
  return grads;
}

/// Folds the batch statistics of a train-mode trace into the running stats.
template <class T>
void update_running_stats(ScorerModel<T>& m, const ForwardTrace<T>& tr) {
  if (tr.mode != Mode::train) return;
  const T mom = T(m.cfg.bn_momentum);
  for (Stream st : {Stream::deep, Stream::mfcc}) {
    if (!m.cfg.uses(st)) continue;
    const auto& slot = m.tower(st);
    const auto& tw = tr.towers[static_cast<std::size_t>(st)];
    for (std::size_t l = 0; l < 3; ++l) {
      const auto& bn = tw.layers[l].bn;
      const auto n = static_cast<T>(tw.layers[l].y.rows());
      const T unbias = n > T(1) ? n / (n - T(1)) : T(1);
      auto& rm = m.buffers[slot.run_mean[l]];
      auto& rv = m.buffers[slot.run_var[l]];
      rm.row(0) = (T(1) - mom) * rm.row(0) + mom * bn.mean;
      rv.row(0) = (T(1) - mom) * rv.row(0) + mom * unbias * bn.var;
    }
  }
}

/// (1/n) sum (y_i - p_i)^2
inline double mse_loss(std::span<const double> preds, std::span<const double> targets) {
  if (preds.size() != targets.size())
    throw Error(Errc::dimension_mismatch, "mse_loss: " + std::to_string(preds.size()) + " predictions vs " +
                                              std::to_string(targets.size()) + " targets");
  if (preds.empty()) throw Error(Errc::empty_input, "mse_loss of an empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = targets[i] - preds[i];
    acc += d * d;
  }
  return acc / static_cast<double>(preds.size());
}

/// d mse / d p_i = 2 (p_i - y_i) / n
inline std::vector<double> mse_gradient(std::span<const double> preds, std::span<const double> targets) {
  if (preds.size() != targets.size() || preds.empty())
    throw Error(Errc::dimension_mismatch, "mse_gradient: bad lengths");
  std::vector<double> d(preds.size());
  const double n = static_cast<double>(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) d[i] = 2.0 * (preds[i] - targets[i]) / n;
  return d;
}

/// Copies a model into another scalar precision.
template <class To, class From>
ScorerModel<To> cast_model(const ScorerModel<From>& m) {
  auto out = make_model_layout<To>(m.cfg);
  for (std::size_t i = 0; i < m.params.size(); ++i) out.params[i] = m.params[i].template cast<To>();
  for (std::size_t i = 0; i < m.buffers.size(); ++i) out.buffers[i] = m.buffers[i].template cast<To>();
  return out;
}

}  // namespace gmx
