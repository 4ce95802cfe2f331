#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gmx/scorer.hpp"

namespace gmx {

struct AdamOptions {
  double learning_rate = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamOptions from(const ScorerConfig& c) { return {c.learning_rate, c.beta1, c.beta2, c.adam_eps}; }
};

/// Bias-corrected Adam update of one flat parameter block; `step` is the
/// 1-based update count.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                 const AdamOptions& o) {
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step));
  const T b1 = T(o.beta1), b2 = T(o.beta2);
  const T lr = T(o.learning_rate / c1);
  const T inv_c2 = T(1.0 / c2);
  const T eps = T(o.epsilon);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    param[i] -= lr * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
  }
}

template <class T>
struct AdamState {
  std::vector<Mat<T>> m, v;
  std::uint64_t step = 0;

  static AdamState fresh(const ScorerModel<T>& model) {
    AdamState s;
    for (const auto& p : model.params) {
      s.m.push_back(Mat<T>::Zero(p.rows(), p.cols()));
      s.v.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

template <class T>
void adam_step(ScorerModel<T>& model, const Gradients<T>& grads, AdamState<T>& state, const AdamOptions& o) {
  if (grads.g.size() != model.params.size() || state.m.size() != model.params.size())
    throw Error(Errc::dimension_mismatch, "adam_step: tensor count mismatch");
  ++state.step;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    auto& p = model.params[i];
    if (grads.g[i].rows() != p.rows() || grads.g[i].cols() != p.cols() || state.m[i].size() != p.size())
      throw Error(Errc::dimension_mismatch, "adam_step: shape mismatch for " + model.param_names[i]);
    const auto n = static_cast<std::size_t>(p.size());
    adam_update<T>({p.data(), n}, {grads.g[i].data(), n}, {state.m[i].data(), n}, {state.v[i].data(), n},
                   state.step, o);
  }
}

}  // namespace gmx
