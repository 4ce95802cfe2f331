#pragma once

// Mini-batch training loop and batched eval-mode prediction.

#include <algorithm>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "gmx/adam.hpp"
#include "gmx/scorer.hpp"

namespace gmx {

enum class TargetField { gop, human };

inline TargetField parse_target_field(std::string_view s) {
  if (s == "gop" || s == "GOP") return TargetField::gop;
  if (s == "human" || s == "HUMAN") return TargetField::human;
  throw Error(Errc::usage, "unknown target field '" + std::string(s) + "' (gop|human)");
}

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  TargetField target = TargetField::gop;
  std::size_t max_steps = 0;      // 0 = no limit
  bool select_best = true;        // keep the epoch with the lowest held-out MSE
  std::uint64_t shuffle_seed = 0;

  static TrainOptions from(const ScorerConfig& c, TargetField target) {
    TrainOptions o;
    o.epochs = c.epochs;
    o.batch_size = c.batch_size;
    o.target = target;
    o.shuffle_seed = c.seed;
    return o;
  }
};

struct TrainResult {
  std::vector<double> epoch_loss;       // mean train-mode batch MSE per epoch
  std::vector<double> validation_loss;  // eval-mode MSE per epoch, when held-out data is given
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::size_t padded_samples = 0;
};

inline void check_target_field(const WordSample& s, TargetField f) {
  const bool ok = f == TargetField::human ? s.provenance == Provenance::human_labeled
                                          : s.provenance != Provenance::human_labeled;
  if (!ok)
    throw Error(Errc::usage, "sample '" + s.word + "' (" + provenance_name(s.provenance) + ") has no " +
                                 (f == TargetField::human ? "human" : "GOP") + " target");
}

/// Eval-mode predictions, batched for speed; per-sample results do not
/// depend on the batching since eval mode uses running statistics.
template <class T>
std::vector<double> predict(const ScorerModel<T>& m, std::span<const WordSample> data, std::size_t batch_size = 256) {
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<const WordSample*> batch;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    batch.clear();
    for (std::size_t i = b; i < std::min(data.size(), b + batch_size); ++i) batch.push_back(&data[i]);
    const auto tr = forward_batch(m, std::span<const WordSample* const>(batch), Mode::eval);
    for (T p : tr.p) out.push_back(static_cast<double>(p));
  }
  return out;
}

template <class T>
double evaluate_mse(const ScorerModel<T>& m, std::span<const WordSample> data) {
  const auto preds = predict(m, data);
  std::vector<double> targets;
  targets.reserve(data.size());
  for (const auto& s : data) targets.push_back(s.target);
  return mse_loss(preds, targets);
}

/// One optimizer step on a batch; returns the train-mode batch loss.
template <class T>
double train_step(ScorerModel<T>& m, AdamState<T>& opt, std::span<const WordSample* const> batch, Rng& rng,
                  std::size_t* padded = nullptr) {
  const auto tr = forward_batch(m, batch, Mode::train, &rng);
  std::vector<double> preds(tr.p.begin(), tr.p.end()), targets;
  targets.reserve(batch.size());
  for (const auto* s : batch) targets.push_back(s->target);
  const double loss = mse_loss(preds, targets);
  if (!std::isfinite(loss)) throw Error(Errc::numeric, "training loss is not finite");
  const auto grads = backward(m, tr, mse_gradient(preds, targets));
  adam_step(m, grads, opt, AdamOptions::from(m.cfg));
  update_running_stats(m, tr);
  if (padded) *padded += tr.padded_samples;
  return loss;
}

/// Trains `m` in place. Each epoch visits the data in a fresh seeded order in
/// batches of batch_size (last partial batch kept). With validation data and
/// select_best, the parameters of the best held-out epoch are restored.
template <class T>
TrainResult train(ScorerModel<T>& m, std::span<const WordSample> data, const TrainOptions& opts,
                  std::span<const WordSample> validation = {}) {
  if (data.empty()) throw Error(Errc::empty_input, "training set is empty");
  if (opts.batch_size == 0) throw Error(Errc::usage, "batch_size must be positive");
  for (const auto& s : data) check_target_field(s, opts.target);

  Rng rng(opts.shuffle_seed);
  AdamState<T> opt = AdamState<T>::fresh(m);
  TrainResult res;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const WordSample*> batch;

  double best = std::numeric_limits<double>::infinity();
  std::vector<Mat<T>> best_params = m.params, best_buffers = m.buffers;

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double acc = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += opts.batch_size) {
      if (opts.max_steps && res.steps >= opts.max_steps) break;
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + opts.batch_size); ++i) batch.push_back(&data[order[i]]);
      const double loss = train_step(m, opt, std::span<const WordSample* const>(batch), rng, &res.padded_samples);
      acc += loss * static_cast<double>(batch.size());
      seen += batch.size();
      ++res.steps;
    }
    if (seen == 0) break;
    res.epoch_loss.push_back(acc / static_cast<double>(seen));
    if (!validation.empty()) {
      const double v = evaluate_mse(m, validation);
      res.validation_loss.push_back(v);
      if (v < best) {
        best = v;
        res.best_epoch = epoch;
        best_params = m.params;
        best_buffers = m.buffers;
      }
    } else {
      res.best_epoch = epoch;
    }
  }
  if (!validation.empty() && opts.select_best && !res.validation_loss.empty()) {
    m.params = std::move(best_params);
    m.buffers = std::move(best_buffers);
  }
  return res;
}

}  // namespace gmx
