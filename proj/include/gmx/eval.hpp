#pragma once

// Score scaling, Pearson correlation and evaluation reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gmx/core.hpp"
#include "gmx/train.hpp"

namespace gmx {

/// Human word score in [0,10] -> [0,1].
inline double scale_human_score(double raw) {
  if (!(raw >= 0.0 && raw <= 10.0))
    throw Error(Errc::out_of_range, "human score " + std::to_string(raw) + " outside [0,10]");
  return raw / 10.0;
}

/// Sample Pearson correlation with two-pass 64-bit accumulation. A constant
/// vector has no defined correlation and raises Errc::degenerate.
inline double pearson_pcc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw Error(Errc::dimension_mismatch,
                "pcc: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + " values");
  if (x.size() < 2) throw Error(Errc::empty_input, "pcc needs at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw Error(Errc::degenerate, "pcc: first vector is constant (degenerate model)");
  if (syy == 0.0) throw Error(Errc::degenerate, "pcc: second vector is constant");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct PredictionRow {
  std::string utt_id;
  std::string word;
  std::int64_t word_index = -1;
  double target = 0.0;
  double prediction = 0.0;
};

struct EvalResult {
  double pcc = 0.0;
  std::vector<PredictionRow> rows;  // sorted by (utt_id, word_index)
};

/// Eval-mode predictions over human-labelled words, pooled PCC over all words.
template <class T>
EvalResult evaluate(const ScorerModel<T>& m, std::span<const WordSample> test) {
  if (test.empty()) throw Error(Errc::empty_input, "test set is empty");
  for (const auto& s : test)
    if (s.provenance != Provenance::human_labeled)
      throw Error(Errc::usage, "test sample '" + s.word + "' is not human-labelled");
  const auto preds = predict(m, test);
  EvalResult r;
  r.rows.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i)
    r.rows.push_back({test[i].utt_id, test[i].word, test[i].word_index, test[i].target, preds[i]});
  std::stable_sort(r.rows.begin(), r.rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.utt_id, a.word_index) < std::tie(b.utt_id, b.word_index);
  });
  std::vector<double> p, y;
  for (const auto& row : r.rows) {
    p.push_back(row.prediction);
    y.push_back(row.target);
  }
  r.pcc = pearson_pcc(p, y);
  return r;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string predictions_csv(std::span<const PredictionRow> rows) {
  std::ostringstream os;
  os << "utt_id,word,word_index,target,prediction\n";
  for (const auto& r : rows)
    os << r.utt_id << ',' << r.word << ',' << r.word_index << ',' << format_double(r.target) << ','
       << format_double(r.prediction) << '\n';
  return os.str();
}

struct SweepPoint {
  std::uint64_t aug_size = 0;
  FeatureSet feature_set = FeatureSet::multi;
  double pcc = 0.0;
};

/// CSV `aug_size,feature_set,pcc`, rows sorted by size then feature set.
inline std::string sweep_report(std::vector<SweepPoint> points) {
  std::stable_sort(points.begin(), points.end(), [](const SweepPoint& a, const SweepPoint& b) {
    return std::tie(a.aug_size, a.feature_set) < std::tie(b.aug_size, b.feature_set);
  });
  std::ostringstream os;
  os << "aug_size,feature_set,pcc\n";
  for (const auto& p : points) os << p.aug_size << ',' << feature_set_name(p.feature_set) << ',' << format_double(p.pcc) << '\n';
  return os.str();
}

}  // namespace gmx
