#pragma once

// Goodness-of-pronunciation scores from frame posteriorgrams.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gmx/core.hpp"

namespace gmx {

enum class GopVariant {
  mean_posterior,  // arithmetic mean of per-frame phone posteriors
  log_mean,        // exp(mean log p), Witt-style, mapped back into [0,1]
};

inline GopVariant parse_gop_variant(std::string_view s) {
  if (s == "mean_posterior" || s == "mean") return GopVariant::mean_posterior;
  if (s == "log_mean" || s == "log") return GopVariant::log_mean;
  throw Error(Errc::usage, "unknown gop variant '" + std::string(s) + "' (mean_posterior|log_mean)");
}

inline const char* gop_variant_name(GopVariant v) {
  return v == GopVariant::mean_posterior ? "mean_posterior" : "log_mean";
}

inline constexpr double kPosteriorFloor = 1e-8;

/// Phone -> set of posterior class indices (e.g. the senones of that phone).
class PhoneClassMap {
 public:
  PhoneClassMap() = default;
  explicit PhoneClassMap(std::size_t n_phones) : classes_(n_phones) {}

  void set(PhoneId phone, std::vector<std::uint32_t> classes) {
    if (classes.empty()) throw Error(Errc::parse, "phone " + std::to_string(phone.index) + " has an empty class set");
    if (phone.index >= classes_.size()) classes_.resize(phone.index + 1);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    classes_[phone.index] = std::move(classes);
  }

  bool contains(PhoneId phone) const { return phone.index < classes_.size() && !classes_[phone.index].empty(); }

  std::span<const std::uint32_t> classes(PhoneId phone) const {
    if (!contains(phone))
      throw Error(Errc::unknown_phone, "phone " + std::to_string(phone.index) + " has no posterior classes");
    return classes_[phone.index];
  }

  std::size_t size() const { return classes_.size(); }

  /// Largest class index + 1.
  std::size_t class_count() const {
    std::size_t n = 0;
    for (const auto& c : classes_)
      if (!c.empty()) n = std::max<std::size_t>(n, c.back() + 1);
    return n;
  }

  bool operator==(const PhoneClassMap&) const = default;

 private:
  std::vector<std::vector<std::uint32_t>> classes_;
};

/// Sum of the phone's class posteriors at one frame, clamped to [0,1].
inline double phone_frame_posterior(const FeatureMatrix& post, const PhoneClassMap& map, PhoneId phone,
                                    std::size_t frame) {
  if (frame >= post.rows())
    throw Error(Errc::out_of_range,
                "frame " + std::to_string(frame) + " outside posteriorgram of " + std::to_string(post.rows()) + " frames");
  const auto row = post.row(frame);
  double sum = 0.0;
  for (auto c : map.classes(phone)) {
    if (c >= row.size())
      throw Error(Errc::out_of_range, "class index " + std::to_string(c) + " >= posterior width " +
                                          std::to_string(row.size()));
    sum += row[c];
  }
  return std::clamp(sum, 0.0, 1.0);
}

/// Duration-normalized posterior of the segment's phone over [start, end).
inline double phone_gop(const FeatureMatrix& post, const PhoneClassMap& map, const Segment& seg,
                        GopVariant variant = GopVariant::mean_posterior) {
  if (seg.end <= seg.start)
    throw Error(Errc::alignment_bounds,
                "empty segment [" + std::to_string(seg.start) + "," + std::to_string(seg.end) + ")");
  if (seg.end > post.rows())
    throw Error(Errc::alignment_bounds,
                "segment end " + std::to_string(seg.end) + " beyond " + std::to_string(post.rows()) + " frames");
  const double n = seg.length();
  double acc = 0.0;
  if (variant == GopVariant::mean_posterior) {
    for (auto t = seg.start; t < seg.end; ++t) acc += phone_frame_posterior(post, map, seg.phone, t);
    return std::clamp(acc / n, 0.0, 1.0);
  }
  for (auto t = seg.start; t < seg.end; ++t)
    acc += std::log(std::max(phone_frame_posterior(post, map, seg.phone, t), kPosteriorFloor));
  return std::clamp(std::exp(acc / n), 0.0, 1.0);
}

/// Unweighted mean of the phone scores of one word.
inline double word_gop(std::span<const double> phone_gops) {
  if (phone_gops.empty()) throw Error(Errc::empty_input, "word_gop of an empty phone list");
  double acc = 0.0;
  for (double g : phone_gops) {
    if (!(g >= 0.0 && g <= 1.0)) throw Error(Errc::out_of_range, "phone gop " + std::to_string(g) + " outside [0,1]");
    acc += g;
  }
  return acc / static_cast<double>(phone_gops.size());
}

struct SegmentGop {
  Segment segment;
  double gop = 0.0;
};

/// One GOP per alignment segment, in alignment order.
inline std::vector<SegmentGop> utterance_gops(const UtteranceRecord& rec, const PhoneClassMap& map,
                                              GopVariant variant = GopVariant::mean_posterior) {
  std::vector<SegmentGop> out;
  out.reserve(rec.align.segments.size());
  for (std::size_t i = 0; i < rec.align.segments.size(); ++i) {
    const auto& seg = rec.align.segments[i];
    if (!map.contains(seg.phone))
      throw Error(Errc::unknown_phone, "utterance '" + rec.utt_id + "' segment " + std::to_string(i) + ": phone " +
                                           std::to_string(seg.phone.index) + " absent from the phone-class map");
    try {
      out.push_back({seg, phone_gop(rec.post, map, seg, variant)});
    } catch (const Error& e) {
      throw Error(e.code(), "utterance '" + rec.utt_id + "' segment " + std::to_string(i) + ": " + e.detail());
    }
  }
  return out;
}

}  // namespace gmx
