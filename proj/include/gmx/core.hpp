#pragma once

// Domain types shared by every gmx module: feature matrices, alignments,
// utterances, pool quadruplets, lexicon entries and scorer word samples.

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace gmx {

enum class Errc {
  usage,
  io,
  parse,
  truncated,
  bad_magic,
  unsupported_version,
  dimension_mismatch,
  non_finite,
  row_sum,
  alignment_bounds,
  unknown_phone,
  unknown_word,
  duplicate,
  out_of_range,
  empty_input,
  missing_field,
  degenerate,
  numeric,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::usage: return "usage";
    case Errc::io: return "io";
    case Errc::parse: return "parse";
    case Errc::truncated: return "truncated";
    case Errc::bad_magic: return "bad-magic";
    case Errc::unsupported_version: return "unsupported-version";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::non_finite: return "non-finite";
    case Errc::row_sum: return "row-sum";
    case Errc::alignment_bounds: return "alignment-bounds";
    case Errc::unknown_phone: return "unknown-phone";
    case Errc::unknown_word: return "unknown-word";
    case Errc::duplicate: return "duplicate";
    case Errc::out_of_range: return "out-of-range";
    case Errc::empty_input: return "empty-input";
    case Errc::missing_field: return "missing-field";
    case Errc::degenerate: return "degenerate";
    case Errc::numeric: return "numeric";
  }
  return "unknown";
}

/// Process exit code for an error category: 2 usage, 4 numeric, 3 data.
inline int exit_code(Errc c) {
  switch (c) {
    case Errc::usage: return 2;
    case Errc::numeric:
    case Errc::degenerate: return 4;
    default: return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), detail_(what) {}

  Errc code() const noexcept { return code_; }
  /// Message without the category prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

/// Dense index of a phone in a PhoneInventory.
struct PhoneId {
  std::uint32_t index = 0;

  auto operator<=>(const PhoneId&) const = default;
};

/// Ordered set of phone symbols; ids are positions in load order.
class PhoneInventory {
 public:
  PhoneInventory() = default;

  explicit PhoneInventory(std::vector<std::string> symbols) {
    for (auto& s : symbols) add(std::move(s));
  }

  PhoneId add(std::string symbol) {
    if (symbol.empty()) throw Error(Errc::parse, "empty phone symbol");
    if (index_.contains(symbol)) throw Error(Errc::duplicate, "phone '" + symbol + "' listed twice");
    PhoneId id{static_cast<std::uint32_t>(symbols_.size())};
    index_.emplace(symbol, id);
    symbols_.push_back(std::move(symbol));
    return id;
  }

  PhoneId id(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    if (it == index_.end()) throw Error(Errc::unknown_phone, "phone '" + std::string(symbol) + "' not in inventory");
    return it->second;
  }

  bool contains(std::string_view symbol) const { return index_.contains(std::string(symbol)); }

  const std::string& symbol(PhoneId id) const {
    if (id.index >= symbols_.size())
      throw Error(Errc::unknown_phone, "phone index " + std::to_string(id.index) + " out of inventory range");
    return symbols_[id.index];
  }

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  bool operator==(const PhoneInventory& o) const { return symbols_ == o.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, PhoneId> index_;
};

/// Row-major T x D matrix of f32 frame values. Also used for posteriorgrams.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows_ == 0 || cols_ == 0)
      throw Error(Errc::dimension_mismatch,
                  "matrix must be at least 1x1, got " + std::to_string(rows_) + "x" + std::to_string(cols_));
    if (data_.size() != rows_ * cols_)
      throw Error(Errc::dimension_mismatch, "matrix data size " + std::to_string(data_.size()) + " != " +
                                                std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static FeatureMatrix zeros(std::size_t rows, std::size_t cols) {
    return FeatureMatrix(rows, cols, std::vector<float>(rows * cols, 0.0f));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::span<const float> row(std::size_t t) const { return {data_.data() + t * cols_, cols_}; }
  std::span<float> row(std::size_t t) { return {data_.data() + t * cols_, cols_}; }

  float operator()(std::size_t t, std::size_t d) const { return data_[t * cols_ + d]; }
  float& operator()(std::size_t t, std::size_t d) { return data_[t * cols_ + d]; }

  /// Rows [begin, end) as a new matrix.
  FeatureMatrix slice_rows(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > rows_)
      throw Error(Errc::out_of_range, "row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                          ") outside " + std::to_string(rows_) + " rows");
    return FeatureMatrix(end - begin, cols_,
                         std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                            data_.begin() + static_cast<std::ptrdiff_t>(end * cols_)));
  }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const FeatureMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Concatenates matrices with equal column counts along time.
inline FeatureMatrix concat_rows(std::span<const FeatureMatrix* const> parts) {
  if (parts.empty()) throw Error(Errc::empty_input, "nothing to concatenate");
  const std::size_t cols = parts.front()->cols();
  std::size_t rows = 0;
  for (const auto* p : parts) {
    if (p->cols() != cols) throw Error(Errc::dimension_mismatch, "column count differs between concatenated parts");
    rows += p->rows();
  }
  std::vector<float> data;
  data.reserve(rows * cols);
  for (const auto* p : parts) data.insert(data.end(), p->data().begin(), p->data().end());
  return FeatureMatrix(rows, cols, std::move(data));
}

inline constexpr double kPosteriorRowTolerance = 1e-4;

struct Segment {
  PhoneId phone;
  std::uint32_t start = 0;  // inclusive
  std::uint32_t end = 0;    // exclusive

  std::uint32_t length() const { return end - start; }
  bool operator==(const Segment&) const = default;
};

struct PhoneAlignment {
  std::vector<Segment> segments;

  bool operator==(const PhoneAlignment&) const = default;
};

struct UtteranceRecord {
  std::string utt_id;
  FeatureMatrix mfcc;
  FeatureMatrix deep;
  FeatureMatrix post;  // T x C posteriorgram
  PhoneAlignment align;
  std::vector<std::string> words;
};

struct Quadruplet {
  PhoneId phone;
  FeatureMatrix mfcc;
  FeatureMatrix deep;
  double gop = 0.0;

  std::size_t frames() const { return mfcc.rows(); }
  bool operator==(const Quadruplet&) const = default;
};

/// Per-phone pools of quadruplets, indexed by PhoneId.
class PhonePoolSet {
 public:
  PhonePoolSet() = default;
  explicit PhonePoolSet(PhoneInventory inventory)
      : inventory_(std::move(inventory)), pools_(inventory_.size()) {}

  const PhoneInventory& inventory() const { return inventory_; }

  void add(Quadruplet q) {
    if (q.phone.index >= pools_.size())
      throw Error(Errc::unknown_phone, "quadruplet phone index " + std::to_string(q.phone.index) + " not in inventory");
    if (q.mfcc.rows() != q.deep.rows() || q.mfcc.rows() == 0)
      throw Error(Errc::dimension_mismatch, "quadruplet mfcc/deep frame counts differ");
    if (!(q.gop >= 0.0 && q.gop <= 1.0)) throw Error(Errc::out_of_range, "quadruplet gop outside [0,1]");
    pools_[q.phone.index].push_back(std::move(q));
  }

  std::span<const Quadruplet> pool(PhoneId p) const {
    if (p.index >= pools_.size()) return {};
    return pools_[p.index];
  }

  bool has(PhoneId p) const { return p.index < pools_.size() && !pools_[p.index].empty(); }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& p : pools_) n += p.size();
    return n;
  }

  bool empty() const { return total() == 0; }
  std::size_t phone_count() const { return pools_.size(); }

  bool operator==(const PhonePoolSet& o) const { return inventory_ == o.inventory_ && pools_ == o.pools_; }

 private:
  PhoneInventory inventory_;
  std::vector<std::vector<Quadruplet>> pools_;
};

struct LexiconEntry {
  std::string word;
  std::vector<PhoneId> phones;
  std::uint64_t frequency = 1;

  bool operator==(const LexiconEntry&) const = default;
};

/// Word -> canonical pronunciation + frequency, kept in file order.
class Lexicon {
 public:
  void add(LexiconEntry e) {
    if (e.word.empty()) throw Error(Errc::parse, "empty lexicon word");
    if (e.phones.empty()) throw Error(Errc::parse, "lexicon word '" + e.word + "' has no phones");
    if (e.frequency < 1) throw Error(Errc::out_of_range, "lexicon word '" + e.word + "' has frequency 0");
    if (index_.contains(e.word)) throw Error(Errc::duplicate, "lexicon word '" + e.word + "' listed twice");
    index_.emplace(e.word, entries_.size());
    entries_.push_back(std::move(e));
  }

  const LexiconEntry& at(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw Error(Errc::unknown_word, "word '" + std::string(word) + "' not in lexicon");
    return entries_[it->second];
  }

  bool contains(std::string_view word) const { return index_.contains(std::string(word)); }
  std::span<const LexiconEntry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<LexiconEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Provenance : std::uint8_t { real_unlabeled = 0, mixup = 1, human_labeled = 2 };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::real_unlabeled: return "REAL_UNLABELED";
    case Provenance::mixup: return "MIXUP";
    case Provenance::human_labeled: return "HUMAN_LABELED";
  }
  return "?";
}

struct WordSample {
  std::string word;
  std::vector<PhoneId> phones;  // one per frame
  FeatureMatrix mfcc;
  FeatureMatrix deep;
  double target = 0.0;
  Provenance provenance = Provenance::mixup;
  // Source location for real words; empty / -1 for mixup samples.
  std::string utt_id;
  std::int64_t word_index = -1;

  std::size_t frames() const { return phones.size(); }
  bool operator==(const WordSample&) const = default;
};

/// Throws a categorized Error naming the sample if an invariant is broken.
inline void validate_sample(const WordSample& s) {
  const std::string who = "word sample '" + s.word + "'";
  if (s.phones.empty()) throw Error(Errc::dimension_mismatch, who + ": no frames");
  if (s.mfcc.rows() != s.phones.size() || s.deep.rows() != s.phones.size())
    throw Error(Errc::dimension_mismatch, who + ": phones/mfcc/deep frame counts differ");
  if (!s.mfcc.all_finite() || !s.deep.all_finite()) throw Error(Errc::non_finite, who + ": non-finite feature");
  if (!(s.target >= 0.0 && s.target <= 1.0)) throw Error(Errc::out_of_range, who + ": target outside [0,1]");
}

/// Accepts the record iff every core invariant holds; otherwise throws one
/// categorized Error naming the utterance and the offending field.
inline const UtteranceRecord& validate_utterance(const UtteranceRecord& rec) {
  const std::string who = "utterance '" + rec.utt_id + "'";
  auto need_shape = [&](const FeatureMatrix& m, const char* field) {
    if (m.rows() == 0 || m.cols() == 0) throw Error(Errc::dimension_mismatch, who + ": " + field + " is empty");
  };
  need_shape(rec.mfcc, "mfcc");
  need_shape(rec.deep, "deep");
  need_shape(rec.post, "post");
  if (rec.deep.rows() != rec.mfcc.rows())
    throw Error(Errc::dimension_mismatch, who + ": deep has " + std::to_string(rec.deep.rows()) +
                                              " frames, mfcc has " + std::to_string(rec.mfcc.rows()));
  if (rec.post.rows() != rec.mfcc.rows())
    throw Error(Errc::dimension_mismatch, who + ": post has " + std::to_string(rec.post.rows()) +
                                              " frames, mfcc has " + std::to_string(rec.mfcc.rows()));
  if (!rec.mfcc.all_finite()) throw Error(Errc::non_finite, who + ": mfcc has a non-finite value");
  if (!rec.deep.all_finite()) throw Error(Errc::non_finite, who + ": deep has a non-finite value");
  if (!rec.post.all_finite()) throw Error(Errc::non_finite, who + ": post has a non-finite value");

  for (std::size_t t = 0; t < rec.post.rows(); ++t) {
    double sum = 0.0;
    for (float v : rec.post.row(t)) {
      if (v < 0.0f || v > 1.0f)
        throw Error(Errc::row_sum, who + ": post row " + std::to_string(t) + " has an entry outside [0,1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > kPosteriorRowTolerance)
      throw Error(Errc::row_sum, who + ": post row " + std::to_string(t) + " sums to " + std::to_string(sum));
  }

  std::uint32_t prev_end = 0;
  for (std::size_t i = 0; i < rec.align.segments.size(); ++i) {
    const auto& s = rec.align.segments[i];
    const std::string seg = who + ": align segment " + std::to_string(i);
    if (s.end <= s.start) throw Error(Errc::alignment_bounds, seg + " is empty or reversed");
    if (s.start < prev_end) throw Error(Errc::alignment_bounds, seg + " overlaps or precedes the previous segment");
    if (s.end > rec.mfcc.rows())
      throw Error(Errc::alignment_bounds, seg + " ends at frame " + std::to_string(s.end) + " beyond T=" +
                                              std::to_string(rec.mfcc.rows()));
    prev_end = s.end;
  }
  return rec;
}

}  // namespace gmx
