#pragma once

// File formats.
//
// Binary formats are little-endian and start with a 4-byte magic:
//
//   GMXF  matrix      u32 rows, u32 cols, f32[rows*cols] row-major
//   GMPL  pool        u32 version, u32 n_phones, n_phones x (u32 len, bytes),
//                     then per phone in inventory order: u64 count and
//                     count x (u32 T, u32 D_m, u32 D_d, f32[T*D_m], f32[T*D_d], f64 gop)
//   GMDS  dataset     u32 version, u64 count, then count x
//                     (u32 len, word bytes, u32 len, utt_id bytes, i64 word_index,
//                      u8 provenance, f64 target, u32 T, u32 D_m, u32 D_d,
//                      u32[T] phone ids, f32[T*D_m], f32[T*D_d])
//   GMCK  checkpoint  u32 version, u32 len, JSON config bytes, u32 n_tensors, then
//                     n_tensors x (u32 len, name bytes, u8 kind 0=param 1=buffer,
//                     u8 scalar bytes 4|8, u32 rows, u32 cols, data)
//
// Text formats are tab separated:
//   phone-class map   PHONE  comma-separated class indices
//   lexicon           WORD   space-separated phones  frequency
//   alignment         utt_id  phone  start_frame  end_frame     (half-open)
//   labels            utt_id  word_index  word  score(0-10)
//   manifest          JSON lines {utt_id, mfcc, deep, post, align, text}

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gmx/core.hpp"
#include "gmx/eval.hpp"
#include "gmx/gop.hpp"
#include "gmx/mixup.hpp"
#include "gmx/scorer.hpp"

namespace gmx {

namespace fs = std::filesystem;
using Json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// bytes, hashing, paths

inline std::string fnv1a64_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Relative paths are prefixed with $GMX_DATA_ROOT when it is set.
inline fs::path resolve_data_path(const fs::path& p) {
  if (p.is_absolute() || p.empty()) return p;
  if (const char* root = std::getenv("GMX_DATA_ROOT"); root && *root) return fs::absolute(fs::path(root) / p);
  return p;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(resolve_data_path(path), std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open '" + resolve_data_path(path).string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io, "write failed for '" + path.string() + "'");
}

inline std::string hash_file(const fs::path& path) { return fnv1a64_hex(read_file(path)); }

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  template <class T>
  void array(std::span<const T> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  std::string take() && { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return std::string(bytes(get<std::uint32_t>())); }
  template <class T>
  std::vector<T> array(std::size_t n) {
    if (n > (data_.size() - pos_) / sizeof(T)) fail_truncated();
    std::vector<T> v(n);
    std::memcpy(v.data(), data_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }
  void magic(std::string_view m) {
    if (data_.size() < m.size() || data_.substr(0, m.size()) != m)
      throw Error(Errc::bad_magic, what_ + ": expected magic '" + std::string(m) + "'");
    pos_ += m.size();
  }
  void version() {
    const auto v = get<std::uint32_t>();
    if (v != kFormatVersion)
      throw Error(Errc::unsupported_version, what_ + ": format version " + std::to_string(v) + " not supported");
  }
  void finish() const {
    if (pos_ != data_.size())
      throw Error(Errc::parse, what_ + ": " + std::to_string(data_.size() - pos_) + " trailing bytes");
  }
  const std::string& what() const { return what_; }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) fail_truncated();
  }
  [[noreturn]] void fail_truncated() const {
    throw Error(Errc::truncated, what_ + ": file ends at byte " + std::to_string(data_.size()));
  }

  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// text helpers

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t b = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

inline std::vector<std::string_view> split_char(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t b = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == sep) {
      out.push_back(line.substr(b, i - b));
      b = i + 1;
    }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_number(std::string_view s, const std::string& where) {
  s = trim(s);
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw Error(Errc::parse, where + ": '" + std::string(s) + "' is not a number");
  return v;
}

/// Calls fn(line_number, line) for every non-blank line.
template <class Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0, b = 0;
  while (b <= text.size()) {
    std::size_t e = text.find('\n', b);
    if (e == std::string_view::npos) e = text.size();
    ++line_no;
    const auto line = text.substr(b, e - b);
    if (!trim(line).empty()) fn(line_no, line);
    if (e == text.size()) break;
    b = e + 1;
  }
}

// ---------------------------------------------------------------------------
// matrices

inline std::string encode_matrix(const FeatureMatrix& m) {
  ByteWriter w;
  w.bytes("GMXF");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
  w.array<float>(m.data());
  return std::move(w).take();
}

inline FeatureMatrix decode_matrix_tsv(std::string_view text, const std::string& what) {
  std::vector<float> data;
  std::size_t cols = 0, rows = 0;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto cells = split_ws(line);
    if (rows == 0) cols = cells.size();
    if (cells.size() != cols)
      throw Error(Errc::parse, what + ": row " + std::to_string(rows) + " (line " + std::to_string(line_no) + ") has " +
                                   std::to_string(cells.size()) + " cells, expected " + std::to_string(cols));
    for (auto c : cells) data.push_back(parse_number<float>(c, what + " line " + std::to_string(line_no)));
    ++rows;
  });
  if (rows == 0 || cols == 0) throw Error(Errc::dimension_mismatch, what + ": empty matrix");
  return FeatureMatrix(rows, cols, std::move(data));
}

/// Binary GMXF or TSV text, chosen by the leading magic.
inline FeatureMatrix decode_matrix(std::string_view bytes, const std::string& what) {
  if (bytes.substr(0, 4) != "GMXF") return decode_matrix_tsv(bytes, what);
  ByteReader r(bytes, what);
  r.magic("GMXF");
  const auto rows = r.get<std::uint32_t>();
  const auto cols = r.get<std::uint32_t>();
  if (rows == 0 || cols == 0)
    throw Error(Errc::dimension_mismatch,
                what + ": invalid dimensions " + std::to_string(rows) + "x" + std::to_string(cols));
  auto data = r.array<float>(static_cast<std::size_t>(rows) * cols);
  r.finish();
  return FeatureMatrix(rows, cols, std::move(data));
}

inline FeatureMatrix read_matrix(const fs::path& path) {
  return decode_matrix(read_file(path), "matrix '" + path.string() + "'");
}

inline void write_matrix(const fs::path& path, const FeatureMatrix& m) { write_file(path, encode_matrix(m)); }

inline void write_matrix_tsv(const fs::path& path, const FeatureMatrix& m) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    for (std::size_t d = 0; d < m.cols(); ++d) os << (d ? "\t" : "") << m(t, d);
    os << '\n';
  }
  write_file(path, os.str());
}

// ---------------------------------------------------------------------------
// phone-class map, lexicon

struct PhoneMapFile {
  PhoneInventory inventory;
  PhoneClassMap classes;
};

inline PhoneMapFile parse_phone_map(std::string_view text, const std::string& what) {
  PhoneMapFile out;
  std::vector<std::pair<PhoneId, std::vector<std::uint32_t>>> rows;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = what + " line " + std::to_string(line_no);
    auto cells = split_char(line, '\t');
    if (cells.size() != 2) throw Error(Errc::parse, where + ": expected PHONE<TAB>classes");
    const auto id = out.inventory.add(std::string(trim(cells[0])));
    std::vector<std::uint32_t> cls;
    for (auto c : split_char(cells[1], ',')) cls.push_back(parse_number<std::uint32_t>(c, where));
    rows.emplace_back(id, std::move(cls));
  });
  if (out.inventory.size() == 0) throw Error(Errc::empty_input, what + ": no phones");
  out.classes = PhoneClassMap(out.inventory.size());
  for (auto& [id, cls] : rows) out.classes.set(id, std::move(cls));
  return out;
}

inline PhoneMapFile read_phone_map(const fs::path& path) {
  return parse_phone_map(read_file(path), "phone map '" + path.string() + "'");
}

inline std::string phone_map_tsv(const PhoneInventory& inv, const PhoneClassMap& map) {
  std::ostringstream os;
  for (std::uint32_t i = 0; i < inv.size(); ++i) {
    os << inv.symbol(PhoneId{i}) << '\t';
    const auto cls = map.classes(PhoneId{i});
    for (std::size_t j = 0; j < cls.size(); ++j) os << (j ? "," : "") << cls[j];
    os << '\n';
  }
  return os.str();
}

inline Lexicon parse_lexicon(std::string_view text, const PhoneInventory& inv, const std::string& what) {
  Lexicon lex;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = what + " line " + std::to_string(line_no);
    auto cells = split_char(line, '\t');
    if (cells.size() != 3) throw Error(Errc::parse, where + ": expected WORD<TAB>phones<TAB>frequency");
    LexiconEntry e;
    e.word = std::string(trim(cells[0]));
    for (auto ph : split_ws(cells[1])) {
      try {
        e.phones.push_back(inv.id(ph));
      } catch (const Error& err) {
        throw Error(err.code(), where + ": " + err.detail());
      }
    }
    e.frequency = parse_number<std::uint64_t>(cells[2], where);
    try {
      lex.add(std::move(e));
    } catch (const Error& err) {
      throw Error(err.code(), where + ": " + err.detail());
    }
  });
  return lex;
}

inline Lexicon read_lexicon(const fs::path& path, const PhoneInventory& inv) {
  return parse_lexicon(read_file(path), inv, "lexicon '" + path.string() + "'");
}

inline std::string lexicon_tsv(const Lexicon& lex, const PhoneInventory& inv) {
  std::ostringstream os;
  for (const auto& e : lex.entries()) {
    os << e.word << '\t';
    for (std::size_t i = 0; i < e.phones.size(); ++i) os << (i ? " " : "") << inv.symbol(e.phones[i]);
    os << '\t' << e.frequency << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// alignments, labels

enum class AlignFormat { frames, ctm };

inline AlignFormat parse_align_format(std::string_view s) {
  if (s == "frames" || s == "tsv") return AlignFormat::frames;
  if (s == "ctm") return AlignFormat::ctm;
  throw Error(Errc::usage, "unknown alignment format '" + std::string(s) + "' (frames|ctm)");
}

inline constexpr double kFrameHopSeconds = 0.010;

/// Seconds -> frame index: floor for starts, ceil for ends.
inline std::uint32_t seconds_to_frame(double sec, bool is_end, double hop = kFrameHopSeconds) {
  const double f = sec / hop;
  return static_cast<std::uint32_t>(is_end ? std::ceil(f - 1e-6) : std::floor(f + 1e-6));
}

using AlignmentTable = std::map<std::string, PhoneAlignment>;

/// Frame TSV (utt phone start end) or CTM (utt channel start duration phone).
inline AlignmentTable parse_alignments(std::string_view text, const PhoneInventory& inv, const std::string& what,
                                       AlignFormat format = AlignFormat::frames) {
  AlignmentTable out;
  std::map<std::string, double> ctm_end;  // raw end time of each utterance's last CTM segment
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = what + " line " + std::to_string(line_no);
    const auto cells = format == AlignFormat::frames ? split_char(line, '\t') : split_ws(line);
    double raw_start = 0.0;
    Segment seg;
    std::string utt;
    std::string_view phone;
    if (format == AlignFormat::frames) {
      if (cells.size() != 4) throw Error(Errc::parse, where + ": expected utt<TAB>phone<TAB>start<TAB>end");
      utt = std::string(trim(cells[0]));
      phone = trim(cells[1]);
      seg.start = parse_number<std::uint32_t>(cells[2], where);
      seg.end = parse_number<std::uint32_t>(cells[3], where);
    } else {
      if (cells.size() < 5) throw Error(Errc::parse, where + ": expected utt channel start duration phone");
      utt = std::string(cells[0]);
      const double start = parse_number<double>(cells[2], where);
      const double dur = parse_number<double>(cells[3], where);
      if (start < 0.0 || dur <= 0.0) throw Error(Errc::alignment_bounds, where + ": negative start or empty duration");
      phone = cells[4];
      seg.start = seconds_to_frame(start, false);
      seg.end = seconds_to_frame(start + dur, true);
      raw_start = start;
    }
    try {
      seg.phone = inv.id(phone);
    } catch (const Error& e) {
      throw Error(e.code(), where + ": " + e.detail());
    }
    if (seg.end <= seg.start)
      throw Error(Errc::alignment_bounds, where + ": utterance '" + utt + "' segment is empty or reversed");
    auto& segs = out[utt].segments;
    // floor/ceil rounding makes abutting CTM segments share a frame; it goes to the earlier one
    if (format == AlignFormat::ctm && !segs.empty() && seg.start < segs.back().end &&
        raw_start >= ctm_end[utt] - 1e-9) {
      seg.start = segs.back().end;
      if (seg.end <= seg.start)
        throw Error(Errc::alignment_bounds, where + ": utterance '" + utt + "' segment is shorter than one frame");
    }
    if (format == AlignFormat::ctm) ctm_end[utt] = raw_start + parse_number<double>(cells[3], where);
    if (!segs.empty() && seg.start < segs.back().end)
      throw Error(Errc::alignment_bounds, where + ": utterance '" + utt + "' segments overlap or are out of order");
    segs.push_back(seg);
  });
  return out;
}

inline AlignmentTable read_alignments(const fs::path& path, const PhoneInventory& inv,
                                      AlignFormat format = AlignFormat::frames) {
  return parse_alignments(read_file(path), inv, "alignment '" + path.string() + "'", format);
}

inline std::string alignment_tsv(const std::string& utt_id, const PhoneAlignment& a, const PhoneInventory& inv) {
  std::ostringstream os;
  for (const auto& s : a.segments) os << utt_id << '\t' << inv.symbol(s.phone) << '\t' << s.start << '\t' << s.end << '\n';
  return os.str();
}

struct LabelEntry {
  std::string word;
  double score = 0.0;  // raw 0-10
  bool operator==(const LabelEntry&) const = default;
};

using LabelKey = std::pair<std::string, std::int64_t>;
using LabelTable = std::map<LabelKey, LabelEntry>;

inline LabelTable parse_labels(std::string_view text, const std::string& what) {
  LabelTable out;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = what + " line " + std::to_string(line_no);
    const auto cells = split_char(line, '\t');
    if (cells.size() != 4) throw Error(Errc::parse, where + ": expected utt<TAB>word_index<TAB>word<TAB>score");
    LabelKey key{std::string(trim(cells[0])), parse_number<std::int64_t>(cells[1], where)};
    LabelEntry e{std::string(trim(cells[2])), parse_number<double>(cells[3], where)};
    if (!(e.score >= 0.0 && e.score <= 10.0))
      throw Error(Errc::out_of_range, where + ": score " + std::string(trim(cells[3])) + " outside [0,10]");
    if (!out.emplace(key, e).second)
      throw Error(Errc::duplicate, where + ": duplicate label for (" + key.first + ", " + std::to_string(key.second) + ")");
  });
  return out;
}

inline LabelTable read_labels(const fs::path& path) { return parse_labels(read_file(path), "labels '" + path.string() + "'"); }

inline std::string labels_tsv(const LabelTable& t) {
  std::ostringstream os;
  for (const auto& [k, e] : t) os << k.first << '\t' << k.second << '\t' << e.word << '\t' << format_double(e.score) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// manifests and corpus loading

struct UtteranceDescriptor {
  std::string utt_id;
  fs::path mfcc, deep, post, align;
  std::vector<std::string> words;
  std::size_t line = 0;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  for (auto w : split_ws(text)) out.emplace_back(w);
  return out;
}

/// JSON-lines manifest; file paths are relative to the manifest's directory.
inline std::vector<UtteranceDescriptor> parse_manifest(std::string_view text, const fs::path& base,
                                                       const std::string& what) {
  std::vector<UtteranceDescriptor> out;
  std::unordered_map<std::string, std::size_t> seen;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = what + " line " + std::to_string(line_no);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw Error(Errc::parse, where + ": " + e.what());
    }
    if (!j.is_object()) throw Error(Errc::parse, where + ": expected a JSON object");
    for (const char* key : {"utt_id", "mfcc", "deep", "post", "align", "text"})
      if (!j.contains(key)) throw Error(Errc::missing_field, where + ": missing field '" + key + "'");
    UtteranceDescriptor d;
    auto get_str = [&](const char* key) {
      if (!j[key].is_string()) throw Error(Errc::parse, where + ": field '" + key + "' must be a string");
      return j[key].get<std::string>();
    };
    auto path_of = [&](const char* key) {
      fs::path p = get_str(key);
      return p.is_absolute() ? p : base / p;
    };
    d.utt_id = get_str("utt_id");
    d.mfcc = path_of("mfcc");
    d.deep = path_of("deep");
    d.post = path_of("post");
    d.align = path_of("align");
    if (j["text"].is_string()) {
      d.words = split_words(j["text"].get<std::string>());
    } else if (j["text"].is_array()) {
      for (const auto& w : j["text"]) d.words.push_back(w.get<std::string>());
    } else {
      throw Error(Errc::parse, where + ": field 'text' must be a string or array");
    }
    d.line = line_no;
    if (auto [it, fresh] = seen.emplace(d.utt_id, line_no); !fresh)
      throw Error(Errc::duplicate, what + ": utt_id '" + d.utt_id + "' on lines " + std::to_string(it->second) +
                                       " and " + std::to_string(line_no));
    out.push_back(std::move(d));
  });
  return out;
}

inline std::vector<UtteranceDescriptor> read_manifest(const fs::path& path) {
  const auto resolved = resolve_data_path(path);
  return parse_manifest(read_file(resolved), resolved.parent_path(), "manifest '" + resolved.string() + "'");
}

inline std::string manifest_line(const UtteranceDescriptor& d, const fs::path& base) {
  auto rel = [&](const fs::path& p) { return p.lexically_relative(base).generic_string(); };
  std::string text;
  for (std::size_t i = 0; i < d.words.size(); ++i) text += (i ? " " : "") + d.words[i];
  Json j = {{"utt_id", d.utt_id}, {"mfcc", rel(d.mfcc)}, {"deep", rel(d.deep)},
            {"post", rel(d.post)}, {"align", rel(d.align)},  {"text", text}};
  return j.dump();
}

/// Loads utterances on demand, caching parsed alignment files.
class CorpusLoader {
 public:
  CorpusLoader(const PhoneInventory& inv, AlignFormat format = AlignFormat::frames) : inv_(&inv), format_(format) {}

  UtteranceRecord load(const UtteranceDescriptor& d) {
    UtteranceRecord rec;
    rec.utt_id = d.utt_id;
    rec.mfcc = read_matrix(d.mfcc);
    rec.deep = read_matrix(d.deep);
    rec.post = read_matrix(d.post);
    const auto& table = alignments(d.align);
    auto it = table.find(d.utt_id);
    if (it == table.end())
      throw Error(Errc::missing_field, "alignment '" + d.align.string() + "' has no segments for '" + d.utt_id + "'");
    rec.align = it->second;
    rec.words = d.words;
    validate_utterance(rec);
    return rec;
  }

  std::vector<UtteranceRecord> load_all(std::span<const UtteranceDescriptor> ds) {
    std::vector<UtteranceRecord> out;
    out.reserve(ds.size());
    for (const auto& d : ds) out.push_back(load(d));
    return out;
  }

 private:
  const AlignmentTable& alignments(const fs::path& p) {
    auto key = p.string();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, read_alignments(p, *inv_, format_)).first;
    return it->second;
  }

  const PhoneInventory* inv_;
  AlignFormat format_;
  std::map<std::string, AlignmentTable> cache_;
};

// ---------------------------------------------------------------------------
// pool files

inline void put_inventory(ByteWriter& w, const PhoneInventory& inv) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(inv.size()));
  for (const auto& s : inv.symbols()) w.str(s);
}

inline PhoneInventory get_inventory(ByteReader& r) {
  const auto n = r.get<std::uint32_t>();
  PhoneInventory inv;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto sym = r.str();
    try {
      inv.add(std::move(sym));
    } catch (const Error& e) {
      throw Error(e.code(), r.what() + ": " + e.detail());
    }
  }
  return inv;
}

struct PoolIndexEntry {
  std::string phone;
  std::uint64_t offset = 0;  // byte offset of the phone's u64 count
  std::uint64_t count = 0;
};

inline std::string encode_pool(const PhonePoolSet& pools, std::vector<PoolIndexEntry>* index = nullptr) {
  ByteWriter w;
  w.bytes("GMPL");
  w.put<std::uint32_t>(kFormatVersion);
  put_inventory(w, pools.inventory());
  std::string head = std::move(w).take();
  std::string body;
  for (std::uint32_t i = 0; i < pools.phone_count(); ++i) {
    const auto pool = pools.pool(PhoneId{i});
    if (index) index->push_back({pools.inventory().symbol(PhoneId{i}), head.size() + body.size(), pool.size()});
    ByteWriter b;
    b.put<std::uint64_t>(pool.size());
    for (const auto& q : pool) {
      b.put<std::uint32_t>(static_cast<std::uint32_t>(q.frames()));
      b.put<std::uint32_t>(static_cast<std::uint32_t>(q.mfcc.cols()));
      b.put<std::uint32_t>(static_cast<std::uint32_t>(q.deep.cols()));
      b.array<float>(q.mfcc.data());
      b.array<float>(q.deep.data());
      b.put<double>(q.gop);
    }
    body += std::move(b).take();
  }
  return head + body;
}

inline PhonePoolSet decode_pool(std::string_view bytes, const std::string& what) {
  ByteReader r(bytes, what);
  r.magic("GMPL");
  r.version();
  PhonePoolSet pools(get_inventory(r));
  for (std::uint32_t i = 0; i < pools.phone_count(); ++i) {
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < count; ++k) {
      const auto T = r.get<std::uint32_t>();
      const auto dm = r.get<std::uint32_t>();
      const auto dd = r.get<std::uint32_t>();
      if (T == 0 || dm == 0 || dd == 0) throw Error(Errc::dimension_mismatch, what + ": empty quadruplet");
      Quadruplet q;
      q.phone = PhoneId{i};
      q.mfcc = FeatureMatrix(T, dm, r.array<float>(static_cast<std::size_t>(T) * dm));
      q.deep = FeatureMatrix(T, dd, r.array<float>(static_cast<std::size_t>(T) * dd));
      q.gop = r.get<double>();
      if (!q.mfcc.all_finite() || !q.deep.all_finite()) throw Error(Errc::non_finite, what + ": non-finite feature");
      try {
        pools.add(std::move(q));
      } catch (const Error& e) {
        throw Error(e.code(), what + ": " + e.detail());
      }
    }
  }
  r.finish();
  return pools;
}

/// Writes `path` plus the JSON offset index `path`.index.json.
inline void write_pool(const fs::path& path, const PhonePoolSet& pools) {
  std::vector<PoolIndexEntry> index;
  const auto bytes = encode_pool(pools, &index);
  write_file(path, bytes);
  Json j = {{"format", "GMPL"}, {"version", kFormatVersion}, {"hash", fnv1a64_hex(bytes)}, {"phones", Json::array()}};
  for (const auto& e : index) j["phones"].push_back({{"phone", e.phone}, {"offset", e.offset}, {"count", e.count}});
  write_file(fs::path(path.string() + ".index.json"), j.dump(2) + "\n");
}

inline PhonePoolSet read_pool(const fs::path& path) {
  return decode_pool(read_file(path), "pool '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// dataset files

inline std::string encode_dataset(std::span<const WordSample> samples) {
  ByteWriter w;
  w.bytes("GMDS");
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint64_t>(samples.size());
  std::vector<std::uint32_t> ids;
  for (const auto& s : samples) {
    w.str(s.word);
    w.str(s.utt_id);
    w.put<std::int64_t>(s.word_index);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.provenance));
    w.put<double>(s.target);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.frames()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.mfcc.cols()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.deep.cols()));
    ids.clear();
    for (auto p : s.phones) ids.push_back(p.index);
    w.array<std::uint32_t>(ids);
    w.array<float>(s.mfcc.data());
    w.array<float>(s.deep.data());
  }
  return std::move(w).take();
}

inline std::vector<WordSample> decode_dataset(std::string_view bytes, const std::string& what) {
  ByteReader r(bytes, what);
  r.magic("GMDS");
  r.version();
  const auto n = r.get<std::uint64_t>();
  std::vector<WordSample> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 20)));
  for (std::uint64_t i = 0; i < n; ++i) {
    WordSample s;
    s.word = r.str();
    s.utt_id = r.str();
    s.word_index = r.get<std::int64_t>();
    const auto prov = r.get<std::uint8_t>();
    if (prov > 2) throw Error(Errc::parse, what + ": sample " + std::to_string(i) + " has unknown provenance");
    s.provenance = static_cast<Provenance>(prov);
    s.target = r.get<double>();
    const auto T = r.get<std::uint32_t>();
    const auto dm = r.get<std::uint32_t>();
    const auto dd = r.get<std::uint32_t>();
    if (T == 0 || dm == 0 || dd == 0)
      throw Error(Errc::dimension_mismatch, what + ": sample " + std::to_string(i) + " has an empty dimension");
    for (auto id : r.array<std::uint32_t>(T)) s.phones.push_back(PhoneId{id});
    s.mfcc = FeatureMatrix(T, dm, r.array<float>(static_cast<std::size_t>(T) * dm));
    s.deep = FeatureMatrix(T, dd, r.array<float>(static_cast<std::size_t>(T) * dd));
    try {
      validate_sample(s);
    } catch (const Error& e) {
      throw Error(e.code(), what + ": sample " + std::to_string(i) + ": " + e.detail());
    }
    out.push_back(std::move(s));
  }
  r.finish();
  return out;
}

inline void write_dataset(const fs::path& path, std::span<const WordSample> samples, const Json& sidecar = {}) {
  const auto bytes = encode_dataset(samples);
  write_file(path, bytes);
  Json j = sidecar.is_object() ? sidecar : Json::object();
  j["format"] = "GMDS";
  j["version"] = kFormatVersion;
  j["count"] = samples.size();
  j["hash"] = fnv1a64_hex(bytes);
  write_file(fs::path(path.string() + ".json"), j.dump(2) + "\n");
}

inline std::vector<WordSample> read_dataset(const fs::path& path) {
  return decode_dataset(read_file(path), "dataset '" + path.string() + "'");
}

inline Json to_json(const GenerationManifest& m) {
  return {{"seed", m.seed},
          {"n_words", m.n_words},
          {"chunk_size", m.chunk_size},
          {"resample_count", m.resample_count},
          {"covered_words", m.covered_words},
          {"pool_hash", m.pool_hash},
          {"lexicon_hash", m.lexicon_hash}};
}

// ---------------------------------------------------------------------------
// scorer config and checkpoints

inline Json to_json(const ScorerConfig& c) {
  return {{"d_mfcc", c.d_mfcc},
          {"d_deep", c.d_deep},
          {"d_hidden", c.d_hidden},
          {"filters", c.filters},
          {"n_phones", c.n_phones},
          {"kernels", c.kernels},
          {"padding", c.padding},
          {"pool_kernel", c.pool_kernel},
          {"pool_stride", c.pool_stride},
          {"dropout", c.dropout},
          {"bn_momentum", c.bn_momentum},
          {"bn_eps", c.bn_eps},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"features", feature_set_name(c.features)},
          {"share_towers", c.share_towers},
          {"share_embedding", c.share_embedding},
          {"pad_short", c.pad_short}};
}

/// Overwrites the fields present in `j`; unknown keys are usage errors.
inline void apply_json(ScorerConfig& c, const Json& j) {
  if (!j.is_object()) throw Error(Errc::usage, "scorer config must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "d_mfcc") c.d_mfcc = v.get<std::size_t>();
      else if (k == "d_deep") c.d_deep = v.get<std::size_t>();
      else if (k == "d_hidden") c.d_hidden = v.get<std::size_t>();
      else if (k == "filters") c.filters = v.get<std::size_t>();
      else if (k == "n_phones") c.n_phones = v.get<std::size_t>();
      else if (k == "kernels") c.kernels = v.get<std::array<std::size_t, 3>>();
      else if (k == "padding") c.padding = v.get<std::array<std::size_t, 3>>();
      else if (k == "pool_kernel") c.pool_kernel = v.get<std::size_t>();
      else if (k == "pool_stride") c.pool_stride = v.get<std::size_t>();
      else if (k == "dropout") c.dropout = v.get<double>();
      else if (k == "bn_momentum") c.bn_momentum = v.get<double>();
      else if (k == "bn_eps") c.bn_eps = v.get<double>();
      else if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "beta1") c.beta1 = v.get<double>();
      else if (k == "beta2") c.beta2 = v.get<double>();
      else if (k == "adam_eps") c.adam_eps = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "epochs") c.epochs = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "features") c.features = parse_feature_set(v.get<std::string>());
      else if (k == "share_towers") c.share_towers = v.get<bool>();
      else if (k == "share_embedding") c.share_embedding = v.get<bool>();
      else if (k == "pad_short") c.pad_short = v.get<bool>();
      else throw Error(Errc::usage, "unknown scorer config key '" + k + "'");
    }
  } catch (const Json::exception& e) {
    throw Error(Errc::usage, std::string("scorer config: ") + e.what());
  }
}

template <class T>
struct Checkpoint {
  ScorerModel<T> model;
  std::vector<std::string> phones;  // inventory the embedding rows refer to
};

template <class T>
std::string encode_checkpoint(const ScorerModel<T>& m, const std::vector<std::string>& phones = {}) {
  ByteWriter w;
  w.bytes("GMCK");
  w.put<std::uint32_t>(kFormatVersion);
  Json meta = {{"config", to_json(m.cfg)}, {"phones", phones}};
  w.str(meta.dump());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.params.size() + m.buffers.size()));
  auto put_tensor = [&](const std::string& name, std::uint8_t kind, const Mat<T>& t) {
    w.str(name);
    w.put<std::uint8_t>(kind);
    w.put<std::uint8_t>(sizeof(T));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.cols()));
    w.array<T>(std::span<const T>(t.data(), static_cast<std::size_t>(t.size())));
  };
  for (std::size_t i = 0; i < m.params.size(); ++i) put_tensor(m.param_names[i], 0, m.params[i]);
  for (std::size_t i = 0; i < m.buffers.size(); ++i) put_tensor(m.buffer_names[i], 1, m.buffers[i]);
  return std::move(w).take();
}

template <class T>
Checkpoint<T> decode_checkpoint(std::string_view bytes, const std::string& what) {
  ByteReader r(bytes, what);
  r.magic("GMCK");
  r.version();
  Json meta;
  try {
    meta = Json::parse(r.str());
  } catch (const Json::parse_error& e) {
    throw Error(Errc::parse, what + ": config blob: " + e.what());
  }
  if (!meta.is_object() || !meta.contains("config")) throw Error(Errc::missing_field, what + ": config blob lacks 'config'");
  ScorerConfig cfg;
  apply_json(cfg, meta["config"]);
  Checkpoint<T> ck{make_model_layout<T>(cfg), {}};
  if (meta.contains("phones")) ck.phones = meta["phones"].get<std::vector<std::string>>();
  const auto n = r.get<std::uint32_t>();
  if (n != ck.model.params.size() + ck.model.buffers.size())
    throw Error(Errc::dimension_mismatch, what + ": " + std::to_string(n) + " tensors, config implies " +
                                              std::to_string(ck.model.params.size() + ck.model.buffers.size()));
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = r.str();
    const auto kind = r.get<std::uint8_t>();
    const auto width = r.get<std::uint8_t>();
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    const bool is_param = i < ck.model.params.size();
    auto& dst = is_param ? ck.model.params[i] : ck.model.buffers[i - ck.model.params.size()];
    const auto& expect = is_param ? ck.model.param_names[i] : ck.model.buffer_names[i - ck.model.params.size()];
    if (name != expect || kind != (is_param ? 0 : 1))
      throw Error(Errc::parse, what + ": tensor " + std::to_string(i) + " is '" + name + "', expected '" + expect + "'");
    if (static_cast<Eigen::Index>(rows) != dst.rows() || static_cast<Eigen::Index>(cols) != dst.cols())
      throw Error(Errc::dimension_mismatch, what + ": tensor '" + name + "' shape mismatch");
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    if (width == 4) {
      const auto v = r.array<float>(count);
      for (std::size_t k = 0; k < count; ++k) dst.data()[k] = static_cast<T>(v[k]);
    } else if (width == 8) {
      const auto v = r.array<double>(count);
      for (std::size_t k = 0; k < count; ++k) dst.data()[k] = static_cast<T>(v[k]);
    } else {
      throw Error(Errc::parse, what + ": tensor '" + name + "' has scalar width " + std::to_string(width));
    }
    if (!dst.allFinite()) throw Error(Errc::non_finite, what + ": tensor '" + name + "' has non-finite values");
  }
  r.finish();
  return ck;
}

template <class T>
void write_checkpoint(const fs::path& path, const ScorerModel<T>& m, const std::vector<std::string>& phones,
                      const Json& training_manifest = {}) {
  const auto bytes = encode_checkpoint(m, phones);
  write_file(path, bytes);
  Json j = training_manifest.is_object() ? training_manifest : Json::object();
  j["format"] = "GMCK";
  j["hash"] = fnv1a64_hex(bytes);
  write_file(fs::path(path.string() + ".json"), j.dump(2) + "\n");
}

template <class T = float>
Checkpoint<T> read_checkpoint(const fs::path& path) {
  return decode_checkpoint<T>(read_file(path), "checkpoint '" + path.string() + "'");
}

}  // namespace gmx
