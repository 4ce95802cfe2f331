#pragma once

// Synthetic corpora with a known quality model.
//
// Every phone instance carries a latent quality q in [0,1]. Its posterior rows
// put mass ~q on the phone's classes and spread the rest uniformly, so its GOP
// is ~q. Its feature rows are a per-phone prototype shifted along a per-phone
// direction by (q - 1/2), plus a per-speaker offset and frame noise. Word human
// scores are clip(mean q + N(0, human_noise_sd), 0, 1) * 10.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gmx/core.hpp"
#include "gmx/gop.hpp"
#include "gmx/io.hpp"
#include "gmx/pool.hpp"
#include "gmx/rng.hpp"

namespace gmx {

struct SynthSpec {
  std::size_t n_utts = 2000;
  std::size_t n_phones = 40;
  std::size_t lexicon_size = 300;
  std::size_t frames_min = 3;
  std::size_t frames_max = 12;
  std::size_t d_mfcc = 13;
  std::size_t d_deep = 32;
  std::size_t n_classes = 120;
  std::size_t words_min = 2;
  std::size_t words_max = 6;
  std::size_t word_phones_min = 1;
  std::size_t word_phones_max = 5;
  double zipf_exponent = 1.0;
  // quality model
  double skill_min = 0.1;
  double skill_max = 0.95;
  double phone_quality_sd = 0.15;
  double posterior_spread = 0.02;
  double human_noise_sd = 0.05;
  double mfcc_shift = 1.0;
  double mfcc_noise = 1.5;
  double deep_shift = 1.0;
  double deep_noise = 1.0;
  double speaker_sd = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(Errc::usage, "invalid synth spec: " + m); };
    if (n_utts == 0 || n_phones == 0 || lexicon_size == 0) bad("counts must be positive");
    if (frames_min == 0 || frames_min > frames_max) bad("frames range");
    if (words_min == 0 || words_min > words_max) bad("words-per-utterance range");
    if (word_phones_min == 0 || word_phones_min > word_phones_max) bad("phones-per-word range");
    if (d_mfcc == 0 || d_deep == 0) bad("feature dims must be positive");
    if (n_classes < n_phones) bad("n_classes must be >= n_phones");
    if (!(skill_min >= 0.0 && skill_min <= skill_max && skill_max <= 1.0)) bad("skill range");
    if (!(posterior_spread >= 0.0 && posterior_spread < 0.25)) bad("posterior_spread must be in [0,0.25)");
    if (human_noise_sd < 0.0 || phone_quality_sd < 0.0 || mfcc_noise < 0.0 || deep_noise < 0.0 || speaker_sd < 0.0)
      bad("standard deviations must be non-negative");
  }
};

inline Json to_json(const SynthSpec& s) {
  return {{"n_utts", s.n_utts},
          {"n_phones", s.n_phones},
          {"lexicon_size", s.lexicon_size},
          {"frames_min", s.frames_min},
          {"frames_max", s.frames_max},
          {"d_mfcc", s.d_mfcc},
          {"d_deep", s.d_deep},
          {"n_classes", s.n_classes},
          {"words_min", s.words_min},
          {"words_max", s.words_max},
          {"word_phones_min", s.word_phones_min},
          {"word_phones_max", s.word_phones_max},
          {"zipf_exponent", s.zipf_exponent},
          {"skill_min", s.skill_min},
          {"skill_max", s.skill_max},
          {"phone_quality_sd", s.phone_quality_sd},
          {"posterior_spread", s.posterior_spread},
          {"human_noise_sd", s.human_noise_sd},
          {"mfcc_shift", s.mfcc_shift},
          {"mfcc_noise", s.mfcc_noise},
          {"deep_shift", s.deep_shift},
          {"deep_noise", s.deep_noise},
          {"speaker_sd", s.speaker_sd},
          {"seed", s.seed}};
}

inline void apply_json(SynthSpec& s, const Json& j) {
  if (!j.is_object()) throw Error(Errc::usage, "synth spec must be a JSON object");
  const Json cur = to_json(s);
  for (const auto& [k, v] : j.items())
    if (!cur.contains(k)) throw Error(Errc::usage, "unknown synth spec key '" + k + "'");
  Json merged = cur;
  merged.update(j);
  try {
    s.n_utts = merged["n_utts"].get<std::size_t>();
    s.n_phones = merged["n_phones"].get<std::size_t>();
    s.lexicon_size = merged["lexicon_size"].get<std::size_t>();
    s.frames_min = merged["frames_min"].get<std::size_t>();
    s.frames_max = merged["frames_max"].get<std::size_t>();
    s.d_mfcc = merged["d_mfcc"].get<std::size_t>();
    s.d_deep = merged["d_deep"].get<std::size_t>();
    s.n_classes = merged["n_classes"].get<std::size_t>();
    s.words_min = merged["words_min"].get<std::size_t>();
    s.words_max = merged["words_max"].get<std::size_t>();
    s.word_phones_min = merged["word_phones_min"].get<std::size_t>();
    s.word_phones_max = merged["word_phones_max"].get<std::size_t>();
    s.zipf_exponent = merged["zipf_exponent"].get<double>();
    s.skill_min = merged["skill_min"].get<double>();
    s.skill_max = merged["skill_max"].get<double>();
    s.phone_quality_sd = merged["phone_quality_sd"].get<double>();
    s.posterior_spread = merged["posterior_spread"].get<double>();
    s.human_noise_sd = merged["human_noise_sd"].get<double>();
    s.mfcc_shift = merged["mfcc_shift"].get<double>();
    s.mfcc_noise = merged["mfcc_noise"].get<double>();
    s.deep_shift = merged["deep_shift"].get<double>();
    s.deep_noise = merged["deep_noise"].get<double>();
    s.speaker_sd = merged["speaker_sd"].get<double>();
    s.seed = merged["seed"].get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw Error(Errc::usage, std::string("synth spec: ") + e.what());
  }
}

struct SynthCorpus {
  PhoneInventory inventory;
  PhoneClassMap classes;
  Lexicon lexicon;
  std::vector<UtteranceRecord> utts;
  std::vector<std::vector<double>> quality;  // latent q per alignment segment
  LabelTable labels;
};

inline std::vector<std::string> synth_phone_symbols(std::size_t n) {
  static const std::array<const char*, 40> arpabet{
      "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH", "EH", "ER", "EY", "F",  "G",  "HH", "IH", "IY", "JH", "K",
      "L",  "M",  "N",  "NG", "OW", "OY", "P",  "R",  "S",  "SH", "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH", "AX"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < arpabet.size()) {
      out.emplace_back(arpabet[i]);
    } else {
      char buf[32];
      std::snprintf(buf, sizeof buf, "PH%03zu", i);
      out.emplace_back(buf);
    }
  }
  return out;
}

/// Posterior row with `mass` on `own` classes (random split) and the rest
/// spread uniformly over the other classes.
inline void synth_posterior_row(std::span<float> row, std::span<const std::uint32_t> own, double mass, Rng& rng) {
  const std::size_t others = row.size() - own.size();
  if (others == 0) mass = 1.0;
  std::vector<double> w(own.size());
  double wsum = 0.0;
  for (auto& x : w) wsum += (x = 0.5 + rng.uniform());
  std::vector<double> r(row.size(), others ? (1.0 - mass) / static_cast<double>(others) : 0.0);
  for (std::size_t i = 0; i < own.size(); ++i) r[own[i]] = mass * w[i] / wsum;
  for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(r[c]);
}

/// Utterance u draws from substream (seed, 1000 + u), so the corpus does not
/// depend on `workers`.
inline SynthCorpus generate_corpus(const SynthSpec& spec, unsigned workers = 1) {
  spec.validate();
  SynthCorpus out;
  out.inventory = PhoneInventory(synth_phone_symbols(spec.n_phones));
  out.classes = PhoneClassMap(spec.n_phones);
  {
    std::vector<std::vector<std::uint32_t>> cls(spec.n_phones);
    for (std::uint32_t c = 0; c < spec.n_classes; ++c) cls[c % spec.n_phones].push_back(c);
    for (std::uint32_t p = 0; p < spec.n_phones; ++p) out.classes.set(PhoneId{p}, cls[p]);
  }

  // phone prototypes and quality directions
  Rng proto_rng(substream_seed(spec.seed, 0));
  auto draw_vec = [&](std::size_t d) {
    std::vector<double> v(d);
    for (auto& x : v) x = proto_rng.normal();
    return v;
  };
  std::vector<std::vector<double>> mfcc_mu, mfcc_dir, deep_mu, deep_dir;
  for (std::size_t p = 0; p < spec.n_phones; ++p) {
    mfcc_mu.push_back(draw_vec(spec.d_mfcc));
    mfcc_dir.push_back(draw_vec(spec.d_mfcc));
    deep_mu.push_back(draw_vec(spec.d_deep));
    deep_dir.push_back(draw_vec(spec.d_deep));
  }

  // lexicon with Zipf-distributed usage
  Rng lex_rng(substream_seed(spec.seed, 1));
  std::vector<std::vector<PhoneId>> prons;
  std::vector<double> zipf;
  for (std::size_t w = 0; w < spec.lexicon_size; ++w) {
    const auto n = static_cast<std::size_t>(
        lex_rng.integer(static_cast<std::int64_t>(spec.word_phones_min), static_cast<std::int64_t>(spec.word_phones_max)));
    std::vector<PhoneId> ph;
    for (std::size_t i = 0; i < n; ++i) ph.push_back(PhoneId{static_cast<std::uint32_t>(lex_rng.index(spec.n_phones))});
    prons.push_back(std::move(ph));
    zipf.push_back(1.0 / std::pow(static_cast<double>(w + 1), spec.zipf_exponent));
  }
  std::vector<double> zcum(zipf.size());
  double zacc = 0.0;
  for (std::size_t i = 0; i < zipf.size(); ++i) zcum[i] = (zacc += zipf[i]);
  auto word_name = [](std::size_t w) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "W%04zu", w);
    return std::string(buf);
  };

  out.utts.resize(spec.n_utts);
  out.quality.resize(spec.n_utts);
  std::vector<std::vector<double>> human_scores(spec.n_utts);
  std::vector<std::vector<std::size_t>> word_idx(spec.n_utts);
  parallel_for(spec.n_utts, workers, [&](std::size_t u) {
    Rng rng(substream_seed(spec.seed, 1000 + u));
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "utt%05zu", u);
    UtteranceRecord rec;
    rec.utt_id = idbuf;
    const double skill = rng.uniform(spec.skill_min, spec.skill_max);
    std::vector<double> spk_m(spec.d_mfcc), spk_d(spec.d_deep);
    for (auto& x : spk_m) x = rng.normal(0.0, spec.speaker_sd);
    for (auto& x : spk_d) x = rng.normal(0.0, spec.speaker_sd);

    const auto n_words =
        static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(spec.words_min), static_cast<std::int64_t>(spec.words_max)));
    std::vector<std::size_t> wids;
    std::size_t total_frames = 0;
    std::vector<std::size_t> seg_frames;
    for (std::size_t i = 0; i < n_words; ++i) {
      const double r = rng.uniform() * zacc;
      const auto w = static_cast<std::size_t>(std::upper_bound(zcum.begin(), zcum.end(), r) - zcum.begin());
      const std::size_t wi = std::min(w, spec.lexicon_size - 1);
      wids.push_back(wi);
      rec.words.push_back(word_name(wi));
      for (std::size_t k = 0; k < prons[wi].size(); ++k) {
        const auto f = static_cast<std::size_t>(
            rng.integer(static_cast<std::int64_t>(spec.frames_min), static_cast<std::int64_t>(spec.frames_max)));
        seg_frames.push_back(f);
        total_frames += f;
      }
    }

    std::vector<float> mfcc(total_frames * spec.d_mfcc), deep(total_frames * spec.d_deep),
        post(total_frames * spec.n_classes);
    std::vector<double> qs;
    std::size_t t0 = 0, seg_i = 0;
    for (std::size_t i = 0; i < wids.size(); ++i) {
      double qsum = 0.0;
      for (PhoneId ph : prons[wids[i]]) {
        const std::size_t len = seg_frames[seg_i++];
        const double q = std::clamp(skill + rng.normal(0.0, spec.phone_quality_sd), 0.0, 1.0);
        qs.push_back(q);
        qsum += q;
        rec.align.segments.push_back(
            {ph, static_cast<std::uint32_t>(t0), static_cast<std::uint32_t>(t0 + len)});
        for (std::size_t t = t0; t < t0 + len; ++t) {
          const double jitter = spec.posterior_spread * 4.0 * q * (1.0 - q) * rng.uniform(-1.0, 1.0);
          synth_posterior_row({post.data() + t * spec.n_classes, spec.n_classes}, out.classes.classes(ph),
                              std::clamp(q + jitter, 0.0, 1.0), rng);
          for (std::size_t d = 0; d < spec.d_mfcc; ++d)
            mfcc[t * spec.d_mfcc + d] = static_cast<float>(mfcc_mu[ph.index][d] +
                                                           spec.mfcc_shift * (q - 0.5) * mfcc_dir[ph.index][d] +
                                                           spk_m[d] + rng.normal(0.0, spec.mfcc_noise));
          for (std::size_t d = 0; d < spec.d_deep; ++d)
            deep[t * spec.d_deep + d] = static_cast<float>(deep_mu[ph.index][d] +
                                                           spec.deep_shift * (q - 0.5) * deep_dir[ph.index][d] +
                                                           spk_d[d] + rng.normal(0.0, spec.deep_noise));
        }
        t0 += len;
      }
      const double mean_q = qsum / static_cast<double>(prons[wids[i]].size());
      const double human = std::clamp(mean_q + rng.normal(0.0, spec.human_noise_sd), 0.0, 1.0) * 10.0;
      human_scores[u].push_back(human);
    }
    rec.mfcc = FeatureMatrix(total_frames, spec.d_mfcc, std::move(mfcc));
    rec.deep = FeatureMatrix(total_frames, spec.d_deep, std::move(deep));
    rec.post = FeatureMatrix(total_frames, spec.n_classes, std::move(post));
    out.utts[u] = std::move(rec);
    out.quality[u] = std::move(qs);
    word_idx[u] = std::move(wids);
  });

  std::vector<std::uint64_t> counts(spec.lexicon_size, 0);
  for (std::size_t u = 0; u < spec.n_utts; ++u) {
    const auto& rec = out.utts[u];
    for (std::size_t i = 0; i < rec.words.size(); ++i) {
      ++counts[word_idx[u][i]];
      out.labels[{rec.utt_id, static_cast<std::int64_t>(i)}] = {rec.words[i], human_scores[u][i]};
    }
  }

  for (std::size_t w = 0; w < spec.lexicon_size; ++w)
    out.lexicon.add({word_name(w), prons[w], 1 + counts[w]});
  return out;
}

struct CorpusSplit {
  std::vector<std::size_t> unlabeled, train, test;  // utterance indices, ascending
};

/// Utterance-level seeded split by ratios (unlabeled, train, test).
inline CorpusSplit split_corpus(std::size_t n_utts, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (!(r >= 0.0)) throw Error(Errc::usage, "split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw Error(Errc::usage, "split ratios must sum to 1");
  std::vector<std::size_t> order(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_unl = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n_utts)));
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n_utts)));
  if (n_unl + n_train > n_utts) throw Error(Errc::usage, "split ratios round past the corpus size");
  CorpusSplit s;
  s.unlabeled.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_unl));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_unl),
                 order.begin() + static_cast<std::ptrdiff_t>(n_unl + n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_unl + n_train), order.end());
  for (std::size_t k = 0; k < 3; ++k) {
    auto& part = k == 0 ? s.unlabeled : k == 1 ? s.train : s.test;
    if (ratios[k] > 0.0 && part.empty()) throw Error(Errc::empty_input, "split produced an empty partition");
    std::sort(part.begin(), part.end());
  }
  return s;
}

struct CorpusFiles {
  fs::path manifest, phone_map, lexicon, alignment, labels;
  fs::path unlabeled_manifest, train_manifest, test_manifest;
};

/// Writes the corpus in the io formats under `dir`. With a split, also
/// writes one manifest per partition.
inline CorpusFiles write_corpus(const SynthCorpus& c, const fs::path& dir, const CorpusSplit* split = nullptr) {
  CorpusFiles f;
  f.manifest = dir / "manifest.jsonl";
  f.phone_map = dir / "phones.tsv";
  f.lexicon = dir / "lexicon.tsv";
  f.alignment = dir / "align.tsv";
  f.labels = dir / "labels.tsv";
  write_file(f.phone_map, phone_map_tsv(c.inventory, c.classes));
  write_file(f.lexicon, lexicon_tsv(c.lexicon, c.inventory));
  write_file(f.labels, labels_tsv(c.labels));
  std::string align, manifest;
  std::vector<std::string> lines;
  for (const auto& u : c.utts) {
    align += alignment_tsv(u.utt_id, u.align, c.inventory);
    UtteranceDescriptor d{u.utt_id, dir / "feats" / (u.utt_id + ".mfcc.gmx"), dir / "feats" / (u.utt_id + ".deep.gmx"),
                          dir / "feats" / (u.utt_id + ".post.gmx"), f.alignment, u.words, 0};
    write_matrix(d.mfcc, u.mfcc);
    write_matrix(d.deep, u.deep);
    write_matrix(d.post, u.post);
    lines.push_back(manifest_line(d, dir));
    manifest += lines.back() + "\n";
  }
  write_file(f.alignment, align);
  write_file(f.manifest, manifest);
  if (split) {
    auto part = [&](const std::vector<std::size_t>& idx, const char* name) {
      std::string m;
      for (auto i : idx) m += lines[i] + "\n";
      write_file(dir / name, m);
      return dir / name;
    };
    f.unlabeled_manifest = part(split->unlabeled, "unlabeled.jsonl");
    f.train_manifest = part(split->train, "train.jsonl");
    f.test_manifest = part(split->test, "test.jsonl");
  }
  return f;
}

}  // namespace gmx
