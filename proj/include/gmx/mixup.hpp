#pragma once

// Phone-level mixup: synthesize word samples by concatenating per-phone pool
// draws for a frequency-sampled lexicon word; the label is the mean GOP.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gmx/core.hpp"
#include "gmx/gop.hpp"
#include "gmx/pool.hpp"
#include "gmx/rng.hpp"

namespace gmx {

/// Draws lexicon entries with probability frequency / total frequency.
class WordSampler {
 public:
  explicit WordSampler(const Lexicon& lex) : lex_(&lex) {
    if (lex.empty()) throw Error(Errc::empty_input, "cannot sample from an empty lexicon");
    cumulative_.reserve(lex.size());
    std::uint64_t acc = 0;
    for (const auto& e : lex.entries()) {
      acc += e.frequency;
      cumulative_.push_back(acc);
    }
  }

  const LexiconEntry& operator()(Rng& rng) const {
    const std::uint64_t r = rng.index(cumulative_.back());
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), r);
    return lex_->entries()[static_cast<std::size_t>(it - cumulative_.begin())];
  }

 private:
  const Lexicon* lex_;
  std::vector<std::uint64_t> cumulative_;
};

inline const LexiconEntry& sample_word(const Lexicon& lex, Rng& rng) { return WordSampler(lex)(rng); }

/// One mixup word: a quadruplet per phone, features concatenated in phone
/// order, target = word_gop of the drawn GOPs. `drawn`, when given, receives
/// the pool index chosen for each phone.
inline WordSample generate_word_sample(const PhonePoolSet& pools, const std::string& word,
                                       std::span<const PhoneId> phones, Rng& rng,
                                       std::vector<std::size_t>* drawn = nullptr) {
  if (phones.empty()) throw Error(Errc::empty_input, "word '" + word + "' has no phones");
  for (auto p : phones)
    if (!pools.has(p))
      throw Error(Errc::empty_input, "word '" + word + "': no pool entries for phone '" +
                                         (p.index < pools.inventory().size() ? pools.inventory().symbol(p)
                                                                            : std::to_string(p.index)) +
                                         "'");

  std::vector<const Quadruplet*> picks;
  picks.reserve(phones.size());
  if (drawn) drawn->clear();
  for (auto p : phones) {
    const auto& q = sample_quadruplet(pools, p, rng);
    picks.push_back(&q);
    if (drawn) drawn->push_back(static_cast<std::size_t>(&q - pools.pool(p).data()));
  }

  WordSample s;
  s.word = word;
  s.provenance = Provenance::mixup;
  std::vector<const FeatureMatrix*> mfcc, deep;
  std::vector<double> gops;
  for (const auto* q : picks) {
    mfcc.push_back(&q->mfcc);
    deep.push_back(&q->deep);
    gops.push_back(q->gop);
    s.phones.insert(s.phones.end(), q->frames(), q->phone);
  }
  s.mfcc = concat_rows(mfcc);
  s.deep = concat_rows(deep);
  s.target = word_gop(gops);
  return s;
}

struct GenerationManifest {
  std::uint64_t seed = 0;
  std::uint64_t n_words = 0;
  std::uint64_t chunk_size = 0;
  std::uint64_t resample_count = 0;
  std::uint64_t covered_words = 0;
  std::string pool_hash;
  std::string lexicon_hash;
};

struct GeneratedDataset {
  std::vector<WordSample> samples;
  GenerationManifest manifest;
};

inline constexpr std::size_t kMixupChunkSize = 1024;

/// Generates exactly n_words mixup samples. Work is split into fixed-size
/// chunks, chunk c drawing from substream (seed, c); chunks are merged in
/// order, so output is independent of `workers`. Words with a phone lacking
/// pool coverage are redrawn and counted in the manifest.
inline GeneratedDataset generate_dataset(const PhonePoolSet& pools, const Lexicon& lex, std::uint64_t n_words,
                                         std::uint64_t seed, unsigned workers = 1, std::string pool_hash = {},
                                         std::string lexicon_hash = {}) {
  if (n_words == 0) throw Error(Errc::usage, "n_words must be positive");
  const WordSampler sampler(lex);
  std::vector<char> covered(lex.size(), 0);
  std::uint64_t n_covered = 0;
  for (std::size_t i = 0; i < lex.size(); ++i) {
    const auto& e = lex.entries()[i];
    covered[i] = std::all_of(e.phones.begin(), e.phones.end(), [&](PhoneId p) { return pools.has(p); });
    n_covered += covered[i] ? 1 : 0;
  }
  if (n_covered == 0) throw Error(Errc::empty_input, "no lexicon word has full pool coverage");

  const std::size_t n_chunks = static_cast<std::size_t>((n_words + kMixupChunkSize - 1) / kMixupChunkSize);
  std::vector<std::vector<WordSample>> chunks(n_chunks);
  std::vector<std::uint64_t> resamples(n_chunks, 0);
  parallel_for(n_chunks, workers, [&](std::size_t c) {
    Rng rng(substream_seed(seed, c));
    const std::uint64_t begin = c * kMixupChunkSize;
    const std::uint64_t count = std::min<std::uint64_t>(kMixupChunkSize, n_words - begin);
    auto& out = chunks[c];
    out.reserve(count);
    while (out.size() < count) {
      const auto& entry = sampler(rng);
      const auto idx = static_cast<std::size_t>(&entry - lex.entries().data());
      if (!covered[idx]) {
        ++resamples[c];
        continue;
      }
      out.push_back(generate_word_sample(pools, entry.word, entry.phones, rng));
    }
  });

  GeneratedDataset ds;
  ds.samples.reserve(static_cast<std::size_t>(n_words));
  for (auto& ch : chunks)
    for (auto& s : ch) ds.samples.push_back(std::move(s));
  ds.manifest.seed = seed;
  ds.manifest.n_words = n_words;
  ds.manifest.chunk_size = kMixupChunkSize;
  ds.manifest.covered_words = n_covered;
  for (auto r : resamples) ds.manifest.resample_count += r;
  ds.manifest.pool_hash = std::move(pool_hash);
  ds.manifest.lexicon_hash = std::move(lexicon_hash);
  return ds;
}

/// Pretraining set: real GOP-labelled words plus mixup words, shuffled.
inline std::vector<WordSample> mix_pretrain_corpus(std::vector<WordSample> real, std::vector<WordSample> mixed,
                                                   std::uint64_t seed) {
  for (const auto& s : real)
    if (s.provenance != Provenance::real_unlabeled)
      throw Error(Errc::usage, "real pretraining sample '" + s.word + "' has provenance " +
                                   provenance_name(s.provenance));
  for (const auto& s : mixed)
    if (s.provenance != Provenance::mixup)
      throw Error(Errc::usage, "mixup sample '" + s.word + "' has provenance " + provenance_name(s.provenance));
  std::vector<WordSample> out = std::move(real);
  out.reserve(out.size() + mixed.size());
  for (auto& s : mixed) out.push_back(std::move(s));
  Rng rng(seed);
  rng.shuffle(std::span<WordSample>(out));
  return out;
}

}  // namespace gmx
