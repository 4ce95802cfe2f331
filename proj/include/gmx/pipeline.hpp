#pragma once

// Word extraction from aligned utterances and the pretrain / fine-tune / eval
// experiment protocol (no-pretrain, real-pretrain, mixup-pretrain).

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "gmx/core.hpp"
#include "gmx/eval.hpp"
#include "gmx/gop.hpp"
#include "gmx/mixup.hpp"
#include "gmx/pool.hpp"
#include "gmx/scorer.hpp"
#include "gmx/synth.hpp"
#include "gmx/train.hpp"

namespace gmx {

struct WordSpan {
  std::string word;
  std::size_t index = 0;
  std::size_t seg_begin = 0, seg_end = 0;  // alignment segments [begin, end)
};

/// Maps transcript words onto alignment segments by walking each word's
/// lexicon pronunciation. Every segment must be consumed by exactly one word.
inline std::vector<WordSpan> segment_words(const UtteranceRecord& rec, const Lexicon& lex) {
  std::vector<WordSpan> out;
  const auto& segs = rec.align.segments;
  std::size_t k = 0;
  for (std::size_t i = 0; i < rec.words.size(); ++i) {
    const auto& w = rec.words[i];
    if (!lex.contains(w))
      throw Error(Errc::unknown_word, "utterance '" + rec.utt_id + "': word '" + w + "' not in lexicon");
    const auto& phones = lex.at(w).phones;
    if (k + phones.size() > segs.size())
      throw Error(Errc::alignment_bounds, "utterance '" + rec.utt_id + "': alignment ends inside word " +
                                              std::to_string(i) + " '" + w + "'");
    for (std::size_t j = 0; j < phones.size(); ++j)
      if (segs[k + j].phone != phones[j])
        throw Error(Errc::alignment_bounds, "utterance '" + rec.utt_id + "': segment " + std::to_string(k + j) +
                                                " does not match the pronunciation of word " + std::to_string(i) +
                                                " '" + w + "'");
    out.push_back({w, i, k, k + phones.size()});
    k += phones.size();
  }
  if (k != segs.size())
    throw Error(Errc::alignment_bounds, "utterance '" + rec.utt_id + "': " + std::to_string(segs.size() - k) +
                                            " alignment segments left after the last word");
  return out;
}

/// Frames of the word's segments (gaps between segments are skipped).
inline WordSample word_features(const UtteranceRecord& rec, const WordSpan& span) {
  WordSample s;
  s.word = span.word;
  s.utt_id = rec.utt_id;
  s.word_index = static_cast<std::int64_t>(span.index);
  std::vector<FeatureMatrix> mfcc, deep;
  for (std::size_t k = span.seg_begin; k < span.seg_end; ++k) {
    const auto& seg = rec.align.segments[k];
    mfcc.push_back(rec.mfcc.slice_rows(seg.start, seg.end));
    deep.push_back(rec.deep.slice_rows(seg.start, seg.end));
    s.phones.insert(s.phones.end(), seg.length(), seg.phone);
  }
  std::vector<const FeatureMatrix*> pm, pd;
  for (std::size_t i = 0; i < mfcc.size(); ++i) {
    pm.push_back(&mfcc[i]);
    pd.push_back(&deep[i]);
  }
  s.mfcc = concat_rows(pm);
  s.deep = concat_rows(pd);
  return s;
}

/// Real unlabelled words with word-GOP targets.
inline std::vector<WordSample> gop_word_samples(std::span<const UtteranceRecord> corpus, const Lexicon& lex,
                                                const PhoneClassMap& map, GopVariant variant = GopVariant::mean_posterior) {
  std::vector<WordSample> out;
  for (const auto& rec : corpus) {
    const auto gops = utterance_gops(rec, map, variant);
    for (const auto& span : segment_words(rec, lex)) {
      auto s = word_features(rec, span);
      std::vector<double> g;
      for (std::size_t k = span.seg_begin; k < span.seg_end; ++k) g.push_back(gops[k].gop);
      s.target = word_gop(g);
      s.provenance = Provenance::real_unlabeled;
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Human-labelled words; every transcript word needs a label whose word matches.
inline std::vector<WordSample> labeled_word_samples(std::span<const UtteranceRecord> corpus, const Lexicon& lex,
                                                    const LabelTable& labels) {
  std::vector<WordSample> out;
  for (const auto& rec : corpus) {
    for (const auto& span : segment_words(rec, lex)) {
      auto it = labels.find({rec.utt_id, static_cast<std::int64_t>(span.index)});
      if (it == labels.end())
        throw Error(Errc::missing_field, "no label for utterance '" + rec.utt_id + "' word " +
                                             std::to_string(span.index) + " '" + span.word + "'");
      if (it->second.word != span.word)
        throw Error(Errc::parse, "label for utterance '" + rec.utt_id + "' word " + std::to_string(span.index) +
                                     " names '" + it->second.word + "', transcript has '" + span.word + "'");
      auto s = word_features(rec, span);
      s.target = scale_human_score(it->second.score);
      s.provenance = Provenance::human_labeled;
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Copy of `lex` with frequency = 1 + occurrences in the given transcripts.
inline Lexicon lexicon_with_counts(const Lexicon& lex, std::span<const UtteranceRecord> corpus) {
  std::unordered_map<std::string, std::uint64_t> counts;
  for (const auto& rec : corpus)
    for (const auto& w : rec.words) ++counts[w];
  Lexicon out;
  for (auto e : lex.entries()) {
    auto it = counts.find(e.word);
    e.frequency = 1 + (it == counts.end() ? 0 : it->second);
    out.add(std::move(e));
  }
  return out;
}

/// Seeded random split of samples into (kept, held_out).
inline std::pair<std::vector<WordSample>, std::vector<WordSample>> hold_out(std::vector<WordSample> data,
                                                                              double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw Error(Errc::usage, "held-out fraction must be in [0,1)");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_out = static_cast<std::size_t>(fraction * static_cast<double>(data.size()));
  std::vector<char> is_out(data.size(), 0);
  for (std::size_t i = 0; i < n_out; ++i) is_out[order[i]] = 1;
  std::pair<std::vector<WordSample>, std::vector<WordSample>> r;
  for (std::size_t i = 0; i < data.size(); ++i) (is_out[i] ? r.second : r.first).push_back(std::move(data[i]));
  return r;
}

enum class System { no_pretrain, real_pretrain, mixup_pretrain };

inline const char* system_name(System s) {
  switch (s) {
    case System::no_pretrain: return "no-pretrain";
    case System::real_pretrain: return "real-pretrain";
    case System::mixup_pretrain: return "mixup-pretrain";
  }
  return "?";
}

struct ExperimentData {
  PhoneInventory inventory;
  Lexicon lexicon;          // mixup word sampling, frequencies as given in the input lexicon
  PhonePoolSet pools;
  std::vector<WordSample> real;          // GOP targets, pretraining
  std::vector<WordSample> real_holdout;  // GOP targets, pretraining checkpoint selection
  std::vector<WordSample> train;         // human targets, fine-tuning
  std::vector<WordSample> dev;           // human targets, fine-tuning checkpoint selection
  std::vector<WordSample> test;          // human targets, evaluation
  std::string pool_hash, lexicon_hash;
};

struct ExperimentInputs {
  std::span<const UtteranceRecord> unlabeled, train, test;
  const PhoneInventory* inventory = nullptr;
  const PhoneClassMap* classes = nullptr;
  const Lexicon* lexicon = nullptr;
  const LabelTable* labels = nullptr;
  GopVariant variant = GopVariant::mean_posterior;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

/// Pool, GOP-target words and labelled words from utterance partitions. The
/// pool and the real pretraining words come from the unlabelled partition;
/// mixup samples words with the input lexicon's frequencies.
inline ExperimentData prepare_experiment(const ExperimentInputs& in) {
  if (!in.inventory || !in.classes || !in.lexicon || !in.labels)
    throw Error(Errc::usage, "prepare_experiment: missing inventory, classes, lexicon or labels");
  ExperimentData d;
  d.inventory = *in.inventory;
  d.lexicon = *in.lexicon;
  d.pools = build_pool(in.unlabeled, *in.inventory, *in.classes, in.variant, in.workers);
  d.pool_hash = fnv1a64_hex(encode_pool(d.pools));
  d.lexicon_hash = fnv1a64_hex(lexicon_tsv(d.lexicon, d.inventory));
  auto real = gop_word_samples(in.unlabeled, *in.lexicon, *in.classes, in.variant);
  std::tie(d.real, d.real_holdout) = hold_out(std::move(real), in.holdout_fraction, substream_seed(in.seed, 11));
  auto train = labeled_word_samples(in.train, *in.lexicon, *in.labels);
  std::tie(d.train, d.dev) = hold_out(std::move(train), in.holdout_fraction, substream_seed(in.seed, 12));
  d.test = labeled_word_samples(in.test, *in.lexicon, *in.labels);
  if (d.real.empty() || d.train.empty() || d.test.empty())
    throw Error(Errc::empty_input, "experiment needs non-empty real, train and test word sets");
  return d;
}

/// Generates a synthetic corpus, splits it by utterance and prepares the
/// experiment sets from it. Lexicon frequencies are recounted from the
/// labelled training transcripts.
inline ExperimentData synthetic_experiment(const SynthSpec& spec, std::array<double, 3> ratios,
                                           double holdout_fraction = 0.1, unsigned workers = 1) {
  const auto corpus = generate_corpus(spec);
  const auto split = split_corpus(corpus.utts.size(), ratios, substream_seed(spec.seed, 7));
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<UtteranceRecord> out;
    for (auto i : idx) out.push_back(corpus.utts[i]);
    return out;
  };
  const auto unl = pick(split.unlabeled), tr = pick(split.train), te = pick(split.test);
  const auto lexicon = lexicon_with_counts(corpus.lexicon, tr);
  ExperimentInputs in;
  in.unlabeled = unl;
  in.train = tr;
  in.test = te;
  in.inventory = &corpus.inventory;
  in.classes = &corpus.classes;
  in.lexicon = &lexicon;
  in.labels = &corpus.labels;
  in.holdout_fraction = holdout_fraction;
  in.seed = spec.seed;
  in.workers = workers;
  return prepare_experiment(in);
}

struct ExperimentOptions {
  ScorerConfig scorer;
  std::size_t pretrain_epochs = 20;
  std::size_t finetune_epochs = 50;
  std::uint64_t n_mixup = 0;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

struct SystemRun {
  System system = System::no_pretrain;
  double pcc = 0.0;
  std::size_t pretrain_words = 0;
  TrainResult pretrain, finetune;
  EvalResult eval;
  ScorerModel<float> model;
};

/// Seeds for the stages of one run; all systems under one seed share the
/// initial weights and the fine-tuning order.
inline std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) { return substream_seed(seed, stage); }

inline SystemRun run_system(System system, const ExperimentData& data, const ExperimentOptions& opts) {
  ScorerConfig cfg = opts.scorer;
  cfg.n_phones = data.inventory.size();
  cfg.validate();
  Rng init_rng(stage_seed(opts.seed, 1));
  SystemRun run;
  run.system = system;
  run.model = init_model<float>(cfg, init_rng);

  if (system != System::no_pretrain) {
    std::vector<WordSample> pre = data.real;
    if (system == System::mixup_pretrain) {
      if (opts.n_mixup == 0) throw Error(Errc::usage, "mixup-pretrain needs n_mixup > 0");
      auto gen = generate_dataset(data.pools, data.lexicon, opts.n_mixup, stage_seed(opts.seed, 3), opts.workers,
                                  data.pool_hash, data.lexicon_hash);
      pre = mix_pretrain_corpus(std::move(pre), std::move(gen.samples), stage_seed(opts.seed, 4));
    }
    run.pretrain_words = pre.size();
    TrainOptions to = TrainOptions::from(cfg, TargetField::gop);
    to.epochs = opts.pretrain_epochs;
    to.shuffle_seed = stage_seed(opts.seed, 2);
    run.pretrain = train(run.model, std::span<const WordSample>(pre), to, data.real_holdout);
  }

  TrainOptions fo = TrainOptions::from(cfg, TargetField::human);
  fo.epochs = opts.finetune_epochs;
  fo.shuffle_seed = stage_seed(opts.seed, 5);
  run.finetune = train(run.model, std::span<const WordSample>(data.train), fo, data.dev);
  run.eval = evaluate(run.model, std::span<const WordSample>(data.test));
  run.pcc = run.eval.pcc;
  return run;
}

/// Augmented-size sweep: each size counts real plus mixup words, so the
/// size equal to the real count is the no-mixup (real-pretrain) point.
inline std::vector<SweepPoint> run_sweep(const ExperimentData& data, const ExperimentOptions& base,
                                         std::span<const std::uint64_t> sizes, std::span<const FeatureSet> sets) {
  const std::uint64_t n_real = data.real.size();
  for (auto s : sizes)
    if (s < n_real)
      throw Error(Errc::usage, "sweep size " + std::to_string(s) + " is below the real pretraining set (" +
                                   std::to_string(n_real) + " words)");
  std::vector<SweepPoint> out;
  for (auto size : sizes)
    for (auto fs : sets) {
      ExperimentOptions o = base;
      o.scorer.features = fs;
      o.n_mixup = size - n_real;
      const auto r = run_system(o.n_mixup ? System::mixup_pretrain : System::real_pretrain, data, o);
      out.push_back({size, fs, r.pcc});
    }
  return out;
}

}  // namespace gmx
