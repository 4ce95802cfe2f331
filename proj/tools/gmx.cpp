// gmx: command-line front end for GOP extraction, phone pools, mixup
// generation, scorer training and evaluation.

#include <CLI11.hpp>

#include <cctype>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gmx/gmx.hpp"

namespace {

using namespace gmx;

constexpr const char* kToolVersion = "gmx 1.0";

// ---------------------------------------------------------------------------
// run manifests

struct RunLog {
  std::string subcommand;
  std::vector<std::string> argv;
  Json seeds = Json::object();
  Json inputs = Json::object();
  Json outputs = Json::object();
  Json results = Json::object();
  Json config = Json::object();

  void input(const fs::path& p) { inputs[p.generic_string()] = hash_file(p); }
  void output(const fs::path& p) { outputs[p.generic_string()] = hash_file(p); }

  void write(const fs::path& path) const {
    Json j = {{"tool", kToolVersion}, {"command", subcommand}, {"argv", argv},     {"seeds", seeds},
              {"inputs", inputs},     {"outputs", outputs},    {"config", config}, {"results", results}};
    write_file(path, j.dump(2) + "\n");
  }
};

fs::path run_manifest_path(const fs::path& primary) { return fs::path(primary.string() + ".run.json"); }

// ---------------------------------------------------------------------------
// flag helpers

std::string normalize_key(std::string s) {
  for (auto& c : s)
    if (c == '-') c = '_';
  return s;
}

/// Fills options not given on the command line from a JSON object whose keys
/// are long option names. Object-valued `sections` are left to the caller.
void apply_config_file(CLI::App* sub, const Json& cfg, const std::vector<std::string>& sections) {
  if (!cfg.is_object()) throw Error(Errc::usage, "config file must hold a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    const std::string k = normalize_key(key);
    if (std::find(sections.begin(), sections.end(), k) != sections.end()) continue;
    CLI::Option* opt = nullptr;
    for (auto* o : sub->get_options()) {
      for (const auto& ln : o->get_lnames())
        if (normalize_key(ln) == k) opt = o;
    }
    if (!opt || k == "config") throw Error(Errc::usage, "config key '" + key + "' is not an option of '" + sub->get_name() + "'");
    if (opt->count() > 0) continue;  // flags override the file
    auto as_string = [&](const Json& v) {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
      if (v.is_number()) return v.dump();
      throw Error(Errc::usage, "config key '" + key + "' has an unsupported value type");
    };
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(as_string(v));
    } else {
      opt->add_result(as_string(value));
    }
    opt->run_callback();
  }
}

Json read_json_file(const fs::path& p) {
  try {
    return Json::parse(read_file(p));
  } catch (const Json::parse_error& e) {
    throw Error(Errc::parse, "JSON file '" + p.string() + "': " + e.what());
  }
}

/// "50000", "50k", "1.5m" -> count
std::uint64_t parse_count(const std::string& s) {
  std::string t = s;
  double mult = 1.0;
  if (!t.empty() && (t.back() == 'k' || t.back() == 'K')) {
    mult = 1e3;
    t.pop_back();
  } else if (!t.empty() && (t.back() == 'm' || t.back() == 'M')) {
    mult = 1e6;
    t.pop_back();
  }
  double v = 0.0;
  try {
    std::size_t used = 0;
    v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw Error(Errc::usage, "cannot parse count '" + s + "'");
  }
  const double n = v * mult;
  if (!(n >= 0.0) || n != std::floor(n)) throw Error(Errc::usage, "count '" + s + "' is not a non-negative integer");
  return static_cast<std::uint64_t>(n);
}

// ---------------------------------------------------------------------------
// data loading

PhoneMapFile load_phone_map(const fs::path& p, RunLog& log) {
  const auto r = resolve_data_path(p);
  log.input(r);
  return read_phone_map(r);
}

Lexicon load_lexicon(const fs::path& p, const PhoneInventory& inv, RunLog& log) {
  const auto r = resolve_data_path(p);
  log.input(r);
  return read_lexicon(r, inv);
}

LabelTable load_labels(const fs::path& p, RunLog& log) {
  const auto r = resolve_data_path(p);
  log.input(r);
  return read_labels(r);
}

std::vector<UtteranceRecord> load_corpus(const fs::path& manifest, const PhoneInventory& inv, AlignFormat fmt,
                                         RunLog& log) {
  const auto r = resolve_data_path(manifest);
  log.input(r);
  CorpusLoader loader(inv, fmt);
  const auto descs = read_manifest(r);
  return loader.load_all(descs);
}

struct WordData {
  std::vector<WordSample> samples;
  std::vector<std::string> phones;
};

void write_words(const fs::path& out, std::span<const WordSample> samples, const std::vector<std::string>& phones,
                 Json extra = Json::object()) {
  extra["phones"] = phones;
  write_dataset(out, samples, extra);
}

WordData load_words(const fs::path& p, RunLog& log) {
  const auto r = resolve_data_path(p);
  log.input(r);
  WordData d;
  d.samples = read_dataset(r);
  const fs::path side(r.string() + ".json");
  if (fs::exists(side)) {
    const auto j = read_json_file(side);
    if (j.contains("phones")) d.phones = j["phones"].get<std::vector<std::string>>();
  }
  return d;
}

void require_provenance(std::span<const WordSample> s, Provenance p, const std::string& what) {
  for (const auto& w : s)
    if (w.provenance != p)
      throw Error(Errc::usage, what + " holds a " + provenance_name(w.provenance) + " sample, expected " +
                                   provenance_name(p));
}

void check_phones(const std::vector<std::string>& a, const std::vector<std::string>& b, const std::string& what) {
  if (!a.empty() && !b.empty() && a != b) throw Error(Errc::dimension_mismatch, what + ": phone inventories differ");
}

// ---------------------------------------------------------------------------
// scorer settings shared by the training subcommands

struct TrainFlags {
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> learning_rate;
  std::optional<std::string> features;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* sub) {
    sub->add_option("--epochs", epochs, "Training epochs");
    sub->add_option("--batch-size", batch_size, "Mini-batch size");
    sub->add_option("--learning-rate,--lr", learning_rate, "Adam learning rate");
    sub->add_option("--features", features, "Feature set: mfcc, deep or multi");
    sub->add_option("--seed", seed, "Random seed");
  }

  void apply(ScorerConfig& c) const {
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (learning_rate) c.learning_rate = *learning_rate;
    if (features) c.features = parse_feature_set(*features);
    if (seed) c.seed = *seed;
  }
};

/// Defaults, then the config file's "scorer" object, then flags.
ScorerConfig scorer_config(const Json& file_cfg, const TrainFlags& flags) {
  ScorerConfig c;
  c.epochs = 20;
  if (file_cfg.contains("scorer")) apply_json(c, file_cfg["scorer"]);
  flags.apply(c);
  return c;
}

void set_input_dims(ScorerConfig& c, const WordSample& s, const Json& file_cfg) {
  auto clash = [&](const char* key, std::size_t have) {
    if (file_cfg.contains("scorer") && file_cfg["scorer"].contains(key) && file_cfg["scorer"][key].get<std::size_t>() != have)
      throw Error(Errc::dimension_mismatch, std::string("scorer config ") + key + " disagrees with the data (" +
                                                std::to_string(have) + ")");
  };
  clash("d_mfcc", s.mfcc.cols());
  clash("d_deep", s.deep.cols());
  c.d_mfcc = s.mfcc.cols();
  c.d_deep = s.deep.cols();
}

Json train_result_json(const TrainResult& r) {
  return {{"epoch_loss", r.epoch_loss},
          {"validation_loss", r.validation_loss},
          {"best_epoch", r.best_epoch},
          {"steps", r.steps},
          {"padded_samples", r.padded_samples}};
}

// ---------------------------------------------------------------------------
// experiment data for sweep / compare

struct DataFlags {
  bool synthetic = false;
  std::string synth_spec;
  std::vector<double> split{0.25, 0.15, 0.6};
  std::string unlabeled_manifest, train_manifest, test_manifest, labels, phone_map, lexicon;
  std::string align_format = "frames", variant = "mean_posterior";
  double holdout_fraction = 0.1;

  void add(CLI::App* sub) {
    sub->add_flag("--synthetic", synthetic, "Use a generated synthetic corpus");
    sub->add_option("--synth-spec", synth_spec, "Synthetic corpus spec (JSON)");
    sub->add_option("--split", split, "Synthetic utterance split: unlabeled,train,test")->delimiter(',');
    sub->add_option("--unlabeled-manifest", unlabeled_manifest, "Unlabelled utterances (pool and GOP-target source)");
    sub->add_option("--train-manifest", train_manifest, "Human-labelled training utterances");
    sub->add_option("--test-manifest", test_manifest, "Human-labelled test utterances");
    sub->add_option("--labels", labels, "Word label file covering train and test utterances");
    sub->add_option("--phone-map", phone_map, "Phone map file");
    sub->add_option("--lexicon", lexicon, "Lexicon file");
    sub->add_option("--align-format", align_format, "Alignment format: frames or ctm");
    sub->add_option("--variant", variant, "GOP variant: mean_posterior or log_mean");
    sub->add_option("--holdout-fraction", holdout_fraction, "Share of pretraining and fine-tuning words held out");
  }
};

ExperimentData load_experiment(const DataFlags& f, std::uint64_t seed, unsigned workers, RunLog& log) {
  if (f.synthetic) {
    SynthSpec spec;
    if (!f.synth_spec.empty()) {
      const auto p = resolve_data_path(f.synth_spec);
      log.input(p);
      apply_json(spec, read_json_file(p));
    }
    if (f.split.size() != 3) throw Error(Errc::usage, "--split needs three ratios");
    log.config["synth_spec"] = to_json(spec);
    return synthetic_experiment(spec, {f.split[0], f.split[1], f.split[2]}, f.holdout_fraction, workers);
  }
  for (const auto* s : {&f.unlabeled_manifest, &f.train_manifest, &f.test_manifest, &f.labels, &f.phone_map, &f.lexicon})
    if (s->empty())
      throw Error(Errc::usage,
                  "real-data mode needs --unlabeled-manifest, --train-manifest, --test-manifest, --labels, "
                  "--phone-map and --lexicon (or --synthetic)");
  const auto pm = load_phone_map(f.phone_map, log);
  const auto lex = load_lexicon(f.lexicon, pm.inventory, log);
  const auto labels = load_labels(f.labels, log);
  const auto fmt = parse_align_format(f.align_format);
  const auto unl = load_corpus(f.unlabeled_manifest, pm.inventory, fmt, log);
  const auto tr = load_corpus(f.train_manifest, pm.inventory, fmt, log);
  const auto te = load_corpus(f.test_manifest, pm.inventory, fmt, log);
  ExperimentInputs in;
  in.unlabeled = unl;
  in.train = tr;
  in.test = te;
  in.inventory = &pm.inventory;
  in.classes = &pm.classes;
  in.lexicon = &lex;
  in.labels = &labels;
  in.variant = parse_gop_variant(f.variant);
  in.holdout_fraction = f.holdout_fraction;
  in.seed = seed;
  in.workers = workers;
  return prepare_experiment(in);
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"Pronunciation scoring with GOP-target pretraining and phone-level mixup"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path;
  unsigned workers = 1;
  // required options are checked after --config has been merged
  std::vector<CLI::Option*> required;
  auto need = [&](CLI::Option* o) { required.push_back(o); };
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file supplying option values (flags take precedence)");
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  std::string spec_path, out_path;
  std::optional<std::uint64_t> synth_seed;
  std::vector<double> split{0.25, 0.15, 0.6};
  synth->add_option("--spec", spec_path, "Corpus spec (JSON)");
  need(synth->add_option("--out", out_path, "Output directory"));
  synth->add_option("--seed", synth_seed, "Seed (overrides the spec)");
  synth->add_option("--split", split, "Utterance split ratios: unlabeled,train,test")->delimiter(',');
  common(synth);

  // gop
  auto* gop = app.add_subcommand("gop", "Dump per-phone and per-word GOPs");
  std::string manifest, phone_map, lexicon_path, variant = "mean_posterior", align_format = "frames";
  need(gop->add_option("--manifest", manifest, "Utterance manifest"));
  need(gop->add_option("--phone-map", phone_map, "Phone map"));
  gop->add_option("--lexicon", lexicon_path, "Lexicon (enables per-word rows)");
  gop->add_option("--variant", variant, "mean_posterior or log_mean");
  gop->add_option("--align-format", align_format, "frames or ctm");
  need(gop->add_option("--out", out_path, "Output TSV"));
  common(gop);

  // build-pool
  auto* build_pool_cmd = app.add_subcommand("build-pool", "Build per-phone quadruplet pools");
  need(build_pool_cmd->add_option("--manifest", manifest, "Utterance manifest"));
  need(build_pool_cmd->add_option("--phone-map", phone_map, "Phone map"));
  build_pool_cmd->add_option("--variant", variant, "mean_posterior or log_mean");
  build_pool_cmd->add_option("--align-format", align_format, "frames or ctm");
  need(build_pool_cmd->add_option("--out", out_path, "Output pool file"));
  common(build_pool_cmd);

  // words
  auto* words = app.add_subcommand("words", "Extract word samples (GOP or human targets) from utterances");
  std::string labels_path;
  need(words->add_option("--manifest", manifest, "Utterance manifest"));
  need(words->add_option("--phone-map", phone_map, "Phone map"));
  need(words->add_option("--lexicon", lexicon_path, "Lexicon"));
  words->add_option("--labels", labels_path, "Word labels (human targets); omit for GOP targets");
  words->add_option("--variant", variant, "mean_posterior or log_mean");
  words->add_option("--align-format", align_format, "frames or ctm");
  need(words->add_option("--out", out_path, "Output dataset"));
  common(words);

  // mixup
  auto* mixup = app.add_subcommand("mixup", "Generate mixup word samples from a pool");
  std::string pool_path, n_str;
  std::uint64_t mix_seed = 0;
  need(mixup->add_option("--pool", pool_path, "Pool file"));
  need(mixup->add_option("--lexicon", lexicon_path, "Lexicon with word frequencies"));
  need(mixup->add_option("--n", n_str, "Number of words (k/m suffixes allowed)"));
  mixup->add_option("--seed", mix_seed, "Seed");
  need(mixup->add_option("--out", out_path, "Output dataset"));
  common(mixup);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Train the scorer on GOP targets");
  std::string real_path, mixup_path, validation_path, out_ckpt;
  double holdout_fraction = 0.1;
  TrainFlags pre_flags;
  need(pretrain->add_option("--real", real_path, "Real unlabelled words with GOP targets"));
  pretrain->add_option("--mixup", mixup_path, "Mixup words");
  pretrain->add_option("--validation", validation_path, "Held-out GOP-target words for checkpoint selection");
  pretrain->add_option("--holdout-fraction", holdout_fraction, "Share of real words held out when no --validation");
  need(pretrain->add_option("--out-ckpt", out_ckpt, "Output checkpoint"));
  pre_flags.add(pretrain);
  common(pretrain);

  // finetune
  auto* finetune = app.add_subcommand("finetune", "Fine-tune on human word scores");
  std::string ckpt_path, train_data, train_manifest, train_labels, dev_data;
  TrainFlags ft_flags;
  finetune->add_option("--ckpt", ckpt_path, "Starting checkpoint (omit to train from scratch)");
  finetune->add_option("--train-data", train_data, "Human-labelled words dataset");
  finetune->add_option("--train-manifest", train_manifest, "Human-labelled utterances");
  finetune->add_option("--train-labels", train_labels, "Word labels for --train-manifest");
  finetune->add_option("--lexicon", lexicon_path, "Lexicon (with --train-manifest)");
  finetune->add_option("--phone-map", phone_map, "Phone map (when no checkpoint supplies the inventory)");
  finetune->add_option("--align-format", align_format, "frames or ctm");
  finetune->add_option("--dev-data", dev_data, "Held-out labelled words for checkpoint selection");
  finetune->add_option("--holdout-fraction", holdout_fraction, "Share of training words held out when no --dev-data");
  need(finetune->add_option("--out-ckpt", out_ckpt, "Output checkpoint"));
  ft_flags.add(finetune);
  common(finetune);

  // eval
  auto* eval = app.add_subcommand("eval", "Score a labelled test set and report PCC");
  std::string test_data, test_manifest, test_labels, report_path;
  need(eval->add_option("--ckpt", ckpt_path, "Checkpoint"));
  eval->add_option("--test-data", test_data, "Human-labelled words dataset");
  eval->add_option("--test-manifest", test_manifest, "Human-labelled test utterances");
  eval->add_option("--test-labels", test_labels, "Word labels for --test-manifest");
  eval->add_option("--lexicon", lexicon_path, "Lexicon (with --test-manifest)");
  eval->add_option("--align-format", align_format, "frames or ctm");
  need(eval->add_option("--report", report_path, "Predictions CSV"));
  common(eval);

  // sweep and compare
  DataFlags data_flags;
  std::uint64_t exp_seed = 1;
  std::size_t pretrain_epochs = 20, finetune_epochs = 50;
  TrainFlags exp_flags;

  auto* sweep = app.add_subcommand("sweep", "PCC versus augmented pretraining size per feature set");
  std::vector<std::string> sizes, feature_sets{"multi", "mfcc", "deep"};
  std::string out_csv;
  need(sweep->add_option("--sizes", sizes, "Pretraining sizes, real plus mixup (k/m suffixes allowed)")
      ->delimiter(','));
  sweep->add_option("--feature-sets", feature_sets, "Feature sets")->delimiter(',');
  need(sweep->add_option("--out-csv", out_csv, "Output CSV"));
  sweep->add_option("--seed", exp_seed, "Seed");
  sweep->add_option("--pretrain-epochs", pretrain_epochs, "Pretraining epochs");
  sweep->add_option("--finetune-epochs", finetune_epochs, "Fine-tuning epochs");
  data_flags.add(sweep);
  common(sweep);

  auto* compare = app.add_subcommand("compare", "No-pretrain vs real-pretrain vs mixup-pretrain");
  std::vector<std::uint64_t> seeds{1};
  std::string n_mixup_str = "18k";
  std::vector<std::string> systems{"no-pretrain", "real-pretrain", "mixup-pretrain"};
  compare->add_option("--seeds", seeds, "Seeds; results are averaged")->delimiter(',');
  compare->add_option("--n-mixup", n_mixup_str, "Mixup words added for mixup-pretrain (k/m suffixes allowed)");
  compare->add_option("--systems", systems, "Systems to run")->delimiter(',');
  need(compare->add_option("--out-csv", out_csv, "Output CSV"));
  compare->add_option("--pretrain-epochs", pretrain_epochs, "Pretraining epochs");
  compare->add_option("--finetune-epochs", finetune_epochs, "Fine-tuning epochs");
  data_flags.add(compare);
  common(compare);

  for (auto* sub : {sweep, compare}) {
    sub->add_option("--batch-size", exp_flags.batch_size, "Mini-batch size");
    sub->add_option("--learning-rate,--lr", exp_flags.learning_rate, "Adam learning rate");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(Errc::usage);
  }

  CLI::App* sub = app.get_subcommands().front();
  RunLog log;
  log.subcommand = sub->get_name();
  for (int i = 1; i < argc; ++i) log.argv.emplace_back(argv[i]);

  Json file_cfg = Json::object();
  if (!config_path.empty()) {
    const auto p = resolve_data_path(config_path);
    log.input(p);
    file_cfg = read_json_file(p);
    try {
      apply_config_file(sub, file_cfg, {"scorer", "spec"});
    } catch (const CLI::ParseError& e) {
      throw Error(Errc::usage, std::string("config file: ") + e.what());
    }
  }
  for (const auto* o : sub->get_options())
    if (std::find(required.begin(), required.end(), o) != required.end() && o->count() == 0)
      throw Error(Errc::usage, o->get_name() + " is required (on the command line or in --config)");
  log.config["workers"] = workers;

  // ---- synth
  if (sub == synth) {
    SynthSpec spec;
    if (!spec_path.empty()) {
      const auto p = resolve_data_path(spec_path);
      log.input(p);
      apply_json(spec, read_json_file(p));
    }
    if (file_cfg.contains("spec")) apply_json(spec, file_cfg["spec"]);
    if (synth_seed) spec.seed = *synth_seed;
    if (split.size() != 3) throw Error(Errc::usage, "--split needs three ratios");
    auto corpus = generate_corpus(spec, workers);
    const auto parts = split_corpus(corpus.utts.size(), {split[0], split[1], split[2]}, substream_seed(spec.seed, 7));
    std::vector<UtteranceRecord> labeled_train;
    for (auto i : parts.train) labeled_train.push_back(corpus.utts[i]);
    corpus.lexicon = lexicon_with_counts(corpus.lexicon, labeled_train);
    const fs::path dir = resolve_data_path(out_path);
    const auto files = write_corpus(corpus, dir, &parts);
    std::string quality = "utt_id\tsegment\tq\n";
    for (std::size_t u = 0; u < corpus.utts.size(); ++u)
      for (std::size_t k = 0; k < corpus.quality[u].size(); ++k)
        quality += corpus.utts[u].utt_id + "\t" + std::to_string(k) + "\t" + format_double(corpus.quality[u][k]) + "\n";
    write_file(dir / "quality.tsv", quality);
    write_file(dir / "spec.json", to_json(spec).dump(2) + "\n");
    for (const auto& p : {files.manifest, files.phone_map, files.lexicon, files.alignment, files.labels,
                          files.unlabeled_manifest, files.train_manifest, files.test_manifest, dir / "quality.tsv",
                          dir / "spec.json"})
      log.output(p);
    log.seeds["corpus"] = spec.seed;
    log.config["spec"] = to_json(spec);
    log.config["split"] = split;
    log.results = {{"utterances", corpus.utts.size()},
                   {"unlabeled", parts.unlabeled.size()},
                   {"train", parts.train.size()},
                   {"test", parts.test.size()}};
    log.write(dir / "synth.run.json");
    std::cout << "wrote " << corpus.utts.size() << " utterances to " << dir.string() << "\n";
    return 0;
  }

  // ---- gop
  if (sub == gop) {
    const auto pm = load_phone_map(phone_map, log);
    const auto v = parse_gop_variant(variant);
    const auto corpus = load_corpus(manifest, pm.inventory, parse_align_format(align_format), log);
    std::optional<Lexicon> lex;
    if (!lexicon_path.empty()) lex = load_lexicon(lexicon_path, pm.inventory, log);
    std::string out = "kind\tutt_id\tindex\tunit\tstart\tend\tgop\n";
    std::size_t n_phone = 0, n_word = 0;
    for (const auto& rec : corpus) {
      const auto gops = utterance_gops(rec, pm.classes, v);
      for (std::size_t k = 0; k < gops.size(); ++k) {
        const auto& s = gops[k].segment;
        out += "phone\t" + rec.utt_id + "\t" + std::to_string(k) + "\t" + pm.inventory.symbol(s.phone) + "\t" +
               std::to_string(s.start) + "\t" + std::to_string(s.end) + "\t" + format_double(gops[k].gop) + "\n";
        ++n_phone;
      }
      if (lex) {
        for (const auto& span : segment_words(rec, *lex)) {
          std::vector<double> g;
          for (std::size_t k = span.seg_begin; k < span.seg_end; ++k) g.push_back(gops[k].gop);
          out += "word\t" + rec.utt_id + "\t" + std::to_string(span.index) + "\t" + span.word + "\t" +
                 std::to_string(rec.align.segments[span.seg_begin].start) + "\t" +
                 std::to_string(rec.align.segments[span.seg_end - 1].end) + "\t" + format_double(word_gop(g)) + "\n";
          ++n_word;
        }
      }
    }
    const auto outp = resolve_data_path(out_path);
    write_file(outp, out);
    log.output(outp);
    log.config["variant"] = gop_variant_name(v);
    log.results = {{"phones", n_phone}, {"words", n_word}};
    log.write(run_manifest_path(outp));
    std::cout << n_phone << " phone GOPs, " << n_word << " word GOPs\n";
    return 0;
  }

  // ---- build-pool
  if (sub == build_pool_cmd) {
    const auto pm = load_phone_map(phone_map, log);
    const auto v = parse_gop_variant(variant);
    const auto corpus = load_corpus(manifest, pm.inventory, parse_align_format(align_format), log);
    const auto pools = build_pool(corpus, pm.inventory, pm.classes, v, workers);
    const auto outp = resolve_data_path(out_path);
    write_pool(outp, pools);
    log.output(outp);
    std::size_t long_segments = 0, covered = 0;
    for (const auto& st : pool_stats(pools)) {
      long_segments += st.long_segments;
      covered += st.count > 0 ? 1 : 0;
    }
    if (long_segments)
      std::cerr << "gmx: warning: " << long_segments << " segments longer than " << kLongSegmentFrames << " frames\n";
    log.config["variant"] = gop_variant_name(v);
    log.results = {{"quadruplets", pools.total()}, {"phones_covered", covered}, {"long_segments", long_segments}};
    log.write(run_manifest_path(outp));
    std::cout << pools.total() << " quadruplets over " << covered << " phones\n";
    return 0;
  }

  // ---- words
  if (sub == words) {
    const auto pm = load_phone_map(phone_map, log);
    const auto lex = load_lexicon(lexicon_path, pm.inventory, log);
    const auto corpus = load_corpus(manifest, pm.inventory, parse_align_format(align_format), log);
    std::vector<WordSample> samples;
    if (labels_path.empty()) {
      samples = gop_word_samples(corpus, lex, pm.classes, parse_gop_variant(variant));
    } else {
      samples = labeled_word_samples(corpus, lex, load_labels(labels_path, log));
    }
    const auto outp = resolve_data_path(out_path);
    write_words(outp, samples, pm.inventory.symbols(),
                {{"target", labels_path.empty() ? "gop" : "human"}, {"variant", variant}});
    log.output(outp);
    log.results = {{"words", samples.size()}};
    log.write(run_manifest_path(outp));
    std::cout << samples.size() << " words\n";
    return 0;
  }

  // ---- mixup
  if (sub == mixup) {
    const auto pp = resolve_data_path(pool_path);
    log.input(pp);
    const auto pools = read_pool(pp);
    const auto lex = load_lexicon(lexicon_path, pools.inventory(), log);
    const auto n = parse_count(n_str);
    const auto ds = generate_dataset(pools, lex, n, mix_seed, workers, hash_file(pp),
                                     hash_file(resolve_data_path(lexicon_path)));
    const auto outp = resolve_data_path(out_path);
    write_words(outp, ds.samples, pools.inventory().symbols(), {{"generation", to_json(ds.manifest)}});
    log.output(outp);
    log.seeds["mixup"] = mix_seed;
    log.results = to_json(ds.manifest);
    log.write(run_manifest_path(outp));
    std::cout << ds.samples.size() << " mixup words (" << ds.manifest.resample_count << " resampled draws)\n";
    return 0;
  }

  // ---- pretrain
  if (sub == pretrain) {
    auto real = load_words(real_path, log);
    require_provenance(real.samples, Provenance::real_unlabeled, "--real");
    if (real.samples.empty()) throw Error(Errc::empty_input, "--real holds no words");
    WordData mixed;
    if (!mixup_path.empty()) {
      mixed = load_words(mixup_path, log);
      require_provenance(mixed.samples, Provenance::mixup, "--mixup");
      check_phones(real.phones, mixed.phones, "--real vs --mixup");
    }
    const auto phones = real.phones.empty() ? mixed.phones : real.phones;
    if (phones.empty()) throw Error(Errc::missing_field, "dataset sidecar lacks the phone inventory");
    auto cfg = scorer_config(file_cfg, pre_flags);
    set_input_dims(cfg, real.samples.front(), file_cfg);
    cfg.n_phones = phones.size();
    cfg.validate();

    std::vector<WordSample> kept, held;
    if (!validation_path.empty()) {
      kept = std::move(real.samples);
      auto v = load_words(validation_path, log);
      require_provenance(v.samples, Provenance::real_unlabeled, "--validation");
      held = std::move(v.samples);
    } else {
      std::tie(kept, held) = hold_out(std::move(real.samples), holdout_fraction, substream_seed(cfg.seed, 11));
    }
    const auto n_real = kept.size();
    auto pre = mix_pretrain_corpus(std::move(kept), std::move(mixed.samples), stage_seed(cfg.seed, 4));
    Rng init(stage_seed(cfg.seed, 1));
    auto model = init_model<float>(cfg, init);
    TrainOptions to = TrainOptions::from(cfg, TargetField::gop);
    to.shuffle_seed = stage_seed(cfg.seed, 2);
    const auto res = train(model, std::span<const WordSample>(pre), to, held);
    const auto outp = resolve_data_path(out_ckpt);
    Json manifest = {{"stage", "pretrain"},
                     {"real_words", n_real},
                     {"mixup_words", pre.size() - n_real},
                     {"validation_words", held.size()},
                     {"training", train_result_json(res)}};
    write_checkpoint(outp, model, phones, manifest);
    log.output(outp);
    log.seeds["scorer"] = cfg.seed;
    log.config["scorer"] = to_json(cfg);
    log.results = manifest;
    log.write(run_manifest_path(outp));
    std::cout << "pretrained on " << pre.size() << " words, best epoch " << res.best_epoch << "\n";
    return 0;
  }

  // ---- finetune
  if (sub == finetune) {
    std::optional<Checkpoint<float>> ck;
    if (!ckpt_path.empty()) {
      const auto p = resolve_data_path(ckpt_path);
      log.input(p);
      ck = read_checkpoint<float>(p);
    }
    std::vector<std::string> phones = ck ? ck->phones : std::vector<std::string>{};
    std::optional<PhoneMapFile> pm;
    if (!phone_map.empty()) {
      pm = load_phone_map(phone_map, log);
      check_phones(phones, pm->inventory.symbols(), "--ckpt vs --phone-map");
      phones = pm->inventory.symbols();
    }
    std::vector<WordSample> train_words;
    if (!train_data.empty()) {
      auto d = load_words(train_data, log);
      check_phones(phones, d.phones, "--train-data");
      if (phones.empty()) phones = d.phones;
      train_words = std::move(d.samples);
    } else {
      if (train_manifest.empty() || train_labels.empty() || lexicon_path.empty())
        throw Error(Errc::usage, "finetune needs --train-data, or --train-manifest with --train-labels and --lexicon");
      if (phones.empty()) throw Error(Errc::usage, "no phone inventory: pass --phone-map or a checkpoint");
      const PhoneInventory inv(phones);
      const auto lex = load_lexicon(lexicon_path, inv, log);
      const auto corpus = load_corpus(train_manifest, inv, parse_align_format(align_format), log);
      train_words = labeled_word_samples(corpus, lex, load_labels(train_labels, log));
    }
    require_provenance(train_words, Provenance::human_labeled, "training words");
    if (train_words.empty()) throw Error(Errc::empty_input, "no training words");
    if (phones.empty()) throw Error(Errc::missing_field, "no phone inventory for the scorer");

    ScorerModel<float> model;
    ScorerConfig cfg;
    if (ck) {
      model = std::move(ck->model);
      cfg = model.cfg;
      if (file_cfg.contains("scorer")) {
        static const std::vector<std::string> training_keys{"learning_rate", "beta1",      "beta2", "adam_eps",
                                                            "batch_size",    "epochs",     "seed",  "dropout",
                                                            "bn_momentum",   "pad_short"};
        for (const auto& [k, v] : file_cfg["scorer"].items())
          if (std::find(training_keys.begin(), training_keys.end(), k) == training_keys.end() &&
              to_json(cfg)[k] != v)
            throw Error(Errc::usage, "scorer key '" + k + "' changes the checkpoint architecture");
        apply_json(cfg, file_cfg["scorer"]);
      }
      if (ft_flags.features && parse_feature_set(*ft_flags.features) != cfg.features)
        throw Error(Errc::usage, "--features differs from the checkpoint");
      ft_flags.apply(cfg);
      if (!ft_flags.epochs && !(file_cfg.contains("scorer") && file_cfg["scorer"].contains("epochs"))) cfg.epochs = 50;
      model.cfg = cfg;
    } else {
      cfg = scorer_config(file_cfg, ft_flags);
      if (!ft_flags.epochs && !(file_cfg.contains("scorer") && file_cfg["scorer"].contains("epochs"))) cfg.epochs = 50;
      set_input_dims(cfg, train_words.front(), file_cfg);
      cfg.n_phones = phones.size();
      cfg.validate();
      Rng init(stage_seed(cfg.seed, 1));
      model = init_model<float>(cfg, init);
    }

    std::vector<WordSample> kept, dev;
    if (!dev_data.empty()) {
      kept = std::move(train_words);
      auto d = load_words(dev_data, log);
      require_provenance(d.samples, Provenance::human_labeled, "--dev-data");
      dev = std::move(d.samples);
    } else {
      std::tie(kept, dev) = hold_out(std::move(train_words), holdout_fraction, substream_seed(cfg.seed, 12));
    }
    TrainOptions fo = TrainOptions::from(cfg, TargetField::human);
    fo.shuffle_seed = stage_seed(cfg.seed, 5);
    const auto res = train(model, std::span<const WordSample>(kept), fo, dev);
    const auto outp = resolve_data_path(out_ckpt);
    Json manifest = {{"stage", "finetune"},
                     {"from_checkpoint", ck.has_value()},
                     {"train_words", kept.size()},
                     {"dev_words", dev.size()},
                     {"training", train_result_json(res)}};
    write_checkpoint(outp, model, phones, manifest);
    log.output(outp);
    log.seeds["scorer"] = cfg.seed;
    log.config["scorer"] = to_json(cfg);
    log.results = manifest;
    log.write(run_manifest_path(outp));
    std::cout << "fine-tuned on " << kept.size() << " words, best epoch " << res.best_epoch << "\n";
    return 0;
  }

  // ---- eval
  if (sub == eval) {
    const auto cp = resolve_data_path(ckpt_path);
    log.input(cp);
    const auto ck = read_checkpoint<float>(cp);
    std::vector<WordSample> test;
    if (!test_data.empty()) {
      auto d = load_words(test_data, log);
      check_phones(ck.phones, d.phones, "--test-data");
      test = std::move(d.samples);
    } else {
      if (test_manifest.empty() || test_labels.empty() || lexicon_path.empty())
        throw Error(Errc::usage, "eval needs --test-data, or --test-manifest with --test-labels and --lexicon");
      if (ck.phones.empty()) throw Error(Errc::missing_field, "checkpoint lacks the phone inventory");
      const PhoneInventory inv(ck.phones);
      const auto lex = load_lexicon(lexicon_path, inv, log);
      const auto corpus = load_corpus(test_manifest, inv, parse_align_format(align_format), log);
      test = labeled_word_samples(corpus, lex, load_labels(test_labels, log));
    }
    const auto res = evaluate(ck.model, std::span<const WordSample>(test));
    const auto outp = resolve_data_path(report_path);
    write_file(outp, predictions_csv(res.rows));
    log.output(outp);
    log.results = {{"pcc", res.pcc}, {"words", res.rows.size()}};
    log.write(run_manifest_path(outp));
    std::cout << "pcc " << format_double(res.pcc) << " over " << res.rows.size() << " words\n";
    return 0;
  }

  // ---- sweep / compare
  if (sub == sweep || sub == compare) {
    auto cfg = scorer_config(file_cfg, exp_flags);
    ExperimentOptions base;
    base.pretrain_epochs = pretrain_epochs;
    base.finetune_epochs = finetune_epochs;
    base.workers = workers;
    const std::uint64_t data_seed = sub == sweep ? exp_seed : seeds.front();
    const auto data = load_experiment(data_flags, data_seed, workers, log);
    set_input_dims(cfg, data.real.front(), file_cfg);
    log.results["real_words"] = data.real.size();
    log.results["train_words"] = data.train.size();
    log.results["test_words"] = data.test.size();
    const auto outp = resolve_data_path(out_csv);

    if (sub == sweep) {
      std::vector<std::uint64_t> sz;
      for (const auto& s : sizes) sz.push_back(parse_count(s));
      std::vector<FeatureSet> fsets;
      for (const auto& f : feature_sets) fsets.push_back(parse_feature_set(f));
      cfg.seed = exp_seed;
      base.scorer = cfg;
      base.seed = exp_seed;
      const auto points = run_sweep(data, base, sz, fsets);
      write_file(outp, sweep_report(points));
      log.seeds["experiment"] = exp_seed;
      Json pts = Json::array();
      for (const auto& p : points)
        pts.push_back({{"aug_size", p.aug_size}, {"feature_set", feature_set_name(p.feature_set)}, {"pcc", p.pcc}});
      log.results["points"] = pts;
      std::cout << sweep_report(points);
    } else {
      const auto n_mixup = parse_count(n_mixup_str);
      std::vector<System> sys;
      for (const auto& s : systems) {
        if (s == "no-pretrain") sys.push_back(System::no_pretrain);
        else if (s == "real-pretrain") sys.push_back(System::real_pretrain);
        else if (s == "mixup-pretrain") sys.push_back(System::mixup_pretrain);
        else throw Error(Errc::usage, "unknown system '" + s + "'");
      }
      std::string csv = "system,seed,pcc\n";
      Json means = Json::object();
      for (auto s : sys) {
        double acc = 0.0;
        for (auto seed : seeds) {
          ExperimentOptions o = base;
          o.scorer = cfg;
          o.scorer.seed = seed;
          o.seed = seed;
          o.n_mixup = n_mixup;
          const auto r = run_system(s, data, o);
          csv += std::string(system_name(s)) + "," + std::to_string(seed) + "," + format_double(r.pcc) + "\n";
          acc += r.pcc;
        }
        means[system_name(s)] = acc / static_cast<double>(seeds.size());
        std::cout << system_name(s) << " mean pcc " << format_double(means[system_name(s)].get<double>()) << "\n";
      }
      write_file(outp, csv);
      log.seeds["experiment"] = seeds;
      log.config["n_mixup"] = n_mixup;
      log.results["mean_pcc"] = means;
    }
    log.output(outp);
    log.config["scorer"] = to_json(cfg);
    log.config["pretrain_epochs"] = pretrain_epochs;
    log.config["finetune_epochs"] = finetune_epochs;
    log.write(run_manifest_path(outp));
    return 0;
  }
  return exit_code(Errc::usage);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const gmx::Error& e) {
    std::cerr << "gmx: error: " << e.what() << "\n";
    return gmx::exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "gmx: error: " << e.what() << "\n";
    return 3;
  }
}
