#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mrc/batching.hpp"
#include "mrc/dataset.hpp"
#include "mrc/models.hpp"
#include "mrc/preprocess.hpp"
#include "mrc/squad_eval.hpp"
#include "mrc/training.hpp"

namespace mrc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Effective run configuration: defaults, overlaid by a key=value config
/// file, overlaid by explicit flags. Unknown keys are rejected.
struct RunConfig {
  std::string subcommand;  // train | evaluate | infer
  std::string train_file, dev_file, embedding_file, save_dir, predictions_out;
  std::string model = "bidaf";
  std::string dataset_version = "v1";
  std::string optimizer = "adam";
  int epochs = 20;
  int batch_size = 32;
  int hidden_size = 64;
  int embedding_dim = 100;
  int patience = 5;
  int eval_every = 1;
  int max_answer_len = 17;
  double dropout = 0.2;
  double ema_decay = 0.999;
  double lr = 0.001;
  double lr_decay = 1.0;
  double clip_norm = 5.0;
  bool use_tags = true;
  bool use_tf = true;
  bool use_exact_match = true;
  uint64_t seed = 0;
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key " + key + " wants a boolean, got \"" + v + "\"");
}

}  // namespace detail

inline void apply_kv(RunConfig& rc, const std::string& key, const std::string& value) {
  try {
    if (key == "train_file") rc.train_file = value;
    else if (key == "dev_file") rc.dev_file = value;
    else if (key == "embedding_file") rc.embedding_file = value;
    else if (key == "save_dir") rc.save_dir = value;
    else if (key == "predictions_out") rc.predictions_out = value;
    else if (key == "model") rc.model = value;
    else if (key == "dataset_version") rc.dataset_version = value;
    else if (key == "optimizer") rc.optimizer = value;
    else if (key == "epochs") rc.epochs = std::stoi(value);
    else if (key == "batch_size") rc.batch_size = std::stoi(value);
    else if (key == "hidden_size") rc.hidden_size = std::stoi(value);
    else if (key == "embedding_dim") rc.embedding_dim = std::stoi(value);
    else if (key == "patience") rc.patience = std::stoi(value);
    else if (key == "eval_every") rc.eval_every = std::stoi(value);
    else if (key == "max_answer_len") rc.max_answer_len = std::stoi(value);
    else if (key == "dropout") rc.dropout = std::stod(value);
    else if (key == "ema_decay") rc.ema_decay = std::stod(value);
    else if (key == "lr") rc.lr = std::stod(value);
    else if (key == "lr_decay") rc.lr_decay = std::stod(value);
    else if (key == "clip_norm") rc.clip_norm = std::stod(value);
    else if (key == "use_tags") rc.use_tags = detail::parse_bool(value, key);
    else if (key == "use_tf") rc.use_tf = detail::parse_bool(value, key);
    else if (key == "use_exact_match") rc.use_exact_match = detail::parse_bool(value, key);
    else if (key == "seed") rc.seed = std::stoull(value);
    else throw ConfigError("unknown config key: " + key);
  } catch (const std::invalid_argument&) {
    throw ConfigError("config key " + key + " has a malformed value \"" + value + "\"");
  } catch (const std::out_of_range&) {
    throw ConfigError("config key " + key + " has an out-of-range value \"" + value + "\"");
  }
}

/// Flat key=value config document; '#' starts a comment line.
inline void load_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + line);
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
    };
    apply_kv(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

/// Canonical echo of the effective configuration, stable across runs.
inline std::string echo_config(const RunConfig& rc) {
  std::ostringstream os;
  os << "batch_size=" << rc.batch_size << "\n";
  os << "clip_norm=" << rc.clip_norm << "\n";
  os << "dataset_version=" << rc.dataset_version << "\n";
  os << "dev_file=" << rc.dev_file << "\n";
  os << "dropout=" << rc.dropout << "\n";
  os << "ema_decay=" << rc.ema_decay << "\n";
  os << "embedding_dim=" << rc.embedding_dim << "\n";
  os << "embedding_file=" << rc.embedding_file << "\n";
  os << "epochs=" << rc.epochs << "\n";
  os << "eval_every=" << rc.eval_every << "\n";
  os << "hidden_size=" << rc.hidden_size << "\n";
  os << "lr=" << rc.lr << "\n";
  os << "lr_decay=" << rc.lr_decay << "\n";
  os << "max_answer_len=" << rc.max_answer_len << "\n";
  os << "model=" << rc.model << "\n";
  os << "optimizer=" << rc.optimizer << "\n";
  os << "patience=" << rc.patience << "\n";
  os << "predictions_out=" << rc.predictions_out << "\n";
  os << "save_dir=" << rc.save_dir << "\n";
  os << "seed=" << rc.seed << "\n";
  os << "train_file=" << rc.train_file << "\n";
  os << "use_exact_match=" << (rc.use_exact_match ? "true" : "false") << "\n";
  os << "use_tags=" << (rc.use_tags ? "true" : "false") << "\n";
  os << "use_tf=" << (rc.use_tf ? "true" : "false") << "\n";
}

inline ModelConfig model_config_from(const RunConfig& rc) {
  ModelConfig cfg;
  cfg.model = rc.model;
  cfg.hidden_size = rc.hidden_size;
  cfg.embedding_dim = rc.embedding_dim;
  cfg.dropout = rc.dropout;
  cfg.max_answer_len = rc.max_answer_len;
  cfg.use_tf = rc.use_tf;
  cfg.use_exact_match = rc.use_exact_match;
  cfg.use_tags = rc.use_tags;
  cfg.seed = rc.seed;
  cfg.optimizer.name = rc.optimizer;
  cfg.optimizer.lr = rc.lr;
  cfg.optimizer.lr_decay = rc.lr_decay;
  cfg.optimizer.clip_norm = rc.clip_norm;
  return cfg;
}

namespace detail {

inline SquadVersion version_from(const RunConfig& rc) {
  if (rc.dataset_version == "v1") return SquadVersion::V1;
  if (rc.dataset_version == "v2") return SquadVersion::V2;
  throw ConfigError("dataset_version must be v1 or v2, got " + rc.dataset_version);
}

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required for this subcommand");
  if (!std::filesystem::exists(path)) throw ConfigError(what + " does not exist: " + path);
}

inline std::vector<DataInstance> read_with_features(const std::string& path,
                                                    SquadVersion version, std::ostream& log) {
  auto result = read_squad(path, version);
  if (result.skipped > 0)
    log << "warning: skipped " << result.skipped << " unalignable answers in " << path << "\n";
  RuleTagger tagger;
  for (auto& inst : result.instances) {
    extract_features(inst, FeatureSide::Context, &tagger);
    extract_features(inst, FeatureSide::Question, &tagger);
  }
  return result.instances;
}

inline std::vector<DataInstance> answerable(const std::vector<DataInstance>& instances) {
  std::vector<DataInstance> out;
  for (const auto& inst : instances)
    if (inst.has_span()) out.push_back(inst);
  return out;
}

inline std::string format_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

/// Full pipeline: read, featurize, build vocabulary and batches, train with
/// evaluation and early stopping, leave vocab + best weights + summary +
/// effective config in save_dir.
inline int run_train(const RunConfig& rc, std::ostream& out = std::cout) {
  detail::require_file(rc.train_file, "train_file");
  if (!rc.dev_file.empty()) detail::require_file(rc.dev_file, "dev_file");
  if (!rc.embedding_file.empty()) detail::require_file(rc.embedding_file, "embedding_file");
  if (rc.save_dir.empty()) throw ConfigError("save_dir is required for train");
  auto version = detail::version_from(rc);

  auto train_all = detail::read_with_features(rc.train_file, version, out);
  auto train_instances = detail::answerable(train_all);
  if (train_instances.empty()) throw ParseError("no trainable instances in " + rc.train_file);
  std::vector<DataInstance> dev_instances;
  if (!rc.dev_file.empty()) dev_instances = detail::read_with_features(rc.dev_file, version, out);

  auto vocab = build_vocabulary(train_instances);
  auto tag_vocab = FeatureVocab::build(train_instances, "tags");

  std::unique_ptr<EmbeddingMatrix> pretrained;
  if (!rc.embedding_file.empty())
    pretrained = std::make_unique<EmbeddingMatrix>(
        load_pretrained(vocab, rc.embedding_file, rc.seed));

  auto model = make_model<float>(model_config_from(rc), vocab.size(), pretrained.get(),
                                 tag_vocab.size());
  model->compile();

  std::filesystem::create_directories(rc.save_dir);
  vocab.save((std::filesystem::path(rc.save_dir) / "vocab.txt").string());
  tag_vocab.save((std::filesystem::path(rc.save_dir) / "tags.txt").string());
  {
    std::ofstream echo(std::filesystem::path(rc.save_dir) / "config.echo", std::ios::trunc);
    echo << echo_config(rc);
  }

  BatchingOptions train_opts;
  train_opts.batch_size = rc.batch_size;
  train_opts.shuffle = true;
  train_opts.seed = rc.seed;
  train_opts.prefetch = true;
  BatchGenerator train_gen(train_instances, vocab, &tag_vocab, train_opts);
  BatchingOptions dev_opts;
  dev_opts.batch_size = rc.batch_size;
  BatchGenerator dev_gen(dev_instances, vocab, &tag_vocab, dev_opts);

  TrainerOptions topts;
  topts.epochs = rc.epochs;
  topts.eval_every = rc.eval_every;
  topts.patience = rc.patience;
  topts.ema_decay = rc.ema_decay;
  topts.save_dir = rc.save_dir;
  Trainer<float> trainer(*model, topts);
  auto state = trainer.train_and_evaluate(train_gen, dev_instances, dev_gen);

  if (dev_instances.empty()) {
    trainer.save_state((std::filesystem::path(rc.save_dir) / "best.ckpt").string());
    out << "training complete after " << state.epoch << " epochs (no dev set)\n";
  } else {
    out << "best dev F1/EM: " << detail::format_pct(state.best_f1) << "/"
        << detail::format_pct(state.best_em) << " (epoch " << state.best_epoch << ")\n";
  }
  return kExitOk;
}

/// Score a predictions file against a dataset; prints the official-format
/// JSON report.
inline int run_evaluate(const RunConfig& rc, std::ostream& out = std::cout) {
  detail::require_file(rc.dev_file, "dev_file");
  detail::require_file(rc.predictions_out, "predictions_out");
  auto version = detail::version_from(rc);

  auto gold = read_squad(rc.dev_file, version);
  std::ifstream in(rc.predictions_out);
  nlohmann::json preds_json;
  try {
    in >> preds_json;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed predictions JSON in " + rc.predictions_out + ": " + e.what());
  }
  PredictionSet preds;
  for (auto it = preds_json.begin(); it != preds_json.end(); ++it)
    preds[it.key()] = it.value().get<std::string>();

  auto result = evaluate(gold.instances, preds);
  nlohmann::json report{{"exact_match", result.exact_match}, {"f1", result.f1}};
  out << report.dump() << "\n";
  return kExitOk;
}

/// Load the best checkpoint from save_dir and write {qid: answer} JSON.
inline int run_infer(const RunConfig& rc, std::ostream& out = std::cout) {
  if (rc.save_dir.empty()) throw ConfigError("save_dir is required for infer");
  detail::require_file(rc.dev_file, "dev_file");
  if (rc.predictions_out.empty()) throw ConfigError("predictions_out is required for infer");
  std::filesystem::path dir(rc.save_dir);
  detail::require_file((dir / "config.echo").string(), "save_dir config.echo");
  detail::require_file((dir / "vocab.txt").string(), "save_dir vocab.txt");
  detail::require_file((dir / "best.ckpt").string(), "save_dir best.ckpt");

  // the trained architecture comes from the echoed config, not from flags
  RunConfig trained;
  load_config_file(trained, (dir / "config.echo").string());

  auto vocab = Vocabulary::load((dir / "vocab.txt").string());
  FeatureVocab tag_vocab;
  if (std::filesystem::exists(dir / "tags.txt"))
    tag_vocab = FeatureVocab::load((dir / "tags.txt").string());

  auto instances =
      detail::read_with_features(rc.dev_file, detail::version_from(trained), out);

  auto model = make_model<float>(model_config_from(trained), vocab.size(), nullptr,
                                 tag_vocab.size());
  load_weights_for_inference(*model, (dir / "best.ckpt").string());

  BatchingOptions opts;
  opts.batch_size = trained.batch_size;
  BatchGenerator gen(instances, vocab, &tag_vocab, opts);

  PredictionSet preds;
  auto stream = gen.stream(0);
  while (auto batch = stream.next()) {
    auto output = model->build_graph(*batch, Mode::Eval);
    auto answers = model->get_best_answer(output, *batch);
    preds.insert(answers.begin(), answers.end());
  }

  nlohmann::json pj(preds);
  std::ofstream pf(rc.predictions_out, std::ios::trunc);
  if (!pf) throw IoError("cannot write predictions: " + rc.predictions_out);
  pf << pj.dump() << "\n";
  out << "wrote " << preds.size() << " predictions to " << rc.predictions_out << "\n";
  return kExitOk;
}

/// Exit-code mapping: 0 ok, 2 config, 3 data, 4 numeric.
inline int dispatch(const RunConfig& rc, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  try {
    if (rc.subcommand == "train") return run_train(rc, out);
    if (rc.subcommand == "evaluate") return run_evaluate(rc, out);
    if (rc.subcommand == "infer") return run_infer(rc, out);
    throw ConfigError("unknown subcommand: " + rc.subcommand);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DomainError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {  // parse, io, alignment: data problems
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace mrc::cli
