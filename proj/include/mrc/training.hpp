#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mrc/batching.hpp"
#include "mrc/checkpoint.hpp"
#include "mrc/models.hpp"
#include "mrc/squad_eval.hpp"

namespace mrc {

struct TrainState {
  int epoch = 0;  // completed epochs
  long global_step = 0;
  double best_f1 = -1.0;
  double best_em = -1.0;
  int best_epoch = -1;
  int patience_counter = 0;
  uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},         {"global_step", global_step},
            {"best_f1", best_f1},     {"best_em", best_em},
            {"best_epoch", best_epoch}, {"patience_counter", patience_counter},
            {"seed", seed}};
  }

  static TrainState from_json(const nlohmann::json& j) {
    TrainState s;
    s.epoch = j.at("epoch").get<int>();
    s.global_step = j.at("global_step").get<long>();
    s.best_f1 = j.at("best_f1").get<double>();
    s.best_em = j.at("best_em").get<double>();
    s.best_epoch = j.at("best_epoch").get<int>();
    s.patience_counter = j.at("patience_counter").get<int>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
  }
};

/// Exponential moving average of the trainable parameters, kept in double:
/// shadow <- decay * shadow + (1 - decay) * param after every step.
/// Evaluation swaps the shadow in and restores the raw weights bit-exactly.
template <typename T>
class EmaShadow {
 public:
  EmaShadow(double decay, const ParameterStore<T>& params) : decay_(decay) {
    if (decay < 0.0 || decay >= 1.0)
      throw ConfigError("ema decay must be in [0, 1), got " + std::to_string(decay));
    for (const auto& [name, p] : params.items())
      if (p.requires_grad())
        shadow_[name] = std::vector<double>(p.value().begin(), p.value().end());
  }

  void update(const ParameterStore<T>& params) {
    for (const auto& [name, p] : params.items()) {
      auto it = shadow_.find(name);
      if (it == shadow_.end()) continue;
      auto& s = it->second;
      const auto& v = p.value();
      for (size_t i = 0; i < s.size(); ++i)
        s[i] = decay_ * s[i] + (1.0 - decay_) * static_cast<double>(v[i]);
    }
  }

  void swap_in(ParameterStore<T>& params) {
    if (swapped_) throw GraphError("ema shadow already swapped in");
    backup_.clear();
    for (auto& [name, p] : params.items()) {
      auto it = shadow_.find(name);
      if (it == shadow_.end()) continue;
      backup_[name] = p.value();
      auto& v = p.value();
      for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(it->second[i]);
    }
    swapped_ = true;
  }

  void restore(ParameterStore<T>& params) {
    if (!swapped_) throw GraphError("ema shadow is not swapped in");
    for (auto& [name, p] : params.items()) {
      auto it = backup_.find(name);
      if (it != backup_.end()) p.value() = it->second;
    }
    backup_.clear();
    swapped_ = false;
  }

  const std::vector<double>& shadow(const std::string& name) const { return shadow_.at(name); }
  const std::map<std::string, std::vector<double>>& shadows() const { return shadow_; }
  void set_shadow(const std::string& name, std::vector<double> values) {
    shadow_[name] = std::move(values);
  }
  double decay() const { return decay_; }

 private:
  double decay_;
  std::map<std::string, std::vector<double>> shadow_;
  std::map<std::string, std::vector<T>> backup_;
  bool swapped_ = false;
};

struct TrainerOptions {
  int epochs = 20;
  int eval_every = 1;  // evaluate each k-th epoch
  int patience = 5;    // evaluations without improvement before stopping
  double ema_decay = 0.999;
  std::string save_dir;  // best checkpoint + summary live here when non-empty
};

/// Architecture fingerprint: model name plus every parameter name and shape.
/// Checkpoints refuse to load into a model with a different fingerprint.
template <typename T>
uint64_t config_hash(const std::string& model_name, const ParameterStore<T>& params) {
  std::string desc = model_name;
  for (const auto& [name, p] : params.items()) desc += "|" + name + shape_str(p.shape());
  return fnv1a64(desc);
}

/// Baby-sits training: per-epoch loop with gradient clipping and EMA, dev
/// evaluation with EMA weights, best-checkpoint tracking (F1 primary, EM
/// tiebreak), early stopping, JSON-lines summaries, and resume.
template <typename T>
class Trainer {
 public:
  Trainer(ModelBase<T>& model, TrainerOptions options)
      : model_(model), options_(options), ema_(options.ema_decay, model.parameters()) {
    if (!model_.compiled()) model_.compile();
    state_.seed = model_.config().seed;
    if (!options_.save_dir.empty()) std::filesystem::create_directories(options_.save_dir);
  }

  TrainState& state() { return state_; }
  EmaShadow<T>& ema() { return ema_; }

  TrainState train_and_evaluate(const BatchGenerator& train_gen,
                                const std::vector<DataInstance>& dev_instances,
                                const BatchGenerator& dev_gen) {
    const auto& opt_cfg = model_.config().optimizer;
    for (int epoch = state_.epoch; epoch < options_.epochs; ++epoch) {
      model_.seed_epoch(epoch);
      model_.optimizer().set_lr(opt_cfg.lr * std::pow(opt_cfg.lr_decay, epoch));
      double loss_sum = 0.0, grad_norm_sum = 0.0;
      size_t batches = 0;

      auto stream = train_gen.stream(epoch);
      while (auto batch = stream.next()) {
        auto out = model_.build_graph(*batch, Mode::Train);
        if (!out.loss.defined())
          throw ConfigError("training batch carries no span labels");
        double loss = out.loss.item();
        if (!std::isfinite(loss))
          throw NumericError("non-finite loss at step " + std::to_string(state_.global_step) +
                             " (lr " + std::to_string(model_.optimizer().lr()) +
                             ", last grad norm " + std::to_string(last_grad_norm_) + ")");
        backward(out.loss);
        last_grad_norm_ = clip_global_norm(model_.parameters(), opt_cfg.clip_norm);
        model_.optimizer().step(model_.parameters());
        model_.parameters().zero_grads();
        ema_.update(model_.parameters());
        ++state_.global_step;
        loss_sum += loss;
        grad_norm_sum += last_grad_norm_;
        ++batches;
      }
      state_.epoch = epoch + 1;

      nlohmann::json event{{"step", state_.global_step},
                           {"epoch", state_.epoch},
                           {"loss", batches ? loss_sum / batches : 0.0},
                           {"lr", model_.optimizer().lr()},
                           {"grad_norm", batches ? grad_norm_sum / batches : 0.0}};

      bool stop = false;
      if (!dev_instances.empty() && state_.epoch % options_.eval_every == 0) {
        EvalResult res = evaluate(dev_instances, dev_gen);
        event["em"] = res.exact_match;
        event["f1"] = res.f1;
        bool improved = res.f1 > state_.best_f1 ||
                        (res.f1 == state_.best_f1 && res.exact_match > state_.best_em);
        if (improved) {
          state_.best_f1 = res.f1;
          state_.best_em = res.exact_match;
          state_.best_epoch = state_.epoch;
          state_.patience_counter = 0;
          if (!options_.save_dir.empty())
            save_state((std::filesystem::path(options_.save_dir) / "best.ckpt").string());
        } else {
          ++state_.patience_counter;
          if (state_.patience_counter >= options_.patience) stop = true;
        }
      }
      write_summary(event);
      if (stop) break;
    }
    return state_;
  }

  /// Dev-set scores using the EMA weights; training weights are untouched.
  EvalResult evaluate(const std::vector<DataInstance>& dev_instances,
                      const BatchGenerator& dev_gen) {
    ema_.swap_in(model_.parameters());
    PredictionSet preds = inference(dev_gen);
    ema_.restore(model_.parameters());
    return mrc::evaluate(dev_instances, preds);
  }

  /// Predictions with the current weights in eval mode.
  PredictionSet inference(const BatchGenerator& gen) {
    PredictionSet preds;
    auto stream = gen.stream(0);
    while (auto batch = stream.next()) {
      auto out = model_.build_graph(*batch, Mode::Eval);
      auto answers = model_.get_best_answer(out, *batch);
      preds.insert(answers.begin(), answers.end());
    }
    return preds;
  }

  /// Full training snapshot: parameters, optimizer state, EMA shadow, and
  /// TrainState, guarded by the architecture fingerprint.
  void save_state(const std::string& path) const {
    CheckpointData data;
    data.metadata["train_state"] = state_.to_json();
    data.metadata["model"] = model_.name();
    data.metadata["config_hash"] = config_hash(model_.name(), model_.parameters());
    data.metadata["ema_decay"] = ema_.decay();
    for (const auto& [name, p] : model_.parameters().items())
      data.tensors.push_back(make_payload("param/" + name, p.shape(), p.value()));
    for (const auto& [name, values] : model_.optimizer().state())
      data.tensors.push_back(
          make_payload("opt/" + name, {static_cast<int>(values.size())}, values));
    for (const auto& [name, values] : ema_.shadows())
      data.tensors.push_back(
          make_payload("ema/" + name, {static_cast<int>(values.size())}, values));
    save_checkpoint(path, data);
  }

  /// Resume from a snapshot produced by save_state.
  void restore(const std::string& path) {
    CheckpointData data = load_checkpoint(path);
    uint64_t want = config_hash(model_.name(), model_.parameters());
    uint64_t got = data.metadata.value("config_hash", uint64_t(0));
    if (got != want)
      throw IoError("checkpoint config hash " + std::to_string(got) +
                    " does not match model config hash " + std::to_string(want));
    std::map<std::string, std::vector<double>> opt_state;
    for (const auto& t : data.tensors) {
      if (t.name.starts_with("param/")) {
        auto* p = model_.parameters().find(t.name.substr(6));
        if (!p) throw IoError("checkpoint has unknown parameter " + t.name);
        p->value() = detail::from_bytes<T>(t.bytes);
      } else if (t.name.starts_with("opt/")) {
        opt_state[t.name.substr(4)] = detail::from_bytes<double>(t.bytes);
      } else if (t.name.starts_with("ema/")) {
        ema_.set_shadow(t.name.substr(4), detail::from_bytes<double>(t.bytes));
      }
    }
    model_.optimizer().load_state(opt_state);
    state_ = TrainState::from_json(data.metadata.at("train_state"));
  }

 private:
  void write_summary(const nlohmann::json& event) {
    if (options_.save_dir.empty()) return;
    std::ofstream out(std::filesystem::path(options_.save_dir) / "summary.jsonl",
                      std::ios::app);
    out << event.dump() << "\n";
  }

  ModelBase<T>& model_;
  TrainerOptions options_;
  EmaShadow<T> ema_;
  TrainState state_;
  double last_grad_norm_ = 0.0;
};

/// Load a snapshot's weights into a model for inference. When the snapshot
/// carries an EMA shadow (it always does after training), those evaluation
/// weights replace the raw parameters.
template <typename T>
void load_weights_for_inference(ModelBase<T>& model, const std::string& path,
                                bool prefer_ema = true) {
  CheckpointData data = load_checkpoint(path);
  uint64_t want = config_hash(model.name(), model.parameters());
  uint64_t got = data.metadata.value("config_hash", uint64_t(0));
  if (got != want)
    throw IoError("checkpoint config hash " + std::to_string(got) +
                  " does not match model config hash " + std::to_string(want));
  for (const auto& t : data.tensors) {
    if (!t.name.starts_with("param/")) continue;
    auto* p = model.parameters().find(t.name.substr(6));
    if (!p) throw IoError("checkpoint has unknown parameter " + t.name);
    p->value() = detail::from_bytes<T>(t.bytes);
  }
  if (prefer_ema) {
    for (const auto& t : data.tensors) {
      if (!t.name.starts_with("ema/")) continue;
      auto* p = model.parameters().find(t.name.substr(4));
      if (!p) continue;
      auto shadow = detail::from_bytes<double>(t.bytes);
      auto& v = p->value();
      for (size_t i = 0; i < v.size() && i < shadow.size(); ++i)
        v[i] = static_cast<T>(shadow[i]);
    }
  }
}

}  // namespace mrc
