#pragma once

#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mrc/batching.hpp"
#include "mrc/layers.hpp"
#include "mrc/optim.hpp"

namespace mrc {

enum class Mode { Train, Eval };

struct OptimizerConfig {
  std::string name = "adam";
  double lr = 0.001;
  double clip_norm = 5.0;  // global-norm gradient clipping
  double lr_decay = 1.0;   // lr(epoch) = lr * decay^epoch
};

struct ModelConfig {
  std::string model = "bidaf";  // bidaf | drqa
  int hidden_size = 64;
  int embedding_dim = 100;
  double dropout = 0.2;
  int max_answer_len = 17;  // A, tokens
  // -1 keeps the per-model default: 0 (frozen) for BiDAF, 1000 for DrQA
  int partial_trainable_top_k = -1;
  bool use_tf = true;
  bool use_exact_match = true;
  bool use_tags = true;
  int tag_dim = 8;
  uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const {
    if (max_answer_len < 1) throw ConfigError("max_answer_len must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (hidden_size < 1) throw ConfigError("hidden_size must be >= 1");
    if (model != "bidaf" && model != "drqa") throw ConfigError("unknown model: " + model);
  }
};

template <typename T>
struct ModelOutput {
  TensorT<T> start_log_probs;  // B×T, exp of each row is a masked distribution
  TensorT<T> end_log_probs;    // B×T
  TensorT<T> loss;             // scalar; defined when the batch carries labels
};

namespace detail {

template <typename T>
TensorT<T> tensor_from_floats(const std::vector<float>& v, Shape shape) {
  std::vector<T> data(v.begin(), v.end());
  return TensorT<T>::from_data(std::move(shape), std::move(data));
}

// Mean NLL of the gold start plus the gold end position.
template <typename T>
TensorT<T> span_nll_loss(const TensorT<T>& start_log_probs, const TensorT<T>& end_log_probs,
                         const std::vector<int>& starts, const std::vector<int>& ends) {
  auto s = select_index(start_log_probs, starts);
  auto e = select_index(end_log_probs, ends);
  double inv_b = 1.0 / static_cast<double>(starts.size());
  return scale(add(sum(s), sum(e)), -inv_b);
}

}  // namespace detail

/// Best legal span under the product-of-probabilities rule: maximize
/// start[s] + end[e] in log space over s <= e <= s + max_len - 1 within
/// [0, length). Linear time via a sliding-window max over start scores;
/// ties resolve to the earliest end, then the earliest start.
template <typename T>
std::pair<int, int> decode_span(const T* start_lp, const T* end_lp, int length,
                                int max_answer_len) {
  std::deque<int> window;  // start indices, scores non-increasing
  int best_s = 0, best_e = 0;
  double best = -std::numeric_limits<double>::infinity();
  for (int e = 0; e < length; ++e) {
    while (!window.empty() && start_lp[window.back()] < start_lp[e]) window.pop_back();
    window.push_back(e);
    while (window.front() < e - max_answer_len + 1) window.pop_front();
    double cand = static_cast<double>(start_lp[window.front()]) + static_cast<double>(end_lp[e]);
    if (cand > best) {
      best = cand;
      best_s = window.front();
      best_e = e;
    }
  }
  return {best_s, best_e};
}

/// Base model: the three-method contract (build_graph / compile /
/// get_best_answer) plus parameter and RNG plumbing shared by the built-ins.
template <typename T>
class ModelBase {
 public:
  explicit ModelBase(ModelConfig config) : config_(std::move(config)), rng_(config_.seed) {
    config_.validate();
  }
  virtual ~ModelBase() = default;

  virtual std::string name() const = 0;

  /// Forward pass over one batch; training mode enables dropout sampling.
  virtual ModelOutput<T> build_graph(const Batch& batch, Mode mode) = 0;

  /// Set up the optimizer from the config (learning-rate decay and gradient
  /// clipping are applied by the training loop from the same config).
  void compile() { optimizer_ = make_optimizer<T>(config_.optimizer.name, config_.optimizer.lr); }

  bool compiled() const { return optimizer_ != nullptr; }
  Optimizer<T>& optimizer() {
    if (!optimizer_) throw ConfigError("model must be compiled before optimization");
    return *optimizer_;
  }

  /// Decode each row's best span and recover the answer text from the
  /// original character offsets (never by re-joining tokens). Custom models
  /// (e.g. with no-answer handling) may override.
  virtual std::map<std::string, std::string> get_best_answer(const ModelOutput<T>& output,
                                                             const Batch& batch) const {
    std::map<std::string, std::string> answers;
    const auto& start = output.start_log_probs.value();
    const auto& end = output.end_log_probs.value();
    int stride = batch.context_len;
    for (int i = 0; i < batch.size; ++i) {
      int len = batch.context_lengths[i];
      auto [s, e] = decode_span(start.data() + static_cast<size_t>(i) * stride,
                                end.data() + static_cast<size_t>(i) * stride, len,
                                config_.max_answer_len);
      const DataInstance* inst = batch.instances[i];
      const Token& first = inst->context_tokens[s];
      const Token& last = inst->context_tokens[e];
      answers[batch.qids[i]] =
          inst->context_text.substr(first.char_start, last.char_end - first.char_start);
    }
    return answers;
  }

  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }
  const ModelConfig& config() const { return config_; }
  Rng& rng() { return rng_; }

  /// Deterministic per-epoch randomness stream (dropout): resuming a run at
  /// an epoch boundary reproduces the same samples.
  void seed_epoch(int epoch) { rng_ = Rng(config_.seed).fork(0xd70full + epoch); }

 protected:
  ModelConfig config_;
  ParameterStore<T> params_;
  Rng rng_;
  std::unique_ptr<Optimizer<T>> optimizer_;
};

// ---------------------------------------------------------------------------
// BiDAF: embed -> highway -> shared BiLSTM encoding -> TriLinear similarity
// -> bidirectional attention -> two modeling BiLSTMs -> linear start/end.
// Word embeddings only (no char CNN); frozen embedding by default.
// ---------------------------------------------------------------------------

template <typename T>
class BidafModel : public ModelBase<T> {
 public:
  BidafModel(ModelConfig config, size_t vocab_size, const EmbeddingMatrix* pretrained)
      : ModelBase<T>(std::move(config)), dropout_(this->config_.dropout) {
    auto& cfg = this->config_;
    int top_k = cfg.partial_trainable_top_k >= 0 ? cfg.partial_trainable_top_k : 0;
    Rng init_rng = Rng(cfg.seed).fork("init");
    if (pretrained) {
      cfg.embedding_dim = pretrained->dim;
      embedding_ = Embedding<T>(*pretrained, top_k, this->params_, "embedding");
    } else {
      embedding_ = Embedding<T>(static_cast<int>(vocab_size), cfg.embedding_dim, top_k,
                                this->params_, "embedding", init_rng);
    }
    int e = cfg.embedding_dim, h = cfg.hidden_size;
    highway_ = Highway<T>(e, 2, this->params_, "highway", init_rng);
    encoder_ = BiLstm<T>(e, h, this->params_, "encoder", init_rng);
    similarity_ = Similarity<T>(SimilarityKind::TriLinear, 2 * h, this->params_, "similarity",
                                init_rng);
    modeling1_ = BiLstm<T>(8 * h, h, this->params_, "modeling1", init_rng);
    modeling2_ = BiLstm<T>(2 * h, h, this->params_, "modeling2", init_rng);
    start_linear_ = Linear<T>(10 * h, 1, this->params_, "start", init_rng);
    end_linear_ = Linear<T>(10 * h, 1, this->params_, "end", init_rng);
  }

  std::string name() const override { return "bidaf"; }

  ModelOutput<T> build_graph(const Batch& batch, Mode mode) override {
    int B = batch.size, rows = batch.context_len, cols = batch.question_len;
    bool training = mode == Mode::Train;
    auto cmask = detail::tensor_from_floats<T>(batch.context_mask, {B, rows});
    auto qmask = detail::tensor_from_floats<T>(batch.question_mask, {B, cols});

    auto c = highway_(embedding_(batch.context_ids, {B, rows}));
    auto q = highway_(embedding_(batch.question_ids, {B, cols}));
    c = dropout_(c, training, this->rng_);
    q = dropout_(q, training, this->rng_);

    auto h = encoder_(c, cmask).outputs;  // B×T×2h
    auto u = encoder_(q, qmask).outputs;  // B×J×2h
    auto s = similarity_(h, u);
    auto g = bi_attention(s, h, u, cmask, qmask);  // B×T×8h

    auto m1 = modeling1_(dropout_(g, training, this->rng_), cmask).outputs;
    auto start_logits = reshape(start_linear_(concat<T>({g, m1}, 2)), {B, rows});
    auto m2 = modeling2_(dropout_(m1, training, this->rng_), cmask).outputs;
    auto end_logits = reshape(end_linear_(concat<T>({g, m2}, 2)), {B, rows});

    ModelOutput<T> out;
    out.start_log_probs = log_softmax_masked(start_logits, cmask);
    out.end_log_probs = log_softmax_masked(end_logits, cmask);
    if (batch.has_labels)
      out.loss = detail::span_nll_loss(out.start_log_probs, out.end_log_probs, batch.span_start,
                                       batch.span_end);
    return out;
  }

 private:
  Embedding<T> embedding_;
  Highway<T> highway_;
  BiLstm<T> encoder_, modeling1_, modeling2_;
  Similarity<T> similarity_;
  Linear<T> start_linear_, end_linear_;
  VariationalDropout<T> dropout_;
};

// ---------------------------------------------------------------------------
// DrQA: partially trainable embedding plus linguistic features (tf, 3-way
// exact match, optional tag embedding) and aligned-question attention feed
// stacked BiLSTMs; the question collapses to a learned weighted sum; start
// and end come from bilinear pointers.
// ---------------------------------------------------------------------------

template <typename T>
class DrqaModel : public ModelBase<T> {
 public:
  DrqaModel(ModelConfig config, size_t vocab_size, const EmbeddingMatrix* pretrained,
            size_t tag_vocab_size = 0)
      : ModelBase<T>(std::move(config)), dropout_(this->config_.dropout) {
    auto& cfg = this->config_;
    int top_k = cfg.partial_trainable_top_k >= 0 ? cfg.partial_trainable_top_k : 1000;
    Rng init_rng = Rng(cfg.seed).fork("init");
    if (pretrained) {
      cfg.embedding_dim = pretrained->dim;
      embedding_ = Embedding<T>(*pretrained, top_k, this->params_, "embedding");
    } else {
      embedding_ = Embedding<T>(static_cast<int>(vocab_size), cfg.embedding_dim, top_k,
                                this->params_, "embedding", init_rng);
    }
    int e = cfg.embedding_dim, h = cfg.hidden_size;
    align_proj_ = Linear<T>(e, e, this->params_, "align_proj", init_rng);
    use_tags_ = cfg.use_tags && tag_vocab_size > 0;
    if (use_tags_)
      tag_embedding_ = Embedding<T>(static_cast<int>(tag_vocab_size), cfg.tag_dim,
                                    static_cast<int>(tag_vocab_size), this->params_,
                                    "tag_embedding", init_rng);
    int doc_in = 2 * e + (cfg.use_tf ? 1 : 0) + (cfg.use_exact_match ? 3 : 0) +
                 (use_tags_ ? cfg.tag_dim : 0);
    doc_rnn1_ = BiLstm<T>(doc_in, h, this->params_, "doc_rnn1", init_rng);
    doc_rnn2_ = BiLstm<T>(2 * h, h, this->params_, "doc_rnn2", init_rng);
    q_rnn1_ = BiLstm<T>(e, h, this->params_, "q_rnn1", init_rng);
    q_rnn2_ = BiLstm<T>(2 * h, h, this->params_, "q_rnn2", init_rng);
    q_reduce_ = ReduceSequence<T>(ReduceKind::WeightedSum, 2 * h, this->params_, "q_reduce",
                                  init_rng);
    start_pointer_ = BilinearScore<T>(2 * h, 2 * h, this->params_, "start_pointer", init_rng);
    end_pointer_ = BilinearScore<T>(2 * h, 2 * h, this->params_, "end_pointer", init_rng);
  }

  std::string name() const override { return "drqa"; }

  ModelOutput<T> build_graph(const Batch& batch, Mode mode) override {
    const auto& cfg = this->config_;
    int B = batch.size, rows = batch.context_len, cols = batch.question_len;
    bool training = mode == Mode::Train;
    auto cmask = detail::tensor_from_floats<T>(batch.context_mask, {B, rows});
    auto qmask = detail::tensor_from_floats<T>(batch.question_mask, {B, cols});

    auto c_emb = embedding_(batch.context_ids, {B, rows});   // B×T×e
    auto q_emb = embedding_(batch.question_ids, {B, cols});  // B×J×e

    // aligned question attention over projected embeddings
    auto pc = relu(align_proj_(c_emb));
    auto pq = relu(align_proj_(q_emb));
    auto align_scores = matmul(pc, transpose_last2(pq));  // B×T×J
    auto align_probs = masked_softmax(align_scores, reshape(qmask, {B, 1, cols}));
    auto aligned = matmul(align_probs, q_emb);  // B×T×e

    std::vector<TensorT<T>> parts{c_emb, aligned};
    if (cfg.use_tf)
      parts.push_back(detail::tensor_from_floats<T>(batch.tf, {B, rows, 1}));
    if (cfg.use_exact_match)
      parts.push_back(detail::tensor_from_floats<T>(batch.exact_match, {B, rows, 3}));
    if (use_tags_) {
      if (!batch.has_tags)
        throw ShapeError("model expects tag features but the batch has none");
      parts.push_back(tag_embedding_(batch.context_tags, {B, rows}));
    }
    auto doc_in = dropout_(concat<T>(parts, 2), training, this->rng_);
    auto d1 = doc_rnn1_(doc_in, cmask).outputs;
    auto doc = doc_rnn2_(dropout_(d1, training, this->rng_), cmask).outputs;  // B×T×2h

    auto q1 = q_rnn1_(dropout_(q_emb, training, this->rng_), qmask).outputs;
    auto q_seq = q_rnn2_(q1, qmask).outputs;   // B×J×2h
    auto q_vec = q_reduce_(q_seq, qmask);      // B×2h

    auto start_logits = start_pointer_(doc, q_vec);
    auto end_logits = end_pointer_(doc, q_vec);

    ModelOutput<T> out;
    out.start_log_probs = log_softmax_masked(start_logits, cmask);
    out.end_log_probs = log_softmax_masked(end_logits, cmask);
    if (batch.has_labels)
      out.loss = detail::span_nll_loss(out.start_log_probs, out.end_log_probs, batch.span_start,
                                       batch.span_end);
    return out;
  }

 private:
  Embedding<T> embedding_, tag_embedding_;
  Linear<T> align_proj_;
  BiLstm<T> doc_rnn1_, doc_rnn2_, q_rnn1_, q_rnn2_;
  ReduceSequence<T> q_reduce_;
  BilinearScore<T> start_pointer_, end_pointer_;
  VariationalDropout<T> dropout_;
  bool use_tags_ = false;
};

template <typename T>
std::unique_ptr<ModelBase<T>> make_model(const ModelConfig& config, size_t vocab_size,
                                         const EmbeddingMatrix* pretrained = nullptr,
                                         size_t tag_vocab_size = 0) {
  if (config.model == "bidaf")
    return std::make_unique<BidafModel<T>>(config, vocab_size, pretrained);
  if (config.model == "drqa")
    return std::make_unique<DrqaModel<T>>(config, vocab_size, pretrained, tag_vocab_size);
  throw ConfigError("unknown model: " + config.model);
}

}  // namespace mrc
