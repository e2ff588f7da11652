#pragma once

#include <condition_variable>
#include <deque>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mrc/common.hpp"
#include "mrc/dataset.hpp"
#include "mrc/preprocess.hpp"

namespace mrc {

/// Index-mapped, dynamically padded, masked bundle ready for a forward pass.
/// T and J are this batch's own max lengths; padded id positions hold PAD (0)
/// and padded mask positions hold 0.
struct Batch {
  int size = 0;          // B
  int context_len = 0;   // T
  int question_len = 0;  // J

  std::vector<int> context_ids;      // B*T
  std::vector<int> question_ids;     // B*J
  std::vector<float> context_mask;   // B*T, {0,1}
  std::vector<float> question_mask;  // B*J, {0,1}

  std::vector<float> tf;           // B*T
  std::vector<float> exact_match;  // B*T*3: [orig, lower, norm]
  std::vector<int> context_tags;   // B*T, present when has_tags
  bool has_tags = false;

  std::vector<int> span_start, span_end;  // B, -1 when absent
  bool has_labels = false;                // true iff every row has a span

  std::vector<std::string> qids;
  std::vector<int> context_lengths, question_lengths;
  std::vector<const DataInstance*> instances;  // borrowed; generator outlives batches
};

/// Per-token index lookup; unknown tokens map to UNK.
inline std::vector<int> index_map(const std::vector<Token>& tokens, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.index_of(t.text));
  return ids;
}

struct BatchingOptions {
  int batch_size = 32;
  bool shuffle = false;
  uint64_t seed = 0;
  bool bucket_by_length = false;  // sort by context length inside shuffled windows
  int bucket_window_batches = 16;
  bool prefetch = false;  // producer thread with a bounded buffer
  int prefetch_depth = 2;
};

/// Maps instances to padded tensor bundles, one epoch at a time. The epoch
/// order is a pure function of (seed, epoch), so runs are reproducible and
/// the prefetching stream yields the same sequence as the eager path.
class BatchGenerator {
 public:
  BatchGenerator(const std::vector<DataInstance>& instances, const Vocabulary& vocab,
                 const FeatureVocab* tag_vocab, BatchingOptions options)
      : instances_(instances), vocab_(vocab), tag_vocab_(tag_vocab), options_(options) {
    if (options_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }

  size_t num_instances() const { return instances_.size(); }
  size_t batches_per_epoch() const {
    return (instances_.size() + options_.batch_size - 1) / options_.batch_size;
  }

  std::vector<int> epoch_order(int epoch) const {
    std::vector<int> order(instances_.size());
    std::iota(order.begin(), order.end(), 0);
    if (options_.shuffle) {
      Rng rng = Rng(options_.seed).fork(0x9a7cull + static_cast<uint64_t>(epoch));
      rng.shuffle(order.begin(), order.end());
      if (options_.bucket_by_length) {
        size_t window =
            static_cast<size_t>(options_.batch_size) * options_.bucket_window_batches;
        for (size_t start = 0; start < order.size(); start += window) {
          size_t end = std::min(order.size(), start + window);
          std::stable_sort(order.begin() + start, order.begin() + end, [&](int a, int b) {
            return instances_[a].context_tokens.size() < instances_[b].context_tokens.size();
          });
        }
      }
    }
    return order;
  }

  Batch make_batch(const std::vector<int>& rows) const {
    Batch b;
    b.size = static_cast<int>(rows.size());
    int T = 1, J = 1;
    for (int r : rows) {
      T = std::max(T, static_cast<int>(instances_[r].context_tokens.size()));
      J = std::max(J, static_cast<int>(instances_[r].question_tokens.size()));
    }
    b.context_len = T;
    b.question_len = J;
    size_t B = rows.size();
    b.context_ids.assign(B * T, kPadIndex);
    b.question_ids.assign(B * J, kPadIndex);
    b.context_mask.assign(B * T, 0.0f);
    b.question_mask.assign(B * J, 0.0f);
    b.tf.assign(B * T, 0.0f);
    b.exact_match.assign(B * T * 3, 0.0f);
    b.has_tags = tag_vocab_ != nullptr;
    if (b.has_tags) b.context_tags.assign(B * T, kPadIndex);
    b.has_labels = true;

    for (size_t i = 0; i < B; ++i) {
      const DataInstance& inst = instances_[rows[i]];
      auto cids = index_map(inst.context_tokens, vocab_);
      auto qids = index_map(inst.question_tokens, vocab_);
      int cl = static_cast<int>(cids.size());
      int ql = static_cast<int>(qids.size());
      for (int t = 0; t < cl; ++t) {
        b.context_ids[i * T + t] = cids[t];
        b.context_mask[i * T + t] = 1.0f;
      }
      for (int j = 0; j < ql; ++j) {
        b.question_ids[i * J + j] = qids[j];
        b.question_mask[i * J + j] = 1.0f;
      }
      auto numeric = [&](const char* name) -> const std::vector<float>* {
        auto it = inst.feature_fields.numeric.find(name);
        return it == inst.feature_fields.numeric.end() ? nullptr : &it->second;
      };
      if (const auto* tf = numeric("tf"))
        for (int t = 0; t < cl && t < static_cast<int>(tf->size()); ++t)
          b.tf[i * T + t] = (*tf)[t];
      const char* match_names[3] = {"match_orig", "match_lower", "match_norm"};
      for (int k = 0; k < 3; ++k)
        if (const auto* m = numeric(match_names[k]))
          for (int t = 0; t < cl && t < static_cast<int>(m->size()); ++t)
            b.exact_match[(i * T + t) * 3 + k] = (*m)[t];
      if (b.has_tags) {
        auto it = inst.feature_fields.tags.find("tags");
        if (it != inst.feature_fields.tags.end())
          for (int t = 0; t < cl && t < static_cast<int>(it->second.size()); ++t)
            b.context_tags[i * T + t] = tag_vocab_->index_of(it->second[t]);
      }

      b.span_start.push_back(inst.span_start);
      b.span_end.push_back(inst.span_end);
      if (!inst.has_span()) b.has_labels = false;
      b.qids.push_back(inst.qid);
      b.context_lengths.push_back(cl);
      b.question_lengths.push_back(ql);
      b.instances.push_back(&inst);
    }
    return b;
  }

  std::vector<Batch> epoch_batches(int epoch) const {
    auto order = epoch_order(epoch);
    std::vector<Batch> out;
    for (size_t start = 0; start < order.size(); start += options_.batch_size) {
      size_t end = std::min(order.size(), start + options_.batch_size);
      out.push_back(make_batch({order.begin() + start, order.begin() + end}));
    }
    return out;
  }

  /// Generator-style access to one epoch. With prefetch enabled a producer
  /// thread builds batches ahead behind a bounded buffer; the emitted
  /// sequence is identical either way.
  class Stream {
   public:
    Stream(const BatchGenerator& gen, int epoch)
        : gen_(gen), order_(gen.epoch_order(epoch)) {
      if (gen_.options_.prefetch && !order_.empty()) {
        producer_ = std::thread([this] { produce(); });
        threaded_ = true;
      }
    }

    ~Stream() {
      if (threaded_) {
        {
          std::lock_guard<std::mutex> lock(mu_);
          cancelled_ = true;
        }
        cv_.notify_all();
        producer_.join();
      }
    }

    Stream(const Stream&) = delete;
    Stream& operator=(const Stream&) = delete;

    std::optional<Batch> next() {
      if (!threaded_) {
        if (cursor_ >= order_.size()) return std::nullopt;
        size_t end = std::min(order_.size(), cursor_ + gen_.options_.batch_size);
        Batch b = gen_.make_batch({order_.begin() + cursor_, order_.begin() + end});
        cursor_ = end;
        return b;
      }
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [this] { return !queue_.empty() || done_; });
      if (queue_.empty()) return std::nullopt;
      Batch b = std::move(queue_.front());
      queue_.pop_front();
      cv_.notify_all();
      return b;
    }

   private:
    void produce() {
      for (size_t start = 0; start < order_.size(); start += gen_.options_.batch_size) {
        size_t end = std::min(order_.size(), start + gen_.options_.batch_size);
        Batch b = gen_.make_batch({order_.begin() + start, order_.begin() + end});
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] {
          return cancelled_ || queue_.size() < static_cast<size_t>(gen_.options_.prefetch_depth);
        });
        if (cancelled_) return;
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
      std::lock_guard<std::mutex> lock(mu_);
      done_ = true;
      cv_.notify_all();
    }

    const BatchGenerator& gen_;
    std::vector<int> order_;
    size_t cursor_ = 0;
    bool threaded_ = false;
    std::thread producer_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Batch> queue_;
    bool done_ = false;
    bool cancelled_ = false;
  };

  Stream stream(int epoch) const { return Stream(*this, epoch); }

 private:
  const std::vector<DataInstance>& instances_;
  const Vocabulary& vocab_;
  const FeatureVocab* tag_vocab_;
  BatchingOptions options_;
};

/// One eager epoch of batches; thin wrapper over BatchGenerator.
inline std::vector<Batch> make_batches(const std::vector<DataInstance>& instances,
                                       const Vocabulary& vocab, const FeatureVocab* tag_vocab,
                                       int batch_size, bool shuffle, uint64_t seed) {
  BatchingOptions opts;
  opts.batch_size = batch_size;
  opts.shuffle = shuffle;
  opts.seed = seed;
  return BatchGenerator(instances, vocab, tag_vocab, opts).epoch_batches(0);
}

}  // namespace mrc
