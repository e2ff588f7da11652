#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "mrc/batching.hpp"

using mrc::Batch;
using mrc::BatchGenerator;
using mrc::BatchingOptions;
using mrc::DataInstance;
using mrc::Vocabulary;

namespace {

DataInstance make_instance(const std::string& qid, const std::string& context,
                           const std::string& question, int span_start = 0, int span_end = 0) {
  DataInstance inst;
  inst.qid = qid;
  inst.context_text = context;
  inst.context_tokens = mrc::tokenize(context);
  inst.question_text = question;
  inst.question_tokens = mrc::tokenize(question);
  inst.span_start = span_start;
  inst.span_end = span_end;
  mrc::extract_features(inst, mrc::FeatureSide::Context);
  return inst;
}

struct Corpus {
  std::vector<DataInstance> instances;
  Vocabulary vocab;
};

Corpus toy_corpus(int n) {
  Corpus c;
  for (int i = 0; i < n; ++i) {
    std::string extra;
    for (int k = 0; k < i % 4; ++k) extra += " pad" + std::to_string(k);
    c.instances.push_back(
        make_instance("q" + std::to_string(i), "tok a b" + extra, "what is a ?", 1, 1));
  }
  c.vocab = mrc::build_vocabulary(c.instances);
  return c;
}

}  // namespace

TEST_CASE("index_map looks up ids with UNK fallback") {
  auto corpus = toy_corpus(1);
  auto ids = mrc::index_map(mrc::tokenize("a b zzz"), corpus.vocab);
  CHECK(ids[0] == corpus.vocab.index_of("a"));
  CHECK(ids[1] == corpus.vocab.index_of("b"));
  CHECK(ids[2] == mrc::kUnkIndex);
  CHECK(mrc::index_map({}, corpus.vocab).empty());
}

TEST_CASE("dynamic padding and masks") {
  std::vector<DataInstance> instances{make_instance("q0", "a b c", "x ?"),
                                      make_instance("q1", "a b c d e", "x y z ?")};
  auto vocab = mrc::build_vocabulary(instances);
  auto batches = mrc::make_batches(instances, vocab, nullptr, 2, false, 0);
  REQUIRE(batches.size() == 1);
  const Batch& b = batches[0];
  CHECK(b.size == 2);
  CHECK(b.context_len == 5);
  CHECK(b.context_mask ==
        std::vector<float>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1});
  // padded id positions hold PAD
  CHECK(b.context_ids[3] == mrc::kPadIndex);
  CHECK(b.context_ids[4] == mrc::kPadIndex);
}

TEST_CASE("epoch yields ceil(N/B) batches keeping the short tail") {
  auto corpus = toy_corpus(5);
  auto batches = mrc::make_batches(corpus.instances, corpus.vocab, nullptr, 2, false, 0);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size == 2);
  CHECK(batches[1].size == 2);
  CHECK(batches[2].size == 1);
}

TEST_CASE("empty instance list gives an empty stream") {
  std::vector<DataInstance> none;
  Vocabulary vocab;
  BatchGenerator gen(none, vocab, nullptr, BatchingOptions{});
  auto stream = gen.stream(0);
  CHECK(!stream.next().has_value());
  CHECK(mrc::make_batches(none, vocab, nullptr, 4, true, 1).empty());
}

TEST_CASE("same seed gives identical batch sequences") {
  auto corpus = toy_corpus(13);
  auto a = mrc::make_batches(corpus.instances, corpus.vocab, nullptr, 3, true, 42);
  auto b = mrc::make_batches(corpus.instances, corpus.vocab, nullptr, 3, true, 42);
  auto c = mrc::make_batches(corpus.instances, corpus.vocab, nullptr, 3, true, 43);
  REQUIRE(a.size() == b.size());
  bool same = true, all_same_c = true;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].qids != b[i].qids) same = false;
    if (a[i].qids != c[i].qids) all_same_c = false;
  }
  CHECK(same);
  CHECK_FALSE(all_same_c);
}

TEST_CASE("epoch preserves the qid multiset") {
  auto corpus = toy_corpus(11);
  BatchingOptions opts;
  opts.batch_size = 4;
  opts.shuffle = true;
  opts.seed = 9;
  BatchGenerator gen(corpus.instances, corpus.vocab, nullptr, opts);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::string> seen;
    for (const auto& b : gen.epoch_batches(epoch))
      for (const auto& q : b.qids) seen.insert(q);
    std::multiset<std::string> want;
    for (const auto& inst : corpus.instances) want.insert(inst.qid);
    CHECK(seen == want);
  }
}

TEST_CASE("all padded positions are zero in ids and masks") {
  auto corpus = toy_corpus(9);
  for (const auto& b : mrc::make_batches(corpus.instances, corpus.vocab, nullptr, 4, true, 3)) {
    for (int i = 0; i < b.size; ++i) {
      for (int t = b.context_lengths[i]; t < b.context_len; ++t) {
        CHECK(b.context_ids[i * b.context_len + t] == 0);
        CHECK(b.context_mask[i * b.context_len + t] == 0.0f);
      }
      for (int j = b.question_lengths[i]; j < b.question_len; ++j) {
        CHECK(b.question_ids[i * b.question_len + j] == 0);
        CHECK(b.question_mask[i * b.question_len + j] == 0.0f);
      }
    }
  }
}

TEST_CASE("span labels stay within row lengths") {
  auto corpus = toy_corpus(7);
  for (const auto& b : mrc::make_batches(corpus.instances, corpus.vocab, nullptr, 3, false, 0)) {
    REQUIRE(b.has_labels);
    for (int i = 0; i < b.size; ++i) {
      CHECK(b.span_start[i] >= 0);
      CHECK(b.span_end[i] < b.context_lengths[i]);
    }
  }
}

TEST_CASE("prefetching emits the same sequence as the eager path") {
  auto corpus = toy_corpus(17);
  BatchingOptions eager;
  eager.batch_size = 4;
  eager.shuffle = true;
  eager.seed = 5;
  BatchingOptions pre = eager;
  pre.prefetch = true;

  BatchGenerator g1(corpus.instances, corpus.vocab, nullptr, eager);
  BatchGenerator g2(corpus.instances, corpus.vocab, nullptr, pre);
  for (int epoch = 0; epoch < 2; ++epoch) {
    auto want = g1.epoch_batches(epoch);
    auto stream = g2.stream(epoch);
    size_t i = 0;
    while (auto b = stream.next()) {
      REQUIRE(i < want.size());
      CHECK(b->qids == want[i].qids);
      CHECK(b->context_ids == want[i].context_ids);
      ++i;
    }
    CHECK(i == want.size());
  }
}

TEST_CASE("bucketing sorts within windows and keeps the multiset") {
  auto corpus = toy_corpus(40);
  BatchingOptions opts;
  opts.batch_size = 2;
  opts.shuffle = true;
  opts.seed = 1;
  opts.bucket_by_length = true;
  opts.bucket_window_batches = 4;
  BatchGenerator gen(corpus.instances, corpus.vocab, nullptr, opts);
  auto order = gen.epoch_order(0);
  std::multiset<int> ids(order.begin(), order.end());
  CHECK(ids.size() == 40);
  CHECK(*ids.begin() == 0);
  // inside each window of 8, lengths are ascending
  for (size_t w = 0; w + 8 <= order.size(); w += 8)
    for (size_t i = w + 1; i < w + 8; ++i)
      CHECK(corpus.instances[order[i - 1]].context_tokens.size() <=
            corpus.instances[order[i]].context_tokens.size());
}

TEST_CASE("tag features are index-mapped when a tag vocab is given") {
  mrc::RuleTagger tagger;
  auto inst = make_instance("q0", "Paris has 20 cats .", "How many ?", 2, 2);
  mrc::extract_features(inst, mrc::FeatureSide::Context, &tagger);
  std::vector<DataInstance> instances{inst};
  auto vocab = mrc::build_vocabulary(instances);
  auto tag_vocab = mrc::FeatureVocab::build(instances, "tags");

  auto batches = mrc::make_batches(instances, vocab, &tag_vocab, 1, false, 0);
  REQUIRE(batches.size() == 1);
  REQUIRE(batches[0].has_tags);
  CHECK(batches[0].context_tags[0] == tag_vocab.index_of("CAP"));
  CHECK(batches[0].context_tags[2] == tag_vocab.index_of("NUM"));
}
