#pragma once

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mrc/common.hpp"
#include "mrc/dataset.hpp"

namespace mrc {

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr int kPadIndex = 0;
inline constexpr int kUnkIndex = 1;

/// Word <-> index bijection with PAD fixed at 0 and UNK at 1. Lookups of
/// unknown tokens return the UNK index. Immutable once built.
class Vocabulary {
 public:
  Vocabulary() {
    add_token(kPadToken, 0);
    add_token(kUnkToken, 0);
  }

  int index_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkIndex : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token_at(int idx) const { return tokens_.at(idx); }
  size_t size() const { return tokens_.size(); }
  long count_of(const std::string& token) const {
    auto it = counts_.find(token);
    return it == counts_.end() ? 0 : it->second;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Character-level vocabulary over the tokens, built on demand.
  const Vocabulary* char_vocab() const { return char_vocab_.get(); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    for (const auto& t : tokens_) out << t << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    size_t i = 0;
    while (std::getline(in, line)) {
      if (i == 0 && line != kPadToken)
        throw ParseError("vocabulary file does not start with " + std::string(kPadToken) + ": " +
                         path);
      if (i == 1 && line != kUnkToken)
        throw ParseError("vocabulary file lacks " + std::string(kUnkToken) + " at index 1: " +
                         path);
      if (i >= 2) v.add_token(line, 0);
      ++i;
    }
    if (i < 2) throw ParseError("vocabulary file too short: " + path);
    return v;
  }

  friend Vocabulary build_vocabulary(const std::vector<DataInstance>&, long, size_t,
                                     const std::vector<std::string>&, bool);

 private:
  void add_token(const std::string& t, long count) {
    if (index_.count(t)) return;
    index_[t] = static_cast<int>(tokens_.size());
    tokens_.push_back(t);
    if (count > 0) counts_[t] = count;
  }

  std::unordered_map<std::string, int> index_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, long> counts_;
  std::shared_ptr<Vocabulary> char_vocab_;
};

/// Scan training instances and rank tokens by (count desc, first-seen asc).
/// Tokens below min_count are dropped; the result is truncated to max_size
/// entries including the specials and extra tokens.
inline Vocabulary build_vocabulary(const std::vector<DataInstance>& instances,
                                   long min_count = 1,
                                   size_t max_size = std::numeric_limits<size_t>::max(),
                                   const std::vector<std::string>& extra_tokens = {},
                                   bool build_chars = false) {
  if (max_size < 2 + extra_tokens.size())
    throw ConfigError("vocabulary max_size " + std::to_string(max_size) +
                      " cannot fit the " + std::to_string(2 + extra_tokens.size()) +
                      " reserved tokens");
  std::unordered_map<std::string, long> counts;
  std::vector<std::string> first_seen;
  auto scan = [&](const std::vector<Token>& toks) {
    for (const auto& t : toks) {
      auto [it, inserted] = counts.try_emplace(t.text, 0);
      if (inserted) first_seen.push_back(t.text);
      ++it->second;
    }
  };
  for (const auto& inst : instances) {
    scan(inst.context_tokens);
    scan(inst.question_tokens);
  }

  std::vector<std::string> ranked;
  for (const auto& t : first_seen)
    if (counts[t] >= min_count) ranked.push_back(t);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](const std::string& a, const std::string& b) {
                     return counts[a] > counts[b];
                   });

  Vocabulary v;
  for (const auto& t : extra_tokens) v.add_token(t, 0);
  for (const auto& t : ranked) {
    if (v.size() >= max_size) break;
    v.add_token(t, counts[t]);
  }
  if (build_chars) {
    auto cv = std::make_shared<Vocabulary>();
    for (const auto& tok : v.tokens())
      for (char c : tok) cv->add_token(std::string(1, c), 0);
    v.char_vocab_ = std::move(cv);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Pretrained embeddings
// ---------------------------------------------------------------------------

/// |V| x dim row-major matrix aligned with a Vocabulary. PAD row is all-zero;
/// words missing from the file are initialized uniform(-0.05, 0.05) from the
/// given seed.
struct EmbeddingMatrix {
  std::vector<float> data;
  size_t rows = 0;
  int dim = 0;
  size_t hit_count = 0;        // vocabulary words found in the file
  size_t duplicate_count = 0;  // file words seen more than once (first wins)

  const float* row(size_t r) const { return data.data() + r * static_cast<size_t>(dim); }
};

inline EmbeddingMatrix load_pretrained(const Vocabulary& vocab, const std::string& path,
                                       uint64_t seed = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file: " + path);

  std::unordered_map<std::string, std::vector<float>> file_rows;
  int dim = -1;
  std::string line;
  size_t lineno = 0;
  EmbeddingMatrix m;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    // split on single spaces; embeddings use plain space separation
    size_t sp = line.find(' ');
    if (sp == std::string::npos)
      throw ParseError("embedding line " + std::to_string(lineno) + " has no vector: " + path);
    std::string word = line.substr(0, sp);
    std::vector<float> vals;
    const char* p = line.c_str() + sp;
    char* endp = nullptr;
    while (*p) {
      float v = std::strtof(p, &endp);
      if (endp == p) break;
      vals.push_back(v);
      p = endp;
    }
    if (lineno == 1 && vals.size() == 1) {
      // word2vec text header "count dim": two integer fields
      char* e1 = nullptr;
      long c0 = std::strtol(word.c_str(), &e1, 10);
      float f1 = vals[0];
      if (e1 && *e1 == '\0' && c0 >= 0 && f1 == static_cast<long>(f1)) continue;
    }
    if (dim < 0) dim = static_cast<int>(vals.size());
    if (static_cast<int>(vals.size()) != dim)
      throw ParseError("embedding dimension changed from " + std::to_string(dim) + " to " +
                       std::to_string(vals.size()) + " at line " + std::to_string(lineno) +
                       ": " + path);
    if (!vocab.contains(word)) continue;
    auto [it, inserted] = file_rows.try_emplace(word, std::move(vals));
    if (!inserted) ++m.duplicate_count;
  }
  if (dim < 0) throw ParseError("embedding file has no vectors: " + path);

  m.rows = vocab.size();
  m.dim = dim;
  m.data.assign(m.rows * static_cast<size_t>(dim), 0.0f);
  Rng rng(splitmix64(seed) ^ 0x5eedf11eull);
  for (size_t i = 0; i < m.rows; ++i) {
    float* dst = m.data.data() + i * static_cast<size_t>(dim);
    if (i == static_cast<size_t>(kPadIndex)) continue;  // PAD row stays zero
    auto it = file_rows.find(vocab.token_at(static_cast<int>(i)));
    if (it != file_rows.end()) {
      std::copy(it->second.begin(), it->second.end(), dst);
      ++m.hit_count;
    } else {
      for (int j = 0; j < dim; ++j) dst[j] = static_cast<float>(rng.uniform(-0.05, 0.05));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Linguistic features
// ---------------------------------------------------------------------------

/// Pluggable tagger. The default rule-based tagger assigns coarse classes
/// (NUM, PUNCT, CAP, WORD) and a crude lemma-slot normalization; a real POS
/// or NER pipeline can be dropped in behind the same interface.
class Tagger {
 public:
  virtual ~Tagger() = default;
  virtual std::string tag(const std::string& token) const = 0;
  virtual std::string normalize(const std::string& token) const = 0;
};

class RuleTagger : public Tagger {
 public:
  std::string tag(const std::string& token) const override {
    if (token.empty()) return "WORD";
    bool all_digit = true, any_upper = false;
    for (unsigned char c : token) {
      if (!(c < 0x80 && std::isdigit(c))) all_digit = false;
      if (c < 0x80 && std::isupper(c)) any_upper = true;
    }
    if (all_digit) return "NUM";
    unsigned char c0 = static_cast<unsigned char>(token[0]);
    if (token.size() == 1 && c0 < 0x80 && std::ispunct(c0)) return "PUNCT";
    if (any_upper && std::isupper(c0)) return "CAP";
    return "WORD";
  }

  std::string normalize(const std::string& token) const override {
    std::string t;
    for (unsigned char c : token) {
      if (c < 0x80 && std::isupper(c)) c = static_cast<unsigned char>(std::tolower(c));
      t.push_back(static_cast<char>(c));
    }
    if (t.size() > 2 && t.ends_with("'s")) {
      t.resize(t.size() - 2);
    } else if (t.size() > 3 && t.back() == 's') {
      t.pop_back();  // crude plural strip
    }
    return t;
  }
};

/// Tag -> index map for one discrete feature, built from the training split
/// only. Unseen tags at apply time map to the UNK index.
class FeatureVocab {
 public:
  FeatureVocab() {
    add(kPadToken);
    add(kUnkToken);
  }

  int index_of(const std::string& tag) const {
    auto it = index_.find(tag);
    return it == index_.end() ? kUnkIndex : it->second;
  }
  size_t size() const { return tags_.size(); }
  const std::vector<std::string>& tags() const { return tags_; }

  void add(const std::string& tag) {
    if (index_.count(tag)) return;
    index_[tag] = static_cast<int>(tags_.size());
    tags_.push_back(tag);
  }

  static FeatureVocab build(const std::vector<DataInstance>& instances,
                            const std::string& field) {
    FeatureVocab fv;
    for (const auto& inst : instances) {
      auto it = inst.feature_fields.tags.find(field);
      if (it == inst.feature_fields.tags.end()) continue;
      for (const auto& tag : it->second) fv.add(tag);
    }
    return fv;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write tag vocabulary: " + path);
    for (const auto& t : tags_) out << t << "\n";
  }

  static FeatureVocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open tag vocabulary: " + path);
    FeatureVocab fv;
    std::string line;
    size_t i = 0;
    while (std::getline(in, line)) {
      if (i >= 2) fv.add(line);
      ++i;
    }
    return fv;
  }

 private:
  std::unordered_map<std::string, int> index_;
  std::vector<std::string> tags_;
};

enum class FeatureSide { Context, Question };

/// Fill feature_fields in place. The context side gets normalized term
/// frequency ("tf"), the three-way exact-match indicators ("match_orig",
/// "match_lower", "match_norm") and, when a tagger is given, per-token tags
/// ("tags"). The question side gets tags only ("q_tags").
inline void extract_features(DataInstance& inst, FeatureSide side,
                             const Tagger* tagger = nullptr) {
  auto lower = [](const std::string& s) {
    std::string out;
    for (unsigned char c : s)
      out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    return out;
  };

  if (side == FeatureSide::Question) {
    if (tagger) {
      std::vector<std::string> tags;
      for (const auto& t : inst.question_tokens) tags.push_back(tagger->tag(t.text));
      inst.feature_fields.tags["q_tags"] = std::move(tags);
    }
    return;
  }

  const auto& ctx = inst.context_tokens;
  size_t n = ctx.size();

  std::unordered_map<std::string, int> ctx_counts;
  for (const auto& t : ctx) ++ctx_counts[lower(t.text)];
  std::vector<float> tf(n, 0.0f);
  for (size_t i = 0; i < n; ++i)
    tf[i] = n == 0 ? 0.0f : static_cast<float>(ctx_counts[lower(ctx[i].text)]) / n;
  inst.feature_fields.numeric["tf"] = std::move(tf);

  std::set<std::string> q_orig, q_lower, q_norm;
  for (const auto& t : inst.question_tokens) {
    q_orig.insert(t.text);
    q_lower.insert(lower(t.text));
    q_norm.insert(tagger ? tagger->normalize(t.text) : lower(t.text));
  }
  std::vector<float> m_orig(n), m_lower(n), m_norm(n);
  for (size_t i = 0; i < n; ++i) {
    m_orig[i] = q_orig.count(ctx[i].text) ? 1.0f : 0.0f;
    m_lower[i] = q_lower.count(lower(ctx[i].text)) ? 1.0f : 0.0f;
    m_norm[i] =
        q_norm.count(tagger ? tagger->normalize(ctx[i].text) : lower(ctx[i].text)) ? 1.0f : 0.0f;
  }
  inst.feature_fields.numeric["match_orig"] = std::move(m_orig);
  inst.feature_fields.numeric["match_lower"] = std::move(m_lower);
  inst.feature_fields.numeric["match_norm"] = std::move(m_norm);

  if (tagger) {
    std::vector<std::string> tags;
    for (const auto& t : ctx) tags.push_back(tagger->tag(t.text));
    inst.feature_fields.tags["tags"] = std::move(tags);
  }
}

}  // namespace mrc
