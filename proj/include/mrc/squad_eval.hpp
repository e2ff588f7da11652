#pragma once

// Answer scoring with the official SQuAD semantics: normalization, per-answer
// EM and token-multiset F1, and corpus evaluation with the max-over-golds
// rule. Pure functions, safe to call concurrently.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mrc/common.hpp"
#include "mrc/dataset.hpp"

namespace mrc {

/// qid -> predicted answer string, one prediction per question.
using PredictionSet = std::map<std::string, std::string>;

struct EvalResult {
  double exact_match = 0.0;  // percentage in [0, 100]
  double f1 = 0.0;           // percentage in [0, 100]
  size_t n_evaluated = 0;
  size_t missing_predictions = 0;    // questions with no prediction (scored 0)
  size_t unmatched_predictions = 0;  // predictions with no matching question
};

/// Canonical answer form: lowercase, strip punctuation, drop the articles
/// a/an/the, collapse whitespace — applied in that order.
inline std::string normalize_answer(const std::string& s) {
  std::string lowered;
  lowered.reserve(s.size());
  for (unsigned char c : s) {
    if (c < 0x80 && std::isupper(c)) c = static_cast<unsigned char>(std::tolower(c));
    if (c < 0x80 && std::ispunct(c)) continue;  // removed, not replaced by space
    lowered.push_back(static_cast<char>(c));
  }
  std::string out;
  size_t i = 0;
  while (i < lowered.size()) {
    while (i < lowered.size() && detail::ascii_space(lowered[i])) ++i;
    size_t start = i;
    while (i < lowered.size() && !detail::ascii_space(lowered[i])) ++i;
    if (i == start) break;
    std::string word = lowered.substr(start, i - start);
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

namespace detail {

inline std::vector<std::string> normalized_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string norm = normalize_answer(s);
  size_t i = 0;
  while (i < norm.size()) {
    size_t j = norm.find(' ', i);
    if (j == std::string::npos) j = norm.size();
    out.push_back(norm.substr(i, j - i));
    i = j + 1;
  }
  return out;
}

}  // namespace detail

inline bool exact_match_score(const std::string& prediction, const std::string& gold) {
  return normalize_answer(prediction) == normalize_answer(gold);
}

/// Token-multiset F1 in [0, 1]. Both sides empty after normalization -> 1
/// (the no-answer convention); exactly one empty -> 0.
inline double f1_score(const std::string& prediction, const std::string& gold) {
  auto p = detail::normalized_tokens(prediction);
  auto g = detail::normalized_tokens(gold);
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : g) ++counts[t];
  int common = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  double precision = static_cast<double>(common) / p.size();
  double recall = static_cast<double>(common) / g.size();
  return 2.0 * precision * recall / (precision + recall);
}

/// Corpus scores: per question the max over gold answers, averaged and scaled
/// to percentages. Questions with no gold answer (SQuAD 2.0 impossible) score
/// against the empty string. Missing predictions count as wrong.
inline EvalResult evaluate(const std::vector<DataInstance>& instances,
                           const PredictionSet& predictions) {
  EvalResult result;
  std::map<std::string, std::vector<std::string>> golds_by_qid;
  std::vector<std::string> qid_order;
  for (const auto& inst : instances) {
    if (!golds_by_qid.count(inst.qid)) qid_order.push_back(inst.qid);
    auto& golds = golds_by_qid[inst.qid];
    if (golds.empty()) {
      golds = inst.gold_answers;
      if (golds.empty()) golds.push_back("");  // no-answer convention
    }
  }

  double em_total = 0.0, f1_total = 0.0;
  for (const auto& qid : qid_order) {
    auto pred_it = predictions.find(qid);
    if (pred_it == predictions.end()) {
      ++result.missing_predictions;
      continue;  // scores contribute 0
    }
    double best_em = 0.0, best_f1 = 0.0;
    for (const auto& gold : golds_by_qid[qid]) {
      best_em = std::max(best_em, exact_match_score(pred_it->second, gold) ? 1.0 : 0.0);
      best_f1 = std::max(best_f1, f1_score(pred_it->second, gold));
    }
    em_total += best_em;
    f1_total += best_f1;
  }
  for (const auto& [qid, _] : predictions)
    if (!golds_by_qid.count(qid)) ++result.unmatched_predictions;

  result.n_evaluated = qid_order.size();
  if (result.n_evaluated > 0) {
    result.exact_match = 100.0 * em_total / result.n_evaluated;
    result.f1 = 100.0 * f1_total / result.n_evaluated;
  }
  return result;
}

}  // namespace mrc
