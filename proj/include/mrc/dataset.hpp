#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrc/common.hpp"

namespace mrc {

class AlignmentError : public std::runtime_error {
 public:
  explicit AlignmentError(const std::string& msg) : std::runtime_error(msg) {}
};

/// One token with byte offsets into its source string, end exclusive.
/// Invariant: source.substr(char_start, char_end - char_start) == text.
struct Token {
  std::string text;
  int char_start = 0;
  int char_end = 0;

  bool operator==(const Token&) const = default;
};

/// Per-instance feature storage; numeric vectors are per-token values, tag
/// vectors are per-token discrete labels mapped to indices at batch time.
struct FeatureMap {
  std::map<std::string, std::vector<float>> numeric;
  std::map<std::string, std::vector<std::string>> tags;

  bool operator==(const FeatureMap&) const = default;
};

/// One (context, question, answer) record with uniform field names across
/// datasets. span_start/span_end are inclusive token indices, -1 when absent.
struct DataInstance {
  std::string qid;
  std::string context_text;
  std::string question_text;
  std::vector<Token> context_tokens;
  std::vector<Token> question_tokens;
  std::string answer_text;                 // first listed gold (training label)
  std::vector<std::string> gold_answers;   // every gold (evaluation, max rule)
  int span_start = -1;
  int span_end = -1;
  bool is_impossible = false;
  FeatureMap feature_fields;

  bool has_span() const { return span_start >= 0; }
  bool operator==(const DataInstance&) const = default;
};

// ---------------------------------------------------------------------------
// Tokenizer: whitespace split, then each ASCII punctuation character becomes
// its own token. Multi-byte UTF-8 sequences are never split (all their bytes
// are >= 0x80 and count as word characters). Offsets are byte offsets.
// ---------------------------------------------------------------------------

namespace detail {

inline bool ascii_space(unsigned char c) { return c < 0x80 && std::isspace(c); }
inline bool ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace detail

inline std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> out;
  size_t i = 0, n = text.size();
  while (i < n) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (detail::ascii_space(c)) {
      ++i;
      continue;
    }
    if (detail::ascii_punct(c)) {
      out.push_back({text.substr(i, 1), static_cast<int>(i), static_cast<int>(i + 1)});
      ++i;
      continue;
    }
    size_t start = i;
    while (i < n) {
      unsigned char w = static_cast<unsigned char>(text[i]);
      if (detail::ascii_space(w) || detail::ascii_punct(w)) break;
      ++i;
    }
    out.push_back({text.substr(start, i - start), static_cast<int>(start), static_cast<int>(i)});
  }
  return out;
}

/// Smallest token interval (inclusive indices) covering the byte range
/// [answer_start, answer_start + answer_text bytes). Answers that begin or
/// end mid-token expand to the covering tokens. Throws AlignmentError when
/// no token overlaps the range.
inline std::pair<int, int> char_span_to_token_span(const std::vector<Token>& tokens,
                                                   int answer_start,
                                                   const std::string& answer_text) {
  int answer_end = answer_start + static_cast<int>(answer_text.size());  // exclusive
  int first = -1, last = -1;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const Token& t = tokens[i];
    bool overlaps = t.char_start < answer_end && t.char_end > answer_start;
    if (overlaps) {
      if (first < 0) first = static_cast<int>(i);
      last = static_cast<int>(i);
    }
  }
  if (first < 0)
    throw AlignmentError("no token covers answer at char " + std::to_string(answer_start) +
                         ": \"" + answer_text + "\"");
  return {first, last};
}

// ---------------------------------------------------------------------------
// SQuAD reader
// ---------------------------------------------------------------------------

enum class SquadVersion { V1, V2 };

struct ReadResult {
  std::vector<DataInstance> instances;
  size_t skipped = 0;  // answers that failed to align, flagged and dropped
};

/// Base reader: the extension point for custom datasets. Implementations
/// produce uniformly named DataInstance values.
class DatasetReader {
 public:
  virtual ~DatasetReader() = default;
  virtual ReadResult read(const std::string& path) const = 0;
};

namespace detail {

// SQuAD answer_start counts unicode codepoints; our offsets count bytes.
inline int codepoint_to_byte_offset(const std::string& s, int cp_offset) {
  int cp = 0;
  size_t i = 0;
  while (i < s.size() && cp < cp_offset) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    i += (c < 0x80) ? 1 : (c < 0xE0) ? 2 : (c < 0xF0) ? 3 : 4;
    ++cp;
  }
  return static_cast<int>(i);
}

}  // namespace detail

class SquadReader : public DatasetReader {
 public:
  explicit SquadReader(SquadVersion version) : version_(version) {}

  ReadResult read(const std::string& path) const override {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("malformed JSON in " + path + ": " + e.what());
    }
    ReadResult result;
    try {
      for (const auto& article : doc.at("data")) {
        for (const auto& para : article.at("paragraphs")) {
          std::string context = para.at("context").get<std::string>();
          auto context_tokens = tokenize(context);
          for (const auto& qa : para.at("qas")) {
            DataInstance inst;
            inst.qid = qa.at("id").is_string() ? qa.at("id").get<std::string>()
                                               : qa.at("id").dump();
            inst.context_text = context;
            inst.context_tokens = context_tokens;
            inst.question_text = qa.at("question").get<std::string>();
            inst.question_tokens = tokenize(inst.question_text);
            if (version_ == SquadVersion::V2)
              inst.is_impossible = qa.value("is_impossible", false);
            for (const auto& ans : qa.at("answers"))
              inst.gold_answers.push_back(ans.at("text").get<std::string>());

            if (!inst.is_impossible && !inst.gold_answers.empty()) {
              const auto& first = qa.at("answers").at(0);
              inst.answer_text = first.at("text").get<std::string>();
              int cp_start = first.at("answer_start").get<int>();
              int byte_start = detail::codepoint_to_byte_offset(context, cp_start);
              if (byte_start < 0 || byte_start >= static_cast<int>(context.size())) {
                ++result.skipped;
                continue;
              }
              try {
                auto [s, e] = char_span_to_token_span(context_tokens, byte_start,
                                                      inst.answer_text);
                inst.span_start = s;
                inst.span_end = e;
              } catch (const AlignmentError&) {
                ++result.skipped;
                continue;
              }
            }
            result.instances.push_back(std::move(inst));
          }
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("unexpected SQuAD schema in " + path + ": " + e.what());
    }
    return result;
  }

 private:
  SquadVersion version_;
};

inline ReadResult read_squad(const std::string& path, SquadVersion version) {
  return SquadReader(version).read(path);
}

// ---------------------------------------------------------------------------
// Instance serialization: JSON lines with a versioned header line.
// ---------------------------------------------------------------------------

inline constexpr int kInstanceFormatVersion = 1;
inline constexpr const char* kInstanceFormatName = "mrc-instances";

namespace detail {

inline nlohmann::json token_to_json(const Token& t) {
  return nlohmann::json{{"text", t.text}, {"start", t.char_start}, {"end", t.char_end}};
}

inline Token token_from_json(const nlohmann::json& j) {
  return Token{j.at("text").get<std::string>(), j.at("start").get<int>(),
               j.at("end").get<int>()};
}

inline nlohmann::json instance_to_json(const DataInstance& inst) {
  nlohmann::json j;
  j["qid"] = inst.qid;
  j["context"] = inst.context_text;
  j["question"] = inst.question_text;
  j["context_tokens"] = nlohmann::json::array();
  for (const auto& t : inst.context_tokens) j["context_tokens"].push_back(token_to_json(t));
  j["question_tokens"] = nlohmann::json::array();
  for (const auto& t : inst.question_tokens) j["question_tokens"].push_back(token_to_json(t));
  j["answer_text"] = inst.answer_text;
  j["gold_answers"] = inst.gold_answers;
  j["span_start"] = inst.span_start;
  j["span_end"] = inst.span_end;
  j["is_impossible"] = inst.is_impossible;
  j["features"] = {{"numeric", inst.feature_fields.numeric},
                   {"tags", inst.feature_fields.tags}};
  return j;
}

inline DataInstance instance_from_json(const nlohmann::json& j) {
  DataInstance inst;
  inst.qid = j.at("qid").get<std::string>();
  inst.context_text = j.at("context").get<std::string>();
  inst.question_text = j.at("question").get<std::string>();
  for (const auto& t : j.at("context_tokens")) inst.context_tokens.push_back(token_from_json(t));
  for (const auto& t : j.at("question_tokens"))
    inst.question_tokens.push_back(token_from_json(t));
  inst.answer_text = j.at("answer_text").get<std::string>();
  inst.gold_answers = j.at("gold_answers").get<std::vector<std::string>>();
  inst.span_start = j.at("span_start").get<int>();
  inst.span_end = j.at("span_end").get<int>();
  inst.is_impossible = j.at("is_impossible").get<bool>();
  const auto& f = j.at("features");
  inst.feature_fields.numeric =
      f.at("numeric").get<std::map<std::string, std::vector<float>>>();
  inst.feature_fields.tags =
      f.at("tags").get<std::map<std::string, std::vector<std::string>>>();
  return inst;
}

}  // namespace detail

inline void save_instances(const std::string& path, const std::vector<DataInstance>& instances) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write instance file: " + path);
  nlohmann::json header{{"format", kInstanceFormatName}, {"version", kInstanceFormatVersion}};
  out << header.dump() << "\n";
  for (const auto& inst : instances) out << detail::instance_to_json(inst).dump() << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<DataInstance> load_instances(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open instance file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty instance file: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != kInstanceFormatName)
    throw ParseError("not an instance file: " + path);
  if (header.value("version", -1) != kInstanceFormatVersion)
    throw ParseError("instance file version " + std::to_string(header.value("version", -1)) +
                     " unsupported (want " + std::to_string(kInstanceFormatVersion) + "): " +
                     path);
  // parse everything before returning anything: corrupt file -> error, not partial data
  std::vector<DataInstance> out;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(detail::instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("bad record at " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mrc
