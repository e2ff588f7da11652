#pragma once

// Shared fixture builders: official-schema SQuAD JSON documents and scratch
// files under the system temp directory.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fixtures {

struct Answer {
  std::string text;
  int answer_start;  // codepoint offset, as in the official files
};

struct Qa {
  std::string id;
  std::string question;
  std::vector<Answer> answers;
  bool is_impossible = false;
};

struct Paragraph {
  std::string context;
  std::vector<Qa> qas;
};

inline nlohmann::json squad_json(const std::vector<Paragraph>& paragraphs, bool v2 = false) {
  nlohmann::json paras = nlohmann::json::array();
  for (const auto& p : paragraphs) {
    nlohmann::json qas = nlohmann::json::array();
    for (const auto& qa : p.qas) {
      nlohmann::json answers = nlohmann::json::array();
      for (const auto& a : qa.answers)
        answers.push_back({{"text", a.text}, {"answer_start", a.answer_start}});
      nlohmann::json jqa{{"id", qa.id}, {"question", qa.question}, {"answers", answers}};
      if (v2) jqa["is_impossible"] = qa.is_impossible;
      qas.push_back(jqa);
    }
    paras.push_back({{"context", p.context}, {"qas", qas}});
  }
  return nlohmann::json{
      {"version", v2 ? "v2.0" : "1.1"},
      {"data", nlohmann::json::array({{{"title", "fixture"}, {"paragraphs", paras}}})}};
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("mrc_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << content;
  return path;
}

inline std::string write_json(const std::string& path, const nlohmann::json& j) {
  return write_file(path, j.dump());
}

}  // namespace fixtures
