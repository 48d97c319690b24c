#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucmr/error.hpp"
#include "ucmr/text.hpp"

namespace ucmr::corpus {

enum class Origin { RuleText, Scenario, UserQuestion, InquiryResponse };

inline std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::RuleText: return "rule_text";
    case Origin::Scenario: return "scenario";
    case Origin::UserQuestion: return "user_question";
    case Origin::InquiryResponse: return "inquiry_response";
  }
  return "rule_text";
}

inline Origin origin_from_string(std::string_view s) {
  if (s == "rule_text") return Origin::RuleText;
  if (s == "scenario") return Origin::Scenario;
  if (s == "user_question") return Origin::UserQuestion;
  if (s == "inquiry_response") return Origin::InquiryResponse;
  throw Error(ErrorCode::Validation, "unknown sentence origin '" + std::string(s) + "'");
}

struct Sentence {
  int id = 0;
  std::string text;
  Origin origin = Origin::RuleText;

  bool operator==(const Sentence&) const = default;
};

struct BulletBlock {
  std::string lead_in;
  std::vector<std::string> bullets;
};

struct SourceDoc {
  std::string source_id;
  std::string body;
  std::vector<BulletBlock> bullet_blocks;
};

// ---------------------------------------------------------------------------
// Sentence splitting

/// Splitter interface so a model-backed splitter can replace the rule-based one.
class SentenceSplitter {
 public:
  virtual ~SentenceSplitter() = default;
  virtual std::vector<std::string> split(std::string_view text) const = 0;
};

class RuleBasedSplitter final : public SentenceSplitter {
 public:
  // Tokens (lowercased, including their final period) after which a period
  // does not end a sentence.
  static constexpr std::array<std::string_view, 24> kAbbreviations = {
      "dr.", "mr.", "mrs.", "ms.", "prof.", "sr.", "jr.", "st.",
      "e.g.", "i.e.", "vs.", "cf.", "approx.", "dept.", "inc.", "ltd.",
      "co.", "fig.", "mt.", "ft.", "jan.", "feb.", "aug.", "sept."};

  std::vector<std::string> split(std::string_view text) const override {
    std::vector<std::string> out;
    std::size_t start = 0;
    const std::size_t n = text.size();
    std::size_t i = 0;
    while (i < n) {
      char c = text[i];
      if (c != '.' && c != '!' && c != '?') {
        ++i;
        continue;
      }
      std::size_t end = i + 1;
      while (end < n && (text[end] == '.' || text[end] == '!' || text[end] == '?')) ++end;
      while (end < n && (text[end] == '"' || text[end] == '\'' || text[end] == ')' ||
                         text[end] == ']')) {
        ++end;
      }
      if (end < n && !text::is_space(text[end])) {
        i = end;
        continue;
      }
      if (c == '.' && end == i + 1 && suppresses_split(text, start, i, end)) {
        i = end;
        continue;
      }
      auto sentence = text::normalize_space(text.substr(start, end - start));
      if (!sentence.empty()) out.push_back(std::move(sentence));
      start = end;
      i = end;
    }
    auto tail = text::normalize_space(text.substr(std::min(start, n)));
    if (!tail.empty()) out.push_back(std::move(tail));
    return out;
  }

 private:
  static bool suppresses_split(std::string_view text, std::size_t start, std::size_t dot,
                               std::size_t after) {
    std::size_t b = dot;
    while (b > start && !text::is_space(text[b - 1])) --b;
    std::string token = text::to_lower(text.substr(b, dot + 1 - b));
    while (!token.empty() && (token.front() == '(' || token.front() == '"' || token.front() == '\'')) {
      token.erase(token.begin());
    }
    if (std::find(kAbbreviations.begin(), kAbbreviations.end(), token) != kAbbreviations.end()) {
      return true;
    }
    // "No. 5" / "no. 12": numbering, not an answer.
    if (token == "no.") {
      std::size_t j = after;
      while (j < text.size() && text::is_space(text[j])) ++j;
      return j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]));
    }
    return false;
  }
};

inline std::vector<Sentence> split_sentences(std::string_view text, Origin origin = Origin::RuleText,
                                             const SentenceSplitter& splitter = RuleBasedSplitter{}) {
  std::vector<Sentence> out;
  for (auto& s : splitter.split(text)) {
    out.push_back(Sentence{static_cast<int>(out.size()), std::move(s), origin});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rule document construction

namespace detail {

inline bool has_terminal_punct(std::string_view line) {
  if (line.empty()) return false;
  char c = line.back();
  if (c == '"' || c == '\'' || c == ')') {
    if (line.size() < 2) return false;
    c = line[line.size() - 2];
  }
  return c == '.' || c == '!' || c == '?';
}

inline bool is_heading(std::string_view line) {
  return !has_terminal_punct(line) && text::split_whitespace(line).size() <= 6;
}

inline bool is_bullet(std::string_view line) { return line.size() >= 2 && line.substr(0, 2) == "- "; }

inline std::string bullet_sentence(std::string_view lead_in, std::string_view bullet) {
  std::string b = text::normalize_space(bullet);
  while (!b.empty() && (b.back() == '.' || b.back() == ';' || b.back() == ',' || b.back() == '!' ||
                        b.back() == '?')) {
    b.pop_back();
  }
  if (b.empty()) return {};
  std::string lead = text::normalize_space(lead_in);
  return lead.empty() ? b + "." : lead + " " + b + ".";
}

inline void push_texts(std::vector<std::string>& texts, std::vector<std::string> more) {
  for (auto& t : more) texts.push_back(std::move(t));
}

/// Sentence texts of one source body, honouring headings and bullet blocks.
inline std::vector<std::string> body_sentences(std::string_view body, const SentenceSplitter& splitter) {
  std::vector<std::string> lines;
  {
    std::string line;
    std::istringstream in{std::string(body)};
    while (std::getline(in, line)) lines.push_back(text::trim(line));
  }
  std::vector<std::string> texts;
  std::string paragraph;
  auto flush = [&] {
    push_texts(texts, splitter.split(paragraph));
    paragraph.clear();
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) {
      flush();
      continue;
    }
    if (!line.empty() && line.back() == ':' && i + 1 < lines.size() && is_bullet(lines[i + 1])) {
      flush();
      std::size_t j = i + 1;
      for (; j < lines.size() && is_bullet(lines[j]); ++j) {
        auto s = bullet_sentence(line, std::string_view(lines[j]).substr(2));
        if (!s.empty()) texts.push_back(std::move(s));
      }
      i = j - 1;
      continue;
    }
    if (is_bullet(line)) {
      flush();
      auto s = bullet_sentence("", std::string_view(line).substr(2));
      if (!s.empty()) texts.push_back(std::move(s));
      continue;
    }
    // A short unpunctuated line is a heading when it does not continue an
    // unfinished sentence.
    std::string_view pending = paragraph;
    while (!pending.empty() && text::is_space(pending.back())) pending.remove_suffix(1);
    if (is_heading(line) && (pending.empty() || has_terminal_punct(pending))) {
      flush();
      continue;
    }
    paragraph += line;
    paragraph += ' ';
  }
  flush();
  return texts;
}

}  // namespace detail

inline std::vector<Sentence> build_rule_document(const std::vector<SourceDoc>& sources,
                                                 const SentenceSplitter& splitter = RuleBasedSplitter{}) {
  if (sources.empty()) throw Error(ErrorCode::AllSourcesEmpty, "no sources given");
  bool any = false;
  for (const auto& src : sources) {
    if (!text::normalize_space(src.body).empty() || !src.bullet_blocks.empty()) any = true;
  }
  if (!any) throw Error(ErrorCode::AllSourcesEmpty, "every source body is empty");

  std::vector<Sentence> doc;
  auto emit = [&](std::string t) {
    doc.push_back(Sentence{static_cast<int>(doc.size()), std::move(t), Origin::RuleText});
  };
  for (const auto& src : sources) {
    for (auto& t : detail::body_sentences(src.body, splitter)) emit(std::move(t));
    for (const auto& block : src.bullet_blocks) {
      for (const auto& b : block.bullets) {
        auto s = detail::bullet_sentence(block.lead_in, b);
        if (!s.empty()) emit(std::move(s));
      }
    }
  }
  return doc;
}

using QaPair = std::pair<std::string, std::string>;

inline std::string inquiry_response_text(std::string_view inquiry, std::string_view response) {
  return text::normalize_space(std::string(inquiry) + " " + std::string(response));
}

inline std::vector<Sentence> append_dialog_sentences(std::vector<Sentence> doc, std::string_view scenario,
                                                     std::string_view question,
                                                     const std::vector<QaPair>& qa_pairs,
                                                     const SentenceSplitter& splitter = RuleBasedSplitter{}) {
  auto emit = [&](std::string t, Origin o) {
    if (t.empty()) return;
    doc.push_back(Sentence{static_cast<int>(doc.size()), std::move(t), o});
  };
  for (auto& s : splitter.split(scenario)) emit(std::move(s), Origin::Scenario);
  emit(text::normalize_space(question), Origin::UserQuestion);
  for (const auto& [inquiry, response] : qa_pairs) {
    emit(inquiry_response_text(inquiry, response), Origin::InquiryResponse);
  }
  return doc;
}

// ---------------------------------------------------------------------------
// I/O

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::Validation, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// One SourceDoc per *.txt file, ordered by file name.
inline std::vector<SourceDoc> load_sources(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::Validation, dir.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SourceDoc> out;
  for (const auto& f : files) out.push_back(SourceDoc{f.stem().string(), read_file(f), {}});
  return out;
}

inline nlohmann::json to_json(const Sentence& s) {
  return {{"id", s.id}, {"text", s.text}, {"origin", std::string(to_string(s.origin))}};
}

inline Sentence sentence_from_json(const nlohmann::json& j) {
  return Sentence{j.at("id").get<int>(), j.at("text").get<std::string>(),
                  origin_from_string(j.at("origin").get<std::string>())};
}

inline void write_jsonl(std::ostream& out, const std::vector<Sentence>& doc) {
  for (const auto& s : doc) out << to_json(s).dump() << '\n';
}

inline std::vector<Sentence> read_jsonl(std::istream& in) {
  std::vector<Sentence> doc;
  std::string line;
  while (std::getline(in, line)) {
    if (text::trim(line).empty()) continue;
    doc.push_back(sentence_from_json(nlohmann::json::parse(line)));
    if (doc.back().id != static_cast<int>(doc.size()) - 1) {
      throw Error(ErrorCode::Validation, "sentence ids must be consecutive from 0");
    }
  }
  return doc;
}

inline std::vector<Sentence> load_corpus(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::Validation, "cannot open " + p.string());
  return read_jsonl(in);
}

}  // namespace ucmr::corpus
