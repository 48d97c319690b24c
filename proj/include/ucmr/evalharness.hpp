#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucmr/corpus.hpp"
#include "ucmr/error.hpp"
#include "ucmr/text.hpp"

namespace ucmr::eval {

enum class Class { Yes, No, Inquire, Irrelevant };

inline constexpr std::array<Class, 4> kClasses = {Class::Yes, Class::No, Class::Inquire, Class::Irrelevant};

inline std::string_view to_string(Class c) {
  switch (c) {
    case Class::Yes: return "yes";
    case Class::No: return "no";
    case Class::Inquire: return "inquire";
    case Class::Irrelevant: return "irrelevant";
  }
  return "irrelevant";
}

inline Class class_from_string(std::string_view s) {
  for (Class c : kClasses) {
    if (to_string(c) == s) return c;
  }
  throw Error(ErrorCode::Validation, "unknown class '" + std::string(s) + "'");
}

struct PredictionRecord {
  std::string example_id;
  Class gold_class = Class::Irrelevant;
  Class pred_class = Class::Irrelevant;
  std::optional<std::string> gold_question;
  std::optional<std::string> pred_question;
};

inline double micro_accuracy(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw Error(ErrorCode::EmptyInput, "no prediction records");
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.gold_class == r.pred_class ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

struct ClassTally {
  int total = 0;
  int correct = 0;
};

inline std::map<Class, ClassTally> per_class(const std::vector<PredictionRecord>& records) {
  std::map<Class, ClassTally> t;
  for (const auto& r : records) {
    auto& e = t[r.gold_class];
    ++e.total;
    e.correct += r.gold_class == r.pred_class ? 1 : 0;
  }
  return t;
}

/// Mean per-class accuracy over classes that occur in gold.
inline double macro_accuracy(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw Error(ErrorCode::EmptyInput, "no prediction records");
  double sum = 0.0;
  auto tally = per_class(records);
  for (const auto& [cls, e] : tally) sum += static_cast<double>(e.correct) / e.total;
  return sum / static_cast<double>(tally.size());
}

/// Sentence BLEU against one reference: clipped n-gram precisions for
/// n = 1..max_n, geometric mean, brevity penalty. Any zero precision
/// (including a candidate shorter than n) gives 0; no smoothing.
inline double bleu(const std::vector<std::string>& candidate, const std::vector<std::string>& reference, int max_n) {
  if (reference.empty()) throw Error(ErrorCode::EmptyReference, "BLEU reference is empty");
  if (max_n < 1) throw Error(ErrorCode::Validation, "BLEU order must be positive");
  if (candidate.empty()) return 0.0;
  auto ngrams = [](const std::vector<std::string>& toks, int n) {
    std::map<std::vector<std::string>, int> counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
      ++counts[std::vector<std::string>(toks.begin() + static_cast<long>(i), toks.begin() + static_cast<long>(i) + n)];
    }
    return counts;
  };
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    auto cand = ngrams(candidate, n);
    auto ref = ngrams(reference, n);
    int matched = 0, total = 0;
    for (const auto& [g, c] : cand) {
      total += c;
      if (auto it = ref.find(g); it != ref.end()) matched += std::min(c, it->second);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / total);
  }
  const double c = static_cast<double>(candidate.size()), r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / max_n);
}

inline std::vector<std::string> bleu_tokens(std::string_view s) { return text::word_tokens(s); }

// ---------------------------------------------------------------------------
// Datasets and end-to-end runs

struct DialogExample {
  std::string id;
  std::string rule_text;
  std::string scenario;
  std::string question;
  std::vector<corpus::QaPair> follow_ups;
  Class gold_class = Class::Irrelevant;
  std::optional<std::string> gold_question;
};

inline DialogExample example_from_json(const nlohmann::json& j) {
  DialogExample e;
  e.id = j.at("id").get<std::string>();
  e.rule_text = j.value("rule_text", "");
  e.scenario = j.value("scenario", "");
  e.question = j.at("question").get<std::string>();
  for (const auto& f : j.value("follow_ups", nlohmann::json::array())) {
    e.follow_ups.emplace_back(f.at("q").get<std::string>(), f.at("a").get<std::string>());
  }
  e.gold_class = class_from_string(j.at("gold_class").get<std::string>());
  if (j.contains("gold_question") && !j["gold_question"].is_null()) e.gold_question = j["gold_question"].get<std::string>();
  if ((e.gold_class == Class::Inquire) != e.gold_question.has_value()) {
    throw Error(ErrorCode::Validation, "example " + e.id + ": gold_question must be present iff gold_class is inquire");
  }
  return e;
}

inline nlohmann::json to_json(const DialogExample& e) {
  nlohmann::json fu = nlohmann::json::array();
  for (const auto& [q, a] : e.follow_ups) fu.push_back({{"q", q}, {"a", a}});
  return {{"id", e.id},
          {"rule_text", e.rule_text},
          {"scenario", e.scenario},
          {"question", e.question},
          {"follow_ups", fu},
          {"gold_class", std::string(to_string(e.gold_class))},
          {"gold_question", e.gold_question ? nlohmann::json(*e.gold_question) : nlohmann::json(nullptr)}};
}

inline std::vector<DialogExample> read_dataset(std::istream& in) {
  std::vector<DialogExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::Validation, "dataset line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

inline std::vector<DialogExample> load_dataset(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::Validation, "cannot open " + p.string());
  return read_dataset(in);
}

struct Prediction {
  Class cls = Class::Irrelevant;
  std::optional<std::string> question;
};

using Pipeline = std::function<Prediction(const DialogExample&)>;

inline Prediction oracle_prediction(const DialogExample& e) { return {e.gold_class, e.gold_question}; }

inline Pipeline constant_pipeline(Class c) {
  return [c](const DialogExample&) { return Prediction{c, std::nullopt}; };
}

struct Report {
  std::vector<PredictionRecord> records;
  double micro = 0.0;
  double macro = 0.0;
  std::map<Class, ClassTally> per_class;
  std::optional<double> bleu1, bleu4;
  int bleu_pairs = 0;
};

inline constexpr const char* kBleuConvention =
    "sentence-level BLEU, single reference, word tokens, no smoothing (zero precision gives 0), "
    "averaged over examples whose gold and predicted class are both inquire";

inline Report run_e2e_eval(const std::vector<DialogExample>& dataset, const Pipeline& pipeline) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyInput, "empty dataset");
  Report rep;
  double b1 = 0.0, b4 = 0.0;
  for (const auto& ex : dataset) {
    Prediction p;
    try {
      p = pipeline(ex);
    } catch (const Error& err) {
      throw Error(err.code(), "example " + ex.id + ": " + err.what());
    }
    PredictionRecord r{ex.id, ex.gold_class, p.cls, ex.gold_question, p.cls == Class::Inquire ? p.question : std::nullopt};
    if (r.gold_class == Class::Inquire && r.pred_class == Class::Inquire && r.gold_question) {
      auto ref = bleu_tokens(*r.gold_question);
      auto cand = r.pred_question ? bleu_tokens(*r.pred_question) : std::vector<std::string>{};
      b1 += bleu(cand, ref, 1);
      b4 += bleu(cand, ref, 4);
      ++rep.bleu_pairs;
    }
    rep.records.push_back(std::move(r));
  }
  rep.micro = micro_accuracy(rep.records);
  rep.macro = macro_accuracy(rep.records);
  rep.per_class = per_class(rep.records);
  if (rep.bleu_pairs > 0) {
    rep.bleu1 = b1 / rep.bleu_pairs;
    rep.bleu4 = b4 / rep.bleu_pairs;
  }
  return rep;
}

inline nlohmann::json to_json(const Report& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [cls, t] : r.per_class) {
    pc[std::string(to_string(cls))] = {{"total", t.total}, {"correct", t.correct},
                                       {"accuracy", static_cast<double>(t.correct) / t.total}};
  }
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : r.records) {
    preds.push_back({{"id", p.example_id},
                     {"gold", std::string(to_string(p.gold_class))},
                     {"pred", std::string(to_string(p.pred_class))},
                     {"pred_question", p.pred_question ? nlohmann::json(*p.pred_question) : nlohmann::json(nullptr)}});
  }
  return {{"bleu_convention", kBleuConvention},
          {"examples", r.records.size()},
          {"micro", r.micro},
          {"macro", r.macro},
          {"per_class", pc},
          {"bleu1", opt(r.bleu1)},
          {"bleu4", opt(r.bleu4)},
          {"bleu_pairs", r.bleu_pairs},
          {"predictions", preds}};
}

}  // namespace ucmr::eval
