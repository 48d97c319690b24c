#pragma once

#include <algorithm>
#include <array>
#include <iterator>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucmr/corpus.hpp"
#include "ucmr/encoder.hpp"
#include "ucmr/error.hpp"
#include "ucmr/text.hpp"

namespace ucmr::policy {

using IndexSet = std::set<int>;

enum class Verdict { Irrelevant, Definitive, Inquire };
enum class AnswerClass { Yes, No, NeedInquiry };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Irrelevant: return "irrelevant";
    case Verdict::Definitive: return "definitive";
    case Verdict::Inquire: return "inquire";
  }
  return "irrelevant";
}

inline Verdict verdict_from_string(std::string_view s) {
  if (s == "irrelevant") return Verdict::Irrelevant;
  if (s == "definitive") return Verdict::Definitive;
  if (s == "inquire") return Verdict::Inquire;
  throw Error(ErrorCode::Validation, "unknown verdict '" + std::string(s) + "'");
}

struct DecisionState {
  std::optional<int> matched_set_index;
  int overlap = 0;
  IndexSet remaining;
  Verdict verdict = Verdict::Irrelevant;

  bool operator==(const DecisionState&) const = default;
};

inline int sim(const IndexSet& r, const IndexSet& p) {
  int n = 0;
  for (int x : r) n += static_cast<int>(p.count(x));
  return n;
}

inline IndexSet set_diff(const IndexSet& r, const IndexSet& p) {
  IndexSet out;
  std::set_difference(r.begin(), r.end(), p.begin(), p.end(), std::inserter(out, out.end()));
  return out;
}

/// Picks the subject with the largest overlap (lowest index on ties).
inline DecisionState decide(const IndexSet& p, const std::vector<IndexSet>& q) {
  if (q.empty()) throw Error(ErrorCode::Validation, "no subject rule sets");
  DecisionState st;
  int best = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    int s = sim(q[i], p);
    if (s > best) {
      best = s;
      st.matched_set_index = static_cast<int>(i);
    }
  }
  if (!st.matched_set_index) return st;
  st.overlap = best;
  st.remaining = set_diff(q[static_cast<std::size_t>(*st.matched_set_index)], p);
  st.verdict = st.remaining.empty() ? Verdict::Definitive : Verdict::Inquire;
  return st;
}

// ---------------------------------------------------------------------------
// Negation

inline constexpr std::array<std::string_view, 7> kNegationCues = {"not", "no", "never", "n't", "cannot", "without", "none"};

struct LexicalTokens {
  std::vector<std::string> cues;
  std::set<std::string> content;
};

/// Whitespace tokens with surrounding punctuation stripped. A "-n't"
/// suffix counts as a cue and leaves its stem as a content token.
inline LexicalTokens lexical_tokens(std::string_view sentence) {
  LexicalTokens out;
  for (auto raw : text::split_whitespace(text::to_lower(sentence))) {
    std::size_t b = 0, e = raw.size();
    while (b < e && !text::is_word_char(raw[b])) ++b;
    while (e > b && !text::is_word_char(raw[e - 1])) --e;
    std::string tok = raw.substr(b, e - b);
    if (tok.empty()) continue;
    if (tok.size() > 3 && tok.ends_with("n't")) {
      out.cues.push_back("n't");
      tok.resize(tok.size() - 3);
      if (tok == "ca") tok = "can";
      if (tok == "wo") tok = "will";
      out.content.insert(tok);
      continue;
    }
    if (std::find(kNegationCues.begin(), kNegationCues.end(), tok) != kNegationCues.end()) {
      out.cues.push_back(tok);
      continue;
    }
    out.content.insert(tok);
  }
  return out;
}

/// |A ∩ B| / min(|A|, |B|) over non-cue content tokens; 0 when either is empty.
inline double content_overlap(const LexicalTokens& a, const LexicalTokens& b) {
  if (a.content.empty() || b.content.empty()) return 0.0;
  std::size_t shared = 0;
  for (const auto& t : a.content) shared += b.content.count(t);
  return static_cast<double>(shared) / static_cast<double>(std::min(a.content.size(), b.content.size()));
}

struct NegationVerdict {
  std::pair<int, int> pair{0, 0};
  bool is_negation = false;
  std::optional<std::string> cue;
};

class NegationClassifier {
 public:
  virtual ~NegationClassifier() = default;
  virtual NegationVerdict classify(const corpus::Sentence& a, const corpus::Sentence& b) const = 0;
};

/// Exactly one side carries a cue and the content overlap is at least
/// `min_overlap`.
class LexicalNegationClassifier final : public NegationClassifier {
 public:
  explicit LexicalNegationClassifier(double min_overlap = 0.5) : min_overlap_(min_overlap) {}

  NegationVerdict classify(const corpus::Sentence& a, const corpus::Sentence& b) const override {
    NegationVerdict v;
    v.pair = {a.id, b.id};
    auto ta = lexical_tokens(a.text), tb = lexical_tokens(b.text);
    if (ta.cues.empty() == tb.cues.empty()) return v;
    if (content_overlap(ta, tb) < min_overlap_) return v;
    v.is_negation = true;
    v.cue = ta.cues.empty() ? tb.cues.front() : ta.cues.front();
    return v;
  }

 private:
  double min_overlap_;
};

/// Trained pair classifier over encode_pair embeddings: logistic score
/// wᵀ·e(a [SEP] b) + bias > 0. The cue reported is the lexical one, if any.
class PairEmbeddingClassifier final : public NegationClassifier {
 public:
  PairEmbeddingClassifier(std::shared_ptr<const encoder::Encoder> enc, Embedding weights, double bias)
      : enc_(std::move(enc)), w_(std::move(weights)), bias_(bias) {
    if (w_.size() != enc_->dim()) throw Error(ErrorCode::DimensionMismatch, "classifier weights do not match encoder");
  }

  NegationVerdict classify(const corpus::Sentence& a, const corpus::Sentence& b) const override {
    NegationVerdict v;
    v.pair = {a.id, b.id};
    v.is_negation = w_.dot(enc_->encode_pair(a.text, b.text)) + bias_ > 0.0;
    if (v.is_negation) {
      auto ta = lexical_tokens(a.text), tb = lexical_tokens(b.text);
      if (!ta.cues.empty()) v.cue = ta.cues.front();
      else if (!tb.cues.empty()) v.cue = tb.cues.front();
    }
    return v;
  }

 private:
  std::shared_ptr<const encoder::Encoder> enc_;
  Embedding w_;
  double bias_;
};

inline NegationVerdict detect_negation(const corpus::Sentence& a, const corpus::Sentence& b,
                                       const NegationClassifier& classifier) {
  if (text::trim(a.text).empty() || text::trim(b.text).empty()) {
    throw Error(ErrorCode::Validation, "negation check needs two non-empty sentences");
  }
  return classifier.classify(a, b);
}

// ---------------------------------------------------------------------------
// Answer

/// Member sentences of one universe rule.
struct RuleSentences {
  int rule_index = 0;
  std::vector<corpus::Sentence> members;
};

/// History sentence sharing the most content tokens with the rule's
/// members; later sentences win ties.
inline const corpus::Sentence* paired_history_sentence(const RuleSentences& rule,
                                                       const std::vector<corpus::Sentence>& history) {
  const corpus::Sentence* best = nullptr;
  double best_score = -1.0;
  for (const auto& h : history) {
    auto th = lexical_tokens(h.text);
    double score = 0.0;
    for (const auto& m : rule.members) score = std::max(score, content_overlap(th, lexical_tokens(m.text)));
    if (score >= best_score) {
      best_score = score;
      best = &h;
    }
  }
  return best;
}

struct AnswerResult {
  AnswerClass answer = AnswerClass::Yes;
  std::vector<NegationVerdict> verdicts;
};

/// `paired_rules` are the matched subject's rules considered entailed.
inline AnswerResult answer(const DecisionState& state, const std::vector<RuleSentences>& paired_rules,
                           const std::vector<corpus::Sentence>& history, const NegationClassifier& classifier) {
  if (state.verdict == Verdict::Irrelevant) throw Error(ErrorCode::InvalidState, "answer called on an irrelevant decision");
  AnswerResult r;
  bool negated = false;
  for (const auto& rule : paired_rules) {
    const corpus::Sentence* h = paired_history_sentence(rule, history);
    if (!h) continue;
    for (const auto& m : rule.members) {
      auto v = detect_negation(*h, m, classifier);
      negated = negated || v.is_negation;
      r.verdicts.push_back(std::move(v));
    }
  }
  if (negated) r.answer = AnswerClass::No;
  else r.answer = state.remaining.empty() ? AnswerClass::Yes : AnswerClass::NeedInquiry;
  return r;
}

inline nlohmann::json decision_json(const DecisionState& st, const std::vector<std::string>& rule_ids) {
  nlohmann::json remaining = nlohmann::json::array();
  for (int i : st.remaining) remaining.push_back(rule_ids.at(static_cast<std::size_t>(i)));
  return {{"verdict", std::string(to_string(st.verdict))},
          {"matched_subject", st.matched_set_index ? nlohmann::json(*st.matched_set_index) : nlohmann::json(nullptr)},
          {"overlap", st.overlap},
          {"remaining_rule_ids", remaining}};
}

}  // namespace ucmr::policy
