#pragma once

#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucmr/bundle.hpp"
#include "ucmr/corpus.hpp"
#include "ucmr/dialog_policy.hpp"
#include "ucmr/entailment_gan.hpp"
#include "ucmr/error.hpp"
#include "ucmr/evalharness.hpp"
#include "ucmr/question_gen.hpp"

namespace ucmr::dialog {

enum class Role { System, User };
enum class Kind { Answer, Inquiry, UserMessage };

inline std::string_view to_string(Role r) { return r == Role::System ? "system" : "user"; }

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Answer: return "answer";
    case Kind::Inquiry: return "inquiry";
    case Kind::UserMessage: return "user_message";
  }
  return "answer";
}

struct Turn {
  Role role = Role::System;
  Kind kind = Kind::Answer;
  std::string text;
  /// Wire class of a system turn: yes, no, inquire or irrelevant.
  std::optional<std::string> cls;
  std::optional<nlohmann::json> decision;
};

inline nlohmann::json to_json(const Turn& t) {
  nlohmann::json j = {{"role", std::string(to_string(t.role))}, {"kind", std::string(to_string(t.kind))}, {"text", t.text}};
  j["class"] = t.cls ? nlohmann::json(*t.cls) : nlohmann::json(nullptr);
  j["decision_snapshot"] = t.decision ? *t.decision : nlohmann::json(nullptr);
  return j;
}

struct DialogState {
  std::string scenario;
  std::string question;
  std::vector<corpus::QaPair> qa;
  /// Rules seen as entailed at any turn, plus every rule already asked about.
  std::set<int> covered;
  std::set<int> asked;
  std::set<int> predicted;
  std::optional<int> subject;
  std::optional<int> pending_rule;
  std::string pending_question;
  std::optional<eval::Class> outcome;
  policy::DecisionState decision;

  bool awaiting_answer() const { return pending_rule.has_value(); }
  bool finished() const { return outcome.has_value() && *outcome != eval::Class::Inquire; }
};

inline std::vector<std::string> ids_of(const std::set<int>& s, const std::vector<std::string>& rule_ids) {
  std::vector<std::string> out;
  for (int i : s) out.push_back(rule_ids.at(static_cast<std::size_t>(i)));
  return out;
}

inline nlohmann::json to_json(const DialogState& st, const std::vector<std::string>& rule_ids) {
  nlohmann::json qa = nlohmann::json::array();
  for (const auto& [q, a] : st.qa) qa.push_back({{"q", q}, {"a", a}});
  return {{"scenario", st.scenario},
          {"question", st.question},
          {"follow_ups", qa},
          {"predicted_rule_ids", ids_of(st.predicted, rule_ids)},
          {"covered_rule_ids", ids_of(st.covered, rule_ids)},
          {"asked_rule_ids", ids_of(st.asked, rule_ids)},
          {"matched_subject", st.subject ? nlohmann::json(*st.subject) : nlohmann::json(nullptr)},
          {"overlap", st.decision.overlap},
          {"remaining_rule_ids", ids_of(st.decision.remaining, rule_ids)},
          {"pending_rule_id", st.pending_rule ? nlohmann::json(rule_ids.at(static_cast<std::size_t>(*st.pending_rule)))
                                              : nlohmann::json(nullptr)},
          {"outcome", st.outcome ? nlohmann::json(std::string(eval::to_string(*st.outcome))) : nlohmann::json(nullptr)}};
}

/// Runs `f`, rethrowing model failures as PipelineError tagged with `stage`.
/// Validation errors describe the caller's input and pass through.
template <class F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Validation) throw;
    throw Error(ErrorCode::PipelineError, std::string(stage) + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::PipelineError, std::string(stage) + ": " + e.what());
  }
}

class Engine {
 public:
  explicit Engine(std::shared_ptr<const bundle::Bundle> b)
      : bundle_(std::move(b)), negation_(bundle_->config.negation_min_overlap) {
    if (!bundle_->model_pipeline() || !bundle_->generator) {
      throw Error(ErrorCode::Validation, "bundle '" + bundle_->name + "' has no trained model pipeline");
    }
    for (const auto& s : bundle_->universe.subjects) subjects_.emplace_back(s.begin(), s.end());
    rule_ids_ = bundle_->rule_ids();
  }

  const bundle::Bundle& bundle() const { return *bundle_; }
  const std::vector<std::string>& rule_ids() const { return rule_ids_; }

  static Turn opening_turn(const DialogState& st) {
    return {Role::User, Kind::UserMessage, text::normalize_space(st.scenario + " " + st.question), std::nullopt, std::nullopt};
  }

  Turn start(DialogState& st, std::string scenario, std::string question) const {
    if (text::trim(question).empty()) throw Error(ErrorCode::Validation, "question must not be empty");
    st = DialogState{};
    st.scenario = std::move(scenario);
    st.question = std::move(question);
    return step(st);
  }

  Turn respond(DialogState& st, const std::string& reply) const {
    if (!st.awaiting_answer()) throw Error(ErrorCode::NotAwaitingAnswer, "no open inquiry");
    if (text::trim(reply).empty()) throw Error(ErrorCode::Validation, "answer must not be empty");
    st.qa.emplace_back(st.pending_question, reply);
    st.asked.insert(*st.pending_rule);
    st.pending_rule.reset();
    st.pending_question.clear();
    return step(st);
  }

  /// Replays a dataset example turn by turn: each recorded follow-up answers
  /// the open inquiry under its recorded wording, and the last turn is the
  /// prediction.
  eval::Prediction evaluate(const eval::DialogExample& ex) const {
    DialogState st;
    Turn t = start(st, ex.scenario, ex.question);
    for (const auto& [q, a] : ex.follow_ups) {
      if (st.awaiting_answer()) {
        st.pending_question = q;
        t = respond(st, a);
      } else {
        st.qa.emplace_back(q, a);
        t = step(st);
      }
    }
    eval::Prediction p{*st.outcome, std::nullopt};
    if (t.kind == Kind::Inquiry) p.question = t.text;
    return p;
  }

 private:
  Turn step(DialogState& st) const {
    const auto& b = *bundle_;
    auto history = corpus::append_dialog_sentences({}, st.scenario, st.question, st.qa);
    if (history.empty()) throw Error(ErrorCode::Validation, "dialog has no sentences");

    st.predicted = run_stage("entailment", [&] {
      return gan::predict_rules(history, *b.encoder, *b.generator, b.config.threshold);
    });
    st.covered.insert(st.predicted.begin(), st.predicted.end());
    st.covered.insert(st.asked.begin(), st.asked.end());

    st.decision = run_stage("decision", [&] {
      if (!st.subject) return policy::decide(st.covered, subjects_);
      policy::DecisionState d;
      const auto& q = subjects_.at(static_cast<std::size_t>(*st.subject));
      d.matched_set_index = st.subject;
      d.overlap = policy::sim(q, st.covered);
      d.remaining = policy::set_diff(q, st.covered);
      d.verdict = d.remaining.empty() ? policy::Verdict::Definitive : policy::Verdict::Inquire;
      return d;
    });

    if (st.decision.verdict == policy::Verdict::Irrelevant) return finish(st, eval::Class::Irrelevant);
    st.subject = st.decision.matched_set_index;

    auto result = run_stage("answer", [&] {
      std::vector<policy::RuleSentences> paired;
      for (int r : subjects_.at(static_cast<std::size_t>(*st.subject))) {
        if (!st.covered.count(r)) continue;
        policy::RuleSentences rs{r, {}};
        for (int sid : b.universe.rules.at(static_cast<std::size_t>(r)).member_sentence_ids) {
          rs.members.push_back(b.corpus.at(static_cast<std::size_t>(sid)));
        }
        paired.push_back(std::move(rs));
      }
      return policy::answer(st.decision, paired, history, negation_);
    });

    if (result.answer == policy::AnswerClass::Yes) return finish(st, eval::Class::Yes);
    if (result.answer == policy::AnswerClass::No) return finish(st, eval::Class::No);

    const int rule = *st.decision.remaining.begin();
    st.pending_question = run_stage("question_generation", [&] {
      return qg::question_for_rule(b.member_texts(rule), b.qg ? &*b.qg : nullptr, *b.encoder, b.config.qg_max_len);
    });
    st.pending_rule = rule;
    st.outcome = eval::Class::Inquire;
    return {Role::System, Kind::Inquiry, st.pending_question, "inquire", snapshot(st)};
  }

  Turn finish(DialogState& st, eval::Class c) const {
    st.outcome = c;
    const std::string cls(eval::to_string(c));
    return {Role::System, Kind::Answer, cls, cls, snapshot(st)};
  }

  nlohmann::json snapshot(const DialogState& st) const {
    auto j = policy::decision_json(st.decision, rule_ids_);
    j["predicted_rule_ids"] = ids_of(st.predicted, rule_ids_);
    j["asked_rule_id"] = st.pending_rule ? nlohmann::json(rule_ids_.at(static_cast<std::size_t>(*st.pending_rule)))
                                         : nlohmann::json(nullptr);
    return j;
  }

  std::shared_ptr<const bundle::Bundle> bundle_;
  policy::LexicalNegationClassifier negation_;
  std::vector<policy::IndexSet> subjects_;
  std::vector<std::string> rule_ids_;
};

/// Evaluation pipeline named by the bundle config.
inline eval::Pipeline make_pipeline(const std::shared_ptr<const bundle::Bundle>& b) {
  const std::string& p = b->config.pipeline;
  if (p == "oracle") return eval::oracle_prediction;
  if (p.starts_with("constant:")) return eval::constant_pipeline(eval::class_from_string(p.substr(9)));
  if (p != "model") throw Error(ErrorCode::Validation, "unknown pipeline '" + p + "'");
  auto engine = std::make_shared<Engine>(b);
  return [engine](const eval::DialogExample& ex) { return engine->evaluate(ex); };
}

}  // namespace ucmr::dialog
