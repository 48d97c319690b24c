#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucmr/corpus.hpp"
#include "ucmr/encoder.hpp"
#include "ucmr/entailment_gan.hpp"
#include "ucmr/error.hpp"
#include "ucmr/question_gen.hpp"
#include "ucmr/segmentation.hpp"
#include "ucmr/spectral_rules.hpp"

// A bundle directory ties one corpus to its artifacts:
//   corpus.jsonl  spans.json  rules.json  gan/gan.json  [qg.ckpt]  config.json

namespace ucmr::bundle {

namespace fs = std::filesystem;

struct BundleConfig {
  encoder::EncoderConfig encoder;
  double seg_sigma = 1.0;
  std::optional<double> seg_theta;
  spectral::SpectralConfig spectral;
  gan::TrainConfig gan;
  double threshold = 0.5;
  double negation_min_overlap = 0.5;
  int qg_max_len = 30;
  /// "model", "oracle" or "constant:<class>".
  std::string pipeline = "model";
};

inline nlohmann::json spectral_json(const spectral::SpectralConfig& c) {
  return {{"sigma", c.sigma},
          {"seed", c.seed},
          {"kmeans_restarts", c.kmeans_restarts},
          {"kmeans_max_iterations", c.kmeans_max_iterations},
          {"merge_cosine", c.merge_cosine},
          {"k_policy", "clamp(round(log2 n), 1, n)"}};
}

inline spectral::SpectralConfig spectral_from_json(const nlohmann::json& j) {
  spectral::SpectralConfig c;
  c.sigma = j.value("sigma", c.sigma);
  c.seed = j.value("seed", c.seed);
  c.kmeans_restarts = j.value("kmeans_restarts", c.kmeans_restarts);
  c.kmeans_max_iterations = j.value("kmeans_max_iterations", c.kmeans_max_iterations);
  c.merge_cosine = j.value("merge_cosine", c.merge_cosine);
  return c;
}

inline nlohmann::json segmentation_json(double sigma, const std::optional<double>& theta) {
  return {{"sigma", sigma}, {"theta", theta ? nlohmann::json(*theta) : nlohmann::json("mean + 0.5 * std")}};
}

inline nlohmann::json to_json(const BundleConfig& c) {
  return {{"encoder", encoder::to_json(c.encoder)},
          {"segmentation", segmentation_json(c.seg_sigma, c.seg_theta)},
          {"spectral", spectral_json(c.spectral)},
          {"gan", gan::to_json(c.gan)},
          {"decision", {{"threshold", c.threshold}, {"negation_min_overlap", c.negation_min_overlap}}},
          {"qg", {{"max_len", c.qg_max_len}}},
          {"pipeline", c.pipeline}};
}

inline BundleConfig config_from_json(const nlohmann::json& j) {
  BundleConfig c;
  if (j.contains("encoder")) c.encoder = encoder::config_from_json(j["encoder"]);
  if (j.contains("segmentation")) {
    const auto& s = j["segmentation"];
    c.seg_sigma = s.value("sigma", c.seg_sigma);
    if (s.contains("theta") && s["theta"].is_number()) c.seg_theta = s["theta"].get<double>();
  }
  if (j.contains("spectral")) c.spectral = spectral_from_json(j["spectral"]);
  if (j.contains("gan")) c.gan = gan::train_config_from_json(j["gan"]);
  if (j.contains("decision")) {
    c.threshold = j["decision"].value("threshold", c.threshold);
    c.negation_min_overlap = j["decision"].value("negation_min_overlap", c.negation_min_overlap);
  }
  if (j.contains("qg")) c.qg_max_len = j["qg"].value("max_len", c.qg_max_len);
  c.pipeline = j.value("pipeline", c.pipeline);
  return c;
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::Validation, "cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Validation, p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::Validation, "cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// Merges `patch` into dir/config.json, creating it with defaults first.
inline void merge_config(const fs::path& dir, const nlohmann::json& patch) {
  const fs::path p = dir / "config.json";
  nlohmann::json cur = fs::exists(p) ? read_json(p) : to_json(BundleConfig{});
  cur.merge_patch(patch);
  write_json(p, cur);
}

inline BundleConfig load_config(const fs::path& dir) {
  const fs::path p = dir / "config.json";
  return fs::exists(p) ? config_from_json(read_json(p)) : BundleConfig{};
}

/// gan/gan.json if present, else the highest step_*.json in gan/.
inline fs::path gan_checkpoint_path(const fs::path& dir) {
  const fs::path gdir = dir / "gan";
  if (fs::exists(gdir / "gan.json")) return gdir / "gan.json";
  std::vector<fs::path> steps;
  if (fs::is_directory(gdir)) {
    for (const auto& e : fs::directory_iterator(gdir)) {
      if (e.path().filename().string().starts_with("step_")) steps.push_back(e.path());
    }
  }
  if (steps.empty()) throw Error(ErrorCode::Validation, "no GAN checkpoint in " + gdir.string());
  return *std::max_element(steps.begin(), steps.end());
}

struct Bundle {
  std::string name;
  fs::path dir;
  BundleConfig config;
  std::vector<corpus::Sentence> corpus;
  spectral::Universe universe;
  std::shared_ptr<const encoder::Encoder> encoder;
  std::optional<gan::Generator> generator;
  std::optional<qg::QgModel> qg;

  bool model_pipeline() const { return config.pipeline == "model"; }

  std::vector<std::string> rule_ids() const {
    std::vector<std::string> ids;
    for (const auto& r : universe.rules) ids.push_back(r.rule_id);
    return ids;
  }

  std::vector<std::string> member_texts(int rule_index) const {
    std::vector<std::string> out;
    for (int sid : universe.rules.at(static_cast<std::size_t>(rule_index)).member_sentence_ids) {
      out.push_back(corpus.at(static_cast<std::size_t>(sid)).text);
    }
    return out;
  }
};

inline std::vector<Embedding> embed_corpus(const std::vector<corpus::Sentence>& doc, const encoder::Encoder& enc) {
  std::vector<std::string> texts;
  for (const auto& s : doc) texts.push_back(s.text);
  return enc.encode_all(texts);
}

inline spectral::Universe load_universe(const fs::path& rules_path, const std::vector<corpus::Sentence>& doc,
                                        const encoder::Encoder& enc) {
  auto emb = embed_corpus(doc, enc);
  return spectral::universe_from_json(read_json(rules_path), emb);
}

/// Loads what the configured pipeline needs. Oracle and constant bundles
/// may consist of config.json alone.
inline std::shared_ptr<const Bundle> load_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::UnknownCorpus, "bundle directory " + dir.string() + " not found");
  auto b = std::make_shared<Bundle>();
  b->dir = dir;
  b->name = fs::path(dir).lexically_normal().filename().string();
  if (b->name.empty()) b->name = fs::path(dir).lexically_normal().parent_path().filename().string();
  b->config = load_config(dir);
  if (!b->model_pipeline()) return b;

  b->encoder = encoder::make_encoder(b->config.encoder);
  b->corpus = corpus::load_corpus(dir / "corpus.jsonl");
  b->universe = load_universe(dir / "rules.json", b->corpus, *b->encoder);
  auto state = gan::load_checkpoint(gan_checkpoint_path(dir));
  if (state.generator.shape().token_dim != b->encoder->dim()) {
    throw Error(ErrorCode::DimensionMismatch, "GAN token dimension does not match the bundle encoder");
  }
  if (state.generator.shape().universe != b->universe.size()) {
    throw Error(ErrorCode::ShapeMismatch, "GAN universe size " + std::to_string(state.generator.shape().universe) +
                                              " does not match rules.json (" + std::to_string(b->universe.size()) + ")");
  }
  b->generator = std::move(state.generator);
  if (fs::exists(dir / "qg.ckpt")) {
    b->qg = qg::load_qg(dir / "qg.ckpt");
    if (b->qg->decoder.shape().token_dim != b->encoder->dim()) {
      throw Error(ErrorCode::DimensionMismatch, "question generator does not match the bundle encoder");
    }
  }
  return b;
}

/// Per subject, in document order: the whole span labelled with its rule
/// set, then each of its sentences labelled with its own rule.
inline std::vector<gan::Example> training_examples(const std::vector<corpus::Sentence>& doc,
                                                   const spectral::Universe& u, const encoder::Encoder& enc) {
  std::vector<gan::Example> out;
  for (std::size_t i = 0; i < u.subjects.size(); ++i) {
    std::vector<std::string> texts;
    for (int sid : u.subject_sentences[i]) texts.push_back(doc.at(static_cast<std::size_t>(sid)).text);
    if (texts.empty()) continue;
    out.push_back({encoder::encode_token_sequence(enc, texts), gan::multi_hot(u.subjects[i], u.size())});
    for (int sid : u.subject_sentences[i]) {
      auto it = u.sentence_rule.find(sid);
      if (it == u.sentence_rule.end()) continue;
      out.push_back({enc.encode_tokens(doc.at(static_cast<std::size_t>(sid)).text), gan::multi_hot({it->second}, u.size())});
    }
  }
  return out;
}

}  // namespace ucmr::bundle
