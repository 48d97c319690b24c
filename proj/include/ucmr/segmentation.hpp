#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucmr/encoder.hpp"
#include "ucmr/error.hpp"

namespace ucmr::segmentation {

/// exp(-||u - v||^2 / (2 sigma^2)), in (0, 1].
inline double gaussian_similarity(const Embedding& u, const Embedding& v, double sigma) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "embeddings of dimension " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  if (!(sigma > 0.0)) throw Error(ErrorCode::Validation, "sigma must be positive");
  return std::exp(-(u - v).squaredNorm() / (2.0 * sigma * sigma));
}

struct DissimilaritySeries {
  std::vector<double> scores;  // scores[i] compares sentence i with i + 1
  double sigma = 1.0;
};

struct SubjectSpan {
  int span_id = 0;
  std::vector<int> sentence_ids;

  bool operator==(const SubjectSpan&) const = default;
};

inline DissimilaritySeries dissimilarity_series(std::span<const Embedding> sentences, double sigma) {
  if (sentences.size() < 2) {
    throw Error(ErrorCode::TooFewSentences, "need at least two sentences, got " + std::to_string(sentences.size()));
  }
  DissimilaritySeries s{{}, sigma};
  s.scores.reserve(sentences.size() - 1);
  for (std::size_t i = 0; i + 1 < sentences.size(); ++i) {
    s.scores.push_back(-gaussian_similarity(sentences[i], sentences[i + 1], sigma));
  }
  return s;
}

/// mean + 0.5 * population stddev of the scores.
inline double default_theta(const DissimilaritySeries& s) {
  if (s.scores.empty()) return std::numeric_limits<double>::infinity();
  double n = static_cast<double>(s.scores.size());
  double mean = std::accumulate(s.scores.begin(), s.scores.end(), 0.0) / n;
  double var = 0.0;
  for (double x : s.scores) var += (x - mean) * (x - mean);
  return mean + 0.5 * std::sqrt(var / n);
}

/// Strict local maxima strictly above theta. A missing neighbour counts as
/// satisfied. Boundary i separates sentence i from sentence i + 1.
inline std::vector<int> detect_boundaries(const DissimilaritySeries& s, double theta) {
  std::vector<int> out;
  const auto& x = s.scores;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > theta)) continue;
    if (i > 0 && !(x[i] > x[i - 1])) continue;
    if (i + 1 < x.size() && !(x[i] > x[i + 1])) continue;
    out.push_back(static_cast<int>(i));
  }
  return out;
}

/// Maximal runs between boundaries over sentence positions 0..count-1.
inline std::vector<SubjectSpan> spans_from_boundaries(int count, const std::vector<int>& boundaries) {
  std::vector<SubjectSpan> spans;
  if (count <= 0) return spans;
  SubjectSpan cur{0, {}};
  std::size_t b = 0;
  for (int i = 0; i < count; ++i) {
    cur.sentence_ids.push_back(i);
    while (b < boundaries.size() && boundaries[b] < i) ++b;
    if (b < boundaries.size() && boundaries[b] == i && i + 1 < count) {
      spans.push_back(std::move(cur));
      cur = SubjectSpan{static_cast<int>(spans.size()), {}};
    }
  }
  spans.push_back(std::move(cur));
  return spans;
}

struct Segmentation {
  std::vector<SubjectSpan> spans;
  std::vector<int> boundaries;
  double theta = 0.0;
};

/// theta defaults to default_theta() of the series.
inline Segmentation segment(std::span<const Embedding> sentences, double sigma,
                            std::optional<double> theta = std::nullopt) {
  if (sentences.empty()) throw Error(ErrorCode::TooFewSentences, "cannot segment an empty document");
  Segmentation out;
  if (sentences.size() == 1) {
    out.spans = {SubjectSpan{0, {0}}};
    out.theta = theta.value_or(std::numeric_limits<double>::infinity());
    return out;
  }
  auto series = dissimilarity_series(sentences, sigma);
  out.theta = theta.value_or(default_theta(series));
  out.boundaries = detect_boundaries(series, out.theta);
  out.spans = spans_from_boundaries(static_cast<int>(sentences.size()), out.boundaries);
  return out;
}

inline nlohmann::json to_json(const Segmentation& s) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& sp : s.spans) spans.push_back({{"span_id", sp.span_id}, {"sentence_ids", sp.sentence_ids}});
  nlohmann::json j = {{"spans", spans}, {"boundaries", s.boundaries}};
  // JSON has no infinity; an unreachable threshold is written as null.
  if (std::isfinite(s.theta)) {
    j["theta"] = s.theta;
  } else {
    j["theta"] = nullptr;
  }
  return j;
}

inline Segmentation segmentation_from_json(const nlohmann::json& j) {
  Segmentation s;
  for (const auto& sp : j.at("spans")) {
    s.spans.push_back(SubjectSpan{sp.at("span_id").get<int>(), sp.at("sentence_ids").get<std::vector<int>>()});
  }
  s.boundaries = j.value("boundaries", std::vector<int>{});
  s.theta = j.at("theta").is_null() ? std::numeric_limits<double>::infinity() : j.at("theta").get<double>();
  return s;
}

}  // namespace ucmr::segmentation
