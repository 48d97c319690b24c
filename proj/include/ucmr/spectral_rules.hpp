#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ucmr/encoder.hpp"
#include "ucmr/error.hpp"
#include "ucmr/segmentation.hpp"
#include "ucmr/text.hpp"

namespace ucmr::spectral {

/// Fully connected similarity graph, one vertex per sentence.
struct WeightedGraph {
  Eigen::MatrixXd weights;  // symmetric, zero diagonal, entries in [0, 1]

  int size() const { return static_cast<int>(weights.rows()); }
};

using Cluster = std::vector<int>;

struct Rule {
  std::string rule_id;
  std::vector<int> member_sentence_ids;  // sorted ascending
  Embedding centroid;
  int subject_span_id = 0;
};

struct RuleSet {
  int span_id = 0;
  std::vector<Rule> rules;
};

struct SpectralConfig {
  double sigma = 1.0;
  std::uint64_t seed = 17;
  int kmeans_restarts = 5;
  int kmeans_max_iterations = 300;
  double merge_cosine = 0.95;
};

inline WeightedGraph build_similarity_graph(std::span<const Embedding> embeddings, double sigma) {
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  if (n < 1) throw Error(ErrorCode::Validation, "graph needs at least one vertex");
  WeightedGraph g{Eigen::MatrixXd::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double w = segmentation::gaussian_similarity(embeddings[i], embeddings[j], sigma);
      g.weights(i, j) = w;
      g.weights(j, i) = w;
    }
  }
  return g;
}

/// Unnormalised Laplacian D - W.
inline Eigen::MatrixXd laplacian(const WeightedGraph& g) {
  Eigen::VectorXd degree = g.weights.rowwise().sum();
  Eigen::MatrixXd l = -g.weights;
  l.diagonal() += degree;
  return l;
}

/// max(1, round(log2 n)), never above n.
inline int choose_k(int n) {
  if (n < 1) throw Error(ErrorCode::Validation, "choose_k needs n >= 1");
  int k = static_cast<int>(std::lround(std::log2(static_cast<double>(n))));
  return std::clamp(k, 1, n);
}

namespace detail {

struct KMeansResult {
  std::vector<int> labels;
  double inertia = std::numeric_limits<double>::infinity();
};

inline int nearest(const Eigen::MatrixXd& centers, const Eigen::RowVectorXd& y, double* dist = nullptr) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    double d = (centers.row(c) - y).squaredNorm();
    if (d < bd) {  // strict: ties keep the lowest index
      bd = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = bd;
  return best;
}

inline Eigen::MatrixXd kmeanspp_init(const Eigen::MatrixXd& y, int k, std::mt19937_64& rng) {
  const auto n = y.rows();
  Eigen::MatrixXd centers(k, y.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = y.row(pick(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < c; ++j) best = std::min(best, (y.row(i) - centers.row(j)).squaredNorm());
      d2[static_cast<std::size_t>(i)] = best;
      total += best;
    }
    Eigen::Index chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      double acc = 0.0;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (r < acc && d2[static_cast<std::size_t>(i)] > 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(c) = y.row(chosen);
  }
  return centers;
}

inline KMeansResult kmeans_once(const Eigen::MatrixXd& y, int k, int max_iter, std::mt19937_64& rng) {
  const auto n = y.rows();
  Eigen::MatrixXd centers = kmeanspp_init(y, k, rng);
  KMeansResult r;
  r.labels.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int l = nearest(centers, y.row(i));
      if (l != r.labels[static_cast<std::size_t>(i)]) {
        r.labels[static_cast<std::size_t>(i)] = l;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, y.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      int l = r.labels[static_cast<std::size_t>(i)];
      sums.row(l) += y.row(i);
      ++counts[static_cast<std::size_t>(l)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }
  r.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    r.inertia += (y.row(i) - centers.row(r.labels[static_cast<std::size_t>(i)])).squaredNorm();
  }
  return r;
}

}  // namespace detail

/// k-means++ with best-of-restarts by inertia. Clusters are returned sorted
/// by their smallest member; empty clusters are dropped.
inline std::vector<Cluster> kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int restarts = 5,
                                   int max_iter = 300) {
  const auto n = static_cast<int>(points.rows());
  if (k < 1 || k > n) throw Error(ErrorCode::Validation, "k must lie in [1, n]");
  std::mt19937_64 rng(seed);
  detail::KMeansResult best;
  for (int r = 0; r < std::max(1, restarts); ++r) {
    auto res = detail::kmeans_once(points, k, max_iter, rng);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  std::vector<Cluster> clusters(static_cast<std::size_t>(k));
  for (int i = 0; i < n; ++i) clusters[static_cast<std::size_t>(best.labels[static_cast<std::size_t>(i)])].push_back(i);
  std::erase_if(clusters, [](const Cluster& c) { return c.empty(); });
  std::sort(clusters.begin(), clusters.end(), [](const Cluster& a, const Cluster& b) { return a.front() < b.front(); });
  return clusters;
}

/// Eigenvectors of the k smallest Laplacian eigenvalues as columns (n x k).
inline Eigen::MatrixXd spectral_embedding(const WeightedGraph& g, int k) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(laplacian(g));
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::EigensolveFailure, "Laplacian eigensolve did not converge");
  }
  return solver.eigenvectors().leftCols(k);
}

inline std::vector<Cluster> spectral_cluster(const WeightedGraph& g, int k, std::uint64_t seed = 17, int restarts = 5,
                                             int max_iter = 300) {
  const int n = g.size();
  if (k < 1 || k > n) throw Error(ErrorCode::Validation, "k must lie in [1, n]");
  if (k == 1) {
    Cluster all(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    return {all};
  }
  return kmeans(spectral_embedding(g, k), k, seed, restarts, max_iter);
}

inline std::string rule_id_for(const std::vector<int>& sorted_members) {
  std::string key;
  for (int id : sorted_members) key += std::to_string(id) + ",";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(text::fnv1a(key)));
  return buf;
}

inline Rule make_rule(std::vector<int> members, std::span<const Embedding> embeddings, int span_id) {
  std::sort(members.begin(), members.end());
  Embedding centroid = Embedding::Zero(embeddings[static_cast<std::size_t>(members.front())].size());
  for (int id : members) centroid += embeddings[static_cast<std::size_t>(id)];
  centroid /= static_cast<double>(members.size());
  return Rule{rule_id_for(members), std::move(members), std::move(centroid), span_id};
}

/// `embeddings` is indexed by sentence id.
inline RuleSet extract_rules(const segmentation::SubjectSpan& span, std::span<const Embedding> embeddings,
                             const SpectralConfig& cfg = {}) {
  if (span.sentence_ids.empty()) throw Error(ErrorCode::Validation, "span is empty");
  std::vector<Embedding> local;
  for (int id : span.sentence_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= embeddings.size()) {
      throw Error(ErrorCode::Validation, "sentence id " + std::to_string(id) + " has no embedding");
    }
    local.push_back(embeddings[static_cast<std::size_t>(id)]);
  }
  const int n = static_cast<int>(local.size());
  auto clusters = spectral_cluster(build_similarity_graph(local, cfg.sigma), choose_k(n), cfg.seed,
                                   cfg.kmeans_restarts, cfg.kmeans_max_iterations);
  RuleSet out{span.span_id, {}};
  for (const auto& c : clusters) {
    std::vector<int> members;
    for (int v : c) members.push_back(span.sentence_ids[static_cast<std::size_t>(v)]);
    Rule r = make_rule(std::move(members), embeddings, span.span_id);
    bool dup = std::any_of(out.rules.begin(), out.rules.end(), [&](const Rule& x) { return x.rule_id == r.rule_id; });
    if (!dup) out.rules.push_back(std::move(r));
  }
  return out;
}

/// U is the ordered, deduplicated list of rules; subjects[i] holds the
/// sorted U-indices of the i-th rule set (Q).
struct Universe {
  std::vector<Rule> rules;
  std::vector<int> subject_span_ids;
  std::vector<std::vector<int>> subjects;
  std::vector<std::vector<int>> subject_sentences;  // sorted sentence ids of each subject span
  std::map<int, int> sentence_rule;  // sentence id -> U index
  int merges = 0;

  int size() const { return static_cast<int>(rules.size()); }

  int index_of(const std::string& rule_id) const {
    for (std::size_t i = 0; i < rules.size(); ++i) {
      if (rules[i].rule_id == rule_id) return static_cast<int>(i);
    }
    return -1;
  }
};

inline Universe build_universe(const std::vector<RuleSet>& rule_sets, double merge_cosine = 0.95) {
  if (rule_sets.empty()) throw Error(ErrorCode::Validation, "no rule sets");
  Universe u;
  for (const auto& rs : rule_sets) {
    std::vector<int> members, sentences;
    for (const auto& rule : rs.rules) {
      sentences.insert(sentences.end(), rule.member_sentence_ids.begin(), rule.member_sentence_ids.end());
      int idx = u.index_of(rule.rule_id);
      if (idx < 0) {
        for (std::size_t j = 0; j < u.rules.size(); ++j) {
          if (u.rules[j].subject_span_id != rs.span_id && cosine(u.rules[j].centroid, rule.centroid) >= merge_cosine) {
            idx = static_cast<int>(j);
            break;
          }
        }
        if (idx >= 0) ++u.merges;
      } else if (u.rules[static_cast<std::size_t>(idx)].subject_span_id == rs.span_id) {
        continue;
      } else {
        ++u.merges;
      }
      if (idx < 0) {
        idx = u.size();
        u.rules.push_back(rule);
      }
      for (int sid : rule.member_sentence_ids) u.sentence_rule[sid] = idx;
      members.push_back(idx);
    }
    std::sort(members.begin(), members.end());
    members.erase(std::unique(members.begin(), members.end()), members.end());
    std::sort(sentences.begin(), sentences.end());
    u.subject_span_ids.push_back(rs.span_id);
    u.subjects.push_back(std::move(members));
    u.subject_sentences.push_back(std::move(sentences));
  }
  return u;
}

inline nlohmann::json to_json(const Universe& u) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : u.rules) {
    rules.push_back({{"rule_id", r.rule_id}, {"member_sentence_ids", r.member_sentence_ids},
                     {"subject_span_id", r.subject_span_id}});
  }
  nlohmann::json subjects = nlohmann::json::array();
  for (std::size_t i = 0; i < u.subjects.size(); ++i) {
    std::vector<std::string> ids;
    for (int idx : u.subjects[i]) ids.push_back(u.rules[static_cast<std::size_t>(idx)].rule_id);
    subjects.push_back({{"span_id", u.subject_span_ids[i]}, {"rule_ids", ids}, {"sentence_ids", u.subject_sentences[i]}});
  }
  nlohmann::json assignments = nlohmann::json::array();
  for (const auto& [sid, idx] : u.sentence_rule) {
    assignments.push_back({{"sentence_id", sid}, {"rule_id", u.rules[static_cast<std::size_t>(idx)].rule_id}});
  }
  return {{"universe", rules}, {"subjects", subjects}, {"assignments", assignments}};
}

/// Centroids are recomputed from `embeddings` (indexed by sentence id).
inline Universe universe_from_json(const nlohmann::json& j, std::span<const Embedding> embeddings) {
  Universe u;
  for (const auto& r : j.at("universe")) {
    auto members = r.at("member_sentence_ids").get<std::vector<int>>();
    for (int id : members) {
      if (id < 0 || static_cast<std::size_t>(id) >= embeddings.size()) {
        throw Error(ErrorCode::Validation, "rule member " + std::to_string(id) + " outside corpus");
      }
    }
    if (members.empty()) throw Error(ErrorCode::Validation, "rule without members");
    Rule rule = make_rule(members, embeddings, r.at("subject_span_id").get<int>());
    rule.rule_id = r.at("rule_id").get<std::string>();
    u.rules.push_back(std::move(rule));
  }
  for (const auto& s : j.at("subjects")) {
    std::vector<int> idx;
    for (const auto& id : s.at("rule_ids")) {
      int i = u.index_of(id.get<std::string>());
      if (i < 0) throw Error(ErrorCode::Validation, "subject references unknown rule " + id.get<std::string>());
      idx.push_back(i);
    }
    std::sort(idx.begin(), idx.end());
    std::vector<int> sentences;
    if (s.contains("sentence_ids")) {
      sentences = s.at("sentence_ids").get<std::vector<int>>();
    } else {
      for (int i : idx) {
        const auto& m = u.rules[static_cast<std::size_t>(i)].member_sentence_ids;
        sentences.insert(sentences.end(), m.begin(), m.end());
      }
    }
    std::sort(sentences.begin(), sentences.end());
    u.subject_span_ids.push_back(s.at("span_id").get<int>());
    u.subjects.push_back(std::move(idx));
    u.subject_sentences.push_back(std::move(sentences));
  }
  if (j.contains("assignments")) {
    for (const auto& a : j.at("assignments")) {
      u.sentence_rule[a.at("sentence_id").get<int>()] = u.index_of(a.at("rule_id").get<std::string>());
    }
  } else {
    for (std::size_t i = 0; i < u.rules.size(); ++i) {
      for (int sid : u.rules[i].member_sentence_ids) u.sentence_rule[sid] = static_cast<int>(i);
    }
  }
  return u;
}

}  // namespace ucmr::spectral
