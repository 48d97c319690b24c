#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "ucmr/error.hpp"
#include "ucmr/text.hpp"

namespace ucmr {

using Embedding = Eigen::VectorXd;
/// One row per token.
using TokenMatrix = Eigen::MatrixXd;

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

inline double cosine(const Embedding& a, const Embedding& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace ucmr

namespace ucmr::encoder {

enum class Backend { Hashing, FileStore, Remote };

struct EncoderConfig {
  Backend backend = Backend::Hashing;
  int dim = 768;
  std::optional<std::string> remote_url;
  std::optional<std::filesystem::path> store_path;
};

inline std::string_view to_string(Backend b) {
  switch (b) {
    case Backend::Hashing: return "hashing";
    case Backend::FileStore: return "filestore";
    case Backend::Remote: return "remote";
  }
  return "hashing";
}

inline Backend backend_from_string(std::string_view s) {
  if (s == "hashing") return Backend::Hashing;
  if (s == "filestore") return Backend::FileStore;
  if (s == "remote") return Backend::Remote;
  throw Error(ErrorCode::Validation, "unknown encoder backend '" + std::string(s) + "'");
}

inline nlohmann::json to_json(const EncoderConfig& c) {
  nlohmann::json j = {{"backend", std::string(to_string(c.backend))}, {"dim", c.dim}};
  if (c.remote_url) j["remote_url"] = *c.remote_url;
  if (c.store_path) j["store_path"] = c.store_path->string();
  return j;
}

inline EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.backend = backend_from_string(j.value("backend", "hashing"));
  c.dim = j.value("dim", 768);
  if (j.contains("remote_url")) c.remote_url = j["remote_url"].get<std::string>();
  if (j.contains("store_path")) c.store_path = j["store_path"].get<std::string>();
  return c;
}

/// Sentence/token embedding provider. Implementations are immutable after
/// construction and safe to call concurrently.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual int dim() const = 0;
  virtual Embedding encode_sentence(std::string_view text) const = 0;
  virtual TokenMatrix encode_tokens(std::string_view text) const = 0;
  virtual Embedding encode_pair(std::string_view a, std::string_view b) const = 0;

  std::vector<Embedding> encode_all(const std::vector<std::string>& texts) const {
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(encode_sentence(t));
    return out;
  }
};

namespace detail {
inline void require_text(std::string_view t) {
  if (text::trim(t).empty()) throw Error(ErrorCode::Validation, "cannot encode empty text");
}
}  // namespace detail

/// Character-trigram signed feature hashing, L2-normalised. Text is
/// lowercased and padded with one space on each side so single characters
/// still produce a trigram.
class HashingEncoder final : public Encoder {
 public:
  explicit HashingEncoder(int dim = 768) : dim_(dim) {
    if (dim <= 0) throw Error(ErrorCode::Validation, "encoder dimension must be positive");
  }

  int dim() const override { return dim_; }

  Embedding encode_sentence(std::string_view t) const override {
    detail::require_text(t);
    Embedding v = Embedding::Zero(dim_);
    accumulate(v, t, kSentenceSalt);
    return normalized(std::move(v));
  }

  TokenMatrix encode_tokens(std::string_view t) const override {
    detail::require_text(t);
    auto toks = text::split_whitespace(t);
    TokenMatrix m(static_cast<Eigen::Index>(toks.size()), dim_);
    for (std::size_t i = 0; i < toks.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = encode_sentence(toks[i]).transpose();
    return m;
  }

  Embedding encode_pair(std::string_view a, std::string_view b) const override {
    detail::require_text(a);
    detail::require_text(b);
    Embedding v = Embedding::Zero(dim_);
    accumulate(v, a, kFirstSegmentSalt);
    accumulate(v, b, kSecondSegmentSalt);
    return normalized(std::move(v));
  }

  /// Bucket index and sign for one trigram; exposed for collision checks.
  std::pair<int, double> bucket(std::string_view trigram, std::uint64_t salt = kSentenceSalt) const {
    std::uint64_t h = text::fnv1a(trigram, 0xcbf29ce484222325ULL ^ salt);
    // Final avalanche so low bits depend on every input byte.
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    return {static_cast<int>(h % static_cast<std::uint64_t>(dim_)), (h >> 63) ? -1.0 : 1.0};
  }

  static std::vector<std::string> trigrams(std::string_view t) {
    std::string s = " " + text::to_lower(text::normalize_space(t)) + " ";
    std::vector<std::string> out;
    for (std::size_t i = 0; i + 3 <= s.size(); ++i) out.push_back(s.substr(i, 3));
    return out;
  }

  static constexpr std::uint64_t kSentenceSalt = 0;
  static constexpr std::uint64_t kFirstSegmentSalt = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kSecondSegmentSalt = 0xc2b2ae3d27d4eb4fULL;

 private:
  void accumulate(Embedding& v, std::string_view t, std::uint64_t salt) const {
    for (const auto& tri : trigrams(t)) {
      auto [idx, sign] = bucket(tri, salt);
      v[idx] += sign;
    }
  }

  static Embedding normalized(Embedding v) {
    double n = v.norm();
    if (n == 0.0) {
      // Only reachable when colliding trigrams cancel exactly.
      v[0] = 1.0;
      return v;
    }
    return v / n;
  }

  int dim_;
};

/// Precomputed vectors keyed by sha256 of the exact text.
class FileStoreEncoder final : public Encoder {
 public:
  explicit FileStoreEncoder(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Validation, "cannot open embedding store " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      if (text::trim(line).empty()) continue;
      auto j = nlohmann::json::parse(line);
      auto vec = j.at("vector").get<std::vector<double>>();
      if (dim_ == 0) dim_ = static_cast<int>(vec.size());
      if (static_cast<int>(vec.size()) != dim_ || dim_ == 0) {
        throw Error(ErrorCode::DimensionMismatch, "embedding store rows must share one positive dimension");
      }
      store_[j.at("key").get<std::string>()] = Eigen::Map<const Embedding>(vec.data(), dim_);
    }
    if (dim_ == 0) throw Error(ErrorCode::Validation, "embedding store is empty");
  }

  int dim() const override { return dim_; }

  Embedding encode_sentence(std::string_view t) const override {
    detail::require_text(t);
    auto it = store_.find(sha256_hex(t));
    if (it == store_.end()) {
      throw Error(ErrorCode::MissingEmbedding, "no stored embedding for '" + std::string(t) + "'");
    }
    return it->second;
  }

  TokenMatrix encode_tokens(std::string_view t) const override {
    detail::require_text(t);
    auto toks = text::split_whitespace(t);
    TokenMatrix m(static_cast<Eigen::Index>(toks.size()), dim_);
    for (std::size_t i = 0; i < toks.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = encode_sentence(toks[i]).transpose();
    return m;
  }

  Embedding encode_pair(std::string_view a, std::string_view b) const override {
    detail::require_text(a);
    detail::require_text(b);
    return encode_sentence(std::string(a) + " [SEP] " + std::string(b));
  }

  static nlohmann::json store_row(std::string_view t, const Embedding& v) {
    return {{"key", sha256_hex(t)}, {"vector", std::vector<double>(v.data(), v.data() + v.size())}};
  }

 private:
  int dim_ = 0;
  std::unordered_map<std::string, Embedding> store_;
};

/// Client for an external encoder sidecar speaking
///   POST /encode {"texts": [...], "level": "sentence"|"token"}
///   -> {"vectors": [[...]]} | {"matrices": [[[...]]]}
class RemoteEncoder final : public Encoder {
 public:
  RemoteEncoder(std::string url, int dim) : url_(std::move(url)), dim_(dim) {
    if (dim <= 0) throw Error(ErrorCode::Validation, "encoder dimension must be positive");
  }

  int dim() const override { return dim_; }

  Embedding encode_sentence(std::string_view t) const override {
    detail::require_text(t);
    auto resp = post({{"texts", {std::string(t)}}, {"level", "sentence"}});
    const auto& vecs = resp.at("vectors");
    if (vecs.size() != 1) throw Error(ErrorCode::RemoteUnavailable, "expected one vector");
    return to_vector(vecs[0]);
  }

  TokenMatrix encode_tokens(std::string_view t) const override {
    detail::require_text(t);
    auto resp = post({{"texts", {std::string(t)}}, {"level", "token"}});
    const auto& mats = resp.at("matrices");
    if (mats.size() != 1 || mats[0].empty()) throw Error(ErrorCode::RemoteUnavailable, "expected one token matrix");
    TokenMatrix m(static_cast<Eigen::Index>(mats[0].size()), dim_);
    for (std::size_t i = 0; i < mats[0].size(); ++i) m.row(static_cast<Eigen::Index>(i)) = to_vector(mats[0][i]).transpose();
    return m;
  }

  Embedding encode_pair(std::string_view a, std::string_view b) const override {
    detail::require_text(a);
    detail::require_text(b);
    return encode_sentence(std::string(a) + " [SEP] " + std::string(b));
  }

 private:
  nlohmann::json post(const nlohmann::json& body) const {
    // httplib clients are not thread-safe; one per request.
    httplib::Client cli(url_);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(60);
    auto res = cli.Post("/encode", body.dump(), "application/json");
    if (!res) throw Error(ErrorCode::RemoteUnavailable, "encoder at " + url_ + " unreachable");
    if (res->status != 200) {
      throw Error(ErrorCode::RemoteUnavailable, "encoder returned HTTP " + std::to_string(res->status));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::RemoteUnavailable, std::string("malformed encoder response: ") + e.what());
    }
  }

  Embedding to_vector(const nlohmann::json& arr) const {
    auto v = arr.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != dim_) {
      throw Error(ErrorCode::DimensionMismatch, "remote vector has dimension " + std::to_string(v.size()));
    }
    Embedding e = Eigen::Map<const Embedding>(v.data(), dim_);
    if (!e.allFinite()) throw Error(ErrorCode::RemoteUnavailable, "remote vector is not finite");
    return e;
  }

  std::string url_;
  int dim_;
};

inline std::shared_ptr<const Encoder> make_encoder(const EncoderConfig& c) {
  switch (c.backend) {
    case Backend::Hashing:
      return std::make_shared<HashingEncoder>(c.dim);
    case Backend::FileStore:
      if (!c.store_path) throw Error(ErrorCode::Validation, "filestore backend requires store_path");
      return std::make_shared<FileStoreEncoder>(*c.store_path);
    case Backend::Remote:
      if (!c.remote_url) throw Error(ErrorCode::Validation, "remote backend requires remote_url");
      return std::make_shared<RemoteEncoder>(*c.remote_url, c.dim);
  }
  throw Error(ErrorCode::Validation, "unknown encoder backend");
}

/// Token rows of several sentences stacked in order.
inline TokenMatrix encode_token_sequence(const Encoder& enc, const std::vector<std::string>& texts) {
  std::vector<TokenMatrix> parts;
  Eigen::Index rows = 0;
  for (const auto& t : texts) {
    if (text::trim(t).empty()) continue;
    parts.push_back(enc.encode_tokens(t));
    rows += parts.back().rows();
  }
  TokenMatrix m(rows, enc.dim());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    m.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return m;
}

}  // namespace ucmr::encoder
