#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ucmr/encoder.hpp"
#include "ucmr/error.hpp"
#include "ucmr/nn.hpp"
#include "ucmr/text.hpp"

namespace ucmr::qg {

using nn::Mat;
using nn::ParamSet;
using nn::Tensor;
using nn::Vec;

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
    for (int i = 0; i < 4; ++i) index_[tokens_[static_cast<std::size_t>(i)]] = i;
  }

  int add(const std::string& tok) {
    if (auto it = index_.find(tok); it != index_.end()) return it->second;
    int id = size();
    tokens_.push_back(tok);
    index_[tok] = id;
    return id;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  /// JSON array of the non-reserved tokens; index = position + 4.
  nlohmann::json to_json() const { return std::vector<std::string>(tokens_.begin() + 4, tokens_.end()); }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    for (const auto& t : j) {
      auto s = t.get<std::string>();
      if (v.index_.count(s)) throw Error(ErrorCode::Validation, "duplicate vocabulary token '" + s + "'");
      v.add(s);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

inline std::vector<std::string> question_tokens(std::string_view q) { return text::word_tokens(q); }

// ---------------------------------------------------------------------------
// Decoder

/// Bounded: cross-entropy of the model distribution softmax(tanh(z)).
/// Logit: cross-entropy of softmax(z) on the same pre-squash scores z.
/// tanh is monotone, so both share the greedy argmax; the bounded loss
/// saturates once every |z| is large and stops moving the ranking.
enum class Objective { Bounded, Logit };

inline std::string_view to_string(Objective o) { return o == Objective::Bounded ? "bounded" : "logit"; }
inline Objective objective_from_string(std::string_view s) {
  if (s == "bounded") return Objective::Bounded;
  if (s == "logit") return Objective::Logit;
  throw Error(ErrorCode::Validation, "unknown QG objective '" + std::string(s) + "'");
}

struct DecoderShape {
  int vocab = 5;
  int token_dim = 768;
  int hidden = 128;
  int embed = 32;
};

/// LSTM decoder with bilinear attention over the source token rows.
///   z = W_x e(y) + W_h h + b,  gates ordered [i, f, o, g]
///   s_j = hᵀ W_a x_j,  c = Σ softmax(s)_j x_j
///   p = softmax(tanh(W_s tanh(W_t [h; c])))
/// h_0 = W_0 mean(sentence embeddings) + b_0, cell state starts at zero.
class Decoder {
 public:
  enum : std::size_t { kEmbed = 0, kWx, kWh, kB, kWa, kWt, kWs, kW0, kB0 };

  Decoder() = default;
  explicit Decoder(DecoderShape s) : shape_(s) {
    if (s.vocab < 1 || s.token_dim < 1 || s.hidden < 1 || s.embed < 1) {
      throw Error(ErrorCode::ShapeMismatch, "decoder dimensions must be positive");
    }
    const int h = s.hidden;
    params_.tensors = {Tensor("qg.embed", {s.vocab, s.embed}),
                       Tensor("qg.lstm.w_x", {4 * h, s.embed}),
                       Tensor("qg.lstm.w_h", {4 * h, h}),
                       Tensor("qg.lstm.bias", {4 * h}),
                       Tensor("qg.attn.w_a", {h, s.token_dim}),
                       Tensor("qg.out.w_t", {h, h + s.token_dim}),
                       Tensor("qg.out.w_s", {s.vocab, h}),
                       Tensor("qg.init.w", {h, s.token_dim}),
                       Tensor("qg.init.bias", {h})};
  }

  void init(std::mt19937_64& rng) {
    auto inv = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    const int h = shape_.hidden;
    nn::init_uniform(params_[kEmbed], 0.5, rng);
    nn::init_uniform(params_[kWx], inv(h), rng);
    nn::init_uniform(params_[kWh], inv(h), rng);
    nn::init_uniform(params_[kB], inv(h), rng);
    nn::init_uniform(params_[kWa], inv(shape_.token_dim), rng);
    nn::init_uniform(params_[kWt], inv(h + shape_.token_dim), rng);
    nn::init_uniform(params_[kWs], inv(h), rng);
    nn::init_uniform(params_[kW0], inv(shape_.token_dim), rng);
    nn::init_uniform(params_[kB0], inv(shape_.token_dim), rng);
  }

  const DecoderShape& shape() const { return shape_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  struct Source {
    Mat tokens;  // (n, d)
    Vec mean;    // (d)
  };

  void check(const Source& src) const {
    if (src.tokens.rows() < 1 || src.tokens.cols() != shape_.token_dim || src.mean.size() != shape_.token_dim) {
      throw Error(ErrorCode::ShapeMismatch, "source does not match decoder token dimension " +
                                                std::to_string(shape_.token_dim));
    }
  }

  Vec initial_hidden(const Source& src) const {
    check(src);
    return params_[kW0].mat() * src.mean + params_[kB0].data;
  }

  Vec attention_weights(const Mat& tokens, const Vec& h) const {
    if (tokens.cols() != shape_.token_dim || h.size() != shape_.hidden) {
      throw Error(ErrorCode::ShapeMismatch, "attention shapes do not match");
    }
    Vec q = params_[kWa].mat().transpose() * h;
    return nn::softmax(tokens * q);
  }

  Vec attention(const Mat& tokens, const Vec& h) const { return tokens.transpose() * attention_weights(tokens, h); }

  struct Step {
    int y_prev = 0;
    Vec e, h_prev, c_prev;
    Vec i, f, o, g, c, tanh_c, h;
    Vec attn, ctx, v, u, z, l, p;
  };

  Step step(int y_prev, const Vec& h_prev, const Vec& c_prev, const Mat& tokens) const {
    if (y_prev < 0 || y_prev >= shape_.vocab) throw Error(ErrorCode::ShapeMismatch, "token index outside vocabulary");
    const int h = shape_.hidden;
    Step s;
    s.y_prev = y_prev;
    s.e = params_[kEmbed].mat().row(y_prev).transpose();
    s.h_prev = h_prev;
    s.c_prev = c_prev;
    Vec z = params_[kWx].mat() * s.e + params_[kWh].mat() * h_prev + params_[kB].data;
    auto sig = [](double x) { return nn::sigmoid(x); };
    s.i = z.segment(0, h).unaryExpr(sig);
    s.f = z.segment(h, h).unaryExpr(sig);
    s.o = z.segment(2 * h, h).unaryExpr(sig);
    s.g = z.segment(3 * h, h).array().tanh();
    s.c = s.f.cwiseProduct(c_prev) + s.i.cwiseProduct(s.g);
    s.tanh_c = s.c.array().tanh();
    s.h = s.o.cwiseProduct(s.tanh_c);
    s.attn = attention_weights(tokens, s.h);
    s.ctx = tokens.transpose() * s.attn;
    s.v.resize(h + shape_.token_dim);
    s.v << s.h, s.ctx;
    s.u = (params_[kWt].mat() * s.v).array().tanh();
    s.z = params_[kWs].mat() * s.u;
    s.l = s.z.array().tanh();
    s.p = nn::softmax(s.l);
    return s;
  }

  /// Teacher-forced pass over `target` (no <bos>/<eos>); returns the
  /// summed negative log-likelihood including the final <eos>.
  double sequence_nll(const Source& src, const std::vector<int>& target, std::vector<Step>* steps = nullptr,
                      Objective obj = Objective::Bounded) const {
    Vec h = initial_hidden(src);
    Vec c = Vec::Zero(shape_.hidden);
    int prev = Vocabulary::kBos;
    double nll = 0.0;
    for (std::size_t t = 0; t <= target.size(); ++t) {
      const int y = t < target.size() ? target[t] : Vocabulary::kEos;
      Step s = step(prev, h, c, src.tokens);
      nll -= obj == Objective::Bounded ? std::log(s.p[y]) : std::log(nn::softmax(s.z)[y]);
      h = s.h;
      c = s.c;
      prev = y;
      if (steps) steps->push_back(std::move(s));
    }
    return nll;
  }

  /// Adds d(scale · nll)/dθ to `grads`. Returns nll.
  double accumulate_gradients(const Source& src, const std::vector<int>& target, double scale, ParamSet& grads,
                              Objective obj = Objective::Bounded) const {
    std::vector<Step> steps;
    const double nll = sequence_nll(src, target, &steps, obj);
    const int h = shape_.hidden;
    Vec dh_next = Vec::Zero(h), dc_next = Vec::Zero(h);
    for (std::size_t t = steps.size(); t-- > 0;) {
      const Step& s = steps[t];
      const int y = t < target.size() ? target[t] : Vocabulary::kEos;
      Vec dpre_s;
      if (obj == Objective::Bounded) {
        Vec dl = scale * s.p;
        dl[y] -= scale;
        dpre_s = dl.cwiseProduct((1.0 - s.l.array().square()).matrix());
      } else {
        dpre_s = scale * nn::softmax(s.z);
        dpre_s[y] -= scale;
      }
      grads[kWs].mat() += dpre_s * s.u.transpose();
      Vec du = params_[kWs].mat().transpose() * dpre_s;
      Vec dpre_t = du.cwiseProduct((1.0 - s.u.array().square()).matrix());
      grads[kWt].mat() += dpre_t * s.v.transpose();
      Vec dv = params_[kWt].mat().transpose() * dpre_t;
      Vec dh = dv.head(h) + dh_next;
      Vec dctx = dv.tail(shape_.token_dim);

      Vec da = src.tokens * dctx;
      Vec ds = s.attn.cwiseProduct((da.array() - s.attn.dot(da)).matrix());
      Vec dq = src.tokens.transpose() * ds;
      grads[kWa].mat() += s.h * dq.transpose();
      dh += params_[kWa].mat() * dq;

      Vec dc = dh.cwiseProduct(s.o).cwiseProduct((1.0 - s.tanh_c.array().square()).matrix()) + dc_next;
      Vec dz(4 * h);
      dz.segment(0, h) = dc.cwiseProduct(s.g).cwiseProduct(s.i.cwiseProduct((1.0 - s.i.array()).matrix()));
      dz.segment(h, h) = dc.cwiseProduct(s.c_prev).cwiseProduct(s.f.cwiseProduct((1.0 - s.f.array()).matrix()));
      dz.segment(2 * h, h) = dh.cwiseProduct(s.tanh_c).cwiseProduct(s.o.cwiseProduct((1.0 - s.o.array()).matrix()));
      dz.segment(3 * h, h) = dc.cwiseProduct(s.i).cwiseProduct((1.0 - s.g.array().square()).matrix());
      grads[kWx].mat() += dz * s.e.transpose();
      grads[kWh].mat() += dz * s.h_prev.transpose();
      grads[kB].data += dz;
      grads[kEmbed].mat().row(s.y_prev) += (params_[kWx].mat().transpose() * dz).transpose();
      dh_next = params_[kWh].mat().transpose() * dz;
      dc_next = dc.cwiseProduct(s.f);
    }
    grads[kW0].mat() += dh_next * src.mean.transpose();
    grads[kB0].data += dh_next;
    return nll;
  }

  /// Greedy decoding from <bos>; stops at <eos> or after max_len tokens.
  std::vector<int> greedy(const Source& src, int max_len) const {
    std::vector<int> out;
    if (max_len <= 0) return out;
    Vec h = initial_hidden(src);
    Vec c = Vec::Zero(shape_.hidden);
    int prev = Vocabulary::kBos;
    while (static_cast<int>(out.size()) < max_len) {
      Step s = step(prev, h, c, src.tokens);
      Eigen::Index best = 0;
      s.p.maxCoeff(&best);
      if (best == Vocabulary::kEos) break;
      out.push_back(static_cast<int>(best));
      h = s.h;
      c = s.c;
      prev = static_cast<int>(best);
    }
    return out;
  }

 private:
  DecoderShape shape_;
  ParamSet params_;
};

/// Token rows of the member sentences plus the mean sentence embedding.
inline Decoder::Source make_source(const encoder::Encoder& enc, const std::vector<std::string>& sentences) {
  if (sentences.empty()) throw Error(ErrorCode::EmptyRule, "rule has no member sentences");
  Decoder::Source src;
  src.tokens = encoder::encode_token_sequence(enc, sentences);
  src.mean = Vec::Zero(enc.dim());
  for (const auto& s : sentences) src.mean += enc.encode_sentence(s);
  src.mean /= static_cast<double>(sentences.size());
  return src;
}

// ---------------------------------------------------------------------------
// Model = decoder + vocabulary + encoder settings

struct QgConfig {
  int hidden = 128;
  int embed = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int steps = 2000;
  int batch_size = 8;
  int max_len = 30;
  std::uint64_t seed = 13;
  /// Stop once greedy decoding reproduces every training target; checked
  /// every `check_every` steps (0 disables the check).
  int check_every = 50;
  Objective objective = Objective::Logit;
};

inline nlohmann::json to_json(const QgConfig& c) {
  return {{"hidden", c.hidden}, {"embed", c.embed}, {"lr", c.lr},         {"beta1", c.beta1},
          {"beta2", c.beta2},   {"steps", c.steps}, {"batch_size", c.batch_size}, {"max_len", c.max_len},
          {"seed", c.seed},     {"check_every", c.check_every}, {"objective", std::string(to_string(c.objective))}};
}

inline QgConfig qg_config_from_json(const nlohmann::json& j) {
  QgConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.embed = j.value("embed", c.embed);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_len = j.value("max_len", c.max_len);
  c.seed = j.value("seed", c.seed);
  c.check_every = j.value("check_every", c.check_every);
  c.objective = objective_from_string(j.value("objective", std::string(to_string(c.objective))));
  return c;
}

struct QgModel {
  QgConfig config;
  Vocabulary vocab;
  Decoder decoder;
};

struct QgPair {
  std::vector<std::string> source;
  std::string question;
};

inline std::vector<QgPair> read_pairs(std::istream& in) {
  std::vector<QgPair> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    QgPair p;
    const auto& src = j.at("source");
    if (src.is_string()) p.source = {src.get<std::string>()};
    else p.source = src.get<std::vector<std::string>>();
    p.question = j.at("question").get<std::string>();
    if (question_tokens(p.question).empty()) {
      throw Error(ErrorCode::Validation, "line " + std::to_string(lineno) + ": empty target question");
    }
    if (p.source.empty()) throw Error(ErrorCode::Validation, "line " + std::to_string(lineno) + ": empty source");
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<QgPair> load_pairs(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::Validation, "cannot open " + p.string());
  return read_pairs(in);
}

struct TrainReport {
  int steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  bool reproduced = false;
};

inline std::vector<std::string> decode_tokens(const QgModel& m, const Decoder::Source& src, int max_len) {
  std::vector<std::string> out;
  for (int id : m.decoder.greedy(src, max_len)) out.push_back(m.vocab.token(id));
  return out;
}

/// Teacher-forced cross-entropy with Adam over contiguous batches at a
/// seeded offset (the whole set when it fits in one batch).
inline QgModel train_qg(const std::vector<QgPair>& pairs, const encoder::Encoder& enc, const QgConfig& cfg,
                        TrainReport* report = nullptr,
                        const std::function<void(int, double)>& on_step = {}) {
  if (pairs.empty()) throw Error(ErrorCode::Validation, "no training pairs");
  if (cfg.batch_size < 1 || cfg.steps < 0) throw Error(ErrorCode::Validation, "invalid QG training config");
  QgModel m;
  m.config = cfg;
  std::vector<Decoder::Source> sources;
  std::vector<std::vector<int>> targets;
  for (const auto& p : pairs) {
    auto toks = question_tokens(p.question);
    if (toks.empty()) throw Error(ErrorCode::Validation, "empty target question");
    for (const auto& t : toks) m.vocab.add(t);
  }
  for (const auto& p : pairs) {
    sources.push_back(make_source(enc, p.source));
    targets.push_back(m.vocab.encode(question_tokens(p.question)));
  }
  std::mt19937_64 rng(cfg.seed);
  m.decoder = Decoder({m.vocab.size(), enc.dim(), cfg.hidden, cfg.embed});
  m.decoder.init(rng);
  nn::Adam adam(m.decoder.params(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8, 0.0});

  auto reproduced = [&] {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (m.decoder.greedy(sources[i], cfg.max_len) != targets[i]) return false;
    }
    return true;
  };

  const int n = static_cast<int>(pairs.size());
  const int b = std::min(cfg.batch_size, n);
  std::uniform_int_distribution<int> start(0, n - b);
  TrainReport r;
  for (int step = 0; step < cfg.steps; ++step) {
    if (cfg.check_every > 0 && step % cfg.check_every == 0 && reproduced()) {
      r.reproduced = true;
      break;
    }
    const int s0 = b == n ? 0 : start(rng);
    ParamSet grads = m.decoder.params().zeros_like();
    double loss = 0.0;
    for (int k = 0; k < b; ++k) {
      const auto i = static_cast<std::size_t>(s0 + k);
      loss += m.decoder.accumulate_gradients(sources[i], targets[i], 1.0 / b, grads, cfg.objective) / b;
    }
    if (!std::isfinite(loss) || !grads.all_finite()) {
      throw Error(ErrorCode::NonFiniteLoss, "QG step " + std::to_string(step) + ": loss=" + std::to_string(loss));
    }
    if (step == 0) r.first_loss = loss;
    r.last_loss = loss;
    adam.step(m.decoder.params(), grads);
    r.steps = step + 1;
    if (on_step) on_step(step, loss);
  }
  if (!r.reproduced) r.reproduced = reproduced();
  if (report) *report = r;
  return m;
}

// ---------------------------------------------------------------------------
// Generation

/// "Is it true that <sentence>?" with the first letter lowered unless the
/// word looks like an acronym.
inline std::string template_question(std::string_view sentence) {
  std::string s = text::normalize_space(sentence);
  while (!s.empty() && (s.back() == '.' || s.back() == '!' || s.back() == '?' || s.back() == ';')) s.pop_back();
  if (s.size() >= 2 && std::isupper(static_cast<unsigned char>(s[0])) &&
      !std::isupper(static_cast<unsigned char>(s[1]))) {
    s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  }
  return "Is it true that " + s + "?";
}

/// Joins tokens with spaces, attaching punctuation to the previous word.
inline std::string detokenize(const std::vector<std::string>& toks) {
  std::string out;
  for (const auto& t : toks) {
    bool punct = t.size() == 1 && !text::is_word_char(t[0]);
    if (!out.empty() && !punct) out += ' ';
    out += t;
  }
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

inline std::vector<std::string> generate_question(const std::vector<std::string>& member_sentences,
                                                  const QgModel& model, const encoder::Encoder& enc,
                                                  int max_len = 30) {
  if (member_sentences.empty()) throw Error(ErrorCode::EmptyRule, "rule has no member sentences");
  if (max_len <= 0) return {};
  return decode_tokens(model, make_source(enc, member_sentences), max_len);
}

/// Trained model when available, else the template over the first member.
inline std::string question_for_rule(const std::vector<std::string>& member_sentences, const QgModel* model,
                                     const encoder::Encoder& enc, int max_len = 30) {
  if (member_sentences.empty()) throw Error(ErrorCode::EmptyRule, "rule has no member sentences");
  if (!model) return template_question(member_sentences.front());
  auto toks = generate_question(member_sentences, *model, enc, max_len);
  if (toks.empty()) return template_question(member_sentences.front());
  return detokenize(toks);
}

// ---------------------------------------------------------------------------
// Checkpoint (same container as the GAN)

inline nlohmann::json checkpoint_json(const QgModel& m, const encoder::EncoderConfig& enc_cfg) {
  return {{"format", "ucmr-checkpoint"},
          {"version", 1},
          {"kind", "qg"},
          {"config", to_json(m.config)},
          {"encoder", encoder::to_json(enc_cfg)},
          {"token_dim", m.decoder.shape().token_dim},
          {"vocab", m.vocab.to_json()},
          {"decoder", m.decoder.params().to_json()}};
}

inline QgModel qg_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "ucmr-checkpoint" || j.value("kind", "") != "qg") {
    throw Error(ErrorCode::Validation, "not a question-generator checkpoint");
  }
  if (j.at("version").get<int>() != 1) throw Error(ErrorCode::Validation, "unsupported checkpoint version");
  QgModel m;
  m.config = qg_config_from_json(j.at("config"));
  m.vocab = Vocabulary::from_json(j.at("vocab"));
  m.decoder = Decoder({m.vocab.size(), j.at("token_dim").get<int>(), m.config.hidden, m.config.embed});
  m.decoder.params().load_json(j.at("decoder"));
  return m;
}

inline void save_qg(const QgModel& m, const encoder::EncoderConfig& enc_cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Validation, "cannot write " + path.string());
  out << checkpoint_json(m, enc_cfg).dump() << '\n';
}

inline QgModel load_qg(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Validation, "cannot open checkpoint " + path.string());
  return qg_from_checkpoint(nlohmann::json::parse(in));
}

}  // namespace ucmr::qg
