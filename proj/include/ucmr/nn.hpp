#pragma once

#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ucmr/error.hpp"

namespace ucmr::nn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// A named, flat parameter array with a logical shape (row-major).
struct Tensor {
  std::string name;
  std::vector<int> shape;
  Vec data;

  Tensor() = default;
  Tensor(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    Eigen::Index size = 1;
    for (int d : shape) size *= d;
    data = Vec::Zero(size);
  }

  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    int c = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
  }
  MatMap mat() { return MatMap(data.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), rows(), cols()); }
};

/// Ordered list of tensors. Gradients use the same layout as parameters.
struct ParamSet {
  std::vector<Tensor> tensors;

  Tensor& operator[](std::size_t i) { return tensors[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors[i]; }
  std::size_t size() const { return tensors.size(); }

  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& t : tensors) z.tensors.emplace_back(t.name, t.shape);
    return z;
  }

  Eigen::Index count() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors) n += t.data.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors) {
      if (!t.data.allFinite()) return false;
    }
    return true;
  }

  ParamSet& operator+=(const ParamSet& o) {
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].data += o.tensors[i].data;
    return *this;
  }
  ParamSet& operator*=(double s) {
    for (auto& t : tensors) t.data *= s;
    return *this;
  }

  bool operator==(const ParamSet& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].shape != o.tensors[i].shape || tensors[i].data != o.tensors[i].data) return false;
    }
    return true;
  }

  /// Shape table plus flat values; from_json validates the table exactly.
  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : tensors) {
      arr.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"values", std::vector<double>(t.data.data(), t.data.data() + t.data.size())}});
    }
    return arr;
  }

  void load_json(const nlohmann::json& arr) {
    if (!arr.is_array() || arr.size() != tensors.size()) {
      throw Error(ErrorCode::ShapeMismatch, "parameter table has wrong tensor count");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& e = arr[i];
      if (e.at("name").get<std::string>() != tensors[i].name ||
          e.at("shape").get<std::vector<int>>() != tensors[i].shape) {
        throw Error(ErrorCode::ShapeMismatch, "parameter '" + tensors[i].name + "' does not match checkpoint");
      }
      auto v = e.at("values").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(v.size()) != tensors[i].data.size()) {
        throw Error(ErrorCode::ShapeMismatch, "parameter '" + tensors[i].name + "' has wrong value count");
      }
      tensors[i].data = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
  }
};

inline void init_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = u(rng);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

/// Adam with bias correction; weight decay is classic L2 (added to the
/// gradient), not decoupled.
class Adam {
 public:
  Adam() = default;
  Adam(const ParamSet& params, AdamConfig cfg) : cfg_(cfg), m_(params.zeros_like()), v_(params.zeros_like()) {}

  void step(ParamSet& params, const ParamSet& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Vec g = grads[i].data;
      if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * params[i].data;
      m_[i].data = cfg_.beta1 * m_[i].data + (1.0 - cfg_.beta1) * g;
      v_[i].data = cfg_.beta2 * v_[i].data + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      params[i].data.array() -=
          cfg_.lr * (m_[i].data.array() / bc1) / ((v_[i].data.array() / bc2).sqrt() + cfg_.eps);
    }
  }

  long long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  nlohmann::json to_json() const { return {{"t", t_}, {"m", m_.to_json()}, {"v", v_.to_json()}}; }

  void load_json(const nlohmann::json& j) {
    t_ = j.at("t").get<long long>();
    m_.load_json(j.at("m"));
    v_.load_json(j.at("v"));
  }

 private:
  AdamConfig cfg_;
  ParamSet m_, v_;
  long long t_ = 0;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

inline Vec softmax(const Vec& x) {
  Vec e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

inline void set_rng_state(std::mt19937_64& rng, const std::string& s) {
  std::istringstream ss(s);
  ss >> rng;
  if (!ss) throw Error(ErrorCode::Validation, "corrupt RNG state in checkpoint");
}

}  // namespace ucmr::nn
