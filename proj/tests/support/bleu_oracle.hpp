#pragma once

// Brute-force BLEU: n-gram counts by pairwise comparison of positions.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace ucmr::oracle {

inline double bleu_oracle(const std::vector<std::string>& cand, const std::vector<std::string>& ref, int max_n) {
  if (cand.empty()) return 0.0;
  auto same = [](const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b, std::size_t j, int n) {
    for (int k = 0; k < n; ++k) {
      if (a[i + static_cast<std::size_t>(k)] != b[j + static_cast<std::size_t>(k)]) return false;
    }
    return true;
  };
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    if (cand.size() < static_cast<std::size_t>(n)) return 0.0;
    const std::size_t nc = cand.size() - static_cast<std::size_t>(n) + 1;
    const std::size_t nr = ref.size() >= static_cast<std::size_t>(n) ? ref.size() - static_cast<std::size_t>(n) + 1 : 0;
    int matched = 0;
    for (std::size_t i = 0; i < nc; ++i) {
      // Count this n-gram once, at its first occurrence in the candidate.
      bool first = true;
      for (std::size_t k = 0; k < i; ++k) first = first && !same(cand, k, cand, i, n);
      if (!first) continue;
      int in_cand = 0, in_ref = 0;
      for (std::size_t k = 0; k < nc; ++k) in_cand += same(cand, k, cand, i, n);
      for (std::size_t k = 0; k < nr; ++k) in_ref += same(ref, k, cand, i, n);
      matched += std::min(in_cand, in_ref);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(nc));
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / max_n);
}

}  // namespace ucmr::oracle
