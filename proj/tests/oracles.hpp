// Copyright 2026 The evclip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Exhaustive pairwise references for the ranking metrics. Quadratic on
// purpose: they share no code with the sort-based implementations.

#include <algorithm>
#include <vector>

#include "evclip/evaluation.hpp"

namespace evclip::testing {

inline double auc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return wins / pairs;
}

// Rank of every key by pairwise comparison: cosine descending, then id ascending.
inline RetrievalMetrics retrieval_oracle(const RetrievalSet& rs, const std::vector<int>& ks) {
  RetrievalMetrics m;
  const auto nq = static_cast<double>(rs.queries.rows());
  for (Eigen::Index q = 0; q < rs.queries.rows(); ++q) {
    const auto& rel = rs.relevance.at(rs.query_ids[static_cast<std::size_t>(q)]);
    auto cos = [&](Eigen::Index k) { return rs.keys.row(k).dot(rs.queries.row(q)) / (rs.keys.row(k).norm() * rs.queries.row(q).norm()); };
    std::vector<int> rank(static_cast<std::size_t>(rs.keys.rows()), 0);
    for (Eigen::Index a = 0; a < rs.keys.rows(); ++a) {
      for (Eigen::Index b = 0; b < rs.keys.rows(); ++b) {
        const bool before = cos(b) > cos(a) || (cos(b) == cos(a) && rs.key_ids[static_cast<std::size_t>(b)] < rs.key_ids[static_cast<std::size_t>(a)]);
        if (a != b && before) ++rank[static_cast<std::size_t>(a)];
      }
    }
    std::vector<int> rel_ranks;
    for (std::size_t k = 0; k < rank.size(); ++k) {
      if (rel.count(rs.key_ids[k])) rel_ranks.push_back(rank[k]);
    }
    std::sort(rel_ranks.begin(), rel_ranks.end());
    m.mrr += 1.0 / (rel_ranks.front() + 1) / nq;
    for (int k : ks) {
      double ap = 0.0;
      for (std::size_t i = 0; i < rel_ranks.size(); ++i) {
        if (rel_ranks[i] < k) ap += static_cast<double>(i + 1) / (rel_ranks[i] + 1);
      }
      m.recall[k] += (rel_ranks.front() < k ? 1.0 : 0.0) / nq;
      m.mean_ap[k] += ap / std::min<double>(static_cast<double>(rel.size()), k) / nq;
    }
  }
  return m;
}

}  // namespace evclip::testing
