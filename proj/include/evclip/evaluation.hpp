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

// Zero-shot classification, anomaly scoring, AUC and retrieval metrics.
//
// Embedding set files (EMB1), little-endian:
//   char[4] "EMB1", u16 version (1), u16 reserved, u32 count, u32 dim,
//   then `count` records of (id u64, dim float32).
// Relevance files: one "query_id key_id" pair per line.
// Metric tables are tab-separated with a header row.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "evclip/binary_io.hpp"
#include "evclip/dataset.hpp"
#include "evclip/encoders.hpp"

namespace evclip {

struct PromptSet {
  std::vector<std::string> class_names;
  std::string template_text = "a photo of {class}";
  RealMatrix embeddings;  // one unit-norm row per class

  static PromptSet build(const EncoderParams& text, std::vector<std::string> names,
                         const std::string& tmpl = "a photo of {class}") {
    if (names.empty()) throw DataError("prompt set needs at least one class");
    PromptSet p;
    p.class_names = std::move(names);
    p.template_text = tmpl;
    p.embeddings.resize(static_cast<Eigen::Index>(p.class_names.size()), text.arch.z);
    for (std::size_t i = 0; i < p.class_names.size(); ++i) {
      p.embeddings.row(static_cast<Eigen::Index>(i)) = encode_text(text, fill_template(tmpl, p.class_names[i])).transpose();
    }
    return p;
  }

  std::size_t size() const { return class_names.size(); }
};

struct ZeroShotResult {
  int index = 0;
  Eigen::VectorXd probabilities;
  Eigen::VectorXd similarities;
};

/// Argmax of cosine similarity (lowest index on ties); probabilities are a
/// temperature-1 softmax of the similarities.
inline ZeroShotResult zero_shot_classify(const Embedding& e, const RealMatrix& prompts) {
  if (prompts.rows() == 0) throw DataError("zero_shot_classify: empty prompt set");
  if (prompts.cols() != e.size()) throw DimensionError("zero_shot_classify: dimension mismatch");
  const double en = e.norm();
  if (!(en > 0.0)) throw DataError("zero_shot_classify: zero embedding");
  ZeroShotResult r;
  r.similarities.resize(prompts.rows());
  for (Eigen::Index c = 0; c < prompts.rows(); ++c) {
    r.similarities(c) = prompts.row(c).dot(e) / (prompts.row(c).norm() * en);
  }
  for (Eigen::Index c = 1; c < prompts.rows(); ++c) {
    if (r.similarities(c) > r.similarities(r.index)) r.index = static_cast<int>(c);
  }
  const Eigen::ArrayXd ex = (r.similarities.array() - r.similarities.maxCoeff()).exp();
  r.probabilities = (ex / ex.sum()).matrix();
  return r;
}

inline double top1_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw DimensionError("top1_accuracy: length mismatch");
  if (predictions.empty()) throw DataError("top1_accuracy: no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Two-way softmax over (best normal similarity, best abnormal similarity),
/// read at the abnormal coordinate.
inline double anomaly_score(const Embedding& e, const RealMatrix& normal, const RealMatrix& abnormal) {
  if (normal.rows() == 0 || abnormal.rows() == 0) throw DataError("anomaly_score: empty prompt group");
  const double s_n = zero_shot_classify(e, normal).similarities.maxCoeff();
  const double s_a = zero_shot_classify(e, abnormal).similarities.maxCoeff();
  return 1.0 / (1.0 + std::exp(s_n - s_a));
}

/// Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: length mismatch");
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("auc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auc is undefined without both positive and negative labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // positives outranking negatives, counted per tie group
  double wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0, neg_in_group = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++pos_in_group; else ++neg_in_group;
      ++j;
    }
    wins += static_cast<double>(pos_in_group) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_in_group));
    neg_below += neg_in_group;
    i = j;
  }
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalSet {
  RealMatrix queries;
  std::vector<std::uint64_t> query_ids;
  RealMatrix keys;
  std::vector<std::uint64_t> key_ids;
  std::map<std::uint64_t, std::set<std::uint64_t>> relevance;

  void validate() const {
    if (queries.rows() != static_cast<Eigen::Index>(query_ids.size()) ||
        keys.rows() != static_cast<Eigen::Index>(key_ids.size())) {
      throw DimensionError("retrieval set: id count does not match embedding rows");
    }
    if (queries.cols() != keys.cols()) throw DimensionError("retrieval set: query and key dimensions differ");
    if (keys.rows() == 0 || queries.rows() == 0) throw DataError("retrieval set: empty queries or keys");
    const std::set<std::uint64_t> known(key_ids.begin(), key_ids.end());
    for (auto q : query_ids) {
      auto it = relevance.find(q);
      if (it == relevance.end() || it->second.empty()) {
        throw DataError("retrieval query " + std::to_string(q) + " has no relevant keys");
      }
      for (auto k : it->second) {
        if (!known.count(k)) throw DataError("relevant key " + std::to_string(k) + " is not in the key set");
      }
    }
  }
};

struct RetrievalMetrics {
  std::map<int, double> recall;      // Recall@k
  std::map<int, double> mean_ap;     // mAP@k
  double mrr = 0.0;
};

/// Keys ranked by cosine similarity, descending; equal similarity breaks by key id.
inline std::vector<std::size_t> rank_keys(const RetrievalSet& rs, Eigen::Index q) {
  const RealMatrix& K = rs.keys;
  const double qn = rs.queries.row(q).norm();
  std::vector<double> sim(static_cast<std::size_t>(K.rows()));
  for (Eigen::Index k = 0; k < K.rows(); ++k) {
    sim[static_cast<std::size_t>(k)] = K.row(k).dot(rs.queries.row(q)) / (K.row(k).norm() * qn);
  }
  std::vector<std::size_t> order(sim.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sim[a] != sim[b]) return sim[a] > sim[b];
    return rs.key_ids[a] < rs.key_ids[b];
  });
  return order;
}

inline RetrievalMetrics retrieval_metrics(const RetrievalSet& rs, const std::vector<int>& ks = {1, 5, 10}) {
  rs.validate();
  for (int k : ks) {
    if (k < 1) throw ConfigError("retrieval cutoff k must be >= 1");
  }
  RetrievalMetrics m;
  for (int k : ks) {
    m.recall[k] = 0.0;
    m.mean_ap[k] = 0.0;
  }
  const auto nq = static_cast<double>(rs.queries.rows());
  for (Eigen::Index q = 0; q < rs.queries.rows(); ++q) {
    const auto& rel = rs.relevance.at(rs.query_ids[static_cast<std::size_t>(q)]);
    const auto order = rank_keys(rs, q);
    std::vector<int> hit(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) hit[r] = rel.count(rs.key_ids[order[r]]) ? 1 : 0;
    for (std::size_t r = 0; r < hit.size(); ++r) {
      if (hit[r]) {
        m.mrr += 1.0 / static_cast<double>(r + 1) / nq;
        break;
      }
    }
    for (int k : ks) {
      const std::size_t cut = std::min<std::size_t>(static_cast<std::size_t>(k), hit.size());
      double hits = 0.0, precision_sum = 0.0;
      for (std::size_t r = 0; r < cut; ++r) {
        if (hit[r]) {
          hits += 1.0;
          precision_sum += hits / static_cast<double>(r + 1);
        }
      }
      m.recall[k] += (hits > 0.0 ? 1.0 : 0.0) / nq;
      m.mean_ap[k] += precision_sum / static_cast<double>(std::min<std::size_t>(rel.size(), static_cast<std::size_t>(k))) / nq;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Interchange files

struct EmbeddingSet {
  std::vector<std::uint64_t> ids;
  RealMatrix vectors;
};

inline void write_embedding_set(const EmbeddingSet& s, const std::string& path) {
  if (s.vectors.rows() != static_cast<Eigen::Index>(s.ids.size())) throw DimensionError("embedding set id/row mismatch");
  io::ByteWriter w;
  w.bytes("EMB1");
  w.u16(1);
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(s.ids.size()));
  w.u32(static_cast<std::uint32_t>(s.vectors.cols()));
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    w.u64(s.ids[i]);
    for (Eigen::Index c = 0; c < s.vectors.cols(); ++c) w.f32(static_cast<float>(s.vectors(static_cast<Eigen::Index>(i), c)));
  }
  w.save(path);
}

inline EmbeddingSet read_embedding_set(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  io::expect_magic(r, "EMB1");
  if (const auto v = r.u16(); v != 1) throw FormatError("unsupported EMB1 version " + std::to_string(v));
  r.skip(2);
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  if (r.remaining() != static_cast<std::size_t>(count) * (8 + 4 * static_cast<std::size_t>(dim))) {
    throw FormatError("EMB1 payload size does not match header in '" + path + "'");
  }
  EmbeddingSet s;
  s.ids.resize(count);
  s.vectors.resize(count, dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    s.ids[i] = r.u64();
    for (std::uint32_t c = 0; c < dim; ++c) s.vectors(i, c) = r.f32();
  }
  return s;
}

inline void write_relevance(const std::map<std::uint64_t, std::set<std::uint64_t>>& rel, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& [q, keys] : rel) {
    for (auto k : keys) out << q << ' ' << k << '\n';
  }
}

inline std::map<std::uint64_t, std::set<std::uint64_t>> read_relevance(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::map<std::uint64_t, std::set<std::uint64_t>> rel;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::uint64_t q = 0, k = 0;
    if (!(row >> q >> k)) throw FormatError("relevance file '" + path + "' line " + std::to_string(lineno) + " is malformed");
    rel[q].insert(k);
  }
  return rel;
}

/// Tab-separated table with a header row.
inline void write_table(const std::string& path, const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "\t" : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "\t" : "") << row[i];
    out << '\n';
  }
}

}  // namespace evclip
