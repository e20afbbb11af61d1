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

#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>

#include "evclip/event_core.hpp"

namespace evclip {

/// Named real arrays, iterated in lexicographic name order.
class ParamSet {
 public:
  using Map = std::map<std::string, RealMatrix>;

  void add(const std::string& name, RealMatrix value) { arrays_[name] = std::move(value); }
  bool contains(const std::string& name) const { return arrays_.count(name) != 0; }

  RealMatrix& at(const std::string& name) {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw DataError("no parameter named '" + name + "'");
    return it->second;
  }
  const RealMatrix& at(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw DataError("no parameter named '" + name + "'");
    return it->second;
  }

  Map::iterator begin() { return arrays_.begin(); }
  Map::iterator end() { return arrays_.end(); }
  Map::const_iterator begin() const { return arrays_.begin(); }
  Map::const_iterator end() const { return arrays_.end(); }
  std::size_t num_arrays() const { return arrays_.size(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, m] : arrays_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, m] : arrays_) out.add(name, RealMatrix::Zero(m.rows(), m.cols()));
    return out;
  }

  bool same_layout(const ParamSet& other) const {
    if (arrays_.size() != other.arrays_.size()) return false;
    auto it = other.arrays_.begin();
    for (const auto& [name, m] : arrays_) {
      if (it->first != name || it->second.rows() != m.rows() || it->second.cols() != m.cols()) return false;
      ++it;
    }
    return true;
  }

  void require_same_layout(const ParamSet& other, const char* what) const {
    if (!same_layout(other)) throw DimensionError(std::string(what) + ": parameter layouts differ");
  }

  /// this += scale * other
  void axpy(double scale, const ParamSet& other) {
    require_same_layout(other, "axpy");
    auto it = other.arrays_.begin();
    for (auto& [_, m] : arrays_) {
      m += scale * it->second;
      ++it;
    }
  }

  /// Flat scalar view over all arrays in name order, row-major within each.
  double& scalar(std::size_t k) {
    for (auto& [_, m] : arrays_) {
      const auto n = static_cast<std::size_t>(m.size());
      if (k < n) return m.data()[k];
      k -= n;
    }
    throw DataError("scalar index out of range");
  }

  double dot(const ParamSet& other) const {
    require_same_layout(other, "dot");
    double s = 0.0;
    auto it = other.arrays_.begin();
    for (const auto& [_, m] : arrays_) {
      s += m.cwiseProduct(it->second).sum();
      ++it;
    }
    return s;
  }

  double squared_norm() const { return dot(*this); }

  bool all_finite() const {
    for (const auto& [_, m] : arrays_) {
      if (!m.allFinite()) return false;
    }
    return true;
  }

  /// FNV-1a 64 over names, shapes and raw float64 bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [name, m] : arrays_) {
      mix(name.data(), name.size());
      const std::int64_t shape[2] = {m.rows(), m.cols()};
      mix(shape, sizeof(shape));
      mix(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    return h;
  }

  /// Bytewise equality of every array.
  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (!a.same_layout(b)) return false;
    auto it = b.arrays_.begin();
    for (const auto& [_, m] : a.arrays_) {
      if (std::memcmp(m.data(), it->second.data(), static_cast<std::size_t>(m.size()) * sizeof(double)) != 0) {
        return false;
      }
      ++it;
    }
    return true;
  }

 private:
  Map arrays_;
};

}  // namespace evclip
