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

// Event streams and the single-frame grayscale representation.
//
// Coordinates: x is the column, y is the row. All grids are stored row-major
// with shape (height, width), so counts(y, x) is the pixel at column x, row y.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "evclip/errors.hpp"

namespace evclip {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Grayscale image with values in [0, 1].
using Image = RealMatrix;

struct Event {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint64_t t = 0;  // microseconds
  std::int8_t p = 1;    // -1 or +1

  friend bool operator==(const Event&, const Event&) = default;
};

struct EventStream {
  int width = 0;
  int height = 0;
  std::vector<Event> events;

  friend bool operator==(const EventStream&, const EventStream&) = default;

  /// Throws DataError naming the first violated invariant.
  void validate() const {
    if (width <= 0 || height <= 0) throw DataError("event stream has non-positive sensor size");
    for (std::size_t i = 0; i < events.size(); ++i) {
      const Event& e = events[i];
      if (e.x >= width || e.y >= height) {
        throw DataError("event " + std::to_string(i) + " at (" + std::to_string(e.x) + "," +
                        std::to_string(e.y) + ") outside " + std::to_string(width) + "x" +
                        std::to_string(height) + " coordinate range");
      }
      if (e.p != 1 && e.p != -1) {
        throw DataError("event " + std::to_string(i) + " has polarity " + std::to_string(e.p));
      }
      if (i > 0 && e.t < events[i - 1].t) {
        throw DataError("event " + std::to_string(i) + " has decreasing timestamp");
      }
    }
  }
};

/// Per-pixel event counts, shape (height, width).
struct CountGrid {
  CountMatrix counts;

  int height() const { return static_cast<int>(counts.rows()); }
  int width() const { return static_cast<int>(counts.cols()); }
  std::int64_t total() const { return counts.sum(); }
};

/// Normalized frame with every value in [0, 1).
struct EventFrame {
  RealMatrix values;

  int height() const { return static_cast<int>(values.rows()); }
  int width() const { return static_cast<int>(values.cols()); }
};

/// Each event adds one count at its pixel regardless of polarity.
inline CountGrid aggregate_events(const EventStream& stream) {
  if (stream.width <= 0 || stream.height <= 0) {
    throw DataError("event stream has non-positive sensor size");
  }
  CountGrid grid{CountMatrix::Zero(stream.height, stream.width)};
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const Event& e = stream.events[i];
    if (e.x >= stream.width || e.y >= stream.height) {
      throw DataError("event " + std::to_string(i) + " at (" + std::to_string(e.x) + "," +
                      std::to_string(e.y) + ") outside coordinate range");
    }
    grid.counts(e.y, e.x) += 1;
  }
  return grid;
}

/// Caps every pixel count at `cap`. Idempotent.
inline CountGrid clamp_counts(const CountGrid& grid, std::int64_t cap) {
  if (cap <= 0) throw ConfigError("clamp cap must be >= 1, got " + std::to_string(cap));
  return CountGrid{grid.counts.cwiseMin(cap)};
}

/// values = counts / (max(counts) + 1).
inline EventFrame normalize_grid(const CountGrid& grid) {
  if (grid.counts.size() > 0 && grid.counts.minCoeff() < 0) {
    throw DataError("count grid has negative entries");
  }
  const double denom = (grid.counts.size() == 0 ? 0.0 : static_cast<double>(grid.counts.maxCoeff())) + 1.0;
  return EventFrame{grid.counts.cast<double>() / denom};
}

/// aggregate -> optional clamp -> normalize. cap <= 0 disables clamping.
inline EventFrame events_to_frame(const EventStream& stream, std::int64_t cap) {
  CountGrid grid = aggregate_events(stream);
  if (cap > 0) grid = clamp_counts(grid, cap);
  return normalize_grid(grid);
}

}  // namespace evclip
