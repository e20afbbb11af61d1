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

// Event instances from ordinary video via thresholded frame differencing.
//
// Frame dump container (VFR1), little-endian:
//   0  char[4] magic "VFR1"
//   4  u16     version (1)
//   6  u16     reserved, zero
//   8  u32     frame count
//  12  u16     height
//  14  u16     width
//  then `count` frames of height*width u8, row-major.
//
// Event instance container (EVF1), little-endian:
//   0  char[4] magic "EVF1"
//   4  u16     version (1)
//   6  u16     flags (bit 0: instances carry labels)
//   8  u32     instance count
//  12  u16     height
//  14  u16     width
//  then per instance: start u32, end u32, [label u8], height*width float32.
//
// Label files hold one 0 or 1 per line, one line per frame.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evclip/binary_io.hpp"
#include "evclip/event_core.hpp"

namespace evclip {

using GrayFrame = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BinaryMap = GrayFrame;

struct VideoClip {
  std::vector<GrayFrame> frames;
  std::optional<std::vector<int>> labels;

  void validate() const {
    for (const auto& f : frames) {
      if (f.rows() != frames.front().rows() || f.cols() != frames.front().cols()) {
        throw DimensionError("video frames do not share dimensions");
      }
    }
    if (labels && labels->size() != frames.size()) {
      throw DataError("label count " + std::to_string(labels->size()) + " does not match frame count " +
                      std::to_string(frames.size()));
    }
  }
};

struct EventInstance {
  EventFrame frame;
  std::optional<int> label;
  int start = 0;  // first frame index
  int end = 0;    // one past the last frame index
};

struct IngestConfig {
  int window = 16;
  int stride = 16;
  int threshold = 25;

  void validate() const {
    if (window < 2) throw ConfigError("window must be >= 2, got " + std::to_string(window));
    if (stride < 1) throw ConfigError("stride must be >= 1, got " + std::to_string(stride));
    if (threshold < 0 || threshold > 255) {
      throw ConfigError("threshold must be in [0,255], got " + std::to_string(threshold));
    }
  }
};

/// BT.601 luma, rounded to nearest.
inline std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
}

/// Converts an interleaved RGB buffer (row-major, 3 bytes per pixel).
inline GrayFrame rgb_to_gray(std::span<const std::uint8_t> rgb, int height, int width) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
    throw DimensionError("RGB buffer size does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  GrayFrame out(height, width);
  for (int i = 0; i < height * width; ++i) {
    out.data()[i] = luma(rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]);
  }
  return out;
}

/// 1 where |curr - prev| strictly exceeds threshold.
inline BinaryMap frame_diff(const GrayFrame& prev, const GrayFrame& curr, int threshold) {
  if (prev.rows() != curr.rows() || prev.cols() != curr.cols()) {
    throw DimensionError("frame_diff shape mismatch");
  }
  if (threshold < 0 || threshold > 255) throw ConfigError("threshold must be in [0,255]");
  BinaryMap out(prev.rows(), prev.cols());
  for (Eigen::Index i = 0; i < prev.size(); ++i) {
    const int d = std::abs(static_cast<int>(curr.data()[i]) - static_cast<int>(prev.data()[i]));
    out.data()[i] = d > threshold ? 1 : 0;
  }
  return out;
}

/// Sum of the W-1 consecutive difference maps of a window.
inline CountGrid accumulate_window(std::span<const GrayFrame> frames, int threshold) {
  if (frames.size() < 2) throw ConfigError("window must contain at least 2 frames");
  CountGrid grid{CountMatrix::Zero(frames.front().rows(), frames.front().cols())};
  for (std::size_t i = 1; i < frames.size(); ++i) {
    grid.counts += frame_diff(frames[i - 1], frames[i], threshold).cast<std::int64_t>();
  }
  return grid;
}

inline EventFrame build_event_instance(std::span<const GrayFrame> frames, int threshold) {
  return normalize_grid(accumulate_window(frames, threshold));
}

/// Majority label of a window; an exact tie resolves to 1 (abnormal).
inline int majority_vote_label(std::span<const int> labels) {
  if (labels.empty()) throw DataError("majority vote over an empty window");
  std::size_t ones = 0;
  for (int v : labels) {
    if (v != 0 && v != 1) throw DataError("label " + std::to_string(v) + " is not 0 or 1");
    ones += static_cast<std::size_t>(v);
  }
  return 2 * ones >= labels.size() ? 1 : 0;
}

/// Windows in frame order; a trailing remainder shorter than the window is dropped.
inline std::vector<EventInstance> segment_video(const VideoClip& clip, const IngestConfig& cfg = {}) {
  cfg.validate();
  if (clip.frames.empty()) throw DataError("empty video clip");
  clip.validate();
  const int n = static_cast<int>(clip.frames.size());
  if (n < cfg.window) {
    throw DataError("clip has " + std::to_string(n) + " frames, shorter than window " + std::to_string(cfg.window));
  }
  std::vector<EventInstance> out;
  const std::span<const GrayFrame> all(clip.frames);
  for (int start = 0; start + cfg.window <= n; start += cfg.stride) {
    EventInstance inst;
    inst.start = start;
    inst.end = start + cfg.window;
    inst.frame = build_event_instance(all.subspan(start, cfg.window), cfg.threshold);
    if (clip.labels) {
      inst.label = majority_vote_label(std::span<const int>(*clip.labels).subspan(start, cfg.window));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Containers

inline void write_video_dump(const std::vector<GrayFrame>& frames, const std::string& path) {
  if (frames.empty()) throw DataError("refusing to write an empty frame dump");
  VideoClip{frames, std::nullopt}.validate();
  io::ByteWriter w;
  w.bytes("VFR1");
  w.u16(1);
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(frames.size()));
  w.u16(static_cast<std::uint16_t>(frames.front().rows()));
  w.u16(static_cast<std::uint16_t>(frames.front().cols()));
  for (const auto& f : frames) {
    for (Eigen::Index i = 0; i < f.size(); ++i) w.u8(f.data()[i]);
  }
  w.save(path);
}

inline std::vector<GrayFrame> read_video_dump(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  io::expect_magic(r, "VFR1");
  if (const auto v = r.u16(); v != 1) throw FormatError("unsupported VFR1 version " + std::to_string(v));
  r.skip(2);
  const std::uint32_t count = r.u32();
  const int h = r.u16();
  const int w = r.u16();
  if (r.remaining() != static_cast<std::size_t>(count) * h * w) {
    throw FormatError("VFR1 payload size does not match header in '" + path + "'");
  }
  std::vector<GrayFrame> frames(count, GrayFrame(h, w));
  for (auto& f : frames) {
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = r.u8();
  }
  return frames;
}

inline void write_labels(const std::vector<int>& labels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (int v : labels) out << v << '\n';
}

inline std::vector<int> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line != "0" && line != "1") {
      throw DataError("label file '" + path + "' line " + std::to_string(lineno) + " is not 0 or 1");
    }
    labels.push_back(line == "1" ? 1 : 0);
  }
  return labels;
}

inline void write_instances(const std::vector<EventInstance>& instances, const std::string& path) {
  if (instances.empty()) throw DataError("refusing to write an empty instance set");
  const bool labeled = instances.front().label.has_value();
  const auto h = instances.front().frame.height();
  const auto wd = instances.front().frame.width();
  io::ByteWriter w;
  w.bytes("EVF1");
  w.u16(1);
  w.u16(labeled ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(instances.size()));
  w.u16(static_cast<std::uint16_t>(h));
  w.u16(static_cast<std::uint16_t>(wd));
  for (const auto& inst : instances) {
    if (inst.label.has_value() != labeled) throw DataError("instances mix labeled and unlabeled entries");
    if (inst.frame.height() != h || inst.frame.width() != wd) throw DimensionError("instance frame size mismatch");
    w.u32(static_cast<std::uint32_t>(inst.start));
    w.u32(static_cast<std::uint32_t>(inst.end));
    if (labeled) w.u8(static_cast<std::uint8_t>(*inst.label));
    for (Eigen::Index i = 0; i < inst.frame.values.size(); ++i) {
      w.f32(static_cast<float>(inst.frame.values.data()[i]));
    }
  }
  w.save(path);
}

inline std::vector<EventInstance> read_instances(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  io::expect_magic(r, "EVF1");
  if (const auto v = r.u16(); v != 1) throw FormatError("unsupported EVF1 version " + std::to_string(v));
  const bool labeled = (r.u16() & 1u) != 0;
  const std::uint32_t count = r.u32();
  const int h = r.u16();
  const int w = r.u16();
  std::vector<EventInstance> out(count);
  for (auto& inst : out) {
    inst.start = static_cast<int>(r.u32());
    inst.end = static_cast<int>(r.u32());
    if (labeled) {
      const int label = r.u8();
      if (label > 1) throw FormatError("EVF1 label out of range in '" + path + "'");
      inst.label = label;
    }
    inst.frame.values.resize(h, w);
    for (Eigen::Index i = 0; i < inst.frame.values.size(); ++i) inst.frame.values.data()[i] = r.f32();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in '" + path + "'");
  return out;
}

}  // namespace evclip
