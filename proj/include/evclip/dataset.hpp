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

// Paired (image, event, class, prompt) samples and the on-disk dataset layout.
//
// A dataset directory holds:
//   classes.tsv            class_id <TAB> name <TAB> split (train|heldout)
//   train.manifest.tsv     id <TAB> image <TAB> event <TAB> class <TAB> prompt
//   heldout.manifest.tsv   same columns
//   images/*.pgm           binary PGM (P5), 8-bit
//   events/*.evt           EVT1 event files
// Paths in manifests are relative to the dataset directory. External data can
// be dropped in by writing the same files.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "evclip/event_io.hpp"

namespace evclip {

struct PairedSample {
  std::uint64_t id = 0;
  int class_id = 0;
  std::string prompt;
  Image image;
  EventStream stream;
  EventFrame event;
};

struct Dataset {
  std::vector<std::string> class_names;  // indexed by global class id
  std::vector<int> classes;              // class ids present in this split, ascending
  std::vector<PairedSample> samples;

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.class_id);
    return out;
  }
};

struct SplitDataset {
  Dataset train;
  Dataset heldout;
};

inline std::string fill_template(const std::string& tmpl, const std::string& name) {
  const std::string key = "{class}";
  const auto pos = tmpl.find(key);
  if (pos == std::string::npos || tmpl.find(key, pos + 1) != std::string::npos) {
    throw ConfigError("prompt template must contain exactly one {class} placeholder: '" + tmpl + "'");
  }
  return tmpl.substr(0, pos) + name + tmpl.substr(pos + key.size());
}

// ---------------------------------------------------------------------------
// PGM

inline void write_pgm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "P5\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img.data()[i], 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

inline Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw FormatError("'" + path + "' is not an 8-bit P5 PGM");
  in.get();
  Image img(h, w);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const int c = in.get();
    if (c == EOF) throw FormatError("'" + path + "' is truncated");
    img.data()[i] = static_cast<double>(c) / 255.0;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Manifests

inline std::string sample_stem(const PairedSample& s) {
  std::ostringstream os;
  os << "c" << s.class_id << "_" << s.id;
  return os.str();
}

inline void write_dataset(const SplitDataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "events");
  {
    std::ofstream out(fs::path(dir) / "classes.tsv");
    out << "class_id\tname\tsplit\n";
    for (std::size_t c = 0; c < data.train.class_names.size(); ++c) {
      const bool held = std::find(data.heldout.classes.begin(), data.heldout.classes.end(), static_cast<int>(c)) !=
                        data.heldout.classes.end();
      out << c << '\t' << data.train.class_names[c] << '\t' << (held ? "heldout" : "train") << '\n';
    }
  }
  auto write_split = [&](const Dataset& d, const std::string& name) {
    std::ofstream out(fs::path(dir) / (name + ".manifest.tsv"));
    out << "id\timage\tevent\tclass\tprompt\n";
    for (const auto& s : d.samples) {
      const std::string stem = sample_stem(s);
      const std::string image_rel = "images/" + stem + ".pgm";
      const std::string event_rel = "events/" + stem + ".evt";
      write_pgm(s.image, (fs::path(dir) / image_rel).string());
      write_evt(s.stream, (fs::path(dir) / event_rel).string());
      out << s.id << '\t' << image_rel << '\t' << event_rel << '\t' << s.class_id << '\t' << s.prompt << '\n';
    }
  };
  write_split(data.train, "train");
  write_split(data.heldout, "heldout");
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) out.push_back(cell);
  return out;
}

}  // namespace detail

/// Loads one split ("train" or "heldout"); event frames are built with `clamp_cap`.
inline Dataset read_dataset_split(const std::string& dir, const std::string& split, std::int64_t clamp_cap) {
  namespace fs = std::filesystem;
  Dataset d;
  {
    std::ifstream in(fs::path(dir) / "classes.tsv");
    if (!in) throw DataError("dataset '" + dir + "' has no classes.tsv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = detail::split_tabs(line);
      if (cells.size() != 3) throw FormatError("bad classes.tsv row: '" + line + "'");
      const int id = std::stoi(cells[0]);
      if (id != static_cast<int>(d.class_names.size())) throw FormatError("classes.tsv ids must be 0..n-1 in order");
      d.class_names.push_back(cells[1]);
      if (cells[2] == split) d.classes.push_back(id);
    }
  }
  const fs::path manifest = fs::path(dir) / (split + ".manifest.tsv");
  std::ifstream in(manifest);
  if (!in) throw DataError("dataset '" + dir + "' has no " + manifest.filename().string());
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_tabs(line);
    if (cells.size() != 5) {
      throw FormatError(manifest.string() + " line " + std::to_string(lineno) + ": expected 5 columns");
    }
    PairedSample s;
    s.id = std::stoull(cells[0]);
    s.image = read_pgm((fs::path(dir) / cells[1]).string());
    s.stream = read_evt((fs::path(dir) / cells[2]).string());
    s.class_id = std::stoi(cells[3]);
    s.prompt = cells[4];
    if (s.class_id < 0 || s.class_id >= static_cast<int>(d.class_names.size())) {
      throw DataError(manifest.string() + " line " + std::to_string(lineno) + ": unknown class");
    }
    s.event = events_to_frame(s.stream, clamp_cap);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace evclip
