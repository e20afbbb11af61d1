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

// EVT1 event files.
//
// Header (16 bytes, little-endian):
//   0  char[4]  magic "EVT1"
//   4  u16      version (1)
//   6  u16      width
//   8  u16      height
//  10  u8[6]    reserved, zero
// Records (13 bytes each, packed): x u16, y u16, t u64 (microseconds), p i8.
// The event count is (file size - 16) / 13.
//
// CSV mirror: first line "# width=W height=H", then one "x,y,t,p" per line.

#include <cstdio>
#include <fstream>
#include <string>

#include "evclip/binary_io.hpp"
#include "evclip/event_core.hpp"

namespace evclip {

inline constexpr std::uint16_t kEvtVersion = 1;
inline constexpr std::size_t kEvtHeaderBytes = 16;
inline constexpr std::size_t kEvtRecordBytes = 13;

inline io::ByteWriter encode_evt(const EventStream& s) {
  s.validate();
  if (s.width > 0xFFFF || s.height > 0xFFFF) throw DataError("sensor size exceeds u16 range");
  io::ByteWriter w;
  w.bytes("EVT1");
  w.u16(kEvtVersion);
  w.u16(static_cast<std::uint16_t>(s.width));
  w.u16(static_cast<std::uint16_t>(s.height));
  w.zeros(6);
  for (const Event& e : s.events) {
    w.u16(e.x);
    w.u16(e.y);
    w.u64(e.t);
    w.i8(e.p);
  }
  return w;
}

inline EventStream decode_evt(io::ByteReader& r) {
  io::expect_magic(r, "EVT1");
  const auto version = r.u16();
  if (version != kEvtVersion) {
    throw FormatError("unsupported EVT1 version " + std::to_string(version) + " in '" + r.origin() + "'");
  }
  EventStream s;
  s.width = r.u16();
  s.height = r.u16();
  r.skip(6);
  if (r.remaining() % kEvtRecordBytes != 0) {
    throw FormatError("EVT1 payload in '" + r.origin() + "' is not a whole number of records");
  }
  const std::size_t n = r.remaining() / kEvtRecordBytes;
  s.events.resize(n);
  for (Event& e : s.events) {
    e.x = r.u16();
    e.y = r.u16();
    e.t = r.u64();
    e.p = r.i8();
  }
  s.validate();
  return s;
}

inline void write_evt(const EventStream& s, const std::string& path) { encode_evt(s).save(path); }

inline EventStream read_evt(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  return decode_evt(r);
}

inline void write_event_csv(const EventStream& s, const std::string& path) {
  s.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "# width=" << s.width << " height=" << s.height << "\n";
  for (const Event& e : s.events) {
    out << e.x << ',' << e.y << ',' << e.t << ',' << static_cast<int>(e.p) << '\n';
  }
}

inline EventStream read_event_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  EventStream s;
  std::string line;
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "# width=%d height=%d", &s.width, &s.height) != 2) {
    throw FormatError("event CSV '" + path + "' lacks the '# width=W height=H' header");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    long long x = 0, y = 0, p = 0;
    unsigned long long t = 0;
    if (std::sscanf(line.c_str(), "%lld,%lld,%llu,%lld", &x, &y, &t, &p) != 4 || x < 0 || y < 0 ||
        x > 0xFFFF || y > 0xFFFF) {
      throw FormatError("bad event record on line " + std::to_string(lineno) + " of '" + path + "'");
    }
    s.events.push_back(Event{static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                             static_cast<std::uint64_t>(t), static_cast<std::int8_t>(p)});
  }
  s.validate();
  return s;
}

}  // namespace evclip
