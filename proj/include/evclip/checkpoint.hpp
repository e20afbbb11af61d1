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

// EVCK checkpoint archives.
//
//   char[4]  magic "EVCK"
//   u16      version (1)
//   u16      reserved, zero
//   u32      metadata length L
//   u8[L]    metadata, compact JSON (arch, roles, flags, step, rng state)
//   u32      tensor count
//   per tensor, in name order:
//     u16 name length, name bytes, u32 rows, u32 cols, rows*cols f64 (row-major)
//   u64      FNV-1a 64 of every preceding byte
//
// All integers and floats are little-endian. Saving the same state twice
// yields identical bytes.

#include <map>
#include <string>

#include <json.hpp>

#include "evclip/binary_io.hpp"
#include "evclip/encoders.hpp"

namespace evclip {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, RealMatrix> tensors;
};

namespace detail {

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

inline io::ByteWriter encode_archive(const Archive& a) {
  io::ByteWriter w;
  w.bytes("EVCK");
  w.u16(kCheckpointVersion);
  w.u16(0);
  const std::string meta = a.meta.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  w.u32(static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& [name, m] : a.tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
  }
  w.u64(detail::fnv1a(w.data().data(), w.size()));
  return w;
}

/// Checks magic, version and the trailing checksum, then parses.
inline Archive decode_archive(const std::vector<char>& bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 20) throw FormatError("checkpoint '" + origin + "' is truncated");
  io::ByteReader r(std::vector<char>(bytes.begin(), bytes.end() - 8), origin);
  io::expect_magic(r, "EVCK");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint '" + origin + "' has version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  io::ByteReader trailer(std::vector<char>(bytes.end() - 8, bytes.end()), origin);
  if (trailer.u64() != detail::fnv1a(bytes.data(), bytes.size() - 8)) {
    throw FormatError("checkpoint '" + origin + "' is corrupt (checksum mismatch)");
  }
  r.skip(2);
  Archive a;
  const std::uint32_t meta_len = r.u32();
  try {
    a.meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + origin + "' has corrupt metadata: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.bytes(r.u16());
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols * 8 > r.remaining()) {
      throw FormatError("checkpoint '" + origin + "' tensor '" + name + "' exceeds file size");
    }
    RealMatrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
    a.tensors.emplace(name, std::move(m));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint '" + origin + "' has trailing bytes");
  return a;
}

inline void save_archive(const Archive& a, const std::string& path) { encode_archive(a).save(path); }

inline Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes, path);
}

inline nlohmann::json arch_to_json(const EncoderArch& a) {
  return {{"image_size", a.image_size}, {"patch", a.patch},         {"depth", a.depth},
          {"width", a.width},           {"heads", a.heads},         {"mlp_ratio", a.mlp_ratio},
          {"z", a.z},                   {"vocab", a.vocab},         {"text_width", a.text_width}};
}

inline EncoderArch arch_from_json(const nlohmann::json& j) {
  EncoderArch a;
  try {
    a.image_size = j.at("image_size").get<int>();
    a.patch = j.at("patch").get<int>();
    a.depth = j.at("depth").get<int>();
    a.width = j.at("width").get<int>();
    a.heads = j.at("heads").get<int>();
    a.mlp_ratio = j.at("mlp_ratio").get<int>();
    a.z = j.at("z").get<int>();
    a.vocab = j.at("vocab").get<int>();
    a.text_width = j.at("text_width").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint architecture is incomplete: ") + e.what());
  }
  return a;
}

/// Stores an encoder under `prefix` (e.g. "image/") inside an archive.
inline void put_encoder(Archive& a, const std::string& prefix, const EncoderParams& p) {
  a.meta["encoders"][prefix] = {{"arch", arch_to_json(p.arch)}, {"role", role_name(p.role)}, {"frozen", p.frozen}};
  for (const auto& [name, m] : p.params) a.tensors[prefix + name] = m;
}

inline EncoderParams get_encoder(const Archive& a, const std::string& prefix) {
  if (!a.meta.contains("encoders") || !a.meta["encoders"].contains(prefix)) {
    throw FormatError("checkpoint holds no encoder '" + prefix + "'");
  }
  const auto& j = a.meta["encoders"][prefix];
  EncoderParams p;
  p.arch = arch_from_json(j.at("arch"));
  p.role = parse_role(j.at("role").get<std::string>());
  p.frozen = j.at("frozen").get<bool>();
  for (auto it = a.tensors.lower_bound(prefix); it != a.tensors.end() && it->first.rfind(prefix, 0) == 0; ++it) {
    p.params.add(it->first.substr(prefix.size()), it->second);
  }
  if (p.params.num_arrays() == 0) throw FormatError("encoder '" + prefix + "' has no tensors");
  return p;
}

inline void save_encoder(const EncoderParams& p, const std::string& path) {
  Archive a;
  a.meta["kind"] = "encoder";
  put_encoder(a, "encoder/", p);
  save_archive(a, path);
}

inline EncoderParams load_encoder(const std::string& path) { return get_encoder(load_archive(path), "encoder/"); }

}  // namespace evclip
