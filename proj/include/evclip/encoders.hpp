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

// The three-encoder stack: frozen image and text teachers, and a trainable
// event encoder that starts as an exact copy of the image encoder.
//
// Vision encoder: non-overlapping square patches -> linear patch embedding +
// learned positions -> `depth` pre-norm transformer blocks (multi-head
// self-attention, GELU MLP) -> final layer norm -> mean pool -> linear
// projection to z -> L2 normalize.
//
// Text encoder: hashed bag of lowercase whitespace tokens -> mean of token
// embeddings -> dense + tanh -> projection to z -> L2 normalize.

#include <cctype>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evclip/nn_ops.hpp"
#include "evclip/params.hpp"
#include "evclip/random.hpp"

namespace evclip {

using Embedding = Eigen::VectorXd;

enum class Role { image, text, event };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::image: return "image";
    case Role::text: return "text";
    case Role::event: return "event";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "image") return Role::image;
  if (s == "text") return Role::text;
  if (s == "event") return Role::event;
  throw FormatError("unknown encoder role '" + s + "'");
}

struct EncoderArch {
  int image_size = 32;
  int patch = 8;
  int depth = 2;
  int width = 32;
  int heads = 2;
  int mlp_ratio = 2;
  int z = 64;
  int vocab = 512;
  int text_width = 32;

  friend bool operator==(const EncoderArch&, const EncoderArch&) = default;

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  int head_dim() const { return width / heads; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch, "patch");
    positive(depth, "depth");
    positive(width, "width");
    positive(heads, "heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(z, "z");
    positive(vocab, "vocab");
    positive(text_width, "text_width");
    if (image_size % patch != 0) throw ConfigError("image_size must be a multiple of patch");
    if (width % heads != 0) throw ConfigError("width must be a multiple of heads");
  }
};

struct EncoderParams {
  EncoderArch arch;
  Role role = Role::image;
  bool frozen = false;
  ParamSet params;
};

namespace detail {

inline RealMatrix random_matrix(Rng& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  RealMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline std::string block_key(int layer, const char* leaf) { return "blocks." + std::to_string(layer) + "." + leaf; }

inline void require_role(const EncoderParams& p, Role want, const char* op) {
  if (p.role != want) {
    throw DataError(std::string(op) + " requires a " + role_name(want) + " encoder, got " + role_name(p.role));
  }
}

}  // namespace detail

/// Randomly initialized vision encoder (used for the image teacher before pretraining).
inline EncoderParams make_vision_encoder(const EncoderArch& arch, std::uint64_t seed, Role role = Role::image) {
  arch.validate();
  Rng rng(seed);
  const int w = arch.width;
  const int hidden = arch.width * arch.mlp_ratio;
  const int pdim = arch.patch * arch.patch;
  EncoderParams p{arch, role, false, {}};
  auto& ps = p.params;
  ps.add("patch_embed.weight", detail::random_matrix(rng, pdim, w, 1.0 / std::sqrt(pdim)));
  ps.add("patch_embed.bias", RealMatrix::Zero(1, w));
  ps.add("pos_embed", detail::random_matrix(rng, arch.tokens(), w, 0.1));
  for (int l = 0; l < arch.depth; ++l) {
    using detail::block_key;
    ps.add(block_key(l, "ln1.gamma"), RealMatrix::Ones(1, w));
    ps.add(block_key(l, "ln1.beta"), RealMatrix::Zero(1, w));
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
      ps.add(block_key(l, (std::string(name) + ".weight").c_str()), detail::random_matrix(rng, w, w, 1.0 / std::sqrt(w)));
      ps.add(block_key(l, (std::string(name) + ".bias").c_str()), RealMatrix::Zero(1, w));
    }
    ps.add(block_key(l, "ln2.gamma"), RealMatrix::Ones(1, w));
    ps.add(block_key(l, "ln2.beta"), RealMatrix::Zero(1, w));
    ps.add(block_key(l, "mlp.fc1.weight"), detail::random_matrix(rng, w, hidden, 1.0 / std::sqrt(w)));
    ps.add(block_key(l, "mlp.fc1.bias"), RealMatrix::Zero(1, hidden));
    ps.add(block_key(l, "mlp.fc2.weight"), detail::random_matrix(rng, hidden, w, 1.0 / std::sqrt(hidden)));
    ps.add(block_key(l, "mlp.fc2.bias"), RealMatrix::Zero(1, w));
  }
  ps.add("ln_post.gamma", RealMatrix::Ones(1, w));
  ps.add("ln_post.beta", RealMatrix::Zero(1, w));
  ps.add("proj", detail::random_matrix(rng, w, arch.z, 1.0 / std::sqrt(w)));
  return p;
}

inline EncoderParams make_text_encoder(const EncoderArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  const int d = arch.text_width;
  EncoderParams p{arch, Role::text, false, {}};
  p.params.add("token_embed", detail::random_matrix(rng, arch.vocab, d, 1.0));
  p.params.add("dense.weight", detail::random_matrix(rng, d, d, 1.0 / std::sqrt(d)));
  p.params.add("dense.bias", RealMatrix::Zero(1, d));
  p.params.add("proj", detail::random_matrix(rng, d, arch.z, 1.0 / std::sqrt(d)));
  return p;
}

// ---------------------------------------------------------------------------
// Vision forward / backward

struct BlockTrace {
  RealMatrix x_in;
  nn::LayerNormCache ln1;
  RealMatrix h1, q, k, v;
  std::vector<RealMatrix> attn;  // per head, tokens x tokens
  RealMatrix o;
  RealMatrix x_mid;
  nn::LayerNormCache ln2;
  RealMatrix h2, u, g;
};

struct VisionTrace {
  RealMatrix patches;
  std::vector<BlockTrace> blocks;
  RealMatrix x_final;
  nn::LayerNormCache ln_post;
  RealMatrix h_post;
  RealMatrix pooled;  // 1 x width
  Embedding raw;
  double raw_norm = 0.0;
  Embedding out;
};

/// tokens x patch^2, patches in row-major grid order, pixels row-major within a patch.
inline RealMatrix patchify(const RealMatrix& img, int patch) {
  const int g_rows = static_cast<int>(img.rows()) / patch;
  const int g_cols = static_cast<int>(img.cols()) / patch;
  RealMatrix out(g_rows * g_cols, patch * patch);
  for (int gr = 0; gr < g_rows; ++gr) {
    for (int gc = 0; gc < g_cols; ++gc) {
      const int t = gr * g_cols + gc;
      for (int i = 0; i < patch; ++i) {
        for (int j = 0; j < patch; ++j) out(t, i * patch + j) = img(gr * patch + i, gc * patch + j);
      }
    }
  }
  return out;
}

inline Embedding vision_forward(const EncoderParams& p, const RealMatrix& input, VisionTrace* trace = nullptr) {
  const EncoderArch& a = p.arch;
  if (input.rows() != a.image_size || input.cols() != a.image_size) {
    throw DimensionError("encoder expects " + std::to_string(a.image_size) + "x" + std::to_string(a.image_size) +
                         " input, got " + std::to_string(input.rows()) + "x" + std::to_string(input.cols()));
  }
  const ParamSet& ps = p.params;
  VisionTrace local;
  VisionTrace& tr = trace ? *trace : local;
  tr.patches = patchify(input, a.patch);
  RealMatrix x = nn::linear(tr.patches, ps.at("patch_embed.weight"), ps.at("patch_embed.bias")) + ps.at("pos_embed");

  const int dh = a.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  tr.blocks.resize(static_cast<std::size_t>(a.depth));
  for (int l = 0; l < a.depth; ++l) {
    using detail::block_key;
    BlockTrace& b = tr.blocks[static_cast<std::size_t>(l)];
    b.x_in = x;
    b.h1 = nn::layer_norm(x, ps.at(block_key(l, "ln1.gamma")), ps.at(block_key(l, "ln1.beta")), &b.ln1);
    b.q = nn::linear(b.h1, ps.at(block_key(l, "attn.q.weight")), ps.at(block_key(l, "attn.q.bias")));
    b.k = nn::linear(b.h1, ps.at(block_key(l, "attn.k.weight")), ps.at(block_key(l, "attn.k.bias")));
    b.v = nn::linear(b.h1, ps.at(block_key(l, "attn.v.weight")), ps.at(block_key(l, "attn.v.bias")));
    b.o.resize(x.rows(), a.width);
    b.attn.resize(static_cast<std::size_t>(a.heads));
    for (int h = 0; h < a.heads; ++h) {
      const auto qh = b.q.middleCols(h * dh, dh);
      const auto kh = b.k.middleCols(h * dh, dh);
      const auto vh = b.v.middleCols(h * dh, dh);
      RealMatrix& att = b.attn[static_cast<std::size_t>(h)];
      att = nn::softmax_rows((qh * kh.transpose()) * scale);
      b.o.middleCols(h * dh, dh) = att * vh;
    }
    b.x_mid = x + nn::linear(b.o, ps.at(block_key(l, "attn.out.weight")), ps.at(block_key(l, "attn.out.bias")));
    b.h2 = nn::layer_norm(b.x_mid, ps.at(block_key(l, "ln2.gamma")), ps.at(block_key(l, "ln2.beta")), &b.ln2);
    b.u = nn::linear(b.h2, ps.at(block_key(l, "mlp.fc1.weight")), ps.at(block_key(l, "mlp.fc1.bias")));
    b.g = b.u.unaryExpr([](double v) { return nn::gelu(v); });
    x = b.x_mid + nn::linear(b.g, ps.at(block_key(l, "mlp.fc2.weight")), ps.at(block_key(l, "mlp.fc2.bias")));
  }
  tr.x_final = x;
  tr.h_post = nn::layer_norm(x, ps.at("ln_post.gamma"), ps.at("ln_post.beta"), &tr.ln_post);
  tr.pooled = tr.h_post.colwise().mean();
  tr.raw = (tr.pooled * ps.at("proj")).transpose();
  tr.raw_norm = tr.raw.norm();
  if (!(tr.raw_norm > 0.0) || !std::isfinite(tr.raw_norm)) throw NumericalError("vision encoder produced a degenerate embedding");
  tr.out = tr.raw / tr.raw_norm;
  return tr.out;
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(embedding).
inline void vision_backward(const EncoderParams& p, const VisionTrace& tr, const Embedding& d_out, ParamSet& grads) {
  const EncoderArch& a = p.arch;
  const ParamSet& ps = p.params;
  const Embedding d_raw = nn::l2_normalize_backward(d_out, tr.out, tr.raw_norm);
  grads.at("proj").noalias() += tr.pooled.transpose() * d_raw.transpose();
  const RealMatrix d_pooled = d_raw.transpose() * ps.at("proj").transpose();
  const auto tokens = static_cast<double>(tr.h_post.rows());
  RealMatrix d_h = d_pooled.replicate(tr.h_post.rows(), 1) / tokens;
  RealMatrix dx = nn::layer_norm_backward(d_h, tr.ln_post, ps.at("ln_post.gamma"), grads.at("ln_post.gamma"),
                                          grads.at("ln_post.beta"));

  const int dh = a.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = a.depth - 1; l >= 0; --l) {
    using detail::block_key;
    const BlockTrace& b = tr.blocks[static_cast<std::size_t>(l)];
    // MLP branch
    RealMatrix d_g = nn::linear_backward(dx, b.g, ps.at(block_key(l, "mlp.fc2.weight")),
                                         grads.at(block_key(l, "mlp.fc2.weight")), grads.at(block_key(l, "mlp.fc2.bias")));
    const RealMatrix gelu_d = b.u.unaryExpr([](double v) { return nn::gelu_grad(v); });
    const RealMatrix d_u = d_g.cwiseProduct(gelu_d);
    const RealMatrix d_h2 = nn::linear_backward(d_u, b.h2, ps.at(block_key(l, "mlp.fc1.weight")),
                                                grads.at(block_key(l, "mlp.fc1.weight")), grads.at(block_key(l, "mlp.fc1.bias")));
    RealMatrix d_mid = dx + nn::layer_norm_backward(d_h2, b.ln2, ps.at(block_key(l, "ln2.gamma")),
                                                    grads.at(block_key(l, "ln2.gamma")), grads.at(block_key(l, "ln2.beta")));
    // attention branch
    const RealMatrix d_o = nn::linear_backward(d_mid, b.o, ps.at(block_key(l, "attn.out.weight")),
                                               grads.at(block_key(l, "attn.out.weight")), grads.at(block_key(l, "attn.out.bias")));
    RealMatrix d_q(b.q.rows(), b.q.cols()), d_k(b.k.rows(), b.k.cols()), d_v(b.v.rows(), b.v.cols());
    for (int h = 0; h < a.heads; ++h) {
      const RealMatrix& att = b.attn[static_cast<std::size_t>(h)];
      const auto d_oh = d_o.middleCols(h * dh, dh);
      const RealMatrix d_att = d_oh * b.v.middleCols(h * dh, dh).transpose();
      d_v.middleCols(h * dh, dh) = att.transpose() * d_oh;
      const RealMatrix d_s = nn::softmax_rows_backward(d_att, att) * scale;
      d_q.middleCols(h * dh, dh) = d_s * b.k.middleCols(h * dh, dh);
      d_k.middleCols(h * dh, dh) = d_s.transpose() * b.q.middleCols(h * dh, dh);
    }
    RealMatrix d_h1 = nn::linear_backward(d_q, b.h1, ps.at(block_key(l, "attn.q.weight")),
                                          grads.at(block_key(l, "attn.q.weight")), grads.at(block_key(l, "attn.q.bias")));
    d_h1 += nn::linear_backward(d_k, b.h1, ps.at(block_key(l, "attn.k.weight")), grads.at(block_key(l, "attn.k.weight")),
                                grads.at(block_key(l, "attn.k.bias")));
    d_h1 += nn::linear_backward(d_v, b.h1, ps.at(block_key(l, "attn.v.weight")), grads.at(block_key(l, "attn.v.weight")),
                                grads.at(block_key(l, "attn.v.bias")));
    dx = d_mid + nn::layer_norm_backward(d_h1, b.ln1, ps.at(block_key(l, "ln1.gamma")), grads.at(block_key(l, "ln1.gamma")),
                                         grads.at(block_key(l, "ln1.beta")));
  }
  grads.at("pos_embed") += dx;
  nn::linear_backward(dx, tr.patches, ps.at("patch_embed.weight"), grads.at("patch_embed.weight"),
                      grads.at("patch_embed.bias"));
}

inline Embedding encode_image(const EncoderParams& p, const Image& img, VisionTrace* trace = nullptr) {
  detail::require_role(p, Role::image, "encode_image");
  return vision_forward(p, img, trace);
}

inline Embedding encode_event(const EncoderParams& p, const EventFrame& frame, VisionTrace* trace = nullptr) {
  detail::require_role(p, Role::event, "encode_event");
  return vision_forward(p, frame.values, trace);
}

/// Deep copy of the image encoder, relabeled as a trainable event encoder.
inline EncoderParams init_event_encoder(const EncoderParams& image) {
  detail::require_role(image, Role::image, "init_event_encoder");
  EncoderParams e = image;
  e.role = Role::event;
  e.frozen = false;
  return e;
}

// ---------------------------------------------------------------------------
// Text

/// Lowercased whitespace tokens hashed (FNV-1a) into [0, vocab).
inline std::vector<int> tokenize(const std::string& text, int vocab) {
  if (vocab <= 0) throw ConfigError("vocab must be positive");
  std::vector<int> ids;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : tok) {
      h ^= static_cast<unsigned char>(std::tolower(static_cast<unsigned char>(c)));
      h *= 1099511628211ull;
    }
    ids.push_back(static_cast<int>(h % static_cast<std::uint64_t>(vocab)));
  }
  return ids;
}

struct TextTrace {
  std::vector<int> tokens;
  RealMatrix mean;    // 1 x text_width
  RealMatrix hidden;  // 1 x text_width, after tanh
  Embedding raw;
  double raw_norm = 0.0;
  Embedding out;
};

inline Embedding encode_text(const EncoderParams& p, const std::vector<int>& tokens, TextTrace* trace = nullptr) {
  detail::require_role(p, Role::text, "encode_text");
  if (tokens.empty()) throw DataError("encode_text: empty token sequence");
  const ParamSet& ps = p.params;
  const RealMatrix& table = ps.at("token_embed");
  TextTrace local;
  TextTrace& tr = trace ? *trace : local;
  tr.tokens = tokens;
  tr.mean = RealMatrix::Zero(1, table.cols());
  for (int id : tokens) {
    if (id < 0 || id >= table.rows()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    tr.mean += table.row(id);
  }
  tr.mean /= static_cast<double>(tokens.size());
  tr.hidden = nn::linear(tr.mean, ps.at("dense.weight"), ps.at("dense.bias")).array().tanh();
  tr.raw = (tr.hidden * ps.at("proj")).transpose();
  tr.raw_norm = tr.raw.norm();
  if (!(tr.raw_norm > 0.0) || !std::isfinite(tr.raw_norm)) throw NumericalError("text encoder produced a degenerate embedding");
  tr.out = tr.raw / tr.raw_norm;
  return tr.out;
}

inline Embedding encode_text(const EncoderParams& p, const std::string& prompt) {
  return encode_text(p, tokenize(prompt, p.arch.vocab));
}

inline void text_backward(const EncoderParams& p, const TextTrace& tr, const Embedding& d_out, ParamSet& grads) {
  const ParamSet& ps = p.params;
  const Embedding d_raw = nn::l2_normalize_backward(d_out, tr.out, tr.raw_norm);
  grads.at("proj").noalias() += tr.hidden.transpose() * d_raw.transpose();
  const RealMatrix d_hidden = d_raw.transpose() * ps.at("proj").transpose();
  const RealMatrix d_pre = d_hidden.array() * (1.0 - tr.hidden.array().square());
  const RealMatrix d_mean = nn::linear_backward(d_pre, tr.mean, ps.at("dense.weight"), grads.at("dense.weight"),
                                                grads.at("dense.bias"));
  RealMatrix& d_table = grads.at("token_embed");
  const double inv_n = 1.0 / static_cast<double>(tr.tokens.size());
  for (int id : tr.tokens) d_table.row(id) += d_mean.row(0) * inv_n;
}

// ---------------------------------------------------------------------------
// Adapter into an external embedding space

struct AdapterParams {
  RealMatrix weight;      // z_ext x z
  Eigen::VectorXd bias;   // z_ext
};

/// normalize(weight * e + bias)
inline Embedding adapter_apply(const AdapterParams& a, const Embedding& e) {
  if (a.weight.cols() != e.size() || a.weight.rows() != a.bias.size()) {
    throw DimensionError("adapter expects input dim " + std::to_string(a.weight.cols()) + ", got " +
                         std::to_string(e.size()));
  }
  Embedding y = a.weight * e + a.bias;
  const double n = y.norm();
  if (!(n > 0.0)) throw NumericalError("adapter output has zero norm");
  return y / n;
}

/// Ridge least-squares fit of an adapter from paired rows (ours -> external).
inline AdapterParams fit_adapter(const RealMatrix& ours, const RealMatrix& external, double ridge = 1e-6) {
  if (ours.rows() != external.rows() || ours.rows() == 0) throw DimensionError("fit_adapter needs equal, nonzero row counts");
  const Eigen::Index n = ours.rows();
  Eigen::MatrixXd x(n, ours.cols() + 1);
  x.leftCols(ours.cols()) = ours;
  x.col(ours.cols()).setOnes();
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().array() += ridge;
  const Eigen::MatrixXd sol = gram.ldlt().solve(x.transpose() * Eigen::MatrixXd(external));
  AdapterParams a;
  a.weight = sol.topRows(ours.cols()).transpose();
  a.bias = sol.row(ours.cols()).transpose();
  return a;
}

}  // namespace evclip
