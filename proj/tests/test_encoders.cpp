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

#include <gtest/gtest.h>

#include <fstream>
#include <functional>

#include "evclip/checkpoint.hpp"
#include "evclip/encoders.hpp"
#include "evclip/event_core.hpp"
#include "test_support.hpp"

namespace evclip {
namespace {

using testing::random_uniform;
using testing::tiny_arch;

// Central differences over every scalar of `params`; returns |g_fd - g| / max(|g_fd|, tiny).
double global_relative_error(ParamSet& params, const ParamSet& analytic, const std::function<double()>& loss,
                             double h = 1e-5) {
  ParamSet fd = params.zeros_like();
  for (std::size_t k = 0; k < params.num_scalars(); ++k) {
    double& v = params.scalar(k);
    const double saved = v;
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    fd.scalar(k) = (up - down) / (2.0 * h);
  }
  ParamSet diff = fd;
  diff.axpy(-1.0, analytic);
  return std::sqrt(diff.squared_norm()) / std::max(std::sqrt(fd.squared_norm()), 1e-300);
}

TEST(VisionEncoder, DeterministicAndUnitNorm) {
  Rng rng(1);
  const auto enc = make_vision_encoder(tiny_arch(), 42);
  const Image img = random_uniform(rng, 16, 16);
  const Embedding a = encode_image(enc, img);
  const Embedding b = encode_image(enc, img);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 16);
  EXPECT_NEAR(a.norm(), 1.0, 1e-12);
  EXPECT_EQ(make_vision_encoder(tiny_arch(), 42).params, enc.params);
  EXPECT_FALSE(make_vision_encoder(tiny_arch(), 43).params == enc.params);
}

TEST(VisionEncoder, OnePixelChangesOutput) {
  Rng rng(2);
  const auto enc = make_vision_encoder(tiny_arch(), 7);
  Image img = random_uniform(rng, 16, 16);
  const Embedding a = encode_image(enc, img);
  img(5, 9) += 0.5;
  EXPECT_GT((encode_image(enc, img) - a).norm(), 0.0);
}

TEST(VisionEncoder, WrongInputSizeIsDimensionError) {
  const auto enc = make_vision_encoder(tiny_arch(), 1);
  EXPECT_THROW(encode_image(enc, Image::Zero(15, 16)), DimensionError);
}

TEST(VisionEncoder, RoleMismatchRejected) {
  const auto img_enc = make_vision_encoder(tiny_arch(), 1);
  const EventFrame f{RealMatrix::Zero(16, 16)};
  EXPECT_ANY_THROW(encode_event(img_enc, f));
  const auto ev = init_event_encoder(img_enc);
  EXPECT_ANY_THROW(encode_image(ev, Image::Zero(16, 16)));
  EXPECT_ANY_THROW(init_event_encoder(ev));
}

TEST(InitEventEncoder, CopiesParametersAndMatchesImageEncoder) {
  Rng rng(3);
  auto img_enc = make_vision_encoder(tiny_arch(), 5);
  img_enc.frozen = true;
  const auto ev = init_event_encoder(img_enc);
  EXPECT_EQ(ev.role, Role::event);
  EXPECT_FALSE(ev.frozen);
  EXPECT_EQ(ev.params, img_enc.params);
  const RealMatrix x = random_uniform(rng, 16, 16);
  EXPECT_EQ(encode_event(ev, EventFrame{x}), encode_image(img_enc, x));
}

TEST(InitEventEncoder, CopyIsIsolated) {
  const auto img_enc = make_vision_encoder(tiny_arch(), 5);
  const ParamSet before = img_enc.params;
  auto ev = init_event_encoder(img_enc);
  ev.params.at("proj")(0, 0) += 1.0;
  EXPECT_EQ(img_enc.params, before);
}

TEST(VisionEncoder, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto enc = make_vision_encoder(tiny_arch(), 11);
  // non-trivial LayerNorm and bias parameters so every gradient path is exercised
  for (auto& [name, m] : enc.params) m += 0.05 * random_uniform(rng, static_cast<int>(m.rows()), static_cast<int>(m.cols()), -1, 1);
  const Image img = random_uniform(rng, 16, 16);
  const Embedding w = testing::random_unit_rows(rng, 1, 16).row(0).transpose();

  VisionTrace tr;
  encode_image(enc, img, &tr);
  ParamSet grads = enc.params.zeros_like();
  vision_backward(enc, tr, w, grads);
  const double err = global_relative_error(enc.params, grads, [&] { return w.dot(encode_image(enc, img)); });
  EXPECT_LT(err, 1e-6);
}

TEST(VisionEncoder, KeyBiasHasZeroGradient) {
  // softmax rows are invariant to a shift shared by all keys
  Rng rng(5);
  const auto enc = make_vision_encoder(tiny_arch(), 12);
  VisionTrace tr;
  encode_image(enc, random_uniform(rng, 16, 16), &tr);
  ParamSet grads = enc.params.zeros_like();
  vision_backward(enc, tr, Embedding::Ones(16), grads);
  EXPECT_LT(grads.at("blocks.0.attn.k.bias").cwiseAbs().maxCoeff(), 1e-12);
}

TEST(VisionEncoder, BackwardAccumulates) {
  Rng rng(6);
  const auto enc = make_vision_encoder(tiny_arch(), 13);
  VisionTrace tr;
  encode_image(enc, random_uniform(rng, 16, 16), &tr);
  const Embedding w = Embedding::LinSpaced(16, -1, 1);
  ParamSet once = enc.params.zeros_like();
  vision_backward(enc, tr, w, once);
  ParamSet twice = enc.params.zeros_like();
  vision_backward(enc, tr, w, twice);
  vision_backward(enc, tr, w, twice);
  once.axpy(1.0, once);
  twice.axpy(-1.0, once);
  EXPECT_LT(std::sqrt(twice.squared_norm()), 1e-12);
}

TEST(TextEncoder, TokenizerLowercasesAndHashes) {
  EXPECT_EQ(tokenize("A Photo", 128), tokenize("a photo", 128));
  EXPECT_EQ(tokenize("  a   photo ", 128).size(), 2u);
  EXPECT_TRUE(tokenize("", 128).empty());
  for (int id : tokenize("a photo of a striped disc", 7)) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, 7);
  }
  EXPECT_THROW(tokenize("x", 0), ConfigError);
}

TEST(TextEncoder, DeterministicUnitNormAndErrors) {
  const auto t = make_text_encoder(tiny_arch(), 9);
  const Embedding a = encode_text(t, "a photo of a disc");
  EXPECT_NEAR(a.norm(), 1.0, 1e-12);
  EXPECT_EQ(encode_text(t, "a photo of a disc"), a);
  EXPECT_GT((encode_text(t, "a photo of a cross") - a).norm(), 1e-6);
  EXPECT_THROW(encode_text(t, ""), DataError);
  EXPECT_THROW(encode_text(t, std::vector<int>{128}), DataError);
}

TEST(TextEncoder, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto t = make_text_encoder(tiny_arch(), 10);
  const std::vector<int> tokens = {3, 17, 3, 99};
  const Embedding w = testing::random_unit_rows(rng, 1, 16).row(0).transpose();
  TextTrace tr;
  encode_text(t, tokens, &tr);
  ParamSet grads = t.params.zeros_like();
  text_backward(t, tr, w, grads);
  const double err = global_relative_error(t.params, grads, [&] { return w.dot(encode_text(t, tokens)); });
  EXPECT_LT(err, 1e-6);
}

TEST(NnOps, LayerNormBackwardMatchesFiniteDifferences) {
  Rng rng(8);
  RealMatrix x = random_uniform(rng, 3, 5, -2, 2);
  const RealMatrix gamma = random_uniform(rng, 1, 5, 0.5, 1.5);
  const RealMatrix beta = random_uniform(rng, 1, 5, -1, 1);
  const RealMatrix dy = random_uniform(rng, 3, 5, -1, 1);
  nn::LayerNormCache cache;
  nn::layer_norm(x, gamma, beta, &cache);
  RealMatrix dg = RealMatrix::Zero(1, 5), db = RealMatrix::Zero(1, 5);
  const RealMatrix dx = nn::layer_norm_backward(dy, cache, gamma, dg, db);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = nn::layer_norm(x, gamma, beta, nullptr).cwiseProduct(dy).sum();
    x.data()[i] = saved - h;
    const double down = nn::layer_norm(x, gamma, beta, nullptr).cwiseProduct(dy).sum();
    x.data()[i] = saved;
    EXPECT_NEAR(dx.data()[i], (up - down) / (2 * h), 1e-7);
  }
}

TEST(NnOps, SoftmaxAndGelu) {
  RealMatrix s(1, 3);
  s << 1000.0, 1000.0, 1000.0;
  const RealMatrix p = nn::softmax_rows(s);
  EXPECT_NEAR(p.sum(), 1.0, 1e-15);
  EXPECT_NEAR(p(0, 0), 1.0 / 3.0, 1e-15);
  nn::RowVector v(2);
  v << 1000.0, 1000.0;
  EXPECT_NEAR(nn::log_sum_exp(v), 1000.0 + std::log(2.0), 1e-12);
  for (double u : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    EXPECT_NEAR(nn::gelu_grad(u), (nn::gelu(u + 1e-6) - nn::gelu(u - 1e-6)) / 2e-6, 1e-8);
  }
}

TEST(Adapter, IdentityAndConstantAndFit) {
  Rng rng(9);
  const Embedding e = testing::random_unit_rows(rng, 1, 6).row(0).transpose();
  AdapterParams id{RealMatrix::Identity(6, 6), Eigen::VectorXd::Zero(6)};
  EXPECT_NEAR((adapter_apply(id, e) - e).norm(), 0.0, 1e-15);

  AdapterParams constant{RealMatrix::Zero(3, 6), Eigen::VectorXd::Constant(3, 2.0)};
  const Embedding c = adapter_apply(constant, e);
  EXPECT_NEAR(c.norm(), 1.0, 1e-15);
  EXPECT_NEAR(c(0), 1.0 / std::sqrt(3.0), 1e-15);

  AdapterParams bad{RealMatrix::Zero(3, 5), Eigen::VectorXd::Zero(3)};
  EXPECT_THROW(adapter_apply(bad, e), DimensionError);

  const RealMatrix ours = random_uniform(rng, 40, 6, -1, 1);
  const RealMatrix w_true = random_uniform(rng, 4, 6, -1, 1);
  const RealMatrix ext = (ours * w_true.transpose()).rowwise() + nn::RowVector::Constant(4, 0.3);
  const AdapterParams fit = fit_adapter(ours, ext, 1e-10);
  EXPECT_NEAR((fit.weight - w_true).cwiseAbs().maxCoeff(), 0.0, 1e-6);
  EXPECT_NEAR((fit.bias.array() - 0.3).abs().maxCoeff(), 0.0, 1e-6);
  EXPECT_THROW(fit_adapter(ours, ext.topRows(3)), DimensionError);
}

TEST(Checkpoint, EncoderRoundTripIsBitExact) {
  testing::TempDir dir("ck");
  auto enc = make_vision_encoder(tiny_arch(), 21);
  enc.frozen = true;
  save_encoder(enc, dir / "a.evck");
  const auto back = load_encoder(dir / "a.evck");
  EXPECT_EQ(back.params, enc.params);
  EXPECT_EQ(back.arch, enc.arch);
  EXPECT_EQ(back.role, enc.role);
  EXPECT_TRUE(back.frozen);
  save_encoder(back, dir / "b.evck");
  std::ifstream a(dir / "a.evck", std::ios::binary), b(dir / "b.evck", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
}

TEST(Checkpoint, CorruptionDetected) {
  Archive arc;
  arc.meta["kind"] = "encoder";
  put_encoder(arc, "encoder/", make_text_encoder(tiny_arch(), 1));
  const std::vector<char> good = encode_archive(arc).data();
  EXPECT_NO_THROW(decode_archive(good));

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_archive(flipped), FormatError);

  auto magic = good;
  magic[0] = 'X';
  EXPECT_THROW(decode_archive(magic), FormatError);

  EXPECT_THROW(decode_archive(std::vector<char>(good.begin(), good.begin() + 10)), FormatError);
  EXPECT_THROW(get_encoder(decode_archive(good), "image/"), FormatError);
}

}  // namespace
}  // namespace evclip
