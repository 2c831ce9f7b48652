// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "expect_error.hpp"
#include "fibro/checkpoint.hpp"
#include "fibro/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fibro;

namespace {

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(ModelConfig, ProfilesValidate) {
  EXPECT_NO_THROW(ModelConfig::paper().validate());
  EXPECT_NO_THROW(ModelConfig::desk().validate());
  const auto p = ModelConfig::paper();
  EXPECT_EQ(p.token_dim, 256u);
  EXPECT_EQ(p.heads, 4u);
  EXPECT_EQ(p.base_width, 8u);
  EXPECT_EQ(p.input_extents, (Extents{200, 200, 44}));
  const auto d = ModelConfig::desk();
  EXPECT_EQ(d.token_dim, 16u);
  EXPECT_EQ(d.heads, 2u);
  EXPECT_EQ(d.intra_layers, 1u);
  EXPECT_EQ(d.input_extents, (Extents{16, 16, 16}));
}

TEST(ModelConfig, InvalidValuesRejected) {
  auto c = ModelConfig::desk();
  c.heads = 3;
  EXPECT_FIBRO_ERROR(c.validate(), InvalidConfig);
  c = ModelConfig::desk();
  c.alpha = 0.0;
  EXPECT_FIBRO_ERROR(c.validate(), InvalidConfig);
  c = ModelConfig::desk();
  c.dropout = 1.0;
  EXPECT_FIBRO_ERROR(c.validate(), InvalidConfig);
  c = ModelConfig::desk();
  c.stages = 4;
  EXPECT_FIBRO_ERROR(c.validate(), InvalidConfig);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = ModelConfig::desk();
  c.alpha = 0.123456789;
  c.num_classes = 4;
  EXPECT_EQ(model_config_from_json(model_config_to_json(c)), c);
  EXPECT_FIBRO_ERROR(model_config_from_json("{\"token_dim\": 16}"), IncompatibleCheckpoint);
}

TEST(Model, ChannelScheduleAndExtents) {
  EXPECT_EQ(channel_schedule(1, 8), 8u);
  EXPECT_EQ(channel_schedule(5, 8), 128u);
  EXPECT_FIBRO_ERROR(channel_schedule(6, 8), StageOutOfRange);
  EXPECT_FIBRO_ERROR(channel_schedule(0, 8), StageOutOfRange);
  EXPECT_EQ(encoder_output_extents({200, 200, 44}), (Extents{13, 13, 3}));
  EXPECT_EQ(encoder_output_extents({16, 16, 16}), (Extents{1, 1, 1}));
}

TEST(Model, ParameterRegistryIsOrderedAndSeeded) {
  const Model a(ModelConfig::desk(), 5), b(ModelConfig::desk(), 5), c(ModelConfig::desk(), 6);
  const auto& ea = a.parameters().entries();
  ASSERT_EQ(ea.size(), b.parameters().entries().size());
  EXPECT_EQ(ea.front().first, "branch.T1WI.stage1.entry.weight");
  EXPECT_EQ(ea.back().first, "head.out.bias");
  bool same = true, differs = false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    same = same && ea[i].second->value == b.parameters().entries()[i].second->value;
    differs = differs || ea[i].second->value != c.parameters().entries()[i].second->value;
  }
  EXPECT_TRUE(same);
  EXPECT_TRUE(differs);
  EXPECT_NE(a.parameters().find("proxy.DWI.calib.sigma"), nullptr);
  EXPECT_EQ(a.parameters().find("nope"), nullptr);
}

TEST(Model, InitializationRanges) {
  const Model m(ModelConfig::desk(), 1);
  for (const auto& [name, t] : m.parameters().entries()) {
    const bool conv = t->shape.size() == 5;
    if (conv) {
      const double fan_in = static_cast<double>(t->shape[1] * 27);
      const double bound = std::sqrt(6.0 / fan_in);
      for (double v : t->value) EXPECT_LE(std::fabs(v), bound) << name;
    }
    if (name.ends_with("calib.mu")) EXPECT_TRUE(std::all_of(t->value.begin(), t->value.end(), [](double v) { return v == 0; }));
    if (name.ends_with("calib.sigma") || name.ends_with("calib.weight") || name.ends_with("gain"))
      EXPECT_TRUE(std::all_of(t->value.begin(), t->value.end(), [](double v) { return v == 1; })) << name;
  }
}

TEST(Model, ForwardShapeAndMissingModalityIsolation) {
  const Model m(ModelConfig::desk(), 2);
  Rng rng(3);
  const auto b = fibro::testing::random_bundle(rng, {16, 16, 16}, {1, 0, 1});
  const auto logits = m.logits(b);
  ASSERT_EQ(logits.size(), 2u);
  auto garbage = b;
  std::fill(garbage.volumes[1].begin(), garbage.volumes[1].end(), std::nanf(""));
  EXPECT_TRUE(bitwise_equal(m.logits(garbage), logits));
  auto none = b;
  none.mask = {0, 0, 0};
  EXPECT_FIBRO_ERROR(m.logits(none), AllModalitiesMissing);
}

TEST(Model, EveryMaskPatternEvaluates) {
  const Model m(ModelConfig::desk(), 4);
  Rng rng(5);
  for (int bits = 1; bits < 8; ++bits) {
    const std::array<std::uint8_t, 3> mask{std::uint8_t(bits & 1), std::uint8_t((bits >> 1) & 1), std::uint8_t((bits >> 2) & 1)};
    const auto l = m.logits(fibro::testing::random_bundle(rng, {16, 16, 16}, mask));
    EXPECT_TRUE(std::isfinite(l[0]) && std::isfinite(l[1]));
  }
}

TEST(Model, SmallInputCannotDownsample) {
  auto cfg = ModelConfig::desk();
  const Model m(cfg, 1);
  Rng rng(1);
  EXPECT_FIBRO_ERROR(m.logits(fibro::testing::random_bundle(rng, {4, 16, 16}, {1, 1, 1})), InputTooSmall);
}

TEST(Model, CalibrationIsIdentityAtInit) {
  const Model m(ModelConfig::desk(), 7);
  Rng rng(8);
  std::normal_distribution<double> nd(0.0, 3.0);
  auto t = zeros_tensor({9, 16});
  for (auto& v : t->value) v = nd(rng);
  Tape tape(false);
  const auto d = calibrate(tape, t, m.branch(0).calibration, m.config().eps);
  for (std::size_t i = 0; i < t->size(); ++i) EXPECT_LE(std::fabs(d->value[i] - t->value[i]), 1e-7 * std::fabs(t->value[i]));
}

TEST(Model, BlocksAndProxyMatchStraightLineOracles) {
  const Model m(ModelConfig::desk(), 9);
  Rng rng(10);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto x = zeros_tensor({5, 16});
  for (auto& v : x->value) v = nd(rng);
  Tape tape(false);
  const auto ours = transformer_stack(tape, x, m.branch(1).blocks, 2, {});
  std::vector<oracle::Block> blocks;
  for (const auto& b : m.branch(1).blocks) blocks.push_back(oracle::block_of(b));
  EXPECT_LT(oracle::max_abs_diff(ours->value, oracle::stack(oracle::from_tensor(*x), blocks, 2).v), 1e-10);

  const auto& px = m.proxy(2);
  const auto p = proxy_synthesize(tape, x, px, 0.3, 1e-8, 2, {});
  const auto ref = oracle::proxy(oracle::from_tensor(*x), oracle::attn_of(px.attn), oracle::calib_of(px.calibration),
                                 oracle::ffn_of(px.ffn), 0.3, 1e-8, 2);
  EXPECT_LT(oracle::max_abs_diff(p->value, ref.v), 1e-10);
}

TEST(Model, ReferenceAverageTruncates) {
  Tape tape(false);
  const auto a = make_tensor({3, 2}, {1, 2, 3, 4, 5, 6});
  const auto b = make_tensor({2, 2}, {3, 4, 5, 6});
  const std::vector<TensorPtr> both{a, b};
  EXPECT_EQ(reference_average(tape, both)->value, (std::vector<double>{2, 3, 4, 5}));
  EXPECT_FIBRO_ERROR(reference_average(tape, std::vector<TensorPtr>{}), EmptyAvailableSet);
  const std::array<TensorPtr, 3> seqs{a, b, a};
  const auto fused = fuse_tokens(tape, seqs);
  EXPECT_EQ(fused->shape, (Shape{6, 2}));
  EXPECT_EQ(fused->value, (std::vector<double>{1, 2, 3, 4, 3, 4, 5, 6, 1, 2, 3, 4}));
}

TEST(Model, DropoutOnlyInTraining) {
  const Model m(ModelConfig::desk(), 11);
  Rng rng(12), drop_rng(13);
  const auto b = fibro::testing::random_bundle(rng, {16, 16, 16}, {1, 1, 1});
  Tape t1(false), t2(false);
  EXPECT_TRUE(bitwise_equal(m.forward(t1, b, {0.1, false, &drop_rng})->value, m.logits(b)));
  EXPECT_FALSE(bitwise_equal(m.forward(t2, b, {0.5, true, &drop_rng})->value, m.logits(b)));
}

TEST(Checkpoint, RoundTripAndModelRestore) {
  fibro::testing::TempDir dir("ckpt");
  Model m(ModelConfig::desk(), 21);
  const auto ck = make_checkpoint(m, "cirrhosis");
  save_checkpoint(dir.str("m.ckpt"), ck);
  const auto back = load_checkpoint(dir.str("m.ckpt"));
  EXPECT_EQ(back, ck);
  const Model restored = model_from_checkpoint(back);
  // Restored values are the float32-rounded originals.
  for (const auto& [name, t] : m.parameters().entries())
    for (auto& v : t->value) v = static_cast<float>(v);
  Rng rng(1);
  const auto b = fibro::testing::random_bundle(rng, {16, 16, 16}, {0, 1, 1});
  EXPECT_TRUE(bitwise_equal(restored.logits(b), m.logits(b)));
}

TEST(Checkpoint, MalformedInputRejected) {
  const Model m(ModelConfig::desk(), 1);
  const auto bytes = encode_checkpoint(make_checkpoint(m, "cirrhosis"));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_FIBRO_ERROR(decode_checkpoint(bad), IncompatibleCheckpoint);
  EXPECT_FIBRO_ERROR(decode_checkpoint(std::span(bytes).first(bytes.size() - 3)), IncompatibleCheckpoint);
  auto longer = bytes;
  longer.push_back(1);
  EXPECT_FIBRO_ERROR(decode_checkpoint(longer), IncompatibleCheckpoint);
  auto ck = make_checkpoint(m, "cirrhosis");
  ck.params.pop_back();
  EXPECT_FIBRO_ERROR(model_from_checkpoint(ck), IncompatibleCheckpoint);
}
