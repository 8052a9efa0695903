#include <gtest/gtest.h>

#include <cmath>

#include "nepa/objective.hpp"
#include "nepa/ops.hpp"
#include "test_util.hpp"

using namespace nepa;
using nepa::testing::random_tensor;
using nepa::testing::uniform_images;

namespace {

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.dim = 32;
  cfg.depth = 2;
  cfg.heads = 4;
  return cfg;
}

Tensor seq(std::initializer_list<double> v, std::int64_t t, std::int64_t d) {
  return Tensor::from_values({1, t, d}, v);
}

}  // namespace

TEST(ShiftPairs, TwoPositionsGiveOnePair) {
  auto pred = seq({1, 2, 3, 4}, 2, 2);
  auto tgt = seq({5, 6, 7, 8}, 2, 2);
  auto [p, t] = shift_pairs(pred, tgt);
  EXPECT_EQ(p.to_vector(), (std::vector<double>{1, 2}));
  EXPECT_EQ(t.to_vector(), (std::vector<double>{7, 8}));
}

TEST(ShiftPairs, FivePositionsAlignOneAhead) {
  auto pred = seq({0, 1, 2, 3, 4}, 5, 1);
  auto tgt = seq({10, 11, 12, 13, 14}, 5, 1);
  auto [p, t] = shift_pairs(pred, tgt);
  EXPECT_EQ(p.to_vector(), (std::vector<double>{0, 1, 2, 3}));
  EXPECT_EQ(t.to_vector(), (std::vector<double>{11, 12, 13, 14}));
}

TEST(ShiftPairs, DisabledReturnsInputs) {
  auto pred = seq({0, 1, 2}, 3, 1);
  auto tgt = seq({4, 5, 6}, 3, 1);
  auto [p, t] = shift_pairs(pred, tgt, false);
  EXPECT_TRUE(p.same_node(pred));
  EXPECT_TRUE(t.same_node(tgt));
}

TEST(ShiftPairs, SinglePositionRejected) {
  auto x = seq({1, 2}, 1, 2);
  EXPECT_THROW(shift_pairs(x, x), ObjectiveError);
  EXPECT_THROW(nepa_loss(x, x, ObjectiveConfig{}), ObjectiveError);
}

TEST(NepaLoss, IdenticalAlignedRowsGiveMinusOne) {
  auto z = random_tensor({3, 6, 8}, 1);
  // h_out[t] = 2 z[t+1]; the last row is never compared.
  auto h = concat({scale(slice(z, 1, 1, 6), 2.0), random_tensor({3, 1, 8}, 2)}, 1);
  EXPECT_NEAR(nepa_loss(z, h, {}).item(), -1.0, 1e-12);
}

TEST(NepaLoss, OrthogonalRowsGiveZero) {
  auto z = seq({0, 1, 0, 1}, 2, 2);
  auto h = seq({1, 0, 5, 5}, 2, 2);
  EXPECT_NEAR(nepa_loss(z, h, {}).item(), 0.0, 1e-15);
}

TEST(NepaLoss, FortyFiveDegrees) {
  auto z = seq({9, 9, 1, 1}, 2, 2);
  auto h = seq({1, 0, 3, 3}, 2, 2);
  EXPECT_NEAR(nepa_loss(z, h, {}).item(), -1.0 / std::sqrt(2.0), 1e-12);
}

TEST(NepaLoss, BoundedOnRandomInputs) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    double l = nepa_loss(random_tensor({2, 7, 5}, s), random_tensor({2, 7, 5}, s + 100), {}).item();
    EXPECT_GE(l, -1.0);
    EXPECT_LE(l, 1.0);
  }
}

TEST(NepaLoss, ScaleInvariant) {
  auto z = random_tensor({2, 5, 6}, 3);
  auto h = random_tensor({2, 5, 6}, 4);
  double base = nepa_loss(z, h, {}).item();
  for (double a : {0.01, 3.0, 250.0})
    for (double b : {0.5, 17.0}) EXPECT_NEAR(nepa_loss(scale(z, a), scale(h, b), {}).item(), base, 1e-6);
}

TEST(NepaLoss, NonFiniteRejected) {
  auto z = random_tensor({1, 3, 2}, 5);
  auto h = random_tensor({1, 3, 2}, 6);
  z.mutable_data<double>()[1] = std::nan("");
  EXPECT_THROW(nepa_loss(z, h, {}), NumericError);
  EXPECT_THROW(nepa_loss(h, z, {}), NumericError);
}

TEST(NepaLoss, StopGradBlocksTargetGradient) {
  auto z = random_tensor({2, 4, 3}, 7);
  auto h = random_tensor({2, 4, 3}, 8);
  z.set_requires_grad(true);
  h.set_requires_grad(true);
  GradTape tape;
  {
    TapeScope scope(tape);
    tape.backward(nepa_loss(z, h, {}));
  }
  for (double g : z.grad().to_vector()) EXPECT_EQ(g, 0.0);
  double hsum = 0;
  for (double g : h.grad().to_vector()) hsum += std::abs(g);
  EXPECT_GT(hsum, 0.0);

  ObjectiveConfig open;
  open.stop_grad = false;
  z.zero_grad();
  GradTape tape2;
  {
    TapeScope scope(tape2);
    tape2.backward(nepa_loss(z, h, open));
  }
  double zsum = 0;
  for (double g : z.grad().to_vector()) zsum += std::abs(g);
  EXPECT_GT(zsum, 0.0);
}

TEST(NepaLoss, GradientMatchesFiniteDifferences) {
  for (bool stop : {true, false}) {
    ObjectiveConfig cfg;
    cfg.stop_grad = stop;
    auto h = random_tensor({2, 4, 3}, 9);
    auto z = random_tensor({2, 4, 3}, 10);
    EXPECT_LT(finite_diff_check([&](const Tensor& x) { return nepa_loss(z, x, cfg); }, h), 1e-6);
    if (!stop) EXPECT_LT(finite_diff_check([&](const Tensor& x) { return nepa_loss(x, h, cfg); }, z), 1e-6);
  }
}

TEST(NepaLoss, StopGradMatchesManuallyDetachedTargets) {
  auto bcfg = small_config();
  Rng rng(11);
  auto params = BackboneParams::init(bcfg, rng, DType::f64);
  params.set_requires_grad(true);
  auto images = normalize_pixels(uniform_images({2, 3, 16, 16}, 12));

  auto run = [&](bool manual) {
    params.patch_weight.zero_grad();
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss;
    if (manual) {
      Tensor z_inputs = embed(patchify(images, bcfg.patch_size), params);
      Tensor z_targets;
      {
        TapeScope off(nullptr);
        z_targets = embed(patchify(images, bcfg.patch_size), params);
      }
      ObjectiveConfig open;
      open.stop_grad = false;
      loss = nepa_loss(z_targets, predict(z_inputs, params, bcfg).h_out, open);
    } else {
      auto fwd = forward(images, params, bcfg);
      loss = nepa_loss(fwd.z, fwd.h_out, {});
    }
    tape.backward(loss);
    return std::pair{loss.item(), params.patch_weight.grad().to_vector()};
  };
  auto [la, ga] = run(false);
  auto [lb, gb] = run(true);
  EXPECT_EQ(la, lb);
  ASSERT_EQ(ga.size(), gb.size());
  double norm = 0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    EXPECT_NEAR(ga[i], gb[i], 1e-14);
    norm += std::abs(ga[i]);
  }
  EXPECT_GT(norm, 0.0);
}

TEST(MaskInputs, ZeroRatioLeavesInputs) {
  auto z = random_tensor({2, 16, 4}, 13);
  Rng rng(1);
  auto token = init_mask_token(4, rng, DType::f64);
  auto out = mask_inputs(z, 0.0, token, rng);
  EXPECT_TRUE(bit_equal(out.z_masked, z));
  for (auto m : out.mask) EXPECT_EQ(m, 0);
}

TEST(MaskInputs, HalfOfSixteenMasked) {
  auto z = random_tensor({3, 16, 4}, 14);
  Rng rng(2);
  auto token = init_mask_token(4, rng, DType::f64);
  auto out = mask_inputs(z, 0.5, token, rng);
  auto zm = out.z_masked.to_vector();
  auto zv = z.to_vector();
  auto tv = token.to_vector();
  for (int b = 0; b < 3; ++b) {
    int count = 0;
    for (int t = 0; t < 16; ++t) {
      bool masked = out.mask[static_cast<std::size_t>(b * 16 + t)] != 0;
      count += masked;
      for (int d = 0; d < 4; ++d) {
        auto i = static_cast<std::size_t>((b * 16 + t) * 4 + d);
        EXPECT_EQ(zm[i], masked ? tv[static_cast<std::size_t>(d)] : zv[i]);
      }
    }
    EXPECT_EQ(count, 8);
  }
}

TEST(MaskInputs, FloorOfRatio) {
  auto z = random_tensor({1, 10, 2}, 15);
  Rng rng(3);
  auto token = init_mask_token(2, rng, DType::f64);
  auto out = mask_inputs(z, 0.45, token, rng);
  int count = 0;
  for (auto m : out.mask) count += m;
  EXPECT_EQ(count, 4);
  EXPECT_THROW(mask_inputs(z, 1.0, token, rng), ConfigError);
  EXPECT_THROW(mask_inputs(z, -0.1, token, rng), ConfigError);
}

TEST(MaskInputs, SameSeedSameMask) {
  auto z = random_tensor({4, 16, 2}, 16);
  Rng r0(5);
  auto token = init_mask_token(2, r0, DType::f64);
  Rng a(77), b(77), c(78);
  auto ma = mask_inputs(z, 0.4, token, a).mask;
  EXPECT_EQ(ma, mask_inputs(z, 0.4, token, b).mask);
  EXPECT_NE(ma, mask_inputs(z, 0.4, token, c).mask);
}

TEST(MaskInputs, TokenReceivesGradient) {
  auto bcfg = small_config();
  Rng rng(17);
  auto params = BackboneParams::init(bcfg, rng, DType::f64);
  auto token = init_mask_token(bcfg.dim, rng, DType::f64);
  ObjectiveConfig cfg;
  cfg.mask_ratio = 0.5;
  GradTape tape;
  TapeScope scope(tape);
  auto step = training_step_forward(random_tensor({2, 3, 16, 16}, 18), params, bcfg, cfg, token, rng);
  tape.backward(step.loss);
  double s = 0;
  for (double g : token.grad().to_vector()) s += std::abs(g);
  EXPECT_GT(s, 0.0);
  EXPECT_EQ(step.mask.size(), 2u * 16u);
}

TEST(TrainingStep, FreshInitLossNearZero) {
  auto bcfg = small_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto params = BackboneParams::init(bcfg, rng);
    auto token = init_mask_token(bcfg.dim, rng);
    auto images = normalize_pixels(uniform_images({4, 3, 16, 16}, 1000 + seed, DType::f32));
    auto step = training_step_forward(images, params, bcfg, {}, token, rng);
    double l = step.loss.item();
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GE(l, -0.5) << "seed " << seed;
    EXPECT_LE(l, 0.5) << "seed " << seed;
  }
}

TEST(TargetSpread, IdenticalRowsHaveZeroSpread) {
  auto row = random_tensor({1, 1, 6}, 19);
  auto z = concat({row, scale(row, 2.0), scale(row, 0.1)}, 1);
  EXPECT_NEAR(target_spread(z), 0.0, 1e-12);
  EXPECT_GT(target_spread(random_tensor({2, 8, 6}, 20)), 0.1);
}
