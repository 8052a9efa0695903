#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "nepa/optim.hpp"
#include "test_util.hpp"

using namespace nepa;
using nepa::testing::random_tensor;

namespace {

Tensor scalar_param(double w) {
  Tensor t = Tensor::from_values({1}, {w});
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor& t, std::vector<double> g) {
  auto gd = t.grad_data<double>();
  std::copy(g.begin(), g.end(), gd.begin());
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "nepa_test_optim";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(AdamW, ZeroGradZeroDecayLeavesParams) {
  auto w = random_tensor({3, 2}, 1);
  w.set_requires_grad(true);
  auto before = w.clone();
  AdamW opt({0.9, 0.95, 1e-8, 0.0}, {{"w", w}});
  set_grad(w, std::vector<double>(6, 0.0));
  opt.step(0.1);
  EXPECT_TRUE(bit_equal(w, before));
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, FirstStepIsSignedLr) {
  auto w = scalar_param(1.0);
  AdamW opt({0.9, 0.95, 1e-8, 0.0}, {{"w", w}});
  set_grad(w, {1.0});
  opt.step(0.1);
  EXPECT_NEAR(w.value(0), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(AdamW, DecayOnlyPath) {
  auto w = scalar_param(2.0);
  AdamW opt({0.9, 0.95, 1e-8, 0.05}, {{"w", w}});
  set_grad(w, {0.0});
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(w.value(0), 2.0 * (1.0 - 0.005));
}

TEST(AdamW, NoDecayFlagSkipsShrink) {
  auto w = scalar_param(2.0);
  AdamW opt({0.9, 0.95, 1e-8, 0.05}, {{"w", w, 1.0, false}});
  set_grad(w, {0.0});
  opt.step(0.1);
  EXPECT_EQ(w.value(0), 2.0);
}

TEST(AdamW, MatchesScalarOracle) {
  // Independent scalar Adam on f(w) = 0.5 a w^2 + b w.
  const double a = 1.7, b = -0.3, lr = 0.01, b1 = 0.9, b2 = 0.95, eps = 1e-8;
  double ow = 0.8, om = 0, ov = 0;
  auto w = scalar_param(0.8);
  AdamW opt({b1, b2, eps, 0.0}, {{"w", w}});
  for (int t = 1; t <= 100; ++t) {
    double g = a * ow + b;
    om = b1 * om + (1 - b1) * g;
    ov = b2 * ov + (1 - b2) * g * g;
    double mh = om / (1 - std::pow(b1, t));
    double vh = ov / (1 - std::pow(b2, t));
    ow -= lr * mh / (std::sqrt(vh) + eps);

    set_grad(w, {a * w.value(0) + b});
    opt.step(lr);
    ASSERT_NEAR(w.value(0), ow, 1e-12) << "step " << t;
  }
}

TEST(AdamW, LrScaleMultipliesStep) {
  auto w1 = scalar_param(1.0);
  auto w2 = scalar_param(1.0);
  AdamW opt({0.9, 0.95, 1e-8, 0.0}, {{"a", w1, 1.0}, {"b", w2, 0.25}});
  set_grad(w1, {0.5});
  set_grad(w2, {0.5});
  opt.step(0.2);
  EXPECT_NEAR(1.0 - w2.value(0), 0.25 * (1.0 - w1.value(0)), 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto w1 = scalar_param(1.0);
  auto w2 = scalar_param(1.0);
  AdamW opt({}, {{"good", w1}, {"blocks.3.attn.qkv.weight", w2}});
  set_grad(w1, {1.0});
  set_grad(w2, {std::numeric_limits<double>::infinity()});
  try {
    opt.step(0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.3.attn.qkv.weight"), std::string::npos);
  }
  EXPECT_EQ(w1.value(0), 1.0);
  EXPECT_EQ(opt.steps(), 0);
}

TEST(AdamW, DecayFlagsByRank) {
  auto ps = make_optim_params({{"w", Tensor::zeros({2, 2}, DType::f32)},
                               {"b", Tensor::zeros({2}, DType::f32)},
                               {"pos_embed", Tensor::zeros({4, 2}, DType::f32)}});
  EXPECT_TRUE(ps[0].decay);
  EXPECT_FALSE(ps[1].decay);
  EXPECT_FALSE(ps[2].decay);
}

TEST(Schedule, PeakUsesLinearScaling) {
  ScheduleConfig s;
  s.base_lr = 3e-4;
  s.batch_size = 4096;
  s.warmup_steps = 40;
  s.total_steps = 400;
  EXPECT_DOUBLE_EQ(s.peak_lr(), 4.8e-3);
  EXPECT_EQ(lr_at(40, s), s.peak_lr());
  EXPECT_EQ(lr_at(0, s), 0.0);
}

TEST(Schedule, CosineMidpointAndTail) {
  ScheduleConfig s;
  s.base_lr = 1e-3;
  s.batch_size = 256;
  s.warmup_steps = 10;
  s.total_steps = 110;
  s.min_lr = 1e-5;
  EXPECT_NEAR(lr_at(60, s), (1e-3 + 1e-5) / 2, 1e-12);
  EXPECT_NEAR(lr_at(110, s), 1e-5, 1e-18);
  EXPECT_EQ(lr_at(111, s), 1e-5);
  EXPECT_EQ(lr_at(100000, s), 1e-5);
}

TEST(Schedule, ContinuousAndMonotoneAfterWarmup) {
  ScheduleConfig s;
  s.warmup_steps = 25;
  s.total_steps = 300;
  double step_size = s.peak_lr() / 25;
  EXPECT_NEAR(lr_at(25, s) - lr_at(24, s), step_size, 1e-15);
  for (std::int64_t k = 25; k < 300; ++k) EXPECT_LE(lr_at(k + 1, s), lr_at(k, s));
  for (std::int64_t k = 0; k < 25; ++k) EXPECT_LT(lr_at(k, s), lr_at(k + 1, s));
}

TEST(Schedule, Validation) {
  ScheduleConfig s;
  s.warmup_steps = 5;
  s.total_steps = 4;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Llrd, HeadAlwaysOne) {
  ScheduleConfig s;
  s.llrd_start = 0.35;
  s.llrd_end = 1.0;
  for (double p : {0.0, 0.3, 1.0}) EXPECT_EQ(llrd_factor(12, 12, p, s), 1.0);
}

TEST(Llrd, FixedDecayClosedForm) {
  ScheduleConfig s;
  s.llrd_start = s.llrd_end = 0.65;
  EXPECT_NEAR(llrd_factor(0, 12, 0.5, s), 0.00569, 1e-5);
  for (int l = 0; l <= 12; ++l) EXPECT_DOUBLE_EQ(llrd_factor(l, 12, 0.7, s), std::pow(0.65, 12 - l));
}

TEST(Llrd, IncreasingDecayReachesOne) {
  ScheduleConfig s;
  s.llrd_start = 0.35;
  s.llrd_end = 1.0;
  for (int l = 0; l <= 12; ++l) EXPECT_EQ(llrd_factor(l, 12, 1.0, s), 1.0);
  EXPECT_DOUBLE_EQ(llrd_factor(4, 12, 0.0, s), std::pow(0.35, 8));
  EXPECT_DOUBLE_EQ(llrd_factor(4, 12, 0.5, s), std::pow(0.675, 8));
}

TEST(Llrd, MonotoneInLayerAndProgress) {
  ScheduleConfig s;
  s.llrd_start = 0.35;
  s.llrd_end = 1.0;
  for (int l = 0; l < 6; ++l)
    for (int k = 0; k < 10; ++k) {
      double p = k / 10.0;
      EXPECT_LE(llrd_factor(l, 6, p, s), llrd_factor(l + 1, 6, p, s));
      EXPECT_LE(llrd_factor(l, 6, p, s), llrd_factor(l, 6, p + 0.1, s));
    }
  EXPECT_THROW(llrd_factor(7, 6, 0.0, s), ConfigError);
}

TEST(Ema, ZeroDecayCopiesParams) {
  auto p = random_tensor({4}, 2);
  Ema ema({{"p", Tensor::zeros({4}, DType::f64)}}, 0.0);
  ema.update({{"p", p}});
  EXPECT_TRUE(bit_equal(ema.shadow()[0].tensor, p));
}

TEST(Ema, SingleStepFromZero) {
  Ema ema({{"p", Tensor::zeros({1}, DType::f64)}}, 0.9999);
  ema.update({{"p", Tensor::from_values({1}, {1.0})}});
  EXPECT_NEAR(ema.shadow()[0].tensor.value(0), 1e-4, 1e-16);
}

TEST(Ema, GeometricClosedForm) {
  const double d = 0.995, s0 = -2.0, p = 3.0;
  Ema ema({{"p", Tensor::from_values({1}, {s0})}}, d);
  auto param = Tensor::from_values({1}, {p});
  for (int k = 1; k <= 1000; ++k) ema.update({{"p", param}});
  double expect = s0 * std::pow(d, 1000) + p * (1 - std::pow(d, 1000));
  EXPECT_LT(std::abs(ema.shadow()[0].tensor.value(0) - expect) / std::abs(expect), 1e-6);
}

TEST(Ema, ShadowIsIndependentCopy) {
  auto p = random_tensor({3}, 4);
  Ema ema({{"p", p}}, 0.5);
  auto before = ema.shadow()[0].tensor.clone();
  p.mutable_data<double>()[0] += 1.0;
  EXPECT_TRUE(bit_equal(ema.shadow()[0].tensor, before));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Checkpoint c;
  c.tensors = {{"model.a", random_tensor({2, 3}, 5)}, {"ema.a", random_tensor({2, 3}, 6, DType::f32)}};
  c.meta = {{"step", 17}, {"rng", "1 2 3"}, {"config", {{"dim", 64}}}};
  auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(p1, c);
  auto loaded = load_checkpoint(p1);
  EXPECT_EQ(loaded.meta, c.meta);
  ASSERT_EQ(loaded.tensors.size(), 2u);
  EXPECT_TRUE(bit_equal(loaded.at("model.a"), c.tensors[0].tensor));
  EXPECT_EQ(loaded.at("ema.a").dtype(), DType::f32);
  save_checkpoint(p2, loaded);
  EXPECT_EQ(slurp(p1), slurp(p2));
  EXPECT_EQ(slurp(p1).substr(0, 4), "NEPA");
}

TEST(Checkpoint, CorruptMagicIsVersionError) {
  Checkpoint c;
  c.tensors = {{"x", random_tensor({2}, 7)}};
  auto p = temp_path("magic.ckpt");
  save_checkpoint(p, c);
  auto bytes = slurp(p);
  bytes[1] = 'X';
  std::ofstream(p, std::ios::binary) << bytes;
  try {
    load_checkpoint(p);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  bytes[1] = 'E';
  bytes[4] = 2;  // version 2
  std::ofstream(p, std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(p), CheckpointError);
}

TEST(Checkpoint, TruncationDetected) {
  Checkpoint c;
  c.tensors = {{"x", random_tensor({8}, 8)}};
  c.meta = {{"step", 1}};
  auto p = temp_path("trunc.ckpt");
  save_checkpoint(p, c);
  auto bytes = slurp(p);
  for (std::size_t cut : {std::size_t{6}, std::size_t{20}, bytes.size() - 30, bytes.size() - 1}) {
    std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes.substr(0, cut);
    EXPECT_THROW(load_checkpoint(p), CheckpointError) << "cut " << cut;
  }
}

TEST(Checkpoint, AssignRejectsUnknownAndMissing) {
  Checkpoint c;
  c.tensors = {{"model.w", random_tensor({2, 2}, 9)}, {"model.extra", random_tensor({1}, 10)}};
  auto w = Tensor::zeros({2, 2}, DType::f64);
  EXPECT_THROW(assign_from(c, "model.", {{"w", w}}), CheckpointError);
  EXPECT_NO_THROW(assign_from(c, "model.", {{"w", w}}, false));
  EXPECT_TRUE(bit_equal(w, c.at("model.w")));
  auto missing = Tensor::zeros({1}, DType::f64);
  EXPECT_THROW(assign_from(c, "model.", {{"w", w}, {"extra", missing}, {"gone", missing}}), CheckpointError);
  auto wrong = Tensor::zeros({3, 2}, DType::f64);
  EXPECT_THROW(assign_from(c, "model.", {{"w", wrong}, {"extra", missing}}), CheckpointError);
}

TEST(Checkpoint, AdamStateRoundTrip) {
  auto w = scalar_param(1.0);
  AdamW opt({}, {{"w", w}});
  set_grad(w, {0.3});
  opt.step(0.01);
  set_grad(w, {-0.2});
  opt.step(0.01);
  auto state = opt.state_tensors();
  ASSERT_EQ(state.size(), 2u);
  EXPECT_EQ(state[0].name, "adam.m.w");

  auto w2 = w.clone();
  w2.set_requires_grad(true);
  AdamW opt2({}, {{"w", w2}});
  opt2.load_state(state, opt.steps());
  set_grad(w, {0.1});
  set_grad(w2, {0.1});
  opt.step(0.01);
  opt2.step(0.01);
  EXPECT_EQ(w.value(0), w2.value(0));
}
