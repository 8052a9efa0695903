#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "nepa/ops.hpp"
#include "nepa/tensor.hpp"
#include "test_util.hpp"

using namespace nepa;
using nepa::testing::probe_weights;
using nepa::testing::random_tensor;

namespace {

// sum(w * op(x)) with fixed random w.
std::function<Tensor(const Tensor&)> projected(std::function<Tensor(const Tensor&)> op,
                                               std::uint64_t seed) {
  return [op, seed](const Tensor& x) {
    Tensor y = op(x);
    return sum(mul(y, probe_weights(y, seed)));
  };
}

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  EXPECT_TRUE(bit_equal(matmul(eye, eye), eye));
}

TEST(Matmul, HandArithmetic) {
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 1}, {0, 1});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.to_vector(), (std::vector<double>{2, 4}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({3, 4}, DType::f64);
  Tensor b = Tensor::zeros({3, 2}, DType::f64);
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[3, 4]"), std::string::npos);
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Tensor a = random_tensor({3, 4}, 1);
  Tensor b = random_tensor({4, 2}, 2);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& x) { return matmul(x, b); }, 3), a), 1e-6);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& x) { return matmul(a, x); }, 4), b), 1e-6);
}

TEST(Matmul, BatchedAndSharedRightOperand) {
  Tensor a = random_tensor({2, 3, 4}, 5);
  Tensor b = random_tensor({2, 4, 5}, 6);
  Tensor w = random_tensor({4, 5}, 7);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& x) { return matmul(x, b); }, 8), a), 1e-6);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& x) { return matmul(a, x); }, 9), b), 1e-6);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& x) { return matmul(a, x); }, 10), w), 1e-6);
  // Shared weight equals the per-batch product.
  auto y = matmul(a, w);
  for (int i = 0; i < 2; ++i) {
    auto yi = matmul(reshape(slice(a, 0, i, i + 1), {3, 4}), w);
    EXPECT_LT(max_abs_diff(reshape(slice(y, 0, i, i + 1), {3, 5}), yi), 1e-14);
  }
}

TEST(Softmax, UniformRow) {
  auto y = softmax_lastdim(Tensor::from_values({3}, {0, 0, 0}));
  for (double v : y.to_vector()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
  auto y = softmax_lastdim(Tensor::from_values({2}, {1000, 0}));
  EXPECT_NEAR(y.value(0), 1.0, 1e-12);
  EXPECT_NEAR(y.value(1), 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(y.value(1)));
}

TEST(Softmax, NaNRejected) {
  auto x = Tensor::from_values({2}, {std::numeric_limits<double>::quiet_NaN(), 0});
  EXPECT_THROW(softmax_lastdim(x), NumericError);
}

TEST(Softmax, RowsSumToOneAndJacobian) {
  Tensor x = random_tensor({4, 7}, 11, DType::f64, 3.0);
  auto y = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int j = 0; j < 7; ++j) s += y.value(r * 7 + j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_LT(finite_diff_check(projected(softmax_lastdim, 12), x), 1e-6);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  auto y = layernorm(Tensor::full({1, 4}, 3.5, DType::f64), {}, {}, 1e-6);
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroMeanRowScaledToUnitVariance) {
  auto y = layernorm(Tensor::from_values({2}, {1, -1}), {}, {}, 1e-6);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-6);
  EXPECT_NEAR(y.value(0), expect, 1e-15);
  EXPECT_NEAR(y.value(1), -expect, 1e-15);
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  EXPECT_THROW(layernorm(Tensor::zeros({2, 2}), {}, {}, 0.0), ConfigError);
  EXPECT_THROW(layernorm(Tensor::zeros({2, 2}), {}, {}, -1.0), ConfigError);
}

TEST(LayerNorm, RowStatisticsAndGradient) {
  Tensor x = random_tensor({6, 5}, 13, DType::f64, 2.0);
  auto y = layernorm(x, {}, {}, 1e-6);
  for (int r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (int j = 0; j < 5; ++j) m += y.value(r * 5 + j);
    m /= 5;
    for (int j = 0; j < 5; ++j) v += (y.value(r * 5 + j) - m) * (y.value(r * 5 + j) - m);
    v /= 5;
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
  Tensor gamma = random_tensor({5}, 14);
  Tensor beta = random_tensor({5}, 15);
  EXPECT_LT(finite_diff_check(projected([](const Tensor& t) { return layernorm(t, {}, {}, 1e-6); }, 16), x), 1e-6);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& t) { return layernorm(t, gamma, beta, 1e-6); }, 17), x), 1e-6);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& g) { return layernorm(x, g, beta, 1e-6); }, 18), gamma), 1e-6);
  EXPECT_LT(finite_diff_check(projected([&](const Tensor& b) { return layernorm(x, gamma, b, 1e-6); }, 19), beta), 1e-6);
}

TEST(L2Normalize, Pythagorean) {
  auto y = l2_normalize(Tensor::from_values({2}, {3, 4}));
  EXPECT_NEAR(y.value(0), 0.6, 1e-15);
  EXPECT_NEAR(y.value(1), 0.8, 1e-15);
}

TEST(L2Normalize, ZeroRowStaysZero) {
  auto y = l2_normalize(Tensor::from_values({2}, {0, 0}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{0, 0}));
}

TEST(L2Normalize, UnitRowsAndGradient) {
  Tensor x = random_tensor({3, 5}, 20);
  auto y = l2_normalize(x);
  for (int r = 0; r < 3; ++r) {
    double s = 0;
    for (int j = 0; j < 5; ++j) s += y.value(r * 5 + j) * y.value(r * 5 + j);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
  EXPECT_LT(finite_diff_check(projected([](const Tensor& t) { return l2_normalize(t); }, 21), x), 1e-6);
}

TEST(StopGradient, ForwardIsBitIdentical) {
  Tensor x = random_tensor({4, 3}, 22, DType::f32);
  EXPECT_TRUE(bit_equal(stop_gradient(x), x));
}

TEST(StopGradient, BlocksOnlyItsOwnBranch) {
  Tensor x = random_tensor({5}, 23).set_requires_grad(true);
  Tensor y = random_tensor({5}, 24).set_requires_grad(true);
  GradTape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(stop_gradient(x), y)));
  }
  for (double g : x.grad().to_vector()) EXPECT_EQ(g, 0.0);
  EXPECT_TRUE(bit_equal(y.grad(), x));
}

TEST(Activations, FixedPointsAtZero) {
  EXPECT_EQ(gelu(Tensor::scalar(0.0, DType::f64)).item(), 0.0);
  EXPECT_EQ(silu(Tensor::scalar(0.0, DType::f64)).item(), 0.0);
  // silu(x) = x * sigmoid(x)
  EXPECT_NEAR(silu(Tensor::scalar(2.0, DType::f64)).item(), 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

// Every primitive against central differences on 10 seeds, f64, h = 1e-5.
TEST(Primitives, FiniteDifferencesOnTenSeeds) {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    Tensor a = random_tensor({2, 3, 4}, seed);
    Tensor b = random_tensor({2, 3, 4}, seed + 1000);
    Tensor bias = random_tensor({4}, seed + 2000);
    Tensor tok = random_tensor({4}, seed + 3000);
    std::vector<std::int64_t> idx{2, 0, 2, 1};
    std::vector<std::uint8_t> mask{1, 0, 0, 1, 0, 1};
    std::vector<double> angles(3 * 2);
    for (std::size_t i = 0; i < angles.size(); ++i) angles[i] = 0.3 * static_cast<double>(i) + 0.1;
    Tensor logits = random_tensor({3, 5}, seed + 4000);
    std::vector<double> dist(15);
    for (int r = 0; r < 3; ++r)
      for (int j = 0; j < 5; ++j) dist[static_cast<std::size_t>(r * 5 + j)] = (j == r ? 0.6 : 0.1);
    Tensor target = Tensor::from_values({3, 5}, dist, DType::f64);

    struct Case {
      const char* name;
      std::function<Tensor(const Tensor&)> f;
      Tensor x;
    };
    std::vector<Case> cases{
        {"add", [&](const Tensor& x) { return add(x, b); }, a},
        {"add.rhs_broadcast", [&](const Tensor& x) { return add(a, x); }, bias},
        {"sub", [&](const Tensor& x) { return sub(b, x); }, a},
        {"mul", [&](const Tensor& x) { return mul(x, b); }, a},
        {"mul.rhs_broadcast", [&](const Tensor& x) { return mul(a, x); }, bias},
        {"mul.self", [&](const Tensor& x) { return mul(x, x); }, a},
        {"scale", [&](const Tensor& x) { return scale(x, -1.7); }, a},
        {"add_scalar", [&](const Tensor& x) { return mul(add_scalar(x, 0.3), x); }, a},
        {"gelu", [&](const Tensor& x) { return gelu(x); }, a},
        {"silu", [&](const Tensor& x) { return silu(x); }, a},
        {"reshape", [&](const Tensor& x) { return mul(reshape(x, {4, -1}), reshape(b, {4, 6})); }, a},
        {"permute", [&](const Tensor& x) { return permute(x, {2, 0, 1}); }, a},
        {"transpose", [&](const Tensor& x) { return transpose(x, 0, 2); }, a},
        {"slice", [&](const Tensor& x) { return slice(x, 1, 1, 3); }, a},
        {"concat", [&](const Tensor& x) { return concat({x, b, x}, 1); }, a},
        {"sum", [&](const Tensor& x) { return mul(sum(mul(x, b)), sum(x)); }, a},
        {"mean", [&](const Tensor& x) { return mul(mean(mul(x, b)), mean(x)); }, a},
        {"sum_dim", [&](const Tensor& x) { return sum_dim(x, 1); }, a},
        {"mean_dim", [&](const Tensor& x) { return mean_dim(x, 0); }, a},
        {"gather_rows", [&](const Tensor& x) { return gather_rows(x, idx); }, reshape(a, {6, 4}).clone()},
        {"softmax", [&](const Tensor& x) { return softmax_lastdim(x); }, a},
        {"layernorm", [&](const Tensor& x) { return layernorm(x, bias, tok, 1e-6); }, a},
        {"l2_normalize", [&](const Tensor& x) { return l2_normalize(x); }, a},
        {"rotate_pairs", [&](const Tensor& x) { return rotate_pairs(x, angles); }, a},
        {"cross_entropy", [&](const Tensor& x) { return cross_entropy(x, target); }, logits},
        {"replace_rows.x", [&](const Tensor& x) { return replace_rows(x, tok, mask); }, reshape(a, {2, 3, 4}).clone()},
        {"replace_rows.token", [&](const Tensor& x) { return replace_rows(a, x, mask); }, tok},
        {"matmul", [&](const Tensor& x) { return matmul(x, transpose(b, 1, 2)); }, a},
    };
    for (auto& c : cases) {
      double err = finite_diff_check(projected(c.f, seed), c.x, 1e-5);
      EXPECT_LT(err, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(FiniteDiff, SumHasExactAllOnesGradient) {
  auto f = [](const Tensor& t) { return sum(t); };
  Tensor x = random_tensor({7}, 30).set_requires_grad(true);
  {
    GradTape tape;
    TapeScope scope(tape);
    tape.backward(f(x));
  }
  for (double g : x.grad().to_vector()) EXPECT_EQ(g, 1.0);
  x.clear_grad();
  EXPECT_LT(finite_diff_check(f, x, 1e-5), 1e-10);
  // Dyadic step and integer inputs make the central difference exact.
  Tensor ints = Tensor::from_values({3}, {1, -2, 5});
  EXPECT_EQ(finite_diff_check(f, ints, std::ldexp(1.0, -16)), 0.0);
}

TEST(FiniteDiff, QuadraticIsExactUnderCentralDifferences) {
  Tensor x = Tensor::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  {
    GradTape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{2, 4}));
  x.clear_grad();
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5), 1e-8);
}

TEST(FiniteDiff, NonFiniteFunctionRejected) {
  Tensor x = Tensor::from_values({1}, {1.0});
  auto f = [](const Tensor& t) { return scale(sum(t), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(finite_diff_check(f, x), NumericError);
}

TEST(Tape, ReplayIsBitIdentical) {
  Tensor w = random_tensor({4, 3}, 40).set_requires_grad(true);
  Tensor x = random_tensor({5, 4}, 41);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mean(gelu(layernorm(matmul(x, w), {}, {}, 1e-6)));
  }
  tape.backward(loss);
  Tensor first = w.grad();
  w.zero_grad();
  tape.backward(loss);
  EXPECT_TRUE(bit_equal(first, w.grad()));
}

TEST(Tape, NothingRecordedWithoutActiveTapeOrGradInputs) {
  Tensor w = random_tensor({2, 2}, 42).set_requires_grad(true);
  Tensor c = random_tensor({2, 2}, 43);
  GradTape tape;
  {
    TapeScope scope(tape);
    add(c, c);
    EXPECT_EQ(tape.size(), 0u);
    auto y = add(w, c);
    EXPECT_EQ(tape.size(), 1u);
    EXPECT_TRUE(y.requires_grad());
  }
  add(w, c);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Serialization, RecordRoundTripPreservesBits) {
  for (DType dt : {DType::f32, DType::f64}) {
    Tensor t = random_tensor({2, 3, 1}, 50, dt);
    std::stringstream ss;
    write_tensor_record(ss, "blocks.0.attn.qkv.weight", t);
    auto back = read_tensor_record(ss);
    EXPECT_EQ(back.name, "blocks.0.attn.qkv.weight");
    EXPECT_TRUE(bit_equal(back.tensor, t));
  }
}

TEST(Serialization, LayoutIsLittleEndian) {
  std::stringstream ss;
  write_tensor_record(ss, "ab", Tensor::from_vector({1}, std::vector<float>{1.0f}));
  std::string bytes = ss.str();
  // u32 name length, "ab", dtype tag, u32 rank, u64 extent, f32 payload
  ASSERT_EQ(bytes.size(), 4u + 2 + 1 + 4 + 8 + 4);
  EXPECT_EQ(bytes.substr(0, 4), std::string("\x02\x00\x00\x00", 4));
  EXPECT_EQ(bytes.substr(4, 2), "ab");
  EXPECT_EQ(bytes[6], '\x00');
  EXPECT_EQ(bytes.substr(7, 4), std::string("\x01\x00\x00\x00", 4));
  EXPECT_EQ(bytes.substr(19, 4), std::string("\x00\x00\x80\x3f", 4));
}

TEST(Serialization, TruncatedRecordRejected) {
  std::stringstream ss;
  write_tensor_record(ss, "w", random_tensor({4}, 51));
  std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor_record(cut), std::runtime_error);
}
