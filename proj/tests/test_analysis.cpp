#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "nepa/analysis.hpp"
#include "nepa/ops.hpp"
#include "test_util.hpp"

using namespace nepa;
using nepa::testing::uniform_images;

namespace {

BackboneConfig small(AttentionMode mode = AttentionMode::causal) {
  BackboneConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.layerscale_init = 0.1;
  c.attention_mode = mode;
  return c;
}

BackboneParams params_for(const BackboneConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return BackboneParams::init(c, rng, DType::f64);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / ("nepa_test_analysis_" + name); }

}  // namespace

TEST(AttentionMap, CausalQueryZeroSeesOnlyItself) {
  auto c = small();
  auto p = params_for(c, 1);
  auto img = normalize_pixels(uniform_images({3, 16, 16}, 2));
  for (const auto& m : attention_maps(img, p, c, 0)) {
    auto v = m.grid.to_vector();
    EXPECT_EQ(m.grid.shape(), (Shape{4, 4}));
    EXPECT_DOUBLE_EQ(v[0], 1.0);
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_EQ(v[i], 0.0);
  }
}

TEST(AttentionMap, RowsSumToOneAndZeroAboveQuery) {
  auto c = small();
  auto p = params_for(c, 3);
  auto img = normalize_pixels(uniform_images({3, 16, 16}, 4));
  for (int q : {1, 6, 15}) {
    auto maps = attention_maps(img, p, c, q);
    EXPECT_EQ(maps.size(), 4u);  // 2 layers x 2 heads
    for (const auto& m : maps) {
      auto v = m.grid.to_vector();
      double s = 0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        EXPECT_GE(v[i], 0.0);
        if (static_cast<int>(i) > q) EXPECT_EQ(v[i], 0.0);
        s += v[i];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  auto one = attention_map(img, p, c, 1, 1, 6);
  EXPECT_EQ(one.grid.to_vector(), attention_maps(img, p, c, 6)[3].grid.to_vector());
  EXPECT_THROW(attention_map(img, p, c, 2, 0, 6), ConfigError);
  EXPECT_THROW(attention_map(img, p, c, 0, 0, 16), ConfigError);
}

TEST(AttentionMap, ConstantLogitsGiveUniformBidirectionalMap) {
  // Zero q/k projections make every logit equal.
  auto c = small(AttentionMode::bidirectional);
  c.use_qknorm = false;
  auto p = params_for(c, 5);
  for (auto& b : p.blocks) {
    auto w = b.qkv_weight.to_vector();
    const auto d = static_cast<std::size_t>(c.dim);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t j = 0; j < 2 * d; ++j) w[r * 3 * d + j] = 0.0;
    b.qkv_weight.copy_from(Tensor::from_vector(b.qkv_weight.shape(), w));
  }
  auto img = normalize_pixels(uniform_images({3, 16, 16}, 6));
  for (const auto& m : attention_maps(img, p, c, 7))
    for (double v : m.grid.to_vector()) EXPECT_NEAR(v, 1.0 / 16, 1e-12);
}

TEST(SimilarityMap, BoundedAndSelfConsistent) {
  auto c = small();
  auto p = params_for(c, 7);
  auto img = normalize_pixels(uniform_images({3, 16, 16}, 8));
  auto seq = forward(reshape(img, {1, 3, 16, 16}), p, c);
  for (int q : {0, 9}) {
    auto m = similarity_map(img, p, c, q);
    EXPECT_EQ(m.kind, MapKind::similarity);
    auto v = m.grid.to_vector();
    for (std::size_t j = 0; j < v.size(); ++j) {
      EXPECT_GE(v[j], -1.0);
      EXPECT_LE(v[j], 1.0);
      // Oracle: explicit cosine between h_out[q] and z_j.
      auto h = slice(seq.h_out, 1, q, q + 1).to_vector();
      auto z = slice(seq.z, 1, static_cast<std::int64_t>(j), static_cast<std::int64_t>(j) + 1).to_vector();
      double dot = 0, nh = 0, nz = 0;
      for (std::size_t k = 0; k < h.size(); ++k) {
        dot += h[k] * z[k];
        nh += h[k] * h[k];
        nz += z[k] * z[k];
      }
      EXPECT_NEAR(v[j], dot / std::sqrt(nh * nz), 1e-12);
    }
  }
}

TEST(SimilarityMap, InvariantToPositiveRescaling) {
  // Scaling the final norm gain and bias scales h_out by 3.
  auto c = small();
  auto p = params_for(c, 9);
  auto img = normalize_pixels(uniform_images({3, 16, 16}, 10));
  auto base = similarity_map(img, p, c, 4).grid.to_vector();
  auto q = p.clone();
  q.norm_weight.copy_from(scale(q.norm_weight, 3.0));
  q.norm_bias.copy_from(scale(q.norm_bias, 3.0));
  auto scaled = similarity_map(img, q, c, 4).grid.to_vector();
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], scaled[i], 1e-12);
}

TEST(Pgm, RoundTripWithinQuantisation) {
  AnalysisMap m;
  m.kind = MapKind::attention;
  m.layer = 1;
  m.head = 0;
  m.query = 3;
  m.grid = Tensor::from_vector({2, 3}, std::vector<double>{0.0, 0.1, 0.2, 0.3, 0.4, 0.5});
  auto path = tmp("rt.pgm");
  export_pgm(m, path);
  auto p = read_pgm(path);
  EXPECT_EQ(p.width, 3);
  EXPECT_EQ(p.height, 2);
  EXPECT_EQ(p.maxval, 255);
  auto v = m.grid.to_vector();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(p.pixels[i] / 255.0 * 0.5, v[i], 0.5 / 255 + 1e-12);
  EXPECT_EQ(map_filename(m), "attn_L1_H0_Q3.pgm");
}

TEST(Pgm, SimilarityUsesFixedRange) {
  AnalysisMap m;
  m.kind = MapKind::similarity;
  m.query = 2;
  m.grid = Tensor::from_vector({1, 3}, std::vector<double>{-1.0, 0.0, 1.0});
  auto path = tmp("sim.pgm");
  export_pgm(m, path);
  auto p = read_pgm(path);
  EXPECT_EQ(p.pixels, (std::vector<std::uint8_t>{0, 128, 255}));
  EXPECT_EQ(map_filename(m), "sim_Q2.pgm");
}

TEST(Pgm, ConstantMapIsGrayAndExportIsPure) {
  AnalysisMap m;
  m.grid = Tensor::full({4, 4}, 0.0625, DType::f64);
  auto a = tmp("const_a.pgm"), b = tmp("const_b.pgm");
  export_pgm(m, a);
  export_pgm(m, b);
  auto p = read_pgm(a);
  for (auto px : p.pixels) EXPECT_EQ(px, 128);
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(Csv, OneRowPerPoint) {
  std::vector<MetricRow> rows{{1, "train", "loss", 0.5}, {2, "train", "loss", 0.25}, {2, "test", "accuracy", 0.75}};
  auto path = tmp("trace.csv");
  export_csv(rows, path);
  auto text = slurp(path);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(text.rfind("epoch,split,metric,value\n", 0), 0u);
  EXPECT_NE(text.find("2,test,accuracy,0.75\n"), std::string::npos);
}
