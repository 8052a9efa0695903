#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nepa/backbone.hpp"
#include "nepa/transfer.hpp"

namespace nepa {

enum class MapKind { attention, similarity };

struct AnalysisMap {
  Tensor grid;  // [grid_rows, grid_cols], f64
  MapKind kind = MapKind::attention;
  int query = 0;
  int layer = -1;  // attention only
  int head = -1;
};

/// Row `query` of the post-softmax attention of one layer/head for a single
/// image ([C, H, W] or [1, C, H, W]), laid out on the patch grid.
AnalysisMap attention_map(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg, int layer,
                          int head, int query);

/// Every layer and head for one query, from a single forward pass.
std::vector<AnalysisMap> attention_maps(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg,
                                        int query);

/// Cosine between the prediction made at `query` (h_out[query]) and every
/// target embedding z_t.
AnalysisMap similarity_map(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg, int query);

/// attn_L{l}_H{h}_Q{q}.pgm / sim_Q{q}.pgm
std::string map_filename(const AnalysisMap& map);

/// 8-bit binary PGM (P5). Attention maps scale [min, max] to [0, 255];
/// similarity maps use the fixed range [-1, 1]. Constant attention maps
/// are written as mid-gray (128).
void export_pgm(const AnalysisMap& map, const std::filesystem::path& path);

struct Pgm {
  int width = 0, height = 0, maxval = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};
Pgm read_pgm(const std::filesystem::path& path);

/// Same layout as the fine-tune trace: epoch,split,metric,value.
void export_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);

}  // namespace nepa
