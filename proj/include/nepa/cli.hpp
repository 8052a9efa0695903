#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nepa/config.hpp"
#include "nepa/data.hpp"

namespace nepa {

struct CliOptions {
  std::string command;  // pretrain | finetune | probe | analyze | gradcheck | ablate
  std::filesystem::path config;
  std::optional<std::filesystem::path> resume;
  std::optional<std::uint64_t> seed;
  std::string table = "a";  // ablate only
};

/// 0 success, 1 runtime or numeric failure, 2 configuration error.
int exit_code_for(const std::exception& e);

/// Loads the document, applies --seed, validates, creates the output
/// directory and writes resolved_config.json there.
RunConfig resolve_config(const CliOptions& opts);

/// (train, test) for the configured source. Synthetic test samples follow the
/// training indices.
std::pair<Dataset, Dataset> make_datasets(const RunConfig& cfg);

/// Runs one command; logs the error and maps it to an exit code instead of
/// throwing. Human-readable results go to `out`.
int run_command(const CliOptions& opts, std::ostream& out);

// Ablations -----------------------------------------------------------------

struct AblationRow {
  std::string table;
  std::string variant;
  bool shift = true, causal = true, stop_grad = true;
  double mask_ratio = 0;
  std::string finetune_attention;
  double final_loss = 0;     // mean of the last 10 step losses
  double target_spread = 0;  // at the last step
  std::string status;        // ok | collapse | shortcut
  std::optional<double> accuracy;
  std::string paper;  // reported value or "fail", for reference only
};

/// Table a: shift / causal / stop-grad toggles. Table c: mask ratios 0, 0.4,
/// 0.6 on a plain ViT. Table e: causal vs bidirectional fine-tuning.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& train, const Dataset& test,
                                      const std::string& table);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

/// Loss below -0.999: "collapse" when the targets have also lost their
/// spread (< 1e-3), "shortcut" otherwise. Everything else is "ok".
std::string pretrain_status(double final_loss, double target_spread);

}  // namespace nepa
