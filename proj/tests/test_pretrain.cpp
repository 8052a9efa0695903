#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "nepa/pretrain.hpp"

using namespace nepa;

namespace {

PretrainConfig tiny(std::int64_t steps = 12) {
  PretrainConfig c;
  c.backbone.image_size = 16;
  c.backbone.patch_size = 4;
  c.backbone.dim = 16;
  c.backbone.depth = 2;
  c.backbone.heads = 2;
  c.schedule = {1e-2, 8, 2, steps, 0.0, 1.0, 1.0};
  c.ema_decay = 0.9;
  c.seed = 3;
  return c;
}

Dataset tiny_data() {
  SynthSpec s;
  s.image_size = 16;
  return synth_dataset(s, 0, 40);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nepa_test_pretrain_" + name);
  std::filesystem::remove_all(p);
  return p;
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Pretrain, LossCsvHasOneRowPerStep) {
  auto data = tiny_data();
  auto dir = fresh_dir("rows");
  run_pretrain(tiny(10), data, dir);
  auto csv = slurp(dir / "loss.csv");
  EXPECT_EQ(csv.rfind("step,loss,lr\n", 0), 0u);
  EXPECT_EQ(count_lines(csv), 11);
  EXPECT_TRUE(std::filesystem::exists(dir / "final.ckpt"));
}

TEST(Pretrain, SameSeedGivesByteIdenticalCsv) {
  auto data = tiny_data();
  auto a = fresh_dir("det_a"), b = fresh_dir("det_b"), c = fresh_dir("det_c");
  auto cfg = tiny();
  cfg.objective.mask_ratio = 0.25;  // exercises the sequential stream
  run_pretrain(cfg, data, a);
  run_pretrain(cfg, data, b);
  EXPECT_EQ(slurp(a / "loss.csv"), slurp(b / "loss.csv"));
  cfg.seed = 4;
  run_pretrain(cfg, data, c);
  EXPECT_NE(slurp(a / "loss.csv"), slurp(c / "loss.csv"));
}

TEST(Pretrain, ResumeReproducesUninterruptedTrace) {
  auto data = tiny_data();
  auto cfg = tiny(12);
  cfg.checkpoint_every = 5;
  cfg.objective.mask_ratio = 0.25;
  auto full = fresh_dir("full"), part = fresh_dir("part");
  run_pretrain(cfg, data, full);
  ASSERT_TRUE(std::filesystem::exists(full / "step_5.ckpt"));
  ASSERT_TRUE(std::filesystem::exists(full / "step_10.ckpt"));

  // A run that stopped after step 5: its csv holds rows 1..5 (plus junk
  // that a crashed run might have appended after the checkpoint).
  std::filesystem::create_directories(part);
  std::filesystem::copy_file(full / "step_5.ckpt", part / "step_5.ckpt");
  {
    std::istringstream in(slurp(full / "loss.csv"));
    std::ofstream out(part / "loss.csv");
    std::string line;
    for (int i = 0; i <= 7 && std::getline(in, line); ++i) out << line << '\n';
  }
  run_pretrain(cfg, data, part, part / "step_5.ckpt");
  EXPECT_EQ(slurp(full / "loss.csv"), slurp(part / "loss.csv"));

  auto fa = load_checkpoint(full / "final.ckpt"), fb = load_checkpoint(part / "final.ckpt");
  ASSERT_EQ(fa.tensors.size(), fb.tensors.size());
  for (std::size_t i = 0; i < fa.tensors.size(); ++i) {
    EXPECT_EQ(fa.tensors[i].name, fb.tensors[i].name);
    EXPECT_EQ(fa.tensors[i].tensor.to_vector(), fb.tensors[i].tensor.to_vector()) << fa.tensors[i].name;
  }
  EXPECT_EQ(fa.meta.at("rng"), fb.meta.at("rng"));
}

TEST(Pretrain, CheckpointHoldsFullTrainingState) {
  auto data = tiny_data();
  Pretrainer tr(tiny(4), data);
  tr.step();
  tr.step();
  auto c = tr.checkpoint();
  const auto n = tr.params().named().size();
  std::size_t model = 0, m = 0, v = 0, ema = 0;
  for (const auto& nt : c.tensors) {
    model += nt.name.rfind("model.", 0) == 0;
    m += nt.name.rfind("adam.m.", 0) == 0;
    v += nt.name.rfind("adam.v.", 0) == 0;
    ema += nt.name.rfind("ema.", 0) == 0;
  }
  EXPECT_EQ(model, n + 1);  // + mask token
  EXPECT_EQ(m, n + 1);
  EXPECT_EQ(v, n + 1);
  EXPECT_EQ(ema, n);
  EXPECT_TRUE(c.contains("model.mask_token"));
  EXPECT_EQ(c.meta.at("step"), 2);
  EXPECT_EQ(c.meta.at("adam_step"), 2);
  EXPECT_EQ(c.meta.at("kind"), "pretrain");

  // EMA differs from the live weights after real updates.
  EXPECT_NE(c.at("ema.blocks.0.attn.qkv.weight").to_vector(), c.at("model.blocks.0.attn.qkv.weight").to_vector());
}

TEST(Pretrain, RestoreRejectsDifferentArchitecture) {
  auto data = tiny_data();
  Pretrainer a(tiny(4), data);
  a.step();
  auto other = tiny(4);
  other.backbone.depth = 3;
  Pretrainer b(other, data);
  EXPECT_THROW(b.restore(a.checkpoint()), ConfigError);
  auto c = a.checkpoint();
  c.tensors.push_back({"stray.weight", Tensor::zeros({1})});
  Pretrainer d(tiny(4), data);
  EXPECT_THROW(d.restore(c), CheckpointError);
}

TEST(Pretrain, LoadBackboneChoosesEmaOrRaw) {
  auto data = tiny_data();
  Pretrainer tr(tiny(3), data);
  while (!tr.done()) tr.step();
  auto c = tr.checkpoint();
  auto raw = load_backbone(c, false), ema = load_backbone(c, true);
  EXPECT_EQ(raw.params.patch_weight.to_vector(), tr.params().patch_weight.to_vector());
  EXPECT_EQ(ema.params.patch_weight.to_vector(), tr.ema_params().patch_weight.to_vector());
  EXPECT_EQ(to_json(raw.config), to_json(tr.config().backbone));
}

TEST(Pretrain, TooSmallDatasetRejected) {
  SynthSpec s;
  s.image_size = 16;
  auto data = synth_dataset(s, 0, 4);
  EXPECT_THROW(Pretrainer(tiny(), data), ConfigError);
}
