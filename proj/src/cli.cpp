#include "nepa/cli.hpp"

#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include "nepa/analysis.hpp"
#include "nepa/gradcheck.hpp"
#include "nepa/pretrain.hpp"
#include "nepa/transfer.hpp"

namespace nepa {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) { return dynamic_cast<const ConfigError*>(&e) ? 2 : 1; }

RunConfig resolve_config(const CliOptions& opts) {
  RunConfig cfg = load_run_config(opts.config);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.propagate_seed();
    cfg.validate();
  }
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "resolved_config.json", std::ios::trunc) << to_json(cfg).dump(2) << '\n';
  return cfg;
}

std::pair<Dataset, Dataset> make_datasets(const RunConfig& cfg) {
  const auto& d = cfg.data;
  const auto& b = cfg.pretrain.backbone;
  switch (d.source) {
    case DataSource::synth:
      return {synth_dataset(d.synth, 0, d.train_size), synth_dataset(d.synth, d.train_size, d.test_size)};
    case DataSource::noise:
      return {noise_dataset(d.train_size, b.channels, b.image_size, cfg.seed),
              noise_dataset(d.test_size, b.channels, b.image_size, cfg.seed ^ 0x7e57)};
    case DataSource::folder: {
      Dataset train = folder_load(d.train_root, d.resize);
      Dataset test = d.test_root.empty() ? Dataset{} : folder_load(d.test_root, d.resize);
      if (!test.samples.empty() && test.class_names != train.class_names)
        throw DatasetError("train and test folders have different classes");
      if (test.samples.empty()) test.class_names = train.class_names;
      return {std::move(train), std::move(test)};
    }
  }
  throw ConfigError("unknown data source");
}

namespace {

void apply_thread_env() {
  if (const char* v = std::getenv("NEPA_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) throw ConfigError(std::string("NEPA_THREADS must be a positive integer, got '") + v + "'");
    set_num_threads(static_cast<int>(n));
  }
}

void check_image_size(const Dataset& data, const BackboneConfig& b, const char* what) {
  for (const auto& s : data.samples)
    if (s.pixels.dim(0) != b.channels || s.pixels.dim(1) != b.height() || s.pixels.dim(2) != b.width())
      throw ConfigError(std::string(what) + " images are " + shape_str(s.pixels.shape()) + " but the backbone expects [" +
                        std::to_string(b.channels) + ", " + std::to_string(b.height()) + ", " +
                        std::to_string(b.width()) + "]");
}

Pretrained require_checkpoint(const RunConfig& cfg, bool ema) {
  if (cfg.checkpoint.empty()) throw ConfigFieldError("checkpoint", "required for this command");
  return load_pretrained(cfg.checkpoint, ema);
}

int cmd_pretrain(const RunConfig& cfg, const CliOptions& opts, std::ostream& out) {
  auto [train, test] = make_datasets(cfg);
  if (!cfg.pretrain.rrc) check_image_size(train, cfg.pretrain.backbone, "training");
  const auto total = cfg.pretrain.schedule.total_steps;
  const auto every = std::max<std::int64_t>(1, total / 20);
  StepLog last;
  run_pretrain(cfg.pretrain, train, cfg.output_dir, opts.resume, {{"seed", cfg.seed}}, [&](const StepLog& l) {
    last = l;
    if (l.step % every == 0 || l.step == total) spdlog::info("step {}/{} loss {:.6f} lr {:.3g}", l.step, total, l.loss, l.lr);
  });
  char buf[160];
  std::snprintf(buf, sizeof buf, "pretrain: %lld steps, final loss %.6f", static_cast<long long>(total), last.loss);
  out << buf << '\n' << "checkpoint: " << (fs::path(cfg.output_dir) / "final.ckpt").string() << '\n';
  return 0;
}

int cmd_finetune(const RunConfig& cfg, std::ostream& out) {
  auto pre = require_checkpoint(cfg, cfg.finetune.use_ema_weights);
  auto [train, test] = make_datasets(cfg);
  check_image_size(train, pre.config, "training");
  check_image_size(test, pre.config, "test");
  auto res = finetune(pre, train, test, cfg.finetune);
  write_metric_csv(res.trace, fs::path(cfg.output_dir) / "finetune.csv");
  save_checkpoint(fs::path(cfg.output_dir) / "finetune.ckpt", finetune_checkpoint(res, pre.normalize_pixels));
  char buf[96];
  std::snprintf(buf, sizeof buf, "finetune: test accuracy %.4f", res.test_accuracy);
  out << buf << '\n';
  return 0;
}

int cmd_probe(const RunConfig& cfg, std::ostream& out) {
  auto pre = require_checkpoint(cfg, cfg.finetune.use_ema_weights);
  auto [train, test] = make_datasets(cfg);
  check_image_size(train, pre.config, "training");
  check_image_size(test, pre.config, "test");
  std::vector<MetricRow> rows;
  for (auto pool : {Pooling::last, Pooling::avg}) {
    auto r = linear_probe(pre, train, test, pool, cfg.probe);
    rows.push_back({cfg.probe.epochs, "train", "accuracy_" + to_string(pool), r.train_accuracy});
    rows.push_back({cfg.probe.epochs, "test", "accuracy_" + to_string(pool), r.test_accuracy});
    char buf[128];
    std::snprintf(buf, sizeof buf, "probe %s: test accuracy %.4f (train %.4f)", to_string(pool).c_str(),
                  r.test_accuracy, r.train_accuracy);
    out << buf << '\n';
  }
  write_metric_csv(rows, fs::path(cfg.output_dir) / "probe.csv");
  return 0;
}

int cmd_analyze(const RunConfig& cfg, std::ostream& out) {
  auto pre = require_checkpoint(cfg, cfg.analyze.use_ema_weights);
  auto [train, test] = make_datasets(cfg);
  const Dataset& pool = test.size() > 0 ? test : train;
  if (cfg.analyze.image_index >= pool.size())
    throw ConfigFieldError("analyze.image_index", "beyond the " + std::to_string(pool.size()) + " available images");
  Tensor image = pool[cfg.analyze.image_index].pixels;
  check_image_size(pool, pre.config, "analysis");
  if (pre.normalize_pixels) image = normalize_pixels(image);
  image = image.to(pre.params.patch_weight.dtype());

  const fs::path dir = fs::path(cfg.output_dir) / "maps";
  fs::create_directories(dir);
  std::ofstream csv(fs::path(cfg.output_dir) / "maps.csv", std::ios::trunc);
  csv << "file,kind,query,layer,head,min,max\n";
  int written = 0;
  auto emit = [&](const AnalysisMap& m) {
    const auto name = map_filename(m);
    export_pgm(m, dir / name);
    auto v = m.grid.to_vector();
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%d,%.17g,%.17g", name.c_str(),
                  m.kind == MapKind::attention ? "attention" : "similarity", m.query, m.layer, m.head,
                  *std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end()));
    csv << buf << '\n';
    ++written;
  };
  for (int q : cfg.analyze.queries) {
    if (q >= pre.config.num_patches())
      throw ConfigFieldError("analyze.queries", "query " + std::to_string(q) + " outside the " +
                                                    std::to_string(pre.config.num_patches()) + " patches");
    for (const auto& m : attention_maps(image, pre.params, pre.config, q)) emit(m);
    emit(similarity_map(image, pre.params, pre.config, q));
  }
  out << "analyze: " << written << " maps (" << pre.config.grid_rows() << "x" << pre.config.grid_cols() << ") in "
      << dir.string() << '\n';
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  auto report = run_gradcheck(cfg.gradcheck);
  std::ofstream csv(fs::path(cfg.output_dir) / "gradcheck.csv", std::ios::trunc);
  csv << "name,max_rel_error,pass\n";
  double worst = 0;
  std::string worst_name;
  char buf[256];
  for (const auto& e : report.entries) {
    std::snprintf(buf, sizeof buf, "%s,%.6g,%d", e.name.c_str(), e.max_rel_error, e.pass ? 1 : 0);
    csv << buf << '\n';
    if (!e.pass) out << "FAIL " << e.name << " rel err " << e.max_rel_error << '\n';
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_name = e.name;
    }
  }
  std::snprintf(buf, sizeof buf, "gradcheck: %zu checks, worst %.3g (%s), tolerance %.g, %.1fs -> %s",
                report.entries.size(), worst, worst_name.c_str(), cfg.gradcheck.tolerance, report.seconds,
                report.pass() ? "pass" : "FAIL");
  out << buf << '\n';
  return report.pass() ? 0 : 1;
}

int cmd_ablate(const RunConfig& cfg, const CliOptions& opts, std::ostream& out) {
  if (opts.table != "a" && opts.table != "c" && opts.table != "e")
    throw ConfigError("--table must be one of a, c, e (got '" + opts.table + "')");
  auto [train, test] = make_datasets(cfg);
  check_image_size(train, cfg.pretrain.backbone, "training");
  auto rows = run_ablation(cfg, train, test, opts.table);
  const auto path = fs::path(cfg.output_dir) / ("ablation_" + opts.table + ".csv");
  write_ablation_csv(rows, path);
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-14s loss %9.6f spread %.4f %-8s acc %s (paper %s)", r.variant.c_str(),
                  r.final_loss, r.target_spread, r.status.c_str(),
                  r.accuracy ? std::to_string(*r.accuracy).c_str() : "-", r.paper.c_str());
    out << buf << '\n';
  }
  out << "table written to " << path.string() << '\n';
  return 0;
}

struct Outcome {
  double final_loss = 0, spread = 0;
  BackboneParams weights;
};

Outcome ablation_pretrain(PretrainConfig pc, const Dataset& train, std::int64_t steps, bool ema) {
  pc.schedule.total_steps = steps;
  pc.schedule.warmup_steps = std::min(pc.schedule.warmup_steps, steps);
  pc.checkpoint_every = 0;
  Pretrainer tr(pc, train);
  std::vector<double> losses;
  while (!tr.done()) losses.push_back(tr.step().loss);
  const std::size_t k = std::min<std::size_t>(10, losses.size());
  double tail = 0;
  for (std::size_t i = losses.size() - k; i < losses.size(); ++i) tail += losses[i];
  return {tail / static_cast<double>(k), tr.last_target_spread(), ema ? tr.ema_params() : tr.params().clone()};
}

double ablation_finetune(const RunConfig& cfg, const PretrainConfig& pc, const BackboneParams& weights,
                         AttentionMode mode, const Dataset& train, const Dataset& test) {
  FinetuneConfig fc = cfg.finetune;
  fc.epochs = cfg.ablate.finetune_epochs;
  fc.warmup_epochs = std::min(fc.warmup_epochs, fc.epochs);
  fc.attention_mode = mode;
  return finetune(Pretrained{pc.backbone, weights, pc.normalize_pixels}, train, test, fc).test_accuracy;
}

std::string attention_name(AttentionMode m) { return m == AttentionMode::causal ? "causal" : "bidirectional"; }

}  // namespace

std::string pretrain_status(double final_loss, double target_spread) {
  if (final_loss < -0.999) return target_spread < 1e-3 ? "collapse" : "shortcut";
  return "ok";
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& train, const Dataset& test,
                                      const std::string& table) {
  const bool ema = cfg.finetune.use_ema_weights;
  std::vector<AblationRow> rows;
  auto run_row = [&](AblationRow row, const PretrainConfig& pc) {
    spdlog::info("ablation {}: {}", row.table, row.variant);
    auto o = ablation_pretrain(pc, train, cfg.ablate.steps, ema);
    row.final_loss = o.final_loss;
    row.target_spread = o.spread;
    row.status = pretrain_status(o.final_loss, o.spread);
    row.finetune_attention = attention_name(cfg.finetune.attention_mode);
    if (row.status == "ok")
      row.accuracy = ablation_finetune(cfg, pc, o.weights, cfg.finetune.attention_mode, train, test);
    rows.push_back(row);
  };

  if (table == "a") {
    struct V {
      const char* name;
      bool shift, causal, stop;
      const char* paper;
    };
    for (const V& v : {V{"no_shift", false, true, true, "fail"}, V{"no_causal", true, false, true, "73.6"},
                       V{"no_stop_grad", true, true, false, "fail"}, V{"full", true, true, true, "76.8"}}) {
      PretrainConfig pc = cfg.pretrain;
      pc.objective.shift = v.shift;
      pc.objective.stop_grad = v.stop;
      pc.backbone.attention_mode = v.causal ? AttentionMode::causal : AttentionMode::bidirectional;
      AblationRow row;
      row.table = "a";
      row.variant = v.name;
      row.shift = v.shift;
      row.causal = v.causal;
      row.stop_grad = v.stop;
      row.mask_ratio = pc.objective.mask_ratio;
      row.paper = v.paper;
      run_row(row, pc);
    }
  } else if (table == "c") {
    const std::pair<double, const char*> ratios[] = {{0.0, "78.2"}, {0.4, "76.4"}, {0.6, "75.7"}};
    for (const auto& [ratio, paper] : ratios) {
      PretrainConfig pc = cfg.pretrain;
      // Plain ViT, as in the masking comparison.
      pc.backbone.use_layerscale = false;
      pc.backbone.use_rope = false;
      pc.backbone.use_qknorm = false;
      pc.backbone.mlp_kind = MlpKind::gelu;
      pc.objective.mask_ratio = ratio;
      pc.validate();
      AblationRow row;
      row.table = "c";
      char name[32];
      std::snprintf(name, sizeof name, "mask_%g", ratio);
      row.variant = name;
      row.mask_ratio = ratio;
      row.shift = pc.objective.shift;
      row.stop_grad = pc.objective.stop_grad;
      row.causal = pc.backbone.attention_mode == AttentionMode::causal;
      row.paper = paper;
      run_row(row, pc);
    }
  } else if (table == "e") {
    const PretrainConfig& pc = cfg.pretrain;
    spdlog::info("ablation e: shared pretraining");
    auto o = ablation_pretrain(pc, train, cfg.ablate.steps, ema);
    const std::pair<AttentionMode, const char*> modes[] = {{AttentionMode::bidirectional, "82.5"},
                                                           {AttentionMode::causal, "81.3"}};
    for (const auto& [mode, paper] : modes) {
      AblationRow row;
      row.table = "e";
      row.variant = "finetune_" + attention_name(mode);
      row.shift = pc.objective.shift;
      row.stop_grad = pc.objective.stop_grad;
      row.causal = pc.backbone.attention_mode == AttentionMode::causal;
      row.mask_ratio = pc.objective.mask_ratio;
      row.finetune_attention = attention_name(mode);
      row.final_loss = o.final_loss;
      row.target_spread = o.spread;
      row.status = pretrain_status(o.final_loss, o.spread);
      row.paper = paper;
      if (row.status == "ok") row.accuracy = ablation_finetune(cfg, pc, o.weights, mode, train, test);
      rows.push_back(row);
    }
  } else {
    throw ConfigError("unknown ablation table '" + table + "'");
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "table,variant,shift,causal,stop_grad,mask_ratio,finetune_attention,final_loss,target_spread,status,"
         "accuracy,paper\n";
  char buf[512];
  for (const auto& r : rows) {
    std::string acc = "";
    if (r.accuracy) {
      char a[32];
      std::snprintf(a, sizeof a, "%.17g", *r.accuracy);
      acc = a;
    }
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%d,%g,%s,%.17g,%.17g,%s,%s,%s", r.table.c_str(), r.variant.c_str(),
                  r.shift, r.causal, r.stop_grad, r.mask_ratio, r.finetune_attention.c_str(), r.final_loss,
                  r.target_spread, r.status.c_str(), acc.c_str(), r.paper.c_str());
    out << buf << '\n';
  }
}

int run_command(const CliOptions& opts, std::ostream& out) {
  try {
    apply_thread_env();
    static const char* known[] = {"pretrain", "finetune", "probe", "analyze", "gradcheck", "ablate"};
    if (std::find(std::begin(known), std::end(known), opts.command) == std::end(known))
      throw ConfigError("unknown command '" + opts.command + "'");
    if (opts.resume && opts.command != "pretrain") throw ConfigError("--resume only applies to pretrain");
    const RunConfig cfg = resolve_config(opts);
    if (opts.command == "pretrain") return cmd_pretrain(cfg, opts, out);
    if (opts.command == "finetune") return cmd_finetune(cfg, out);
    if (opts.command == "probe") return cmd_probe(cfg, out);
    if (opts.command == "analyze") return cmd_analyze(cfg, out);
    if (opts.command == "gradcheck") return cmd_gradcheck(cfg, out);
    return cmd_ablate(cfg, opts, out);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e);
  }
}

}  // namespace nepa
