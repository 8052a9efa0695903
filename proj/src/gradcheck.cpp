#include "nepa/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "nepa/backbone.hpp"
#include "nepa/objective.hpp"
#include "nepa/ops.hpp"
#include "nepa/rng.hpp"

namespace nepa {

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double stdev = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = stdev * rng.normal();
  return Tensor::from_vector(std::move(shape), std::move(v));
}

// sum(f(x) * w) for fixed random w, so non-scalar ops get a generic scalar.
std::function<Tensor(const Tensor&)> projected(std::function<Tensor(const Tensor&)> f, std::uint64_t seed) {
  auto w = std::make_shared<Tensor>();
  return [f = std::move(f), w, seed](const Tensor& x) {
    Tensor y = f(x);
    if (!w->defined()) {
      Rng r = Rng::keyed(seed, 0x9e37);
      *w = normal_tensor(y.shape(), r);
    }
    return sum(mul(y, *w));
  };
}

void check_primitives(const GradcheckConfig& cfg, std::vector<GradcheckEntry>& out) {
  Rng rng = Rng::keyed(cfg.seed, 0x9c);
  Tensor a = normal_tensor({2, 3, 4}, rng);
  Tensor b = normal_tensor({2, 3, 4}, rng);
  Tensor bias = normal_tensor({4}, rng);
  Tensor tok = normal_tensor({4}, rng);
  Tensor logits = normal_tensor({3, 5}, rng);
  std::vector<std::int64_t> idx{2, 0, 2, 1};
  std::vector<std::uint8_t> mask{1, 0, 0, 1, 0, 1};
  std::vector<double> angles(6);
  for (auto& x : angles) x = rng.uniform(-3.0, 3.0);
  std::vector<double> dist(15, 0.1);
  for (int r = 0; r < 3; ++r) dist[static_cast<std::size_t>(r * 5 + r)] = 0.6;
  Tensor target = Tensor::from_vector({3, 5}, dist);
  Tensor rows = reshape(a, {6, 4}).clone();

  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    Tensor x;
  };
  const std::vector<Case> cases{
      {"matmul.lhs", [&](const Tensor& x) { return matmul(x, transpose(b, 1, 2)); }, a},
      {"matmul.rhs", [&](const Tensor& x) { return matmul(a, x); }, reshape(b, {2, 4, 3}).clone()},
      {"add", [&](const Tensor& x) { return add(x, b); }, a},
      {"add.broadcast", [&](const Tensor& x) { return add(a, x); }, bias},
      {"sub", [&](const Tensor& x) { return sub(b, x); }, a},
      {"mul", [&](const Tensor& x) { return mul(x, b); }, a},
      {"mul.broadcast", [&](const Tensor& x) { return mul(a, x); }, bias},
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
      {"gather_rows", [&](const Tensor& x) { return gather_rows(x, idx); }, rows},
      {"softmax_lastdim", [&](const Tensor& x) { return softmax_lastdim(x); }, a},
      {"layernorm.x", [&](const Tensor& x) { return layernorm(x, bias, tok, 1e-6); }, a},
      {"layernorm.gamma", [&](const Tensor& x) { return layernorm(a, x, tok, 1e-6); }, bias},
      {"layernorm.beta", [&](const Tensor& x) { return layernorm(a, bias, x, 1e-6); }, tok},
      {"l2_normalize", [&](const Tensor& x) { return l2_normalize(x); }, a},
      {"stop_gradient", [&](const Tensor& x) { return add(mul(stop_gradient(b), x), x); }, a},
      {"rotate_pairs", [&](const Tensor& x) { return rotate_pairs(x, angles); }, a},
      {"cross_entropy", [&](const Tensor& x) { return cross_entropy(x, target); }, logits},
      {"replace_rows.x", [&](const Tensor& x) { return replace_rows(x, tok, mask); }, a},
      {"replace_rows.token", [&](const Tensor& x) { return replace_rows(a, x, mask); }, tok},
  };
  std::uint64_t k = 0;
  for (const auto& c : cases) {
    const double err = finite_diff_check(projected(c.f, cfg.seed + ++k), c.x.clone(), cfg.h);
    out.push_back({std::string("primitive.") + c.name, err, err < cfg.tolerance});
  }
}

// Moves the freshly initialised weights to a generic point: biases and gains
// get random offsets so no gradient is zero by symmetry.
void randomize(const BackboneParams& params, Rng& rng) {
  for (auto& nt : params.named()) {
    auto noise = normal_tensor(nt.tensor.shape(), rng, 0.1);
    nt.tensor.copy_from(add(nt.tensor, noise));
  }
}

void check_end_to_end(const GradcheckConfig& cfg, const BackboneConfig& bcfg, const std::string& tag,
                      std::vector<GradcheckEntry>& out) {
  Rng rng = Rng::keyed(cfg.seed, 0xe2e);
  auto params = BackboneParams::init(bcfg, rng, DType::f64);
  randomize(params, rng);
  Tensor mask_token = normal_tensor({bcfg.dim}, rng, 0.5);
  Tensor images = normalize_pixels([&] {
    std::vector<double> v(static_cast<std::size_t>(2 * bcfg.channels * bcfg.height() * bcfg.width()));
    for (auto& x : v) x = rng.uniform();
    return Tensor::from_vector({2, bcfg.channels, bcfg.height(), bcfg.width()}, std::move(v));
  }());
  const Tensor patches = patchify(images, bcfg.patch_size);

  struct Variant {
    const char* name;
    ObjectiveConfig obj;
  };
  ObjectiveConfig sg, open, masked;
  open.stop_grad = false;
  masked.mask_ratio = 0.4;
  const std::vector<Variant> variants{{"stop_grad", sg}, {"no_stop_grad", open}, {"masked", masked}};

  auto named = params.named();
  named.push_back({"mask_token", mask_token});
  for (const auto& v : variants) {
    const Rng mask_rng = Rng::keyed(cfg.seed, 0x3a5);
    // Analytic gradients come from the training path itself.
    for (auto& nt : named) {
      nt.tensor.set_requires_grad(true);
      nt.tensor.clear_grad();
    }
    {
      GradTape tape;
      TapeScope scope(tape);
      Rng r = mask_rng;
      tape.backward(training_step_forward(images, params, bcfg, v.obj, mask_token, r).loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& nt : named) {
      analytic.push_back(nt.tensor.has_grad() ? nt.tensor.grad().to_vector()
                                              : std::vector<double>(static_cast<std::size_t>(nt.tensor.numel()), 0.0));
      nt.tensor.clear_grad();
      nt.tensor.set_requires_grad(false);
    }

    TapeScope off(nullptr);
    const Tensor frozen = embed(patches, params).clone();
    auto loss = [&]() {
      Rng r = mask_rng;
      if (!v.obj.stop_grad) return training_step_forward(images, params, bcfg, v.obj, mask_token, r).loss.item();
      // Targets fixed at the unperturbed weights; inputs follow the weights.
      Tensor z = embed(patches, params);
      Tensor inputs = z;
      if (v.obj.mask_ratio > 0) inputs = mask_inputs(z, v.obj.mask_ratio, mask_token, r).z_masked;
      ObjectiveConfig plain = v.obj;
      plain.stop_grad = false;
      return nepa_loss(frozen, predict(inputs, params, bcfg).h_out, plain).item();
    };
    for (std::size_t p = 0; p < named.size(); ++p) {
      if (v.obj.mask_ratio == 0 && named[p].name == "mask_token") continue;
      auto data = named[p].tensor.mutable_data<double>();
      double worst = 0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + cfg.h;
        const double fp = loss();
        data[i] = saved - cfg.h;
        const double fm = loss();
        data[i] = saved;
        const double numeric = (fp - fm) / (2 * cfg.h);
        const double a = analytic[p][i];
        worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
      }
      out.push_back({"loss." + tag + v.name + "." + named[p].name, worst, worst < cfg.tolerance});
    }
  }
}

}  // namespace

bool GradcheckReport::pass() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
}

BackboneConfig gradcheck_backbone(const GradcheckConfig& cfg) {
  BackboneConfig b;
  b.image_size = 8;
  b.image_width = 40;
  b.patch_size = 8;
  b.dim = cfg.dim;
  b.depth = cfg.depth;
  b.heads = cfg.heads;
  // Near-zero residual branches would leave most block gradients below the
  // resolution of a central difference.
  b.layerscale_init = 0.5;
  b.validate();
  return b;
}

GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  if (!(cfg.h > 0) || !(cfg.tolerance > 0)) throw ConfigError("gradcheck: h and tolerance must be > 0");
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport r;
  check_primitives(cfg, r.entries);
  const auto bcfg = gradcheck_backbone(cfg);
  check_end_to_end(cfg, bcfg, "", r.entries);
  // Second architecture: 1d RoPE, GeLU MLP, no LayerScale or table. QK-Norm
  // stays on: without it the key bias cancels in the softmax and its exact
  // zero gradient only measures roundoff.
  auto alt = bcfg;
  alt.rope_mode = RopeMode::one_d;
  alt.mlp_kind = MlpKind::gelu;
  alt.use_layerscale = false;
  alt.use_learnable_posembed = false;
  check_end_to_end(cfg, alt, "alt.", r.entries);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace nepa
