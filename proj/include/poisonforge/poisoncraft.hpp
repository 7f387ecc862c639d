#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poisonforge/adversary.hpp"
#include "poisonforge/augment.hpp"
#include "poisonforge/image_batch.hpp"
#include "poisonforge/loss.hpp"
#include "poisonforge/model.hpp"
#include "poisonforge/rng.hpp"
#include "poisonforge/trainer.hpp"

namespace poisonforge::poisoncraft {

enum class Generator { AP, UE, RUE, CP, LSP, OPS, CUDA };

inline const char* generator_name(Generator g) {
  switch (g) {
    case Generator::AP: return "ap";
    case Generator::UE: return "ue";
    case Generator::RUE: return "rue";
    case Generator::CP: return "cp";
    case Generator::LSP: return "lsp";
    case Generator::OPS: return "ops";
    case Generator::CUDA: return "cuda";
  }
  return "?";
}

inline Generator generator_from_name(const std::string& s) {
  for (Generator g : {Generator::AP, Generator::UE, Generator::RUE,
                      Generator::CP, Generator::LSP, Generator::OPS,
                      Generator::CUDA})
    if (s == generator_name(g)) return g;
  throw ArgumentError("unknown generator '" + s + "'");
}

/// Crafting settings shared by all generators plus per-family parameters.
/// The budget defaults by family: additive generators craft at Linf 8/255,
/// LSP at Linf 16/255, OPS flips exactly one pixel (L0), CUDA is a
/// non-additive filter (Unbounded).
struct GeneratorConfig {
  Generator generator = Generator::UE;
  std::optional<data::PerturbationBudget> budget;  // family default if unset
  model::BuildSpec surrogate{model::Arch::TinyConvNet, 3, 16, 16,
                             /*rep_dim=*/32, /*proj_dim=*/16,
                             /*num_classes=*/4, /*proj_layers=*/3,
                             false, false, /*conv_width=*/16, 0, 0};

  // min-min alternation (UE / RUE / CP)
  int surrogate_steps = 20;  // surrogate updates per round
  int delta_steps = 10;      // delta updates per round, step size eps/10
  double stop_acc = 0.99;
  int max_rounds = 30;
  double surrogate_lr = 0.02;  // effective SGD lr for the surrogate
  double surrogate_momentum = 0.9;
  double surrogate_wd = 5e-4;
  int batch_size = 32;

  // AP
  int ap_train_epochs = 100;
  double ap_min_train_acc = 0.90;
  int ap_pgd_steps = 40;
  bool ap_targeted = true;

  // RUE inner adversary
  double rue_inner_radius = 2.0 / 255.0;
  int rue_inner_steps = 3;

  // CP
  double cp_temperature = 0.2;
  double cp_stop_loss = 0.10;
  augment::PolicyKnobs cp_knobs{};

  // LSP
  int lsp_block = 0;  // 0 -> image side / 4

  // CUDA
  int cuda_kernel = 3;
  double cuda_noise = 0.5;

  std::uint64_t seed = 0;

  data::PerturbationBudget resolved_budget() const {
    if (budget) {
      data::PerturbationBudget b = *budget;
      switch (generator) {
        case Generator::AP:
        case Generator::UE:
        case Generator::RUE:
        case Generator::CP:
        case Generator::LSP:
          if (b.norm != data::Norm::Linf)
            throw ArgumentError("generator requires an Linf budget");
          break;
        case Generator::OPS:
          if (b.norm != data::Norm::L0)
            throw ArgumentError("ops requires an L0 budget");
          break;
        case Generator::CUDA:
          if (b.norm != data::Norm::Unbounded)
            throw ArgumentError("cuda distortion is unbounded");
          break;
      }
      return b;
    }
    switch (generator) {
      case Generator::LSP: return {data::Norm::Linf, 16.0 / 255.0};
      case Generator::OPS: return {data::Norm::L0, 1.0};
      case Generator::CUDA: return {data::Norm::Unbounded, 0.0};
      default: return {data::Norm::Linf, 8.0 / 255.0};
    }
  }
};

namespace detail {

inline model::BuildSpec surrogate_spec(const GeneratorConfig& cfg,
                                       const data::ImageBatch& data,
                                       std::string_view tag) {
  model::BuildSpec s = cfg.surrogate;
  s.in_c = data.c();
  s.in_h = data.h();
  s.in_w = data.w();
  s.num_classes = data.num_classes;
  s.seed = derive_seed(cfg.seed, tag);
  return s;
}

/// A handful of plain supervised SGD steps on the given pixels/labels.
/// Batch statistics are live during the steps and frozen on return.
inline void surrogate_sl_steps(model::ModelBundle<float>& bundle,
                               trainer::Sgd& sgd,
                               model::ParameterSet<float>& params,
                               const Tensor<float>& pixels,
                               const std::vector<int>& labels, int steps,
                               int batch_size, double lr, Rng& rng) {
  bundle.set_train_mode(true);
  const int n = pixels.dim(0);
  const std::size_t stride = std::size_t(pixels.numel()) / std::max(n, 1);
  for (int s = 0; s < steps; ++s) {
    int bs = std::min(batch_size, n);
    std::vector<int> rows(static_cast<std::size_t>(bs), 0);
    for (auto& r : rows) r = static_cast<int>(rng.uniform_int(0, n - 1));
    Tensor<float> x({bs, pixels.dim(1), pixels.dim(2), pixels.dim(3)});
    std::vector<int> y(static_cast<std::size_t>(bs), 0);
    for (int i = 0; i < bs; ++i) {
      const float* src = pixels.data() + std::size_t(rows[std::size_t(i)]) * stride;
      std::copy(src, src + stride, x.data() + std::size_t(i) * stride);
      y[std::size_t(i)] = labels[std::size_t(rows[std::size_t(i)])];
    }
    auto f = model::forward(bundle, x, model::Heads::Logits(), true);
    auto ce = loss::cross_entropy_grad(f.logits, y);
    model::GradientSet<float> gs;
    model::backward_to_input(bundle, f, nullptr, nullptr, &ce.d_logits, &gs);
    sgd.step(params, gs, lr);
    ++bundle.param_version;
  }
  bundle.set_train_mode(false);
}

inline Tensor<float> add_delta(const Tensor<float>& x,
                               const Tensor<float>& delta) {
  Tensor<float> out(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i)
    out.v[i] = x.v[i] + delta.v[i];
  return out;
}

inline data::PoisonedDataset finish(const data::ImageBatch& clean,
                                    Tensor<float> poisoned_pixels,
                                    const GeneratorConfig& cfg,
                                    std::map<std::string, std::string> prov) {
  data::PoisonedDataset ds;
  ds.clean = clean;
  ds.poisoned = clean;
  ds.poisoned.pixels = std::move(poisoned_pixels);
  for (auto& v : ds.poisoned.pixels.v) v = std::clamp(v, 0.0f, 1.0f);
  ds.budget = cfg.resolved_budget();
  ds.generator_tag = generator_name(cfg.generator);
  prov["seed"] = std::to_string(cfg.seed);
  ds.generator_config = std::move(prov);
  ds.validate();
  return ds;
}

inline void for_each_batch(int n, int batch_size,
                           const std::function<void(int, int)>& fn) {
  for (int start = 0; start < n; start += batch_size)
    fn(start, std::min(n, start + batch_size));
}

}  // namespace detail

// --- AP: adversarial examples as poisons --------------------------------

/// Train a surrogate classifier on clean data, then perturb every sample
/// with targeted PGD toward (y + 1) mod K. Labels remain the true labels.
inline data::PoisonedDataset craft_ap(const data::ImageBatch& clean,
                                      const GeneratorConfig& cfg) {
  clean.validate();
  data::PerturbationBudget budget = cfg.resolved_budget();
  auto bundle = model::build_bundle<float>(
      detail::surrogate_spec(cfg, clean, "ap.surrogate"));
  trainer::Sgd sgd;
  sgd.momentum = cfg.surrogate_momentum;
  sgd.weight_decay = cfg.surrogate_wd;
  auto params = bundle.trainable_parameters();
  Rng rng(derive_seed(cfg.seed, "ap.train"));

  const int steps_per_epoch =
      std::max(1, clean.n() / std::min(cfg.batch_size, clean.n()));
  double acc = 0;
  for (int e = 0; e < cfg.ap_train_epochs; ++e) {
    detail::surrogate_sl_steps(bundle, sgd, params, clean.pixels,
                               clean.labels, steps_per_epoch, cfg.batch_size,
                               cfg.surrogate_lr, rng);
    acc = trainer::accuracy(bundle, clean.pixels, clean.labels);
    if (acc >= 0.995) break;
  }
  if (acc < cfg.ap_min_train_acc)
    throw GeneratorQualityError(
        "ap: surrogate reached only " + std::to_string(acc) +
        " clean train accuracy (needs >= " +
        std::to_string(cfg.ap_min_train_acc) + ")");

  Tensor<float> poisoned = clean.pixels;
  adversary::PGDConfig at;
  at.epsilon = budget.epsilon;
  at.step_size = std::max(budget.epsilon / 10.0, 1e-9);
  at.steps = cfg.ap_pgd_steps;
  at.random_start = true;
  at.guide = adversary::Guide::CE;

  const std::size_t stride =
      std::size_t(clean.pixels.numel()) / std::max(clean.n(), 1);
  detail::for_each_batch(clean.n(), cfg.batch_size, [&](int b0, int b1) {
    std::vector<int> rows;
    for (int i = b0; i < b1; ++i) rows.push_back(i);
    data::ImageBatch batch = clean.select(rows);
    std::vector<int> targets = batch.labels;
    if (cfg.ap_targeted)
      for (auto& y : targets) y = (y + 1) % clean.num_classes;
    adversary::AttackTargets<float> tgt;
    tgt.labels = &targets;
    adversary::PGDConfig local = at;
    local.seed = derive_seed(cfg.seed, "ap.pgd.b" + std::to_string(b0));
    // targeted: descend CE toward the decoy label; untargeted: ascend
    auto delta = adversary::pgd_attack(bundle, batch.pixels, tgt, local,
                                       /*maximize=*/!cfg.ap_targeted);
    for (int i = b0; i < b1; ++i)
      for (std::size_t k = 0; k < stride; ++k)
        poisoned.v[std::size_t(i) * stride + k] +=
            delta.v[std::size_t(i - b0) * stride + k];
  });

  std::map<std::string, std::string> prov{
      {"targeted", cfg.ap_targeted ? "true" : "false"},
      {"surrogate_train_acc", std::to_string(acc)},
      {"pgd_steps", std::to_string(cfg.ap_pgd_steps)}};
  return detail::finish(clean, std::move(poisoned), cfg, std::move(prov));
}

// --- UE / RUE: error-minimizing noise ------------------------------------

namespace detail {

/// Shared min-min alternation: M supervised surrogate steps on the current
/// poisoned pixels, then K sign steps on delta minimizing the surrogate CE
/// (for RUE, the CE at the inner-adversarial point), until the surrogate
/// fits the poisoned set at stop_acc or rounds run out.
inline data::PoisonedDataset craft_error_min(const data::ImageBatch& clean,
                                             const GeneratorConfig& cfg,
                                             bool robust) {
  clean.validate();
  data::PerturbationBudget budget = cfg.resolved_budget();
  const char* tag = robust ? "rue" : "ue";
  auto bundle = model::build_bundle<float>(
      detail::surrogate_spec(cfg, clean, std::string(tag) + ".surrogate"));
  trainer::Sgd sgd;
  sgd.momentum = cfg.surrogate_momentum;
  sgd.weight_decay = cfg.surrogate_wd;
  auto params = bundle.trainable_parameters();
  Rng rng(derive_seed(cfg.seed, std::string(tag) + ".train"));

  Tensor<float> delta(clean.pixels.shape);
  const std::size_t stride =
      std::size_t(clean.pixels.numel()) / std::max(clean.n(), 1);
  const double delta_step = budget.epsilon / 10.0;

  double acc = 0;
  bool converged = false;
  int rounds = 0;
  for (int round = 0; round < cfg.max_rounds && !converged; ++round) {
    rounds = round + 1;
    Tensor<float> poisoned = detail::add_delta(clean.pixels, delta);
    detail::surrogate_sl_steps(bundle, sgd, params, poisoned, clean.labels,
                               cfg.surrogate_steps, cfg.batch_size,
                               cfg.surrogate_lr, rng);

    detail::for_each_batch(clean.n(), cfg.batch_size, [&](int b0, int b1) {
      const int bs = b1 - b0;
      Tensor<float> x({bs, clean.c(), clean.h(), clean.w()});
      Tensor<float> d({bs, clean.c(), clean.h(), clean.w()});
      std::vector<int> y(static_cast<std::size_t>(bs), 0);
      for (int i = 0; i < bs; ++i) {
        const float* src = clean.pixels.data() + std::size_t(b0 + i) * stride;
        std::copy(src, src + stride, x.data() + std::size_t(i) * stride);
        const float* ds = delta.data() + std::size_t(b0 + i) * stride;
        std::copy(ds, ds + stride, d.data() + std::size_t(i) * stride);
        y[std::size_t(i)] = clean.labels[std::size_t(b0 + i)];
      }
      adversary::AttackTargets<float> tgt;
      tgt.labels = &y;

      if (!robust) {
        adversary::PGDConfig pg;
        pg.epsilon = budget.epsilon;
        pg.step_size = delta_step;
        pg.steps = cfg.delta_steps;
        pg.random_start = false;
        pg.guide = adversary::Guide::CE;
        pg.seed = derive_seed(cfg.seed, std::string(tag) + ".delta.b" +
                                            std::to_string(b0));
        d = adversary::pgd_attack(bundle, x, tgt, pg, /*maximize=*/false,
                                  &d);
      } else {
        // min over delta of max over rho: take the CE gradient at the
        // inner-adversarial point and descend
        adversary::PGDConfig inner;
        inner.epsilon = cfg.rue_inner_radius;
        inner.step_size = std::max(cfg.rue_inner_radius / 2.0, 1e-9);
        inner.steps = cfg.rue_inner_steps;
        inner.random_start = true;
        inner.guide = adversary::Guide::CE;
        for (int k = 0; k < cfg.delta_steps; ++k) {
          Tensor<float> xd = detail::add_delta(x, d);
          inner.seed = derive_seed(cfg.seed, std::string(tag) + ".inner.b" +
                                                 std::to_string(b0) + "." +
                                                 std::to_string(k));
          auto rho = adversary::pgd_attack(bundle, xd, tgt, inner, true);
          Tensor<float> probe = detail::add_delta(xd, rho);
          model::LossClosure<float> closure;
          closure.heads = model::Heads::Logits();
          closure.eval = [&](const model::ForwardOut<float>& f,
                             Tensor<float>*, Tensor<float>*,
                             Tensor<float>* d_logits) {
            auto ce = loss::cross_entropy_grad(f.logits, y);
            *d_logits = std::move(ce.d_logits);
            return ce.value;
          };
          Tensor<float> g = model::grad_wrt_input(bundle, probe, closure);
          for (std::size_t i = 0; i < d.v.size(); ++i) {
            float gg = g.v[i];
            float step = gg > 0 ? -float(delta_step)
                                : (gg < 0 ? float(delta_step) : 0.0f);
            float nd = std::clamp(d.v[i] + step, -float(budget.epsilon),
                                  float(budget.epsilon));
            nd = std::clamp(x.v[i] + nd, 0.0f, 1.0f) - x.v[i];
            d.v[i] = nd;
          }
        }
      }
      for (int i = 0; i < bs; ++i)
        std::copy(d.data() + std::size_t(i) * stride,
                  d.data() + std::size_t(i + 1) * stride,
                  delta.data() + std::size_t(b0 + i) * stride);
    });

    Tensor<float> check = detail::add_delta(clean.pixels, delta);
    acc = trainer::accuracy(bundle, check, clean.labels);
    converged = acc >= cfg.stop_acc;
  }

  std::map<std::string, std::string> prov{
      {"rounds", std::to_string(rounds)},
      {"converged", converged ? "true" : "false"},
      {"surrogate_final_acc", std::to_string(acc)},
      {"stop_acc", std::to_string(cfg.stop_acc)}};
  if (robust) {
    prov["inner_radius"] = std::to_string(cfg.rue_inner_radius);
    prov["inner_steps"] = std::to_string(cfg.rue_inner_steps);
  }
  if (!converged)
    prov["warning"] = "max_rounds reached before stop_acc";
  return detail::finish(clean, detail::add_delta(clean.pixels, delta), cfg,
                        std::move(prov));
}

}  // namespace detail

inline data::PoisonedDataset craft_ue(const data::ImageBatch& clean,
                                      const GeneratorConfig& cfg) {
  return detail::craft_error_min(clean, cfg, /*robust=*/false);
}

inline data::PoisonedDataset craft_rue(const data::ImageBatch& clean,
                                       const GeneratorConfig& cfg) {
  return detail::craft_error_min(clean, cfg, /*robust=*/true);
}

// --- CP: contrastive poisoning -------------------------------------------

/// Min-min alternation against a SimCLR surrogate: the encoder+projector
/// trains with InfoNCE over two pretrain views of the poisoned images; the
/// delta step minimizes the contrastive loss through a geometric view pair
/// (identity, horizontal flip) that shares delta pre-augmentation.
inline data::PoisonedDataset craft_cp(const data::ImageBatch& clean,
                                      const GeneratorConfig& cfg) {
  clean.validate();
  data::PerturbationBudget budget = cfg.resolved_budget();
  auto bundle = model::build_bundle<float>(
      detail::surrogate_spec(cfg, clean, "cp.surrogate"));
  trainer::Sgd sgd;
  sgd.momentum = cfg.surrogate_momentum;
  sgd.weight_decay = cfg.surrogate_wd;
  auto params = bundle.trainable_parameters();
  Rng rng(derive_seed(cfg.seed, "cp.train"));

  Tensor<float> delta(clean.pixels.shape);
  const std::size_t stride =
      std::size_t(clean.pixels.numel()) / std::max(clean.n(), 1);
  const double delta_step = budget.epsilon / 10.0;
  const int n = clean.n();

  auto flip_h = [&](const Tensor<float>& x) {
    Tensor<float> out(x.shape);
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (int i = 0; i < x.dim(0); ++i)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w)
            out.at4(i, c, h, w) = x.at4(i, c, h, W - 1 - w);
    return out;
  };

  double last_cl = 1e9;
  bool converged = false;
  int rounds = 0;
  for (int round = 0; round < cfg.max_rounds && !converged; ++round) {
    rounds = round + 1;
    // surrogate phase: InfoNCE on two full pretrain views of poisoned data
    {
      data::ImageBatch poisoned = clean;
      poisoned.pixels = detail::add_delta(clean.pixels, delta);
      for (auto& v : poisoned.pixels.v) v = std::clamp(v, 0.0f, 1.0f);
      augment::AugmentPolicy pol = augment::pretrain_policy(
          derive_seed(cfg.seed, "cp.aug.r" + std::to_string(round)),
          cfg.cp_knobs);
      bundle.set_train_mode(true);
      for (int s = 0; s < cfg.surrogate_steps; ++s) {
        int bs = std::min(cfg.batch_size, n);
        if (bs < 2) break;
        std::vector<int> rows(static_cast<std::size_t>(bs), 0);
        for (auto& r : rows) r = static_cast<int>(rng.uniform_int(0, n - 1));
        data::ImageBatch batch = poisoned.select(rows);
        // ids may repeat after sampling with replacement; keep streams
        // distinct per slot
        for (std::size_t i = 0; i < batch.ids.size(); ++i)
          batch.ids[i] += "#" + std::to_string(s) + "." + std::to_string(i);
        auto views = augment::apply_policy(pol, batch, 2);
        auto f1 = model::forward(bundle, views[0].pixels,
                                 model::Heads::Proj(), true);
        auto f2 = model::forward(bundle, views[1].pixels,
                                 model::Heads::Proj(), true);
        auto cl = loss::info_nce_grad(f1.proj, f2.proj, cfg.cp_temperature);
        model::GradientSet<float> gs;
        model::backward_to_input(bundle, f1, nullptr, &cl.d_a, nullptr, &gs);
        model::backward_to_input(bundle, f2, nullptr, &cl.d_b, nullptr, &gs);
        sgd.step(params, gs, cfg.surrogate_lr);
        ++bundle.param_version;
      }
      bundle.set_train_mode(false);
    }

    // delta phase: minimize InfoNCE between (x+delta, flip(x+delta))
    double cl_sum = 0;
    int cl_batches = 0;
    detail::for_each_batch(n, cfg.batch_size, [&](int b0, int b1) {
      const int bs = b1 - b0;
      if (bs < 2) return;
      Tensor<float> x({bs, clean.c(), clean.h(), clean.w()});
      Tensor<float> d({bs, clean.c(), clean.h(), clean.w()});
      for (int i = 0; i < bs; ++i) {
        const float* src = clean.pixels.data() + std::size_t(b0 + i) * stride;
        std::copy(src, src + stride, x.data() + std::size_t(i) * stride);
        const float* dp = delta.data() + std::size_t(b0 + i) * stride;
        std::copy(dp, dp + stride, d.data() + std::size_t(i) * stride);
      }
      double cl_final = 0;
      for (int k = 0; k < cfg.delta_steps; ++k) {
        Tensor<float> v1 = detail::add_delta(x, d);
        Tensor<float> v2 = flip_h(v1);
        auto f1 = model::forward(bundle, v1, model::Heads::Proj(), true);
        auto f2 = model::forward(bundle, v2, model::Heads::Proj(), true);
        auto cl = loss::info_nce_grad(f1.proj, f2.proj, cfg.cp_temperature);
        cl_final = cl.value;
        auto g1 = model::backward_to_input(bundle, f1, nullptr, &cl.d_a,
                                           nullptr, nullptr);
        auto g2 = model::backward_to_input(bundle, f2, nullptr, &cl.d_b,
                                           nullptr, nullptr);
        // gradient through the flip: unflip the second branch
        Tensor<float> g2u = flip_h(g2);
        for (std::size_t i = 0; i < d.v.size(); ++i) {
          float gg = g1.v[i] + g2u.v[i];
          float step = gg > 0 ? -float(delta_step)
                              : (gg < 0 ? float(delta_step) : 0.0f);
          float nd = std::clamp(d.v[i] + step, -float(budget.epsilon),
                                float(budget.epsilon));
          nd = std::clamp(x.v[i] + nd, 0.0f, 1.0f) - x.v[i];
          d.v[i] = nd;
        }
      }
      cl_sum += cl_final;
      ++cl_batches;
      for (int i = 0; i < bs; ++i)
        std::copy(d.data() + std::size_t(i) * stride,
                  d.data() + std::size_t(i + 1) * stride,
                  delta.data() + std::size_t(b0 + i) * stride);
    });
    last_cl = cl_batches ? cl_sum / cl_batches : last_cl;
    converged = last_cl <= cfg.cp_stop_loss;
  }

  std::map<std::string, std::string> prov{
      {"rounds", std::to_string(rounds)},
      {"converged", converged ? "true" : "false"},
      {"final_contrastive_loss", std::to_string(last_cl)},
      {"stop_loss", std::to_string(cfg.cp_stop_loss)}};
  if (!converged)
    prov["warning"] = "max_rounds reached before stop_loss";
  return detail::finish(clean, detail::add_delta(clean.pixels, delta), cfg,
                        std::move(prov));
}

// --- LSP: class-wise linearly separable patterns --------------------------

/// One fixed blockwise pattern per class: every block (per channel) adds
/// +eps or -eps, the same pattern for every image of the class.
inline data::PoisonedDataset craft_lsp(const data::ImageBatch& clean,
                                       const GeneratorConfig& cfg) {
  clean.validate();
  data::PerturbationBudget budget = cfg.resolved_budget();
  const int side = clean.h();
  int block = cfg.lsp_block > 0 ? cfg.lsp_block : std::max(1, side / 4);
  if (block > side) throw ArgumentError("lsp: block larger than image");
  const int C = clean.c();
  const int blocks = (side + block - 1) / block;  // border-truncated tiling

  Rng rng(derive_seed(cfg.seed, "lsp.patterns"));
  // pattern values per class: [class][channel][by][bx]
  std::vector<std::vector<float>> values(
      std::size_t(clean.num_classes),
      std::vector<float>(std::size_t(C) * blocks * blocks));
  for (int k = 0; k < clean.num_classes; ++k)
    for (auto& v : values[std::size_t(k)])
      v = rng.uniform() < 0.5 ? -float(budget.epsilon)
                              : float(budget.epsilon);

  Tensor<float> poisoned = clean.pixels;
  for (int i = 0; i < clean.n(); ++i) {
    const auto& pat = values[std::size_t(clean.labels[std::size_t(i)])];
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          poisoned.at4(i, c, y, x) +=
              pat[(std::size_t(c) * blocks + y / block) * blocks + x / block];
  }

  data::json pat_json = data::json::array();
  for (const auto& v : values) pat_json.push_back(v);
  std::map<std::string, std::string> prov{
      {"block_size", std::to_string(block)},
      {"patterns", pat_json.dump()}};
  return detail::finish(clean, std::move(poisoned), cfg, std::move(prov));
}

// --- OPS: one-pixel shortcut ----------------------------------------------

/// Per class, pick the pixel coordinate whose class mean deviates most
/// from the dataset mean (ties toward the lowest row, then column), and an
/// extreme color in the deviation direction; set that pixel in every image
/// of the class. Coordinates are kept distinct across classes and the
/// color is nudged if any sample already holds it, so the L0 distance is
/// exactly one pixel for every sample.
inline data::PoisonedDataset craft_ops(const data::ImageBatch& clean,
                                       const GeneratorConfig& cfg) {
  clean.validate();
  const int C = clean.c(), H = clean.h(), W = clean.w();
  const int K = clean.num_classes;

  // per-pixel class means and dataset mean
  std::vector<double> mean_all(std::size_t(C) * H * W, 0.0);
  std::vector<std::vector<double>> mean_cls(
      std::size_t(K), std::vector<double>(std::size_t(C) * H * W, 0.0));
  std::vector<int> count_cls(std::size_t(K), 0);
  for (int i = 0; i < clean.n(); ++i) {
    int k = clean.labels[std::size_t(i)];
    ++count_cls[std::size_t(k)];
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double v = clean.pixels.at4(i, c, y, x);
          mean_all[(std::size_t(c) * H + y) * W + x] += v;
          mean_cls[std::size_t(k)][(std::size_t(c) * H + y) * W + x] += v;
        }
  }
  for (auto& v : mean_all) v /= clean.n();
  for (int k = 0; k < K; ++k)
    for (auto& v : mean_cls[std::size_t(k)])
      v /= std::max(count_cls[std::size_t(k)], 1);

  std::vector<std::pair<int, int>> coords(std::size_t(K), {-1, -1});
  std::vector<std::vector<float>> colors(
      static_cast<std::size_t>(K),
      std::vector<float>(static_cast<std::size_t>(C), 0.0f));
  std::vector<std::vector<char>> taken(std::size_t(H),
                                       std::vector<char>(std::size_t(W), 0));
  for (int k = 0; k < K; ++k) {
    double best_score = -1.0;
    int by = 0, bx = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (taken[std::size_t(y)][std::size_t(x)]) continue;
        double score = 0;
        for (int c = 0; c < C; ++c) {
          double d = mean_cls[std::size_t(k)][(std::size_t(c) * H + y) * W +
                                              x] -
                     mean_all[(std::size_t(c) * H + y) * W + x];
          score += d * d;
        }
        if (score > best_score + 1e-15) {  // strict: ties keep first found
          best_score = score;
          by = y;
          bx = x;
        }
      }
    taken[std::size_t(by)][std::size_t(bx)] = 1;
    coords[std::size_t(k)] = {by, bx};
    for (int c = 0; c < C; ++c) {
      double d = mean_cls[std::size_t(k)][(std::size_t(c) * H + by) * W + bx] -
                 mean_all[(std::size_t(c) * H + by) * W + bx];
      colors[std::size_t(k)][std::size_t(c)] = d >= 0 ? 1.0f : 0.0f;
    }
    // every sample must actually change at this pixel
    bool collision = true;
    while (collision) {
      collision = false;
      for (int i = 0; i < clean.n() && !collision; ++i) {
        if (clean.labels[std::size_t(i)] != k) continue;
        bool same = true;
        for (int c = 0; c < C; ++c)
          same &= clean.pixels.at4(i, c, by, bx) ==
                  colors[std::size_t(k)][std::size_t(c)];
        collision = same;
      }
      if (collision)
        colors[std::size_t(k)][0] =
            std::fabs(colors[std::size_t(k)][0] - 1.0f / 255.0f);
    }
  }

  Tensor<float> poisoned = clean.pixels;
  for (int i = 0; i < clean.n(); ++i) {
    int k = clean.labels[std::size_t(i)];
    auto [y, x] = coords[std::size_t(k)];
    for (int c = 0; c < C; ++c)
      poisoned.at4(i, c, y, x) = colors[std::size_t(k)][std::size_t(c)];
  }

  data::json px = data::json::array();
  for (int k = 0; k < K; ++k)
    px.push_back({{"row", coords[std::size_t(k)].first},
                  {"col", coords[std::size_t(k)].second},
                  {"color", colors[std::size_t(k)]}});
  std::map<std::string, std::string> prov{{"pixels", px.dump()}};
  return detail::finish(clean, std::move(poisoned), cfg, std::move(prov));
}

// --- CUDA: class-wise convolution -----------------------------------------

/// One fixed random kernel per class (identity plus uniform tap noise,
/// renormalized to unit sum), applied to every channel of every image of
/// the class with edge-replicate padding. Non-additive; the kernels live
/// in the provenance.
inline data::PoisonedDataset craft_cuda(const data::ImageBatch& clean,
                                        const GeneratorConfig& cfg) {
  clean.validate();
  const int k = cfg.cuda_kernel;
  if (k < 1 || k % 2 == 0) throw ArgumentError("cuda: kernel must be odd");
  Rng rng(derive_seed(cfg.seed, "cuda.kernels"));

  std::vector<std::vector<double>> kernels(
      std::size_t(clean.num_classes),
      std::vector<double>(std::size_t(k) * k, 0.0));
  for (int cls = 0; cls < clean.num_classes; ++cls) {
    auto& kn = kernels[std::size_t(cls)];
    double sum = 0;
    do {
      sum = 0;
      for (int i = 0; i < k * k; ++i) {
        kn[std::size_t(i)] = rng.uniform(-cfg.cuda_noise, cfg.cuda_noise);
        if (i == (k * k) / 2) kn[std::size_t(i)] += 1.0;  // identity tap
        sum += kn[std::size_t(i)];
      }
    } while (std::fabs(sum) < 0.2);  // redraw near-singular kernels
    for (auto& v : kn) v /= sum;
  }

  const int C = clean.c(), H = clean.h(), W = clean.w(), r = k / 2;
  Tensor<float> poisoned(clean.pixels.shape);
  for (int i = 0; i < clean.n(); ++i) {
    const auto& kn = kernels[std::size_t(clean.labels[std::size_t(i)])];
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0;
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              int yy = std::clamp(y + dy, 0, H - 1);
              int xx = std::clamp(x + dx, 0, W - 1);
              acc += kn[std::size_t(dy + r) * k + (dx + r)] *
                     clean.pixels.at4(i, c, yy, xx);
            }
          poisoned.at4(i, c, y, x) =
              static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
  }

  data::json kj = data::json::array();
  for (const auto& kn : kernels) kj.push_back(kn);
  std::map<std::string, std::string> prov{
      {"kernel_size", std::to_string(k)},
      {"noise", std::to_string(cfg.cuda_noise)},
      {"kernels", kj.dump()}};
  return detail::finish(clean, std::move(poisoned), cfg, std::move(prov));
}

// --- dispatch and verification ---------------------------------------------

inline data::PoisonedDataset craft(const data::ImageBatch& clean,
                                   const GeneratorConfig& cfg) {
  switch (cfg.generator) {
    case Generator::AP: return craft_ap(clean, cfg);
    case Generator::UE: return craft_ue(clean, cfg);
    case Generator::RUE: return craft_rue(clean, cfg);
    case Generator::CP: return craft_cp(clean, cfg);
    case Generator::LSP: return craft_lsp(clean, cfg);
    case Generator::OPS: return craft_ops(clean, cfg);
    case Generator::CUDA: return craft_cuda(clean, cfg);
  }
  throw ArgumentError("craft: unknown generator");
}

struct BudgetReport {
  data::Norm norm = data::Norm::Linf;
  double epsilon = 0;
  std::vector<double> per_sample;
  double max_distance = 0;
  double mean_distance = 0;
  std::optional<bool> passed;  // unset for Unbounded budgets
  std::vector<std::string> failing_ids;

  data::json to_json() const {
    data::json j{{"norm", data::norm_name(norm)},
                 {"epsilon", epsilon},
                 {"max_distance", max_distance},
                 {"mean_distance", mean_distance},
                 {"per_sample", per_sample},
                 {"failing_ids", failing_ids}};
    j["passed"] = passed ? data::json(*passed) : data::json(nullptr);
    return j;
  }
};

/// Per-sample distances under the declared norm with a pass/fail verdict;
/// Unbounded budgets (CUDA) report distortion statistics only.
inline BudgetReport verify_budget(const data::PoisonedDataset& ds,
                                  double tol = 1e-6) {
  BudgetReport r;
  r.norm = ds.budget.norm;
  r.epsilon = ds.budget.epsilon;
  double sum = 0;
  for (int i = 0; i < ds.clean.n(); ++i) {
    double d = data::sample_distance(ds.clean, ds.poisoned, i,
                                     ds.budget.norm == data::Norm::Unbounded
                                         ? data::Norm::Linf
                                         : ds.budget.norm);
    r.per_sample.push_back(d);
    r.max_distance = std::max(r.max_distance, d);
    sum += d;
    if (ds.budget.norm != data::Norm::Unbounded && d > ds.budget.epsilon + tol)
      r.failing_ids.push_back(ds.clean.ids[std::size_t(i)]);
  }
  r.mean_distance = ds.clean.n() ? sum / ds.clean.n() : 0.0;
  if (ds.budget.norm != data::Norm::Unbounded)
    r.passed = r.failing_ids.empty();
  return r;
}

}  // namespace poisonforge::poisoncraft
