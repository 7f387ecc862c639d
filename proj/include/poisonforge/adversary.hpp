#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "poisonforge/loss.hpp"
#include "poisonforge/model.hpp"
#include "poisonforge/rng.hpp"

namespace poisonforge::adversary {

enum class Guide { CE, Contrastive, Combined };

inline const char* guide_name(Guide g) {
  switch (g) {
    case Guide::CE: return "ce";
    case Guide::Contrastive: return "contrastive";
    case Guide::Combined: return "combined";
  }
  return "?";
}
inline Guide guide_from_name(const std::string& s) {
  if (s == "ce") return Guide::CE;
  if (s == "contrastive") return Guide::Contrastive;
  if (s == "combined") return Guide::Combined;
  throw ArgumentError("unknown PGD guide '" + s + "'");
}

/// L-infinity PGD settings. Defaults follow the adversarial-training
/// recipe used throughout: 10 steps of 0.6/255 inside a 4/255 ball with a
/// random start and no restarts.
struct PGDConfig {
  double epsilon = 4.0 / 255.0;
  double step_size = 0.6 / 255.0;
  int steps = 10;
  bool random_start = true;
  int restarts = 0;  // extra tries beyond the first
  Guide guide = Guide::CE;
  std::uint64_t seed = 0;

  void validate() const {
    if (epsilon < 0.0) throw ArgumentError("PGDConfig: epsilon must be >= 0");
    if (steps < 0) throw ArgumentError("PGDConfig: steps must be >= 0");
    if (steps > 0 && step_size <= 0.0)
      throw ArgumentError("PGDConfig: step_size must be > 0 when steps > 0");
    if (restarts < 0) throw ArgumentError("PGDConfig: restarts must be >= 0");
  }
};

/// What the guiding loss needs: labels for CE, the unperturbed sibling
/// views for the contrastive guide, both for the combined guide.
template <typename T>
struct AttackTargets {
  const std::vector<int>* labels = nullptr;
  const Tensor<T>* sibling_views = nullptr;
  loss::LossWeights weights{};
};

namespace detail {

template <typename T>
struct GuideEval {
  model::Heads heads;
  Tensor<T> sibling_proj;  // precomputed, constant during the attack

  static GuideEval make(const model::ModelBundle<T>& b,
                        const AttackTargets<T>& tgt, Guide guide) {
    GuideEval ge;
    switch (guide) {
      case Guide::CE:
        if (!tgt.labels)
          throw ArgumentError("pgd_attack: guide=ce requires labels");
        ge.heads = model::Heads::Logits();
        break;
      case Guide::Contrastive:
        if (!tgt.sibling_views)
          throw ArgumentError(
              "pgd_attack: guide=contrastive requires sibling views");
        ge.heads = model::Heads::Proj();
        ge.sibling_proj =
            model::forward(b, *tgt.sibling_views, model::Heads::Proj()).proj;
        break;
      case Guide::Combined:
        if (!tgt.labels)
          throw ArgumentError("pgd_attack: guide=combined requires labels");
        if (!tgt.sibling_views)
          throw ArgumentError(
              "pgd_attack: guide=combined requires sibling views");
        ge.heads = {false, true, true};
        ge.sibling_proj =
            model::forward(b, *tgt.sibling_views, model::Heads::Proj()).proj;
        break;
    }
    return ge;
  }

  /// Loss value and its gradient w.r.t. the current input.
  double loss_and_grad(const model::ModelBundle<T>& b, const Tensor<T>& x,
                       const AttackTargets<T>& tgt, Guide guide,
                       Tensor<T>* dx) const {
    model::ForwardOut<T> f = model::forward(b, x, heads, /*traced=*/dx != nullptr);
    double value = 0;
    Tensor<T> d_proj, d_logits;
    const Tensor<T>* dp = nullptr;
    const Tensor<T>* dl = nullptr;
    switch (guide) {
      case Guide::CE: {
        auto ce = loss::cross_entropy_grad(f.logits, *tgt.labels);
        value = ce.value;
        d_logits = std::move(ce.d_logits);
        dl = &d_logits;
        break;
      }
      case Guide::Contrastive: {
        auto cl = loss::info_nce_grad(f.proj, sibling_proj,
                                      tgt.weights.temperature);
        value = cl.value;
        d_proj = std::move(cl.d_a);  // sibling branch is constant
        dp = &d_proj;
        break;
      }
      case Guide::Combined: {
        auto v = loss::vespr_loss_grad(f.proj, sibling_proj, f.logits,
                                       *tgt.labels, tgt.weights);
        value = v.value;
        d_proj = std::move(v.d_proj_adv);
        d_logits = std::move(v.d_logits_adv);
        dp = &d_proj;
        dl = &d_logits;
        break;
      }
    }
    if (dx)
      *dx = model::backward_to_input(b, f, nullptr, dp, dl, nullptr);
    return value;
  }
};

}  // namespace detail

/// Projected gradient descent under an L-infinity budget. Each step moves
/// by step_size * sign(grad) toward higher (maximize) or lower guiding
/// loss, then projects onto the intersection of the epsilon ball and the
/// [0,1] pixel box, so every iterate is a feasible image. With restarts,
/// the delta with the best final loss is returned. `warm_start` seeds the
/// first try with an existing delta (used by crafting loops); the default
/// start is zero or U(-eps, eps) when random_start is set. Model
/// parameters are never touched.
template <typename T>
inline Tensor<T> pgd_attack(const model::ModelBundle<T>& b, const Tensor<T>& x,
                            const AttackTargets<T>& targets,
                            const PGDConfig& cfg, bool maximize = true,
                            const Tensor<T>* warm_start = nullptr) {
  cfg.validate();
  model::check_batch_shape(b, x);
  if (targets.labels &&
      static_cast<int>(targets.labels->size()) != x.dim(0))
    throw ArgumentError("pgd_attack: labels length != batch size");
  if (targets.sibling_views && !targets.sibling_views->same_shape(x))
    throw ArgumentError("pgd_attack: sibling views shape mismatch");

  detail::GuideEval<T> ge = detail::GuideEval<T>::make(b, targets, cfg.guide);
  if (cfg.epsilon == 0.0) return Tensor<T>(x.shape);

  const T eps = static_cast<T>(cfg.epsilon);
  const double sgn = maximize ? 1.0 : -1.0;
  Rng rng(derive_seed(cfg.seed, "pgd"));

  auto project = [&](Tensor<T>& delta) {
    for (std::size_t i = 0; i < delta.v.size(); ++i) {
      T d = std::clamp(delta.v[i], -eps, eps);
      T px = std::clamp(static_cast<T>(x.v[i] + d), T(0), T(1));
      delta.v[i] = px - x.v[i];
    }
  };

  Tensor<T> best;
  double best_loss = 0;
  bool have_best = false;
  const int tries = cfg.restarts + 1;
  for (int t = 0; t < tries; ++t) {
    Tensor<T> delta(x.shape);
    if (warm_start && t == 0) {
      if (!warm_start->same_shape(x))
        throw ArgumentError("pgd_attack: warm_start shape mismatch");
      delta = *warm_start;
      project(delta);
    } else if (cfg.random_start) {
      for (auto& d : delta.v)
        d = static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
      project(delta);
    }

    Tensor<T> cur(x.shape);
    Tensor<T> grad;
    for (int s = 0; s < cfg.steps; ++s) {
      for (std::size_t i = 0; i < cur.v.size(); ++i)
        cur.v[i] = x.v[i] + delta.v[i];
      ge.loss_and_grad(b, cur, targets, cfg.guide, &grad);
      for (std::size_t i = 0; i < delta.v.size(); ++i) {
        double g = grad.v[i];
        double step = g > 0 ? cfg.step_size : (g < 0 ? -cfg.step_size : 0.0);
        delta.v[i] = static_cast<T>(delta.v[i] + sgn * step);
      }
      project(delta);
    }

    for (std::size_t i = 0; i < cur.v.size(); ++i)
      cur.v[i] = x.v[i] + delta.v[i];
    double final_loss =
        ge.loss_and_grad(b, cur, targets, cfg.guide, nullptr);
    if (!have_best || (maximize ? final_loss > best_loss
                                : final_loss < best_loss)) {
      best = std::move(delta);
      best_loss = final_loss;
      have_best = true;
    }
  }
  return best;
}

struct AttackStats {
  double mean_loss_increase = 0;
  double flip_rate = 0;
};

/// CE-based instrumentation: how much the guiding loss rose and what
/// fraction of predictions flipped after adding delta.
template <typename T>
inline AttackStats attack_success_stats(const model::ModelBundle<T>& b,
                                        const Tensor<T>& clean_pixels,
                                        const std::vector<int>& labels,
                                        const Tensor<T>& delta) {
  if (!delta.same_shape(clean_pixels))
    throw ArgumentError("attack_success_stats: delta shape mismatch");
  Tensor<T> adv(clean_pixels.shape);
  for (std::size_t i = 0; i < adv.v.size(); ++i)
    adv.v[i] = clean_pixels.v[i] + delta.v[i];

  auto logits_c = model::forward(b, clean_pixels, model::Heads::Logits()).logits;
  auto logits_a = model::forward(b, adv, model::Heads::Logits()).logits;
  double lc = loss::cross_entropy(logits_c, labels);
  double la = loss::cross_entropy(logits_a, labels);

  const int N = clean_pixels.dim(0), K = logits_c.dim(1);
  int flips = 0;
  for (int n = 0; n < N; ++n) {
    int pc = 0, pa = 0;
    for (int k = 1; k < K; ++k) {
      if (logits_c.at2(n, k) > logits_c.at2(n, pc)) pc = k;
      if (logits_a.at2(n, k) > logits_a.at2(n, pa)) pa = k;
    }
    if (pc != pa) ++flips;
  }
  AttackStats st;
  st.mean_loss_increase = la - lc;
  st.flip_rate = N > 0 ? double(flips) / N : 0.0;
  return st;
}

}  // namespace poisonforge::adversary
