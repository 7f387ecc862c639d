#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poisonforge/adversary.hpp"
#include "poisonforge/augment.hpp"
#include "poisonforge/container_io.hpp"
#include "poisonforge/image_batch.hpp"
#include "poisonforge/loss.hpp"
#include "poisonforge/model.hpp"

namespace poisonforge::trainer {

enum class Method {
  SL,
  SL_AT,
  SSL,
  SSL_AT,
  SSL_SL,
  SSL_SL_GN,
  VESPR,
  VESPR_SSL,
  VESPR_BOTH,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::SL: return "sl";
    case Method::SL_AT: return "sl_at";
    case Method::SSL: return "ssl";
    case Method::SSL_AT: return "ssl_at";
    case Method::SSL_SL: return "ssl_sl";
    case Method::SSL_SL_GN: return "ssl_sl_gn";
    case Method::VESPR: return "vespr";
    case Method::VESPR_SSL: return "vespr_ssl";
    case Method::VESPR_BOTH: return "vespr_both";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  for (Method m : {Method::SL, Method::SL_AT, Method::SSL, Method::SSL_AT,
                   Method::SSL_SL, Method::SSL_SL_GN, Method::VESPR,
                   Method::VESPR_SSL, Method::VESPR_BOTH})
    if (s == method_name(m)) return m;
  throw ArgumentError("unknown training method '" + s + "'");
}

enum class SslMethod { SimCLR, MoCo, SimSiam, BYOL };

inline const char* ssl_method_name(SslMethod m) {
  switch (m) {
    case SslMethod::SimCLR: return "simclr";
    case SslMethod::MoCo: return "moco";
    case SslMethod::SimSiam: return "simsiam";
    case SslMethod::BYOL: return "byol";
  }
  return "?";
}
inline SslMethod ssl_method_from_name(const std::string& s) {
  for (SslMethod m : {SslMethod::SimCLR, SslMethod::MoCo, SslMethod::SimSiam,
                      SslMethod::BYOL})
    if (s == ssl_method_name(m)) return m;
  throw ArgumentError("unknown ssl method '" + s + "'");
}

enum class Schedule { Cosine, Step };

inline const char* schedule_name(Schedule s) {
  return s == Schedule::Cosine ? "cosine" : "step";
}
inline Schedule schedule_from_name(const std::string& s) {
  if (s == "cosine") return Schedule::Cosine;
  if (s == "step") return Schedule::Step;
  throw ArgumentError("unknown lr schedule '" + s + "'");
}

/// Augmentation-based supervised defenses, applied on top of the SL view.
enum class DefenseAug { None, Cutout, Mixup, CutMix };

inline const char* defense_name(DefenseAug d) {
  switch (d) {
    case DefenseAug::None: return "none";
    case DefenseAug::Cutout: return "cutout";
    case DefenseAug::Mixup: return "mixup";
    case DefenseAug::CutMix: return "cutmix";
  }
  return "?";
}
inline DefenseAug defense_from_name(const std::string& s) {
  for (DefenseAug d : {DefenseAug::None, DefenseAug::Cutout, DefenseAug::Mixup,
                       DefenseAug::CutMix})
    if (s == defense_name(d)) return d;
  throw ArgumentError("unknown defense augmentation '" + s + "'");
}

struct GnConfig {
  double sigma = 4.0 / 255.0;
  double prob = 0.5;
};

struct TrainConfig {
  Method method = Method::SL;
  int epochs = 30;
  int batch_size = 32;
  double base_lr = 0.5;       // effective lr = base_lr * batch_size / 256
  Schedule schedule = Schedule::Cosine;
  int warmup_epochs = 2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  loss::LossWeights weights{};       // alpha, beta, temperature
  adversary::PGDConfig at{};         // AT settings for the *_AT / VESPR paths
  SslMethod ssl_method = SslMethod::SimCLR;
  double ema = 0.999;
  GnConfig gn{};
  DefenseAug defense = DefenseAug::None;
  int cutout_hole = 0;               // 0 -> image side / 2
  double mix_alpha = 1.0;
  augment::PolicyKnobs knobs{};
  model::BuildSpec model{};
  std::uint64_t seed = 0;
  bool record_steps = false;
  bool curves = false;

  bool uses_ssl_branch() const {
    return method != Method::SL && method != Method::SL_AT;
  }
  bool uses_classifier() const {
    return method != Method::SSL && method != Method::SSL_AT;
  }
  bool uses_attack() const {
    return method == Method::SL_AT || method == Method::SSL_AT ||
           method == Method::VESPR || method == Method::VESPR_SSL ||
           method == Method::VESPR_BOTH;
  }

  void validate() const {
    if (epochs < 0) throw ArgumentError("TrainConfig: epochs must be >= 0");
    if (batch_size < 1)
      throw ArgumentError("TrainConfig: batch_size must be >= 1");
    if (base_lr <= 0) throw ArgumentError("TrainConfig: base_lr must be > 0");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
      throw ArgumentError("TrainConfig: bad warmup_epochs");
    if (momentum < 0 || momentum >= 1)
      throw ArgumentError("TrainConfig: momentum must be in [0,1)");
    if (weight_decay < 0)
      throw ArgumentError("TrainConfig: weight_decay must be >= 0");
    weights.validate();
    if (uses_attack()) at.validate();
    if (ema < 0 || ema > 1) throw ArgumentError("TrainConfig: bad ema");
    if (method == Method::SSL_SL_GN && gn.sigma < 0)
      throw ArgumentError("TrainConfig: bad gaussian-noise sigma");
    if (defense != DefenseAug::None && method != Method::SL &&
        method != Method::SL_AT)
      throw ArgumentError(
          "TrainConfig: augmentation defenses apply to SL methods only");
  }
};

struct StepRecord {
  double total = 0;
  double cl_term = 0;  // weighted contrastive contribution
  double ce_term = 0;  // weighted cross-entropy contribution
};

struct EpochRecord {
  double mean_loss = 0;
  double mean_cl = 0;
  double mean_ce = 0;
  double train_acc = std::nan("");
  double clean_test_acc = std::nan("");
  double psn_acc = std::nan("");
  double cln_acc = std::nan("");
  double psn_cln_sim = std::nan("");
  double lr = 0;
};

struct RunRecord {
  std::map<std::string, std::string> config;
  std::vector<EpochRecord> epochs;          // exactly config.epochs entries
  std::optional<EpochRecord> initial;       // untrained snapshot (curves)
  std::vector<StepRecord> steps;
  double wall_seconds = 0;
  std::uint64_t optimizer_steps = 0;
  std::uint64_t step_order_checks = 0;  // attacks verified against the
                                        // parameters they perturbed

  data::json to_json() const;
};

struct TrainResult {
  model::ModelBundle<float> bundle;
  RunRecord record;
};

struct EvalResult {
  double accuracy = 0;
  std::vector<double> per_class_accuracy;
  double mean_loss = 0;
};

// --- optimizer ---------------------------------------------------------

/// SGD with momentum and coupled weight decay: v <- mu v + (g + wd p);
/// p <- p - lr v. Velocities are keyed by parameter name.
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::map<std::string, std::vector<float>> velocity;

  void step(model::ParameterSet<float>& params,
            const model::GradientSet<float>& grads, double lr) {
    for (auto& p : params) {
      auto git = grads.by_name.find(p.name);
      if (git == grads.by_name.end()) continue;  // no gradient this step
      auto& v = velocity[p.name];
      if (v.size() != p.value->size()) v.assign(p.value->size(), 0.0f);
      const auto& g = git->second;
      for (std::size_t i = 0; i < v.size(); ++i) {
        double upd = double(g[i]) + weight_decay * double((*p.value)[i]);
        v[i] = static_cast<float>(momentum * double(v[i]) + upd);
        (*p.value)[i] = static_cast<float>(double((*p.value)[i]) - lr * v[i]);
      }
    }
  }
};

/// Per-epoch learning rate: linear warmup, then cosine decay to zero or
/// step decay x0.2 at 60/75/90% of the epochs.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double eff = cfg.base_lr * cfg.batch_size / 256.0;
  if (cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs)
    return eff * double(epoch + 1) / cfg.warmup_epochs;
  int rest = cfg.epochs - cfg.warmup_epochs;
  int t = epoch - cfg.warmup_epochs;
  if (cfg.schedule == Schedule::Cosine) {
    if (rest <= 1) return eff;
    return eff * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t /
                                       double(rest)));
  }
  double lr = eff;
  for (double frac : {0.60, 0.75, 0.90})
    if (epoch >= static_cast<int>(frac * cfg.epochs)) lr *= 0.2;
  return lr;
}

// --- small helpers -----------------------------------------------------

/// Plain argmax accuracy on raw pixels; ties resolve toward the lower
/// class index.
inline double accuracy(const model::ModelBundle<float>& b,
                       const Tensor<float>& pixels,
                       const std::vector<int>& labels) {
  if (pixels.dim(0) == 0) return 0.0;
  auto logits = model::forward(b, pixels, model::Heads::Logits()).logits;
  const int N = logits.dim(0), K = logits.dim(1);
  int correct = 0;
  for (int n = 0; n < N; ++n) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (logits.at2(n, k) > logits.at2(n, best)) best = k;
    if (best == labels[std::size_t(n)]) ++correct;
  }
  return double(correct) / N;
}

/// Mean cosine between aligned representation rows, guarded against
/// zero-norm rows (instrumentation context, not metric mode).
inline double mean_pair_cosine(const Tensor<float>& a, const Tensor<float>& b) {
  const int N = a.dim(0), D = a.dim(1);
  double acc = 0;
  for (int n = 0; n < N; ++n) {
    double na = 0, nb = 0, dot = 0;
    for (int d = 0; d < D; ++d) {
      na += double(a.at2(n, d)) * a.at2(n, d);
      nb += double(b.at2(n, d)) * b.at2(n, d);
      dot += double(a.at2(n, d)) * b.at2(n, d);
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    acc += denom > 1e-24 ? dot / denom : 0.0;
  }
  return N > 0 ? acc / N : 0.0;
}

namespace detail {

/// Contrastive term for one (branch1, branch2) pair under the selected SSL
/// wiring. Returns the unweighted loss; multiplies gradients by `weight`
/// and accumulates them into `gs` through both branches.
inline double ssl_term(model::ModelBundle<float>& bundle, SslMethod method,
                       const Tensor<float>& v1, const Tensor<float>& v2,
                       double temperature, double weight,
                       model::GradientSet<float>* gs,
                       model::ForwardOut<float>* reuse_f1 = nullptr) {
  using model::Heads;
  using model::forward;
  // branch 1 may be shared with the CE term (adversarial view)
  model::ForwardOut<float> local_f1;
  model::ForwardOut<float>& f1 = reuse_f1 ? *reuse_f1 : local_f1;
  if (!reuse_f1) f1 = forward(bundle, v1, Heads::Proj(), gs != nullptr);

  switch (method) {
    case SslMethod::SimCLR: {
      auto f2 = forward(bundle, v2, Heads::Proj(), gs != nullptr);
      auto cl = loss::info_nce_grad(f1.proj, f2.proj, temperature);
      if (gs) {
        for (auto& g : cl.d_a.v) g = static_cast<float>(g * weight);
        for (auto& g : cl.d_b.v) g = static_cast<float>(g * weight);
        model::backward_to_input(bundle, f1, nullptr, &cl.d_a, nullptr, gs);
        model::backward_to_input(bundle, f2, nullptr, &cl.d_b, nullptr, gs);
      }
      return cl.value;
    }
    case SslMethod::MoCo: {
      // momentum-branch keys, no queue at desk scale; symmetrized
      auto k2 = model::forward_momentum_proj(bundle, v2);
      auto f2 = forward(bundle, v2, Heads::Proj(), gs != nullptr);
      auto k1 = model::forward_momentum_proj(bundle, v1);
      auto cl_a = loss::info_nce_grad(f1.proj, k2, temperature);
      auto cl_b = loss::info_nce_grad(f2.proj, k1, temperature);
      if (gs) {
        for (auto& g : cl_a.d_a.v) g = static_cast<float>(g * 0.5 * weight);
        for (auto& g : cl_b.d_a.v) g = static_cast<float>(g * 0.5 * weight);
        model::backward_to_input(bundle, f1, nullptr, &cl_a.d_a, nullptr, gs);
        model::backward_to_input(bundle, f2, nullptr, &cl_b.d_a, nullptr, gs);
      }
      return 0.5 * (cl_a.value + cl_b.value);
    }
    case SslMethod::SimSiam:
    case SslMethod::BYOL: {
      auto f2 = forward(bundle, v2, Heads::Proj(), gs != nullptr);
      Tensor<float> t1, t2;  // stop-grad targets
      if (method == SslMethod::BYOL) {
        t1 = model::forward_momentum_proj(bundle, v1);
        t2 = model::forward_momentum_proj(bundle, v2);
      } else {
        t1 = f1.proj;
        t2 = f2.proj;
      }
      model::SeqTrace<float> p1_tr, p2_tr;
      auto p1 = model::forward_predictor(bundle, f1.proj,
                                         gs ? &p1_tr : nullptr);
      auto p2 = model::forward_predictor(bundle, f2.proj,
                                         gs ? &p2_tr : nullptr);
      auto c1 = loss::cosine_loss_grad(p1, t2);
      auto c2 = loss::cosine_loss_grad(p2, t1);
      if (gs) {
        for (auto& g : c1.d_pred.v) g = static_cast<float>(g * 0.5 * weight);
        for (auto& g : c2.d_pred.v) g = static_cast<float>(g * 0.5 * weight);
        auto d_z1 = bundle.predictor->backward(p1_tr, c1.d_pred, gs);
        auto d_z2 = bundle.predictor->backward(p2_tr, c2.d_pred, gs);
        model::backward_to_input(bundle, f1, nullptr, &d_z1, nullptr, gs);
        model::backward_to_input(bundle, f2, nullptr, &d_z2, nullptr, gs);
      }
      return 0.5 * (c1.value + c2.value);
    }
  }
  return 0.0;
}

inline augment::AugmentPolicy epoch_policy(const augment::AugmentPolicy& base,
                                           std::uint64_t seed, int epoch) {
  augment::AugmentPolicy p = base;
  p.seed = derive_seed(seed, "aug.e" + std::to_string(epoch));
  return p;
}

}  // namespace detail

/// Deterministic Test-policy evaluation: accuracy (ties toward the lower
/// class index), per-class accuracy, and mean CE loss.
inline EvalResult evaluate(const model::ModelBundle<float>& bundle,
                           const data::ImageBatch& test,
                           const augment::AugmentPolicy& policy) {
  if (bundle.classifier.empty())
    throw ArgumentError("evaluate: bundle has no classifier");
  auto views = augment::apply_policy(policy, test, 1);
  const data::ImageBatch& v = views[0];
  auto logits = model::forward(bundle, v.pixels, model::Heads::Logits()).logits;
  const int N = logits.dim(0), K = logits.dim(1);
  EvalResult r;
  r.per_class_accuracy.assign(std::size_t(test.num_classes), 0.0);
  std::vector<int> per_class_total(std::size_t(test.num_classes), 0);
  int correct = 0;
  for (int n = 0; n < N; ++n) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (logits.at2(n, k) > logits.at2(n, best)) best = k;
    int y = test.labels[std::size_t(n)];
    ++per_class_total[std::size_t(y)];
    if (best == y) {
      ++correct;
      r.per_class_accuracy[std::size_t(y)] += 1.0;
    }
  }
  for (int k = 0; k < test.num_classes; ++k)
    if (per_class_total[std::size_t(k)] > 0)
      r.per_class_accuracy[std::size_t(k)] /= per_class_total[std::size_t(k)];
  r.accuracy = N > 0 ? double(correct) / N : 0.0;
  r.mean_loss = N > 0 ? loss::cross_entropy(logits, test.labels) : 0.0;
  return r;
}

/// Data wiring for one run: the training batch, its aligned clean twin
/// (curves instrumentation), and a clean test set for per-epoch accuracy.
struct TrainData {
  const data::ImageBatch* train = nullptr;
  const data::ImageBatch* clean_pair = nullptr;
  const data::ImageBatch* test = nullptr;
};

inline TrainResult train(const TrainConfig& cfg_in, const TrainData& data) {
  using augment::AugmentPolicy;
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (!data.train || data.train->n() == 0)
    throw ArgumentError("train: data must be nonempty");
  const data::ImageBatch& ds = *data.train;
  ds.validate();

  // architecture flags follow the SSL wiring
  cfg.model.num_classes = ds.num_classes;
  cfg.model.in_c = ds.c();
  cfg.model.in_h = ds.h();
  cfg.model.in_w = ds.w();
  if (cfg.uses_ssl_branch()) {
    cfg.model.with_momentum = cfg.ssl_method == SslMethod::MoCo ||
                              cfg.ssl_method == SslMethod::BYOL;
    cfg.model.with_predictor = cfg.ssl_method == SslMethod::SimSiam ||
                               cfg.ssl_method == SslMethod::BYOL;
  }
  cfg.model.seed = derive_seed(cfg.seed, "train.init");
  auto bundle = model::build_bundle<float>(cfg.model);

  Sgd sgd;
  sgd.momentum = cfg.momentum;
  sgd.weight_decay = cfg.weight_decay;
  auto params = bundle.trainable_parameters();

  AugmentPolicy pretrain_base = augment::pretrain_policy(0, cfg.knobs);
  AugmentPolicy probe_base = augment::linprobe_policy(0, cfg.knobs);
  AugmentPolicy test_pol = augment::test_policy(ds.w());

  RunRecord record;
  record.config["train.method"] = method_name(cfg.method);
  auto clock_start = std::chrono::steady_clock::now();

  auto curve_snapshot = [&](EpochRecord& er) {
    if (!cfg.curves || !data.clean_pair) return;
    er.psn_acc = cfg.uses_classifier()
                     ? accuracy(bundle, ds.pixels, ds.labels)
                     : std::nan("");
    er.cln_acc = cfg.uses_classifier()
                     ? accuracy(bundle, data.clean_pair->pixels,
                                data.clean_pair->labels)
                     : std::nan("");
    auto rp = model::forward(bundle, ds.pixels, model::Heads::Rep()).rep;
    auto rc = model::forward(bundle, data.clean_pair->pixels,
                             model::Heads::Rep())
                  .rep;
    er.psn_cln_sim = mean_pair_cosine(rp, rc);
  };

  if (cfg.curves) {
    EpochRecord init;
    init.lr = 0;
    curve_snapshot(init);
    record.initial = init;
  }

  const bool contrastive_batches = cfg.uses_ssl_branch();
  long long step_index = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at_epoch(cfg, epoch);
    Rng shuffle_rng(derive_seed(cfg.seed, "train.shuffle.e" +
                                              std::to_string(epoch)));
    std::vector<int> order(std::size_t(ds.n()));
    for (int i = 0; i < ds.n(); ++i) order[std::size_t(i)] = i;
    shuffle_rng.shuffle(order.begin(), order.end());

    AugmentPolicy pre_pol =
        detail::epoch_policy(pretrain_base, cfg.seed, epoch);
    AugmentPolicy probe_pol =
        detail::epoch_policy(probe_base, cfg.seed, epoch);

    double ep_loss = 0, ep_cl = 0, ep_ce = 0;
    int ep_steps = 0;

    bundle.set_train_mode(true);
    for (int start = 0; start < ds.n(); start += cfg.batch_size) {
      int end = std::min(ds.n(), start + cfg.batch_size);
      std::vector<int> rows(order.begin() + start, order.begin() + end);
      if (contrastive_batches && static_cast<int>(rows.size()) < 2)
        continue;  // InfoNCE needs at least two samples
      data::ImageBatch batch = ds.select(rows);
      const std::string step_tag = "e" + std::to_string(epoch) + ".b" +
                                   std::to_string(start / cfg.batch_size);

      model::GradientSet<float> gs;
      StepRecord st;
      std::uint64_t version_at_attack = bundle.param_version;

      if (cfg.method == Method::SL || cfg.method == Method::SL_AT) {
        data::ImageBatch v = augment::apply_policy(probe_pol, batch, 1)[0];
        Tensor<float> x = v.pixels;
        std::vector<loss::MixPair> mix_pairs;
        bool mixed = false;
        if (cfg.defense == DefenseAug::Cutout) {
          Rng r(derive_seed(cfg.seed, "cutout." + step_tag));
          int hole = cfg.cutout_hole > 0 ? cfg.cutout_hole : ds.w() / 2;
          x = augment::cutout(v, hole, r).pixels;
        } else if (cfg.defense == DefenseAug::Mixup) {
          Rng r(derive_seed(cfg.seed, "mixup." + step_tag));
          auto m = augment::mixup(v, cfg.mix_alpha, r);
          x = std::move(m.pixels);
          mix_pairs = std::move(m.pairs);
          mixed = true;
        } else if (cfg.defense == DefenseAug::CutMix) {
          Rng r(derive_seed(cfg.seed, "cutmix." + step_tag));
          auto m = augment::cutmix(v, cfg.mix_alpha, r);
          x = std::move(m.pixels);
          mix_pairs = std::move(m.pairs);
          mixed = true;
        }
        if (cfg.method == Method::SL_AT) {
          adversary::PGDConfig at = cfg.at;
          at.guide = adversary::Guide::CE;
          at.seed = derive_seed(cfg.seed, "at." + step_tag);
          adversary::AttackTargets<float> tgt;
          tgt.labels = &batch.labels;
          version_at_attack = bundle.param_version;
          auto delta = adversary::pgd_attack(bundle, x, tgt, at);
          for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += delta.v[i];
        }
        auto f = model::forward(bundle, x, model::Heads::Logits(), true);
        loss::CeOut<float> ce =
            mixed ? loss::cross_entropy_mixed_grad(f.logits, mix_pairs)
                  : loss::cross_entropy_grad(f.logits, batch.labels);
        model::backward_to_input(bundle, f, nullptr, nullptr, &ce.d_logits,
                                 &gs);
        st.total = ce.value;
        st.ce_term = ce.value;
      } else {
        // two pretrain views
        auto views = augment::apply_policy(pre_pol, batch, 2);
        Tensor<float> v1 = std::move(views[0].pixels);
        Tensor<float> v2 = std::move(views[1].pixels);
        if (cfg.method == Method::SSL_SL_GN) {
          Rng r(derive_seed(cfg.seed, "gn." + step_tag));
          data::ImageBatch t1 = batch;
          t1.pixels = std::move(v1);
          v1 = augment::gaussian_noise(t1, cfg.gn.sigma, cfg.gn.prob, r)
                   .pixels;
          data::ImageBatch t2 = batch;
          t2.pixels = std::move(v2);
          v2 = augment::gaussian_noise(t2, cfg.gn.sigma, cfg.gn.prob, r)
                   .pixels;
        }

        // adversarial perturbation of view 1 where the method asks for it
        if (cfg.uses_attack()) {
          adversary::PGDConfig at = cfg.at;
          at.seed = derive_seed(cfg.seed, "at." + step_tag);
          adversary::AttackTargets<float> tgt;
          tgt.weights = cfg.weights;
          switch (cfg.method) {
            case Method::SSL_AT:
            case Method::VESPR_SSL:
              at.guide = adversary::Guide::Contrastive;
              tgt.sibling_views = &v2;
              break;
            case Method::VESPR_BOTH:
              at.guide = adversary::Guide::Combined;
              tgt.labels = &batch.labels;
              tgt.sibling_views = &v2;
              break;
            default:  // VESPR: CE-guided
              at.guide = adversary::Guide::CE;
              tgt.labels = &batch.labels;
              break;
          }
          version_at_attack = bundle.param_version;
          auto delta = adversary::pgd_attack(bundle, v1, tgt, at);
          for (std::size_t i = 0; i < v1.v.size(); ++i)
            v1.v[i] += delta.v[i];
        }

        const bool with_ce = cfg.uses_classifier();
        model::Heads h1;
        h1.proj = true;
        h1.logits = with_ce;
        auto f1 = model::forward(bundle, v1, h1, true);

        double cl_raw = 0.0;
        if (cfg.ssl_method == SslMethod::SimCLR && with_ce) {
          // Fig. 2 wiring: CE on the (possibly adversarial) branch, InfoNCE
          // between its projection and the sibling view's projection
          auto f2 = model::forward(bundle, v2, model::Heads::Proj(), true);
          auto v = loss::vespr_loss_grad(f1.proj, f2.proj, f1.logits,
                                         batch.labels, cfg.weights);
          model::backward_to_input(bundle, f1, nullptr, &v.d_proj_adv,
                                   &v.d_logits_adv, &gs);
          model::backward_to_input(bundle, f2, nullptr, &v.d_proj_pos,
                                   nullptr, &gs);
          st.total = v.value;
          st.cl_term = v.cl_contrib;
          st.ce_term = v.ce_contrib;
        } else {
          double weight = with_ce ? cfg.weights.alpha : 1.0;
          cl_raw = detail::ssl_term(bundle, cfg.ssl_method, v1, v2,
                                    cfg.weights.temperature, weight, &gs,
                                    &f1);
          st.cl_term = weight * cl_raw;
          st.total = st.cl_term;
          if (with_ce) {
            auto ce = loss::cross_entropy_grad(f1.logits, batch.labels);
            Tensor<float> d_logits(ce.d_logits.shape);
            for (std::size_t i = 0; i < d_logits.v.size(); ++i)
              d_logits.v[i] =
                  static_cast<float>(cfg.weights.beta * ce.d_logits.v[i]);
            model::backward_to_input(bundle, f1, nullptr, nullptr, &d_logits,
                                     &gs);
            st.ce_term = cfg.weights.beta * ce.value;
            st.total += st.ce_term;
          }
        }
      }

      if (!std::isfinite(st.total))
        throw TrainingError("training loss is not finite", step_index);

      // the attack must have used the parameters this step updates
      if (cfg.uses_attack()) {
        if (version_at_attack != bundle.param_version)
          throw StateError("attack/update interleaving violated");
        ++record.step_order_checks;
      }
      sgd.step(params, gs, lr);
      ++bundle.param_version;
      ++record.optimizer_steps;
      if (bundle.momentum) model::momentum_update(bundle, cfg.ema);

      if (cfg.record_steps) record.steps.push_back(st);
      ep_loss += st.total;
      ep_cl += st.cl_term;
      ep_ce += st.ce_term;
      ++ep_steps;
      ++step_index;
    }

    bundle.set_train_mode(false);
    EpochRecord er;
    er.lr = lr;
    if (ep_steps > 0) {
      er.mean_loss = ep_loss / ep_steps;
      er.mean_cl = ep_cl / ep_steps;
      er.mean_ce = ep_ce / ep_steps;
    }
    if (cfg.uses_classifier())
      er.train_acc = accuracy(bundle, ds.pixels, ds.labels);
    if (data.test && cfg.uses_classifier())
      er.clean_test_acc = evaluate(bundle, *data.test, test_pol).accuracy;
    curve_snapshot(er);
    record.epochs.push_back(er);
  }

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    clock_start)
          .count();
  return {std::move(bundle), std::move(record)};
}

inline TrainResult train(const TrainConfig& cfg, const data::ImageBatch& ds,
                         const data::ImageBatch* test = nullptr) {
  TrainData d;
  d.train = &ds;
  d.test = test;
  return train(cfg, d);
}

inline TrainResult train(const TrainConfig& cfg,
                         const data::PoisonedDataset& ds,
                         const data::ImageBatch* test = nullptr) {
  TrainData d;
  d.train = &ds.poisoned;
  d.clean_pair = &ds.clean;
  d.test = test;
  return train(cfg, d);
}

/// Fig. 1-style instrumentation: per-epoch accuracy on the poisoned
/// inputs, on their clean counterparts, and the mean cosine between the
/// two representation sets, plus an untrained (epoch 0) snapshot.
inline TrainResult psn_cln_curves(const TrainConfig& cfg_in,
                                  const data::PoisonedDataset& ds,
                                  const data::ImageBatch* test = nullptr) {
  TrainConfig cfg = cfg_in;
  cfg.curves = true;
  return train(cfg, ds, test);
}

struct ProbeConfig {
  int epochs = 20;
  int batch_size = 32;
  double base_lr = 1.0;  // Table-8 scaling: effective = base * batch / 256
  double momentum = 0.9;
  double weight_decay = 0.0;
  augment::PolicyKnobs knobs{};
  std::uint64_t seed = 0;
};

/// Train only a fresh single affine classifier on the frozen encoder's
/// outputs (step decay x0.2 at 60/75/90%). The encoder and projector are
/// verified untouched by hashing before and after.
inline TrainResult linear_probe(const model::ModelBundle<float>& frozen,
                                const data::ImageBatch& ds,
                                const ProbeConfig& pc,
                                const data::ImageBatch* test = nullptr) {
  if (ds.n() == 0) throw ArgumentError("linear_probe: empty data");
  model::ModelBundle<float> bundle = frozen;
  // fresh affine head
  Rng head_rng(derive_seed(pc.seed, "probe.init"));
  model::Sequential<float> head;
  head.add(std::make_unique<model::Linear<float>>(
      "cls.head", bundle.spec.rep_dim, ds.num_classes, head_rng));
  bundle.classifier = std::move(head);
  bundle.spec.num_classes = ds.num_classes;

  model::ParameterSet<float> frozen_params;
  bundle.encoder.params(frozen_params);
  bundle.projector.params(frozen_params);
  const std::uint64_t hash_before = model::parameter_hash(frozen_params);

  model::ParameterSet<float> cls_params;
  bundle.classifier.params(cls_params);

  Sgd sgd;
  sgd.momentum = pc.momentum;
  sgd.weight_decay = pc.weight_decay;

  TrainConfig sched;
  sched.epochs = pc.epochs;
  sched.batch_size = pc.batch_size;
  sched.base_lr = pc.base_lr;
  sched.schedule = Schedule::Step;
  sched.warmup_epochs = 0;

  augment::AugmentPolicy probe_base = augment::linprobe_policy(0, pc.knobs);
  augment::AugmentPolicy test_pol = augment::test_policy(ds.w());

  RunRecord record;
  record.config["probe.epochs"] = std::to_string(pc.epochs);
  auto clock_start = std::chrono::steady_clock::now();
  long long step_index = 0;

  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    double lr = lr_at_epoch(sched, epoch);
    Rng shuffle_rng(derive_seed(pc.seed, "probe.shuffle.e" +
                                             std::to_string(epoch)));
    std::vector<int> order(std::size_t(ds.n()));
    for (int i = 0; i < ds.n(); ++i) order[std::size_t(i)] = i;
    shuffle_rng.shuffle(order.begin(), order.end());
    auto pol = detail::epoch_policy(probe_base, pc.seed, epoch);

    double ep_loss = 0;
    int ep_steps = 0;
    for (int start = 0; start < ds.n(); start += pc.batch_size) {
      int end = std::min(ds.n(), start + pc.batch_size);
      std::vector<int> rows(order.begin() + start, order.begin() + end);
      data::ImageBatch batch = ds.select(rows);
      data::ImageBatch v = augment::apply_policy(pol, batch, 1)[0];

      // encoder runs without gradient bookkeeping; only the head trains
      auto rep = model::forward(bundle, v.pixels, model::Heads::Rep()).rep;
      model::SeqTrace<float> cls_tr;
      auto logits = bundle.classifier.forward(rep, &cls_tr);
      auto ce = loss::cross_entropy_grad(logits, batch.labels);
      if (!std::isfinite(ce.value))
        throw TrainingError("probe loss is not finite", step_index);
      model::GradientSet<float> gs;
      bundle.classifier.backward(cls_tr, ce.d_logits, &gs);
      sgd.step(cls_params, gs, lr);
      ++bundle.param_version;
      ++record.optimizer_steps;
      ep_loss += ce.value;
      ++ep_steps;
      ++step_index;
    }
    EpochRecord er;
    er.lr = lr;
    er.mean_loss = ep_steps ? ep_loss / ep_steps : 0.0;
    er.mean_ce = er.mean_loss;
    er.train_acc = accuracy(bundle, ds.pixels, ds.labels);
    if (test) er.clean_test_acc = evaluate(bundle, *test, test_pol).accuracy;
    record.epochs.push_back(er);
  }

  model::ParameterSet<float> frozen_after;
  bundle.encoder.params(frozen_after);
  bundle.projector.params(frozen_after);
  if (model::parameter_hash(frozen_after) != hash_before)
    throw StateError("linear_probe: frozen encoder was modified");

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    clock_start)
          .count();
  return {std::move(bundle), std::move(record)};
}

// --- record serialization ----------------------------------------------

inline data::json RunRecord::to_json() const {
  data::json ep = data::json::array();
  auto epoch_json = [](const EpochRecord& e) {
    auto num = [](double v) {
      return std::isfinite(v) ? data::json(v) : data::json(nullptr);
    };
    return data::json{{"mean_loss", num(e.mean_loss)},
                      {"mean_cl", num(e.mean_cl)},
                      {"mean_ce", num(e.mean_ce)},
                      {"train_acc", num(e.train_acc)},
                      {"clean_test_acc", num(e.clean_test_acc)},
                      {"psn_acc", num(e.psn_acc)},
                      {"cln_acc", num(e.cln_acc)},
                      {"psn_cln_sim", num(e.psn_cln_sim)},
                      {"lr", num(e.lr)}};
  };
  for (const auto& e : epochs) ep.push_back(epoch_json(e));
  data::json steps_json = data::json::array();
  for (const auto& s : steps)
    steps_json.push_back({{"total", s.total},
                          {"cl_term", s.cl_term},
                          {"ce_term", s.ce_term}});
  data::json j{{"config", config},
               {"epochs", ep},
               {"steps", steps_json},
               {"wall_seconds", wall_seconds},
               {"optimizer_steps", optimizer_steps},
               {"step_order_checks", step_order_checks},
               {"artifact_version", kArtifactVersion}};
  if (initial) j["initial"] = epoch_json(*initial);
  return j;
}

inline void save_run_record(const std::string& path, const RunRecord& r) {
  data::detail::atomic_write(path, r.to_json().dump(2) + "\n");
}

}  // namespace poisonforge::trainer
