#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "poisonforge/adversary.hpp"
#include "poisonforge/analysis.hpp"
#include "poisonforge/augment.hpp"
#include "poisonforge/iss.hpp"
#include "poisonforge/poisoncraft.hpp"
#include "poisonforge/toy_data.hpp"
#include "poisonforge/trainer.hpp"

namespace poisonforge::config {

/// One schema entry: value type, default, allowed enum values, owning
/// module (named in validation errors).
struct KeySpec {
  enum class Type { Int, Float, Bool, Str, Enum };
  Type type = Type::Str;
  std::string def;
  std::vector<std::string> allowed;  // Enum only
  std::string module;
};

inline const std::map<std::string, KeySpec>& schema() {
  using T = KeySpec::Type;
  static const std::map<std::string, KeySpec> s = {
      {"seed", {T::Int, "0", {}, "cli"}},

      {"dataset.num_classes", {T::Int, "4", {}, "core-data"}},
      {"dataset.per_class", {T::Int, "40", {}, "core-data"}},
      {"dataset.test_per_class", {T::Int, "25", {}, "core-data"}},
      {"dataset.image_size", {T::Int, "12", {}, "core-data"}},
      {"dataset.noise_sigma", {T::Float, "0.08", {}, "core-data"}},
      {"dataset.jitter", {T::Int, "2", {}, "core-data"}},
      {"dataset.distractors", {T::Int, "2", {}, "core-data"}},
      {"dataset.contrast", {T::Float, "0.65", {}, "core-data"}},
      {"dataset.name", {T::Str, "toy", {}, "core-data"}},

      {"model.arch", {T::Enum, "tinyconv", {"tinyconv", "mlp"}, "model"}},
      {"model.dim", {T::Int, "32", {}, "model"}},
      {"model.proj_dim", {T::Int, "16", {}, "model"}},
      {"model.proj_layers", {T::Int, "3", {}, "model"}},
      {"model.conv_width", {T::Int, "16", {}, "model"}},
      {"model.mlp_hidden", {T::Int, "0", {}, "model"}},

      {"train.method",
       {T::Enum, "sl",
        {"sl", "sl_at", "ssl", "ssl_at", "ssl_sl", "ssl_sl_gn", "vespr",
         "vespr_ssl", "vespr_both"},
        "trainer"}},
      {"train.epochs", {T::Int, "30", {}, "trainer"}},
      {"train.batch_size", {T::Int, "32", {}, "trainer"}},
      {"train.base_lr", {T::Float, "0.5", {}, "trainer"}},
      {"train.lr_schedule", {T::Enum, "cosine", {"cosine", "step"}, "trainer"}},
      {"train.warmup_epochs", {T::Int, "2", {}, "trainer"}},
      {"train.momentum", {T::Float, "0.9", {}, "trainer"}},
      {"train.weight_decay", {T::Float, "0.0001", {}, "trainer"}},
      {"train.alpha", {T::Float, "0.5", {}, "trainer"}},
      {"train.beta", {T::Float, "0.5", {}, "trainer"}},
      {"train.temperature", {T::Float, "0.2", {}, "trainer"}},
      {"train.ssl_method",
       {T::Enum, "simclr", {"simclr", "moco", "simsiam", "byol"}, "trainer"}},
      {"train.ema", {T::Float, "0.999", {}, "trainer"}},
      {"train.gn_sigma", {T::Float, "0.015686", {}, "trainer"}},
      {"train.gn_prob", {T::Float, "0.5", {}, "trainer"}},
      {"train.defense",
       {T::Enum, "none", {"none", "cutout", "mixup", "cutmix"}, "trainer"}},
      {"train.cutout_hole", {T::Int, "0", {}, "trainer"}},
      {"train.mix_alpha", {T::Float, "1.0", {}, "trainer"}},
      {"train.iss", {T::Enum, "none", {"none", "grayscale", "jpeg"}, "augment"}},
      {"train.iss_jpeg_quality", {T::Int, "10", {}, "augment"}},
      {"train.record_steps", {T::Bool, "false", {}, "trainer"}},
      {"train.curves", {T::Bool, "false", {}, "trainer"}},

      {"probe.epochs", {T::Int, "20", {}, "trainer"}},
      {"probe.batch_size", {T::Int, "32", {}, "trainer"}},
      {"probe.base_lr", {T::Float, "2.0", {}, "trainer"}},
      {"probe.momentum", {T::Float, "0.9", {}, "trainer"}},
      {"probe.weight_decay", {T::Float, "0.0", {}, "trainer"}},

      {"at.epsilon", {T::Float, "0.015686", {}, "adversary"}},
      {"at.step_size", {T::Float, "0.002353", {}, "adversary"}},
      {"at.steps", {T::Int, "10", {}, "adversary"}},
      {"at.random_start", {T::Bool, "true", {}, "adversary"}},
      {"at.restarts", {T::Int, "0", {}, "adversary"}},
      {"at.guide",
       {T::Enum, "ce", {"ce", "contrastive", "combined"}, "adversary"}},

      {"aug.crop_min", {T::Float, "0.8", {}, "augment"}},
      {"aug.probe_crop_min", {T::Float, "1.0", {}, "augment"}},
      {"aug.jitter_prob", {T::Float, "0.8", {}, "augment"}},
      {"aug.jitter_strength", {T::Float, "0.2", {}, "augment"}},
      {"aug.gray_prob", {T::Float, "0.1", {}, "augment"}},
      {"aug.blur_prob", {T::Float, "0.2", {}, "augment"}},
      {"aug.blur_sigma_min", {T::Float, "0.1", {}, "augment"}},
      {"aug.blur_sigma_max", {T::Float, "2.0", {}, "augment"}},
      {"aug.flip_prob", {T::Float, "0.5", {}, "augment"}},

      {"craft.generator",
       {T::Enum, "ue", {"ap", "ue", "rue", "cp", "lsp", "ops", "cuda"},
        "poisoncraft"}},
      {"craft.epsilon", {T::Float, "-1", {}, "poisoncraft"}},  // -1: family default
      {"craft.surrogate_steps", {T::Int, "20", {}, "poisoncraft"}},
      {"craft.delta_steps", {T::Int, "10", {}, "poisoncraft"}},
      {"craft.stop_acc", {T::Float, "0.99", {}, "poisoncraft"}},
      {"craft.max_rounds", {T::Int, "30", {}, "poisoncraft"}},
      {"craft.surrogate_lr", {T::Float, "0.02", {}, "poisoncraft"}},
      {"craft.batch_size", {T::Int, "32", {}, "poisoncraft"}},
      {"craft.surrogate_dim", {T::Int, "32", {}, "poisoncraft"}},
      {"craft.surrogate_conv_width", {T::Int, "16", {}, "poisoncraft"}},
      {"craft.surrogate_proj_dim", {T::Int, "16", {}, "poisoncraft"}},
      {"craft.ap_train_epochs", {T::Int, "100", {}, "poisoncraft"}},
      {"craft.ap_min_train_acc", {T::Float, "0.9", {}, "poisoncraft"}},
      {"craft.ap_pgd_steps", {T::Int, "40", {}, "poisoncraft"}},
      {"craft.ap_targeted", {T::Bool, "true", {}, "poisoncraft"}},
      {"craft.rue_inner_radius", {T::Float, "0.007843", {}, "poisoncraft"}},
      {"craft.rue_inner_steps", {T::Int, "3", {}, "poisoncraft"}},
      {"craft.cp_temperature", {T::Float, "0.2", {}, "poisoncraft"}},
      {"craft.cp_stop_loss", {T::Float, "0.1", {}, "poisoncraft"}},
      {"craft.lsp_block", {T::Int, "0", {}, "poisoncraft"}},
      {"craft.cuda_kernel", {T::Int, "3", {}, "poisoncraft"}},
      {"craft.cuda_noise", {T::Float, "0.5", {}, "poisoncraft"}},

      {"analysis.lip_radius", {T::Float, "0.031373", {}, "analysis"}},
      {"analysis.lip_steps", {T::Int, "10", {}, "analysis"}},
      {"analysis.knn_k", {T::Int, "20", {}, "analysis"}},
      {"analysis.knn_pool", {T::Int, "0", {}, "analysis"}},

      {"bench.generators",
       {T::Str, "ap,ue,rue,cp,lsp,ops,cuda", {}, "cli"}},
      {"bench.methods", {T::Str, "sl,ssl,vespr", {}, "cli"}},
      {"bench.seeds", {T::Int, "1", {}, "cli"}},
      {"bench.include_clean", {T::Bool, "true", {}, "cli"}},
      {"bench.save_models", {T::Bool, "false", {}, "cli"}},
  };
  return s;
}

namespace detail {

inline std::string infer_module(const std::string& key) {
  auto dot = key.find('.');
  std::string prefix = dot == std::string::npos ? key : key.substr(0, dot);
  static const std::map<std::string, std::string> modules = {
      {"dataset", "core-data"}, {"model", "model"},
      {"train", "trainer"},     {"probe", "trainer"},
      {"at", "adversary"},      {"aug", "augment"},
      {"craft", "poisoncraft"}, {"analysis", "analysis"},
      {"bench", "cli"},         {"seed", "cli"}};
  auto it = modules.find(prefix);
  return it == modules.end() ? "unknown" : it->second;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace detail

/// Flat-namespaced run configuration with strict schema validation. Every
/// run embeds its resolved snapshot in its outputs; unknown keys and bad
/// values are rejected naming the key and module.
class RunConfig {
 public:
  static RunConfig defaults() {
    RunConfig c;
    for (const auto& [key, spec] : schema()) c.values_[key] = spec.def;
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = schema().find(key);
    if (it == schema().end())
      throw ConfigError("unknown config key '" + key + "' (module " +
                        detail::infer_module(key) + ")");
    const KeySpec& spec = it->second;
    std::string v = detail::trim(value);
    switch (spec.type) {
      case KeySpec::Type::Int: {
        try {
          std::size_t pos = 0;
          (void)std::stoll(v, &pos);
          if (pos != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
          throw ConfigError("config key '" + key + "' (module " + spec.module +
                            "): expected integer, got '" + v + "'");
        }
        break;
      }
      case KeySpec::Type::Float: {
        try {
          std::size_t pos = 0;
          (void)std::stod(v, &pos);
          if (pos != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
          throw ConfigError("config key '" + key + "' (module " + spec.module +
                            "): expected number, got '" + v + "'");
        }
        break;
      }
      case KeySpec::Type::Bool:
        if (v != "true" && v != "false")
          throw ConfigError("config key '" + key + "' (module " + spec.module +
                            "): expected true/false, got '" + v + "'");
        break;
      case KeySpec::Type::Enum: {
        bool ok = false;
        for (const auto& a : spec.allowed) ok = ok || a == v;
        if (!ok) {
          std::string allowed;
          for (const auto& a : spec.allowed)
            allowed += (allowed.empty() ? "" : "|") + a;
          throw ConfigError("config key '" + key + "' (module " + spec.module +
                            "): '" + v + "' is not one of " + allowed);
        }
        break;
      }
      case KeySpec::Type::Str:
        break;
    }
    values_[key] = v;
    explicit_.insert(key);
  }

  /// `key = value` lines; '#' starts a comment.
  void apply_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config file '" + path + "' line " +
                          std::to_string(lineno) + ": expected key = value");
      set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
  }

  /// POISONFORGE_<KEY> variables map onto config keys ('.' -> '_',
  /// uppercased). Unknown POISONFORGE_ variables are rejected.
  void apply_env(char** envp) {
    if (!envp) return;
    const std::string prefix = "POISONFORGE_";
    std::map<std::string, std::string> by_env_name;
    for (const auto& [key, spec] : schema()) {
      std::string env = key;
      for (auto& ch : env) {
        if (ch == '.') ch = '_';
        ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      }
      by_env_name[prefix + env] = key;
    }
    for (char** e = envp; *e; ++e) {
      std::string kv(*e);
      if (kv.rfind(prefix, 0) != 0) continue;
      auto eq = kv.find('=');
      std::string name = kv.substr(0, eq);
      auto it = by_env_name.find(name);
      if (it == by_env_name.end())
        throw ConfigError("environment variable '" + name +
                          "' does not match any config key");
      set(it->second, eq == std::string::npos ? "" : kv.substr(eq + 1));
    }
  }

  /// "key=value" as given on the command line.
  void apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + assignment + "': expected key=value");
    set(detail::trim(assignment.substr(0, eq)),
        detail::trim(assignment.substr(eq + 1)));
  }

  bool was_set(const std::string& key) const { return explicit_.count(key); }

  int get_int(const std::string& key) const {
    return static_cast<int>(std::stoll(raw(key)));
  }
  std::uint64_t get_u64(const std::string& key) const {
    return static_cast<std::uint64_t>(std::stoll(raw(key)));
  }
  double get_float(const std::string& key) const { return std::stod(raw(key)); }
  bool get_bool(const std::string& key) const { return raw(key) == "true"; }
  const std::string& get_str(const std::string& key) const { return raw(key); }

  std::map<std::string, std::string> snapshot() const { return values_; }

  /// FNV-1a over the sorted resolved config plus an extra tag; keys bench
  /// resumption and artifact identity.
  std::uint64_t hash(const std::string& extra = "") const {
    std::uint64_t h = fnv1a(kArtifactVersion);
    for (const auto& [k, v] : values_) {
      h = fnv1a(k, h);
      h = fnv1a("=", h);
      h = fnv1a(v, h);
    }
    return fnv1a(extra, h);
  }

 private:
  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end())
      throw ConfigError("unknown config key '" + key + "' (module " +
                        detail::infer_module(key) + ")");
    return it->second;
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

// --- module config builders ---------------------------------------------

inline data::ToyRecipe to_toy_recipe(const RunConfig& c) {
  data::ToyRecipe r;
  r.noise_sigma = c.get_float("dataset.noise_sigma");
  r.position_jitter = c.get_int("dataset.jitter");
  r.distractors = c.get_int("dataset.distractors");
  r.rect_contrast = c.get_float("dataset.contrast");
  r.name = c.get_str("dataset.name");
  return r;
}

/// Module seeds derive from the single top-level seed via the documented
/// (seed, module name) hash.
inline std::uint64_t module_seed(const RunConfig& c, std::string_view module) {
  return derive_seed(c.get_u64("seed"), module);
}

inline data::ImageBatch make_toy_train(const RunConfig& c) {
  return data::make_toy_dataset(
      c.get_int("dataset.num_classes"), c.get_int("dataset.per_class"),
      c.get_int("dataset.image_size"), module_seed(c, "dataset.train"),
      to_toy_recipe(c));
}

inline data::ImageBatch make_toy_test(const RunConfig& c) {
  data::ToyRecipe r = to_toy_recipe(c);
  r.name = r.name + "-test";
  return data::make_toy_dataset(
      c.get_int("dataset.num_classes"), c.get_int("dataset.test_per_class"),
      c.get_int("dataset.image_size"), module_seed(c, "dataset.test"), r);
}

inline augment::PolicyKnobs to_policy_knobs(const RunConfig& c) {
  augment::PolicyKnobs k;
  k.crop_min = c.get_float("aug.crop_min");
  k.probe_crop_min = c.get_float("aug.probe_crop_min");
  k.jitter_prob = c.get_float("aug.jitter_prob");
  k.jitter_strength = c.get_float("aug.jitter_strength");
  k.gray_prob = c.get_float("aug.gray_prob");
  k.blur_prob = c.get_float("aug.blur_prob");
  k.blur_sigma_min = c.get_float("aug.blur_sigma_min");
  k.blur_sigma_max = c.get_float("aug.blur_sigma_max");
  k.flip_prob = c.get_float("aug.flip_prob");
  return k;
}

inline adversary::PGDConfig to_pgd_config(const RunConfig& c) {
  adversary::PGDConfig p;
  p.epsilon = c.get_float("at.epsilon");
  p.step_size = c.get_float("at.step_size");
  p.steps = c.get_int("at.steps");
  p.random_start = c.get_bool("at.random_start");
  p.restarts = c.get_int("at.restarts");
  p.guide = adversary::guide_from_name(c.get_str("at.guide"));
  return p;
}

inline model::BuildSpec to_build_spec(const RunConfig& c) {
  model::BuildSpec s;
  s.arch = model::arch_from_name(c.get_str("model.arch"));
  s.rep_dim = c.get_int("model.dim");
  s.proj_dim = c.get_int("model.proj_dim");
  s.proj_layers = c.get_int("model.proj_layers");
  s.conv_width = c.get_int("model.conv_width");
  s.mlp_hidden = c.get_int("model.mlp_hidden");
  return s;
}

inline trainer::TrainConfig to_train_config(const RunConfig& c) {
  trainer::TrainConfig t;
  t.method = trainer::method_from_name(c.get_str("train.method"));
  t.epochs = c.get_int("train.epochs");
  t.batch_size = c.get_int("train.batch_size");
  t.base_lr = c.get_float("train.base_lr");
  t.schedule = trainer::schedule_from_name(c.get_str("train.lr_schedule"));
  t.warmup_epochs = std::min(c.get_int("train.warmup_epochs"), t.epochs);
  t.momentum = c.get_float("train.momentum");
  t.weight_decay = c.get_float("train.weight_decay");
  t.weights.alpha = c.get_float("train.alpha");
  t.weights.beta = c.get_float("train.beta");
  t.weights.temperature = c.get_float("train.temperature");
  t.at = to_pgd_config(c);
  t.ssl_method = trainer::ssl_method_from_name(c.get_str("train.ssl_method"));
  t.ema = c.get_float("train.ema");
  t.gn.sigma = c.get_float("train.gn_sigma");
  t.gn.prob = c.get_float("train.gn_prob");
  t.defense = trainer::defense_from_name(c.get_str("train.defense"));
  t.cutout_hole = c.get_int("train.cutout_hole");
  t.mix_alpha = c.get_float("train.mix_alpha");
  t.knobs = to_policy_knobs(c);
  t.model = to_build_spec(c);
  t.record_steps = c.get_bool("train.record_steps");
  t.curves = c.get_bool("train.curves");
  t.seed = module_seed(c, "train");
  return t;
}

inline trainer::ProbeConfig to_probe_config(const RunConfig& c) {
  trainer::ProbeConfig p;
  p.epochs = c.get_int("probe.epochs");
  p.batch_size = c.get_int("probe.batch_size");
  p.base_lr = c.get_float("probe.base_lr");
  p.momentum = c.get_float("probe.momentum");
  p.weight_decay = c.get_float("probe.weight_decay");
  p.knobs = to_policy_knobs(c);
  p.seed = module_seed(c, "probe");
  return p;
}

inline poisoncraft::GeneratorConfig to_generator_config(const RunConfig& c) {
  poisoncraft::GeneratorConfig g;
  g.generator = poisoncraft::generator_from_name(c.get_str("craft.generator"));
  double eps = c.get_float("craft.epsilon");
  if (eps >= 0.0) {
    data::PerturbationBudget b;
    switch (g.generator) {
      case poisoncraft::Generator::OPS: b.norm = data::Norm::L0; break;
      case poisoncraft::Generator::CUDA:
        b.norm = data::Norm::Unbounded;
        break;
      default: b.norm = data::Norm::Linf; break;
    }
    b.epsilon = eps;
    g.budget = b;
  }
  g.surrogate = to_build_spec(c);
  g.surrogate.rep_dim = c.get_int("craft.surrogate_dim");
  g.surrogate.conv_width = c.get_int("craft.surrogate_conv_width");
  g.surrogate.proj_dim = c.get_int("craft.surrogate_proj_dim");
  g.surrogate_steps = c.get_int("craft.surrogate_steps");
  g.delta_steps = c.get_int("craft.delta_steps");
  g.stop_acc = c.get_float("craft.stop_acc");
  g.max_rounds = c.get_int("craft.max_rounds");
  g.surrogate_lr = c.get_float("craft.surrogate_lr");
  g.batch_size = c.get_int("craft.batch_size");
  g.ap_train_epochs = c.get_int("craft.ap_train_epochs");
  g.ap_min_train_acc = c.get_float("craft.ap_min_train_acc");
  g.ap_pgd_steps = c.get_int("craft.ap_pgd_steps");
  g.ap_targeted = c.get_bool("craft.ap_targeted");
  g.rue_inner_radius = c.get_float("craft.rue_inner_radius");
  g.rue_inner_steps = c.get_int("craft.rue_inner_steps");
  g.cp_temperature = c.get_float("craft.cp_temperature");
  g.cp_stop_loss = c.get_float("craft.cp_stop_loss");
  g.cp_knobs = to_policy_knobs(c);
  g.lsp_block = c.get_int("craft.lsp_block");
  g.cuda_kernel = c.get_int("craft.cuda_kernel");
  g.cuda_noise = c.get_float("craft.cuda_noise");
  g.seed = module_seed(c, "craft");
  return g;
}

inline analysis::AnalysisOptions to_analysis_options(const RunConfig& c) {
  analysis::AnalysisOptions o;
  o.lip_radius = c.get_float("analysis.lip_radius");
  o.lip_steps = c.get_int("analysis.lip_steps");
  o.seed = module_seed(c, "analysis");
  return o;
}

}  // namespace poisonforge::config
