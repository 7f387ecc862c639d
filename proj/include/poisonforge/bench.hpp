#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "poisonforge/analysis.hpp"
#include "poisonforge/config.hpp"
#include "poisonforge/container_io.hpp"
#include "poisonforge/poisoncraft.hpp"
#include "poisonforge/trainer.hpp"

namespace poisonforge::bench {

/// A bench method token: a trainer method, optionally dressed as one of
/// the augmentation-based defenses (cutout/mixup/cutmix/ISS over SL).
struct MethodToken {
  std::string name;
  trainer::Method method = trainer::Method::SL;
  trainer::DefenseAug defense = trainer::DefenseAug::None;
  std::optional<augment::IssMode> iss;
  bool probe_eval = false;  // evaluate via linear probe (SSL-style)
};

inline MethodToken parse_method_token(const std::string& s) {
  MethodToken t;
  t.name = s;
  if (s == "cutout" || s == "mixup" || s == "cutmix") {
    t.method = trainer::Method::SL;
    t.defense = trainer::defense_from_name(s);
    return t;
  }
  if (s == "iss_gray" || s == "iss_jpeg") {
    t.method = trainer::Method::SL;
    t.iss = s == "iss_gray" ? augment::IssMode::Grayscale
                            : augment::IssMode::JPEG;
    return t;
  }
  t.method = trainer::method_from_name(s);
  t.probe_eval = t.method == trainer::Method::SSL ||
                 t.method == trainer::Method::SSL_AT;
  return t;
}

/// Desk-scale analogue of the per-method training-settings table: epochs,
/// base lr, weight decay, warmup. Explicitly-set train.* keys win.
struct MethodSchedule {
  int epochs;
  double base_lr;
  double weight_decay;
  int warmup;
};

inline MethodSchedule method_schedule(trainer::Method m) {
  switch (m) {
    case trainer::Method::SL:
    case trainer::Method::SL_AT:
      return {60, 0.5, 1e-3, 0};
    case trainer::Method::SSL:
    case trainer::Method::SSL_AT:
      return {40, 0.5, 1e-4, 2};
    default:  // SSL_SL family and VESPR variants
      return {60, 0.5, 1e-3, 2};
  }
}

inline trainer::TrainConfig cell_train_config(const config::RunConfig& cfg,
                                              const MethodToken& tok,
                                              const std::string& generator) {
  trainer::TrainConfig t = config::to_train_config(cfg);
  t.method = tok.method;
  t.defense = tok.defense;
  MethodSchedule ms = method_schedule(tok.method);
  if (!cfg.was_set("train.epochs")) t.epochs = ms.epochs;
  if (!cfg.was_set("train.base_lr")) t.base_lr = ms.base_lr;
  if (!cfg.was_set("train.weight_decay")) t.weight_decay = ms.weight_decay;
  if (!cfg.was_set("train.warmup_epochs"))
    t.warmup_epochs = std::min(ms.warmup, t.epochs);
  t.seed = derive_seed(config::module_seed(cfg, "train"),
                       generator + ":" + tok.name);
  return t;
}

struct Cell {
  std::string generator;  // "clean" or a generator name
  std::string method;
  int seed_index = 0;
  double accuracy = std::nan("");
  std::string status = "pending";  // ok | failed | skipped(resume)
  std::string reason;
};

struct BenchTable {
  std::vector<std::string> generators;  // row order, without "clean"
  bool has_clean = false;
  std::vector<std::string> methods;
  int seeds = 1;
  std::vector<Cell> cells;

  double mean_accuracy(const std::string& gen,
                       const std::string& method) const {
    double sum = 0;
    int n = 0;
    for (const auto& c : cells)
      if (c.generator == gen && c.method == method) {
        if (!std::isfinite(c.accuracy)) return std::nan("");
        sum += c.accuracy;
        ++n;
      }
    return n ? sum / n : std::nan("");
  }

  double psn_min(const std::string& method) const {
    double m = 2.0;
    for (const auto& g : generators) {
      double v = mean_accuracy(g, method);
      if (!std::isfinite(v)) return std::nan("");
      m = std::min(m, v);
    }
    return generators.empty() ? std::nan("") : m;
  }

  double psn_avg(const std::string& method) const {
    double s = 0;
    for (const auto& g : generators) {
      double v = mean_accuracy(g, method);
      if (!std::isfinite(v)) return std::nan("");
      s += v;
    }
    return generators.empty() ? std::nan("") : s / generators.size();
  }

  std::string to_csv() const {
    std::string out = "poison";
    for (const auto& m : methods) out += "," + m;
    out += "\n";
    auto fmt = [](double v) {
      if (!std::isfinite(v)) return std::string("nan");
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.4f", v);
      return std::string(buf);
    };
    if (has_clean) {
      out += "clean";
      for (const auto& m : methods) out += "," + fmt(mean_accuracy("clean", m));
      out += "\n";
    }
    for (const auto& g : generators) {
      out += g;
      for (const auto& m : methods) out += "," + fmt(mean_accuracy(g, m));
      out += "\n";
    }
    out += "psn_min";
    for (const auto& m : methods) out += "," + fmt(psn_min(m));
    out += "\npsn_avg";
    for (const auto& m : methods) out += "," + fmt(psn_avg(m));
    out += "\n";
    return out;
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!config::detail::trim(cur).empty())
        out.push_back(config::detail::trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!config::detail::trim(cur).empty())
    out.push_back(config::detail::trim(cur));
  return out;
}

inline std::string cell_file(const std::string& out_dir, const Cell& c) {
  return out_dir + "/cells/" + c.generator + "_" + c.method + "_s" +
         std::to_string(c.seed_index) + ".json";
}

}  // namespace detail

/// Full {generators} x {methods} x seeds sweep at toy scale. Poisons are
/// crafted once per (generator, seed) and cached; completed cells are
/// skipped on rerun when their config hash matches; failures land in the
/// table as NaN with a reason. Cell files and the CSV are written
/// atomically.
inline BenchTable run_bench(const config::RunConfig& base_cfg,
                            const std::string& out_dir, int jobs = 1,
                            bool quiet = false) {
  namespace fs = std::filesystem;
  if (jobs < 1) jobs = 1;
  fs::create_directories(fs::path(out_dir) / "cells");
  fs::create_directories(fs::path(out_dir) / "poisons");

  BenchTable table;
  table.has_clean = base_cfg.get_bool("bench.include_clean");
  table.seeds = base_cfg.get_int("bench.seeds");
  if (table.seeds < 1) throw ConfigError("bench.seeds must be >= 1");

  std::vector<MethodToken> tokens;
  for (const auto& m : detail::split_csv(base_cfg.get_str("bench.methods"))) {
    tokens.push_back(parse_method_token(m));
    table.methods.push_back(m);
  }
  if (tokens.empty()) throw ConfigError("bench.methods is empty");
  for (const auto& g :
       detail::split_csv(base_cfg.get_str("bench.generators"))) {
    if (g == "clean") {
      table.has_clean = true;
      continue;
    }
    (void)poisoncraft::generator_from_name(g);
    table.generators.push_back(g);
  }

  // per-seed configs (seed shifts by seed index)
  std::vector<config::RunConfig> cfgs;
  for (int i = 0; i < table.seeds; ++i) {
    config::RunConfig c = base_cfg;
    c.set("seed", std::to_string(base_cfg.get_u64("seed") + i));
    cfgs.push_back(std::move(c));
  }

  std::mutex log_mu;
  auto log = [&](const std::string& line) {
    if (quiet) return;
    std::lock_guard<std::mutex> lock(log_mu);
    std::fprintf(stderr, "%s\n", line.c_str());
    std::fflush(stderr);
  };

  // phase 1: toy data + poisons per (generator, seed), cached on disk
  struct SeedData {
    data::ImageBatch train, test;
    std::map<std::string, data::PoisonedDataset> poisons;
  };
  std::vector<SeedData> seed_data(std::size_t(table.seeds));
  {
    struct CraftJob {
      int seed_index;
      std::string generator;
    };
    std::vector<CraftJob> craft_jobs;
    for (int i = 0; i < table.seeds; ++i) {
      seed_data[std::size_t(i)].train = config::make_toy_train(cfgs[std::size_t(i)]);
      seed_data[std::size_t(i)].test = config::make_toy_test(cfgs[std::size_t(i)]);
      for (const auto& g : table.generators) craft_jobs.push_back({i, g});
    }
    std::mutex poison_mu;
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      for (;;) {
        std::size_t j = next.fetch_add(1);
        if (j >= craft_jobs.size()) return;
        const CraftJob& job = craft_jobs[j];
        const config::RunConfig& cfg = cfgs[std::size_t(job.seed_index)];
        std::string hash_tag =
            "poison:" + job.generator + ":s" + std::to_string(job.seed_index);
        std::string hash = std::to_string(cfg.hash(hash_tag));
        std::string path = out_dir + "/poisons/" + job.generator + "_s" +
                           std::to_string(job.seed_index) + ".pfc";
        data::PoisonedDataset ds;
        bool loaded = false;
        if (fs::exists(path)) {
          try {
            ds = data::load_poisoned_dataset(path);
            data::Container c = data::load_container(path);
            if (c.header["config"].value("bench.cell_hash", "") == hash)
              loaded = true;
          } catch (const std::exception&) {
            loaded = false;
          }
        }
        if (!loaded) {
          poisoncraft::GeneratorConfig gc = config::to_generator_config(cfg);
          gc.generator = poisoncraft::generator_from_name(job.generator);
          gc.seed = derive_seed(config::module_seed(cfg, "craft"),
                                job.generator);
          ds = poisoncraft::craft(seed_data[std::size_t(job.seed_index)].train,
                                  gc);
          auto snap = cfg.snapshot();
          snap["bench.cell_hash"] = hash;
          data::save_dataset(path, ds, snap);
          log("crafted " + job.generator + " (seed " +
              std::to_string(job.seed_index) + ")");
        } else {
          log("poison cache hit: " + job.generator + " (seed " +
              std::to_string(job.seed_index) + ")");
        }
        std::lock_guard<std::mutex> lock(poison_mu);
        seed_data[std::size_t(job.seed_index)].poisons[job.generator] =
            std::move(ds);
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // phase 2: cells
  for (int i = 0; i < table.seeds; ++i) {
    if (table.has_clean)
      for (const auto& tok : tokens)
        table.cells.push_back({"clean", tok.name, i});
    for (const auto& g : table.generators)
      for (const auto& tok : tokens) table.cells.push_back({g, tok.name, i});
  }

  std::atomic<std::size_t> next_cell{0};
  auto cell_worker = [&]() {
    for (;;) {
      std::size_t j = next_cell.fetch_add(1);
      if (j >= table.cells.size()) return;
      Cell& cell = table.cells[j];
      const config::RunConfig& cfg = cfgs[std::size_t(cell.seed_index)];
      const SeedData& sd = seed_data[std::size_t(cell.seed_index)];
      std::string hash_tag =
          "cell:" + cell.generator + ":" + cell.method + ":s" +
          std::to_string(cell.seed_index);
      std::string hash = std::to_string(cfg.hash(hash_tag));
      std::string path = detail::cell_file(out_dir, cell);

      if (fs::exists(path)) {
        try {
          std::ifstream f(path);
          data::json prev = data::json::parse(f);
          if (prev.value("config_hash", "") == hash) {
            cell.accuracy = prev.value("accuracy", std::nan(""));
            if (prev.contains("accuracy") && prev["accuracy"].is_null())
              cell.accuracy = std::nan("");
            cell.status = "skipped";
            cell.reason = prev.value("reason", "");
            log("cell cache hit: " + cell.generator + "/" + cell.method +
                " s" + std::to_string(cell.seed_index));
            continue;
          }
        } catch (const std::exception&) {
          // fall through and recompute
        }
      }

      MethodToken tok = parse_method_token(cell.method);
      try {
        data::ImageBatch train_data =
            cell.generator == "clean" ? sd.train
                                      : sd.poisons.at(cell.generator).poisoned;
        if (tok.iss)
          train_data = augment::iss_transform(
              train_data, *tok.iss, cfg.get_int("train.iss_jpeg_quality"));

        trainer::TrainConfig tc =
            cell_train_config(cfg, tok, cell.generator);
        auto run = trainer::train(tc, train_data, nullptr);
        model::ModelBundle<float> final_bundle = std::move(run.bundle);
        if (tok.probe_eval) {
          trainer::ProbeConfig pc = config::to_probe_config(cfg);
          pc.seed = derive_seed(pc.seed, hash_tag);
          auto probe = trainer::linear_probe(final_bundle, train_data, pc);
          final_bundle = std::move(probe.bundle);
        }
        cell.accuracy =
            trainer::evaluate(final_bundle, sd.test,
                              augment::test_policy(sd.test.w()))
                .accuracy;
        cell.status = "ok";
        if (cfg.get_bool("bench.save_models")) {
          std::string ckpt = out_dir + "/cells/" + cell.generator + "_" +
                             cell.method + "_s" +
                             std::to_string(cell.seed_index) + ".ckpt.pfc";
          model::save_checkpoint(ckpt, final_bundle, cfg.snapshot());
        }
      } catch (const std::exception& e) {
        cell.accuracy = std::nan("");
        cell.status = "failed";
        cell.reason = e.what();
      }

      data::json out{{"generator", cell.generator},
                     {"method", cell.method},
                     {"seed_index", cell.seed_index},
                     {"status", cell.status},
                     {"reason", cell.reason},
                     {"config_hash", hash},
                     {"artifact_version", kArtifactVersion},
                     {"config", cfg.snapshot()}};
      out["accuracy"] = std::isfinite(cell.accuracy)
                            ? data::json(cell.accuracy)
                            : data::json(nullptr);
      data::detail::atomic_write(path, out.dump(2) + "\n");
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.4f", cell.accuracy);
      log("cell " + cell.generator + "/" + cell.method + " s" +
          std::to_string(cell.seed_index) + ": " +
          (cell.status == "ok" ? std::string(buf) : cell.status));
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(cell_worker);
  for (auto& t : pool) t.join();

  std::string csv = std::string("# ") + kArtifactVersion + "\n# config_hash " +
                    std::to_string(base_cfg.hash("bench")) + "\n" +
                    table.to_csv();
  data::detail::atomic_write(out_dir + "/bench.csv", csv);
  return table;
}

}  // namespace poisonforge::bench
