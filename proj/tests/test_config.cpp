#include <catch2/catch.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "poisonforge/config.hpp"

using namespace poisonforge;
using namespace poisonforge::config;
namespace fs = std::filesystem;

TEST_CASE("defaults cover the whole schema", "[config]") {
  RunConfig cfg = RunConfig::defaults();
  for (const auto& [key, spec] : schema()) {
    CHECK_NOTHROW(cfg.get_str(key));
  }
  CHECK(cfg.get_int("train.epochs") == 30);
  CHECK(cfg.get_float("at.epsilon") == Approx(4.0 / 255.0).epsilon(1e-3));
}

TEST_CASE("unknown keys are rejected naming key and module", "[config]") {
  RunConfig cfg = RunConfig::defaults();
  try {
    cfg.set("at.stepz", "5");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("at.stepz") != std::string::npos);
    CHECK(msg.find("adversary") != std::string::npos);
  }
}

TEST_CASE("type and enum validation", "[config]") {
  RunConfig cfg = RunConfig::defaults();
  CHECK_THROWS_AS(cfg.set("train.epochs", "many"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.base_lr", "fast"), ConfigError);
  CHECK_THROWS_AS(cfg.set("at.random_start", "yes"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.method", "svm"), ConfigError);
  CHECK_NOTHROW(cfg.set("train.method", "vespr_both"));
  CHECK(cfg.get_str("train.method") == "vespr_both");
}

TEST_CASE("config files parse with comments", "[config]") {
  auto dir = fs::temp_directory_path() / ("pf_cfg_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto path = (dir / "run.cfg").string();
  {
    std::ofstream f(path);
    f << "# a comment\n";
    f << "train.epochs = 7\n";
    f << "at.guide = contrastive  # trailing comment\n";
    f << "\n";
  }
  RunConfig cfg = RunConfig::defaults();
  cfg.apply_file(path);
  CHECK(cfg.get_int("train.epochs") == 7);
  CHECK(cfg.get_str("at.guide") == "contrastive");
  CHECK(cfg.was_set("train.epochs"));
  CHECK_FALSE(cfg.was_set("train.base_lr"));

  {
    std::ofstream f(path);
    f << "not an assignment\n";
  }
  RunConfig cfg2 = RunConfig::defaults();
  CHECK_THROWS_AS(cfg2.apply_file(path), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("environment overrides map onto config keys", "[config]") {
  std::vector<std::string> storage = {
      "POISONFORGE_TRAIN_EPOCHS=9",
      "POISONFORGE_AT_EPSILON=0.02",
      "PATH=/usr/bin",
  };
  std::vector<char*> envp;
  for (auto& s : storage) envp.push_back(s.data());
  envp.push_back(nullptr);

  RunConfig cfg = RunConfig::defaults();
  cfg.apply_env(envp.data());
  CHECK(cfg.get_int("train.epochs") == 9);
  CHECK(cfg.get_float("at.epsilon") == Approx(0.02));

  std::string bad = "POISONFORGE_AT_STEPZ=5";
  std::vector<char*> envp2 = {bad.data(), nullptr};
  RunConfig cfg2 = RunConfig::defaults();
  CHECK_THROWS_AS(cfg2.apply_env(envp2.data()), ConfigError);
}

TEST_CASE("config hash keys resumption", "[config]") {
  RunConfig a = RunConfig::defaults();
  RunConfig b = RunConfig::defaults();
  CHECK(a.hash("x") == b.hash("x"));
  CHECK(a.hash("x") != a.hash("y"));
  b.set("train.epochs", "9");
  CHECK(a.hash("x") != b.hash("x"));
}

TEST_CASE("module seeds derive from the top-level seed", "[config]") {
  RunConfig cfg = RunConfig::defaults();
  cfg.set("seed", "42");
  auto craft = module_seed(cfg, "craft");
  auto train = module_seed(cfg, "train");
  CHECK(craft != train);
  CHECK(craft == derive_seed(42, "craft"));
}

TEST_CASE("builders produce valid module configs", "[config]") {
  RunConfig cfg = RunConfig::defaults();
  cfg.set("seed", "5");
  CHECK_NOTHROW(to_train_config(cfg).validate());
  CHECK_NOTHROW(to_pgd_config(cfg).validate());
  CHECK_NOTHROW(to_generator_config(cfg).resolved_budget());
  auto train = make_toy_train(cfg);
  auto test = make_toy_test(cfg);
  CHECK(train.n() == cfg.get_int("dataset.num_classes") *
                         cfg.get_int("dataset.per_class"));
  CHECK(test.n() == cfg.get_int("dataset.num_classes") *
                        cfg.get_int("dataset.test_per_class"));
  // distinct streams and distinct id namespaces
  CHECK(train.ids[0] != test.ids[0]);
}
