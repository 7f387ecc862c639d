// poisonforge: craft availability poisons, train defenses, analyze
// representations, and run toy-scale benchmarks.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poisonforge/bench.hpp"
#include "poisonforge/config.hpp"
#include "poisonforge/version.hpp"

extern char** environ;

namespace {

using namespace poisonforge;
namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "config file (key = value)");
  cmd->add_option("--set", args.overrides, "config override key=value")
      ->take_all();
  cmd->add_option("--seed", args.seed, "top-level seed; all module seeds "
                                       "derive from it");
}

/// defaults < file < environment < --set/--seed
config::RunConfig resolve(const CommonArgs& args) {
  config::RunConfig cfg = config::RunConfig::defaults();
  if (!args.config_file.empty()) cfg.apply_file(args.config_file);
  cfg.apply_env(environ);
  for (const auto& o : args.overrides) cfg.apply_override(o);
  if (!args.seed.empty()) cfg.set("seed", args.seed);
  return cfg;
}

data::ImageBatch load_train_input(const std::string& path, bool toy,
                                  const config::RunConfig& cfg,
                                  data::PoisonedDataset* poisoned_out) {
  if (toy) return config::make_toy_train(cfg);
  if (path.empty())
    throw ArgumentError("either --in/--data or --toy is required");
  data::Container c = data::load_container(path);
  std::string kind = c.header.value("kind", "");
  if (kind == "image_batch") return data::load_image_batch(path);
  if (kind == "poisoned_dataset") {
    data::PoisonedDataset ds = data::load_poisoned_dataset(path);
    if (poisoned_out) *poisoned_out = ds;
    return ds.poisoned;
  }
  throw FormatError("container kind '" + kind + "' is not trainable data");
}

int cmd_craft(const CommonArgs& common, const std::string& generator,
              const std::string& in, bool toy, const std::string& out) {
  config::RunConfig cfg = resolve(common);
  if (!generator.empty()) cfg.set("craft.generator", generator);
  data::ImageBatch clean = load_train_input(in, toy, cfg, nullptr);
  poisoncraft::GeneratorConfig gc = config::to_generator_config(cfg);
  data::PoisonedDataset ds = poisoncraft::craft(clean, gc);
  data::save_dataset(out, ds, cfg.snapshot());
  auto report = poisoncraft::verify_budget(ds);
  std::printf("crafted %s -> %s (n=%d, max %s distance %.6f%s)\n",
              ds.generator_tag.c_str(), out.c_str(), ds.poisoned.n(),
              data::norm_name(ds.budget.norm), report.max_distance,
              report.passed ? (*report.passed ? ", budget ok" : ", BUDGET "
                                                                "VIOLATED")
                            : "");
  return report.passed && !*report.passed ? 1 : 0;
}

int cmd_train(const CommonArgs& common, const std::string& method,
              const std::string& data_path, bool toy,
              const std::string& test_path, const std::string& out_dir,
              bool curves) {
  config::RunConfig cfg = resolve(common);
  if (!method.empty()) cfg.set("train.method", method);
  if (curves) cfg.set("train.curves", "true");

  data::PoisonedDataset poisoned;
  poisoned.generator_tag = "";
  data::ImageBatch train_data = load_train_input(data_path, toy, cfg,
                                                 &poisoned);
  std::string iss = cfg.get_str("train.iss");
  if (iss != "none")
    train_data = augment::iss_transform(
        train_data, augment::iss_mode_from_name(iss),
        cfg.get_int("train.iss_jpeg_quality"));

  data::ImageBatch test;
  bool have_test = false;
  if (!test_path.empty()) {
    test = data::load_image_batch(test_path);
    have_test = true;
  } else if (toy) {
    test = config::make_toy_test(cfg);
    have_test = true;
  }

  trainer::TrainConfig tc = config::to_train_config(cfg);
  trainer::TrainData td;
  td.train = &train_data;
  if (tc.curves && !poisoned.generator_tag.empty())
    td.clean_pair = &poisoned.clean;
  if (have_test) td.test = &test;

  auto result = trainer::train(tc, td);
  result.record.config = cfg.snapshot();

  fs::create_directories(out_dir);
  std::string ckpt = (fs::path(out_dir) / "checkpoint.pfc").string();
  model::save_checkpoint(ckpt, result.bundle, cfg.snapshot());
  trainer::save_run_record((fs::path(out_dir) / "record.json").string(),
                           result.record);
  double final_test = std::nan("");
  if (have_test && !result.bundle.classifier.empty())
    final_test = trainer::evaluate(result.bundle, test,
                                   augment::test_policy(test.w()))
                     .accuracy;
  std::printf("trained %s for %d epochs -> %s (clean test %.4f)\n",
              trainer::method_name(tc.method), tc.epochs, out_dir.c_str(),
              final_test);
  return 0;
}

int cmd_analyze(const CommonArgs& common, const std::string& model_path,
                const std::string& data_path, const std::string& out,
                const std::string& export_reps) {
  config::RunConfig cfg = resolve(common);
  model::ModelBundle<float> bundle = model::load_checkpoint(model_path);
  data::PoisonedDataset ds = data::load_poisoned_dataset(data_path);
  analysis::AnalysisOptions opt = config::to_analysis_options(cfg);
  analysis::AnalysisReport rep = analysis::analysis_report(bundle, ds, opt);

  data::json j = rep.to_json();
  j["artifact_version"] = kArtifactVersion;
  j["config"] = cfg.snapshot();
  j["generator_tag"] = ds.generator_tag;
  j["sample_policy"] = "full poisoned train set";
  data::detail::atomic_write(out, j.dump(2) + "\n");

  if (!export_reps.empty()) {
    analysis::RepresentationMatrix r =
        analysis::representations(bundle, ds.poisoned);
    analysis::export_embeddings(export_reps, r, cfg.snapshot());
  }
  std::printf(
      "analysis -> %s (in_cls_sim %.4f, psn_cln_sim %.4f, e_rank %.4f, "
      "local_lip %.4f)\n",
      out.c_str(), rep.in_cls_sim_psn, rep.psn_cln_sim, rep.e_rank_psn,
      rep.local_lip_psn);
  return 0;
}

int cmd_bench(const CommonArgs& common, const std::string& out_dir,
              int jobs) {
  config::RunConfig cfg = resolve(common);
  bench::BenchTable table = bench::run_bench(cfg, out_dir, jobs);
  std::string csv = table.to_csv();
  std::fputs(csv.c_str(), stdout);
  std::printf("bench table -> %s/bench.csv\n", out_dir.c_str());
  for (const auto& c : table.cells)
    if (c.status == "failed")
      std::fprintf(stderr, "cell %s/%s s%d failed: %s\n",
                   c.generator.c_str(), c.method.c_str(), c.seed_index,
                   c.reason.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poisonforge: availability-poisoning attack and defense "
               "workbench"};
  app.set_version_flag("--version", std::string(poisonforge::kArtifactVersion));
  app.require_subcommand(1);

  CommonArgs craft_args, train_args, analyze_args, bench_args;
  std::string craft_generator, craft_in, craft_out;
  bool craft_toy = false;
  auto* craft = app.add_subcommand("craft", "craft a poisoned dataset");
  add_common(craft, craft_args);
  craft->add_option("--generator", craft_generator,
                    "ap|ue|rue|cp|lsp|ops|cuda");
  craft->add_option("--in", craft_in, "clean dataset container");
  craft->add_flag("--toy", craft_toy, "synthesize the toy clean set");
  craft->add_option("--out", craft_out, "output container")->required();

  std::string train_method, train_data, train_test, train_out;
  bool train_toy = false, train_curves = false;
  auto* train = app.add_subcommand("train", "train a defense method");
  add_common(train, train_args);
  train->add_option("--method", train_method, "training method");
  train->add_option("--data", train_data, "training data container");
  train->add_flag("--toy", train_toy, "train on the synthetic toy set");
  train->add_option("--test", train_test, "clean test container");
  train->add_option("--out", train_out, "output directory")->required();
  train->add_flag("--curves", train_curves,
                  "record poison/clean accuracy and similarity curves");

  std::string an_model, an_data, an_out, an_export;
  auto* analyze = app.add_subcommand("analyze",
                                     "representation metrics for a model");
  add_common(analyze, analyze_args);
  analyze->add_option("--model", an_model, "checkpoint container")->required();
  analyze->add_option("--data", an_data, "poisoned dataset container")
      ->required();
  analyze->add_option("--out", an_out, "report json path")->required();
  analyze->add_option("--export-reps", an_export,
                      "also export poisoned-set embeddings");

  std::string bench_out;
  int bench_jobs = 1;
  auto* benchcmd = app.add_subcommand("bench",
                                      "generators x methods accuracy table");
  add_common(benchcmd, bench_args);
  benchcmd->add_option("--out", bench_out, "output directory")->required();
  benchcmd->add_option("--jobs", bench_jobs, "concurrent cells");

  CLI11_PARSE(app, argc, argv);

  try {
    if (craft->parsed())
      return cmd_craft(craft_args, craft_generator, craft_in, craft_toy,
                       craft_out);
    if (train->parsed())
      return cmd_train(train_args, train_method, train_data, train_toy,
                       train_test, train_out, train_curves);
    if (analyze->parsed())
      return cmd_analyze(analyze_args, an_model, an_data, an_out, an_export);
    if (benchcmd->parsed()) return cmd_bench(bench_args, bench_out, bench_jobs);
  } catch (const poisonforge::ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
