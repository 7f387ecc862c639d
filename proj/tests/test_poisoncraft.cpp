#include <catch2/catch.hpp>

#include "poisonforge/poisoncraft.hpp"
#include "poisonforge/toy_data.hpp"

#include "oracle.hpp"

using namespace poisonforge;
using namespace poisonforge::poisoncraft;
using data::ImageBatch;
using data::make_toy_dataset;

namespace {

ImageBatch small_clean(std::uint64_t seed = 3) {
  return make_toy_dataset(4, 8, 12, seed);
}

GeneratorConfig quick_cfg(Generator g, std::uint64_t seed = 11) {
  GeneratorConfig cfg;
  cfg.generator = g;
  cfg.seed = seed;
  cfg.max_rounds = 8;
  cfg.surrogate_steps = 10;
  cfg.delta_steps = 5;
  cfg.ap_train_epochs = 400;
  cfg.ap_pgd_steps = 10;
  return cfg;
}

}  // namespace

TEST_CASE("every generator preserves labels, ids, and its budget",
          "[poisoncraft]") {
  auto clean = small_clean();
  for (Generator g : {Generator::AP, Generator::UE, Generator::RUE,
                      Generator::CP, Generator::LSP, Generator::OPS,
                      Generator::CUDA}) {
    INFO(generator_name(g));
    auto ds = craft(clean, quick_cfg(g));
    CHECK(ds.poisoned.labels == clean.labels);
    CHECK(ds.poisoned.ids == clean.ids);
    CHECK(ds.generator_tag == generator_name(g));
    REQUIRE_NOTHROW(ds.validate());
    auto report = verify_budget(ds);
    if (ds.budget.norm == data::Norm::Unbounded) {
      CHECK(!report.passed.has_value());
      CHECK(report.max_distance >= 0.0);
    } else {
      REQUIRE(report.passed.has_value());
      CHECK(*report.passed);
    }
  }
}

TEST_CASE("generators are deterministic given the seed", "[poisoncraft]") {
  auto clean = small_clean();
  for (Generator g : {Generator::UE, Generator::LSP, Generator::OPS,
                      Generator::CUDA}) {
    INFO(generator_name(g));
    auto a = craft(clean, quick_cfg(g, 21));
    auto b = craft(clean, quick_cfg(g, 21));
    CHECK(a.poisoned.pixels.v == b.poisoned.pixels.v);
    if (g != Generator::OPS) {  // ops is a deterministic function of the data
      auto c = craft(clean, quick_cfg(g, 22));
      CHECK(a.poisoned.pixels.v != c.poisoned.pixels.v);
    }
  }
}

TEST_CASE("ap", "[poisoncraft]") {
  auto clean = small_clean();

  SECTION("zero budget returns the clean images") {
    auto cfg = quick_cfg(Generator::AP);
    cfg.budget = data::PerturbationBudget{data::Norm::Linf, 0.0};
    auto ds = craft_ap(clean, cfg);
    CHECK(ds.poisoned.pixels.v == clean.pixels.v);
  }
  SECTION("default budget holds samplewise") {
    auto ds = craft_ap(clean, quick_cfg(Generator::AP));
    for (int i = 0; i < clean.n(); ++i)
      CHECK(data::sample_distance(ds.clean, ds.poisoned, i,
                                  data::Norm::Linf) <=
            8.0 / 255.0 + 1e-6);
  }
  SECTION("an impossible quality bar raises a generator error") {
    auto cfg = quick_cfg(Generator::AP);
    cfg.ap_train_epochs = 0;  // surrogate never trains
    CHECK_THROWS_AS(craft_ap(clean, cfg), GeneratorQualityError);
  }
}

TEST_CASE("ue stop contract", "[poisoncraft]") {
  auto clean = small_clean(7);
  auto cfg = quick_cfg(Generator::UE, 5);
  cfg.max_rounds = 20;
  auto ds = craft_ue(clean, cfg);
  if (ds.generator_config.at("converged") == "true") {
    double acc = std::stod(ds.generator_config.at("surrogate_final_acc"));
    CHECK(acc >= cfg.stop_acc);
  } else {
    CHECK(ds.generator_config.count("warning") == 1);
  }
}

TEST_CASE("cp zero budget is the identity", "[poisoncraft]") {
  auto clean = small_clean(9);
  auto cfg = quick_cfg(Generator::CP, 3);
  cfg.budget = data::PerturbationBudget{data::Norm::Linf, 0.0};
  cfg.max_rounds = 2;
  auto ds = craft_cp(clean, cfg);
  CHECK(ds.poisoned.pixels.v == clean.pixels.v);
}

TEST_CASE("lsp", "[poisoncraft]") {
  auto clean = small_clean(13);
  auto ds = craft_lsp(clean, quick_cfg(Generator::LSP, 17));

  SECTION("class-wise pattern is identical where unclipped") {
    // find two samples of class 0
    int a = -1, b = -1;
    for (int i = 0; i < clean.n(); ++i)
      if (clean.labels[std::size_t(i)] == 0) {
        if (a < 0) a = i;
        else if (b < 0) b = i;
      }
    REQUIRE(a >= 0);
    REQUIRE(b >= 0);
    const std::size_t stride = std::size_t(clean.c()) * clean.h() * clean.w();
    for (std::size_t k = 0; k < stride; ++k) {
      float pa = ds.poisoned.pixels.v[std::size_t(a) * stride + k];
      float ca = ds.clean.pixels.v[std::size_t(a) * stride + k];
      float pb = ds.poisoned.pixels.v[std::size_t(b) * stride + k];
      float cb = ds.clean.pixels.v[std::size_t(b) * stride + k];
      bool a_clipped = pa == 0.0f || pa == 1.0f;
      bool b_clipped = pb == 0.0f || pb == 1.0f;
      if (!a_clipped && !b_clipped)
        CHECK(pa - ca == Approx(pb - cb).margin(1e-6));
    }
  }

  SECTION("budget is exactly 16/255 at the pattern level") {
    CHECK(ds.budget.epsilon == Approx(16.0 / 255.0));
    auto pats = data::json::parse(ds.generator_config.at("patterns"));
    double mx = 0;
    for (const auto& pat : pats)
      for (double v : pat) mx = std::max(mx, std::fabs(v));
    CHECK(mx == Approx(16.0 / 255.0));
  }

  SECTION("the patterns alone are linearly separable") {
    auto pats = data::json::parse(ds.generator_config.at("patterns"));
    const int K = static_cast<int>(pats.size());
    const int dim = static_cast<int>(pats[0].size());
    Tensor<float> px({K, 1, 1, dim});
    std::vector<int> labels;
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < dim; ++j)
        px.v[std::size_t(k) * dim + j] = float(double(pats[k][j]));
      labels.push_back(k);
    }
    double acc = oracle::linear_probe_accuracy(px, labels, K, 100, 1.0);
    CHECK(acc == 1.0);
  }
}

TEST_CASE("ops", "[poisoncraft]") {
  auto clean = small_clean(19);
  auto ds = craft_ops(clean, quick_cfg(Generator::OPS, 23));

  SECTION("exactly one pixel differs per sample") {
    for (int i = 0; i < clean.n(); ++i)
      CHECK(data::sample_distance(ds.clean, ds.poisoned, i, data::Norm::L0) ==
            1.0);
  }

  SECTION("all images of a class share coordinate and color") {
    auto px = data::json::parse(ds.generator_config.at("pixels"));
    REQUIRE(px.size() == std::size_t(clean.num_classes));
    for (int i = 0; i < clean.n(); ++i) {
      int k = clean.labels[std::size_t(i)];
      int row = px[std::size_t(k)]["row"];
      int col = px[std::size_t(k)]["col"];
      for (int c = 0; c < clean.c(); ++c)
        CHECK(ds.poisoned.pixels.at4(i, c, row, col) ==
              Approx(double(px[std::size_t(k)]["color"][std::size_t(c)])));
    }
  }

  SECTION("coordinates are distinct across classes") {
    auto px = data::json::parse(ds.generator_config.at("pixels"));
    std::set<std::pair<int, int>> seen;
    for (const auto& p : px)
      seen.insert({int(p["row"]), int(p["col"])});
    CHECK(seen.size() == px.size());
  }
}

TEST_CASE("cuda", "[poisoncraft]") {
  auto clean = small_clean(29);

  SECTION("identity kernels give the clean images back") {
    auto cfg = quick_cfg(Generator::CUDA, 31);
    cfg.cuda_noise = 0.0;
    auto ds = craft_cuda(clean, cfg);
    for (std::size_t i = 0; i < clean.pixels.v.size(); ++i)
      CHECK(ds.poisoned.pixels.v[i] == Approx(clean.pixels.v[i]).margin(1e-6));
  }

  SECTION("one kernel per class, recorded in provenance") {
    auto ds = craft_cuda(clean, quick_cfg(Generator::CUDA, 31));
    auto kj = data::json::parse(ds.generator_config.at("kernels"));
    REQUIRE(kj.size() == std::size_t(clean.num_classes));
    // kernels are unit-sum
    for (const auto& kn : kj) {
      double sum = 0;
      for (double v : kn) sum += v;
      CHECK(sum == Approx(1.0).margin(1e-9));
    }
    // re-applying the stored class-0 kernel to a class-0 clean image
    // reproduces the poisoned image
    int i0 = 0;
    while (clean.labels[std::size_t(i0)] != 0) ++i0;
    const auto& kn = kj[0];
    const int k = 3, r = 1, H = clean.h(), W = clean.w();
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            int yy = std::clamp(y + dy, 0, H - 1);
            int xx = std::clamp(x + dx, 0, W - 1);
            acc += double(kn[std::size_t(dy + r) * k + (dx + r)]) *
                   clean.pixels.at4(i0, 0, yy, xx);
          }
        CHECK(ds.poisoned.pixels.at4(i0, 0, y, x) ==
              Approx(std::clamp(acc, 0.0, 1.0)).margin(1e-5));
      }
  }

  SECTION("unbounded budget skips pass/fail") {
    auto ds = craft_cuda(clean, quick_cfg(Generator::CUDA, 31));
    auto report = verify_budget(ds);
    CHECK(!report.passed.has_value());
    CHECK(report.max_distance > 0.0);
  }
}

TEST_CASE("verify budget", "[poisoncraft]") {
  auto clean = small_clean(37);
  data::PoisonedDataset ds;
  ds.clean = clean;
  ds.poisoned = clean;
  ds.budget = {data::Norm::Linf, 8.0 / 255.0};
  ds.generator_tag = "manual";

  SECTION("identical datasets pass with zero distances") {
    auto r = verify_budget(ds);
    REQUIRE(r.passed.has_value());
    CHECK(*r.passed);
    CHECK(r.max_distance == 0.0);
  }

  SECTION("a hand-built violation fails and names the sample") {
    ds.poisoned.pixels.v[5] =
        std::min(1.0f, ds.clean.pixels.v[5] + 9.0f / 255.0f);
    auto r = verify_budget(ds);
    REQUIRE(r.passed.has_value());
    CHECK_FALSE(*r.passed);
    REQUIRE(r.failing_ids.size() == 1);
    CHECK(r.failing_ids[0] == clean.ids[0]);
  }
}

TEST_CASE("budget family mismatches are rejected", "[poisoncraft]") {
  auto cfg = quick_cfg(Generator::UE);
  cfg.budget = data::PerturbationBudget{data::Norm::L0, 1.0};
  CHECK_THROWS_AS(cfg.resolved_budget(), ArgumentError);
  auto cfg2 = quick_cfg(Generator::OPS);
  cfg2.budget = data::PerturbationBudget{data::Norm::Linf, 8.0 / 255.0};
  CHECK_THROWS_AS(cfg2.resolved_budget(), ArgumentError);
  auto cfg3 = quick_cfg(Generator::CUDA);
  cfg3.budget = data::PerturbationBudget{data::Norm::Linf, 8.0 / 255.0};
  CHECK_THROWS_AS(cfg3.resolved_budget(), ArgumentError);
}
