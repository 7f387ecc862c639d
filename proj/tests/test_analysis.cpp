#include <catch2/catch.hpp>

#include <filesystem>

#include "poisonforge/analysis.hpp"
#include "poisonforge/toy_data.hpp"

#include "oracle.hpp"

using namespace poisonforge;
using namespace poisonforge::analysis;
using namespace poisonforge::model;

namespace {

RepresentationMatrix make_reps(const std::vector<std::vector<float>>& rows,
                               const std::vector<int>& labels) {
  RepresentationMatrix r;
  const int n = static_cast<int>(rows.size());
  const int d = n > 0 ? static_cast<int>(rows[0].size()) : 0;
  r.reps = Tensor<float>({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) r.reps.at2(i, j) = rows[std::size_t(i)][std::size_t(j)];
  r.labels = labels;
  for (int i = 0; i < n; ++i) r.ids.push_back("r:" + std::to_string(i));
  return r;
}

/// Bundle whose encoder is a bare flatten (identity on flattened pixels).
ModelBundle<float> identity_encoder(int pixels) {
  ModelBundle<float> b;
  b.spec.arch = Arch::MLP;
  b.spec.in_c = 1;
  b.spec.in_h = 1;
  b.spec.in_w = pixels;
  b.spec.rep_dim = pixels;
  b.encoder.add(std::make_unique<Flatten<float>>());
  return b;
}

}  // namespace

TEST_CASE("in-class similarity endpoints", "[analysis]") {
  SECTION("identical rows give 1.0") {
    auto r = make_reps({{1, 2}, {1, 2}, {1, 2}, {1, 2}}, {0, 0, 1, 1});
    CHECK(in_class_similarity(r) == Approx(1.0).margin(1e-12));
  }
  SECTION("orthogonal rows within each class give 0.0") {
    auto r = make_reps({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0},
                        {0, 0, 0, 1}},
                       {0, 0, 1, 1});
    CHECK(in_class_similarity(r) == Approx(0.0).margin(1e-12));
  }
  SECTION("hand-set vectors match explicit pair enumeration") {
    auto r = make_reps({{1, 0}, {1, 1}, {0, 1}, {-1, 0}}, {0, 0, 0, 1 - 1});
    // all four in one class: pairs (0,1),(0,2),(0,3),(1,2),(1,3),(2,3)
    double c01 = 1.0 / std::sqrt(2.0), c02 = 0.0, c03 = -1.0;
    double c12 = 1.0 / std::sqrt(2.0), c13 = -1.0 / std::sqrt(2.0), c23 = 0.0;
    double expect = (c01 + c02 + c03 + c12 + c13 + c23) / 6.0;
    CHECK(in_class_similarity(r) == Approx(expect).margin(1e-9));
  }
  SECTION("class with a single sample") {
    auto r = make_reps({{1, 0}, {0, 1}, {1, 1}}, {0, 0, 1});
    CHECK_THROWS_AS(in_class_similarity(r), ArgumentError);
    CHECK_NOTHROW(in_class_similarity(r, /*skip_small_classes=*/true));
  }
  SECTION("per-row positive rescaling is invisible") {
    auto r = make_reps({{1, 0}, {1, 1}, {0, 2}, {3, 3}}, {0, 0, 0, 0});
    double base = in_class_similarity(r);
    auto r2 = r;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 2; ++j) r2.reps.at2(i, j) *= float(i + 1) * 0.5f;
    CHECK(in_class_similarity(r2) == Approx(base).margin(1e-9));
  }
}

TEST_CASE("paired similarity", "[analysis]") {
  auto rp = make_reps({{1, 0}, {0, 2}, {1, 1}}, {0, 0, 1});
  SECTION("identical matrices give 1.0") {
    CHECK(paired_similarity(rp, rp) == Approx(1.0).margin(1e-12));
  }
  SECTION("antipodal pairs give -1.0") {
    auto rc = rp;
    for (auto& v : rc.reps.v) v = -v;
    CHECK(paired_similarity(rp, rc) == Approx(-1.0).margin(1e-12));
  }
  SECTION("hand-set pairs match direct arithmetic") {
    auto rc = make_reps({{0, 1}, {2, 0}, {1, 1}}, {0, 0, 1});
    double expect = (0.0 + 0.0 + 1.0) / 3.0;
    CHECK(paired_similarity(rp, rc) == Approx(expect).margin(1e-12));
  }
  SECTION("misaligned ids are rejected") {
    auto rc = rp;
    rc.ids[0] = "other:0";
    CHECK_THROWS_AS(paired_similarity(rp, rc), ArgumentError);
  }
}

TEST_CASE("effective rank analytic cases", "[analysis]") {
  SECTION("rank-1 rows give 1.0") {
    auto r = make_reps({{1, 2}, {2, 4}, {3, 6}, {-1, -2}}, {0, 0, 1, 1});
    CHECK(effective_rank(r) == Approx(1.0).margin(1e-6));
  }
  SECTION("d equal nonzero singular values give d") {
    // rows built from orthonormal zero-sum factors: centering is a no-op
    // and the spectrum is exactly {s, s}
    double s = 0.7;
    auto u1 = std::vector<double>{0.5, -0.5, 0.5, -0.5};
    auto u2 = std::vector<double>{0.5, 0.5, -0.5, -0.5};
    std::vector<std::vector<float>> rows(4, std::vector<float>(2));
    for (int i = 0; i < 4; ++i) {
      rows[std::size_t(i)][0] = static_cast<float>(s * u1[std::size_t(i)]);
      rows[std::size_t(i)][1] = static_cast<float>(s * u2[std::size_t(i)]);
    }
    auto r = make_reps(rows, {0, 0, 1, 1});
    CHECK(effective_rank(r) == Approx(2.0).margin(1e-6));
  }
  SECTION("spectrum {0.9, 0.1} gives the entropy exponent") {
    auto u1 = std::vector<double>{0.5, -0.5, 0.5, -0.5};
    auto u2 = std::vector<double>{0.5, 0.5, -0.5, -0.5};
    std::vector<std::vector<float>> rows(4, std::vector<float>(2));
    for (int i = 0; i < 4; ++i) {
      rows[std::size_t(i)][0] = static_cast<float>(0.9 * u1[std::size_t(i)]);
      rows[std::size_t(i)][1] = static_cast<float>(0.1 * u2[std::size_t(i)]);
    }
    auto r = make_reps(rows, {0, 0, 1, 1});
    double expect = std::exp(-(0.9 * std::log(0.9) + 0.1 * std::log(0.1)));
    CHECK(effective_rank(r) == Approx(expect).margin(1e-6));
    CHECK(expect == Approx(1.3841).margin(1e-3));
  }
  SECTION("all-zero matrix is defined as 1.0") {
    auto r = make_reps({{0, 0}, {0, 0}}, {0, 1});
    CHECK(effective_rank(r) == 1.0);
  }
  SECTION("spectrum helper: explicit values") {
    CHECK(effective_rank_from_spectrum({0.9, 0.1}) ==
          Approx(std::exp(-(0.9 * std::log(0.9) + 0.1 * std::log(0.1))))
              .margin(1e-12));
  }
}

TEST_CASE("effective rank invariances and range", "[analysis]") {
  Rng rng(17);
  std::vector<std::vector<float>> rows(6, std::vector<float>(4));
  for (auto& row : rows)
    for (auto& v : row) v = static_cast<float>(rng.uniform(-1, 1));
  auto r = make_reps(rows, {0, 0, 0, 1, 1, 1});
  double base = effective_rank(r);
  CHECK(base >= 1.0);
  CHECK(base <= std::min(6 - 1, 4) + 1e-9);

  SECTION("orthogonal rotation is invisible") {
    Eigen::MatrixXd g(4, 4);
    Rng r2(5);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) g(i, j) = r2.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    auto rot = r;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += double(r.reps.at2(i, k)) * q(k, j);
        rot.reps.at2(i, j) = static_cast<float>(acc);
      }
    CHECK(effective_rank(rot) == Approx(base).margin(1e-4));
  }
  SECTION("global positive rescaling is invisible") {
    auto sc = r;
    for (auto& v : sc.reps.v) v *= 37.5f;
    CHECK(effective_rank(sc) == Approx(base).margin(1e-6));
  }
}

TEST_CASE("local lipschitz", "[analysis]") {
  SECTION("constant encoder gives 0") {
    Rng rng(1);
    ModelBundle<float> b;
    b.spec.arch = Arch::MLP;
    b.spec.in_c = 1;
    b.spec.in_h = 1;
    b.spec.in_w = 4;
    b.spec.rep_dim = 3;
    b.encoder.add(std::make_unique<Flatten<float>>());
    auto lin = std::make_unique<Linear<float>>("z", 4, 3, rng);
    ParameterSet<float> ps;
    lin->params(ps);
    for (auto& p : ps) std::fill(p.value->begin(), p.value->end(), 0.0f);
    b.encoder.add(std::move(lin));
    Tensor<float> x({2, 1, 1, 4});
    for (auto& v : x.v) v = 0.5f;
    CHECK(local_lipschitz(b, x, 8.0 / 255.0, 10) == 0.0);
  }

  SECTION("identity encoder on 4 pixels estimates D_pix") {
    auto b = identity_encoder(4);
    Tensor<float> x({1, 1, 1, 4}, {0.3f, 0.6f, 0.4f, 0.5f});
    double est = local_lipschitz(b, x, 8.0 / 255.0, 10, 3);
    auto rep_of = [&](const Tensor<float>& xin) {
      return model::forward(b, xin, Heads::Rep()).rep;
    };
    double truth = oracle::lipschitz_corner_max(rep_of, x, 8.0 / 255.0);
    CHECK(truth == Approx(4.0).margin(1e-6));
    CHECK(est >= 0.9 * truth);
    CHECK(est <= 1.1 * truth);
  }

  SECTION("estimator never exceeds the exhaustive corner maximum") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
      BuildSpec s;
      s.arch = Arch::MLP;
      s.in_c = 1;
      s.in_h = 2;
      s.in_w = 2;
      s.rep_dim = 3;
      s.proj_dim = 3;
      s.num_classes = 2;
      s.mlp_hidden = 5;
      s.seed = seed;
      auto b = build_bundle<float>(s);
      Rng rng(seed + 10);
      Tensor<float> x({1, 1, 2, 2});
      for (auto& v : x.v) v = static_cast<float>(rng.uniform(0.2, 0.8));
      double est = local_lipschitz(b, x, 0.05, 12, seed);
      auto rep_of = [&](const Tensor<float>& xin) {
        return model::forward(b, xin, Heads::Rep()).rep;
      };
      double truth = oracle::lipschitz_corner_max(rep_of, x, 0.05);
      CHECK(est <= truth + 1e-6);
    }
  }

  SECTION("small radius approaches the linear-map corner maximum") {
    Rng rng(23);
    ModelBundle<float> b;
    b.spec.arch = Arch::MLP;
    b.spec.in_c = 1;
    b.spec.in_h = 1;
    b.spec.in_w = 4;
    b.spec.rep_dim = 3;
    b.encoder.add(std::make_unique<Flatten<float>>());
    b.encoder.add(std::make_unique<Linear<float>>("j", 4, 3, rng));
    Tensor<float> x({1, 1, 1, 4}, {0.4f, 0.5f, 0.6f, 0.5f});
    double radius = 1e-3;
    double est = local_lipschitz(b, x, radius, 12, 7);
    // oracle: finite-difference Jacobian, then exhaustive corner max
    double h = 1e-4;
    std::vector<std::vector<double>> jac(3, std::vector<double>(4, 0.0));
    for (int i = 0; i < 4; ++i) {
      Tensor<float> xp = x, xm = x;
      xp.v[std::size_t(i)] += static_cast<float>(h);
      xm.v[std::size_t(i)] -= static_cast<float>(h);
      auto rp = model::forward(b, xp, Heads::Rep()).rep;
      auto rm = model::forward(b, xm, Heads::Rep()).rep;
      for (int o = 0; o < 3; ++o)
        jac[std::size_t(o)][std::size_t(i)] =
            (double(rp.at2(0, o)) - double(rm.at2(0, o))) / (2 * h);
    }
    double truth = 0;
    for (int mask = 0; mask < 16; ++mask) {
      double l1 = 0;
      for (int o = 0; o < 3; ++o) {
        double acc = 0;
        for (int i = 0; i < 4; ++i)
          acc += jac[std::size_t(o)][std::size_t(i)] *
                 ((mask >> i) & 1 ? radius : -radius);
        l1 += std::fabs(acc);
      }
      truth = std::max(truth, l1 / radius);
    }
    CHECK(est == Approx(truth).epsilon(0.10));
  }
}

TEST_CASE("knn eval", "[analysis]") {
  SECTION("single train sample labels everything") {
    auto train = make_reps({{1, 0}}, {2});
    auto test = make_reps({{0, 1}, {1, 1}}, {2, 2});
    CHECK(knn_eval(train, test, 1) == 1.0);
  }
  SECTION("exact match in a well-separated set") {
    auto train = make_reps({{1, 0}, {0, 1}, {-1, 0}, {0, -1}}, {0, 1, 2, 3});
    auto test = make_reps({{0, 1}}, {1});
    CHECK(knn_eval(train, test, 1) == 1.0);
  }
  SECTION("12-point hand-built set matches the exhaustive oracle") {
    Rng rng(31);
    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) {
      rows.push_back({static_cast<float>(rng.uniform(-1, 1)),
                      static_cast<float>(rng.uniform(-1, 1))});
      labels.push_back(i % 3);
    }
    auto train = make_reps(rows, labels);
    std::vector<std::vector<float>> trows;
    std::vector<int> tlabels;
    for (int i = 0; i < 6; ++i) {
      trows.push_back({static_cast<float>(rng.uniform(-1, 1)),
                       static_cast<float>(rng.uniform(-1, 1))});
      tlabels.push_back(i % 3);
    }
    auto test = make_reps(trows, tlabels);
    double got = knn_eval(train, test, 3, /*pool=*/12);
    double expect = oracle::knn_exhaustive(train.reps, train.labels,
                                           test.reps, test.labels, 3);
    CHECK(got == expect);
  }
  SECTION("random instances match the oracle with a full pool") {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
      Rng rng(seed * 7);
      int n = 5 + int(rng.uniform_int(0, 45));
      int d = 2 + int(rng.uniform_int(0, 6));
      int classes = 2 + int(rng.uniform_int(0, 3));
      std::vector<std::vector<float>> rows;
      std::vector<int> labels;
      for (int i = 0; i < n; ++i) {
        std::vector<float> row;
        for (int j = 0; j < d; ++j)
          row.push_back(static_cast<float>(rng.uniform(-1, 1)));
        rows.push_back(row);
        labels.push_back(int(rng.uniform_int(0, classes - 1)));
      }
      auto train = make_reps(rows, labels);
      std::vector<std::vector<float>> trows;
      std::vector<int> tlabels;
      for (int i = 0; i < 8; ++i) {
        std::vector<float> row;
        for (int j = 0; j < d; ++j)
          row.push_back(static_cast<float>(rng.uniform(-1, 1)));
        trows.push_back(row);
        tlabels.push_back(int(rng.uniform_int(0, classes - 1)));
      }
      auto test = make_reps(trows, tlabels);
      int k = 1 + int(rng.uniform_int(0, std::min(n, 7) - 1));
      double got = knn_eval(train, test, k, n);
      double expect = oracle::knn_exhaustive(train.reps, train.labels,
                                             test.reps, test.labels, k);
      CHECK(got == expect);
    }
  }
  SECTION("bad pool arguments are rejected") {
    auto train = make_reps({{1, 0}, {0, 1}}, {0, 1});
    auto test = make_reps({{1, 0}}, {0});
    CHECK_THROWS_AS(knn_eval(train, test, 3, 2), ArgumentError);
    CHECK_THROWS_AS(knn_eval(train, test, 1, 5), ArgumentError);
    auto empty = make_reps({}, {});
    CHECK_THROWS_AS(knn_eval(empty, test, 1), ArgumentError);
  }
}

TEST_CASE("embedding export round-trips", "[analysis]") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() /
             ("pf_analysis_" + std::to_string(::getpid()));
  fs::create_directories(dir);

  SECTION("non-empty matrix") {
    auto r = make_reps({{1, 2, 3}, {4, 5, 6}}, {0, 1});
    auto path = (dir / "reps.pfc").string();
    export_embeddings(path, r);
    auto l = load_embeddings(path);
    CHECK(l.reps.v == r.reps.v);
    CHECK(l.labels == r.labels);
    CHECK(l.ids == r.ids);
  }
  SECTION("empty matrix is a valid file") {
    RepresentationMatrix r;
    r.reps = Tensor<float>({0, 4});
    auto path = (dir / "empty.pfc").string();
    export_embeddings(path, r);
    auto l = load_embeddings(path);
    CHECK(l.n() == 0);
    CHECK(l.d() == 4);
  }
  SECTION("exported file is a standard container") {
    auto r = make_reps({{1, 0}}, {0});
    auto path = (dir / "generic.pfc").string();
    export_embeddings(path, r);
    auto c = data::load_container(path);
    CHECK(c.header["kind"] == "representations");
    CHECK(c.arrays.count("reps") == 1);
  }
  fs::remove_all(dir);
}

TEST_CASE("analysis report is total on an untrained encoder", "[analysis]") {
  using data::make_toy_dataset;
  auto clean = make_toy_dataset(3, 4, 8, 77);
  data::PoisonedDataset ds;
  ds.clean = clean;
  ds.poisoned = clean;
  for (auto& v : ds.poisoned.pixels.v)
    v = std::clamp(v + 4.0f / 255.0f, 0.0f, 1.0f);
  ds.budget = {data::Norm::Linf, 8.0 / 255.0};
  ds.generator_tag = "manual";

  BuildSpec s;
  s.arch = Arch::TinyConvNet;
  s.in_c = 3;
  s.in_h = 8;
  s.in_w = 8;
  s.rep_dim = 6;
  s.proj_dim = 6;
  s.num_classes = 3;
  s.seed = 11;
  auto bundle = build_bundle<float>(s);

  AnalysisOptions opt;
  opt.lip_steps = 3;
  auto rep = analysis_report(bundle, ds, opt);
  CHECK(std::isfinite(rep.in_cls_sim_psn));
  CHECK(std::isfinite(rep.psn_cln_sim));
  CHECK(std::isfinite(rep.e_rank_psn));
  CHECK(std::isfinite(rep.local_lip_psn));
}
