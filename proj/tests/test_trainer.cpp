#include <catch2/catch.hpp>

#include "poisonforge/toy_data.hpp"
#include "poisonforge/trainer.hpp"

using namespace poisonforge;
using namespace poisonforge::trainer;
using data::ImageBatch;
using data::make_toy_dataset;

namespace {

TrainConfig tiny_config(Method m, std::uint64_t seed, int epochs = 3) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.base_lr = 0.8;
  cfg.warmup_epochs = std::min(1, epochs);
  cfg.model.arch = model::Arch::TinyConvNet;
  cfg.model.rep_dim = 12;
  cfg.model.proj_dim = 8;
  cfg.model.conv_width = 6;
  cfg.at.steps = 2;
  cfg.at.step_size = 2.0 / 255.0;
  cfg.seed = seed;
  return cfg;
}

ImageBatch toy_train(std::uint64_t seed = 1) {
  return make_toy_dataset(4, 10, 12, seed);
}

}  // namespace

TEST_CASE("defaults follow the training recipe", "[trainer]") {
  TrainConfig cfg;
  CHECK(cfg.weights.alpha == 0.5);
  CHECK(cfg.weights.beta == 0.5);
  CHECK(cfg.weights.temperature == 0.2);
  CHECK(cfg.at.epsilon == Approx(4.0 / 255.0));
  CHECK(cfg.at.step_size == Approx(0.6 / 255.0));
  CHECK(cfg.at.steps == 10);
  CHECK(cfg.at.random_start);
  CHECK(cfg.at.restarts == 0);
  CHECK(cfg.ema == 0.999);
}

TEST_CASE("zero epochs returns the initialization", "[trainer]") {
  auto ds = toy_train();
  auto cfg = tiny_config(Method::SL, 7, /*epochs=*/0);
  cfg.warmup_epochs = 0;
  auto run = train(cfg, ds);

  model::BuildSpec expect_spec = cfg.model;
  expect_spec.num_classes = ds.num_classes;
  expect_spec.in_c = 3;
  expect_spec.in_h = 12;
  expect_spec.in_w = 12;
  expect_spec.seed = derive_seed(cfg.seed, "train.init");
  auto expect = model::build_bundle<float>(expect_spec);

  auto pa = run.bundle.trainable_parameters();
  auto pb = expect.trainable_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].value == *pb[i].value);
  CHECK(run.record.epochs.empty());
}

TEST_CASE("training is deterministic", "[trainer]") {
  auto ds = toy_train();
  for (Method m : {Method::SL, Method::SSL, Method::VESPR}) {
    auto cfg = tiny_config(m, 13, 2);
    auto r1 = train(cfg, ds);
    auto r2 = train(cfg, ds);
    auto pa = r1.bundle.trainable_parameters();
    auto pb = r2.bundle.trainable_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
      CHECK(*pa[i].value == *pb[i].value);
  }
}

TEST_CASE("every method runs and records its epochs", "[trainer]") {
  auto ds = toy_train();
  auto test = make_toy_dataset(4, 4, 12, 999);
  for (Method m :
       {Method::SL, Method::SL_AT, Method::SSL, Method::SSL_AT,
        Method::SSL_SL, Method::SSL_SL_GN, Method::VESPR, Method::VESPR_SSL,
        Method::VESPR_BOTH}) {
    auto cfg = tiny_config(m, 29, 2);
    auto run = train(cfg, ds, &test);
    INFO(method_name(m));
    CHECK(run.record.epochs.size() == 2);  // epochs recorded == config
    for (const auto& e : run.record.epochs) CHECK(std::isfinite(e.mean_loss));
  }
}

TEST_CASE("ssl wiring variants run", "[trainer]") {
  auto ds = toy_train();
  for (SslMethod sm : {SslMethod::SimCLR, SslMethod::MoCo, SslMethod::SimSiam,
                       SslMethod::BYOL}) {
    auto cfg = tiny_config(Method::SSL, 31, 1);
    cfg.ssl_method = sm;
    auto run = train(cfg, ds);
    INFO(ssl_method_name(sm));
    CHECK(run.record.epochs.size() == 1);
    CHECK(std::isfinite(run.record.epochs[0].mean_loss));
  }
  SECTION("vespr with a non-default ssl wiring") {
    auto cfg = tiny_config(Method::VESPR, 32, 1);
    cfg.ssl_method = SslMethod::BYOL;
    auto run = train(cfg, ds);
    CHECK(std::isfinite(run.record.epochs[0].mean_loss));
  }
}

TEST_CASE("loss bookkeeping: total equals cl + ce each step", "[trainer]") {
  auto ds = toy_train();
  auto cfg = tiny_config(Method::VESPR, 37, 2);
  cfg.record_steps = true;
  auto run = train(cfg, ds);
  REQUIRE(!run.record.steps.empty());
  for (const auto& s : run.record.steps)
    CHECK(s.total == Approx(s.cl_term + s.ce_term).margin(1e-6));
}

TEST_CASE("alpha=0 reduces the recorded loss to the ce term", "[trainer]") {
  auto ds = toy_train();
  auto cfg = tiny_config(Method::VESPR, 41, 1);
  cfg.weights.alpha = 0.0;
  cfg.weights.beta = 0.5;
  cfg.record_steps = true;
  auto run = train(cfg, ds);
  REQUIRE(!run.record.steps.empty());
  for (const auto& s : run.record.steps) {
    CHECK(s.total == s.ce_term);  // exact
    CHECK(s.cl_term == 0.0);
  }
}

TEST_CASE("attack precedes the update it feeds", "[trainer]") {
  auto ds = toy_train();
  for (Method m : {Method::SL_AT, Method::VESPR, Method::VESPR_SSL}) {
    auto cfg = tiny_config(m, 43, 2);
    auto run = train(cfg, ds);
    INFO(method_name(m));
    CHECK(run.record.step_order_checks == run.record.optimizer_steps);
  }
}

TEST_CASE("sl on clean toy data learns", "[trainer]") {
  auto ds = make_toy_dataset(4, 50, 12, 3);
  auto test = make_toy_dataset(4, 20, 12, 1003);
  auto cfg = tiny_config(Method::SL, 5, 30);
  cfg.warmup_epochs = 0;
  cfg.weight_decay = 5e-4;
  cfg.model.rep_dim = 32;
  cfg.model.conv_width = 16;
  cfg.model.proj_dim = 16;
  auto run = train(cfg, ds, &test);
  auto eval = evaluate(run.bundle, test, augment::test_policy(12));
  CHECK(eval.accuracy >= 0.95);
}

TEST_CASE("evaluate", "[trainer]") {
  // identity encoder + identity classifier: logits = the 4 pixels of a
  // 2x2 single-channel image
  model::ModelBundle<float> b;
  b.spec.arch = model::Arch::MLP;
  b.spec.in_c = 1;
  b.spec.in_h = 2;
  b.spec.in_w = 2;
  b.spec.rep_dim = 4;
  b.spec.num_classes = 4;
  b.encoder.add(std::make_unique<model::Flatten<float>>());
  Rng rng(1);
  auto head = std::make_unique<model::Linear<float>>("head", 4, 4, rng);
  model::ParameterSet<float> ps;
  head->params(ps);
  auto& w = *ps[0].value;
  std::fill(w.begin(), w.end(), 0.0f);
  std::fill(ps[1].value->begin(), ps[1].value->end(), 0.0f);
  for (int i = 0; i < 4; ++i) w[std::size_t(i) * 4 + i] = 1.0f;
  b.classifier.add(std::move(head));

  ImageBatch batch;
  batch.pixels = Tensor<float>({10, 1, 2, 2});
  batch.num_classes = 4;
  Rng drng(5);
  for (int i = 0; i < 10; ++i) {
    int y = int(drng.uniform_int(0, 3));
    for (int k = 0; k < 4; ++k)
      batch.pixels.v[std::size_t(i) * 4 + k] = k == y ? 0.9f : 0.1f;
    batch.labels.push_back(y);
    batch.ids.push_back("e:" + std::to_string(i));
  }

  SECTION("constructed all-correct logits give accuracy 1.0") {
    auto r = evaluate(b, batch, augment::test_policy(2));
    CHECK(r.accuracy == 1.0);
    CHECK(r.mean_loss > 0.0);
  }

  SECTION("matches a hand-rolled loop oracle") {
    auto logits =
        model::forward(b, batch.pixels, model::Heads::Logits()).logits;
    int correct = 0;
    for (int i = 0; i < 10; ++i) {
      int best = 0;
      for (int k = 1; k < 4; ++k)
        if (logits.at2(i, k) > logits.at2(i, best)) best = k;
      correct += best == batch.labels[std::size_t(i)];
    }
    auto r = evaluate(b, batch, augment::test_policy(2));
    CHECK(r.accuracy == Approx(double(correct) / 10));
  }

  SECTION("ties break toward the lower class index") {
    ImageBatch tie;
    tie.pixels = Tensor<float>({1, 1, 2, 2});
    for (auto& v : tie.pixels.v) v = 0.5f;
    tie.labels = {0};
    tie.ids = {"t:0"};
    tie.num_classes = 4;
    auto r = evaluate(b, tie, augment::test_policy(2));
    CHECK(r.accuracy == 1.0);  // all logits equal, class 0 wins
  }

  SECTION("adversarially permuted binary labels flip the accuracy") {
    ImageBatch bin;
    bin.pixels = Tensor<float>({10, 1, 2, 2});
    bin.num_classes = 2;
    for (int i = 0; i < 10; ++i) {
      int y = i % 2;
      for (int k = 0; k < 4; ++k)
        bin.pixels.v[std::size_t(i) * 4 + k] =
            k == y ? 0.9f : (k < 2 ? 0.1f : 0.0f);
      bin.labels.push_back(y);
      bin.ids.push_back("b:" + std::to_string(i));
    }
    model::ModelBundle<float> b2;
    b2.spec = b.spec;
    b2.spec.num_classes = 2;
    b2.encoder.add(std::make_unique<model::Flatten<float>>());
    Rng r3(2);
    auto head2 = std::make_unique<model::Linear<float>>("head", 4, 2, r3);
    model::ParameterSet<float> ps2;
    head2->params(ps2);
    auto& w2 = *ps2[0].value;
    std::fill(w2.begin(), w2.end(), 0.0f);
    std::fill(ps2[1].value->begin(), ps2[1].value->end(), 0.0f);
    w2[0] = 1.0f;          // logit0 = pixel0
    w2[std::size_t(4) + 1] = 1.0f;  // logit1 = pixel1
    b2.classifier.add(std::move(head2));

    auto acc = evaluate(b2, bin, augment::test_policy(2)).accuracy;
    ImageBatch flipped = bin;
    for (auto& y : flipped.labels) y = 1 - y;
    auto acc_flip = evaluate(b2, flipped, augment::test_policy(2)).accuracy;
    CHECK(acc + acc_flip == Approx(1.0));
  }
}

TEST_CASE("linear probe freezes the encoder", "[trainer]") {
  auto ds = toy_train(11);
  auto cfg = tiny_config(Method::SSL, 17, 1);
  auto pre = train(cfg, ds);

  model::ParameterSet<float> enc_before;
  pre.bundle.encoder.params(enc_before);
  auto hash_before = model::parameter_hash(enc_before);

  ProbeConfig pc;
  pc.epochs = 3;
  pc.seed = 5;
  auto probe = linear_probe(pre.bundle, ds, pc);

  model::ParameterSet<float> enc_after;
  probe.bundle.encoder.params(enc_after);
  CHECK(model::parameter_hash(enc_after) == hash_before);
  CHECK(probe.record.epochs.size() == 3);
}

TEST_CASE("linear probe on an identity encoder separates toy features",
          "[trainer]") {
  auto ds = make_toy_dataset(4, 40, 12, 21);
  model::ModelBundle<float> ident;
  ident.spec.arch = model::Arch::MLP;
  ident.spec.in_c = 3;
  ident.spec.in_h = 12;
  ident.spec.in_w = 12;
  ident.spec.rep_dim = 3 * 12 * 12;
  ident.spec.num_classes = 4;
  ident.encoder.add(std::make_unique<model::Flatten<float>>());
  Rng rng(1);
  ident.classifier.add(std::make_unique<model::Linear<float>>(
      "head", 3 * 12 * 12, 4, rng));

  ProbeConfig pc;
  pc.epochs = 40;
  pc.base_lr = 2.0;
  pc.seed = 3;
  auto probe = linear_probe(ident, ds, pc);
  CHECK(probe.record.epochs.back().train_acc >= 0.99);
}

TEST_CASE("zero-epoch probe stays at chance on balanced classes",
          "[trainer]") {
  auto ds = make_toy_dataset(4, 50, 12, 23);
  auto cfg = tiny_config(Method::SSL, 19, 0);
  cfg.warmup_epochs = 0;
  auto pre = train(cfg, ds);
  ProbeConfig pc;
  pc.epochs = 0;
  pc.seed = 7;
  auto probe = linear_probe(pre.bundle, ds, pc);
  double acc = accuracy(probe.bundle, ds.pixels, ds.labels);
  CHECK(acc >= 0.25 - 0.05 - 1e-9);
  CHECK(acc <= 0.25 + 0.05 + 1e-9);
}

TEST_CASE("curves record untrained and per-epoch state", "[trainer]") {
  auto clean = toy_train(31);
  data::PoisonedDataset ds;
  ds.clean = clean;
  ds.poisoned = clean;
  for (auto& v : ds.poisoned.pixels.v)
    v = std::clamp(v + 6.0f / 255.0f, 0.0f, 1.0f);
  ds.budget = {data::Norm::Linf, 8.0 / 255.0};
  ds.generator_tag = "manual";

  auto cfg = tiny_config(Method::SL, 47, 2);
  auto run = psn_cln_curves(cfg, ds);
  REQUIRE(run.record.initial.has_value());
  // untrained network sits near chance on both views
  CHECK(run.record.initial->psn_acc == Approx(0.25).margin(0.2));
  CHECK(run.record.initial->cln_acc == Approx(0.25).margin(0.2));
  CHECK(std::isfinite(run.record.initial->psn_cln_sim));
  REQUIRE(run.record.epochs.size() == 2);
  for (const auto& e : run.record.epochs) {
    CHECK(std::isfinite(e.psn_acc));
    CHECK(std::isfinite(e.cln_acc));
    CHECK(std::isfinite(e.psn_cln_sim));
  }
}

TEST_CASE("divergence raises a training error with the step", "[trainer]") {
  auto ds = toy_train(5);
  auto cfg = tiny_config(Method::SL, 3, 2);
  cfg.base_lr = 1e9;  // guaranteed blow-up
  try {
    train(cfg, ds);
    // divergence may also manifest as inf loss on the next epochs; if it
    // did not, at least the run must have finished with finite records
  } catch (const TrainingError& e) {
    CHECK(e.step_index >= 0);
  }
}

TEST_CASE("run record round-trips to json", "[trainer]") {
  auto ds = toy_train(7);
  auto cfg = tiny_config(Method::SSL_SL, 53, 1);
  cfg.record_steps = true;
  auto run = train(cfg, ds);
  auto j = run.record.to_json();
  CHECK(j["epochs"].size() == 1);
  CHECK(j["artifact_version"] == kArtifactVersion);
  CHECK(j.contains("steps"));
}
