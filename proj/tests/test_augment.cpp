#include <catch2/catch.hpp>

#include "poisonforge/augment.hpp"
#include "poisonforge/iss.hpp"
#include "poisonforge/toy_data.hpp"

using namespace poisonforge;
using namespace poisonforge::augment;
using data::ImageBatch;
using data::make_toy_dataset;

namespace {

AugmentPolicy identity_policy() {
  AugmentPolicy p;
  p.stages = {RandomResizedCrop{1.0, 1.0, 1.0, 1.0, 0}, ColorJitter{0.0},
              RandomGrayscale{0.0}, GaussianBlur{0.0}, HorizontalFlip{0.0},
              Normalize{}};
  return p;
}

ImageBatch constant_batch(int n, int size, float value, int num_classes = 2) {
  ImageBatch b;
  b.pixels = Tensor<float>({n, 3, size, size});
  for (auto& v : b.pixels.v) v = value;
  b.num_classes = num_classes;
  for (int i = 0; i < n; ++i) {
    b.labels.push_back(i % num_classes);
    b.ids.push_back("c:" + std::to_string(i));
  }
  return b;
}

}  // namespace

TEST_CASE("identity policy is a bitwise no-op", "[augment]") {
  ImageBatch b = make_toy_dataset(2, 4, 8, 3);
  auto views = apply_policy(identity_policy(), b, 1);
  REQUIRE(views.size() == 1);
  CHECK(views[0].pixels.v == b.pixels.v);
}

TEST_CASE("pretrain policy produces two differing views", "[augment]") {
  ImageBatch b = make_toy_dataset(4, 25, 16, 5);  // 100 samples
  auto policy = pretrain_policy(/*seed=*/7);
  auto views = apply_policy(policy, b, 2);
  REQUIRE(views.size() == 2);
  int differing = 0;
  for (int i = 0; i < b.n(); ++i) {
    const std::size_t stride = std::size_t(3) * 16 * 16;
    bool differs = false;
    for (std::size_t k = 0; k < stride && !differs; ++k)
      if (views[0].pixels.v[i * stride + k] !=
          views[1].pixels.v[i * stride + k])
        differs = true;
    if (differs) ++differing;
  }
  // two independent stochastic views should almost always differ
  CHECK(differing >= 95);
}

TEST_CASE("augmentation is reproducible given the seed", "[augment]") {
  ImageBatch b = make_toy_dataset(3, 5, 16, 11);
  auto policy = pretrain_policy(42);
  auto v1 = apply_policy(policy, b, 2);
  auto v2 = apply_policy(policy, b, 2);
  CHECK(v1[0].pixels.v == v2[0].pixels.v);
  CHECK(v1[1].pixels.v == v2[1].pixels.v);
  auto policy2 = pretrain_policy(43);
  auto v3 = apply_policy(policy2, b, 1);
  CHECK(v1[0].pixels.v != v3[0].pixels.v);
}

TEST_CASE("augment outputs stay in range and keep shape", "[augment]") {
  ImageBatch b = make_toy_dataset(4, 6, 16, 13);
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    auto views = apply_policy(pretrain_policy(seed), b, 2);
    for (const auto& v : views) {
      REQUIRE(v.pixels.shape == b.pixels.shape);
      REQUIRE_NOTHROW(v.validate());
    }
  }
}

TEST_CASE("grayscale stage equalizes channels", "[augment]") {
  ImageBatch b = make_toy_dataset(2, 4, 8, 17);
  AugmentPolicy p;
  p.stages = {RandomGrayscale{1.0}};
  auto v = apply_policy(p, b, 1)[0];
  for (int i = 0; i < v.n(); ++i)
    for (int y = 0; y < v.h(); ++y)
      for (int x = 0; x < v.w(); ++x) {
        CHECK(v.pixels.at4(i, 0, y, x) == v.pixels.at4(i, 1, y, x));
        CHECK(v.pixels.at4(i, 1, y, x) == v.pixels.at4(i, 2, y, x));
      }
}

TEST_CASE("center crop larger than image is rejected", "[augment]") {
  ImageBatch b = make_toy_dataset(2, 4, 8, 17);
  AugmentPolicy p;
  p.stages = {CenterCrop{12}};
  CHECK_THROWS_AS(apply_policy(p, b, 1), ArgumentError);
}

TEST_CASE("cutout", "[augment]") {
  ImageBatch b = make_toy_dataset(2, 4, 8, 19);

  SECTION("full-size hole can blank the image") {
    // centered hole of the full side: force via many draws until centered
    Rng rng(3);
    ImageBatch out = cutout(b, 8, rng);
    // hole of size 8 on an 8x8 image always covers everything whenever the
    // center lands at (>=4, >=4); verify at least that zeroed area dominates
    // and check the exact all-zero case deterministically below
    ImageBatch one = b.select({0});
    for (std::uint64_t s = 0; s < 2000; ++s) {
      Rng r2(s);
      ImageBatch o = cutout(one, 8, r2);
      bool all_zero = true;
      for (float v : o.pixels.v) all_zero &= (v == 0.0f);
      if (all_zero) return;  // found the centered draw
    }
    FAIL("no draw produced the centered full mask");
  }

  SECTION("zero hole is the identity") {
    Rng rng(5);
    ImageBatch out = cutout(b, 0, rng);
    CHECK(out.pixels.v == b.pixels.v);
  }

  SECTION("mask-count oracle: at most hole^2 zeroed, rest untouched") {
    ImageBatch base = constant_batch(4, 8, 0.7f);
    Rng rng(7);
    ImageBatch out = cutout(base, 4, rng);
    for (int i = 0; i < 4; ++i) {
      int zeroed = 0, changed = 0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          bool z = out.pixels.at4(i, 0, y, x) == 0.0f;
          bool c = out.pixels.at4(i, 0, y, x) != base.pixels.at4(i, 0, y, x);
          zeroed += z;
          changed += c;
        }
      CHECK(zeroed == changed);  // only zeroing happened
      CHECK(zeroed <= 16);
      CHECK(zeroed >= 4);  // at least a quarter of the hole is inside
    }
  }

  SECTION("hole larger than image is rejected") {
    Rng rng(9);
    CHECK_THROWS_AS(cutout(b, 9, rng), ArgumentError);
  }
}

TEST_CASE("mixup endpoints and convexity", "[augment]") {
  ImageBatch a02 = constant_batch(2, 8, 0.2f);
  ImageBatch a08 = constant_batch(2, 8, 0.8f);

  SECTION("lambda 1 keeps the anchor") {
    Rng rng(1);
    MixedBatch m = mixup(a02, 1.0, rng, 1.0);
    for (float v : m.pixels.v) CHECK(v == 0.2f);
    for (const auto& p : m.pairs) CHECK(p.lam == 1.0);
  }
  SECTION("lambda 0.5 on two constant images gives the mean") {
    ImageBatch b = a02;
    // second half of the batch at 0.8
    for (int i = 1; i < 2; ++i)
      for (int k = 0; k < 3 * 8 * 8; ++k)
        b.pixels.v[std::size_t(i) * 3 * 8 * 8 + k] = 0.8f;
    // find a seed whose permutation swaps the two samples
    for (std::uint64_t s = 0; s < 32; ++s) {
      Rng rng(s);
      MixedBatch m = mixup(b, 1.0, rng, 0.5);
      if (m.pairs[0].y_b != m.pairs[0].y_a || true) {
        bool swapped = m.pixels.v[0] == 0.5f;
        if (swapped) {
          CHECK(m.pixels.v[0] == Approx(0.5f));
          return;
        }
      }
    }
    FAIL("no permutation paired the two constant images");
  }
  SECTION("label weights sum to one") {
    Rng rng(3);
    MixedBatch m = mixup(a08, 1.0, rng);
    for (const auto& p : m.pairs) {
      CHECK(p.lam >= 0.0);
      CHECK(p.lam <= 1.0);
    }
  }
}

TEST_CASE("cutmix mask-count oracle", "[augment]") {
  ImageBatch b = constant_batch(3, 8, 0.25f, 3);
  // make each image distinct so swapped pixels are visible
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3 * 8 * 8; ++k)
      b.pixels.v[std::size_t(i) * 3 * 8 * 8 + k] = 0.2f + 0.3f * i;
  b.labels = {0, 1, 2};

  Rng rng(11);
  MixedBatch m = cutmix(b, 1.0, rng, /*fixed_lambda=*/0.75);
  for (int i = 0; i < 3; ++i) {
    CHECK(m.pairs[std::size_t(i)].lam == Approx(0.75));
    int from_partner = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (m.pixels.at4(i, 0, y, x) != b.pixels.at4(i, 0, y, x))
          ++from_partner;
    int j = -1;  // recover the partner by value
    float seen = -1;
    for (int y = 0; y < 8 && j < 0; ++y)
      for (int x = 0; x < 8 && j < 0; ++x)
        if (m.pixels.at4(i, 0, y, x) != b.pixels.at4(i, 0, y, x))
          seen = m.pixels.at4(i, 0, y, x);
    if (seen >= 0) {
      // partner differs from anchor, so exactly 16 pixels changed
      CHECK(from_partner == 16);
    } else {
      // partner was the anchor itself; nothing changed but lambda recorded
      CHECK(from_partner == 0);
    }
  }
}

TEST_CASE("gaussian noise", "[augment]") {
  ImageBatch b = constant_batch(1, 8, 0.5f);

  SECTION("sigma 0 is the identity") {
    Rng rng(1);
    CHECK(gaussian_noise(b, 0.0, 1.0, rng).pixels.v == b.pixels.v);
  }
  SECTION("prob 0 is the identity") {
    Rng rng(1);
    CHECK(gaussian_noise(b, 4.0 / 255.0, 0.0, rng).pixels.v == b.pixels.v);
  }
  SECTION("sample statistics match the configured sigma") {
    ImageBatch big = constant_batch(8, 16, 0.5f);  // 8*16*16*3 > 1000 pixels
    Rng rng(123);
    ImageBatch noisy = gaussian_noise(big, 4.0 / 255.0, 1.0, rng);
    double sum = 0, sum2 = 0;
    std::size_t n = noisy.pixels.v.size();
    for (std::size_t i = 0; i < n; ++i) {
      double d = double(noisy.pixels.v[i]) - 0.5;
      sum += d;
      sum2 += d * d;
    }
    double var = sum2 / n - (sum / n) * (sum / n);
    double sd = std::sqrt(var);
    CHECK(sd == Approx(4.0 / 255.0).epsilon(0.15));
  }
}

TEST_CASE("iss grayscale", "[augment]") {
  ImageBatch b = make_toy_dataset(2, 4, 8, 23);
  ImageBatch gray = iss_transform(b, IssMode::Grayscale);
  ImageBatch gray2 = iss_transform(gray, IssMode::Grayscale);
  CHECK(gray2.pixels.v == gray.pixels.v);  // idempotent on gray images
}

TEST_CASE("iss jpeg", "[augment]") {
  SECTION("quality 100 on a smooth image stays close") {
    ImageBatch smooth = constant_batch(1, 16, 0.0f);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c)
          smooth.pixels.at4(0, c, y, x) =
              0.3f + 0.02f * float(y) + 0.01f * float(x);
    ImageBatch out = iss_transform(smooth, IssMode::JPEG, 100);
    float max_dev = 0;
    for (std::size_t i = 0; i < out.pixels.v.size(); ++i)
      max_dev = std::max(max_dev,
                         std::fabs(out.pixels.v[i] - smooth.pixels.v[i]));
    CHECK(max_dev < 0.05f);
  }
  SECTION("low quality keeps range and shape") {
    ImageBatch b = make_toy_dataset(2, 4, 16, 29);
    ImageBatch out = iss_transform(b, IssMode::JPEG, 10);
    REQUIRE(out.pixels.shape == b.pixels.shape);
    REQUIRE_NOTHROW(out.validate());
  }
  SECTION("bad quality is rejected") {
    ImageBatch b = make_toy_dataset(2, 4, 8, 29);
    CHECK_THROWS_AS(iss_transform(b, IssMode::JPEG, 0), ArgumentError);
    CHECK_THROWS_AS(iss_transform(b, IssMode::JPEG, 101), ArgumentError);
  }
}
