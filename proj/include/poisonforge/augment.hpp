#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "poisonforge/image_batch.hpp"
#include "poisonforge/loss.hpp"
#include "poisonforge/rng.hpp"

namespace poisonforge::augment {

using data::ImageBatch;

// --- policy stages ----------------------------------------------------------

struct RandomResizedCrop {
  double scale_min = 0.6, scale_max = 1.0;    // area fraction, subset of (0,1]
  double aspect_min = 0.75, aspect_max = 4.0 / 3.0;
  int out_size = 0;  // 0 keeps the current size
};

struct ColorJitter {
  double prob = 0.8;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4;
};

struct RandomGrayscale {
  double prob = 0.2;
};

struct GaussianBlur {
  double prob = 0.5;
  double sigma_min = 0.1, sigma_max = 2.0;
  int kernel = 3;
};

struct HorizontalFlip {
  double prob = 0.5;
};

struct Normalize {
  std::array<double, 3> mean = {0.0, 0.0, 0.0};
  std::array<double, 3> stddev = {1.0, 1.0, 1.0};
};

struct Resize {
  int size = 0;
};

struct CenterCrop {
  int size = 0;
};

using Stage = std::variant<RandomResizedCrop, ColorJitter, RandomGrayscale,
                           GaussianBlur, HorizontalFlip, Normalize, Resize,
                           CenterCrop>;

/// Ordered stochastic pipeline. Every sample of every view draws its own
/// RNG stream from (seed, id, view), so parallel and serial application
/// agree sample for sample.
struct AugmentPolicy {
  std::vector<Stage> stages;
  std::uint64_t seed = 0;

  void validate() const {
    for (const auto& st : stages) {
      if (auto* c = std::get_if<RandomResizedCrop>(&st)) {
        if (!(c->scale_min > 0.0 && c->scale_max <= 1.0 &&
              c->scale_min <= c->scale_max))
          throw ArgumentError("crop scale range must be within (0,1]");
        if (c->aspect_min <= 0 || c->aspect_min > c->aspect_max)
          throw ArgumentError("bad crop aspect range");
      } else if (auto* j = std::get_if<ColorJitter>(&st)) {
        if (j->prob < 0 || j->prob > 1)
          throw ArgumentError("jitter prob out of [0,1]");
      } else if (auto* g = std::get_if<RandomGrayscale>(&st)) {
        if (g->prob < 0 || g->prob > 1)
          throw ArgumentError("grayscale prob out of [0,1]");
      } else if (auto* bl = std::get_if<GaussianBlur>(&st)) {
        if (bl->prob < 0 || bl->prob > 1)
          throw ArgumentError("blur prob out of [0,1]");
        if (bl->sigma_min <= 0 || bl->sigma_min > bl->sigma_max)
          throw ArgumentError("bad blur sigma range");
      } else if (auto* f = std::get_if<HorizontalFlip>(&st)) {
        if (f->prob < 0 || f->prob > 1)
          throw ArgumentError("flip prob out of [0,1]");
      }
    }
  }
};

namespace detail {

/// One CHW image while it moves through the pipeline.
struct WorkImage {
  int c = 0, h = 0, w = 0;
  std::vector<float> px;

  float at(int ch, int y, int x) const {
    return px[(std::size_t(ch) * h + y) * w + x];
  }
  float& at(int ch, int y, int x) {
    return px[(std::size_t(ch) * h + y) * w + x];
  }
};

inline constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

inline void bilinear_resize(const WorkImage& src, WorkImage& dst, int oh,
                            int ow) {
  dst.c = src.c;
  dst.h = oh;
  dst.w = ow;
  dst.px.assign(std::size_t(src.c) * oh * ow, 0.0f);
  const double sy = double(src.h) / oh;
  const double sx = double(src.w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, src.h - 1);
    int y1c = std::clamp(y0 + 1, 0, src.h - 1);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, src.w - 1);
      int x1c = std::clamp(x0 + 1, 0, src.w - 1);
      for (int ch = 0; ch < src.c; ++ch) {
        double v = (1 - wy) * ((1 - wx) * src.at(ch, y0c, x0c) +
                               wx * src.at(ch, y0c, x1c)) +
                   wy * ((1 - wx) * src.at(ch, y1c, x0c) +
                         wx * src.at(ch, y1c, x1c));
        dst.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

inline void crop(const WorkImage& src, WorkImage& dst, int top, int left,
                 int ch_, int cw) {
  dst.c = src.c;
  dst.h = ch_;
  dst.w = cw;
  dst.px.resize(std::size_t(src.c) * ch_ * cw);
  for (int ch = 0; ch < src.c; ++ch)
    for (int y = 0; y < ch_; ++y)
      for (int x = 0; x < cw; ++x)
        dst.at(ch, y, x) = src.at(ch, top + y, left + x);
}

inline void apply_rrc(WorkImage& img, const RandomResizedCrop& cfg, Rng& rng) {
  const int H = img.h, W = img.w;
  const int out = cfg.out_size > 0 ? cfg.out_size : W;
  if (out > std::max(H, W) && cfg.scale_max >= 1.0) {
    // growing is fine (resize), shrinking crop larger than image is not
  }
  int ch = H, cw = W, top = 0, left = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    double area = rng.uniform(cfg.scale_min, cfg.scale_max) * H * W;
    double log_ratio = rng.uniform(std::log(cfg.aspect_min),
                                   std::log(cfg.aspect_max));
    double ratio = std::exp(log_ratio);
    int cw_try = static_cast<int>(std::lround(std::sqrt(area * ratio)));
    int ch_try = static_cast<int>(std::lround(std::sqrt(area / ratio)));
    if (cw_try >= 1 && ch_try >= 1 && cw_try <= W && ch_try <= H) {
      cw = cw_try;
      ch = ch_try;
      top = static_cast<int>(rng.uniform_int(0, H - ch));
      left = static_cast<int>(rng.uniform_int(0, W - cw));
      found = true;
    }
  }
  if (ch == H && cw == W && out == W && out == H) {
    if (top == 0 && left == 0) return;  // exact identity, bitwise
  }
  WorkImage cropped;
  crop(img, cropped, top, left, ch, cw);
  if (ch == out && cw == out) {
    img = std::move(cropped);
    return;
  }
  WorkImage resized;
  bilinear_resize(cropped, resized, out, out);
  img = std::move(resized);
}

inline void to_grayscale(WorkImage& img) {
  if (img.c != 3) return;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float g = static_cast<float>(kLumaR * img.at(0, y, x) +
                                   kLumaG * img.at(1, y, x) +
                                   kLumaB * img.at(2, y, x));
      img.at(0, y, x) = img.at(1, y, x) = img.at(2, y, x) = g;
    }
}

inline void apply_jitter(WorkImage& img, const ColorJitter& cfg, Rng& rng) {
  // torchvision-style: each component strength-sampled, applied in a
  // shuffled order, clipped after each step
  std::array<int, 3> order = {0, 1, 2};
  rng.shuffle(order.begin(), order.end());
  double fb = rng.uniform(std::max(0.0, 1 - cfg.brightness),
                          1 + cfg.brightness);
  double fc = rng.uniform(std::max(0.0, 1 - cfg.contrast), 1 + cfg.contrast);
  double fs = rng.uniform(std::max(0.0, 1 - cfg.saturation),
                          1 + cfg.saturation);
  for (int op : order) {
    if (op == 0) {  // brightness
      for (auto& v : img.px)
        v = static_cast<float>(std::clamp(v * fb, 0.0, 1.0));
    } else if (op == 1) {  // contrast about the mean luma
      double mean = 0;
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
          mean += kLumaR * img.at(0, y, x) + kLumaG * img.at(1, y, x) +
                  kLumaB * img.at(2, y, x);
      mean /= double(img.h) * img.w;
      for (auto& v : img.px)
        v = static_cast<float>(
            std::clamp(mean + (v - mean) * fc, 0.0, 1.0));
    } else {  // saturation: blend with the gray image
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
          double g = kLumaR * img.at(0, y, x) + kLumaG * img.at(1, y, x) +
                     kLumaB * img.at(2, y, x);
          for (int ch = 0; ch < 3; ++ch)
            img.at(ch, y, x) = static_cast<float>(
                std::clamp(g + (img.at(ch, y, x) - g) * fs, 0.0, 1.0));
        }
    }
  }
}

inline void apply_blur(WorkImage& img, const GaussianBlur& cfg, Rng& rng) {
  double sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
  const int k = cfg.kernel;
  const int r = k / 2;
  std::vector<double> kern(std::size_t(k), 0.0);
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    double d = i - r;
    kern[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += kern[i];
  }
  for (auto& v : kern) v /= sum;

  std::vector<float> tmp(img.px.size());
  // horizontal pass, replicate edges
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double acc = 0;
        for (int i = 0; i < k; ++i) {
          int xx = std::clamp(x + i - r, 0, img.w - 1);
          acc += kern[i] * img.at(ch, y, xx);
        }
        tmp[(std::size_t(ch) * img.h + y) * img.w + x] =
            static_cast<float>(acc);
      }
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double acc = 0;
        for (int i = 0; i < k; ++i) {
          int yy = std::clamp(y + i - r, 0, img.h - 1);
          acc += kern[i] * tmp[(std::size_t(ch) * img.h + yy) * img.w + x];
        }
        img.at(ch, y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
}

inline void apply_flip(WorkImage& img) {
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w / 2; ++x)
        std::swap(img.at(ch, y, x), img.at(ch, y, img.w - 1 - x));
}

inline void apply_stage(WorkImage& img, const Stage& st, Rng& rng) {
  if (auto* c = std::get_if<RandomResizedCrop>(&st)) {
    apply_rrc(img, *c, rng);
  } else if (auto* j = std::get_if<ColorJitter>(&st)) {
    if (rng.uniform() < j->prob) apply_jitter(img, *j, rng);
  } else if (auto* g = std::get_if<RandomGrayscale>(&st)) {
    if (rng.uniform() < g->prob) to_grayscale(img);
  } else if (auto* bl = std::get_if<GaussianBlur>(&st)) {
    if (rng.uniform() < bl->prob) apply_blur(img, *bl, rng);
  } else if (auto* f = std::get_if<HorizontalFlip>(&st)) {
    if (rng.uniform() < f->prob) apply_flip(img);
  } else if (auto* nm = std::get_if<Normalize>(&st)) {
    for (int ch = 0; ch < img.c; ++ch) {
      double mean = nm->mean[std::size_t(std::min(ch, 2))];
      double sd = nm->stddev[std::size_t(std::min(ch, 2))];
      if (mean == 0.0 && sd == 1.0) continue;
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
          img.at(ch, y, x) =
              static_cast<float>((img.at(ch, y, x) - mean) / sd);
    }
  } else if (auto* rz = std::get_if<Resize>(&st)) {
    if (rz->size != img.h || rz->size != img.w) {
      WorkImage dst;
      bilinear_resize(img, dst, rz->size, rz->size);
      img = std::move(dst);
    }
  } else if (auto* cc = std::get_if<CenterCrop>(&st)) {
    if (cc->size > img.h || cc->size > img.w)
      throw ArgumentError("center crop larger than image");
    if (cc->size != img.h || cc->size != img.w) {
      WorkImage dst;
      crop(img, dst, (img.h - cc->size) / 2, (img.w - cc->size) / 2, cc->size,
           cc->size);
      img = std::move(dst);
    }
  }
}

inline WorkImage slice(const ImageBatch& b, int i) {
  WorkImage img;
  img.c = b.c();
  img.h = b.h();
  img.w = b.w();
  img.px.resize(std::size_t(img.c) * img.h * img.w);
  const float* src =
      b.pixels.data() + std::size_t(i) * img.c * img.h * img.w;
  std::copy(src, src + img.px.size(), img.px.begin());
  return img;
}

}  // namespace detail

/// Output spatial size of applying `policy` to images of side `in_size`.
inline int policy_out_size(const AugmentPolicy& policy, int in_size) {
  int size = in_size;
  for (const auto& st : policy.stages) {
    if (auto* c = std::get_if<RandomResizedCrop>(&st)) {
      if (c->out_size > 0) size = c->out_size;
    } else if (auto* rz = std::get_if<Resize>(&st)) {
      size = rz->size;
    } else if (auto* cc = std::get_if<CenterCrop>(&st)) {
      if (cc->size > size)
        throw ArgumentError("center crop larger than image");
      size = cc->size;
    }
  }
  return size;
}

/// Draw `views` independent augmentations of every sample. Outputs keep
/// N and C; H and W become the policy's declared output size.
inline std::vector<ImageBatch> apply_policy(const AugmentPolicy& policy,
                                            const ImageBatch& batch,
                                            int views) {
  if (views < 1) throw ArgumentError("apply_policy: views must be >= 1");
  policy.validate();
  const int out_size = policy_out_size(policy, batch.w());

  std::vector<ImageBatch> out(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) {
    ImageBatch& ob = out[std::size_t(v)];
    ob.pixels = Tensor<float>({batch.n(), batch.c(), out_size, out_size});
    ob.labels = batch.labels;
    ob.ids = batch.ids;
    ob.num_classes = batch.num_classes;
    for (int i = 0; i < batch.n(); ++i) {
      Rng rng(derive_seed(derive_seed(policy.seed, batch.ids[std::size_t(i)]),
                          "view" + std::to_string(v)));
      detail::WorkImage img = detail::slice(batch, i);
      for (const auto& st : policy.stages) detail::apply_stage(img, st, rng);
      if (img.h != out_size || img.w != out_size)
        throw StateError("apply_policy: stage output size mismatch");
      float* dst = ob.pixels.data() +
                   std::size_t(i) * batch.c() * out_size * out_size;
      std::copy(img.px.begin(), img.px.end(), dst);
    }
  }
  return out;
}

/// Knobs for the three named policies. The blur range is a desk-scale
/// guess recorded in config, not fixed by the training recipe.
struct PolicyKnobs {
  double crop_min = 0.8;        // pretrain crop scale floor
  double probe_crop_min = 1.0;  // supervised/probe crop; 1.0 = identity
  double jitter_prob = 0.8;
  double jitter_strength = 0.2;
  double gray_prob = 0.1;
  double blur_prob = 0.2;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  double flip_prob = 0.5;
};

/// Pretrain: crop, jitter, grayscale, blur, flip, normalize.
inline AugmentPolicy pretrain_policy(std::uint64_t seed,
                                     const PolicyKnobs& k = {}) {
  AugmentPolicy p;
  p.seed = seed;
  p.stages = {RandomResizedCrop{k.crop_min, 1.0, 0.75, 4.0 / 3.0, 0},
              ColorJitter{k.jitter_prob, k.jitter_strength, k.jitter_strength,
                          k.jitter_strength},
              RandomGrayscale{k.gray_prob},
              GaussianBlur{k.blur_prob, k.blur_sigma_min, k.blur_sigma_max, 3},
              HorizontalFlip{k.flip_prob},
              Normalize{}};
  return p;
}

/// Linear-probe / supervised: crop, flip, normalize. A crop_min of 1.0
/// means the desk-scale identity crop (train crop == image size), so the
/// stage is dropped.
inline AugmentPolicy linprobe_policy(std::uint64_t seed,
                                     const PolicyKnobs& k = {}) {
  AugmentPolicy p;
  p.seed = seed;
  if (k.probe_crop_min < 1.0)
    p.stages.push_back(
        RandomResizedCrop{k.probe_crop_min, 1.0, 0.75, 4.0 / 3.0, 0});
  p.stages.push_back(HorizontalFlip{k.flip_prob});
  p.stages.push_back(Normalize{});
  return p;
}

/// Test: resize, center-crop, normalize. Desk-scale sizes keep resize ==
/// crop == input, so this is deterministic and shape preserving.
inline AugmentPolicy test_policy(int image_size) {
  AugmentPolicy p;
  p.stages = {Resize{image_size}, CenterCrop{image_size}, Normalize{}};
  return p;
}

// --- standalone augmentations ------------------------------------------

/// Exactly one axis-aligned square of side `hole_size` zeroed per image
/// (clipped at borders); all other pixels unchanged.
inline ImageBatch cutout(const ImageBatch& batch, int hole_size, Rng& rng) {
  if (hole_size > batch.h() || hole_size > batch.w())
    throw ArgumentError("cutout: hole larger than image");
  if (hole_size < 0) throw ArgumentError("cutout: negative hole");
  ImageBatch out = batch;
  if (hole_size == 0) return out;
  for (int i = 0; i < batch.n(); ++i) {
    int cy = static_cast<int>(rng.uniform_int(0, batch.h() - 1));
    int cx = static_cast<int>(rng.uniform_int(0, batch.w() - 1));
    int top = cy - hole_size / 2;
    int left = cx - hole_size / 2;
    for (int y = std::max(0, top); y < std::min(batch.h(), top + hole_size);
         ++y)
      for (int x = std::max(0, left);
           x < std::min(batch.w(), left + hole_size); ++x)
        for (int c = 0; c < batch.c(); ++c) out.pixels.at4(i, c, y, x) = 0.0f;
  }
  return out;
}

/// Pixels plus per-sample label pairs (y_a, y_b, lambda) with weights that
/// sum to one; consumed by the mixed cross entropy.
struct MixedBatch {
  Tensor<float> pixels;
  std::vector<loss::MixPair> pairs;
  std::vector<std::string> ids;
  int num_classes = 0;
};

/// Convex pixel mix with lambda ~ Beta(alpha, alpha) shared by the batch
/// and partners drawn by random permutation. `fixed_lambda` pins lambda
/// for tests.
inline MixedBatch mixup(const ImageBatch& batch, double alpha, Rng& rng,
                        std::optional<double> fixed_lambda = std::nullopt) {
  if (alpha <= 0.0) throw ArgumentError("mixup: alpha must be > 0");
  const int N = batch.n();
  double lam = fixed_lambda ? *fixed_lambda : rng.beta(alpha, alpha);
  std::vector<int> partner(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) partner[std::size_t(i)] = i;
  rng.shuffle(partner.begin(), partner.end());

  MixedBatch out;
  out.pixels = Tensor<float>(batch.pixels.shape);
  out.ids = batch.ids;
  out.num_classes = batch.num_classes;
  out.pairs.resize(static_cast<std::size_t>(N));
  const std::size_t stride =
      std::size_t(batch.c()) * batch.h() * batch.w();
  for (int i = 0; i < N; ++i) {
    int j = partner[std::size_t(i)];
    const float* a = batch.pixels.data() + std::size_t(i) * stride;
    const float* b = batch.pixels.data() + std::size_t(j) * stride;
    float* dst = out.pixels.data() + std::size_t(i) * stride;
    for (std::size_t k = 0; k < stride; ++k)
      dst[k] = static_cast<float>(lam * a[k] + (1.0 - lam) * b[k]);
    out.pairs[std::size_t(i)] = {batch.labels[std::size_t(i)],
                                 batch.labels[std::size_t(j)], lam};
  }
  return out;
}

/// Rectangle swap: a patch of area fraction (1 - lambda) is copied from
/// the partner; the center is clamped so the patch always fits, and the
/// realized area fraction is recorded as lambda.
inline MixedBatch cutmix(const ImageBatch& batch, double alpha, Rng& rng,
                         std::optional<double> fixed_lambda = std::nullopt) {
  if (alpha <= 0.0) throw ArgumentError("cutmix: alpha must be > 0");
  const int N = batch.n(), H = batch.h(), W = batch.w(), C = batch.c();
  double lam = fixed_lambda ? *fixed_lambda : rng.beta(alpha, alpha);
  int rh = static_cast<int>(std::lround(H * std::sqrt(1.0 - lam)));
  int rw = static_cast<int>(std::lround(W * std::sqrt(1.0 - lam)));
  rh = std::clamp(rh, 0, H);
  rw = std::clamp(rw, 0, W);

  std::vector<int> partner(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) partner[std::size_t(i)] = i;
  rng.shuffle(partner.begin(), partner.end());

  MixedBatch out;
  out.pixels = batch.pixels;
  out.ids = batch.ids;
  out.num_classes = batch.num_classes;
  out.pairs.resize(static_cast<std::size_t>(N));
  double lam_real = 1.0 - double(rh) * rw / (double(H) * W);
  for (int i = 0; i < N; ++i) {
    int j = partner[std::size_t(i)];
    int top = rh < H ? static_cast<int>(rng.uniform_int(0, H - rh)) : 0;
    int left = rw < W ? static_cast<int>(rng.uniform_int(0, W - rw)) : 0;
    for (int c = 0; c < C; ++c)
      for (int y = top; y < top + rh; ++y)
        for (int x = left; x < left + rw; ++x)
          out.pixels.at4(i, c, y, x) = batch.pixels.at4(j, c, y, x);
    out.pairs[std::size_t(i)] = {batch.labels[std::size_t(i)],
                                 batch.labels[std::size_t(j)], lam_real};
  }
  return out;
}

/// With probability `prob` per image, add iid N(0, sigma^2) noise and clip
/// to [0,1]; otherwise leave the image untouched.
inline ImageBatch gaussian_noise(const ImageBatch& batch, double sigma,
                                 double prob, Rng& rng) {
  if (sigma < 0.0) throw ArgumentError("gaussian_noise: sigma must be >= 0");
  ImageBatch out = batch;
  if (sigma == 0.0 || prob <= 0.0) return out;
  const std::size_t stride =
      std::size_t(batch.c()) * batch.h() * batch.w();
  for (int i = 0; i < batch.n(); ++i) {
    if (rng.uniform() >= prob) continue;
    float* px = out.pixels.data() + std::size_t(i) * stride;
    for (std::size_t k = 0; k < stride; ++k)
      px[k] = static_cast<float>(
          std::clamp(double(px[k]) + rng.normal(0.0, sigma), 0.0, 1.0));
  }
  return out;
}

}  // namespace poisonforge::augment
