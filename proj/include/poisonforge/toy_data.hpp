#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "poisonforge/image_batch.hpp"
#include "poisonforge/rng.hpp"

namespace poisonforge::data {

/// Knobs for the synthetic toy dataset. The class-keyed signal is a colored
/// rectangle in a class-indexed grid cell; per-sample variation comes from
/// position jitter, uncorrelated distractor rectangles, and pixel noise.
/// The defaults keep the genuine features linearly learnable while leaving
/// them hard enough that crafted shortcuts can win the race for them.
struct ToyRecipe {
  double noise_sigma = 0.08;
  int position_jitter = 2;
  int distractors = 2;
  double background = 0.5;
  double rect_contrast = 0.65;  // scale of palette deviation from background
  std::string name = "toy";
};

namespace detail {
inline std::array<double, 3> toy_palette(int k) {
  static const std::array<double, 3> table[] = {
      {0.85, 0.25, 0.25}, {0.25, 0.85, 0.25}, {0.25, 0.25, 0.85},
      {0.85, 0.85, 0.25}, {0.85, 0.25, 0.85}, {0.25, 0.85, 0.85},
      {0.75, 0.55, 0.20}, {0.20, 0.55, 0.75}, {0.55, 0.75, 0.20},
      {0.60, 0.30, 0.60},
  };
  return table[static_cast<std::size_t>(k) % (sizeof(table) / sizeof(table[0]))];
}

inline void fill_rect(Tensor<float>& px, int n, int top, int left, int height,
                      int width, const std::array<double, 3>& color) {
  const int H = px.dim(2), W = px.dim(3);
  int b = std::min(top + height, H);
  int r = std::min(left + width, W);
  for (int c = 0; c < 3; ++c)
    for (int y = std::max(top, 0); y < b; ++y)
      for (int x = std::max(left, 0); x < r; ++x)
        px.at4(n, c, y, x) = static_cast<float>(color[c]);
}
}  // namespace detail

/// Synthetic stand-in for the image benchmarks: `num_classes * per_class`
/// RGB images of side `image_size`, grouped by class, deterministic given
/// seed. Ids are "<name>:<index>" with zero-based insertion indices.
inline ImageBatch make_toy_dataset(int num_classes, int per_class,
                                   int image_size, std::uint64_t seed,
                                   const ToyRecipe& recipe = {}) {
  if (num_classes < 2) throw ArgumentError("make_toy_dataset: num_classes < 2");
  if (image_size < 8) throw ArgumentError("make_toy_dataset: image_size < 8");
  if (per_class < 2) throw ArgumentError("make_toy_dataset: per_class < 2");

  const int N = num_classes * per_class;
  ImageBatch out;
  out.pixels = Tensor<float>({N, 3, image_size, image_size});
  out.num_classes = num_classes;
  out.labels.resize(static_cast<std::size_t>(N));
  out.ids.resize(static_cast<std::size_t>(N));

  const int grid = static_cast<int>(std::ceil(std::sqrt(double(num_classes))));
  const int cell = image_size / grid;
  const int rect = std::max(2, (cell * 3) / 5);

  Rng rng(derive_seed(seed, "toy." + recipe.name));
  int idx = 0;
  for (int k = 0; k < num_classes; ++k) {
    std::array<double, 3> base = detail::toy_palette(k);
    for (int c = 0; c < 3; ++c)
      base[c] = recipe.background +
                (base[c] - recipe.background) * recipe.rect_contrast;
    const int cy = (k / grid) * cell;
    const int cx = (k % grid) * cell;
    for (int s = 0; s < per_class; ++s, ++idx) {
      out.labels[idx] = k;
      out.ids[idx] = recipe.name + ":" + std::to_string(idx);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image_size; ++y)
          for (int x = 0; x < image_size; ++x)
            out.pixels.at4(idx, c, y, x) =
                static_cast<float>(recipe.background);

      // uncorrelated clutter first so the class rectangle stays on top;
      // distractors are gray so they perturb luminance, not the class hue
      for (int d = 0; d < recipe.distractors; ++d) {
        int dh = static_cast<int>(rng.uniform_int(2, std::max(2, cell)));
        int dw = static_cast<int>(rng.uniform_int(2, std::max(2, cell)));
        int dy = static_cast<int>(rng.uniform_int(0, image_size - 2));
        int dx = static_cast<int>(rng.uniform_int(0, image_size - 2));
        double lum = rng.uniform(0.2, 0.8);
        detail::fill_rect(out.pixels, idx, dy, dx, dh, dw, {lum, lum, lum});
      }

      int jy = 0, jx = 0;
      if (recipe.position_jitter > 0) {
        jy = static_cast<int>(
            rng.uniform_int(-recipe.position_jitter, recipe.position_jitter));
        jx = static_cast<int>(
            rng.uniform_int(-recipe.position_jitter, recipe.position_jitter));
      }
      int top = std::clamp(cy + (cell - rect) / 2 + jy, 0, image_size - rect);
      int left = std::clamp(cx + (cell - rect) / 2 + jx, 0, image_size - rect);
      detail::fill_rect(out.pixels, idx, top, left, rect, rect, base);

      if (recipe.noise_sigma > 0.0) {
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
              double p = out.pixels.at4(idx, c, y, x) +
                         rng.normal(0.0, recipe.noise_sigma);
              out.pixels.at4(idx, c, y, x) =
                  static_cast<float>(std::clamp(p, 0.0, 1.0));
            }
      }
    }
  }
  out.validate();
  return out;
}

}  // namespace poisonforge::data
