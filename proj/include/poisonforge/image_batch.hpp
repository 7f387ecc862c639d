#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "poisonforge/error.hpp"
#include "poisonforge/tensor.hpp"

namespace poisonforge::data {

enum class Norm { Linf, L2, L0, Unbounded };

inline const char* norm_name(Norm n) {
  switch (n) {
    case Norm::Linf: return "linf";
    case Norm::L2: return "l2";
    case Norm::L0: return "l0";
    case Norm::Unbounded: return "unbounded";
  }
  return "?";
}

inline Norm norm_from_name(const std::string& s) {
  if (s == "linf") return Norm::Linf;
  if (s == "l2") return Norm::L2;
  if (s == "l0") return Norm::L0;
  if (s == "unbounded") return Norm::Unbounded;
  throw ArgumentError("unknown norm name '" + s + "'");
}

/// Norm family plus radius in pixel scale (e.g. 8/255). Unbounded admits
/// any distortion and is used by the filter-based CUDA generator.
struct PerturbationBudget {
  Norm norm = Norm::Linf;
  double epsilon = 8.0 / 255.0;

  void validate() const {
    if (epsilon < 0.0) throw ArgumentError("budget epsilon must be >= 0");
  }
};

/// N images as dense float arrays in [0,1] with integer class labels and
/// stable per-sample string ids. The universal currency of all operations.
struct ImageBatch {
  Tensor<float> pixels;  // N,C,H,W
  std::vector<int> labels;
  std::vector<std::string> ids;
  int num_classes = 0;

  int n() const { return pixels.ndim() == 4 ? pixels.dim(0) : 0; }
  int c() const { return pixels.dim(1); }
  int h() const { return pixels.dim(2); }
  int w() const { return pixels.dim(3); }

  void validate() const {
    if (pixels.ndim() != 4)
      throw ArgumentError("ImageBatch: pixels must be N,C,H,W, got " +
                          pixels.shape_str());
    const int N = pixels.dim(0);
    if (static_cast<int>(labels.size()) != N)
      throw ArgumentError("ImageBatch: labels length != N");
    if (static_cast<int>(ids.size()) != N)
      throw ArgumentError("ImageBatch: ids length != N");
    if (num_classes < 1) throw ArgumentError("ImageBatch: num_classes < 1");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw ArgumentError("ImageBatch: label " + std::to_string(y) +
                            " out of [0," + std::to_string(num_classes) + ")");
    for (float p : pixels.v)
      if (!(p >= 0.0f && p <= 1.0f))
        throw ArgumentError("ImageBatch: pixel out of [0,1]");
    std::set<std::string> seen(ids.begin(), ids.end());
    if (seen.size() != ids.size())
      throw ArgumentError("ImageBatch: duplicate sample ids");
  }

  /// Subset along the sample axis.
  ImageBatch select(const std::vector<int>& rows) const {
    ImageBatch out;
    out.pixels = pixels.gather_rows(rows);
    out.num_classes = num_classes;
    out.labels.reserve(rows.size());
    out.ids.reserve(rows.size());
    for (int r : rows) {
      out.labels.push_back(labels[static_cast<std::size_t>(r)]);
      out.ids.push_back(ids[static_cast<std::size_t>(r)]);
    }
    return out;
  }
};

/// Distance between sample i of two aligned batches under a norm family.
/// L0 counts whole pixels: spatial sites where any channel differs.
inline double sample_distance(const ImageBatch& a, const ImageBatch& b,
                              int i, Norm norm) {
  const int C = a.c(), H = a.h(), W = a.w();
  double linf = 0.0, l2sq = 0.0;
  long l0 = 0;
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      bool site_differs = false;
      for (int ch = 0; ch < C; ++ch) {
        double d = static_cast<double>(a.pixels.at4(i, ch, h, w)) -
                   static_cast<double>(b.pixels.at4(i, ch, h, w));
        if (d != 0.0) site_differs = true;
        double ad = std::fabs(d);
        if (ad > linf) linf = ad;
        l2sq += d * d;
      }
      if (site_differs) ++l0;
    }
  switch (norm) {
    case Norm::Linf: return linf;
    case Norm::L2: return std::sqrt(l2sq);
    case Norm::L0: return static_cast<double>(l0);
    case Norm::Unbounded: return linf;  // reported, never constrained
  }
  return 0.0;
}

/// Paired clean/poisoned images with crafting provenance. Labels and ids
/// are shared; availability poisons never change labels.
struct PoisonedDataset {
  ImageBatch clean;
  ImageBatch poisoned;
  PerturbationBudget budget;
  std::string generator_tag;
  std::map<std::string, std::string> generator_config;

  /// Structural problems raise ArgumentError; a violated budget raises
  /// IntegrityError naming the first offending sample id. `tol` absorbs
  /// float32 round-off in stored perturbations.
  void validate(double tol = 1e-6) const {
    clean.validate();
    poisoned.validate();
    budget.validate();
    if (!clean.pixels.same_shape(poisoned.pixels))
      throw ArgumentError("PoisonedDataset: clean/poisoned shape mismatch");
    if (clean.ids != poisoned.ids)
      throw ArgumentError("PoisonedDataset: clean/poisoned ids differ");
    if (clean.labels != poisoned.labels)
      throw ArgumentError("PoisonedDataset: labels differ between clean and "
                          "poisoned (availability poisons preserve labels)");
    if (budget.norm == Norm::Unbounded) return;
    for (int i = 0; i < clean.n(); ++i) {
      double d = sample_distance(clean, poisoned, i, budget.norm);
      if (d > budget.epsilon + tol)
        throw IntegrityError("PoisonedDataset: sample '" + clean.ids[i] +
                             "' violates " + norm_name(budget.norm) +
                             " budget: distance " + std::to_string(d) +
                             " > epsilon " + std::to_string(budget.epsilon));
    }
  }
};

}  // namespace poisonforge::data
