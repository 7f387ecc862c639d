// Test-only oracles, independent of the implementation paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "poisonforge/rng.hpp"
#include "poisonforge/tensor.hpp"

namespace oracle {

using poisonforge::Rng;
using poisonforge::Tensor;

/// Central finite differences of a scalar functional of one tensor.
template <typename T>
Tensor<T> finite_difference(std::function<double(const Tensor<T>&)> f,
                            Tensor<T> x, double h = 1e-4) {
  Tensor<T> g(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    T orig = x.v[i];
    x.v[i] = static_cast<T>(orig + h);
    double up = f(x);
    x.v[i] = static_cast<T>(orig - h);
    double dn = f(x);
    x.v[i] = orig;
    g.v[i] = static_cast<T>((up - dn) / (2.0 * h));
  }
  return g;
}

/// Whole-vector relative error between two gradients.
template <typename T>
double rel_error(const Tensor<T>& a, const Tensor<T>& b) {
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    double d = double(a.v[i]) - double(b.v[i]);
    num += d * d;
    da += double(a.v[i]) * double(a.v[i]);
    db += double(b.v[i]) * double(b.v[i]);
  }
  double denom = std::max(std::sqrt(da), std::sqrt(db));
  if (denom == 0.0) return std::sqrt(num);
  return std::sqrt(num) / denom;
}

/// Brute-force symmetrized InfoNCE with both-view negatives: explicit
/// per-anchor softmax over the 2N-1 candidates, rows normalized first.
template <typename T>
double info_nce_bruteforce(const Tensor<T>& a, const Tensor<T>& b,
                           double tau) {
  const int N = a.dim(0), P = a.dim(1);
  const int M = 2 * N;
  std::vector<std::vector<double>> z;
  z.assign(static_cast<std::size_t>(M),
           std::vector<double>(static_cast<std::size_t>(P), 0.0));
  for (int i = 0; i < M; ++i) {
    const Tensor<T>& src = i < N ? a : b;
    int r = i < N ? i : i - N;
    double nn = 0;
    for (int j = 0; j < P; ++j)
      nn += double(src.at2(r, j)) * double(src.at2(r, j));
    nn = std::max(std::sqrt(nn), 1e-12);
    for (int j = 0; j < P; ++j) z[i][j] = double(src.at2(r, j)) / nn;
  }
  auto dot = [&](int i, int j) {
    double s = 0;
    for (int k = 0; k < P; ++k) s += z[i][k] * z[j][k];
    return s;
  };
  double total = 0;
  for (int i = 0; i < M; ++i) {
    int pos = i < N ? i + N : i - N;
    double denom = 0;
    for (int j = 0; j < M; ++j)
      if (j != i) denom += std::exp(dot(i, j) / tau);
    total += -std::log(std::exp(dot(i, pos) / tau) / denom);
  }
  return total / M;
}

/// Plain softmax-regression trained with full-batch gradient descent on
/// flattened pixels; returns final train accuracy. Used to certify that a
/// dataset is linearly learnable.
inline double linear_probe_accuracy(const Tensor<float>& pixels,
                                    const std::vector<int>& labels,
                                    int num_classes, int steps,
                                    double lr = 0.5) {
  const int N = pixels.dim(0);
  const int D = static_cast<int>(pixels.numel() / std::max(N, 1));
  std::vector<double> w(std::size_t(num_classes) * D, 0.0);
  std::vector<double> bias(std::size_t(num_classes), 0.0);
  std::vector<double> vw(w.size(), 0.0), vb(bias.size(), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(num_classes), 0.0);
  std::vector<double> gw(w.size(), 0.0), gb(bias.size(), 0.0);

  for (int s = 0; s < steps; ++s) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int n = 0; n < N; ++n) {
      const float* x = pixels.data() + std::size_t(n) * D;
      double mx = -1e300;
      for (int k = 0; k < num_classes; ++k) {
        double acc = bias[k];
        const double* wr = w.data() + std::size_t(k) * D;
        for (int d = 0; d < D; ++d) acc += wr[d] * x[d];
        logits[k] = acc;
        mx = std::max(mx, acc);
      }
      double denom = 0;
      for (int k = 0; k < num_classes; ++k) denom += std::exp(logits[k] - mx);
      for (int k = 0; k < num_classes; ++k) {
        double p = std::exp(logits[k] - mx) / denom;
        double g = (p - (k == labels[std::size_t(n)] ? 1.0 : 0.0)) / N;
        double* gwr = gw.data() + std::size_t(k) * D;
        for (int d = 0; d < D; ++d) gwr[d] += g * x[d];
        gb[k] += g;
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      vw[i] = 0.9 * vw[i] + gw[i];
      w[i] -= lr * vw[i];
    }
    for (std::size_t i = 0; i < bias.size(); ++i) {
      vb[i] = 0.9 * vb[i] + gb[i];
      bias[i] -= lr * vb[i];
    }
  }

  int correct = 0;
  for (int n = 0; n < N; ++n) {
    const float* x = pixels.data() + std::size_t(n) * D;
    int best = 0;
    double bestv = -1e300;
    for (int k = 0; k < num_classes; ++k) {
      double acc = bias[k];
      const double* wr = w.data() + std::size_t(k) * D;
      for (int d = 0; d < D; ++d) acc += wr[d] * x[d];
      if (acc > bestv) {
        bestv = acc;
        best = k;
      }
    }
    if (best == labels[std::size_t(n)]) ++correct;
  }
  return N > 0 ? double(correct) / N : 0.0;
}

/// Exhaustive cosine KNN with the nearest-first tie rule: rank the whole
/// pool, vote among the top k, and on vote ties pick the tied class that
/// appears earliest in the ranking.
inline double knn_exhaustive(const Tensor<float>& train_reps,
                             const std::vector<int>& train_labels,
                             const Tensor<float>& test_reps,
                             const std::vector<int>& test_labels, int k) {
  const int n_train = train_reps.dim(0);
  const int n_test = test_reps.dim(0);
  const int d = train_reps.dim(1);
  int correct = 0;
  for (int t = 0; t < n_test; ++t) {
    std::vector<std::pair<double, int>> sims;
    for (int i = 0; i < n_train; ++i) {
      double na = 0, nb = 0, dot = 0;
      for (int j = 0; j < d; ++j) {
        double a = test_reps.at2(t, j), b = train_reps.at2(i, j);
        na += a * a;
        nb += b * b;
        dot += a * b;
      }
      double denom = std::sqrt(na) * std::sqrt(nb);
      sims.push_back({denom > 1e-24 ? dot / denom : 0.0, i});
    }
    std::stable_sort(sims.begin(), sims.end(),
                     [](const auto& a, const auto& b) {
                       return a.first > b.first;
                     });
    std::map<int, int> votes;
    for (int j = 0; j < k; ++j)
      ++votes[train_labels[std::size_t(sims[std::size_t(j)].second)]];
    int best = 0;
    for (const auto& [c, v] : votes) best = std::max(best, v);
    int pred = -1;
    for (int j = 0; j < k && pred < 0; ++j) {
      int cls = train_labels[std::size_t(sims[std::size_t(j)].second)];
      if (votes[cls] == best) pred = cls;
    }
    if (pred == test_labels[std::size_t(t)]) ++correct;
  }
  return n_test > 0 ? double(correct) / n_test : 0.0;
}

/// Exhaustive corner search for the local Lipschitz ratio of a single
/// sample: max over all 2^d corners of ||f(x') - f(x)||_1 / radius.
/// Only usable for tiny pixel counts.
template <typename Forward>
double lipschitz_corner_max(Forward&& rep_of, const Tensor<float>& x,
                            double radius) {
  const std::size_t d = x.v.size();
  if (d > 20) throw std::runtime_error("corner search: too many pixels");
  Tensor<float> base = rep_of(x);
  double best = 0;
  for (std::size_t mask = 0; mask < (std::size_t(1) << d); ++mask) {
    Tensor<float> xp = x;
    for (std::size_t i = 0; i < d; ++i)
      xp.v[i] += static_cast<float>((mask >> i) & 1 ? radius : -radius);
    Tensor<float> rep = rep_of(xp);
    double l1 = 0;
    for (std::size_t i = 0; i < rep.v.size(); ++i)
      l1 += std::fabs(double(rep.v[i]) - double(base.v[i]));
    best = std::max(best, l1 / radius);
  }
  return best;
}

}  // namespace oracle
