#pragma once

#include <cmath>
#include <vector>

#include "poisonforge/error.hpp"
#include "poisonforge/tensor.hpp"

namespace poisonforge::loss {

/// Weights of the combined objective: alpha scales the contrastive term,
/// beta the cross-entropy term; temperature belongs to the contrastive
/// softmax.
struct LossWeights {
  double alpha = 0.5;
  double beta = 0.5;
  double temperature = 0.2;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0)
      throw ArgumentError("LossWeights: alpha and beta must be >= 0");
    if (alpha + beta <= 0.0)
      throw ArgumentError("LossWeights: alpha + beta must be > 0");
    if (temperature <= 0.0)
      throw ArgumentError("LossWeights: temperature must be > 0");
  }
};

/// Zero-norm rows inside normalization: guard with a 1e-12 epsilon during
/// training, or raise NumericError in standalone metric mode.
enum class ZeroNormPolicy { EpsilonGuard, Error };

namespace detail {

template <typename T>
inline double row_norm(const Tensor<T>& m, int i) {
  const int P = m.dim(1);
  double s = 0;
  for (int j = 0; j < P; ++j) s += double(m.at2(i, j)) * double(m.at2(i, j));
  return std::sqrt(s);
}

template <typename T>
inline std::vector<double> softmax_row(const Tensor<T>& logits, int n) {
  const int K = logits.dim(1);
  double mx = -1e300;
  for (int k = 0; k < K; ++k) mx = std::max(mx, double(logits.at2(n, k)));
  std::vector<double> p(static_cast<std::size_t>(K));
  double sum = 0;
  for (int k = 0; k < K; ++k) {
    p[k] = std::exp(double(logits.at2(n, k)) - mx);
    sum += p[k];
  }
  for (int k = 0; k < K; ++k) p[k] /= sum;
  return p;
}

}  // namespace detail

// --- cross entropy ----------------------------------------------------------

template <typename T>
struct CeOut {
  double value = 0;
  Tensor<T> d_logits;
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
inline CeOut<T> cross_entropy_grad(const Tensor<T>& logits,
                                   const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    throw ArgumentError("cross_entropy: logits must be N x K");
  const int N = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw ArgumentError("cross_entropy: K must be >= 2");
  if (static_cast<int>(labels.size()) != N)
    throw ArgumentError("cross_entropy: labels length != N");
  CeOut<T> out;
  out.d_logits = Tensor<T>(logits.shape);
  double acc = 0;
  for (int n = 0; n < N; ++n) {
    int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K)
      throw ArgumentError("cross_entropy: label " + std::to_string(y) +
                          " out of range");
    auto p = detail::softmax_row(logits, n);
    acc += -std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
    for (int k = 0; k < K; ++k)
      out.d_logits.at2(n, k) =
          static_cast<T>((p[static_cast<std::size_t>(k)] - (k == y ? 1.0 : 0.0)) / N);
  }
  out.value = N > 0 ? acc / N : 0.0;
  return out;
}

template <typename T>
inline double cross_entropy(const Tensor<T>& logits,
                            const std::vector<int>& labels) {
  return cross_entropy_grad(logits, labels).value;
}

/// Mixed-label pair as produced by mixup/cutmix.
struct MixPair {
  int y_a = 0;
  int y_b = 0;
  double lam = 1.0;
};

/// lam * CE(., y_a) + (1 - lam) * CE(., y_b), averaged over the batch.
template <typename T>
inline CeOut<T> cross_entropy_mixed_grad(const Tensor<T>& logits,
                                         const std::vector<MixPair>& pairs) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(pairs.size()) != N)
    throw ArgumentError("cross_entropy_mixed: pairs length != N");
  CeOut<T> out;
  out.d_logits = Tensor<T>(logits.shape);
  double acc = 0;
  for (int n = 0; n < N; ++n) {
    const MixPair& mp = pairs[static_cast<std::size_t>(n)];
    if (mp.y_a < 0 || mp.y_a >= K || mp.y_b < 0 || mp.y_b >= K)
      throw ArgumentError("cross_entropy_mixed: label out of range");
    auto p = detail::softmax_row(logits, n);
    acc += -mp.lam * std::log(std::max(p[std::size_t(mp.y_a)], 1e-300)) -
           (1.0 - mp.lam) * std::log(std::max(p[std::size_t(mp.y_b)], 1e-300));
    for (int k = 0; k < K; ++k) {
      double target = mp.lam * (k == mp.y_a ? 1.0 : 0.0) +
                      (1.0 - mp.lam) * (k == mp.y_b ? 1.0 : 0.0);
      out.d_logits.at2(n, k) = static_cast<T>((p[std::size_t(k)] - target) / N);
    }
  }
  out.value = N > 0 ? acc / N : 0.0;
  return out;
}

// --- InfoNCE ----------------------------------------------------------------

template <typename T>
struct NceOut {
  double value = 0;
  Tensor<T> d_a, d_b;
};

/// Symmetrized InfoNCE with both-view negatives (SimCLR convention): rows
/// are L2-normalized internally, positives are same-index pairs across the
/// two views, and every other projection from either view is a negative, so
/// each anchor sees a softmax over 2N-1 candidates.
template <typename T>
inline NceOut<T> info_nce_grad(const Tensor<T>& a, const Tensor<T>& b,
                               double temperature,
                               ZeroNormPolicy policy =
                                   ZeroNormPolicy::EpsilonGuard) {
  if (a.ndim() != 2 || !a.same_shape(b))
    throw ArgumentError("info_nce: projections must be equal-shape N x P");
  const int N = a.dim(0), P = a.dim(1);
  if (N < 2) throw ArgumentError("info_nce: needs N >= 2");
  if (temperature <= 0.0)
    throw ArgumentError("info_nce: temperature must be > 0");

  const int M = 2 * N;
  // normalized rows
  std::vector<double> z(std::size_t(M) * P, 0.0);
  std::vector<double> norms(static_cast<std::size_t>(M), 0.0);
  for (int i = 0; i < M; ++i) {
    const Tensor<T>& src = i < N ? a : b;
    int r = i < N ? i : i - N;
    double nn = detail::row_norm(src, r);
    if (nn < 1e-12) {
      if (policy == ZeroNormPolicy::Error)
        throw NumericError("info_nce: zero-norm projection row");
      norms[i] = 0.0;
      continue;  // z row stays zero
    }
    norms[i] = nn;
    for (int j = 0; j < P; ++j)
      z[std::size_t(i) * P + j] = double(src.at2(r, j)) / nn;
  }

  auto sim = [&](int i, int j) {
    double s = 0;
    for (int k = 0; k < P; ++k)
      s += z[std::size_t(i) * P + k] * z[std::size_t(j) * P + k];
    return s / temperature;
  };

  // dL/ds_ij for anchor i, stored densely
  std::vector<double> ds(std::size_t(M) * M, 0.0);
  double value = 0;
  for (int i = 0; i < M; ++i) {
    int pos = i < N ? i + N : i - N;
    double mx = -1e300;
    for (int j = 0; j < M; ++j)
      if (j != i) mx = std::max(mx, sim(i, j));
    double denom = 0;
    for (int j = 0; j < M; ++j)
      if (j != i) denom += std::exp(sim(i, j) - mx);
    value += -(sim(i, pos) - mx) + std::log(denom);
    for (int j = 0; j < M; ++j) {
      if (j == i) continue;
      double p = std::exp(sim(i, j) - mx) / denom;
      ds[std::size_t(i) * M + j] = (p - (j == pos ? 1.0 : 0.0)) / M;
    }
  }
  value /= M;

  NceOut<T> out;
  out.d_a = Tensor<T>(a.shape);
  out.d_b = Tensor<T>(b.shape);
  for (int m = 0; m < M; ++m) {
    if (norms[m] == 0.0) continue;  // guarded row: flat gradient
    std::vector<double> dz(std::size_t(P), 0.0);
    for (int j = 0; j < M; ++j) {
      if (j == m) continue;
      double w = ds[std::size_t(m) * M + j] + ds[std::size_t(j) * M + m];
      if (w == 0.0) continue;
      for (int k = 0; k < P; ++k)
        dz[k] += w * z[std::size_t(j) * P + k] / temperature;
    }
    // through normalization: du = (dz - (dz . z) z) / ||u||
    double dot = 0;
    for (int k = 0; k < P; ++k) dot += dz[k] * z[std::size_t(m) * P + k];
    Tensor<T>& dst = m < N ? out.d_a : out.d_b;
    int r = m < N ? m : m - N;
    for (int k = 0; k < P; ++k)
      dst.at2(r, k) = static_cast<T>(
          (dz[k] - dot * z[std::size_t(m) * P + k]) / norms[m]);
  }
  out.value = value;
  return out;
}

template <typename T>
inline double info_nce(const Tensor<T>& a, const Tensor<T>& b,
                       double temperature,
                       ZeroNormPolicy policy = ZeroNormPolicy::EpsilonGuard) {
  return info_nce_grad(a, b, temperature, policy).value;
}

// --- cosine loss ------------------------------------------------------------

template <typename T>
struct CosOut {
  double value = 0;
  Tensor<T> d_pred;
};

/// Mean over the batch of -cos(pred_i, target_i) on normalized rows. The
/// target branch receives no gradient (stop-gradient); callers symmetrize
/// by invoking again with the branches swapped.
template <typename T>
inline CosOut<T> cosine_loss_grad(const Tensor<T>& pred,
                                  const Tensor<T>& target,
                                  ZeroNormPolicy policy =
                                      ZeroNormPolicy::EpsilonGuard) {
  if (pred.ndim() != 2 || !pred.same_shape(target))
    throw ArgumentError("cosine_loss: shapes must match, N x P");
  const int N = pred.dim(0), P = pred.dim(1);
  if (N < 1) throw ArgumentError("cosine_loss: empty batch");
  CosOut<T> out;
  out.d_pred = Tensor<T>(pred.shape);
  double acc = 0;
  for (int n = 0; n < N; ++n) {
    double np = detail::row_norm(pred, n);
    double nt = detail::row_norm(target, n);
    if (np < 1e-12 || nt < 1e-12) {
      if (policy == ZeroNormPolicy::Error)
        throw NumericError("cosine_loss: zero-norm row");
      continue;  // contributes 0 with flat gradient
    }
    double dot = 0;
    for (int k = 0; k < P; ++k)
      dot += double(pred.at2(n, k)) * double(target.at2(n, k));
    double cosv = dot / (np * nt);
    acc += -cosv;
    for (int k = 0; k < P; ++k) {
      double ph = double(pred.at2(n, k)) / np;
      double th = double(target.at2(n, k)) / nt;
      out.d_pred.at2(n, k) = static_cast<T>(-(th - cosv * ph) / np / N);
    }
  }
  out.value = acc / N;
  return out;
}

template <typename T>
inline double cosine_loss(const Tensor<T>& pred, const Tensor<T>& target,
                          ZeroNormPolicy policy =
                              ZeroNormPolicy::EpsilonGuard) {
  return cosine_loss_grad(pred, target, policy).value;
}

// --- combined objective -----------------------------------------------------

template <typename T>
struct VesprOut {
  double value = 0;
  double cl_raw = 0, ce_raw = 0;          // unweighted terms
  double cl_contrib = 0, ce_contrib = 0;  // alpha*cl, beta*ce
  Tensor<T> d_proj_adv, d_proj_pos, d_logits_adv;
};

/// alpha * InfoNCE(proj_adv, proj_pos) + beta * CE(logits_adv, labels),
/// with negatives drawn from the other samples of both views. The
/// breakdown exposes both the raw terms and the weighted contributions.
template <typename T>
inline VesprOut<T> vespr_loss_grad(const Tensor<T>& proj_adv,
                                   const Tensor<T>& proj_pos,
                                   const Tensor<T>& logits_adv,
                                   const std::vector<int>& labels,
                                   const LossWeights& weights,
                                   ZeroNormPolicy policy =
                                       ZeroNormPolicy::EpsilonGuard) {
  weights.validate();
  VesprOut<T> out;
  out.d_proj_adv = Tensor<T>(proj_adv.shape);
  out.d_proj_pos = Tensor<T>(proj_pos.shape);

  if (weights.alpha > 0.0 ||
      (proj_adv.ndim() == 2 && proj_adv.dim(0) >= 2)) {
    NceOut<T> cl = info_nce_grad(proj_adv, proj_pos, weights.temperature,
                                 policy);
    out.cl_raw = cl.value;
    for (std::size_t i = 0; i < cl.d_a.v.size(); ++i) {
      out.d_proj_adv.v[i] = static_cast<T>(weights.alpha * cl.d_a.v[i]);
      out.d_proj_pos.v[i] = static_cast<T>(weights.alpha * cl.d_b.v[i]);
    }
  }
  CeOut<T> ce = cross_entropy_grad(logits_adv, labels);
  out.ce_raw = ce.value;
  out.d_logits_adv = Tensor<T>(logits_adv.shape);
  for (std::size_t i = 0; i < ce.d_logits.v.size(); ++i)
    out.d_logits_adv.v[i] = static_cast<T>(weights.beta * ce.d_logits.v[i]);

  out.cl_contrib = weights.alpha * out.cl_raw;
  out.ce_contrib = weights.beta * out.ce_raw;
  out.value = out.cl_contrib + out.ce_contrib;
  return out;
}

}  // namespace poisonforge::loss
