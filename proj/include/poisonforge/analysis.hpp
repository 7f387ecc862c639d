#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "poisonforge/container_io.hpp"
#include "poisonforge/image_batch.hpp"
#include "poisonforge/model.hpp"
#include "poisonforge/rng.hpp"

namespace poisonforge::analysis {

/// N x D encoder outputs aligned with their source samples.
struct RepresentationMatrix {
  Tensor<float> reps;  // N,D
  std::vector<int> labels;
  std::vector<std::string> ids;

  int n() const { return reps.ndim() == 2 ? reps.dim(0) : 0; }
  int d() const { return reps.dim(1); }

  void validate() const {
    if (reps.ndim() != 2)
      throw ArgumentError("RepresentationMatrix: reps must be N x D");
    if (static_cast<int>(labels.size()) != reps.dim(0) ||
        static_cast<int>(ids.size()) != reps.dim(0))
      throw ArgumentError("RepresentationMatrix: labels/ids length mismatch");
    for (float v : reps.v)
      if (!std::isfinite(v))
        throw ArgumentError("RepresentationMatrix: non-finite entry");
  }
};

/// Encoder outputs for a whole batch.
inline RepresentationMatrix representations(
    const model::ModelBundle<float>& bundle, const data::ImageBatch& batch) {
  RepresentationMatrix r;
  r.reps = model::forward(bundle, batch.pixels, model::Heads::Rep()).rep;
  r.labels = batch.labels;
  r.ids = batch.ids;
  return r;
}

namespace detail {

/// Strict cosine: zero-norm rows are a caller error in metric mode.
inline double cosine(const float* a, const float* b, int d) {
  double na = 0, nb = 0, dot = 0;
  for (int i = 0; i < d; ++i) {
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
    dot += double(a[i]) * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12)
    throw NumericError("cosine: zero-norm representation row");
  return dot / (na * nb);
}

}  // namespace detail

/// Mean cosine over all unordered same-class pairs (i != j). Classes with
/// fewer than two samples raise ArgumentError unless skipped.
inline double in_class_similarity(const RepresentationMatrix& r,
                                  bool skip_small_classes = false) {
  r.validate();
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < r.n(); ++i) by_class[r.labels[std::size_t(i)]].push_back(i);
  double acc = 0;
  long pairs = 0;
  for (const auto& [cls, rows] : by_class) {
    if (rows.size() < 2) {
      if (skip_small_classes) continue;
      throw ArgumentError("in_class_similarity: class " +
                          std::to_string(cls) + " has fewer than 2 samples");
    }
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = i + 1; j < rows.size(); ++j) {
        acc += detail::cosine(r.reps.data() + std::size_t(rows[i]) * r.d(),
                              r.reps.data() + std::size_t(rows[j]) * r.d(),
                              r.d());
        ++pairs;
      }
  }
  if (pairs == 0)
    throw ArgumentError("in_class_similarity: no same-class pairs");
  return acc / double(pairs);
}

/// Mean cosine between aligned pairs (same ids, same order).
inline double paired_similarity(const RepresentationMatrix& rp,
                                const RepresentationMatrix& rc) {
  rp.validate();
  rc.validate();
  if (rp.ids != rc.ids)
    throw ArgumentError("paired_similarity: ids are not aligned");
  if (rp.d() != rc.d())
    throw ArgumentError("paired_similarity: dimension mismatch");
  if (rp.n() == 0) throw ArgumentError("paired_similarity: empty input");
  double acc = 0;
  for (int i = 0; i < rp.n(); ++i)
    acc += detail::cosine(rp.reps.data() + std::size_t(i) * rp.d(),
                          rc.reps.data() + std::size_t(i) * rc.d(), rp.d());
  return acc / rp.n();
}

/// Effective rank from an explicit singular-value spectrum:
/// exp(-sum p_i ln p_i) with p_i = sigma_i / sum sigma, 0 ln 0 := 0.
inline double effective_rank_from_spectrum(const std::vector<double>& sv) {
  double total = 0;
  for (double s : sv) total += std::max(s, 0.0);
  if (total <= 0.0) return 1.0;  // degenerate all-zero matrix
  double h = 0;
  for (double s : sv) {
    double p = std::max(s, 0.0) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

/// Singular-value-entropy exponent of the centered representation matrix
/// (the Roy-Vetterli form): rows are centered by the mean row, sigma come
/// from the SVD of the result.
inline double effective_rank(const RepresentationMatrix& r) {
  r.validate();
  const int N = r.n(), D = r.d();
  if (N < 2) throw ArgumentError("effective_rank: needs N >= 2");
  Eigen::MatrixXd m(N, D);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < D; ++j) m(i, j) = r.reps.at2(i, j);
  m.rowwise() -= m.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  std::vector<double> sv(svd.singularValues().data(),
                         svd.singularValues().data() +
                             svd.singularValues().size());
  return effective_rank_from_spectrum(sv);
}

/// Estimated local Lipschitz roughness: for each sample, ascend
/// ||f(x') - f(x)||_1 over the L-inf ball of the given radius with
/// sign-gradient steps that keep x' on the ball's corners, and report the
/// best ratio ||f(x')-f(x)||_1 / ||x'-x||_inf seen. The probe may leave
/// the [0,1] pixel box; this measures the encoder, not image validity.
/// Returns the batch mean.
inline double local_lipschitz(const model::ModelBundle<float>& bundle,
                              const Tensor<float>& pixels, double radius,
                              int est_steps, std::uint64_t seed = 0) {
  if (radius <= 0.0) throw ArgumentError("local_lipschitz: radius must be > 0");
  if (est_steps < 0) throw ArgumentError("local_lipschitz: est_steps < 0");
  model::check_batch_shape(bundle, pixels);
  const int N = pixels.dim(0);
  if (N == 0) throw ArgumentError("local_lipschitz: empty batch");
  const std::size_t stride = std::size_t(pixels.numel()) / N;

  Tensor<float> base_rep =
      model::forward(bundle, pixels, model::Heads::Rep()).rep;
  const int D = base_rep.dim(1);

  Rng rng(derive_seed(seed, "local_lipschitz"));
  Tensor<float> x_cur(pixels.shape);

  // start every sample at a random corner of its ball
  Tensor<float> delta(pixels.shape);
  for (auto& d : delta.v)
    d = static_cast<float>(rng.uniform() < 0.5 ? -radius : radius);
  std::vector<double> best(std::size_t(N), 0.0);

  auto evaluate = [&](std::vector<double>& out_num) {
    for (std::size_t i = 0; i < x_cur.v.size(); ++i)
      x_cur.v[i] = pixels.v[i] + delta.v[i];
    auto f = model::forward(bundle, x_cur, model::Heads::Rep(), true);
    out_num.assign(std::size_t(N), 0.0);
    Tensor<float> d_rep(f.rep.shape);
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < D; ++j) {
        double diff = double(f.rep.at2(n, j)) - double(base_rep.at2(n, j));
        out_num[std::size_t(n)] += std::fabs(diff);
        d_rep.at2(n, j) = diff > 0 ? 1.0f : (diff < 0 ? -1.0f : 0.0f);
      }
    return model::backward_to_input(bundle, f, &d_rep, nullptr, nullptr,
                                    nullptr);
  };

  std::vector<double> num;
  for (int s = 0; s <= est_steps; ++s) {
    Tensor<float> grad = evaluate(num);
    for (int n = 0; n < N; ++n) {
      // realized denominator (always radius on corners)
      double denom = 0;
      for (std::size_t k = 0; k < stride; ++k)
        denom = std::max(denom,
                         std::fabs(double(delta.v[std::size_t(n) * stride + k])));
      if (denom > 0)
        best[std::size_t(n)] =
            std::max(best[std::size_t(n)], num[std::size_t(n)] / denom);
    }
    if (s == est_steps) break;
    // full-radius sign step: coordinates jump between corners
    for (int n = 0; n < N; ++n)
      for (std::size_t k = 0; k < stride; ++k) {
        float g = grad.v[std::size_t(n) * stride + k];
        if (g > 0)
          delta.v[std::size_t(n) * stride + k] = static_cast<float>(radius);
        else if (g < 0)
          delta.v[std::size_t(n) * stride + k] = static_cast<float>(-radius);
      }
  }

  double mean = 0;
  for (double b : best) mean += b;
  return mean / N;
}

/// Seeded-subsample cosine KNN. Ranks `pool` training representations by
/// cosine similarity to each test row and predicts the majority label of
/// the top k; vote ties go to the tied class holding the nearest neighbor.
inline double knn_eval(const RepresentationMatrix& train,
                       const RepresentationMatrix& test, int k, int pool = 0,
                       std::uint64_t seed = 0) {
  train.validate();
  test.validate();
  if (train.n() == 0) throw ArgumentError("knn_eval: empty train pool");
  if (pool == 0) pool = std::min(10240, train.n());
  if (k < 1 || k > pool || pool > train.n())
    throw ArgumentError("knn_eval: need 1 <= k <= pool <= N_train");
  if (train.d() != test.d())
    throw ArgumentError("knn_eval: dimension mismatch");

  // sample the pool without replacement
  std::vector<int> idx(std::size_t(train.n()));
  for (int i = 0; i < train.n(); ++i) idx[std::size_t(i)] = i;
  Rng rng(derive_seed(seed, "knn.pool"));
  for (int i = 0; i < pool; ++i) {
    int j = static_cast<int>(rng.uniform_int(i, train.n() - 1));
    std::swap(idx[std::size_t(i)], idx[std::size_t(j)]);
  }
  idx.resize(std::size_t(pool));

  int correct = 0;
  std::vector<std::pair<double, int>> ranked(static_cast<std::size_t>(pool),
                                             {0.0, 0});
  for (int t = 0; t < test.n(); ++t) {
    const float* q = test.reps.data() + std::size_t(t) * test.d();
    for (int p = 0; p < pool; ++p) {
      const float* v =
          train.reps.data() + std::size_t(idx[std::size_t(p)]) * train.d();
      double na = 0, nb = 0, dot = 0;
      for (int j = 0; j < train.d(); ++j) {
        na += double(q[j]) * q[j];
        nb += double(v[j]) * v[j];
        dot += double(q[j]) * v[j];
      }
      double denom = std::sqrt(na) * std::sqrt(nb);
      ranked[std::size_t(p)] = {denom > 1e-24 ? dot / denom : 0.0,
                                idx[std::size_t(p)]};
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) {
                       return a.first > b.first;
                     });
    std::map<int, int> votes;
    for (int j = 0; j < k; ++j)
      ++votes[train.labels[std::size_t(ranked[std::size_t(j)].second)]];
    int best_votes = 0;
    for (const auto& [cls, v] : votes) best_votes = std::max(best_votes, v);
    int pred = -1;
    for (int j = 0; j < k; ++j) {  // nearest-first scan over tied classes
      int cls = train.labels[std::size_t(ranked[std::size_t(j)].second)];
      if (votes[cls] == best_votes) {
        pred = cls;
        break;
      }
    }
    if (pred == test.labels[std::size_t(t)]) ++correct;
  }
  return test.n() > 0 ? double(correct) / test.n() : 0.0;
}

struct AnalysisReport {
  double in_cls_sim_psn = 0;
  double psn_cln_sim = 0;
  double e_rank_psn = 0;
  double local_lip_psn = 0;

  data::json to_json() const {
    return data::json{{"in_cls_sim_psn", in_cls_sim_psn},
                      {"psn_cln_sim", psn_cln_sim},
                      {"e_rank_psn", e_rank_psn},
                      {"local_lip_psn", local_lip_psn}};
  }
};

struct AnalysisOptions {
  double lip_radius = 8.0 / 255.0;
  int lip_steps = 10;
  std::uint64_t seed = 0;
  bool skip_small_classes = false;
};

/// The four representation metrics over a poisoned dataset: in-class
/// similarity and effective rank of the poisoned representations, paired
/// poison-clean similarity, and the local Lipschitz roughness on poisoned
/// inputs. Computed on the full poisoned train set.
inline AnalysisReport analysis_report(const model::ModelBundle<float>& bundle,
                                      const data::PoisonedDataset& ds,
                                      const AnalysisOptions& opt = {}) {
  RepresentationMatrix rp = representations(bundle, ds.poisoned);
  RepresentationMatrix rc = representations(bundle, ds.clean);
  AnalysisReport rep;
  rep.in_cls_sim_psn = in_class_similarity(rp, opt.skip_small_classes);
  rep.psn_cln_sim = paired_similarity(rp, rc);
  rep.e_rank_psn = effective_rank(rp);
  rep.local_lip_psn = local_lipschitz(bundle, ds.poisoned.pixels,
                                      opt.lip_radius, opt.lip_steps, opt.seed);
  return rep;
}

/// Representation export in the standard container; round-trips exactly.
inline void export_embeddings(const std::string& path,
                              const RepresentationMatrix& r,
                              const std::map<std::string, std::string>&
                                  config = {}) {
  r.validate();
  data::json h;
  h["labels"] = r.labels;
  h["ids"] = r.ids;
  data::save_container(path, "representations", std::move(h),
                       {{"reps", &r.reps}}, config);
}

inline RepresentationMatrix load_embeddings(const std::string& path) {
  data::Container c = data::load_container(path);
  if (c.header.value("kind", "") != "representations")
    throw FormatError("container kind is not representations");
  RepresentationMatrix r;
  for (const char* field : {"labels", "ids"})
    if (!c.header.contains(field))
      throw FormatError(std::string("representations header missing field '") +
                        field + "'");
  r.labels = c.header["labels"].get<std::vector<int>>();
  r.ids = c.header["ids"].get<std::vector<std::string>>();
  r.reps = data::detail::take_array(c, "reps");
  r.validate();
  return r;
}

}  // namespace poisonforge::analysis
