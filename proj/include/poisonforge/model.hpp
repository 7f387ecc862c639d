#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "poisonforge/container_io.hpp"
#include "poisonforge/error.hpp"
#include "poisonforge/rng.hpp"
#include "poisonforge/tensor.hpp"

namespace poisonforge::model {

/// Parameter gradients, keyed by parameter name. Kept outside the layers so
/// forward/backward stay const and frozen bundles can serve concurrent
/// read-only evaluations.
template <typename T>
struct GradientSet {
  std::map<std::string, std::vector<T>> by_name;

  std::vector<T>& slot(const std::string& name, std::size_t size) {
    auto& g = by_name[name];
    if (g.size() != size) g.assign(size, T(0));
    return g;
  }
  void zero() {
    for (auto& [k, g] : by_name) std::fill(g.begin(), g.end(), T(0));
  }
};

template <typename T>
struct ParamView {
  std::string name;
  std::vector<T>* value;
};

/// Flat list of named parameter arrays in a stable order; the unit of
/// checkpointing and optimizer bookkeeping.
template <typename T>
using ParameterSet = std::vector<ParamView<T>>;

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) const = 0;
  /// Given the saved input and dL/dy, return dL/dx; when `gs` is non-null,
  /// accumulate parameter gradients into it.
  virtual Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                             GradientSet<T>* gs) const = 0;
  virtual void params(ParameterSet<T>& out) = 0;
  /// Non-trainable state (e.g. running statistics): checkpointed but never
  /// touched by the optimizer.
  virtual void buffers(ParameterSet<T>&) {}
  /// Train-mode toggle for layers with batch-dependent behavior.
  virtual void set_train_mode(bool) {}
  virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

namespace detail {
template <typename T>
inline void kaiming_init(std::vector<T>& w, int fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / double(fan_in));
  for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
}
template <typename T>
inline void bias_init(std::vector<T>& b, int fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(double(fan_in));
  for (auto& x : b) x = static_cast<T>(rng.uniform(-bound, bound));
}
}  // namespace detail

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::string name, int in, int out, Rng& rng)
      : name_(std::move(name)), in_(in), out_(out) {
    w_.resize(std::size_t(in) * out);
    b_.resize(std::size_t(out));
    detail::kaiming_init(w_, in, rng);
    detail::bias_init(b_, in, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    const int N = x.dim(0);
    if (x.ndim() != 2 || x.dim(1) != in_)
      throw ArgumentError("Linear '" + name_ + "': expected N x " +
                          std::to_string(in_) + ", got " + x.shape_str());
    Tensor<T> y({N, out_});
    for (int n = 0; n < N; ++n) {
      const T* xi = x.data() + std::size_t(n) * in_;
      T* yo = y.data() + std::size_t(n) * out_;
      for (int o = 0; o < out_; ++o) {
        const T* wr = w_.data() + std::size_t(o) * in_;
        double acc = b_[o];
        for (int i = 0; i < in_; ++i) acc += double(wr[i]) * double(xi[i]);
        yo[o] = static_cast<T>(acc);
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>* gs) const override {
    const int N = x.dim(0);
    Tensor<T> dx({N, in_});
    for (int n = 0; n < N; ++n) {
      const T* dyo = dy.data() + std::size_t(n) * out_;
      T* dxi = dx.data() + std::size_t(n) * in_;
      for (int o = 0; o < out_; ++o) {
        const T* wr = w_.data() + std::size_t(o) * in_;
        T g = dyo[o];
        for (int i = 0; i < in_; ++i) dxi[i] += g * wr[i];
      }
    }
    if (gs) {
      auto& gw = gs->slot(name_ + ".w", w_.size());
      auto& gb = gs->slot(name_ + ".b", b_.size());
      for (int n = 0; n < N; ++n) {
        const T* xi = x.data() + std::size_t(n) * in_;
        const T* dyo = dy.data() + std::size_t(n) * out_;
        for (int o = 0; o < out_; ++o) {
          T g = dyo[o];
          T* gwr = gw.data() + std::size_t(o) * in_;
          for (int i = 0; i < in_; ++i) gwr[i] += g * xi[i];
          gb[o] += g;
        }
      }
    }
    return dx;
  }

  void params(ParameterSet<T>& out) override {
    out.push_back({name_ + ".w", &w_});
    out.push_back({name_ + ".b", &b_});
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Linear>(*this);
  }

 private:
  std::string name_;
  int in_, out_;
  std::vector<T> w_, b_;
};

/// 2D convolution, stride 1, zero padding k/2 (shape preserving).
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::string name, int in_c, int out_c, int k, Rng& rng)
      : name_(std::move(name)), in_c_(in_c), out_c_(out_c), k_(k) {
    w_.resize(std::size_t(out_c) * in_c * k * k);
    b_.resize(std::size_t(out_c));
    detail::kaiming_init(w_, in_c * k * k, rng);
    detail::bias_init(b_, in_c * k * k, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    if (x.dim(1) != in_c_)
      throw ArgumentError("Conv2d '" + name_ + "': channel mismatch");
    const int p = k_ / 2;
    Tensor<T> y({N, out_c_, H, W});
    for (int n = 0; n < N; ++n)
      for (int oc = 0; oc < out_c_; ++oc) {
        const T* wk = w_.data() + std::size_t(oc) * in_c_ * k_ * k_;
        for (int oh = 0; oh < H; ++oh)
          for (int ow = 0; ow < W; ++ow) {
            double acc = b_[oc];
            for (int ic = 0; ic < in_c_; ++ic)
              for (int kh = 0; kh < k_; ++kh) {
                int ih = oh - p + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < k_; ++kw) {
                  int iw = ow - p + kw;
                  if (iw < 0 || iw >= W) continue;
                  acc += double(wk[(ic * k_ + kh) * k_ + kw]) *
                         double(x.at4(n, ic, ih, iw));
                }
              }
            y.at4(n, oc, oh, ow) = static_cast<T>(acc);
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>* gs) const override {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int p = k_ / 2;
    Tensor<T> dx(x.shape);
    std::vector<T>* gw = nullptr;
    std::vector<T>* gb = nullptr;
    if (gs) {
      gw = &gs->slot(name_ + ".w", w_.size());
      gb = &gs->slot(name_ + ".b", b_.size());
    }
    for (int n = 0; n < N; ++n)
      for (int oc = 0; oc < out_c_; ++oc) {
        const T* wk = w_.data() + std::size_t(oc) * in_c_ * k_ * k_;
        T* gwk = gw ? gw->data() + std::size_t(oc) * in_c_ * k_ * k_ : nullptr;
        for (int oh = 0; oh < H; ++oh)
          for (int ow = 0; ow < W; ++ow) {
            T g = dy.at4(n, oc, oh, ow);
            if (gb) (*gb)[oc] += g;
            for (int ic = 0; ic < in_c_; ++ic)
              for (int kh = 0; kh < k_; ++kh) {
                int ih = oh - p + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < k_; ++kw) {
                  int iw = ow - p + kw;
                  if (iw < 0 || iw >= W) continue;
                  dx.at4(n, ic, ih, iw) += g * wk[(ic * k_ + kh) * k_ + kw];
                  if (gwk)
                    gwk[(ic * k_ + kh) * k_ + kw] += g * x.at4(n, ic, ih, iw);
                }
              }
          }
      }
    return dx;
  }

  void params(ParameterSet<T>& out) override {
    out.push_back({name_ + ".w", &w_});
    out.push_back({name_ + ".b", &b_});
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Conv2d>(*this);
  }

 private:
  std::string name_;
  int in_c_, out_c_, k_;
  std::vector<T> w_, b_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.v.size(); ++i)
      y.v[i] = x.v[i] > T(0) ? x.v[i] : T(0);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>*) const override {
    Tensor<T> dx(x.shape);
    for (std::size_t i = 0; i < x.v.size(); ++i)
      dx.v[i] = x.v[i] > T(0) ? dy.v[i] : T(0);
    return dx;
  }
  void params(ParameterSet<T>&) override {}
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<ReLU>(*this);
  }
};

/// 2x2 average pool, stride 2. Requires even spatial dims.
template <typename T>
class AvgPool2 final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2)
      throw ArgumentError("AvgPool2: spatial dims must be even");
    Tensor<T> y({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H / 2; ++h)
          for (int w = 0; w < W / 2; ++w)
            y.at4(n, c, h, w) =
                (x.at4(n, c, 2 * h, 2 * w) + x.at4(n, c, 2 * h, 2 * w + 1) +
                 x.at4(n, c, 2 * h + 1, 2 * w) +
                 x.at4(n, c, 2 * h + 1, 2 * w + 1)) /
                T(4);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>*) const override {
    Tensor<T> dx(x.shape);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H / 2; ++h)
          for (int w = 0; w < W / 2; ++w) {
            T g = dy.at4(n, c, h, w) / T(4);
            dx.at4(n, c, 2 * h, 2 * w) += g;
            dx.at4(n, c, 2 * h, 2 * w + 1) += g;
            dx.at4(n, c, 2 * h + 1, 2 * w) += g;
            dx.at4(n, c, 2 * h + 1, 2 * w + 1) += g;
          }
    return dx;
  }
  void params(ParameterSet<T>&) override {}
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<AvgPool2>(*this);
  }
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({N, C});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) acc += x.at4(n, c, h, w);
        y.at2(n, c) = static_cast<T>(acc / (H * W));
      }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>*) const override {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> dx(x.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T g = dy.at2(n, c) / T(H * W);
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) dx.at4(n, c, h, w) = g;
      }
    return dx;
  }
  void params(ParameterSet<T>&) override {}
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<GlobalAvgPool>(*this);
  }
};

/// Per-feature batch standardization without a learnable affine, the one
/// batch-statistics layer in the stack. During training steps it uses the
/// current batch's mean/variance and maintains running statistics; frozen
/// (eval) forwards use the running statistics and are sample-independent.
/// Adversarial and clean branches share this state.
template <typename T>
class BatchStat final : public Layer<T> {
 public:
  BatchStat(std::string name, int dim) : name_(std::move(name)), dim_(dim) {
    running_mean_.assign(std::size_t(dim), T(0));
    running_var_.assign(std::size_t(dim), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    const int N = x.dim(0);
    Tensor<T> y(x.shape);
    const bool batch_mode = train_mode_ && N >= 2;
    std::vector<double> mean(std::size_t(dim_), 0.0);
    std::vector<double> var(std::size_t(dim_), 0.0);
    if (batch_mode) {
      batch_stats(x, mean, var);
      // single-writer during training; frozen forwards never get here
      for (int d = 0; d < dim_; ++d) {
        running_mean_[std::size_t(d)] = static_cast<T>(
            (1 - kMomentum) * running_mean_[std::size_t(d)] +
            kMomentum * mean[std::size_t(d)]);
        running_var_[std::size_t(d)] = static_cast<T>(
            (1 - kMomentum) * running_var_[std::size_t(d)] +
            kMomentum * var[std::size_t(d)]);
      }
    } else {
      for (int d = 0; d < dim_; ++d) {
        mean[std::size_t(d)] = running_mean_[std::size_t(d)];
        var[std::size_t(d)] = running_var_[std::size_t(d)];
      }
    }
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < dim_; ++d)
        y.at2(n, d) = static_cast<T>(
            (double(x.at2(n, d)) - mean[std::size_t(d)]) /
            std::sqrt(var[std::size_t(d)] + kEps));
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>*) const override {
    const int N = x.dim(0);
    Tensor<T> dx(x.shape);
    if (!(train_mode_ && N >= 2)) {
      // frozen statistics: a constant per-feature affine map
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < dim_; ++d)
          dx.at2(n, d) = static_cast<T>(
              double(dy.at2(n, d)) /
              std::sqrt(double(running_var_[std::size_t(d)]) + kEps));
      return dx;
    }
    std::vector<double> mean(std::size_t(dim_), 0.0);
    std::vector<double> var(std::size_t(dim_), 0.0);
    batch_stats(x, mean, var);
    for (int d = 0; d < dim_; ++d) {
      double inv = 1.0 / std::sqrt(var[std::size_t(d)] + kEps);
      double dy_sum = 0, dy_dot = 0;
      for (int n = 0; n < N; ++n) {
        double xh = (double(x.at2(n, d)) - mean[std::size_t(d)]) * inv;
        dy_sum += dy.at2(n, d);
        dy_dot += double(dy.at2(n, d)) * xh;
      }
      for (int n = 0; n < N; ++n) {
        double xh = (double(x.at2(n, d)) - mean[std::size_t(d)]) * inv;
        dx.at2(n, d) = static_cast<T>(
            inv * (double(dy.at2(n, d)) - dy_sum / N - xh * dy_dot / N));
      }
    }
    return dx;
  }

  void params(ParameterSet<T>&) override {}
  void buffers(ParameterSet<T>& out) override {
    out.push_back({name_ + ".running_mean", &running_mean_});
    out.push_back({name_ + ".running_var", &running_var_});
  }
  void set_train_mode(bool on) override { train_mode_ = on; }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<BatchStat>(*this);
  }

 private:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  void batch_stats(const Tensor<T>& x, std::vector<double>& mean,
                   std::vector<double>& var) const {
    const int N = x.dim(0);
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < dim_; ++d) mean[std::size_t(d)] += x.at2(n, d);
    for (auto& m : mean) m /= N;
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < dim_; ++d) {
        double c = double(x.at2(n, d)) - mean[std::size_t(d)];
        var[std::size_t(d)] += c * c;
      }
    for (auto& v : var) v /= N;
  }

  std::string name_;
  int dim_;
  bool train_mode_ = false;
  mutable std::vector<T> running_mean_, running_var_;
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    const int N = x.ndim() > 0 ? x.dim(0) : 0;
    int rest = 1;
    for (int i = 1; i < x.ndim(); ++i) rest *= x.dim(i);
    Tensor<T> y({N, rest});
    y.v = x.v;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy,
                     GradientSet<T>*) const override {
    Tensor<T> dx(x.shape);
    dx.v = dy.v;
    return dx;
  }
  void params(ParameterSet<T>&) override {}
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Flatten>(*this);
  }
};

/// Per-layer saved inputs, produced by a traced forward pass and consumed
/// once by the matching backward pass.
template <typename T>
using SeqTrace = std::vector<Tensor<T>>;

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) { *this = o; }
  Sequential& operator=(const Sequential& o) {
    layers_.clear();
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
    return *this;
  }
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  void add(std::unique_ptr<Layer<T>> l) { layers_.push_back(std::move(l)); }
  bool empty() const { return layers_.empty(); }

  Tensor<T> forward(const Tensor<T>& x, SeqTrace<T>* trace = nullptr) const {
    Tensor<T> cur = x;
    if (trace) trace->clear();
    for (const auto& l : layers_) {
      if (trace) trace->push_back(cur);
      cur = l->forward(cur);
    }
    return cur;
  }

  Tensor<T> backward(const SeqTrace<T>& trace, const Tensor<T>& dy,
                     GradientSet<T>* gs) const {
    if (trace.size() != layers_.size())
      throw StateError("Sequential::backward: trace does not match layers");
    Tensor<T> cur = dy;
    for (std::size_t i = layers_.size(); i-- > 0;)
      cur = layers_[i]->backward(trace[i], cur, gs);
    return cur;
  }

  void params(ParameterSet<T>& out) {
    for (auto& l : layers_) l->params(out);
  }

  void buffers(ParameterSet<T>& out) {
    for (auto& l : layers_) l->buffers(out);
  }

  void set_train_mode(bool on) {
    for (auto& l : layers_) l->set_train_mode(on);
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

enum class Arch { TinyConvNet, MLP };

inline const char* arch_name(Arch a) {
  return a == Arch::TinyConvNet ? "tinyconv" : "mlp";
}
inline Arch arch_from_name(const std::string& s) {
  if (s == "tinyconv") return Arch::TinyConvNet;
  if (s == "mlp") return Arch::MLP;
  throw ArgumentError("unknown arch '" + s + "'");
}

/// Everything needed to build a bundle deterministically.
struct BuildSpec {
  Arch arch = Arch::TinyConvNet;
  int in_c = 3, in_h = 16, in_w = 16;
  int rep_dim = 64;       // D
  int proj_dim = 64;      // P
  int num_classes = 4;    // K
  int proj_layers = 3;    // affine stages in the projector
  bool with_momentum = false;
  bool with_predictor = false;  // SimSiam/BYOL prediction head
  int conv_width = 0;     // first conv channels; 0 -> rep_dim/2
  int mlp_hidden = 0;     // 0 -> rep_dim*2
  std::uint64_t seed = 0;
};

template <typename T>
struct MomentumCopy {
  Sequential<T> encoder;
  Sequential<T> projector;
};

/// Encoder f, projector g, classifier c, and an optional EMA (momentum)
/// copy of f and g. Evaluation counters are test instrumentation only.
template <typename T = float>
struct ModelBundle {
  BuildSpec spec;
  Sequential<T> encoder, projector, classifier;
  std::optional<Sequential<T>> predictor;
  std::optional<MomentumCopy<T>> momentum;
  /// Bumped on every parameter mutation (optimizer step, momentum update);
  /// lets the trainer assert that an attack used the parameters it is about
  /// to update.
  std::uint64_t param_version = 0;

  mutable std::atomic<std::uint64_t> encoder_evals{0};
  mutable std::atomic<std::uint64_t> projector_evals{0};
  mutable std::atomic<std::uint64_t> classifier_evals{0};

  ModelBundle() = default;
  ModelBundle(const ModelBundle& o)
      : spec(o.spec),
        encoder(o.encoder),
        projector(o.projector),
        classifier(o.classifier),
        predictor(o.predictor),
        momentum(o.momentum),
        param_version(o.param_version) {}
  ModelBundle& operator=(const ModelBundle& o) {
    spec = o.spec;
    encoder = o.encoder;
    projector = o.projector;
    classifier = o.classifier;
    predictor = o.predictor;
    momentum = o.momentum;
    param_version = o.param_version;
    return *this;
  }
  ModelBundle(ModelBundle&&) = default;
  ModelBundle& operator=(ModelBundle&&) = default;

  /// Parameters the optimizer may update, in stable order.
  ParameterSet<T> trainable_parameters() {
    ParameterSet<T> out;
    encoder.params(out);
    projector.params(out);
    classifier.params(out);
    if (predictor) predictor->params(out);
    return out;
  }

  /// All state including buffers and the momentum copy (checkpoints).
  ParameterSet<T> all_parameters() {
    ParameterSet<T> out = trainable_parameters();
    encoder.buffers(out);
    projector.buffers(out);
    classifier.buffers(out);
    if (predictor) predictor->buffers(out);
    if (momentum) {
      ParameterSet<T> ema;
      momentum->encoder.params(ema);
      momentum->projector.params(ema);
      momentum->encoder.buffers(ema);
      momentum->projector.buffers(ema);
      for (auto& p : ema) out.push_back({"momentum." + p.name, p.value});
    }
    return out;
  }

  /// Batch-statistics layers switch between batch and running statistics.
  void set_train_mode(bool on) {
    encoder.set_train_mode(on);
    projector.set_train_mode(on);
    classifier.set_train_mode(on);
    if (predictor) predictor->set_train_mode(on);
    if (momentum) {
      momentum->encoder.set_train_mode(on);
      momentum->projector.set_train_mode(on);
    }
  }
};

template <typename T = float>
inline ModelBundle<T> build_bundle(const BuildSpec& spec_in) {
  BuildSpec spec = spec_in;
  if (spec.rep_dim < 1 || spec.proj_dim < 1 || spec.num_classes < 1)
    throw ArgumentError("build_bundle: dims must be >= 1");
  if (spec.proj_layers < 1)
    throw ArgumentError("build_bundle: proj_layers must be >= 1");
  if (spec.in_c < 1 || spec.in_h < 1 || spec.in_w < 1)
    throw ArgumentError("build_bundle: bad image shape");
  if (spec.conv_width == 0) spec.conv_width = std::max(4, spec.rep_dim / 2);
  if (spec.mlp_hidden == 0) spec.mlp_hidden = spec.rep_dim * 2;

  Rng rng(derive_seed(spec.seed, "model.init"));
  ModelBundle<T> b;
  b.spec = spec;
  if (spec.arch == Arch::TinyConvNet) {
    if (spec.in_h % 2 || spec.in_w % 2)
      throw ArgumentError("build_bundle: TinyConvNet needs even image side");
    b.encoder.add(std::make_unique<Conv2d<T>>("enc.conv1", spec.in_c,
                                              spec.conv_width, 3, rng));
    b.encoder.add(std::make_unique<ReLU<T>>());
    b.encoder.add(std::make_unique<AvgPool2<T>>());
    b.encoder.add(std::make_unique<Conv2d<T>>("enc.conv2", spec.conv_width,
                                              spec.rep_dim, 3, rng));
    b.encoder.add(std::make_unique<ReLU<T>>());
    b.encoder.add(std::make_unique<GlobalAvgPool<T>>());
    b.encoder.add(std::make_unique<BatchStat<T>>("enc.bn", spec.rep_dim));
  } else {
    const int flat = spec.in_c * spec.in_h * spec.in_w;
    b.encoder.add(std::make_unique<Flatten<T>>());
    b.encoder.add(std::make_unique<Linear<T>>("enc.fc1", flat, spec.mlp_hidden,
                                              rng));
    b.encoder.add(std::make_unique<ReLU<T>>());
    b.encoder.add(std::make_unique<Linear<T>>("enc.fc2", spec.mlp_hidden,
                                              spec.rep_dim, rng));
    b.encoder.add(std::make_unique<BatchStat<T>>("enc.bn", spec.rep_dim));
  }

  for (int l = 0; l < spec.proj_layers; ++l) {
    int in = l == 0 ? spec.rep_dim : spec.proj_dim;
    b.projector.add(std::make_unique<Linear<T>>("proj.p" + std::to_string(l + 1),
                                                in, spec.proj_dim, rng));
    if (l + 1 < spec.proj_layers) b.projector.add(std::make_unique<ReLU<T>>());
  }

  b.classifier.add(std::make_unique<Linear<T>>("cls.head", spec.rep_dim,
                                               spec.num_classes, rng));

  if (spec.with_predictor) {
    int hid = std::max(4, spec.proj_dim / 2);
    Sequential<T> pred;
    pred.add(std::make_unique<Linear<T>>("pred.q1", spec.proj_dim, hid, rng));
    pred.add(std::make_unique<ReLU<T>>());
    pred.add(std::make_unique<Linear<T>>("pred.q2", hid, spec.proj_dim, rng));
    b.predictor = std::move(pred);
  }

  if (spec.with_momentum)
    b.momentum = MomentumCopy<T>{b.encoder, b.projector};
  return b;
}

/// Convenience overload mirroring the (arch, shape, D, P, K, ...) call.
template <typename T = float>
inline ModelBundle<T> build_bundle(Arch arch, int in_c, int in_h, int in_w,
                                   int rep_dim, int proj_dim, int num_classes,
                                   int proj_layers, bool with_momentum,
                                   std::uint64_t seed) {
  BuildSpec s;
  s.arch = arch;
  s.in_c = in_c;
  s.in_h = in_h;
  s.in_w = in_w;
  s.rep_dim = rep_dim;
  s.proj_dim = proj_dim;
  s.num_classes = num_classes;
  s.proj_layers = proj_layers;
  s.with_momentum = with_momentum;
  s.seed = seed;
  return build_bundle<T>(s);
}

struct Heads {
  bool rep = false;
  bool proj = false;
  bool logits = false;
  static Heads Rep() { return {true, false, false}; }
  static Heads Proj() { return {false, true, false}; }
  static Heads Logits() { return {false, false, true}; }
};

/// Outputs of one forward pass; traces are retained only when requested so
/// a later backward pass can run.
template <typename T>
struct ForwardOut {
  Tensor<T> rep, proj, logits;
  SeqTrace<T> enc_tr, proj_tr, cls_tr;
  bool traced = false;
};

template <typename T>
inline void check_batch_shape(const ModelBundle<T>& b, const Tensor<T>& x) {
  if (x.ndim() != 4 || x.dim(1) != b.spec.in_c || x.dim(2) != b.spec.in_h ||
      x.dim(3) != b.spec.in_w)
    throw ArgumentError("forward: batch shape " + x.shape_str() +
                        " does not match bundle input");
}

/// Evaluate requested heads. Heads not requested are never evaluated (see
/// the bundle's evaluation counters). No side effects on parameters.
template <typename T>
inline ForwardOut<T> forward(const ModelBundle<T>& b, const Tensor<T>& x,
                             Heads heads, bool traced = false) {
  check_batch_shape(b, x);
  ForwardOut<T> out;
  out.traced = traced;
  b.encoder_evals.fetch_add(1, std::memory_order_relaxed);
  out.rep = b.encoder.forward(x, traced ? &out.enc_tr : nullptr);
  if (heads.proj) {
    b.projector_evals.fetch_add(1, std::memory_order_relaxed);
    out.proj = b.projector.forward(out.rep, traced ? &out.proj_tr : nullptr);
  }
  if (heads.logits) {
    b.classifier_evals.fetch_add(1, std::memory_order_relaxed);
    out.logits =
        b.classifier.forward(out.rep, traced ? &out.cls_tr : nullptr);
  }
  return out;
}

/// Forward through the EMA branch (momentum encoder + projector).
template <typename T>
inline Tensor<T> forward_momentum_proj(const ModelBundle<T>& b,
                                       const Tensor<T>& x) {
  if (!b.momentum) throw StateError("bundle has no momentum copy");
  check_batch_shape(b, x);
  return b.momentum->projector.forward(b.momentum->encoder.forward(x));
}

/// Apply the predictor head; trace retained for backward when requested.
template <typename T>
inline Tensor<T> forward_predictor(const ModelBundle<T>& b, const Tensor<T>& z,
                                   SeqTrace<T>* tr = nullptr) {
  if (!b.predictor) throw StateError("bundle has no predictor head");
  return b.predictor->forward(z, tr);
}

/// Back-propagate head gradients to the input pixels. Any subset of head
/// gradients may be supplied; parameter gradients accumulate into `gs`
/// when non-null (pass null to leave parameters strictly untouched).
template <typename T>
inline Tensor<T> backward_to_input(const ModelBundle<T>& b,
                                   const ForwardOut<T>& f,
                                   const std::type_identity_t<Tensor<T>>* d_rep,
                                   const std::type_identity_t<Tensor<T>>* d_proj,
                                   const std::type_identity_t<Tensor<T>>* d_logits,
                                   std::type_identity_t<GradientSet<T>>* gs) {
  if (!f.traced)
    throw StateError("backward_to_input requires a traced forward pass");
  Tensor<T> acc(f.rep.shape);
  if (d_rep) {
    if (!d_rep->same_shape(f.rep))
      throw ArgumentError("backward_to_input: d_rep shape mismatch");
    acc = *d_rep;
  }
  if (d_proj) {
    Tensor<T> g = b.projector.backward(f.proj_tr, *d_proj, gs);
    for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += g.v[i];
  }
  if (d_logits) {
    Tensor<T> g = b.classifier.backward(f.cls_tr, *d_logits, gs);
    for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += g.v[i];
  }
  return b.encoder.backward(f.enc_tr, acc, gs);
}

/// A scalar loss over forward outputs plus its gradients w.r.t. whichever
/// heads it consumes. `differentiable=false` models closures that cannot
/// supply gradients.
template <typename T>
struct LossClosure {
  Heads heads;
  bool differentiable = true;
  /// Fills any of the gradient slots it uses; returns the loss value.
  std::function<double(const ForwardOut<T>&, Tensor<T>* d_rep,
                       Tensor<T>* d_proj, Tensor<T>* d_logits)>
      eval;
};

/// Exact gradient of the closure's scalar w.r.t. input pixels. Parameters
/// are untouched.
template <typename T>
inline Tensor<T> grad_wrt_input(const ModelBundle<T>& b, const Tensor<T>& x,
                                const LossClosure<T>& closure) {
  if (!closure.differentiable)
    throw UnsupportedOperationError(
        "grad_wrt_input: loss closure is not differentiable");
  ForwardOut<T> f = forward(b, x, closure.heads, /*traced=*/true);
  Tensor<T> d_rep(f.rep.shape), d_proj, d_logits;
  bool use_rep = false, use_proj = false, use_logits = false;
  if (closure.heads.proj) d_proj = Tensor<T>(f.proj.shape);
  if (closure.heads.logits) d_logits = Tensor<T>(f.logits.shape);
  closure.eval(f, closure.heads.rep ? (use_rep = true, &d_rep) : nullptr,
               closure.heads.proj ? (use_proj = true, &d_proj) : nullptr,
               closure.heads.logits ? (use_logits = true, &d_logits)
                                    : nullptr);
  return backward_to_input(b, f, use_rep ? &d_rep : nullptr,
                           use_proj ? &d_proj : nullptr,
                           use_logits ? &d_logits : nullptr, nullptr);
}

/// momentum <- m * momentum + (1 - m) * source, elementwise over the
/// encoder and projector parameters.
template <typename T>
inline void momentum_update(ModelBundle<T>& b, double m) {
  if (!b.momentum) throw StateError("momentum_update: bundle has no momentum "
                                    "copy");
  if (m < 0.0 || m > 1.0)
    throw ArgumentError("momentum_update: m must be in [0,1]");
  ParameterSet<T> src, dst;
  b.encoder.params(src);
  b.projector.params(src);
  b.encoder.buffers(src);
  b.projector.buffers(src);
  b.momentum->encoder.params(dst);
  b.momentum->projector.params(dst);
  b.momentum->encoder.buffers(dst);
  b.momentum->projector.buffers(dst);
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto& s = *src[i].value;
    auto& d = *dst[i].value;
    for (std::size_t j = 0; j < s.size(); ++j)
      d[j] = static_cast<T>(m * double(d[j]) + (1.0 - m) * double(s[j]));
  }
  ++b.param_version;
}

// --- checkpoints -----------------------------------------------------------

inline data::json spec_to_json(const BuildSpec& s) {
  return data::json{{"arch", arch_name(s.arch)},
                    {"in_c", s.in_c},
                    {"in_h", s.in_h},
                    {"in_w", s.in_w},
                    {"rep_dim", s.rep_dim},
                    {"proj_dim", s.proj_dim},
                    {"num_classes", s.num_classes},
                    {"proj_layers", s.proj_layers},
                    {"with_momentum", s.with_momentum},
                    {"with_predictor", s.with_predictor},
                    {"conv_width", s.conv_width},
                    {"mlp_hidden", s.mlp_hidden},
                    {"seed", s.seed}};
}

inline BuildSpec spec_from_json(const data::json& j) {
  BuildSpec s;
  s.arch = arch_from_name(j.at("arch"));
  s.in_c = j.at("in_c");
  s.in_h = j.at("in_h");
  s.in_w = j.at("in_w");
  s.rep_dim = j.at("rep_dim");
  s.proj_dim = j.at("proj_dim");
  s.num_classes = j.at("num_classes");
  s.proj_layers = j.at("proj_layers");
  s.with_momentum = j.at("with_momentum");
  s.with_predictor = j.at("with_predictor");
  s.conv_width = j.at("conv_width");
  s.mlp_hidden = j.at("mlp_hidden");
  s.seed = j.at("seed");
  return s;
}

inline void save_checkpoint(const std::string& path, ModelBundle<float>& b,
                            const std::map<std::string, std::string>& config =
                                {}) {
  ParameterSet<float> ps = b.all_parameters();
  std::vector<Tensor<float>> storage;
  storage.reserve(ps.size());
  std::vector<std::pair<std::string, const Tensor<float>*>> arrays;
  for (auto& p : ps) {
    storage.emplace_back(
        Tensor<float>({static_cast<int>(p.value->size())}, *p.value));
  }
  for (std::size_t i = 0; i < ps.size(); ++i)
    arrays.emplace_back(ps[i].name, &storage[i]);
  data::json h;
  h["arch_spec"] = spec_to_json(b.spec);
  data::save_container(path, "checkpoint", std::move(h), arrays, config);
}

inline ModelBundle<float> load_checkpoint(const std::string& path) {
  data::Container c = data::load_container(path);
  if (c.header.value("kind", "") != "checkpoint")
    throw FormatError("container kind is not checkpoint");
  if (!c.header.contains("arch_spec"))
    throw FormatError("checkpoint header missing field 'arch_spec'");
  ModelBundle<float> b = build_bundle<float>(spec_from_json(
      c.header["arch_spec"]));
  for (auto& p : b.all_parameters()) {
    auto it = c.arrays.find(p.name);
    if (it == c.arrays.end())
      throw FormatError("checkpoint missing parameter array '" + p.name + "'");
    if (it->second.size() != p.value->size())
      throw FormatError("checkpoint parameter '" + p.name + "' has wrong "
                        "size");
    *p.value = it->second;
  }
  return b;
}

/// FNV-1a over the bytes of selected parameters; used to verify freeze
/// contracts.
template <typename T>
inline std::uint64_t parameter_hash(ParameterSet<T> ps) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto& p : ps) {
    h = fnv1a(p.name, h);
    const unsigned char* bytes =
        reinterpret_cast<const unsigned char*>(p.value->data());
    for (std::size_t i = 0; i < p.value->size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace poisonforge::model
