#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medl/autodiff.hpp"
#include "medl/error.hpp"
#include "medl/tensor.hpp"

namespace medl {

using Rng = std::mt19937_64;

/// Derives an independent seed for `stream` from `base` (splitmix64 finalizer).
inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(base ^ mix(stream));
}

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

enum class Activation { identity, relu, tanh, sigmoid };
enum class Mode { train, eval };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

inline VarId apply_activation(Tape& tape, VarId x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return tape.relu(x);
    case Activation::tanh: return tape.tanh(x);
    case Activation::sigmoid: return tape.sigmoid(x);
  }
  return x;
}

/// Layer widths include the input: {in, hidden..., out}.
struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;
  double keep_prob = 1.0;

  std::size_t layer_count() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }

  void validate() const {
    if (widths.size() < 2) throw ValidationError("mlp: need at least one layer");
    for (std::size_t w : widths)
      if (w == 0) throw ValidationError("mlp: zero layer width");
    if (hidden != Activation::relu && hidden != Activation::tanh)
      throw ValidationError("mlp: hidden activation must be relu or tanh");
    if (output != Activation::identity && output != Activation::sigmoid)
      throw ValidationError("mlp: output activation must be identity or sigmoid");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0))
      throw ValidationError("mlp: keep probability must lie in (0, 1]");
  }
};

struct DenseLayer {
  Tensor weight;  // fan_in x fan_out
  Tensor bias;    // fan_out
};

struct ParamRef {
  std::string name;
  Tensor* value;
};

struct MlpBinding;

class Mlp {
 public:
  Mlp() = default;

  /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
  Mlp(MlpSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    for (std::size_t i = 0; i < spec_.layer_count(); ++i) {
      const std::size_t fan_in = spec_.widths[i], fan_out = spec_.widths[i + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> uniform(-bound, bound);
      DenseLayer layer{Tensor({fan_in, fan_out}), Tensor({fan_out}, 0.0)};
      for (double& w : layer.weight.data()) {
        do {
          w = uniform(rng);
        } while (!(std::abs(w) < bound));
      }
      layers_.push_back(std::move(layer));
    }
  }

  const MlpSpec& spec() const { return spec_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Appends "<prefix>.layerN.weight" / ".bias" (N from 1) to `out`.
  void collect(std::string_view prefix, std::vector<ParamRef>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string base = std::string(prefix) + ".layer" + std::to_string(i + 1);
      out.push_back({base + ".weight", &layers_[i].weight});
      out.push_back({base + ".bias", &layers_[i].bias});
    }
  }

  /// Registers the weights on `tape`, as parameters or as constants.
  MlpBinding bind(Tape& tape, bool trainable = true) const;

  /// Binds ids already on a tape, consumed in collect() order (weight, bias per layer).
  MlpBinding bind(std::span<const VarId>& ids) const;

 private:
  MlpSpec spec_;
  std::vector<DenseLayer> layers_;
};

/// An Mlp's weights placed on one tape.
struct MlpBinding {
  const MlpSpec* spec = nullptr;
  std::vector<VarId> weights;
  std::vector<VarId> biases;

  /// affine -> activation per layer; train mode applies inverted dropout to hidden units.
  VarId forward(Tape& tape, VarId input, Mode mode = Mode::eval, Rng* dropout_rng = nullptr) const {
    const Shape in_shape = tape.shape(input);
    if (in_shape.size() != 2 || in_shape[1] != spec->input_width())
      throw ShapeError("mlp: input shape " + shape_str(in_shape) + " does not match fan_in " +
                       std::to_string(spec->input_width()));
    const bool dropout = mode == Mode::train && spec->keep_prob < 1.0;
    if (dropout && dropout_rng == nullptr) throw Error("mlp: train-mode dropout needs an rng");

    VarId h = input;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      h = tape.add_row(tape.matmul(h, weights[i]), biases[i]);
      const bool last = i + 1 == weights.size();
      h = apply_activation(tape, h, last ? spec->output : spec->hidden);
      if (!last && dropout) {
        std::bernoulli_distribution keep(spec->keep_prob);
        Tensor mask(tape.shape(h));
        const double scale = 1.0 / spec->keep_prob;
        for (double& m : mask.data()) m = keep(*dropout_rng) ? scale : 0.0;
        h = tape.mul(h, tape.constant(std::move(mask)));
      }
    }
    return h;
  }
};

inline MlpBinding Mlp::bind(Tape& tape, bool trainable) const {
  MlpBinding b;
  b.spec = &spec_;
  for (const auto& l : layers_) {
    b.weights.push_back(trainable ? tape.parameter(l.weight) : tape.constant(l.weight));
    b.biases.push_back(trainable ? tape.parameter(l.bias) : tape.constant(l.bias));
  }
  return b;
}

inline MlpBinding Mlp::bind(std::span<const VarId>& ids) const {
  const std::size_t need = 2 * layers_.size();
  if (ids.size() < need) throw Error("mlp: not enough bound parameters");
  MlpBinding b;
  b.spec = &spec_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    b.weights.push_back(ids[2 * i]);
    b.biases.push_back(ids[2 * i + 1]);
  }
  ids = ids.subspan(need);
  return b;
}

/// Convenience: eval-mode forward of an Mlp on a batch of rows.
inline Tensor mlp_predict(const Mlp& mlp, const Tensor& input) {
  Tape tape;
  const MlpBinding b = mlp.bind(tape, false);
  return tape.value(b.forward(tape, tape.constant(input)));
}

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  AdamState(AdamConfig config, std::span<Tensor* const> params) : config_(config) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

  /// Bias-corrected Adam update. A non-finite gradient aborts before anything changes.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ShapeError("adam: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != m_[i].shape())
        throw ShapeError("adam: gradient " + std::to_string(i) + " has shape " +
                         shape_str(grads[i].shape()) + ", expected " + shape_str(m_[i].shape()));
      if (!grads[i].all_finite())
        throw NumericError("adam: non-finite gradient for parameter " + std::to_string(i));
    }
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      const auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        const double m_hat = m[j] / c1;
        const double v_hat = v[j] / c2;
        p[j] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
      }
    }
  }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

class EarlyStopper {
 public:
  static constexpr double kMinDelta = 1e-6;

  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Returns true when training should stop.
  bool update(double val_loss) {
    if (val_loss < best_ - kMinDelta) {
      best_ = val_loss;
      since_ = 0;
      return false;
    }
    return ++since_ >= patience_;
  }

  bool improved_last() const { return since_ == 0; }
  double best() const { return best_; }
  std::size_t epochs_since_improvement() const { return since_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch = 512;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t patience = 20;
  bool restore_best = true;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;  // wall clock; never part of reproducible output
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

/// Mean loss over the rows of (x, y), built on `tape` from parameter ids.
using BatchLoss = std::function<VarId(Tape&, std::span<const VarId> params, const Tensor& x,
                                      const Tensor& y, Mode, Rng&)>;
using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Row-weighted mean of `loss` over a dataset in eval mode.
inline double dataset_loss(std::span<Tensor* const> params, const Tensor& x, const Tensor& y,
                           std::size_t batch, const BatchLoss& loss, Rng& rng) {
  const std::size_t n = x.dim(0);
  double total = 0.0;
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    Tape tape;
    std::vector<VarId> ids;
    for (Tensor* p : params) ids.push_back(tape.constant(*p));
    const VarId l = loss(tape, ids, x.row_range(begin, end), y.row_range(begin, end), Mode::eval, rng);
    total += tape.value(l).item() * static_cast<double>(end - begin);
  }
  return total / static_cast<double>(n);
}

/// Minibatch Adam with per-epoch seeded shuffling and early stopping on the validation loss.
inline TrainResult fit(std::span<Tensor* const> params, const Tensor& train_x, const Tensor& train_y,
                       const Tensor& val_x, const Tensor& val_y, const TrainConfig& config,
                       const BatchLoss& loss, const EpochCallback& on_epoch = {}) {
  if (train_x.rank() != 2 || train_y.rank() != 2 || train_x.dim(0) != train_y.dim(0))
    throw ShapeError("fit: training features and labels disagree on row count");
  if (val_x.rank() != 2 || val_y.rank() != 2 || val_x.dim(0) != val_y.dim(0))
    throw ShapeError("fit: validation features and labels disagree on row count");
  if (config.batch == 0) throw ValidationError("fit: batch size must be positive");

  const std::size_t n = train_x.dim(0);
  Rng shuffle_rng(stream_seed(config.seed, 1));
  Rng noise_rng(stream_seed(config.seed, 2));
  AdamState adam(config.adam, params);
  EarlyStopper stopper(config.patience);
  TrainResult result;
  std::vector<Tensor> best;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double train_total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch, ++batch_index) {
      const std::size_t end = std::min(n, begin + config.batch);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      try {
        Tape tape;
        std::vector<VarId> ids;
        ids.reserve(params.size());
        for (Tensor* p : params) ids.push_back(tape.parameter(*p));
        const VarId l = loss(tape, ids, train_x.gather_rows(rows), train_y.gather_rows(rows),
                             Mode::train, noise_rng);
        const Gradients grads = tape.backward(l);
        std::vector<Tensor> g;
        g.reserve(ids.size());
        for (VarId id : ids) g.push_back(grads[id]);
        adam.step(params, g);
        train_total += tape.value(l).item() * static_cast<double>(end - begin);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_index) + ": " + e.what());
      } catch (const DomainError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
    }

    Rng val_rng(stream_seed(config.seed, 3));
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = train_total / static_cast<double>(n);
    try {
      m.val_loss = dataset_loss(params, val_x, val_y, config.batch, loss, val_rng);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " validation: " + e.what());
    } catch (const DomainError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " validation: " + e.what());
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);

    const bool stop = stopper.update(m.val_loss);
    if (stopper.improved_last()) {
      result.best_epoch = epoch;
      if (config.restore_best) {
        best.clear();
        for (Tensor* p : params) best.push_back(*p);
      }
    }
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  if (config.restore_best && !best.empty())
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = best[i];
  return result;
}

}  // namespace medl
