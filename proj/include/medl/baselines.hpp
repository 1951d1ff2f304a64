#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "medl/cvae.hpp"
#include "medl/data.hpp"
#include "medl/nn.hpp"

namespace medl {

// -------------------------------------------------------- independent ---

struct IndependentConfig {
  std::size_t feature_dim = 0;
  std::size_t label_count = 0;
  std::vector<std::size_t> feature_widths{64, 64};  // empty: phi(x) = x
  std::vector<std::size_t> head_hidden{64};
  Activation hidden = Activation::relu;
  double keep_prob = 0.8;

  std::size_t phi_dim() const { return feature_widths.empty() ? feature_dim : feature_widths.back(); }
  void validate() const {
    if (feature_dim == 0 || label_count == 0) throw ValidationError("independent: k and l must be positive");
  }
};

/// Feature net plus a head emitting one logit per label; labels are conditionally independent.
class IndependentModel {
 public:
  struct Binding {
    std::optional<MlpBinding> feature;
    MlpBinding head;

    VarId logits(Tape& tape, VarId x, Mode mode = Mode::eval, Rng* rng = nullptr) const {
      const VarId phi = feature ? feature->forward(tape, x, mode, rng) : x;
      return head.forward(tape, phi, mode, rng);
    }
  };

  IndependentModel() = default;

  IndependentModel(IndependentConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const auto& c = config_;
    if (!c.feature_widths.empty()) {
      std::vector<std::size_t> hidden(c.feature_widths.begin(), c.feature_widths.end() - 1);
      feature_ = Mlp(detail::make_spec(c.feature_dim, hidden, c.feature_widths.back(), c.hidden, c.keep_prob),
                     stream_seed(seed, 21));
    }
    head_ = Mlp(detail::make_spec(c.phi_dim(), c.head_hidden, c.label_count, c.hidden, c.keep_prob),
                stream_seed(seed, 22));
  }

  const IndependentConfig& config() const { return config_; }
  bool has_feature_net() const { return !config_.feature_widths.empty(); }
  Mlp& feature() { return feature_; }
  Mlp& head() { return head_; }
  const Mlp& feature() const { return feature_; }
  const Mlp& head() const { return head_; }

  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    if (has_feature_net()) feature_.collect("feature", out);
    head_.collect("head", out);
    return out;
  }

  std::vector<Tensor*> parameter_tensors() {
    std::vector<Tensor*> out;
    for (auto& p : parameters()) out.push_back(p.value);
    return out;
  }

  Binding bind(Tape& tape, bool trainable = false) const {
    Binding b;
    if (has_feature_net()) b.feature = feature_.bind(tape, trainable);
    b.head = head_.bind(tape, trainable);
    return b;
  }

  Binding bind(std::span<const VarId> ids) const {
    Binding b;
    if (has_feature_net()) b.feature = feature_.bind(ids);
    b.head = head_.bind(ids);
    if (!ids.empty()) throw Error("independent: too many bound parameters");
    return b;
  }

  /// Logits [N, l] for feature rows [N, k].
  Tensor logits(const Tensor& x) const {
    Tape tape;
    return tape.value(bind(tape).logits(tape, tape.constant(x)));
  }

 private:
  IndependentConfig config_;
  Mlp feature_, head_;
};

inline BatchLoss independent_loss(const IndependentModel& model) {
  return [&model](Tape& tape, std::span<const VarId> params, const Tensor& x, const Tensor& y, Mode mode,
                  Rng& rng) {
    const auto b = model.bind(params);
    const VarId ll = bernoulli_loglik(tape, tape.constant(y), b.logits(tape, tape.constant(x), mode, &rng));
    return tape.reduce_mean(tape.negate(ll));
  };
}

inline TrainResult train_independent(IndependentModel& model, const LabeledDataset& train,
                                     const LabeledDataset& val, const TrainConfig& config,
                                     const EpochCallback& on_epoch = {}) {
  const auto& c = model.config();
  for (const LabeledDataset* ds : {&train, &val})
    if (ds->feature_dim() != c.feature_dim || ds->label_count() != c.label_count)
      throw ValidationError("independent: dataset shape (k=" + std::to_string(ds->feature_dim()) +
                            ", l=" + std::to_string(ds->label_count()) + ") does not match model");
  const auto params = model.parameter_tensors();
  return fit(params, train.features, train.labels, val.features, val.labels, config, independent_loss(model),
             on_epoch);
}

/// Exact log Pr(y | x) = sum_j log Pr(y_j | x).
inline double independent_jll(const IndependentModel& model, std::span<const double> x, std::span<const int> y) {
  const Tensor t = model.logits(as_row(x));
  return bernoulli_loglik(y, t.data());
}

// -------------------------------------------------------------- chain ---

struct ChainConfig {
  std::size_t feature_dim = 0;
  std::size_t label_count = 0;
  std::vector<std::size_t> hidden_widths{64};
  Activation hidden = Activation::relu;
  double keep_prob = 0.8;
  std::vector<std::size_t> label_order;  // empty: column order

  void validate() const {
    if (feature_dim == 0) throw ValidationError("pcc: k must be positive");
    if (!label_order.empty()) {
      if (label_order.size() != label_count) throw ValidationError("pcc: label_order length differs from l");
      std::vector<bool> seen(label_count, false);
      for (std::size_t j : label_order) {
        if (j >= label_count || seen[j]) throw ValidationError("pcc: label_order is not a permutation");
        seen[j] = true;
      }
    }
  }

  std::vector<std::size_t> order() const {
    if (!label_order.empty()) return label_order;
    std::vector<std::size_t> o(label_count);
    std::iota(o.begin(), o.end(), std::size_t{0});
    return o;
  }
};

/// Probabilistic classifier chain. Classifier j sees [x ++ y_order[0..j)] and
/// predicts y_order[j]; the joint is the exact chain-rule product.
class ChainModel {
 public:
  inline static constexpr std::size_t kMaxEnumeratedLabels = 20;

  struct Binding {
    std::vector<MlpBinding> classifiers;
  };

  ChainModel() = default;

  ChainModel(ChainConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    order_ = config_.order();
    for (std::size_t j = 0; j < config_.label_count; ++j)
      classifiers_.emplace_back(
          detail::make_spec(config_.feature_dim + j, config_.hidden_widths, 1, config_.hidden, config_.keep_prob),
          stream_seed(seed, 100 + j));
  }

  const ChainConfig& config() const { return config_; }
  const std::vector<std::size_t>& order() const { return order_; }
  std::vector<Mlp>& classifiers() { return classifiers_; }
  const std::vector<Mlp>& classifiers() const { return classifiers_; }

  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (std::size_t j = 0; j < classifiers_.size(); ++j)
      classifiers_[j].collect("chain" + std::to_string(j + 1), out);
    return out;
  }

  std::vector<Tensor*> parameter_tensors() {
    std::vector<Tensor*> out;
    for (auto& p : parameters()) out.push_back(p.value);
    return out;
  }

  Binding bind(Tape& tape, bool trainable = false) const {
    Binding b;
    for (const auto& c : classifiers_) b.classifiers.push_back(c.bind(tape, trainable));
    return b;
  }

  Binding bind(std::span<const VarId> ids) const {
    Binding b;
    for (const auto& c : classifiers_) b.classifiers.push_back(c.bind(ids));
    if (!ids.empty()) throw Error("pcc: too many bound parameters");
    return b;
  }

 private:
  ChainConfig config_;
  std::vector<std::size_t> order_;
  std::vector<Mlp> classifiers_;
};

namespace detail {

/// Columns of y rearranged into chain order.
inline Tensor ordered_labels(const ChainModel& chain, const Tensor& y) {
  const std::size_t rows = y.dim(0), l = chain.config().label_count;
  const auto& order = chain.order();
  Tensor out({rows, l});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < l; ++j) out.at(r, j) = y.at(r, order[j]);
  return out;
}

/// Per-row log Pr(ordered[:, j] | x, ordered[:, <j]) from classifier j. Returns [B].
inline VarId link_loglik(Tape& tape, const MlpBinding& classifier, std::size_t j, VarId xs, VarId ys,
                         const Tensor& ordered, Mode mode, Rng* rng) {
  const std::size_t rows = ordered.dim(0);
  const VarId input = j == 0 ? xs : tape.concat(xs, tape.slice(ys, 0, j));
  const VarId logit = classifier.forward(tape, input, mode, rng);
  Tensor target({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) target[r] = ordered.at(r, j);
  return bernoulli_loglik(tape, tape.constant(std::move(target)), logit);
}

}  // namespace detail

/// Per-row sum_j log Pr(y_order[j] | x, y_order[<j]) with teacher-forced prefixes. Returns [B].
inline VarId chain_loglik_graph(Tape& tape, const ChainModel& chain, const ChainModel::Binding& b, const Tensor& x,
                                const Tensor& y, Mode mode = Mode::eval, Rng* rng = nullptr) {
  const std::size_t l = chain.config().label_count;
  if (l == 0) throw ValidationError("pcc: chain has no labels");
  const Tensor ordered = detail::ordered_labels(chain, y);
  const VarId xs = tape.constant(x);
  const VarId ys = tape.constant(ordered);
  VarId total{};
  for (std::size_t j = 0; j < l; ++j) {
    const VarId ll = detail::link_loglik(tape, b.classifiers[j], j, xs, ys, ordered, mode, rng);
    total = j == 0 ? ll : tape.add(total, ll);
  }
  return total;
}

inline BatchLoss chain_loss(const ChainModel& chain) {
  return [&chain](Tape& tape, std::span<const VarId> params, const Tensor& x, const Tensor& y, Mode mode, Rng& rng) {
    const auto b = chain.bind(params);
    return tape.reduce_mean(tape.negate(chain_loglik_graph(tape, chain, b, x, y, mode, &rng)));
  };
}

/// Trains the chain classifiers on teacher-forced true prefixes. Each classifier
/// has its own Adam state and early stopper; a stopped classifier is frozen at
/// its best-validation parameters while the others continue. Both logged losses
/// are sums over classifiers, with frozen ones contributing their last values.
inline TrainResult train_pcc(ChainModel& chain, const LabeledDataset& train, const LabeledDataset& val,
                             const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  const auto& c = chain.config();
  for (const LabeledDataset* ds : {&train, &val})
    if (ds->feature_dim() != c.feature_dim || ds->label_count() != c.label_count)
      throw ValidationError("pcc: dataset shape (k=" + std::to_string(ds->feature_dim()) +
                            ", l=" + std::to_string(ds->label_count()) + ") does not match model");
  if (config.batch == 0) throw ValidationError("fit: batch size must be positive");

  const std::size_t l = c.label_count, n = train.size();
  const Tensor train_y = detail::ordered_labels(chain, train.labels);
  const Tensor val_y = detail::ordered_labels(chain, val.labels);

  struct Link {
    std::vector<Tensor*> params;
    AdamState adam;
    EarlyStopper stopper;
    std::vector<Tensor> best;
    bool active = true;
    double train_loss = 0.0, val_loss = 0.0;
  };
  std::vector<Link> links;
  links.reserve(l);
  for (std::size_t j = 0; j < l; ++j) {
    std::vector<ParamRef> refs;
    chain.classifiers()[j].collect("", refs);
    std::vector<Tensor*> params;
    for (const auto& r : refs) params.push_back(r.value);
    links.push_back(Link{params, AdamState(config.adam, params), EarlyStopper(config.patience), {}, true, 0.0, 0.0});
  }

  Rng shuffle_rng(stream_seed(config.seed, 1));
  Rng noise_rng(stream_seed(config.seed, 2));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainResult result;
  double best_total = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<double> train_total(l, 0.0);
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch, ++batch_index) {
      const std::size_t end = std::min(n, begin + config.batch);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const Tensor bx = train.features.gather_rows(rows);
      const Tensor by = train_y.gather_rows(rows);
      for (std::size_t j = 0; j < l; ++j) {
        Link& link = links[j];
        if (!link.active) continue;
        try {
          Tape tape;
          const MlpBinding bound = chain.classifiers()[j].bind(tape, true);
          const VarId ll = detail::link_loglik(tape, bound, j, tape.constant(bx), tape.constant(by), by, Mode::train,
                                               &noise_rng);
          const VarId loss = tape.reduce_mean(tape.negate(ll));
          const Gradients grads = tape.backward(loss);
          std::vector<Tensor> g;
          for (std::size_t i = 0; i < bound.weights.size(); ++i) {
            g.push_back(grads[bound.weights[i]]);
            g.push_back(grads[bound.biases[i]]);
          }
          link.adam.step(link.params, g);
          train_total[j] += tape.value(loss).item() * static_cast<double>(end - begin);
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                             ", classifier " + std::to_string(j + 1) + ": " + e.what());
        } catch (const DomainError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                             ", classifier " + std::to_string(j + 1) + ": " + e.what());
        }
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    for (std::size_t j = 0; j < l; ++j) {
      Link& link = links[j];
      if (link.active) {
        link.train_loss = train_total[j] / static_cast<double>(n);
        try {
          Tape tape;
          const MlpBinding bound = chain.classifiers()[j].bind(tape, false);
          const VarId ll = detail::link_loglik(tape, bound, j, tape.constant(val.features), tape.constant(val_y),
                                               val_y, Mode::eval, nullptr);
          link.val_loss = -tape.value(tape.reduce_mean(ll)).item();
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + " validation, classifier " + std::to_string(j + 1) +
                             ": " + e.what());
        } catch (const DomainError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + " validation, classifier " + std::to_string(j + 1) +
                             ": " + e.what());
        }
        const bool stop = link.stopper.update(link.val_loss);
        if (link.stopper.improved_last()) {
          link.best.clear();
          for (Tensor* p : link.params) link.best.push_back(*p);
        }
        if (stop) {
          link.active = false;
          link.val_loss = link.stopper.best();
          if (config.restore_best && !link.best.empty())
            for (std::size_t i = 0; i < link.params.size(); ++i) *link.params[i] = link.best[i];
        }
      }
      m.train_loss += link.train_loss;
      m.val_loss += link.val_loss;
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
    if (m.val_loss < best_total - EarlyStopper::kMinDelta) {
      best_total = m.val_loss;
      result.best_epoch = epoch;
    }
    if (std::none_of(links.begin(), links.end(), [](const Link& k) { return k.active; })) {
      result.stopped_early = true;
      break;
    }
  }
  if (config.restore_best)
    for (Link& link : links)
      if (link.active && !link.best.empty())
        for (std::size_t i = 0; i < link.params.size(); ++i) *link.params[i] = link.best[i];
  return result;
}

inline double pcc_joint_loglik(const ChainModel& chain, std::span<const double> x, std::span<const int> y) {
  if (y.size() != chain.config().label_count) throw ShapeError("pcc: label length mismatch");
  Tape tape;
  const auto b = chain.bind(tape);
  return tape.value(chain_loglik_graph(tape, chain, b, as_row(x), as_row(y))).item();
}

/// log Pr(y | x) for all 2^l outcomes, indexed by outcome_index(y). Computed level by
/// level over chain prefixes, so classifier j runs once on 2^j rows.
inline std::vector<double> pcc_joint_table(const ChainModel& chain, std::span<const double> x) {
  const std::size_t l = chain.config().label_count, k = chain.config().feature_dim;
  if (l > ChainModel::kMaxEnumeratedLabels)
    throw ValidationError("pcc: exhaustive enumeration refused for l=" + std::to_string(l) + " > " +
                          std::to_string(ChainModel::kMaxEnumeratedLabels));
  if (x.size() != k) throw ShapeError("pcc: context length mismatch");
  if (l == 0) return {0.0};

  // prefixes[p] holds chain-order bits of prefix p (bit j at position j); logp[p] its log-probability.
  std::vector<double> logp{0.0};
  std::vector<std::size_t> prefixes{0};
  for (std::size_t j = 0; j < l; ++j) {
    const std::size_t count = prefixes.size();
    Tensor input({count, k + j});
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t c = 0; c < k; ++c) input.at(p, c) = x[c];
      for (std::size_t i = 0; i < j; ++i) input.at(p, k + i) = static_cast<double>((prefixes[p] >> i) & 1U);
    }
    const Tensor t = mlp_predict(chain.classifiers()[j], input);
    std::vector<double> next_logp(2 * count);
    std::vector<std::size_t> next_prefix(2 * count);
    for (std::size_t p = 0; p < count; ++p) {
      next_logp[2 * p] = logp[p] - softplus(t[p]);         // y = 0
      next_logp[2 * p + 1] = logp[p] - softplus(-t[p]);    // y = 1
      next_prefix[2 * p] = prefixes[p];
      next_prefix[2 * p + 1] = prefixes[p] | (std::size_t{1} << j);
    }
    logp = std::move(next_logp);
    prefixes = std::move(next_prefix);
  }

  const auto& order = chain.order();
  std::vector<double> table(logp.size());
  std::vector<int> y(l);
  for (std::size_t p = 0; p < prefixes.size(); ++p) {
    for (std::size_t j = 0; j < l; ++j) y[order[j]] = static_cast<int>((prefixes[p] >> j) & 1U);
    table[outcome_index(y)] = logp[p];
  }
  return table;
}

/// Argmax of a joint table indexed by outcome_index; ties go to the lexicographically smallest y.
inline std::vector<int> table_mode(std::span<const double> table, std::size_t l) {
  if (table.size() != (std::size_t{1} << l)) throw ShapeError("table_mode: table size is not 2^l");
  if (l == 0) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < table.size(); ++i)
    if (table[i] > table[best]) best = i;
  return outcome_labels(best, l);
}

/// Exhaustive argmax of the chain's joint.
inline std::vector<int> pcc_joint_mode(const ChainModel& chain, std::span<const double> x) {
  return table_mode(pcc_joint_table(chain, x), chain.config().label_count);
}

/// Greedy decoding: each label set to its more probable value given the chosen prefix.
inline std::vector<int> pcc_greedy_mode(const ChainModel& chain, std::span<const double> x) {
  const std::size_t l = chain.config().label_count;
  std::vector<int> y(l, 0);
  std::vector<double> input(x.begin(), x.end());
  for (std::size_t j = 0; j < l; ++j) {
    const double t = mlp_predict(chain.classifiers()[j], as_row(input))[0];
    const int bit = t > 0.0;
    y[chain.order()[j]] = bit;
    input.push_back(bit);
  }
  return y;
}

}  // namespace medl
