#pragma once

// Conditional variational auto-encoder over binary label vectors.
//
//   phi = feature(x)
//   prior:        z | x    ~ N(mu_d(phi), diag exp(lv_d(phi)))
//   recognition:  z | x, y ~ N(mu_e(phi ++ y), diag exp(lv_e(phi ++ y)))
//   decoder:      y_j | z, x ~ Bernoulli(sigmoid(t_j(phi ++ z)))
//
// Training maximizes  E_Q[log Pr(y | z, x)] - KL(Q(z | x, y) || Pr(z | x))
// with one reparameterized draw per datapoint.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "medl/autodiff.hpp"
#include "medl/data.hpp"
#include "medl/nn.hpp"

namespace medl {

/// Diagonal Gaussian given by per-dimension mean and log-variance.
struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> log_variance;

  std::size_t dim() const { return mean.size(); }
};

/// Mean and log-variance nodes on a tape, shaped [rows, m] or [m].
struct GaussianVars {
  VarId mean;
  VarId log_variance;
};

inline constexpr double kLogVarianceLimit = 10.0;

/// Splits a [.., 2m] network output into mean and clamped log-variance.
inline GaussianVars split_gaussian(Tape& tape, VarId packed, std::size_t m) {
  const Shape s = tape.shape(packed);
  if (s.empty() || s.back() != 2 * m)
    throw ShapeError("gaussian: expected last dimension " + std::to_string(2 * m) + ", got shape " +
                     shape_str(s));
  return {tape.slice(packed, 0, m),
          tape.clamp(tape.slice(packed, m, 2 * m), -kLogVarianceLimit, kLogVarianceLimit)};
}

/// z = mean + exp(log_variance / 2) * noise
inline VarId reparameterize(Tape& tape, const GaussianVars& q, VarId noise) {
  if (tape.shape(q.mean) != tape.shape(noise) || tape.shape(q.log_variance) != tape.shape(noise))
    throw ShapeError("reparameterize: noise shape " + shape_str(tape.shape(noise)) +
                     " does not match mean shape " + shape_str(tape.shape(q.mean)));
  const VarId sd = tape.exp(tape.scale(q.log_variance, 0.5));
  return tape.add(q.mean, tape.mul(sd, noise));
}

/// KL(q || p) for diagonal Gaussians, summed over the last axis (one value per row).
inline VarId kl_diag_gauss(Tape& tape, const GaussianVars& q, const GaussianVars& p) {
  const Shape s = tape.shape(q.mean);
  if (s.empty() || tape.shape(p.mean) != s || tape.shape(q.log_variance) != s ||
      tape.shape(p.log_variance) != s)
    throw ShapeError("kl_diag_gauss: mismatched shapes " + shape_str(s) + " and " +
                     shape_str(tape.shape(p.mean)));
  const VarId diff = tape.sub(q.mean, p.mean);
  const VarId var_ratio = tape.exp(tape.sub(q.log_variance, p.log_variance));
  const VarId mahalanobis = tape.mul(tape.mul(diff, diff), tape.exp(tape.negate(p.log_variance)));
  // 0.5 * (lv_p - lv_q + var_q / var_p + (mu_q - mu_p)^2 / var_p - 1)
  VarId term = tape.sub(p.log_variance, q.log_variance);
  term = tape.add(term, tape.add(var_ratio, mahalanobis));
  term = tape.add_row(tape.scale(term, 0.5), tape.constant(Tensor({s.back()}, -0.5)));
  return tape.reduce_sum(term, s.size() - 1);
}

/// Sum over the last axis of log Bernoulli(y | sigmoid(logits)), as -softplus((1 - 2y) * t).
inline VarId bernoulli_loglik(Tape& tape, VarId y, VarId logits) {
  const Tensor& yv = tape.value(y);
  if (yv.shape() != tape.shape(logits))
    throw ShapeError("bernoulli_loglik: labels " + shape_str(yv.shape()) + " vs logits " +
                     shape_str(tape.shape(logits)));
  Tensor sign(yv.shape());
  for (std::size_t i = 0; i < yv.size(); ++i) {
    if (yv[i] != 0.0 && yv[i] != 1.0) throw DomainError("bernoulli_loglik: non-binary label");
    sign[i] = 1.0 - 2.0 * yv[i];
  }
  const std::size_t last = yv.rank() - 1;  // yv dangles once the tape grows
  const VarId nll = tape.softplus(tape.mul(tape.constant(std::move(sign)), logits));
  return tape.negate(tape.reduce_sum(nll, last));
}

// Value-level conveniences over single vectors.

inline std::vector<double> reparameterize(const GaussianParams& q, std::span<const double> noise) {
  if (q.mean.size() != noise.size() || q.log_variance.size() != noise.size() || noise.empty())
    throw ShapeError("reparameterize: length mismatch");
  Tape tape;
  const GaussianVars vars{tape.constant(Tensor::vector(q.mean)), tape.constant(Tensor::vector(q.log_variance))};
  const VarId z = reparameterize(tape, vars, tape.constant(Tensor::vector({noise.begin(), noise.end()})));
  return tape.value(z).values();
}

inline double kl_diag_gauss(const GaussianParams& q, const GaussianParams& p) {
  if (q.dim() == 0 || q.dim() != p.dim() || q.log_variance.size() != q.dim() ||
      p.log_variance.size() != p.dim())
    throw ShapeError("kl_diag_gauss: length mismatch");
  Tape tape;
  auto put = [&](const GaussianParams& g) {
    return GaussianVars{tape.constant(Tensor::vector(g.mean)), tape.constant(Tensor::vector(g.log_variance))};
  };
  const GaussianVars qv = put(q);
  const GaussianVars pv = put(p);
  return tape.value(kl_diag_gauss(tape, qv, pv)).item();
}

inline double bernoulli_loglik(std::span<const int> y, std::span<const double> logits) {
  if (y.size() != logits.size() || y.empty()) throw ShapeError("bernoulli_loglik: length mismatch");
  Tape tape;
  std::vector<double> yd(y.begin(), y.end());
  for (int v : y)
    if (v != 0 && v != 1) throw DomainError("bernoulli_loglik: non-binary label");
  const VarId out = bernoulli_loglik(tape, tape.constant(Tensor::vector(std::move(yd))),
                                     tape.constant(Tensor::vector({logits.begin(), logits.end()})));
  return tape.value(out).item();
}

// ---------------------------------------------------------------- model ---

struct CvaeConfig {
  std::size_t feature_dim = 0;  // k
  std::size_t label_count = 0;  // l
  std::size_t latent_dim = 16;  // m
  std::vector<std::size_t> feature_widths{64, 64};  // empty: phi(x) = x
  std::vector<std::size_t> prior_hidden{32};
  std::vector<std::size_t> recognition_hidden{32};
  std::vector<std::size_t> decoder_hidden{64};
  Activation hidden = Activation::relu;
  double keep_prob = 0.8;

  std::size_t phi_dim() const { return feature_widths.empty() ? feature_dim : feature_widths.back(); }

  void validate() const {
    if (feature_dim == 0 || label_count == 0 || latent_dim == 0)
      throw ValidationError("cvae: k, l and m must be positive");
  }
};

namespace detail {

inline MlpSpec make_spec(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                         Activation act, double keep) {
  MlpSpec s;
  s.widths.push_back(in);
  s.widths.insert(s.widths.end(), hidden.begin(), hidden.end());
  s.widths.push_back(out);
  s.hidden = act;
  s.output = Activation::identity;
  s.keep_prob = keep;
  return s;
}

}  // namespace detail

class CvaeModel {
 public:
  struct Binding {
    std::optional<MlpBinding> feature;
    MlpBinding prior, recognition, decoder;
  };

  CvaeModel() = default;

  CvaeModel(CvaeConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const auto& c = config_;
    if (!c.feature_widths.empty()) {
      std::vector<std::size_t> hidden(c.feature_widths.begin(), c.feature_widths.end() - 1);
      feature_ = Mlp(detail::make_spec(c.feature_dim, hidden, c.feature_widths.back(), c.hidden, c.keep_prob),
                     stream_seed(seed, 11));
    }
    const std::size_t f = c.phi_dim(), m = c.latent_dim;
    prior_ = Mlp(detail::make_spec(f, c.prior_hidden, 2 * m, c.hidden, c.keep_prob), stream_seed(seed, 12));
    recognition_ = Mlp(detail::make_spec(f + c.label_count, c.recognition_hidden, 2 * m, c.hidden, c.keep_prob),
                       stream_seed(seed, 13));
    decoder_ = Mlp(detail::make_spec(f + m, c.decoder_hidden, c.label_count, c.hidden, c.keep_prob),
                   stream_seed(seed, 14));
  }

  const CvaeConfig& config() const { return config_; }
  bool has_feature_net() const { return !config_.feature_widths.empty(); }
  Mlp& feature() { return feature_; }
  Mlp& prior() { return prior_; }
  Mlp& recognition() { return recognition_; }
  Mlp& decoder() { return decoder_; }
  const Mlp& feature() const { return feature_; }
  const Mlp& prior() const { return prior_; }
  const Mlp& recognition() const { return recognition_; }
  const Mlp& decoder() const { return decoder_; }

  /// Canonical parameter order and names ("decoder.layer1.weight", ...).
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    if (has_feature_net()) feature_.collect("feature", out);
    prior_.collect("prior", out);
    recognition_.collect("recognition", out);
    decoder_.collect("decoder", out);
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
    b.prior = prior_.bind(tape, trainable);
    b.recognition = recognition_.bind(tape, trainable);
    b.decoder = decoder_.bind(tape, trainable);
    return b;
  }

  Binding bind(std::span<const VarId> ids) const {
    Binding b;
    if (has_feature_net()) b.feature = feature_.bind(ids);
    b.prior = prior_.bind(ids);
    b.recognition = recognition_.bind(ids);
    b.decoder = decoder_.bind(ids);
    if (!ids.empty()) throw Error("cvae: too many bound parameters");
    return b;
  }

 private:
  CvaeConfig config_;
  Mlp feature_, prior_, recognition_, decoder_;
};

/// Every node of one batched ELBO evaluation.
struct ElboGraph {
  VarId phi;
  GaussianVars prior;
  GaussianVars posterior;
  VarId z;
  VarId logits;
  VarId reconstruction;  // [rows]
  VarId kl;              // [rows]
  VarId elbo;            // [rows]
};

inline VarId feature_forward(Tape& tape, const CvaeModel::Binding& b, VarId x, Mode mode, Rng* rng) {
  return b.feature ? b.feature->forward(tape, x, mode, rng) : x;
}

/// Batched ELBO: x [B,k], y [B,l], noise [B,m].
inline ElboGraph elbo_graph(Tape& tape, const CvaeModel& model, const CvaeModel::Binding& b, VarId x, VarId y,
                            VarId noise, Mode mode = Mode::eval, Rng* dropout_rng = nullptr) {
  const std::size_t m = model.config().latent_dim;
  ElboGraph g;
  g.phi = feature_forward(tape, b, x, mode, dropout_rng);
  g.posterior = split_gaussian(tape, b.recognition.forward(tape, tape.concat(g.phi, y), mode, dropout_rng), m);
  g.prior = split_gaussian(tape, b.prior.forward(tape, g.phi, mode, dropout_rng), m);
  g.z = reparameterize(tape, g.posterior, noise);
  g.logits = b.decoder.forward(tape, tape.concat(g.phi, g.z), mode, dropout_rng);
  g.reconstruction = bernoulli_loglik(tape, y, g.logits);
  g.kl = kl_diag_gauss(tape, g.posterior, g.prior);
  g.elbo = tape.sub(g.reconstruction, g.kl);
  return g;
}

struct ElboTerms {
  double reconstruction = 0.0;
  double kl = 0.0;
  double elbo = 0.0;
};

inline Tensor as_row(std::span<const double> v) { return Tensor({1, v.size()}, {v.begin(), v.end()}); }

inline Tensor as_row(std::span<const int> v) {
  std::vector<double> d(v.begin(), v.end());
  return Tensor({1, v.size()}, std::move(d));
}

/// Single-datapoint ELBO with caller-supplied standard-normal noise.
inline ElboTerms elbo(const CvaeModel& model, std::span<const double> x, std::span<const int> y,
                      std::span<const double> noise) {
  const auto& c = model.config();
  if (x.size() != c.feature_dim || y.size() != c.label_count || noise.size() != c.latent_dim)
    throw ShapeError("elbo: input lengths do not match model (k, l, m)");
  Tape tape;
  const auto b = model.bind(tape);
  const ElboGraph g = elbo_graph(tape, model, b, tape.constant(as_row(x)), tape.constant(as_row(y)),
                                 tape.constant(as_row(noise)));
  return {tape.value(g.reconstruction).item(), tape.value(g.kl).item(), tape.value(g.elbo).item()};
}

/// Mean of -ELBO over a batch, built from parameter ids in canonical order.
inline BatchLoss cvae_loss(const CvaeModel& model) {
  return [&model](Tape& tape, std::span<const VarId> params, const Tensor& x, const Tensor& y, Mode mode,
                  Rng& rng) {
    const auto b = model.bind(params);
    const VarId noise = tape.constant(standard_normal({x.dim(0), model.config().latent_dim}, rng));
    const ElboGraph g = elbo_graph(tape, model, b, tape.constant(x), tape.constant(y), noise, mode, &rng);
    return tape.reduce_mean(tape.negate(g.elbo));
  };
}

inline void check_compatible(const CvaeConfig& c, const LabeledDataset& ds, const char* what) {
  if (ds.feature_dim() != c.feature_dim || ds.label_count() != c.label_count)
    throw ValidationError(std::string(what) + ": dataset has k=" + std::to_string(ds.feature_dim()) +
                          ", l=" + std::to_string(ds.label_count()) + " but model expects k=" +
                          std::to_string(c.feature_dim) + ", l=" + std::to_string(c.label_count));
}

/// Minimizes mean -ELBO with Adam; one fresh noise draw per datapoint per step.
inline TrainResult train_cvae(CvaeModel& model, const LabeledDataset& train, const LabeledDataset& val,
                              const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  check_compatible(model.config(), train, "train");
  check_compatible(model.config(), val, "validation");
  const auto params = model.parameter_tensors();
  return fit(params, train.features, train.labels, val.features, val.labels, config, cvae_loss(model), on_epoch);
}

/// Prior parameters and phi(x) for one context row.
struct PriorState {
  Tensor phi;  // [1, f]
  GaussianParams prior;
};

inline PriorState prior_state(const CvaeModel& model, std::span<const double> x) {
  if (x.size() != model.config().feature_dim) throw ShapeError("prior: context length mismatch");
  Tape tape;
  const auto b = model.bind(tape);
  const VarId phi = feature_forward(tape, b, tape.constant(as_row(x)), Mode::eval, nullptr);
  const GaussianVars p = split_gaussian(tape, b.prior.forward(tape, phi), model.config().latent_dim);
  return {tape.value(phi), {tape.value(p.mean).values(), tape.value(p.log_variance).values()}};
}

/// Decoder logits [S, l] for latent rows z [S, m] under a fixed phi [1, f].
inline Tensor decoder_logits(const CvaeModel& model, const Tensor& phi, const Tensor& z) {
  const std::size_t s = z.dim(0), f = phi.cols();
  Tensor phis({s, f});
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < f; ++c) phis.at(r, c) = phi[c];
  Tape tape;
  const MlpBinding dec = model.decoder().bind(tape, false);
  return tape.value(dec.forward(tape, tape.concat(tape.constant(std::move(phis)), tape.constant(z))));
}

/// S reparameterized draws z ~ prior, shaped [S, m].
inline Tensor sample_prior(const GaussianParams& prior, std::size_t count, Rng& rng) {
  const std::size_t m = prior.dim();
  Tensor mean({count, m}), lv({count, m});
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      mean.at(r, c) = prior.mean[c];
      lv.at(r, c) = prior.log_variance[c];
    }
  Tape tape;
  const GaussianVars g{tape.constant(std::move(mean)), tape.constant(std::move(lv))};
  return tape.value(reparameterize(tape, g, tape.constant(standard_normal({count, m}, rng))));
}

/// Draws label vectors from the generative process: z ~ Pr(z|x), y_j ~ Bernoulli(p_j(z, x)).
inline std::vector<std::vector<int>> sample_y(const CvaeModel& model, std::span<const double> x, std::size_t count,
                                              std::uint64_t seed) {
  std::vector<std::vector<int>> out;
  if (count == 0) return out;
  const PriorState ps = prior_state(model, x);
  Rng rng(seed);
  const Tensor z = sample_prior(ps.prior, count, rng);
  const Tensor logits = decoder_logits(model, ps.phi, z);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const std::size_t l = model.config().label_count;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<int> y(l);
    for (std::size_t j = 0; j < l; ++j) y[j] = uniform(rng) < sigmoid(logits.at(s, j));
    out.push_back(std::move(y));
  }
  return out;
}

/// Columns of the decoder's final weight matrix, one row per label: [l, h].
inline Tensor export_embeddings(const CvaeModel& model) {
  const Tensor& w = model.decoder().layers().back().weight;  // [h, l]
  const std::size_t h = w.dim(0), l = w.dim(1);
  Tensor out({l, h});
  for (std::size_t j = 0; j < l; ++j)
    for (std::size_t i = 0; i < h; ++i) out.at(j, i) = w.at(i, j);
  return out;
}

}  // namespace medl
