#pragma once

// Shared model and data setups for the test binaries.

#include "medl/baselines.hpp"
#include "medl/cvae.hpp"
#include "medl/data.hpp"

namespace medl::test {

/// Labels (0,1) and (1,0) with equal weight; x ~ U[0,1]^2 carries no information.
inline SyntheticSpec two_mode_spec(std::size_t count, std::uint64_t seed, double flip = 0.0) {
  SyntheticSpec s;
  s.kind = SyntheticKind::multimode;
  s.patterns = {{0, 1}, {1, 0}};
  s.weights = {0.5, 0.5};
  s.flip_prob = flip;
  s.feature_dim = 2;
  s.count = count;
  s.seed = seed;
  return s;
}

/// Small CVAE used for two-mode experiments.
inline CvaeConfig small_cvae(std::size_t k, std::size_t l, std::size_t m = 2) {
  CvaeConfig c;
  c.feature_dim = k;
  c.label_count = l;
  c.latent_dim = m;
  c.feature_widths = {16};
  c.prior_hidden = {16};
  c.recognition_hidden = {16};
  c.decoder_hidden = {32};
  c.hidden = Activation::relu;
  c.keep_prob = 1.0;
  return c;
}

/// The gradient-check model: tanh everywhere, widths <= 8.
inline CvaeConfig tiny_cvae() {
  CvaeConfig c;
  c.feature_dim = 2;
  c.label_count = 2;
  c.latent_dim = 2;
  c.feature_widths = {8};
  c.prior_hidden = {8};
  c.recognition_hidden = {8};
  c.decoder_hidden = {8};
  c.hidden = Activation::tanh;
  c.keep_prob = 1.0;
  return c;
}

inline TrainConfig quick_training(std::size_t epochs, double lr, std::uint64_t seed, std::size_t patience = 20) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch = 512;
  t.adam.learning_rate = lr;
  t.seed = seed;
  t.patience = patience;
  return t;
}

/// phi(x) = x and linear prior, recognition and decoder nets.
inline CvaeConfig linear_cvae(std::size_t k, std::size_t l, std::size_t m) {
  CvaeConfig c;
  c.feature_dim = k;
  c.label_count = l;
  c.latent_dim = m;
  c.feature_widths = {};
  c.prior_hidden = {};
  c.recognition_hidden = {};
  c.decoder_hidden = {};
  c.keep_prob = 1.0;
  return c;
}

/// Linear CVAE whose decoder rows for z are zeroed, so Pr(y | z, x) does not depend on z.
inline CvaeModel z_independent_cvae(std::size_t k, std::size_t l, std::size_t m, std::uint64_t seed) {
  CvaeModel model(linear_cvae(k, l, m), seed);
  auto& w = model.decoder().layers()[0].weight;  // [k + m, l]
  for (std::size_t r = k; r < k + m; ++r)
    for (std::size_t j = 0; j < l; ++j) w.at(r, j) = 0.0;
  for (std::size_t j = 0; j < l; ++j) model.decoder().layers()[0].bias[j] = 0.1 * static_cast<double>(j) - 0.3;
  return model;
}

/// Independent model carrying the x-rows of a z-independent decoder.
inline IndependentModel matching_independent(const CvaeModel& cvae) {
  const auto& c = cvae.config();
  IndependentConfig ic;
  ic.feature_dim = c.feature_dim;
  ic.label_count = c.label_count;
  ic.feature_widths = {};
  ic.head_hidden = {};
  ic.keep_prob = 1.0;
  IndependentModel ind(ic, 1);
  auto params = ind.parameter_tensors();
  const auto& dec = cvae.decoder().layers()[0];
  for (std::size_t r = 0; r < c.feature_dim; ++r)
    for (std::size_t j = 0; j < c.label_count; ++j) params[0]->at(r, j) = dec.weight.at(r, j);
  *params[1] = dec.bias;
  return ind;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace medl::test
