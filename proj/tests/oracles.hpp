#pragma once

// Reference computations that avoid the tape: plain loops over the stored
// weights. Used to check the library's evaluators from the outside.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "medl/cvae.hpp"

namespace medl::test {

inline double plain_activation(Activation a, double v) {
  switch (a) {
    case Activation::identity: return v;
    case Activation::relu: return v > 0 ? v : 0.0;
    case Activation::tanh: return std::tanh(v);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-v));
  }
  return v;
}

inline std::vector<double> plain_forward(const Mlp& mlp, std::vector<double> h) {
  const auto& layers = mlp.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& w = layers[i].weight;
    std::vector<double> next(w.dim(1));
    for (std::size_t o = 0; o < next.size(); ++o) {
      double s = layers[i].bias[o];
      for (std::size_t r = 0; r < h.size(); ++r) s += h[r] * w.at(r, o);
      next[o] = plain_activation(i + 1 == layers.size() ? mlp.spec().output : mlp.spec().hidden, s);
    }
    h = std::move(next);
  }
  return h;
}

inline double plain_bernoulli(const std::vector<int>& y, const std::vector<double>& logits) {
  double ll = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double t = logits[j];
    const double sp = y[j] ? std::log1p(std::exp(-std::abs(t))) + std::max(-t, 0.0)
                           : std::log1p(std::exp(-std::abs(t))) + std::max(t, 0.0);
    ll -= sp;
  }
  return ll;
}

/// log Pr(y | x) for a CVAE with a one-dimensional latent, by the midpoint rule
/// over u in [-10, 10] with z = mean + sd * u.
inline double quadrature_log_lik(const CvaeModel& model, const std::vector<double>& x, const std::vector<int>& y,
                                 int points = 1000000) {
  const std::vector<double> phi = model.has_feature_net() ? plain_forward(model.feature(), x) : x;
  const auto prior = plain_forward(model.prior(), phi);
  const double mean = prior[0];
  const double sd = std::exp(0.5 * std::clamp(prior[1], -kLogVarianceLimit, kLogVarianceLimit));
  const double lo = -10.0, du = 20.0 / points;
  std::vector<double> input = phi;
  input.push_back(0.0);
  double mass = 0.0;
  for (int i = 0; i < points; ++i) {
    const double u = lo + (i + 0.5) * du;
    input.back() = mean + sd * u;
    mass += std::exp(-0.5 * u * u + plain_bernoulli(y, plain_forward(model.decoder(), input))) * du;
  }
  return std::log(mass / std::sqrt(2 * std::numbers::pi));
}

/// Linear-prior CVAE with a tanh decoder whose z inputs are scaled up so the latent matters.
inline CvaeModel quadrature_model(std::uint64_t seed) {
  CvaeConfig c;
  c.feature_dim = 2;
  c.label_count = 2;
  c.latent_dim = 1;
  c.feature_widths = {};
  c.prior_hidden = {};
  c.recognition_hidden = {};
  c.decoder_hidden = {8};
  c.hidden = Activation::tanh;
  c.keep_prob = 1.0;
  CvaeModel model(c, seed);
  auto& first = model.decoder().layers()[0];
  for (std::size_t j = 0; j < first.weight.dim(1); ++j) first.weight.at(2, j) *= 3.0;
  return model;
}

}  // namespace medl::test
