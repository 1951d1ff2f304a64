#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "medl/baselines.hpp"
#include "medl/cvae.hpp"
#include "medl/data.hpp"
#include "medl/model.hpp"

namespace medl {

/// Runs fn(i) for i in [0, n) over `workers` threads. Results must be written per index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// log((1/n) sum exp(v)) with its delta-method Monte-Carlo standard error.
struct LogMeanExp {
  double value = 0.0;
  double std_error = 0.0;
};

inline LogMeanExp log_mean_exp(std::span<const double> v) {
  Tape tape;
  const double n = static_cast<double>(v.size());
  const double lse = tape.value(tape.logsumexp(tape.constant(Tensor::vector({v.begin(), v.end()})))).item();
  const double mx = *std::max_element(v.begin(), v.end());
  double mean = 0.0, sq = 0.0;
  for (double x : v) {
    const double w = std::exp(x - mx);
    mean += w;
    sq += w * w;
  }
  mean /= n;
  const double var = std::max(0.0, sq / n - mean * mean) * n / std::max(1.0, n - 1.0);
  return {lse - std::log(n), std::sqrt(var / n) / mean};
}

// ------------------------------------------------------ cvae estimates ---

struct CvaePointEstimate {
  double log_lik = 0.0;    // log (1/S) sum_s Pr(y | z_s, x), z_s ~ Pr(z | x)
  double std_error = 0.0;  // Monte-Carlo standard error of log_lik
  std::vector<double> marginals;  // (1/S) sum_s p_j(z_s, x)
};

inline constexpr std::size_t kSampleChunk = 8192;

inline CvaePointEstimate cvae_point_estimate(const CvaeModel& model, std::span<const double> x,
                                             std::span<const int> y, std::size_t samples, std::uint64_t seed) {
  if (samples < 1) throw ValidationError("cvae_neg_jll: sample count must be at least 1");
  const std::size_t l = model.config().label_count;
  if (y.size() != l) throw ShapeError("cvae: label length mismatch");
  const PriorState ps = prior_state(model, x);
  Rng rng(seed);

  std::vector<double> lls;
  lls.reserve(samples);
  std::vector<double> marg(l, 0.0);
  for (std::size_t done = 0; done < samples;) {
    const std::size_t count = std::min(kSampleChunk, samples - done);
    const Tensor z = sample_prior(ps.prior, count, rng);
    const Tensor logits = decoder_logits(model, ps.phi, z);
    for (std::size_t s = 0; s < count; ++s) {
      double ll = 0.0;  // bernoulli_loglik in logit form
      for (std::size_t j = 0; j < l; ++j) {
        const double t = logits.at(s, j);
        marg[j] += sigmoid(t);
        ll -= softplus((1.0 - 2.0 * y[j]) * t);
      }
      lls.push_back(ll);
    }
    done += count;
  }
  for (double& p : marg) p /= static_cast<double>(samples);
  const LogMeanExp lme = log_mean_exp(lls);
  return {lme.value, lme.std_error, std::move(marg)};
}

struct NegJll {
  double value = 0.0;
  double std_error = 0.0;  // zero for exact evaluators
};

/// Monte-Carlo Neg. JLL. Datapoint i draws from stream (seed, i), so results do not
/// depend on `workers`.
inline NegJll cvae_neg_jll(const CvaeModel& model, const LabeledDataset& ds, std::size_t samples,
                           std::uint64_t seed, std::size_t workers = 1) {
  check_compatible(model.config(), ds, "eval");
  if (samples < 1) throw ValidationError("cvae_neg_jll: sample count must be at least 1");
  std::vector<CvaePointEstimate> points(ds.size());
  parallel_for(ds.size(), workers, [&](std::size_t i) {
    const auto y = ds.label_row(i);
    points[i] = cvae_point_estimate(model, ds.features.row(i), y,
                                    samples, stream_seed(seed, i));
  });
  double sum = 0.0, var = 0.0;
  for (const auto& p : points) {
    sum += p.log_lik;
    var += p.std_error * p.std_error;
  }
  const double n = static_cast<double>(ds.size());
  return {-sum / n, std::sqrt(var) / n};
}

// ----------------------------------------------------------- exact ones ---

inline std::vector<double> independent_logliks(const IndependentModel& model, const LabeledDataset& ds) {
  Tape tape;
  const VarId logits = model.bind(tape).logits(tape, tape.constant(ds.features));
  const auto v = tape.value(bernoulli_loglik(tape, tape.constant(ds.labels), logits)).data();
  return {v.begin(), v.end()};
}

inline std::vector<double> chain_logliks(const ChainModel& chain, const LabeledDataset& ds) {
  Tape tape;
  const auto b = chain.bind(tape);
  const auto v = tape.value(chain_loglik_graph(tape, chain, b, ds.features, ds.labels)).data();
  return {v.begin(), v.end()};
}

/// Exact Neg. JLL for models with a tractable likelihood.
inline double exact_neg_jll(const AnyModel& model, const LabeledDataset& ds) {
  if (ds.feature_dim() != model_feature_dim(model) || ds.label_count() != model_label_count(model))
    throw ValidationError("eval: dataset (k=" + std::to_string(ds.feature_dim()) + ", l=" +
                          std::to_string(ds.label_count()) + ") does not match model (k=" +
                          std::to_string(model_feature_dim(model)) + ", l=" +
                          std::to_string(model_label_count(model)) + ")");
  std::vector<double> ll;
  if (const auto* ind = std::get_if<IndependentModel>(&model))
    ll = independent_logliks(*ind, ds);
  else if (const auto* chain = std::get_if<ChainModel>(&model))
    ll = chain_logliks(*chain, ds);
  else
    throw ValidationError("exact_neg_jll: cvae likelihood is intractable; use cvae_neg_jll");
  double sum = 0.0;
  for (double v : ll) sum += v;
  return -sum / static_cast<double>(ll.size());
}

/// Pr(y_j = 1 | x). CVAE: prior Monte-Carlo average; independent: sigmoids;
/// PCC: exact marginalization over the enumerated joint.
inline std::vector<double> marginal_probs(const AnyModel& model, std::span<const double> x, std::size_t samples,
                                          std::uint64_t seed) {
  if (const auto* cvae = std::get_if<CvaeModel>(&model)) {
    const std::vector<int> dummy(cvae->config().label_count, 0);
    return cvae_point_estimate(*cvae, x, dummy, samples, seed).marginals;
  }
  if (const auto* ind = std::get_if<IndependentModel>(&model)) {
    const Tensor t = ind->logits(as_row(x));
    std::vector<double> p(t.size());
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = sigmoid(t[j]);
    return p;
  }
  const auto& chain = std::get<ChainModel>(model);
  const std::size_t l = chain.config().label_count;
  const std::vector<double> table = pcc_joint_table(chain, x);
  std::vector<double> p(l, 0.0);
  for (std::size_t idx = 0; idx < table.size(); ++idx) {
    const double mass = std::exp(table[idx]);
    for (std::size_t j = 0; j < l; ++j)
      if ((idx >> (l - 1 - j)) & 1U) p[j] += mass;
  }
  return p;
}

// ------------------------------------------------------------------- PR ---

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct LabelPr {
  std::size_t label = 0;
  std::size_t positives = 0;
  std::vector<PrPoint> points;
  double average_precision = 0.0;
};

struct PrReport {
  std::vector<LabelPr> labels;           // labels with at least one positive
  std::vector<std::size_t> excluded;     // labels with no positives
  std::vector<PrPoint> macro;            // precision and recall averaged over included labels
  std::optional<double> macro_ap;        // empty when every label was excluded
};

/// 201 evenly spaced thresholds from 1 down to 0.
inline std::vector<double> default_thresholds(std::size_t count = 201) {
  std::vector<double> t(count);
  for (std::size_t i = 0; i < count; ++i)
    t[i] = 1.0 - static_cast<double>(i) / static_cast<double>(count - 1);
  return t;
}

/// Trapezoid area under precision over recall, anchored at recall 0 with the first precision.
inline double average_precision(std::span<const PrPoint> points) {
  if (points.empty()) return 0.0;
  double area = 0.0, prev_r = 0.0, prev_p = points.front().precision;
  for (const PrPoint& p : points) {
    area += (p.recall - prev_r) * 0.5 * (p.precision + prev_p);
    prev_r = p.recall;
    prev_p = p.precision;
  }
  return area;
}

/// A datapoint is predicted positive for label j when marginal >= threshold.
/// Precision with no predicted positives is 1.
inline PrReport pr_curve(const Tensor& marginals, const Tensor& truth, std::span<const double> thresholds) {
  if (marginals.shape() != truth.shape() || marginals.rank() != 2)
    throw ShapeError("pr_curve: marginals " + shape_str(marginals.shape()) + " vs truth " +
                     shape_str(truth.shape()));
  if (thresholds.empty()) throw ValidationError("pr_curve: no thresholds");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (thresholds[i] > thresholds[i - 1]) throw ValidationError("pr_curve: thresholds must be sorted descending");

  const std::size_t n = truth.dim(0), l = truth.dim(1);
  PrReport report;
  for (std::size_t j = 0; j < l; ++j) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) positives += truth.at(i, j) != 0.0;
    if (positives == 0) {
      report.excluded.push_back(j);
      continue;
    }
    LabelPr lp{j, positives, {}, 0.0};
    for (double t : thresholds) {
      std::size_t tp = 0, predicted = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (marginals.at(i, j) >= t) {
          ++predicted;
          tp += truth.at(i, j) != 0.0;
        }
      }
      const double precision = predicted == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(predicted);
      lp.points.push_back({t, precision, static_cast<double>(tp) / static_cast<double>(positives)});
    }
    lp.average_precision = average_precision(lp.points);
    report.labels.push_back(std::move(lp));
  }
  if (!report.labels.empty()) {
    const double count = static_cast<double>(report.labels.size());
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      PrPoint m{thresholds[t], 0.0, 0.0};
      for (const auto& lp : report.labels) {
        m.precision += lp.points[t].precision / count;
        m.recall += lp.points[t].recall / count;
      }
      report.macro.push_back(m);
    }
    double ap = 0.0;
    for (const auto& lp : report.labels) ap += lp.average_precision;
    report.macro_ap = ap / count;
  }
  return report;
}

// ------------------------------------------------------------ ELBO gap ---

struct ElboGap {
  double mc_ll = 0.0;      // mean Monte-Carlo log-likelihood
  double mean_elbo = 0.0;  // mean ELBO averaged over `draws` noise draws
  double gap = 0.0;        // mc_ll - mean_elbo; positive up to MC error
  double mc_std_error = 0.0;
};

inline double mean_elbo(const CvaeModel& model, const LabeledDataset& ds, std::size_t draws, std::uint64_t seed) {
  check_compatible(model.config(), ds, "elbo");
  double total = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    Rng rng(stream_seed(seed, 0xe1b0 + d));
    Tape tape;
    const auto b = model.bind(tape);
    const VarId noise = tape.constant(standard_normal({ds.size(), model.config().latent_dim}, rng));
    const ElboGraph g = elbo_graph(tape, model, b, tape.constant(ds.features), tape.constant(ds.labels), noise);
    total += tape.value(tape.reduce_mean(g.elbo)).item();
  }
  return total / static_cast<double>(draws);
}

inline ElboGap elbo_gap(const CvaeModel& model, const LabeledDataset& ds, std::size_t samples, std::uint64_t seed,
                        std::size_t draws = 32, std::size_t workers = 1) {
  const NegJll jll = cvae_neg_jll(model, ds, samples, seed, workers);
  ElboGap g;
  g.mc_ll = -jll.value;
  g.mc_std_error = jll.std_error;
  g.mean_elbo = mean_elbo(model, ds, draws, seed);
  g.gap = g.mc_ll - g.mean_elbo;
  return g;
}

// --------------------------------------------------------------- report ---

struct EvalOptions {
  std::size_t samples = 10000;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t elbo_draws = 32;
  std::vector<double> thresholds = default_thresholds();
};

struct EvalReport {
  std::string model_kind;
  std::string dataset_hash;
  std::size_t datapoints = 0;
  double neg_jll = 0.0;
  std::optional<double> neg_jll_std_error;  // Monte-Carlo evaluators only
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  PrReport pr;
  std::optional<ElboGap> elbo_gap;
};

inline EvalReport evaluate(const AnyModel& model, const LabeledDataset& ds, const EvalOptions& opt) {
  if (ds.feature_dim() != model_feature_dim(model) || ds.label_count() != model_label_count(model))
    throw ValidationError("eval: dataset (k=" + std::to_string(ds.feature_dim()) + ", l=" +
                          std::to_string(ds.label_count()) + ") does not match model (k=" +
                          std::to_string(model_feature_dim(model)) + ", l=" +
                          std::to_string(model_label_count(model)) + ")");
  EvalReport r;
  r.model_kind = std::string(model_kind(model));
  r.dataset_hash = dataset_hash(ds);
  r.datapoints = ds.size();
  r.seed = opt.seed;

  const std::size_t n = ds.size(), l = ds.label_count();
  Tensor marginals({n, l});
  if (const auto* cvae = std::get_if<CvaeModel>(&model)) {
    if (opt.samples < 1) throw ValidationError("eval: sample count must be at least 1");
    r.samples = opt.samples;
    std::vector<CvaePointEstimate> points(n);
    parallel_for(n, opt.workers, [&](std::size_t i) {
      points[i] = cvae_point_estimate(*cvae, ds.features.row(i),
                                      ds.label_row(i), opt.samples, stream_seed(opt.seed, i));
    });
    double sum = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum += points[i].log_lik;
      var += points[i].std_error * points[i].std_error;
      for (std::size_t j = 0; j < l; ++j) marginals.at(i, j) = points[i].marginals[j];
    }
    r.neg_jll = -sum / static_cast<double>(n);
    r.neg_jll_std_error = std::sqrt(var) / static_cast<double>(n);
    ElboGap gap;
    gap.mc_ll = -r.neg_jll;
    gap.mc_std_error = *r.neg_jll_std_error;
    gap.mean_elbo = mean_elbo(*cvae, ds, opt.elbo_draws, opt.seed);
    gap.gap = gap.mc_ll - gap.mean_elbo;
    r.elbo_gap = gap;
  } else {
    r.neg_jll = exact_neg_jll(model, ds);
    parallel_for(n, opt.workers, [&](std::size_t i) {
      const auto p = marginal_probs(model, ds.features.row(i), 0, 0);
      for (std::size_t j = 0; j < l; ++j) marginals.at(i, j) = p[j];
    });
  }
  if (!std::isfinite(r.neg_jll) || r.neg_jll < -1e-12)
    throw NumericError("eval: Neg. JLL " + std::to_string(r.neg_jll) + " is impossible for binary labels");
  r.pr = pr_curve(marginals, ds.labels, opt.thresholds);
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r, const std::vector<std::string>& label_names = {}) {
  using nlohmann::json;
  auto name = [&](std::size_t j) {
    return j < label_names.size() ? label_names[j] : "label_" + std::to_string(j + 1);
  };
  json j;
  j["model_kind"] = r.model_kind;
  j["dataset_hash"] = r.dataset_hash;
  j["datapoints"] = r.datapoints;
  j["neg_jll"] = r.neg_jll;
  j["neg_jll_std_error"] = r.neg_jll_std_error ? json(*r.neg_jll_std_error) : json(nullptr);
  j["samples"] = r.samples;
  j["seed"] = r.seed;
  j["macro_ap"] = r.pr.macro_ap ? json(*r.pr.macro_ap) : json(nullptr);
  json labels = json::array();
  for (const auto& lp : r.pr.labels)
    labels.push_back({{"label", name(lp.label)}, {"positives", lp.positives}, {"average_precision", lp.average_precision}});
  j["labels"] = labels;
  json excluded = json::array();
  for (std::size_t e : r.pr.excluded) excluded.push_back(name(e));
  j["excluded_labels"] = excluded;
  if (r.elbo_gap)
    j["elbo_gap"] = {{"mc_ll", r.elbo_gap->mc_ll},
                     {"mean_elbo", r.elbo_gap->mean_elbo},
                     {"gap", r.elbo_gap->gap},
                     {"mc_std_error", r.elbo_gap->mc_std_error}};
  else
    j["elbo_gap"] = nullptr;
  return j;
}

/// CSV with columns label,threshold,precision,recall; the macro curve uses label "macro".
inline void write_pr_csv(std::ostream& out, const PrReport& pr, const std::vector<std::string>& label_names = {}) {
  auto row = [&](const std::string& label, const PrPoint& p) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", p.threshold, p.precision, p.recall);
    out << label << ',' << buf << '\n';
  };
  out << "label,threshold,precision,recall\n";
  for (const auto& lp : pr.labels) {
    const std::string name =
        lp.label < label_names.size() ? label_names[lp.label] : "label_" + std::to_string(lp.label + 1);
    for (const auto& p : lp.points) row(name, p);
  }
  for (const auto& p : pr.macro) row("macro", p);
}

}  // namespace medl
