#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medl/error.hpp"
#include "medl/nn.hpp"
#include "medl/tensor.hpp"

namespace medl {

/// N feature rows paired with N binary label rows.
struct LabeledDataset {
  Tensor features;  // N x k
  Tensor labels;    // N x l, entries exactly 0 or 1
  std::vector<std::string> feature_names;
  std::vector<std::string> label_names;

  std::size_t size() const { return features.dim(0); }
  std::size_t feature_dim() const { return features.dim(1); }
  std::size_t label_count() const { return labels.dim(1); }

  void validate() const {
    if (features.rank() != 2 || labels.rank() != 2)
      throw ValidationError("dataset: features and labels must be matrices");
    if (features.dim(0) != labels.dim(0))
      throw ValidationError("dataset: " + std::to_string(features.dim(0)) + " feature rows but " +
                            std::to_string(labels.dim(0)) + " label rows");
    for (double v : labels.data())
      if (v != 0.0 && v != 1.0) throw ValidationError("dataset: labels must be 0 or 1");
    if (!feature_names.empty() && feature_names.size() != feature_dim())
      throw ValidationError("dataset: feature_names length mismatch");
    if (!label_names.empty() && label_names.size() != label_count())
      throw ValidationError("dataset: label_names length mismatch");
  }

  std::vector<int> label_row(std::size_t i) const {
    std::vector<int> y(label_count());
    for (std::size_t j = 0; j < y.size(); ++j) y[j] = labels.at(i, j) != 0.0;
    return y;
  }

  LabeledDataset subset(std::span<const std::size_t> rows) const {
    LabeledDataset out{features.gather_rows(rows), labels.gather_rows(rows), feature_names, label_names};
    return out;
  }
};

enum class DatasetErrorKind { empty, malformed, ragged, non_binary };

class DatasetError : public ValidationError {
 public:
  DatasetError(DatasetErrorKind kind, const std::string& message, std::size_t line = 0)
      : ValidationError(message), kind_(kind), line_(line) {}
  DatasetErrorKind kind() const { return kind_; }
  std::size_t line() const { return line_; }

 private:
  DatasetErrorKind kind_;
  std::size_t line_;
};

// ---------------------------------------------------------------- JSONL ---

/// Parses JSONL text, one {"x": [...], "y": [...]} object per line. Blank lines are skipped.
inline LabeledDataset parse_jsonl(std::istream& in) {
  std::vector<double> xs, ys;
  std::size_t k = 0, l = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw DatasetError(DatasetErrorKind::malformed, "invalid JSON, line " + std::to_string(line_no),
                         line_no);
    }
    if (!obj.is_object() || !obj.contains("x") || !obj.contains("y") || !obj["x"].is_array() ||
        !obj["y"].is_array())
      throw DatasetError(DatasetErrorKind::malformed,
                         "expected object with arrays x and y, line " + std::to_string(line_no), line_no);
    const auto& x = obj["x"];
    const auto& y = obj["y"];
    if (rows == 0) {
      k = x.size();
      l = y.size();
      if (k == 0 || l == 0)
        throw DatasetError(DatasetErrorKind::ragged, "empty x or y, line " + std::to_string(line_no),
                           line_no);
    } else if (x.size() != k || y.size() != l) {
      throw DatasetError(DatasetErrorKind::ragged,
                         "ragged row (expected " + std::to_string(k) + " features and " +
                             std::to_string(l) + " labels), line " + std::to_string(line_no),
                         line_no);
    }
    for (const auto& v : x) {
      if (!v.is_number())
        throw DatasetError(DatasetErrorKind::malformed, "non-numeric feature, line " + std::to_string(line_no),
                           line_no);
      xs.push_back(v.get<double>());
    }
    for (const auto& v : y) {
      if (!v.is_number_integer() || (v.get<long long>() != 0 && v.get<long long>() != 1))
        throw DatasetError(DatasetErrorKind::non_binary, "non-binary label, line " + std::to_string(line_no),
                           line_no);
      ys.push_back(static_cast<double>(v.get<long long>()));
    }
    ++rows;
  }
  if (rows == 0) throw DatasetError(DatasetErrorKind::empty, "empty dataset");
  LabeledDataset ds{Tensor({rows, k}, std::move(xs)), Tensor({rows, l}, std::move(ys)), {}, {}};
  return ds;
}

inline LabeledDataset load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset '" + path + "'");
  return parse_jsonl(in);
}

inline void write_jsonl(std::ostream& out, const LabeledDataset& ds) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    nlohmann::json row;
    std::vector<double> x(ds.feature_dim());
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = ds.features.at(i, c);
    row["x"] = x;
    row["y"] = ds.label_row(i);
    out << row.dump() << '\n';
  }
}

inline void save_jsonl(const std::string& path, const LabeledDataset& ds) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write dataset '" + path + "'");
  write_jsonl(out, ds);
}

/// FNV-1a over the canonical JSONL encoding, as 16 hex digits.
inline std::string dataset_hash(const LabeledDataset& ds) {
  std::ostringstream text;
  write_jsonl(text, ds);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ------------------------------------------------------------ synthetic ---

enum class SyntheticKind { multimode, xor_pair, independent_control };

/// Label outcomes are indexed with y_1 as the most significant bit, so index
/// order is lexicographic order of label vectors.
inline std::size_t outcome_index(std::span<const int> y) {
  std::size_t idx = 0;
  for (int b : y) idx = (idx << 1) | static_cast<std::size_t>(b != 0);
  return idx;
}

inline std::vector<int> outcome_labels(std::size_t index, std::size_t l) {
  std::vector<int> y(l);
  for (std::size_t j = 0; j < l; ++j) y[j] = static_cast<int>((index >> (l - 1 - j)) & 1U);
  return y;
}

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::multimode;
  std::vector<std::vector<int>> patterns;  // multimode
  std::vector<double> weights;             // multimode
  std::vector<double> label_probs;         // independent_control
  double flip_prob = 0.0;
  std::size_t feature_dim = 2;
  std::size_t count = 1000;
  std::uint64_t seed = 0;

  std::size_t label_count() const {
    switch (kind) {
      case SyntheticKind::multimode: return patterns.empty() ? 0 : patterns.front().size();
      case SyntheticKind::xor_pair: return 2;
      case SyntheticKind::independent_control: return label_probs.size();
    }
    return 0;
  }

  void validate() const {
    if (feature_dim == 0) throw ValidationError("synthetic: feature_dim must be positive");
    if (count == 0) throw ValidationError("synthetic: count must be positive");
    if (!(flip_prob >= 0.0 && flip_prob < 0.5)) throw ValidationError("synthetic: flip_prob must lie in [0, 0.5)");
    const std::size_t l = label_count();
    if (l == 0) throw ValidationError("synthetic: no labels");
    if (l > 20) throw ValidationError("synthetic: at most 20 labels (joint table has 2^l entries)");
    switch (kind) {
      case SyntheticKind::multimode: {
        if (weights.size() != patterns.size())
          throw ValidationError("synthetic: weights and patterns differ in length");
        for (const auto& p : patterns) {
          if (p.size() != l) throw ValidationError("synthetic: pattern length differs from label count");
          for (int b : p)
            if (b != 0 && b != 1) throw ValidationError("synthetic: patterns must be binary");
        }
        double total = 0.0;
        for (double w : weights) {
          if (!(w >= 0.0)) throw ValidationError("synthetic: weights must be non-negative");
          total += w;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ValidationError("synthetic: weights must sum to 1");
        break;
      }
      case SyntheticKind::xor_pair:
        if (feature_dim < 2) throw ValidationError("synthetic: xor-pair needs feature_dim >= 2");
        break;
      case SyntheticKind::independent_control:
        for (double p : label_probs)
          if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("synthetic: label_probs must lie in [0, 1]");
        break;
    }
  }
};

inline std::string_view synthetic_kind_name(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::multimode: return "multimode";
    case SyntheticKind::xor_pair: return "xor-pair";
    case SyntheticKind::independent_control: return "independent-control";
  }
  return "multimode";
}

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "multimode") return SyntheticKind::multimode;
  if (s == "xor-pair") return SyntheticKind::xor_pair;
  if (s == "independent-control") return SyntheticKind::independent_control;
  throw ValidationError("synthetic: unknown kind '" + std::string(s) + "'");
}

namespace detail {

// Joint table of "pattern with each bit flipped w.p. eps", mixed over patterns.
inline std::vector<double> flipped_mixture(const std::vector<std::vector<int>>& patterns,
                                           const std::vector<double>& weights, double eps) {
  const std::size_t l = patterns.front().size();
  std::vector<long double> table(std::size_t{1} << l, 0.0L);
  for (std::size_t c = 0; c < patterns.size(); ++c) {
    const std::size_t center = outcome_index(patterns[c]);
    for (std::size_t idx = 0; idx < table.size(); ++idx) {
      const int flips = std::popcount(idx ^ center);
      long double p = weights[c];
      for (int f = 0; f < static_cast<int>(l); ++f) p *= f < flips ? eps : (1.0L - eps);
      table[idx] += p;
    }
  }
  const long double total = std::accumulate(table.begin(), table.end(), 0.0L);
  std::vector<double> out(table.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(table[i] / total);
  return out;
}

inline std::vector<int> xor_pair_labels(std::span<const double> x) {
  const int a = x[0] > 0.5;
  const int b = x[1] > 0.5;
  return {a, a ^ b};
}

}  // namespace detail

/// Exact joint Pr(y | x) implied by the generator, indexed by outcome_index().
inline std::vector<double> synthetic_conditional_joint(const SyntheticSpec& spec, std::span<const double> x) {
  switch (spec.kind) {
    case SyntheticKind::multimode:
      return detail::flipped_mixture(spec.patterns, spec.weights, spec.flip_prob);
    case SyntheticKind::xor_pair:
      return detail::flipped_mixture({detail::xor_pair_labels(x)}, {1.0}, spec.flip_prob);
    case SyntheticKind::independent_control: {
      const std::size_t l = spec.label_probs.size();
      std::vector<double> table(std::size_t{1} << l);
      for (std::size_t idx = 0; idx < table.size(); ++idx) {
        const auto y = outcome_labels(idx, l);
        long double p = 1.0L;
        for (std::size_t j = 0; j < l; ++j) {
          const double q = spec.label_probs[j] * (1 - spec.flip_prob) + (1 - spec.label_probs[j]) * spec.flip_prob;
          p *= y[j] ? q : 1.0 - q;
        }
        table[idx] = static_cast<double>(p);
      }
      return table;
    }
  }
  return {};
}

struct SyntheticData {
  LabeledDataset dataset;
  std::vector<double> joint;  // marginal over x ~ Uniform[0,1]^k
};

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t k = spec.feature_dim, l = spec.label_count(), n = spec.count;
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::bernoulli_distribution flip(spec.flip_prob);
  std::discrete_distribution<std::size_t> mode(spec.weights.begin(), spec.weights.end());

  Tensor x({n, k});
  Tensor y({n, l});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) x.at(i, c) = uniform(rng);
    std::vector<int> labels;
    switch (spec.kind) {
      case SyntheticKind::multimode:
        labels = spec.patterns[mode(rng)];
        break;
      case SyntheticKind::xor_pair:
        labels = detail::xor_pair_labels(x.row(i));
        break;
      case SyntheticKind::independent_control:
        labels.resize(l);
        for (std::size_t j = 0; j < l; ++j) labels[j] = uniform(rng) < spec.label_probs[j];
        break;
    }
    for (std::size_t j = 0; j < l; ++j) {
      const int bit = flip(rng) ? 1 - labels[j] : labels[j];
      y.at(i, j) = bit;
    }
  }

  SyntheticData out;
  out.dataset = LabeledDataset{std::move(x), std::move(y), {}, {}};
  if (spec.kind == SyntheticKind::xor_pair) {
    // x_1 and x_2 are uniform, so the xor labels are uniform over the four outcomes.
    out.joint.assign(4, 0.25);
  } else {
    const std::vector<double> origin(k, 0.0);
    out.joint = synthetic_conditional_joint(spec, origin);
  }
  return out;
}

// ------------------------------------------------------------ imagery ---

/// d bands of H x W 8-bit pixels, stored band-major.
struct Image {
  std::size_t bands = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t band, std::size_t row, std::size_t col) const {
    return pixels[(band * height + row) * width + col];
  }
};

/// Row i holds the fraction of band-i pixels falling in each of `bins` equal value ranges.
struct HistogramFeature {
  std::size_t bands = 0, bins = 0;
  std::vector<double> values;  // bands x bins, row-major

  double at(std::size_t band, std::size_t bin) const { return values[band * bins + bin]; }
};

inline HistogramFeature histogram_featurize(const Image& image, std::size_t bins) {
  if (image.bands == 0 || image.height == 0 || image.width == 0)
    throw ValidationError("histogram: empty image");
  if (bins == 0 || 256 % bins != 0) throw ValidationError("histogram: bins must divide 256");
  if (image.pixels.size() != image.bands * image.height * image.width)
    throw ValidationError("histogram: pixel buffer does not match image dimensions");
  const std::size_t per_band = image.height * image.width;
  const std::size_t width = 256 / bins;
  HistogramFeature h{image.bands, bins, std::vector<double>(image.bands * bins, 0.0)};
  for (std::size_t b = 0; b < image.bands; ++b) {
    std::vector<std::size_t> counts(bins, 0);
    for (std::size_t p = 0; p < per_band; ++p) ++counts[image.pixels[b * per_band + p] / width];
    for (std::size_t j = 0; j < bins; ++j)
      h.values[b * bins + j] = static_cast<double>(counts[j]) / static_cast<double>(per_band);
  }
  return h;
}

/// Reads a binary "P6" PPM with maxval 255 into R, G, B bands.
inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("ppm: cannot open '" + path + "'");

  auto next_token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };

  if (next_token() != "P6") throw ValidationError("ppm: wrong magic in '" + path + "' (expected P6)");
  std::size_t width = 0, height = 0;
  long maxval = 0;
  try {
    width = std::stoul(next_token());
    height = std::stoul(next_token());
    maxval = std::stol(next_token());
  } catch (const std::exception&) {
    throw ValidationError("ppm: malformed header in '" + path + "'");
  }
  if (maxval != 255) throw ValidationError("ppm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (width == 0 || height == 0) throw ValidationError("ppm: empty image");

  const std::size_t expected = width * height * 3;
  std::vector<char> raw(expected);
  in.read(raw.data(), static_cast<std::streamsize>(expected));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != expected)
    throw ValidationError("ppm: truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(got));

  Image img{3, height, width, std::vector<std::uint8_t>(expected)};
  const std::size_t plane = width * height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t b = 0; b < 3; ++b)
      img.pixels[b * plane + p] = static_cast<std::uint8_t>(raw[p * 3 + b]);
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.bands != 3) throw ValidationError("ppm: need exactly 3 bands");
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  const std::size_t plane = img.width * img.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t b = 0; b < 3; ++b) out.put(static_cast<char>(img.pixels[b * plane + p]));
}

// ------------------------------------------------------ preprocessing ---

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> scale;  // population std, or 1 for near-constant columns
};

inline FeatureStats fit_standardizer(const LabeledDataset& train) {
  const std::size_t n = train.size(), k = train.feature_dim();
  FeatureStats s{std::vector<double>(k, 0.0), std::vector<double>(k, 1.0)};
  for (std::size_t c = 0; c < k; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += train.features.at(i, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = train.features.at(i, c) - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    s.mean[c] = mean;
    s.scale[c] = sd < 1e-12 ? 1.0 : sd;
  }
  return s;
}

inline Tensor standardize(const FeatureStats& stats, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != stats.mean.size())
    throw ShapeError("standardize: feature width " + std::to_string(features.cols()) + " vs stats " +
                     std::to_string(stats.mean.size()));
  Tensor out = features;
  for (std::size_t i = 0; i < out.dim(0); ++i)
    for (std::size_t c = 0; c < out.dim(1); ++c) out.at(i, c) = (out.at(i, c) - stats.mean[c]) / stats.scale[c];
  return out;
}

inline LabeledDataset standardize(const FeatureStats& stats, const LabeledDataset& ds) {
  LabeledDataset out = ds;
  out.features = standardize(stats, ds.features);
  return out;
}

inline nlohmann::json stats_to_json(const FeatureStats& s) { return {{"mean", s.mean}, {"std", s.scale}}; }

inline FeatureStats stats_from_json(const nlohmann::json& j) {
  FeatureStats s{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
  if (s.mean.size() != s.scale.size()) throw ValidationError("stats: mean and std differ in length");
  return s;
}

/// Seeded shuffle then contiguous cut. Every part after the first gets
/// floor(fraction * N) rows; the first absorbs the remainder.
inline std::vector<LabeledDataset> split(const LabeledDataset& ds, std::span<const double> fractions,
                                         std::uint64_t seed) {
  if (fractions.empty()) throw ValidationError("split: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ValidationError("split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split: fractions must sum to 1");

  const std::size_t n = ds.size();
  std::vector<std::size_t> counts(fractions.size());
  std::size_t assigned = 0;
  for (std::size_t i = 1; i < fractions.size(); ++i) {
    counts[i] = static_cast<std::size_t>(std::floor(fractions[i] * static_cast<double>(n) + 1e-9));
    assigned += counts[i];
  }
  if (assigned > n) throw ValidationError("split: fractions exceed dataset size");
  counts[0] = n - assigned;
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] == 0) throw ValidationError("split: part " + std::to_string(i) + " would be empty");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (fractions.size() > 1) {
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<LabeledDataset> parts;
  std::size_t begin = 0;
  for (std::size_t c : counts) {
    parts.push_back(ds.subset(std::span<const std::size_t>(order.data() + begin, c)));
    begin += c;
  }
  return parts;
}

}  // namespace medl
