#pragma once

// Checkpoint envelope:
//   { "format_version": 1, "model_kind": "cvae" | "independent" | "pcc",
//     "model_config": {...}, "label_names": [...],
//     "parameters": { "<name>": { "shape": [...], "data": [...] } } }

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medl/model.hpp"

namespace medl {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  AnyModel model;
  std::vector<std::string> label_names;  // optional
};

namespace detail {

using nlohmann::json;

inline json config_to_json(const CvaeConfig& c) {
  return {{"k", c.feature_dim},
          {"l", c.label_count},
          {"m", c.latent_dim},
          {"feature_widths", c.feature_widths},
          {"prior_hidden", c.prior_hidden},
          {"recognition_hidden", c.recognition_hidden},
          {"decoder_hidden", c.decoder_hidden},
          {"hidden_activation", activation_name(c.hidden)},
          {"keep_prob", c.keep_prob}};
}

inline json config_to_json(const IndependentConfig& c) {
  return {{"k", c.feature_dim},
          {"l", c.label_count},
          {"feature_widths", c.feature_widths},
          {"head_hidden", c.head_hidden},
          {"hidden_activation", activation_name(c.hidden)},
          {"keep_prob", c.keep_prob}};
}

inline json config_to_json(const ChainConfig& c) {
  return {{"k", c.feature_dim},
          {"l", c.label_count},
          {"hidden_widths", c.hidden_widths},
          {"hidden_activation", activation_name(c.hidden)},
          {"keep_prob", c.keep_prob},
          {"label_order", c.order()}};
}

template <class T>
T get_field(const json& j, const char* key) {
  if (!j.contains(key)) throw ValidationError(std::string("checkpoint: model_config missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("checkpoint: model_config field '") + key + "' has the wrong type");
  }
}

inline AnyModel model_from_config(const std::string& kind, const json& c) {
  const auto act = parse_activation(get_field<std::string>(c, "hidden_activation"));
  if (kind == "cvae") {
    CvaeConfig cfg;
    cfg.feature_dim = get_field<std::size_t>(c, "k");
    cfg.label_count = get_field<std::size_t>(c, "l");
    cfg.latent_dim = get_field<std::size_t>(c, "m");
    cfg.feature_widths = get_field<std::vector<std::size_t>>(c, "feature_widths");
    cfg.prior_hidden = get_field<std::vector<std::size_t>>(c, "prior_hidden");
    cfg.recognition_hidden = get_field<std::vector<std::size_t>>(c, "recognition_hidden");
    cfg.decoder_hidden = get_field<std::vector<std::size_t>>(c, "decoder_hidden");
    cfg.hidden = act;
    cfg.keep_prob = get_field<double>(c, "keep_prob");
    return CvaeModel(cfg, 0);
  }
  if (kind == "independent") {
    IndependentConfig cfg;
    cfg.feature_dim = get_field<std::size_t>(c, "k");
    cfg.label_count = get_field<std::size_t>(c, "l");
    cfg.feature_widths = get_field<std::vector<std::size_t>>(c, "feature_widths");
    cfg.head_hidden = get_field<std::vector<std::size_t>>(c, "head_hidden");
    cfg.hidden = act;
    cfg.keep_prob = get_field<double>(c, "keep_prob");
    return IndependentModel(cfg, 0);
  }
  if (kind == "pcc") {
    ChainConfig cfg;
    cfg.feature_dim = get_field<std::size_t>(c, "k");
    cfg.label_count = get_field<std::size_t>(c, "l");
    cfg.hidden_widths = get_field<std::vector<std::size_t>>(c, "hidden_widths");
    cfg.hidden = act;
    cfg.keep_prob = get_field<double>(c, "keep_prob");
    cfg.label_order = get_field<std::vector<std::size_t>>(c, "label_order");
    return ChainModel(cfg, 0);
  }
  throw ValidationError("checkpoint: unknown model_kind '" + kind + "'");
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["model_kind"] = model_kind(ckpt.model);
  j["model_config"] = std::visit([](const auto& m) { return detail::config_to_json(m.config()); }, ckpt.model);
  if (!ckpt.label_names.empty()) j["label_names"] = ckpt.label_names;
  nlohmann::json params = nlohmann::json::object();
  AnyModel copy = ckpt.model;
  for (const ParamRef& p : model_parameters(copy))
    params[p.name] = {{"shape", p.value->shape()}, {"data", p.value->values()}};
  j["parameters"] = std::move(params);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("format_version") || !j.contains("model_kind") ||
      !j.contains("model_config") || !j.contains("parameters"))
    throw ValidationError("checkpoint: missing envelope fields");
  if (j.at("format_version") != kCheckpointFormatVersion)
    throw ValidationError("checkpoint: unsupported format_version " + j.at("format_version").dump());

  Checkpoint ckpt{detail::model_from_config(j.at("model_kind").get<std::string>(), j.at("model_config")), {}};
  if (j.contains("label_names")) ckpt.label_names = j.at("label_names").get<std::vector<std::string>>();

  const auto& params = j.at("parameters");
  std::set<std::string> expected;
  for (const ParamRef& p : model_parameters(ckpt.model)) {
    expected.insert(p.name);
    if (!params.contains(p.name)) throw ValidationError("checkpoint: missing parameter '" + p.name + "'");
    const auto& entry = params.at(p.name);
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != p.value->shape())
      throw ValidationError("checkpoint: parameter '" + p.name + "' has shape " + shape_str(shape) +
                            ", expected " + shape_str(p.value->shape()));
    *p.value = Tensor(shape, entry.at("data").get<std::vector<double>>());
    if (!p.value->all_finite()) throw ValidationError("checkpoint: parameter '" + p.name + "' is not finite");
  }
  for (const auto& [name, _] : params.items())
    if (!expected.count(name)) throw ValidationError("checkpoint: unexpected parameter '" + name + "'");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(ckpt).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint: invalid JSON in '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace medl
