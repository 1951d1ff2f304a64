#pragma once

#include <string>
#include <string_view>
#include <variant>

#include "medl/baselines.hpp"
#include "medl/cvae.hpp"

namespace medl {

using AnyModel = std::variant<CvaeModel, IndependentModel, ChainModel>;

inline std::string_view model_kind(const AnyModel& model) {
  struct {
    std::string_view operator()(const CvaeModel&) const { return "cvae"; }
    std::string_view operator()(const IndependentModel&) const { return "independent"; }
    std::string_view operator()(const ChainModel&) const { return "pcc"; }
  } visitor;
  return std::visit(visitor, model);
}

inline std::size_t model_feature_dim(const AnyModel& model) {
  return std::visit([](const auto& m) { return m.config().feature_dim; }, model);
}

inline std::size_t model_label_count(const AnyModel& model) {
  return std::visit([](const auto& m) { return m.config().label_count; }, model);
}

inline std::vector<ParamRef> model_parameters(AnyModel& model) {
  return std::visit([](auto& m) { return m.parameters(); }, model);
}

}  // namespace medl
