#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normshift/augment.hpp"
#include "normshift/datagen.hpp"
#include "normshift/model.hpp"
#include "normshift/trainer.hpp"

namespace normshift::cli {

struct DataSection {
  std::size_t n = 5000;
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  std::string spec = "source";
};

struct EvalSection {
  std::size_t n = 1000;
  std::uint64_t seed = 1;
  std::vector<std::string> grid{"corruption"};
  std::size_t batch = 256;
};

// Top-level keys: run_id, model, norm, train, ada, data, eval.
struct RunConfig {
  std::string run_id = "run";
  ModelConfig model;
  TrainConfig train;
  std::optional<AdaConfig> ada;  // ada.enabled
  DataSection data;
  EvalSection eval;
};

// Unknown keys anywhere are collected and reported together in one
// ValidationError; everything else is range-checked before returning.
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json resolved_json(const RunConfig& config);

// "corruption" (source + 6 types x 5 levels), "styles", "source", or any
// single domain spec string; entries are concatenated in order.
std::vector<DomainSpec> expand_grid(const std::vector<std::string>& grid, std::uint64_t seed);

}  // namespace normshift::cli
