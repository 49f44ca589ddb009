#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "normshift/model.hpp"

namespace normshift {

struct AdaConfig {
  double eta = 1.0;        // semantic-distance penalty weight
  double step_size = 1.0;  // ascent step alpha
  std::size_t inner_steps = 25;
  std::size_t aug_rounds = 3;
  std::size_t interval = 1000;  // optimizer steps between rounds
  double clip_lo = 0.0, clip_hi = 1.0;
  std::size_t chunk = 32;  // images per ascent batch; a throughput knob only
};

nlohmann::json to_json(const AdaConfig& config);
AdaConfig ada_config_from_json(const nlohmann::json& j);  // strict keys
void validate(const AdaConfig& config);

struct Provenance {
  std::uint32_t round = 0;
  std::uint32_t source_index = 0;
};

template <typename T>
struct AugmentedSet {
  Tensor<T> images;
  std::vector<std::int32_t> labels;
  std::vector<Provenance> provenance;
  std::size_t reverted = 0;  // samples kept unchanged after a non-finite gradient
};

// 1/2 |z - z_src|^2. Differing labels have infinite cost and are rejected
// with ValidationError instead of returning a float infinity.
template <typename T>
double semantic_cost(const Tensor<T>& z, const Tensor<T>& z_src, std::int32_t y, std::int32_t y_src);

// Per image X: x <- X, then inner_steps times
//   x <- clip(x + alpha * grad_x[ CE(x, y) - eta * 1/2 |z(x) - z(X)|^2 ])
// with z the first hidden fc activations. Evaluation-mode statistics are used
// and parameters are never written. Every layer kind except bn_test is
// sample-independent in eval mode, so chunking does not change the result.
template <typename T>
AugmentedSet<T> ada_maximize(Model<T>& model, const Tensor<T>& images, std::span<const std::int32_t> labels,
                             const AdaConfig& config, std::uint32_t round = 0,
                             std::span<const std::uint32_t> source_index = {});

}  // namespace normshift
