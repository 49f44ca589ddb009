#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "normshift/gradcheck.hpp"

namespace normshift {

struct LayerGradCheck {
  std::string layer;
  double max_rel_error = 0.0;  // over the input and every parameter of the layer
};

// Float64 finite-difference checks of conv, fc, pool, relu, CE, BN, GN, IN,
// LN, SN, AS, AR and ASR on random inputs and perturbed parameters. Each
// layer output is reduced with a random projection so no gradient is trivial.
std::vector<LayerGradCheck> layer_gradcheck_suite(std::uint64_t seed);

}  // namespace normshift
