#pragma once

#include <cstdint>

#include "simreweight/model.hpp"

namespace simreweight::gradcheck {

// Central finite differences (step 1e-5) against the reverse pass, across
// the primitive builder set. Returns the worst relative error.
double check_primitives(int n_seeds = 10);

// End-to-end: the forecaster's mean task loss on a random sample, finite
// differences over randomly chosen parameter coordinates.
double check_model(const model::ModelConfig& cfg, int n_seeds = 10, int n_coords = 20);

// Compact configuration used by the CLI gate.
model::ModelConfig small_check_config();

}  // namespace simreweight::gradcheck
