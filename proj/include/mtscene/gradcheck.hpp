#pragma once

#include <cstdint>
#include <functional>

#include "mtscene/tape.hpp"

namespace mtscene {

// Builds a fresh tape and returns the scalar output node id.
using ScalarGraphFn = std::function<int(Tape&, ParamStore&)>;

// Central-finite-difference check of d(f)/d(params).
//
// Returns the max over checked coordinates of
//   |analytic - cd| / max(|analytic|, |cd|, 1e-12).
//
// With max_coords_per_param >= 0 only a deterministic random subset of
// coordinates per parameter is differenced (for large models); -1 checks all.
double grad_check(const ScalarGraphFn& f, ParamStore& params, double step,
                  int64_t max_coords_per_param = -1, uint64_t sample_seed = 17);

}  // namespace mtscene
