#pragma once

#include <string>
#include <vector>

#include "pmeta/param_set.hpp"
#include "pmeta/rng.hpp"

namespace pmeta::gradcheck {

// Central-difference gradient of `loss_fn` over the full flat layout of
// `params`. Purely numeric: independent of the reverse-mode path it checks.
ad::Tensor fd_gradient(const ParamLossFn& loss_fn, const ParamSet& params, double step = 1e-5);

// Forward value of the loss, no gradients recorded.
double loss_value(const ParamLossFn& loss_fn, const ParamSet& params);

// Central-difference directional second derivative: d/dt grad(params + t·v)
// at t=0, i.e. a finite-difference H·v oracle.
ad::Tensor fd_hvp(const ParamLossFn& loss_fn, const ParamSet& params, const ad::Tensor& v,
                  double step = 1e-5);

struct CheckReport {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t instances = 0;
};

// Randomized first-order checks for every primitive op, plus double-backward
// and hvp checks against finite differences.
std::vector<CheckReport> primitive_suite(Rng& rng, std::size_t instances_per_op = 8);

// Convenience: worst error across a set of reports.
double worst_error(const std::vector<CheckReport>& reports);

}  // namespace pmeta::gradcheck
