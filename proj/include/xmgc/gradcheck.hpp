#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmgc/tensor.hpp"

namespace xmgc {

/// A scalar-valued computation to verify: `build` consumes the freshly
/// sampled parameter tensors and returns the loss. `init` may replace the
/// default uniform(-1,1) sampling, e.g. to keep probes away from an
/// activation kink.
struct GradcheckProblem {
    std::string name;
    std::vector<Shape> param_shapes;
    std::function<Tensor(std::vector<Tensor>&)> build;
    std::function<void(std::vector<Tensor>&, Rng&)> init;
};

struct GradcheckReport {
    bool pass = false;
    double worst_rel_error = 0.0;
    int worst_param = -1;
    std::string problem;
};

/// Central-difference check of the tape's gradients. For each parameter the
/// analytic and numeric gradients are compared as
///   |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-8)
/// and the report carries the worst ratio across parameters. Perturbed
/// evaluations divide by the realized f32 step, and loss values are read at
/// full precision, so linear computations check out to ~1e-12.
GradcheckReport gradcheck(const GradcheckProblem& problem, double tolerance,
                          std::uint64_t seed, double step = 1e-3);

}  // namespace xmgc
