#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ctr/tensor.hpp"

namespace ctr {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares reverse-mode gradients of `f` (a deterministic scalar-valued
/// function of `params`) against central finite differences, element by
/// element. Relative error uses a max(|analytic|, |numeric|, 1e-6)
/// denominator so finite-difference roundoff on near-zero gradients does
/// not register as disagreement.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params, double eps);

} // namespace ctr
