#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ctr/tensor.hpp"

namespace testutil {

inline ctr::Tensor random_tensor(std::mt19937_64& rng, ctr::Shape shape,
                                 double lo = -1.0, double hi = 1.0,
                                 bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(ctr::numel(shape));
    for (double& x : v) x = dist(rng);
    return ctr::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(const ctr::Tensor& a, const ctr::Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
    return worst;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::fabs(a[i] - b[i]));
    return worst;
}

} // namespace testutil
