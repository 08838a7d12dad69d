#include "ctr/grad_check.hpp"

#include <cmath>

namespace ctr {

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params, double eps) {
    std::vector<std::vector<double>> analytic;
    {
        for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
        for (const Tensor& p : params) analytic.push_back(p.grad());
    }
    GradCheckReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        double* pd = p.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            double keep = pd[i];
            pd[i] = keep + eps;
            double fp = f().item();
            pd[i] = keep - eps;
            double fm = f().item();
            pd[i] = keep;
            double num = (fp - fm) / (2.0 * eps);
            double ana = analytic[pi][i];
            // The denominator floor absorbs central-difference roundoff
            // (~1e-11 at unit loss scale), which would otherwise report a
            // large "relative" error on parameters whose true gradient is
            // zero, such as a convolution bias feeding a normalization.
            double rel = std::fabs(ana - num) /
                         std::max({std::fabs(ana), std::fabs(num), 1e-6});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = pi;
                rep.worst_index = i;
                rep.analytic = ana;
                rep.numeric = num;
            }
        }
    }
    return rep;
}

} // namespace ctr
