#ifndef CYTRANS_GRADCHECK_HPP
#define CYTRANS_GRADCHECK_HPP

#include <functional>
#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

namespace cytrans {

// Central-difference verification of reverse-mode gradients. `fn` must build
// a scalar from the given leaves on every call. Returns the max over all
// coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Meant for float64 leaves with step in [1e-6, 1e-3].
inline double grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double step = 1e-4) {
    for (auto& t : inputs)
        if (!t.requires_grad()) throw TensorError("grad_check inputs must require grad");

    auto loss = fn(inputs);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) {
        t.grad_data();  // ensure allocated even if untouched
        analytic.emplace_back(t.grad().begin(), t.grad().end());
    }

    double max_err = 0.0;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto data = inputs[ti].leaf_data();
        for (int64_t i = 0; i < (int64_t)data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + step;
            const double fp = fn(inputs).item();
            data[i] = orig - step;
            const double fm = fn(inputs).item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[ti][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            max_err = std::max(max_err, std::fabs(a - numeric) / denom);
        }
    }
    return max_err;
}

}  // namespace cytrans

#endif
