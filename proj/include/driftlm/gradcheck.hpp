#pragma once

#include <functional>

#include "driftlm/tensor.hpp"

namespace driftlm {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient of `f` at `x`: (f(x + h e_k) - f(x - h e_k)) / 2h.
/// Throws OracleFailure when f yields a non-finite value and InvalidInput for step <= 0.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double step = 1e-5);

// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12);

}  // namespace driftlm
