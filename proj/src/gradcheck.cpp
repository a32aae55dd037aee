#include "driftlm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"

namespace driftlm {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double step) {
    if (!(step > 0.0)) throw InvalidInput("finite_diff_grad: step must be positive");
    Tensor probe = x;
    Tensor grad(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        probe[k] = orig + step;
        const double up = f(probe);
        probe[k] = orig - step;
        const double down = f(probe);
        probe[k] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw OracleFailure("finite_diff_grad: objective returned a non-finite value at coordinate " +
                                std::to_string(k));
        }
        grad[k] = (up - down) / (2.0 * step);
    }
    return grad;
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
    if (a.size() != b.size()) throw ContractViolation("relative_error: size mismatch");
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(diff) / std::max({l2_norm(a), l2_norm(b), floor});
}

}  // namespace driftlm
