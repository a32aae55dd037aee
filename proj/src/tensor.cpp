#include "driftlm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "driftlm/errors.hpp"

namespace driftlm {

namespace {

std::size_t checked_count(const Shape& shape) {
    if (shape.empty()) {
        throw ContractViolation("tensor shape must have at least one dimension");
    }
    std::size_t n = 1;
    for (std::size_t dim : shape) {
        if (dim == 0) {
            throw ContractViolation("tensor dimensions must be positive, got " + shape_string(shape));
        }
        n *= dim;
    }
    return n;
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), values_(checked_count(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (checked_count(shape_) != values_.size()) {
        throw ContractViolation("tensor of shape " + shape_string(shape_) + " given " +
                                std::to_string(values_.size()) + " values");
    }
    if (!all_finite()) {
        throw InvalidInput("tensor values must be finite");
    }
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return shape_[0];
    throw ContractViolation("rows() needs a rank-1 or rank-2 tensor, got " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
    if (rank() == 1) return shape_[0];
    if (rank() == 2) return shape_[1];
    throw ContractViolation("cols() needs a rank-1 or rank-2 tensor, got " + shape_string(shape_));
}

std::span<const double> Tensor::row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const double>(values_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<double>(values_).subspan(r * c, c);
}

bool Tensor::all_finite() const noexcept {
    for (double v : values_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bit_identical(const Tensor& a, const Tensor& b) noexcept {
    return a.shape() == b.shape() &&
           std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace driftlm
