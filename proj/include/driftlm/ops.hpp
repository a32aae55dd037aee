#pragma once

#include <array>
#include <span>
#include <string_view>
#include <vector>

#include "driftlm/tensor.hpp"

namespace driftlm {

// Forward primitives. Matrices are rank-2 row-major; vectors are rank-1.

Tensor softmax_rows(const Tensor& logits);
Tensor matmul(const Tensor& a, const Tensor& b);
// Same-shape add, or matrix + vector with the vector added to every row.
Tensor add(const Tensor& a, const Tensor& b);
Tensor tanh_elem(const Tensor& x);
// Mean over rows: [n x c] -> [c].
Tensor mean_pool(const Tensor& x);
// Column concatenation of two matrices with equal row counts, or vector concatenation.
Tensor concat(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& x);
Tensor scale(const Tensor& x, double s);
// [c] -> [n x c], every row a copy of the vector.
Tensor broadcast_rows(const Tensor& v, std::size_t n);
Tensor gather_rows(const Tensor& table, std::span<const int> indices);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& x);
// a += s * b
void axpy(Tensor& a, double s, const Tensor& b);

// Vector-Jacobian products. Each returns the cotangent(s) of the inputs given
// the cotangent `upstream` of the output.

Tensor softmax_rows_vjp(const Tensor& probs, const Tensor& upstream);
std::array<Tensor, 2> matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& upstream);
std::array<Tensor, 2> add_vjp(const Shape& a_shape, const Shape& b_shape, const Tensor& upstream);
Tensor tanh_vjp(const Tensor& output, const Tensor& upstream);
Tensor mean_pool_vjp(std::size_t rows, const Tensor& upstream);
std::array<Tensor, 2> concat_vjp(const Shape& a_shape, const Shape& b_shape, const Tensor& upstream);
Tensor l2_normalize_vjp(const Tensor& x, const Tensor& upstream);
Tensor scale_vjp(double s, const Tensor& upstream);
Tensor broadcast_rows_vjp(const Tensor& upstream);
// Scatter-add into a zero table of `table_rows` rows.
Tensor gather_rows_vjp(std::size_t table_rows, std::span<const int> indices, const Tensor& upstream);

enum class PrimitiveId {
    SoftmaxRows,
    Matmul,
    Add,
    Tanh,
    MeanPool,
    Concat,
    L2Normalize,
    ScalarScale,
    BroadcastRows,
};

inline constexpr std::array<PrimitiveId, 9> all_primitives{
    PrimitiveId::SoftmaxRows, PrimitiveId::Matmul,      PrimitiveId::Add,
    PrimitiveId::Tanh,        PrimitiveId::MeanPool,    PrimitiveId::Concat,
    PrimitiveId::L2Normalize, PrimitiveId::ScalarScale, PrimitiveId::BroadcastRows,
};

std::string_view primitive_name(PrimitiveId id);

// Uniform dispatch used by the gradient checks. ScalarScale takes {x, s} with s
// a one-element vector; BroadcastRows takes {v, n} with n encoded as a
// one-element vector holding the row count (its cotangent slot is zero).
Tensor apply(PrimitiveId id, std::span<const Tensor> inputs);
std::vector<Tensor> vjp(PrimitiveId id, std::span<const Tensor> inputs, const Tensor& upstream);

}  // namespace driftlm
