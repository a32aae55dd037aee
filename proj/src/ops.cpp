#include "driftlm/ops.hpp"

#include <algorithm>
#include <cmath>

#include "driftlm/errors.hpp"

namespace driftlm {

namespace {

void require(bool ok, const char* what) {
    if (!ok) throw ContractViolation(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
}

void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw ContractViolation(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
    if (!logits.all_finite()) throw InvalidInput("softmax_rows: non-finite logits");
    Tensor out(logits.shape());
    const std::size_t n = logits.rows();
    for (std::size_t r = 0; r < n; ++r) {
        auto in = logits.row(r);
        auto dst = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            dst[c] = std::exp(in[c] - mx);
            sum += dst[c];
        }
        for (double& v : dst) v /= sum;
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ContractViolation("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
    }
    Tensor out({n, m});
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = po + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
        return out;
    }
    if (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols()) {
        const std::size_t c = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
            auto dst = out.row(r);
            for (std::size_t j = 0; j < c; ++j) dst[j] += b[j];
        }
        return out;
    }
    throw ContractViolation("add: incompatible shapes " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
}

Tensor tanh_elem(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
    return out;
}

Tensor mean_pool(const Tensor& x) {
    const std::size_t n = x.rows(), c = x.cols();
    Tensor out({c});
    for (std::size_t r = 0; r < n; ++r) {
        auto src = x.row(r);
        for (std::size_t j = 0; j < c; ++j) out[j] += src[j];
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (double& v : out.values()) v *= inv;
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.rank() == 1 && b.rank() == 1) {
        Tensor out({a.size() + b.size()});
        std::copy(a.values().begin(), a.values().end(), out.values().begin());
        std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
        return out;
    }
    require_matrix(a, "concat");
    require_matrix(b, "concat");
    if (a.rows() != b.rows()) throw ContractViolation("concat: row counts differ");
    const std::size_t ca = a.cols(), cb = b.cols();
    Tensor out({a.rows(), ca + cb});
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto dst = out.row(r);
        std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
        std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(ca));
    }
    return out;
}

Tensor l2_normalize(const Tensor& x) {
    const double n = l2_norm(x);
    if (!(n > 0.0)) throw InvalidInput("l2_normalize: zero vector");
    return scale(x, 1.0 / n);
}

Tensor scale(const Tensor& x, double s) {
    Tensor out = x;
    for (double& v : out.values()) v *= s;
    return out;
}

Tensor broadcast_rows(const Tensor& v, std::size_t n) {
    require(v.rank() == 1, "broadcast_rows: expected a vector");
    Tensor out({n, v.size()});
    for (std::size_t r = 0; r < n; ++r) std::copy(v.values().begin(), v.values().end(), out.row(r).begin());
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
    require_matrix(table, "gather_rows");
    Tensor out({indices.size(), table.cols()});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const int idx = indices[r];
        if (idx < 0 || static_cast<std::size_t>(idx) >= table.rows()) {
            throw InvalidInput("gather_rows: index " + std::to_string(idx) + " out of range");
        }
        auto src = table.row(static_cast<std::size_t>(idx));
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ContractViolation("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(const Tensor& x) { return std::sqrt(dot(x, x)); }

void axpy(Tensor& a, double s, const Tensor& b) {
    require_same_shape(a, b, "axpy");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

Tensor softmax_rows_vjp(const Tensor& probs, const Tensor& upstream) {
    require_same_shape(probs, upstream, "softmax_rows_vjp");
    Tensor out(probs.shape());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        auto p = probs.row(r);
        auto u = upstream.row(r);
        double inner = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) inner += p[c] * u[c];
        auto dst = out.row(r);
        for (std::size_t c = 0; c < p.size(); ++c) dst[c] = p[c] * (u[c] - inner);
    }
    return out;
}

namespace {

Tensor transpose(const Tensor& a) {
    const std::size_t n = a.rows(), m = a.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out(j, i) = a(i, j);
    return out;
}

}  // namespace

std::array<Tensor, 2> matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& upstream) {
    require_matrix(upstream, "matmul_vjp");
    if (upstream.rows() != a.rows() || upstream.cols() != b.cols()) {
        throw ContractViolation("matmul_vjp: upstream shape " + shape_string(upstream.shape()) +
                                " does not match output of " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
    }
    return {matmul(upstream, transpose(b)), matmul(transpose(a), upstream)};
}

std::array<Tensor, 2> add_vjp(const Shape& a_shape, const Shape& b_shape, const Tensor& upstream) {
    if (upstream.shape() != a_shape) throw ContractViolation("add_vjp: upstream shape mismatch");
    if (a_shape == b_shape) return {upstream, upstream};
    Tensor db(b_shape);
    for (std::size_t r = 0; r < upstream.rows(); ++r) {
        auto u = upstream.row(r);
        for (std::size_t j = 0; j < u.size(); ++j) db[j] += u[j];
    }
    return {upstream, db};
}

Tensor tanh_vjp(const Tensor& output, const Tensor& upstream) {
    require_same_shape(output, upstream, "tanh_vjp");
    Tensor out(output.shape());
    for (std::size_t i = 0; i < output.size(); ++i) out[i] = upstream[i] * (1.0 - output[i] * output[i]);
    return out;
}

Tensor mean_pool_vjp(std::size_t rows, const Tensor& upstream) {
    require(upstream.rank() == 1, "mean_pool_vjp: upstream must be a vector");
    Tensor out = broadcast_rows(upstream, rows);
    const double inv = 1.0 / static_cast<double>(rows);
    for (double& v : out.values()) v *= inv;
    return out;
}

std::array<Tensor, 2> concat_vjp(const Shape& a_shape, const Shape& b_shape, const Tensor& upstream) {
    Tensor da(a_shape), db(b_shape);
    if (a_shape.size() == 1) {
        if (upstream.size() != da.size() + db.size()) throw ContractViolation("concat_vjp: upstream size mismatch");
        std::copy_n(upstream.values().begin(), da.size(), da.values().begin());
        std::copy_n(upstream.values().begin() + static_cast<std::ptrdiff_t>(da.size()), db.size(), db.values().begin());
        return {da, db};
    }
    if (upstream.rank() != 2 || upstream.rows() != da.rows() || upstream.cols() != da.cols() + db.cols()) {
        throw ContractViolation("concat_vjp: upstream shape mismatch");
    }
    const std::size_t ca = da.cols();
    for (std::size_t r = 0; r < upstream.rows(); ++r) {
        auto u = upstream.row(r);
        std::copy_n(u.begin(), ca, da.row(r).begin());
        std::copy(u.begin() + static_cast<std::ptrdiff_t>(ca), u.end(), db.row(r).begin());
    }
    return {da, db};
}

Tensor l2_normalize_vjp(const Tensor& x, const Tensor& upstream) {
    require_same_shape(x, upstream, "l2_normalize_vjp");
    const double n = l2_norm(x);
    if (!(n > 0.0)) throw InvalidInput("l2_normalize_vjp: zero vector");
    Tensor y = scale(x, 1.0 / n);
    const double proj = dot(y, upstream);
    Tensor out = upstream;
    axpy(out, -proj, y);
    for (double& v : out.values()) v /= n;
    return out;
}

Tensor scale_vjp(double s, const Tensor& upstream) { return scale(upstream, s); }

Tensor broadcast_rows_vjp(const Tensor& upstream) {
    require_matrix(upstream, "broadcast_rows_vjp");
    Tensor out({upstream.cols()});
    for (std::size_t r = 0; r < upstream.rows(); ++r) {
        auto u = upstream.row(r);
        for (std::size_t j = 0; j < u.size(); ++j) out[j] += u[j];
    }
    return out;
}

Tensor gather_rows_vjp(std::size_t table_rows, std::span<const int> indices, const Tensor& upstream) {
    require_matrix(upstream, "gather_rows_vjp");
    if (upstream.rows() != indices.size()) throw ContractViolation("gather_rows_vjp: upstream row count mismatch");
    Tensor out({table_rows, upstream.cols()});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        auto dst = out.row(static_cast<std::size_t>(indices[r]));
        auto u = upstream.row(r);
        for (std::size_t j = 0; j < u.size(); ++j) dst[j] += u[j];
    }
    return out;
}

std::string_view primitive_name(PrimitiveId id) {
    switch (id) {
        case PrimitiveId::SoftmaxRows: return "softmax_rows";
        case PrimitiveId::Matmul: return "matmul";
        case PrimitiveId::Add: return "add";
        case PrimitiveId::Tanh: return "tanh";
        case PrimitiveId::MeanPool: return "mean_pool";
        case PrimitiveId::Concat: return "concat";
        case PrimitiveId::L2Normalize: return "l2_normalize";
        case PrimitiveId::ScalarScale: return "scalar_scale";
        case PrimitiveId::BroadcastRows: return "broadcast_rows";
    }
    return "unknown";
}

namespace {

std::size_t arity(PrimitiveId id) {
    switch (id) {
        case PrimitiveId::Matmul:
        case PrimitiveId::Add:
        case PrimitiveId::Concat:
        case PrimitiveId::ScalarScale:
        case PrimitiveId::BroadcastRows: return 2;
        default: return 1;
    }
}

void check_arity(PrimitiveId id, std::span<const Tensor> inputs) {
    if (inputs.size() != arity(id)) {
        throw ContractViolation(std::string(primitive_name(id)) + ": expected " + std::to_string(arity(id)) +
                                " inputs, got " + std::to_string(inputs.size()));
    }
}

std::size_t row_count_arg(const Tensor& t) {
    if (t.size() != 1 || t[0] < 1.0) throw ContractViolation("broadcast_rows: row count must be a positive scalar");
    return static_cast<std::size_t>(t[0]);
}

}  // namespace

Tensor apply(PrimitiveId id, std::span<const Tensor> inputs) {
    check_arity(id, inputs);
    switch (id) {
        case PrimitiveId::SoftmaxRows: return softmax_rows(inputs[0]);
        case PrimitiveId::Matmul: return matmul(inputs[0], inputs[1]);
        case PrimitiveId::Add: return add(inputs[0], inputs[1]);
        case PrimitiveId::Tanh: return tanh_elem(inputs[0]);
        case PrimitiveId::MeanPool: return mean_pool(inputs[0]);
        case PrimitiveId::Concat: return concat(inputs[0], inputs[1]);
        case PrimitiveId::L2Normalize: return l2_normalize(inputs[0]);
        case PrimitiveId::ScalarScale: return scale(inputs[0], inputs[1][0]);
        case PrimitiveId::BroadcastRows: return broadcast_rows(inputs[0], row_count_arg(inputs[1]));
    }
    throw ContractViolation("apply: unknown primitive");
}

std::vector<Tensor> vjp(PrimitiveId id, std::span<const Tensor> inputs, const Tensor& upstream) {
    check_arity(id, inputs);
    const Tensor out = apply(id, inputs);
    if (out.shape() != upstream.shape()) {
        throw ContractViolation(std::string(primitive_name(id)) + " vjp: upstream shape " +
                                shape_string(upstream.shape()) + " does not match output " +
                                shape_string(out.shape()));
    }
    switch (id) {
        case PrimitiveId::SoftmaxRows: return {softmax_rows_vjp(out, upstream)};
        case PrimitiveId::Matmul: {
            auto [da, db] = matmul_vjp(inputs[0], inputs[1], upstream);
            return {da, db};
        }
        case PrimitiveId::Add: {
            auto [da, db] = add_vjp(inputs[0].shape(), inputs[1].shape(), upstream);
            return {da, db};
        }
        case PrimitiveId::Tanh: return {tanh_vjp(out, upstream)};
        case PrimitiveId::MeanPool: return {mean_pool_vjp(inputs[0].rows(), upstream)};
        case PrimitiveId::Concat: {
            auto [da, db] = concat_vjp(inputs[0].shape(), inputs[1].shape(), upstream);
            return {da, db};
        }
        case PrimitiveId::L2Normalize: return {l2_normalize_vjp(inputs[0], upstream)};
        case PrimitiveId::ScalarScale:
            return {scale_vjp(inputs[1][0], upstream), Tensor::vector({dot(inputs[0], upstream)})};
        case PrimitiveId::BroadcastRows: return {broadcast_rows_vjp(upstream), Tensor::zeros_like(inputs[1])};
    }
    throw ContractViolation("vjp: unknown primitive");
}

}  // namespace driftlm
