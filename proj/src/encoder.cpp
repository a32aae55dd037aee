#include "driftlm/encoder.hpp"

#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"

namespace driftlm {

FrozenEncoder::FrozenEncoder(DenoiserParams snapshot) : params_(std::move(snapshot)) { params_.validate(); }

Tensor embedding_lookup(const Tensor& embed, const TokenSeq& seq) { return gather_rows(embed, seq.tokens); }

namespace {

void check_lift_shapes(const Tensor& probs, const CorruptionRecord& record, const Tensor& embed) {
    if (probs.rank() != 2 || probs.rows() != record.corrupted.size() || probs.cols() != embed.rows()) {
        throw ContractViolation("lift: probs shape " + shape_string(probs.shape()) +
                                " does not match the record and embedding table");
    }
}

template <class RowFn>
Tensor lift_rows(const Tensor& probs, const CorruptionRecord& record, const Tensor& embed, RowFn predicted_row) {
    check_lift_shapes(probs, record, embed);
    Tensor out = embedding_lookup(embed, record.corrupted);
    for (int pos : record.predicted) {
        const auto r = static_cast<std::size_t>(pos);
        predicted_row(probs.row(r), out.row(r));
    }
    return out;
}

}  // namespace

Tensor soft_token_lift(const Tensor& probs, const CorruptionRecord& record, const Tensor& embed) {
    return lift_rows(probs, record, embed, [&](std::span<const double> p, std::span<double> dst) {
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t v = 0; v < p.size(); ++v) {
            const double w = p[v];
            if (w == 0.0) continue;
            auto e = embed.row(v);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += w * e[j];
        }
    });
}

Tensor hard_st_lift(const Tensor& probs, const CorruptionRecord& record, const Tensor& embed) {
    return lift_rows(probs, record, embed, [&](std::span<const double> p, std::span<double> dst) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < p.size(); ++v) {
            if (p[v] > p[best]) best = v;
        }
        auto e = embed.row(best);
        std::copy(e.begin(), e.end(), dst.begin());
    });
}

Tensor lift_vjp(const CorruptionRecord& record, const Tensor& embed, const Tensor& upstream) {
    if (upstream.rank() != 2 || upstream.rows() != record.corrupted.size() || upstream.cols() != embed.cols()) {
        throw ContractViolation("lift_vjp: upstream shape mismatch");
    }
    Tensor d_probs({upstream.rows(), embed.rows()});
    for (int pos : record.predicted) {
        const auto r = static_cast<std::size_t>(pos);
        auto u = upstream.row(r);
        auto dst = d_probs.row(r);
        for (std::size_t v = 0; v < dst.size(); ++v) {
            auto e = embed.row(v);
            double s = 0.0;
            for (std::size_t j = 0; j < u.size(); ++j) s += u[j] * e[j];
            dst[v] = s;
        }
    }
    return d_probs;
}

Encoded encode_traced(const FrozenEncoder& encoder, const Tensor& embeddings) {
    if (!embeddings.all_finite()) throw InvalidInput("encode: non-finite embeddings");
    const DenoiserParams& p = encoder.params();
    if (embeddings.shape() != p.pos_embed.shape()) {
        throw ContractViolation("encode: embeddings shape " + shape_string(embeddings.shape()) + ", expected " +
                                shape_string(p.pos_embed.shape()));
    }
    Encoded out;
    out.trace.stack = run_blocks(p, add(embeddings, p.pos_embed));
    out.trace.pooled = concat(mean_pool(out.trace.stack.hidden1), mean_pool(out.trace.stack.hidden2));
    if (l2_norm(out.trace.pooled) < degenerate_feature_norm) {
        throw DegenerateFeature("encode: pooled feature has norm below 1e-12");
    }
    out.feature.values = l2_normalize(out.trace.pooled);
    return out;
}

FeatureVec encode(const FrozenEncoder& encoder, const Tensor& embeddings) {
    return encode_traced(encoder, embeddings).feature;
}

Tensor encode_vjp(const FrozenEncoder& encoder, const EncodeTrace& trace, const Tensor& d_feature) {
    const Tensor d_pooled = l2_normalize_vjp(trace.pooled, d_feature);
    const Tensor m1 = mean_pool(trace.stack.hidden1);
    auto [d_m1, d_m2] = concat_vjp(m1.shape(), m1.shape(), d_pooled);
    const std::size_t len = trace.stack.hidden1.rows();
    return backprop_blocks(encoder.params(), trace.stack, mean_pool_vjp(len, d_m1), mean_pool_vjp(len, d_m2), nullptr);
}

FeatureVec real_feature(const FrozenEncoder& encoder, const TokenSeq& clean) {
    for (Token tok : clean.tokens) {
        if (tok < 0 || tok >= encoder.params().dims.clean_vocab()) {
            throw InvalidInput("real_feature: clean sequence holds a non-clean token");
        }
    }
    return encode(encoder, embedding_lookup(encoder.embed(), clean));
}

}  // namespace driftlm
