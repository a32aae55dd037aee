#pragma once

#include "driftlm/backbone.hpp"
#include "driftlm/tensor.hpp"

namespace driftlm {

/// Pooled, L2-normalized sequence feature of dimension 2d.
struct FeatureVec {
    Tensor values;

    std::size_t dim() const noexcept { return values.size(); }
    friend bool operator==(const FeatureVec&, const FeatureVec&) = default;
};

/// Immutable snapshot of a denoiser used as the semantic feature map.
/// Only the embedding table, positional table and residual blocks are used.
class FrozenEncoder {
public:
    explicit FrozenEncoder(DenoiserParams snapshot);

    const DenoiserParams& params() const noexcept { return params_; }
    const Tensor& embed() const noexcept { return params_.embed; }
    int feature_dim() const noexcept { return params_.dims.feature_dim(); }

private:
    DenoiserParams params_;
};

Tensor embedding_lookup(const Tensor& embed, const TokenSeq& seq);

// Predicted rows become probs_t * embed; the rest take embed[corrupted_t].
Tensor soft_token_lift(const Tensor& probs, const CorruptionRecord& record, const Tensor& embed);

// Predicted rows take embed[argmax_v probs_t] (lowest index on ties). The
// backward pass is the soft lift's, see lift_vjp.
Tensor hard_st_lift(const Tensor& probs, const CorruptionRecord& record, const Tensor& embed);

// Cotangent of probs for either lift; rows outside the predicted set are zero.
Tensor lift_vjp(const CorruptionRecord& record, const Tensor& embed, const Tensor& upstream);

struct EncodeTrace {
    StackTrace stack;
    Tensor pooled;  // [meanpool(hidden1) ; meanpool(hidden2)] before normalization
};

struct Encoded {
    FeatureVec feature;
    EncodeTrace trace;
};

inline constexpr double degenerate_feature_norm = 1e-12;

// Throws DegenerateFeature when the pooled vector has norm below 1e-12.
Encoded encode_traced(const FrozenEncoder& encoder, const Tensor& embeddings);
FeatureVec encode(const FrozenEncoder& encoder, const Tensor& embeddings);

// Cotangent of the input embeddings given the cotangent of the feature.
Tensor encode_vjp(const FrozenEncoder& encoder, const EncodeTrace& trace, const Tensor& d_feature);

FeatureVec real_feature(const FrozenEncoder& encoder, const TokenSeq& clean);

}  // namespace driftlm
