#pragma once

#include <span>
#include <string>
#include <vector>

#include "driftlm/backbone.hpp"
#include "driftlm/drift.hpp"
#include "driftlm/encoder.hpp"

namespace driftlm {

// BaseOnly trains on the denoising cross-entropy alone (base training and
// plain continuation); the other three are the drifting objectives.
enum class ObjectiveVariant { BaseOnly, FeatureL2, MirrorKL, MirrorMSE };
enum class LiftKind { Soft, HardST };

std::string to_string(ObjectiveVariant v);
std::string to_string(LiftKind k);
ObjectiveVariant parse_objective_variant(const std::string& text);
LiftKind parse_lift_kind(const std::string& text);

struct ObjectiveKind {
    ObjectiveVariant variant = ObjectiveVariant::FeatureL2;
    bool with_base_loss = false;
    LiftKind lift = LiftKind::Soft;
    double eta = 1.0;  // mirror variants only
    double alpha = 1.0;

    bool uses_drift() const noexcept { return variant != ObjectiveVariant::BaseOnly; }
    void validate() const;
};

struct FixedPointLoss {
    double loss = 0.0;
    Tensor grad_h;
};

// 0.5 * ||h - sg(h + alpha V)||^2 and its gradient in h, which is -alpha V.
FixedPointLoss feature_fixed_point_loss(const FeatureVec& h, const Tensor& drift, double alpha);

/// Retained forward state of logits -> softmax -> lift -> encode for one sample.
struct LiftGraph {
    CorruptionRecord record;
    LiftKind lift = LiftKind::Soft;
    Tensor logits;
    Tensor probs;
    Tensor lifted;
    EncodeTrace trace;
    FeatureVec feature;
};

LiftGraph lift_and_encode(const FrozenEncoder& encoder, const Tensor& logits, const CorruptionRecord& record,
                          LiftKind lift);

// J_h(logits)^T d_feature through the stored graph. Rows outside the predicted set are zero.
Tensor pullback_to_logits(const FrozenEncoder& encoder, const LiftGraph& graph, const Tensor& d_feature);

// g = grad_logits <h(logits), sg(V)>
Tensor mirror_direction(const FrozenEncoder& encoder, const LiftGraph& graph, const Tensor& drift);

// softmax(logits + eta g); the result is a constant for every consumer.
Tensor mirror_teacher(const Tensor& logits, const Tensor& g, double eta);

// Mean over `positions` of KL(p* || softmax(logits)).
LossAndGrad mirror_kl_loss(const Tensor& p_star, const Tensor& logits, const std::vector<int>& positions);

// Mean over `positions` of ||l* - logits||^2.
LossAndGrad mirror_mse_loss(const Tensor& l_star, const Tensor& logits, const std::vector<int>& positions);

struct ObjectiveResult {
    double loss = 0.0;
    double drift_loss = 0.0;
    double base_loss = 0.0;
    std::vector<Tensor> grad_logits;  // per sample
};

/// Batch-mean objective. `drifts[i]` belongs to `graphs[i]`, `clean[i]` is its
/// uncorrupted sequence. `drifts` may be empty for BaseOnly.
ObjectiveResult total_objective(const ObjectiveKind& kind, const FrozenEncoder& encoder,
                                std::span<const LiftGraph> graphs, std::span<const Tensor> drifts,
                                std::span<const TokenSeq> clean);

}  // namespace driftlm
