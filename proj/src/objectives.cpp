#include "driftlm/objectives.hpp"

#include <cmath>

#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"

namespace driftlm {

std::string to_string(ObjectiveVariant v) {
    switch (v) {
        case ObjectiveVariant::BaseOnly: return "base";
        case ObjectiveVariant::FeatureL2: return "feature-l2";
        case ObjectiveVariant::MirrorKL: return "mirror-kl";
        case ObjectiveVariant::MirrorMSE: return "mirror-mse";
    }
    return "?";
}

std::string to_string(LiftKind k) { return k == LiftKind::Soft ? "soft" : "hard-st"; }

ObjectiveVariant parse_objective_variant(const std::string& text) {
    if (text == "base") return ObjectiveVariant::BaseOnly;
    if (text == "feature-l2") return ObjectiveVariant::FeatureL2;
    if (text == "mirror-kl") return ObjectiveVariant::MirrorKL;
    if (text == "mirror-mse") return ObjectiveVariant::MirrorMSE;
    throw InvalidInput("unknown objective '" + text + "' (expected base, feature-l2, mirror-kl or mirror-mse)");
}

LiftKind parse_lift_kind(const std::string& text) {
    if (text == "soft") return LiftKind::Soft;
    if (text == "hard-st") return LiftKind::HardST;
    throw InvalidInput("unknown lift '" + text + "' (expected soft or hard-st)");
}

void ObjectiveKind::validate() const {
    if (!(alpha > 0.0)) throw InvalidInput("objective: alpha must be positive");
    if (!(eta >= 0.0)) throw InvalidInput("objective: eta must be nonnegative");
}

FixedPointLoss feature_fixed_point_loss(const FeatureVec& h, const Tensor& drift, double alpha) {
    if (drift.shape() != h.values.shape()) throw ContractViolation("fixed-point loss: drift shape mismatch");
    FixedPointLoss out;
    out.loss = 0.5 * alpha * alpha * dot(drift, drift);
    out.grad_h = scale(drift, -alpha);
    return out;
}

LiftGraph lift_and_encode(const FrozenEncoder& encoder, const Tensor& logits, const CorruptionRecord& record,
                          LiftKind lift) {
    LiftGraph g;
    g.record = record;
    g.lift = lift;
    g.logits = logits;
    g.probs = softmax_rows(logits);
    g.lifted = lift == LiftKind::Soft ? soft_token_lift(g.probs, record, encoder.embed())
                                      : hard_st_lift(g.probs, record, encoder.embed());
    Encoded enc = encode_traced(encoder, g.lifted);
    g.trace = std::move(enc.trace);
    g.feature = std::move(enc.feature);
    return g;
}

Tensor pullback_to_logits(const FrozenEncoder& encoder, const LiftGraph& graph, const Tensor& d_feature) {
    const Tensor d_lifted = encode_vjp(encoder, graph.trace, d_feature);
    const Tensor d_probs = lift_vjp(graph.record, encoder.embed(), d_lifted);
    return softmax_rows_vjp(graph.probs, d_probs);
}

Tensor mirror_direction(const FrozenEncoder& encoder, const LiftGraph& graph, const Tensor& drift) {
    return pullback_to_logits(encoder, graph, drift);
}

Tensor mirror_teacher(const Tensor& logits, const Tensor& g, double eta) {
    if (!(eta >= 0.0)) throw InvalidInput("mirror teacher: eta must be nonnegative");
    if (g.shape() != logits.shape()) throw ContractViolation("mirror teacher: direction shape mismatch");
    Tensor shifted = logits;
    axpy(shifted, eta, g);
    return softmax_rows(shifted);
}

namespace {

void check_positions(const Tensor& logits, const std::vector<int>& positions) {
    for (int pos : positions) {
        if (pos < 0 || static_cast<std::size_t>(pos) >= logits.rows()) {
            throw ContractViolation("objective: predicted position out of range");
        }
    }
}

}  // namespace

LossAndGrad mirror_kl_loss(const Tensor& p_star, const Tensor& logits, const std::vector<int>& positions) {
    if (p_star.shape() != logits.shape()) throw ContractViolation("mirror-KL: teacher shape mismatch");
    check_positions(logits, positions);
    LossAndGrad out{0.0, Tensor(logits.shape())};
    if (positions.empty()) return out;
    const double inv = 1.0 / static_cast<double>(positions.size());
    const Tensor p = softmax_rows(logits);
    for (int pos : positions) {
        const auto r = static_cast<std::size_t>(pos);
        auto lrow = logits.row(r);
        double mx = lrow[0];
        for (double v : lrow) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : lrow) z += std::exp(v - mx);
        const double log_z = mx + std::log(z);
        auto q = p_star.row(r);
        auto pr = p.row(r);
        auto grow = out.grad_logits.row(r);
        double kl = 0.0;
        for (std::size_t v = 0; v < q.size(); ++v) {
            // Equal entries contribute exactly nothing, so p* == p gives an exact zero.
            if (q[v] > 0.0 && q[v] != pr[v]) kl += q[v] * (std::log(q[v]) - (lrow[v] - log_z));
            grow[v] = (pr[v] - q[v]) * inv;
        }
        out.loss += kl * inv;
    }
    return out;
}

LossAndGrad mirror_mse_loss(const Tensor& l_star, const Tensor& logits, const std::vector<int>& positions) {
    if (l_star.shape() != logits.shape()) throw ContractViolation("mirror-MSE: target shape mismatch");
    check_positions(logits, positions);
    LossAndGrad out{0.0, Tensor(logits.shape())};
    if (positions.empty()) return out;
    const double inv = 1.0 / static_cast<double>(positions.size());
    for (int pos : positions) {
        const auto r = static_cast<std::size_t>(pos);
        auto a = logits.row(r);
        auto b = l_star.row(r);
        auto grow = out.grad_logits.row(r);
        for (std::size_t v = 0; v < a.size(); ++v) {
            const double diff = a[v] - b[v];
            out.loss += diff * diff * inv;
            grow[v] = 2.0 * diff * inv;
        }
    }
    return out;
}

ObjectiveResult total_objective(const ObjectiveKind& kind, const FrozenEncoder& encoder,
                                std::span<const LiftGraph> graphs, std::span<const Tensor> drifts,
                                std::span<const TokenSeq> clean) {
    kind.validate();
    const std::size_t n = graphs.size();
    if (n == 0) throw InvalidInput("total_objective: empty batch");
    if (clean.size() != n) throw ContractViolation("total_objective: clean batch size mismatch");
    if (kind.uses_drift() && drifts.size() != n) throw ContractViolation("total_objective: drift batch size mismatch");
    const double inv_b = 1.0 / static_cast<double>(n);
    const bool base_term = kind.with_base_loss || kind.variant == ObjectiveVariant::BaseOnly;

    ObjectiveResult out;
    out.grad_logits.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const LiftGraph& g = graphs[i];
        const std::vector<int>& positions = g.record.predicted;
        Tensor grad(g.logits.shape());
        switch (kind.variant) {
            case ObjectiveVariant::BaseOnly: break;
            case ObjectiveVariant::FeatureL2: {
                const FixedPointLoss fp = feature_fixed_point_loss(g.feature, drifts[i], kind.alpha);
                out.drift_loss += fp.loss * inv_b;
                grad = pullback_to_logits(encoder, g, scale(fp.grad_h, inv_b));
                break;
            }
            case ObjectiveVariant::MirrorKL: {
                const Tensor dir = mirror_direction(encoder, g, drifts[i]);
                const LossAndGrad m = mirror_kl_loss(mirror_teacher(g.logits, dir, kind.eta), g.logits, positions);
                out.drift_loss += m.loss * inv_b;
                axpy(grad, inv_b, m.grad_logits);
                break;
            }
            case ObjectiveVariant::MirrorMSE: {
                const Tensor dir = mirror_direction(encoder, g, drifts[i]);
                Tensor target = g.logits;
                axpy(target, kind.eta, dir);
                const LossAndGrad m = mirror_mse_loss(target, g.logits, positions);
                out.drift_loss += m.loss * inv_b;
                axpy(grad, inv_b, m.grad_logits);
                break;
            }
        }
        if (base_term) {
            const LossAndGrad b = driftlm::base_loss(g.logits, clean[i], positions);
            out.base_loss += b.loss * inv_b;
            axpy(grad, inv_b, b.grad_logits);
        }
        out.grad_logits.push_back(std::move(grad));
    }
    out.loss = out.drift_loss + out.base_loss;
    return out;
}

}  // namespace driftlm
