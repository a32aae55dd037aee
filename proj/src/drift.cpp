#include "driftlm/drift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"

namespace driftlm {

ReferenceQueue::ReferenceQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw InvalidInput("reference queue capacity must be positive");
}

void ReferenceQueue::push(std::span<const FeatureVec> features) {
    const std::size_t skip = features.size() > capacity_ ? features.size() - capacity_ : 0;
    for (std::size_t i = skip; i < features.size(); ++i) {
        if (entries_.size() == capacity_) entries_.pop_front();
        entries_.push_back(features[i]);
    }
}

void DriftConfig::validate() const {
    if (temperatures.empty()) throw InvalidInput("drift config: temperature set is empty");
    for (std::size_t i = 0; i < temperatures.size(); ++i) {
        if (!(temperatures[i] > 0.0)) throw InvalidInput("drift config: temperatures must be positive");
        for (std::size_t j = 0; j < i; ++j) {
            if (temperatures[i] == temperatures[j]) throw InvalidInput("drift config: temperatures must be distinct");
        }
    }
    if (!(eps > 0.0)) throw InvalidInput("drift config: eps must be positive");
    if (!(alpha > 0.0)) throw InvalidInput("drift config: alpha must be positive");
    if (w_plus < 0.0 || w_minus < 0.0) throw InvalidInput("drift config: ratio weights must be nonnegative");
    if (w_plus == 0.0 && w_minus == 0.0) throw InvalidInput("drift config: ratio weights cannot both be zero");
}

namespace {

double sq_dist(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

std::vector<double> affinities(const FeatureVec& h, const FeatureRefs& refs, double tau) {
    std::vector<double> s(refs.size());
    for (std::size_t j = 0; j < refs.size(); ++j) {
        if (refs[j]->dim() != h.dim()) throw ContractViolation("drift: feature dimension mismatch");
        s[j] = -sq_dist(h.values, refs[j]->values) / tau;
    }
    return s;
}

// exp(s - shift) in place; returns the sum.
double exponentiate(std::vector<double>& s, double shift) {
    double total = 0.0;
    for (double& v : s) {
        v = std::exp(v - shift);
        total += v;
    }
    return total;
}

double max_of(const std::vector<double>& a, const std::vector<double>& b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : a) mx = std::max(mx, v);
    for (double v : b) mx = std::max(mx, v);
    return mx;
}

// sum_j (weights_j / norm) * refs_j
void accumulate(Tensor& out, double coeff, const std::vector<double>& weights, double norm, const FeatureRefs& refs) {
    for (std::size_t j = 0; j < refs.size(); ++j) axpy(out, coeff * weights[j] / norm, refs[j]->values);
}

// Sums run in lexicographic order of the reference values, so the drift is an
// exact function of the reference multisets: equal sets cancel bit-for-bit.
FeatureRefs canonical(FeatureRefs refs) {
    std::sort(refs.begin(), refs.end(), [](const FeatureVec* a, const FeatureVec* b) {
        const auto va = a->values.values();
        const auto vb = b->values.values();
        return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    });
    return refs;
}

FeatureRefs as_refs(std::span<const FeatureVec> v) {
    FeatureRefs out;
    out.reserve(v.size());
    for (const auto& f : v) out.push_back(&f);
    return out;
}

}  // namespace

JointWeights joint_affinity_weights(const FeatureVec& h, const FeatureRefs& positives, const FeatureRefs& negatives,
                                    double tau) {
    JointWeights w{affinities(h, positives, tau), affinities(h, negatives, tau)};
    const double mx = max_of(w.positive, w.negative);
    const double total = exponentiate(w.positive, mx) + exponentiate(w.negative, mx);
    for (double& v : w.positive) v /= total;
    for (double& v : w.negative) v /= total;
    return w;
}

Tensor drift_single_temp(const FeatureVec& h, const FeatureRefs& positives, const FeatureRefs& negatives, double tau,
                         double w_plus, double w_minus, bool renormalize_sides) {
    if (!(tau > 0.0)) throw InvalidInput("drift: temperature must be positive");
    if (w_plus > 0.0 && positives.empty()) throw InvalidInput("drift: attraction weight > 0 needs positives");
    if (w_minus > 0.0 && negatives.empty()) throw InvalidInput("drift: repulsion weight > 0 needs negatives");
    const FeatureRefs pos = canonical(positives);
    const FeatureRefs neg = canonical(negatives);
    std::vector<double> sp = affinities(h, pos, tau);
    std::vector<double> sn = affinities(h, neg, tau);
    Tensor bp(h.values.shape());
    Tensor bn(h.values.shape());
    if (renormalize_sides) {
        // Renormalizing the joint softmax per side cancels the shared partition
        // function, so each side is a softmax over its own affinities.
        if (!sp.empty()) {
            const double mx = *std::max_element(sp.begin(), sp.end());
            accumulate(bp, 1.0, sp, exponentiate(sp, mx), pos);
        }
        if (!sn.empty()) {
            const double mx = *std::max_element(sn.begin(), sn.end());
            accumulate(bn, 1.0, sn, exponentiate(sn, mx), neg);
        }
    } else {
        const double mx = max_of(sp, sn);
        const double total = exponentiate(sp, mx) + exponentiate(sn, mx);
        accumulate(bp, 1.0, sp, total, pos);
        accumulate(bn, 1.0, sn, total, neg);
    }
    Tensor v(h.values.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w_plus * bp[i] - w_minus * bn[i];
    return v;
}

Tensor drift_single_temp(const FeatureVec& h, std::span<const FeatureVec> positives,
                         std::span<const FeatureVec> negatives, double tau, double w_plus, double w_minus,
                         bool renormalize_sides) {
    return drift_single_temp(h, as_refs(positives), as_refs(negatives), tau, w_plus, w_minus, renormalize_sides);
}

FeatureRefs References::positive_refs() const { return as_refs(positives); }

FeatureRefs References::negatives_for(std::size_t anchor) const {
    FeatureRefs out;
    out.reserve(negatives_pool.size());
    for (std::size_t k = 0; k < negatives_pool.size(); ++k) {
        if (negative_owner[k] != static_cast<int>(anchor)) out.push_back(&negatives_pool[k]);
    }
    return out;
}

References build_references(std::span<const FeatureVec> current_real, std::span<const FeatureVec> current_gen,
                            const ReferenceQueue& q_real, const ReferenceQueue& q_gen) {
    if (current_real.empty() || current_gen.empty()) throw InvalidInput("build_references: empty current batch");
    References refs;
    refs.positives.assign(current_real.begin(), current_real.end());
    refs.positives.insert(refs.positives.end(), q_real.entries().begin(), q_real.entries().end());
    refs.negatives_pool.assign(current_gen.begin(), current_gen.end());
    for (std::size_t i = 0; i < current_gen.size(); ++i) refs.negative_owner.push_back(static_cast<int>(i));
    refs.negatives_pool.insert(refs.negatives_pool.end(), q_gen.entries().begin(), q_gen.entries().end());
    refs.negative_owner.resize(refs.negatives_pool.size(), -1);
    return refs;
}

MultiTempDrift drift_multi_temp_detailed(std::span<const FeatureVec> anchors, const References& refs,
                                         const DriftConfig& config) {
    config.validate();
    if (anchors.empty()) throw InvalidInput("drift_multi_temp: empty anchor batch");
    const FeatureRefs positives = refs.positive_refs();
    std::vector<FeatureRefs> negatives;
    negatives.reserve(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) negatives.push_back(refs.negatives_for(i));

    MultiTempDrift out;
    out.drift.assign(anchors.size(), Tensor(anchors[0].values.shape()));
    const double inv_t = 1.0 / static_cast<double>(config.temperatures.size());
    for (double tau : config.temperatures) {
        std::vector<Tensor> raw;
        raw.reserve(anchors.size());
        double mean_sq = 0.0;
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            raw.push_back(drift_single_temp(anchors[i], positives, negatives[i], tau, config.w_plus, config.w_minus,
                                            config.renormalize_sides));
            mean_sq += dot(raw.back(), raw.back());
        }
        mean_sq /= static_cast<double>(anchors.size());
        const double s = std::sqrt(mean_sq + config.eps);
        for (std::size_t i = 0; i < anchors.size(); ++i) axpy(out.drift[i], inv_t / s, raw[i]);
        out.raw.push_back(std::move(raw));
        out.scales.push_back(s);
    }
    return out;
}

std::vector<Tensor> drift_multi_temp(std::span<const FeatureVec> anchors, const References& refs,
                                     const DriftConfig& config) {
    return drift_multi_temp_detailed(anchors, refs, config).drift;
}

}  // namespace driftlm
