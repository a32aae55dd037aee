#pragma once

#include <deque>
#include <span>
#include <vector>

#include "driftlm/encoder.hpp"

namespace driftlm {

/// Bounded FIFO of detached features, oldest first.
class ReferenceQueue {
public:
    explicit ReferenceQueue(std::size_t capacity);

    // Appends in order, evicting the oldest entries beyond capacity.
    void push(std::span<const FeatureVec> features);

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::deque<FeatureVec>& entries() const noexcept { return entries_; }

private:
    std::size_t capacity_;
    std::deque<FeatureVec> entries_;
};

struct DriftConfig {
    std::vector<double> temperatures{0.02, 0.05, 0.2};
    double eps = 1e-8;
    double alpha = 1.0;
    double w_plus = 1.0;
    double w_minus = 1.0;
    // Per-side renormalized barycenters; false uses the raw joint-softmax weights.
    bool renormalize_sides = true;

    void validate() const;
};

using FeatureRefs = std::vector<const FeatureVec*>;

struct JointWeights {
    std::vector<double> positive;
    std::vector<double> negative;
};

// One softmax over the concatenated affinities -||h - r||^2 / tau.
JointWeights joint_affinity_weights(const FeatureVec& h, const FeatureRefs& positives, const FeatureRefs& negatives,
                                    double tau);

/// w_plus * b+ - w_minus * b-, with b+/b- the attractive/repulsive barycenters.
/// A side may be empty only when its ratio weight is zero (its barycenter is then 0).
Tensor drift_single_temp(const FeatureVec& h, const FeatureRefs& positives, const FeatureRefs& negatives, double tau,
                         double w_plus, double w_minus, bool renormalize_sides = true);
Tensor drift_single_temp(const FeatureVec& h, std::span<const FeatureVec> positives,
                         std::span<const FeatureVec> negatives, double tau, double w_plus, double w_minus,
                         bool renormalize_sides = true);

/// Positive references plus the negative pool. Each pool entry records which
/// current-batch anchor produced it (-1 for queue entries) so an anchor can be
/// excluded from its own negatives by identity rather than by value.
struct References {
    std::vector<FeatureVec> positives;
    std::vector<FeatureVec> negatives_pool;
    std::vector<int> negative_owner;

    FeatureRefs positive_refs() const;
    FeatureRefs negatives_for(std::size_t anchor) const;
};

References build_references(std::span<const FeatureVec> current_real, std::span<const FeatureVec> current_gen,
                            const ReferenceQueue& q_real, const ReferenceQueue& q_gen);

struct MultiTempDrift {
    std::vector<Tensor> drift;                 // per anchor, averaged over temperatures
    std::vector<std::vector<Tensor>> raw;      // [temperature][anchor] before RMS scaling
    std::vector<double> scales;                // s^(tau) per temperature
};

// Anchor i is current_gen[i] of the References it was built with.
MultiTempDrift drift_multi_temp_detailed(std::span<const FeatureVec> anchors, const References& refs,
                                         const DriftConfig& config);
std::vector<Tensor> drift_multi_temp(std::span<const FeatureVec> anchors, const References& refs,
                                     const DriftConfig& config);

}  // namespace driftlm
