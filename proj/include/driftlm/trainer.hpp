#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "driftlm/backbone.hpp"
#include "driftlm/checkpoint.hpp"
#include "driftlm/drift.hpp"
#include "driftlm/eval.hpp"
#include "driftlm/objectives.hpp"

namespace driftlm {

struct TrainConfig {
    int batch_size = 32;
    int micro_batch = 8;
    std::int64_t steps = 2000;
    double lr = 3e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    ObjectiveKind objective;
    DriftConfig drift;
    CorruptionKind corruption = CorruptionKind::Masked;
    int eval_every = 500;
    std::size_t queue_capacity = 256;
    double t_min = 0.05;
    double t_max = 0.95;
    EvalConfig eval;
    // Continue the Adam moments and bias-correction count stored in the
    // initial checkpoint instead of starting the optimizer fresh.
    bool resume_optimizer = false;

    // Base training: denoising cross-entropy, lr 3e-4.
    static TrainConfig base_defaults();
    // Drifting continuation: FeatureL2 without base loss, lr 3e-5.
    static TrainConfig drift_defaults();

    void validate() const;
};

struct TrainState {
    DenoiserParams params;
    AdamMoments moments;
    ReferenceQueue q_real;
    ReferenceQueue q_gen;
    std::int64_t step = 0;    // global update count, carried in checkpoints
    std::int64_t adam_t = 0;  // updates seen by the current moments
    Rng rng;

    static TrainState start(const Checkpoint& init, const TrainConfig& config);
};

struct StepMetrics {
    double loss = 0.0;
    double drift_norm = 0.0;  // mean ||V_i|| over the batch, 0 without drift
    double grad_norm = 0.0;   // global L2 norm of the averaged parameter gradient
};

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// grads += s * src over every parameter tensor
void accumulate(DenoiserParams& grads, double s, const DenoiserParams& src);
double global_norm(const DenoiserParams& p);
// One bias-corrected Adam step; `t` is the 1-based update index.
void adam_update(DenoiserParams& params, AdamMoments& moments, const DenoiserParams& grads, std::int64_t t,
                 const AdamConfig& config);

/// One optimizer update from a batch of clean sequences (size batch_size).
/// References for every micro-batch are the current micro-batch plus the queue
/// contents at step start; queues receive this step's features after the update.
/// Returns the averaged parameter gradient through `grad_out` when non-null.
StepMetrics train_step(TrainState& state, const FrozenEncoder& encoder, std::span<const TokenSeq> clean_batch,
                       const TrainConfig& config, DenoiserParams* grad_out = nullptr);

struct MetricsRow {
    std::int64_t step = 0;
    std::optional<StepMetrics> train;  // averaged over the steps since the previous row; none at step 0
    EvalReport eval;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<int>& nfes);

struct RunResult {
    Checkpoint final;
    std::vector<MetricsRow> metrics;
    EvalReport final_report;
};

/// Runs config.steps updates from `init`; the frozen encoder is a copy of
/// init.params. Evaluates at step 0 and every eval_every steps. With an output
/// directory, writes metrics.csv and checkpoint.json there (checkpoint updated
/// at every evaluation). `corpus`, when given, replaces sampling from `source`
/// as the batch supply.
RunResult train_run(const TrainConfig& config, const MarkovSource& source, const Checkpoint& init,
                    const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                    const std::vector<TokenSeq>* corpus = nullptr);

Checkpoint fresh_checkpoint(const ModelDims& dims, std::uint64_t seed);

}  // namespace driftlm
