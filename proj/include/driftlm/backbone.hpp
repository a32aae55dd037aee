#pragma once

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "driftlm/corpus.hpp"
#include "driftlm/random.hpp"
#include "driftlm/tensor.hpp"

namespace driftlm {

enum class CorruptionKind { Masked, Uniform };

std::string to_string(CorruptionKind kind);
CorruptionKind parse_corruption_kind(const std::string& text);

/// Model vocabulary includes one reserved mask index (the last one) for both
/// corruption kinds, so checkpoints are interchangeable between them.
struct ModelDims {
    int vocab = 32;
    int seq_len = 16;
    int d_model = 32;
    int d_hidden = 64;

    Token mask_index() const noexcept { return vocab - 1; }
    int clean_vocab() const noexcept { return vocab - 1; }
    int feature_dim() const noexcept { return 2 * d_model; }

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct CorruptionRecord {
    TokenSeq corrupted;
    double level = 0.0;
    std::vector<int> predicted;  // ascending positions

    std::vector<bool> predicted_mask() const;
};

struct BlockParams {
    Tensor w1;  // [2d x d_hidden]
    Tensor b1;  // [d_hidden]
    Tensor w2;  // [d_hidden x d]
    Tensor b2;  // [d]
};

struct DenoiserParams {
    ModelDims dims;
    Tensor embed;      // [vocab x d]
    Tensor pos_embed;  // [seq_len x d]
    std::array<BlockParams, 2> blocks;
    Tensor out_proj;   // [d x vocab]

    static DenoiserParams zeros(const ModelDims& dims);
    // embed/pos_embed/weights ~ N(0, std^2); biases zero.
    static DenoiserParams init(const ModelDims& dims, Rng& rng, double std = 0.02);

    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

    // Throws ContractViolation on shape mismatch, InvalidInput on non-finite values.
    void validate() const;
    std::size_t parameter_count() const;
};

bool bit_identical(const DenoiserParams& a, const DenoiserParams& b);

CorruptionRecord corrupt(const TokenSeq& clean, double t, CorruptionKind kind, const ModelDims& dims, Rng& rng);

struct BlockTrace {
    Tensor input;   // block input h^{b-1}
    Tensor joined;  // [h^{b-1} ; mean-pool context], [L x 2d]
    Tensor act;     // tanh(joined W1 + b1)
};

struct StackTrace {
    std::array<BlockTrace, 2> blocks;
    Tensor hidden1;
    Tensor hidden2;
};

// Runs both residual blocks on h0 = (token or soft embeddings) + pos_embed.
StackTrace run_blocks(const DenoiserParams& params, const Tensor& h0);

// Reverse pass through the blocks given cotangents of hidden1 and hidden2.
// Returns the cotangent of h0 and, when `grads` is non-null, accumulates block
// parameter cotangents into it.
Tensor backprop_blocks(const DenoiserParams& params, const StackTrace& trace, const Tensor& d_hidden1,
                       const Tensor& d_hidden2, DenoiserParams* grads);

struct DenoiserOutput {
    StackTrace trace;
    Tensor logits;  // [L x vocab]

    const Tensor& hidden1() const noexcept { return trace.hidden1; }
    const Tensor& hidden2() const noexcept { return trace.hidden2; }
};

DenoiserOutput denoise_forward(const DenoiserParams& params, const TokenSeq& corrupted);

// Accumulates parameter cotangents of <d_logits, logits(params)> into `grads`.
void denoise_backward(const DenoiserParams& params, const TokenSeq& corrupted, const DenoiserOutput& out,
                      const Tensor& d_logits, DenoiserParams& grads);

struct LossAndGrad {
    double loss = 0.0;
    Tensor grad_logits;
};

// Mean cross-entropy over `positions`; empty positions give loss 0 and zero grad.
LossAndGrad base_loss(const Tensor& logits, const TokenSeq& clean, const std::vector<int>& positions);

using ForwardHook = std::function<void()>;

/// Fixed-NFE ancestral sampler. `on_forward` fires once per denoiser call.
TokenSeq sample(const DenoiserParams& params, CorruptionKind kind, int nfe, Rng& rng,
                const ForwardHook& on_forward = {});

}  // namespace driftlm
