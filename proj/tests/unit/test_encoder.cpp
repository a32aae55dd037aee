#include <doctest.h>

#include <cmath>

#include "driftlm/encoder.hpp"
#include "driftlm/errors.hpp"
#include "driftlm/objectives.hpp"
#include "driftlm/ops.hpp"
#include "test_support.hpp"

using namespace driftlm;
using namespace testsupport;

namespace {

FrozenEncoder random_encoder(Rng& rng, double std = 0.3, const ModelDims& dims = ModelDims{}) {
    return FrozenEncoder(DenoiserParams::init(dims, rng, std));
}

CorruptionRecord masked_record(Rng& rng, const ModelDims& dims, double t = 0.5) {
    return corrupt(random_tokens(rng, static_cast<std::size_t>(dims.seq_len), dims.clean_vocab()), t,
                   CorruptionKind::Masked, dims, rng);
}

Tensor random_probs(Rng& rng, std::size_t rows, std::size_t cols) { return softmax_rows(randn({rows, cols}, rng, 2.0)); }

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("one-hot probs lift to the embedding row") {
    Rng rng(1);
    const ModelDims dims;
    const Tensor embed = randn({32, 32}, rng);
    const CorruptionRecord r = corrupt(random_tokens(rng, 16, 31), 1.0 - 1e-12, CorruptionKind::Masked, dims, rng);
    Tensor probs({16, 32});
    for (std::size_t t = 0; t < 16; ++t) probs(t, (t * 7) % 32) = 1.0;
    const Tensor soft = soft_token_lift(probs, r, embed);
    const Tensor hard = hard_st_lift(probs, r, embed);
    for (std::size_t t = 0; t < 16; ++t) {
        for (std::size_t c = 0; c < 32; ++c) CHECK(soft(t, c) == embed((t * 7) % 32, c));
    }
    CHECK(bit_identical(soft, hard));
}

TEST_CASE("uniform probs lift to the column mean of the embedding") {
    Rng rng(2);
    const ModelDims dims;
    const Tensor embed = randn({32, 32}, rng);
    const CorruptionRecord r = corrupt(random_tokens(rng, 16, 31), 1.0 - 1e-12, CorruptionKind::Uniform, dims, rng);
    Tensor probs({16, 32});
    for (double& v : probs.values()) v = 1.0 / 32.0;
    const Tensor lifted = soft_token_lift(probs, r, embed);
    for (std::size_t c = 0; c < 32; ++c) {
        double m = 0.0;
        for (std::size_t v = 0; v < 32; ++v) m += embed(v, c);
        m /= 32.0;
        for (std::size_t t = 0; t < 16; ++t) CHECK(lifted(t, c) == doctest::Approx(m).epsilon(1e-13));
    }
}

TEST_CASE("non-predicted positions ignore probs and receive zero cotangent") {
    Rng rng(3);
    const ModelDims dims;
    const Tensor embed = randn({32, 32}, rng);
    const CorruptionRecord r = masked_record(rng, dims);
    const auto mask = r.predicted_mask();
    const Tensor p1 = random_probs(rng, 16, 32), p2 = random_probs(rng, 16, 32);
    const Tensor a = soft_token_lift(p1, r, embed), b = soft_token_lift(p2, r, embed);
    const Tensor g = lift_vjp(r, embed, randn({16, 32}, rng));
    for (std::size_t t = 0; t < 16; ++t) {
        if (mask[t]) continue;
        for (std::size_t c = 0; c < 32; ++c) {
            CHECK(a(t, c) == embed(static_cast<std::size_t>(r.corrupted[t]), c));
            CHECK(a(t, c) == b(t, c));
            CHECK(g(t, c) == 0.0);
        }
    }
}

TEST_CASE("lift vjp matches finite differences in probs") {
    Rng rng(4);
    const ModelDims dims;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor embed = randn({32, 32}, rng);
        const CorruptionRecord r = masked_record(rng, dims);
        const Tensor probs = random_probs(rng, 16, 32);
        const Tensor u = randn({16, 32}, rng);
        auto f = [&](const std::vector<double>& v) { return dot(u, soft_token_lift(with_values(probs, v), r, embed)); };
        CHECK(rel_err(flat(lift_vjp(r, embed, u)), central_diff(f, flat(probs))) <= 1e-6);
    }
}

TEST_CASE("hard lift breaks ties to the lowest index") {
    Rng rng(5);
    const ModelDims dims;
    const Tensor embed = randn({32, 32}, rng);
    const CorruptionRecord r = corrupt(random_tokens(rng, 16, 31), 1.0 - 1e-12, CorruptionKind::Masked, dims, rng);
    Tensor probs({16, 32});
    for (double& v : probs.values()) v = 1.0 / 32.0;
    const Tensor hard = hard_st_lift(probs, r, embed);
    for (std::size_t t = 0; t < 16; ++t) {
        for (std::size_t c = 0; c < 32; ++c) CHECK(hard(t, c) == embed(0, c));
    }
}

TEST_CASE("hard lift forward is piecewise constant in probs") {
    Rng rng(6);
    const ModelDims dims;
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor embed = randn({32, 32}, rng);
        const CorruptionRecord r = masked_record(rng, dims, 0.7);
        Tensor probs = random_probs(rng, 16, 32);
        const Tensor before = hard_st_lift(probs, r, embed);
        Tensor perturbed = probs;
        for (std::size_t t = 0; t < 16; ++t) {
            std::size_t best = 0;
            for (std::size_t v = 1; v < 32; ++v) {
                if (probs(t, v) > probs(t, best)) best = v;
            }
            for (std::size_t v = 0; v < 32; ++v) {
                if (v != best) perturbed(t, v) *= 0.5 + 0.5 * uniform01(rng);
            }
        }
        CHECK(bit_identical(before, hard_st_lift(perturbed, r, embed)));
    }
}

TEST_CASE("encode is pure and unit norm") {
    Rng rng(7);
    const FrozenEncoder enc = random_encoder(rng);
    for (int i = 0; i < 50; ++i) {
        const Tensor e = randn({16, 32}, rng);
        const FeatureVec a = encode(enc, e), b = encode(enc, e);
        CHECK(bit_identical(a.values, b.values));
        CHECK(a.dim() == 64);
        CHECK(std::fabs(l2_norm(a.values) - 1.0) <= 1e-9);
    }
}

TEST_CASE("encode matches a direct pooled reference") {
    Rng rng(8);
    const FrozenEncoder enc = random_encoder(rng);
    const Tensor e = randn({16, 32}, rng);
    const StackTrace st = run_blocks(enc.params(), add(e, enc.params().pos_embed));
    std::vector<double> pooled(64, 0.0);
    for (std::size_t t = 0; t < 16; ++t) {
        for (std::size_t c = 0; c < 32; ++c) {
            pooled[c] += st.hidden1(t, c) / 16.0;
            pooled[32 + c] += st.hidden2(t, c) / 16.0;
        }
    }
    const double n = norm_of(pooled);
    const FeatureVec h = encode(enc, e);
    for (std::size_t i = 0; i < 64; ++i) CHECK(h.values[i] == doctest::Approx(pooled[i] / n).epsilon(1e-12));
}

TEST_CASE("degenerate pooled features are an error") {
    const FrozenEncoder enc(DenoiserParams::zeros(ModelDims{}));
    CHECK_THROWS_AS(encode(enc, Tensor({16, 32})), DegenerateFeature);
}

TEST_CASE("encode vjp matches finite differences in the embeddings") {
    Rng rng(9);
    const FrozenEncoder enc = random_encoder(rng);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor e = randn({16, 32}, rng);
        const Tensor c = randn({64}, rng);
        const Encoded out = encode_traced(enc, e);
        auto f = [&](const std::vector<double>& v) { return dot(c, encode(enc, with_values(e, v)).values); };
        CHECK(rel_err(flat(encode_vjp(enc, out.trace, c)), central_diff(f, flat(e))) <= 1e-5);
    }
}

TEST_CASE("real feature equals encoding the one-hot lift") {
    Rng rng(10);
    const FrozenEncoder enc = random_encoder(rng);
    const ModelDims dims;
    for (int i = 0; i < 20; ++i) {
        const TokenSeq x = random_tokens(rng, 16, 31);
        Tensor onehot({16, 32});
        for (std::size_t t = 0; t < 16; ++t) onehot(t, static_cast<std::size_t>(x[t])) = 1.0;
        CorruptionRecord all;
        all.corrupted = x;
        for (int t = 0; t < 16; ++t) all.predicted.push_back(t);
        const FeatureVec lifted = encode(enc, soft_token_lift(onehot, all, enc.embed()));
        CHECK(bit_identical(real_feature(enc, x).values, lifted.values));
        CHECK(bit_identical(real_feature(enc, x).values, encode(enc, embedding_lookup(enc.embed(), x)).values));
    }
}

TEST_CASE("distinct sequences give distinct real features") {
    Rng rng(11);
    const FrozenEncoder enc(DenoiserParams::init(ModelDims{}, rng));
    for (int i = 0; i < 100; ++i) {
        const TokenSeq a = random_tokens(rng, 16, 31);
        TokenSeq b = random_tokens(rng, 16, 31);
        if (a == b) b[0] = (b[0] + 1) % 31;
        Tensor d = real_feature(enc, a).values;
        axpy(d, -1.0, real_feature(enc, b).values);
        CHECK(l2_norm(d) > 1e-6);
    }
}

TEST_CASE("composed logit pullback matches finite differences and vanishes off the predicted set") {
    Rng rng(12);
    const ModelDims dims;
    const FrozenEncoder enc = random_encoder(rng, 0.2);
    for (int trial = 0; trial < 10; ++trial) {
        const CorruptionRecord r = masked_record(rng, dims);
        if (r.predicted.empty()) continue;
        const Tensor logits = randn({16, 32}, rng);
        const Tensor c = randn({64}, rng);
        const LiftGraph g = lift_and_encode(enc, logits, r, LiftKind::Soft);
        const Tensor pulled = pullback_to_logits(enc, g, c);
        auto f = [&](const std::vector<double>& v) {
            return dot(c, lift_and_encode(enc, with_values(logits, v), r, LiftKind::Soft).feature.values);
        };
        CHECK(rel_err(flat(pulled), central_diff(f, flat(logits))) <= 1e-5);
        const auto mask = r.predicted_mask();
        for (std::size_t t = 0; t < 16; ++t) {
            if (mask[t]) continue;
            for (double v : pulled.row(t)) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("hard lift shares the soft lift backward") {
    Rng rng(13);
    const ModelDims dims;
    const FrozenEncoder enc = random_encoder(rng, 0.2);
    const CorruptionRecord r = masked_record(rng, dims, 0.8);
    const Tensor logits = randn({16, 32}, rng);
    const Tensor u = randn({16, 32}, rng);
    CHECK(bit_identical(lift_vjp(r, enc.embed(), u), lift_vjp(r, enc.embed(), u)));
    const LiftGraph hard = lift_and_encode(enc, logits, r, LiftKind::HardST);
    const LiftGraph soft = lift_and_encode(enc, logits, r, LiftKind::Soft);
    CHECK(bit_identical(hard.probs, soft.probs));
    CHECK_FALSE(bit_identical(hard.lifted, soft.lifted));
}

TEST_CASE("the frozen encoder holds an independent copy") {
    Rng rng(14);
    DenoiserParams p = DenoiserParams::init(ModelDims{}, rng);
    const FrozenEncoder enc(p);
    const DenoiserParams snapshot = enc.params();
    p.embed.values()[0] += 1.0;
    p.blocks[0].w1.values()[3] -= 2.0;
    CHECK(bit_identical(enc.params(), snapshot));
}

}
