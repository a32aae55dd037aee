#include <doctest.h>

#include <cmath>
#include <fstream>

#include "driftlm/backbone.hpp"
#include "driftlm/checkpoint.hpp"
#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"
#include "test_support.hpp"

using namespace driftlm;
using namespace testsupport;

namespace {

const ModelDims tiny{6, 4, 3, 5};

DenoiserParams noisy_params(const ModelDims& dims, Rng& rng, double std = 0.5) {
    return DenoiserParams::init(dims, rng, std);
}

double sum_logits(const DenoiserParams& p, const TokenSeq& x) {
    const Tensor logits = denoise_forward(p, x).logits;
    double s = 0.0;
    for (double v : logits.values()) s += v;
    return s;
}

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("masked corruption near t=1 masks everything") {
    const ModelDims dims;
    Rng rng(1);
    const TokenSeq clean = random_tokens(rng, 16, 31);
    const CorruptionRecord r = corrupt(clean, 1.0 - 1e-12, CorruptionKind::Masked, dims, rng);
    for (Token t : r.corrupted.tokens) CHECK(t == dims.mask_index());
    CHECK(r.predicted.size() == 16);
}

TEST_CASE("masked corruption near t=0 is the identity") {
    const ModelDims dims;
    Rng rng(2);
    const TokenSeq clean = random_tokens(rng, 16, 31);
    const CorruptionRecord r = corrupt(clean, 1e-12, CorruptionKind::Masked, dims, rng);
    CHECK(r.corrupted == clean);
    CHECK(r.predicted.empty());
}

TEST_CASE("masked count at t=0.5 is binomial around L/2") {
    const ModelDims dims;
    Rng rng(3);
    const TokenSeq clean = random_tokens(rng, 16, 31);
    double sum = 0.0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) sum += static_cast<double>(corrupt(clean, 0.5, CorruptionKind::Masked, dims, rng).predicted.size());
    const double sigma_mean = std::sqrt(16 * 0.25 / trials);
    CHECK(std::fabs(sum / trials - 8.0) < 3.0 * sigma_mean);
}

TEST_CASE("corruption level must lie in (0, 1)") {
    const ModelDims dims;
    Rng rng(4);
    const TokenSeq clean = random_tokens(rng, 16, 31);
    for (double t : {0.0, 1.0, -0.2, 1.5}) {
        CHECK_THROWS_AS(corrupt(clean, t, CorruptionKind::Masked, dims, rng), InvalidInput);
        CHECK_THROWS_AS(corrupt(clean, t, CorruptionKind::Uniform, dims, rng), InvalidInput);
    }
    TokenSeq masked = clean;
    masked[3] = dims.mask_index();
    CHECK_THROWS_AS(corrupt(masked, 0.5, CorruptionKind::Masked, dims, rng), InvalidInput);
}

TEST_CASE("masked corruption never alters unmasked positions and M is the masked set") {
    const ModelDims dims;
    Rng rng(5);
    for (int i = 0; i < 500; ++i) {
        const TokenSeq clean = random_tokens(rng, 16, 31);
        const CorruptionRecord r = corrupt(clean, uniform_in(rng, 0.05, 0.95), CorruptionKind::Masked, dims, rng);
        std::vector<int> masked;
        for (std::size_t t = 0; t < 16; ++t) {
            if (r.corrupted[t] == dims.mask_index()) {
                masked.push_back(static_cast<int>(t));
            } else {
                CHECK(r.corrupted[t] == clean[t]);
            }
        }
        CHECK(r.predicted == masked);
    }
}

TEST_CASE("uniform corruption predicts every position and resamples uniformly") {
    const ModelDims dims;
    Rng rng(6);
    TokenSeq clean;
    clean.tokens.assign(16, 0);
    std::vector<double> counts(31, 0.0);
    std::size_t n = 0;
    // With t close to 1 nearly every position is resampled; count only those.
    while (n < 100000) {
        const CorruptionRecord r = corrupt(clean, 0.999999, CorruptionKind::Uniform, dims, rng);
        CHECK(r.predicted.size() == 16);
        for (Token t : r.corrupted.tokens) {
            REQUIRE(t >= 0);
            REQUIRE(t < 31);
            counts[static_cast<std::size_t>(t)] += 1.0;
            ++n;
        }
    }
    const double expected = static_cast<double>(n) / 31.0;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // Upper 0.001 quantile of chi-square with 30 degrees of freedom.
    CHECK(chi2 < 59.70);
}

TEST_CASE("zero parameters except out_proj give zero logits") {
    const ModelDims dims;
    Rng rng(7);
    DenoiserParams p = DenoiserParams::zeros(dims);
    p.out_proj = randn(p.out_proj.shape(), rng);
    const Tensor logits = denoise_forward(p, random_tokens(rng, 16, 32)).logits;
    CHECK(max_abs(logits) == 0.0);
    const Tensor probs = softmax_rows(logits);
    for (double v : probs.values()) CHECK(v == doctest::Approx(1.0 / 32));
}

TEST_CASE("permuting positions with tied position rows permutes hidden states") {
    const ModelDims dims;
    Rng rng(8);
    DenoiserParams p = noisy_params(dims, rng, 0.3);
    for (std::size_t t = 1; t < 16; ++t) {
        for (std::size_t c = 0; c < 32; ++c) p.pos_embed(t, c) = p.pos_embed(0, c);
    }
    const TokenSeq x = random_tokens(rng, 16, 32);
    std::vector<std::size_t> perm(16);
    for (std::size_t i = 0; i < 16; ++i) perm[i] = (i * 5 + 3) % 16;
    TokenSeq y = x;
    for (std::size_t i = 0; i < 16; ++i) y[i] = x[perm[i]];
    const auto ox = denoise_forward(p, x), oy = denoise_forward(p, y);
    for (std::size_t i = 0; i < 16; ++i) {
        for (std::size_t c = 0; c < 32; ++c) {
            CHECK(oy.hidden2()(i, c) == doctest::Approx(ox.hidden2()(perm[i], c)).epsilon(1e-12));
            CHECK(oy.hidden1()(i, c) == doctest::Approx(ox.hidden1()(perm[i], c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("forward matches a hand-written reference on tiny dimensions") {
    Rng rng(9);
    const DenoiserParams p = noisy_params(tiny, rng);
    const TokenSeq x{{0, 5, 2, 2}};
    const std::size_t L = 4, d = 3, dh = 5, V = 6;
    std::vector<std::vector<double>> h(L, std::vector<double>(d));
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t c = 0; c < d; ++c) h[t][c] = p.embed(static_cast<std::size_t>(x[t]), c) + p.pos_embed(t, c);
    }
    for (const BlockParams& b : p.blocks) {
        std::vector<double> ctx(d, 0.0);
        for (std::size_t t = 0; t < L; ++t) {
            for (std::size_t c = 0; c < d; ++c) ctx[c] += h[t][c] / L;
        }
        auto next = h;
        for (std::size_t t = 0; t < L; ++t) {
            std::vector<double> a(dh);
            for (std::size_t j = 0; j < dh; ++j) {
                double z = b.b1[j];
                for (std::size_t c = 0; c < d; ++c) z += h[t][c] * b.w1(c, j) + ctx[c] * b.w1(d + c, j);
                a[j] = std::tanh(z);
            }
            for (std::size_t c = 0; c < d; ++c) {
                double z = b.b2[c];
                for (std::size_t j = 0; j < dh; ++j) z += a[j] * b.w2(j, c);
                next[t][c] += z;
            }
        }
        h = next;
    }
    const Tensor logits = denoise_forward(p, x).logits;
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t v = 0; v < V; ++v) {
            double z = 0.0;
            for (std::size_t c = 0; c < d; ++c) z += h[t][c] * p.out_proj(c, v);
            CHECK(logits(t, v) == doctest::Approx(z).epsilon(1e-13));
        }
    }
}

TEST_CASE("gradient of summed logits matches finite differences for every parameter") {
    Rng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        DenoiserParams p = noisy_params(tiny, rng);
        const TokenSeq x = random_tokens(rng, 4, 6);
        const auto out = denoise_forward(p, x);
        Tensor ones = Tensor::zeros_like(out.logits);
        for (double& v : ones.values()) v = 1.0;
        DenoiserParams g = DenoiserParams::zeros(tiny);
        denoise_backward(p, x, out, ones, g);
        auto gt = g.named_tensors();
        auto pt = p.named_tensors();
        for (std::size_t k = 0; k < pt.size(); ++k) {
            CAPTURE(pt[k].first);
            Tensor* target = pt[k].second;
            const Tensor keep = *target;
            auto f = [&](const std::vector<double>& v) {
                *target = with_values(keep, v);
                const double s = sum_logits(p, x);
                *target = keep;
                return s;
            };
            CHECK(rel_err(flat(*gt[k].second), central_diff(f, flat(keep))) <= 1e-5);
        }
    }
}

TEST_CASE("gradient check also holds at the default dimensions on sampled coordinates") {
    const ModelDims dims;
    Rng rng(11);
    DenoiserParams p = noisy_params(dims, rng, 0.1);
    const TokenSeq x = random_tokens(rng, 16, 32);
    const auto out = denoise_forward(p, x);
    const Tensor u = randn(out.logits.shape(), rng);
    DenoiserParams g = DenoiserParams::zeros(dims);
    denoise_backward(p, x, out, u, g);
    auto gt = g.named_tensors();
    auto pt = p.named_tensors();
    for (std::size_t k = 0; k < pt.size(); ++k) {
        Tensor& target = *pt[k].second;
        std::vector<double> analytic, numeric;
        for (int s = 0; s < 12; ++s) {
            const std::size_t i = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(target.size()) - 1));
            const double keep = target[i];
            target[i] = keep + 1e-5;
            const double fp = dot(u, denoise_forward(p, x).logits);
            target[i] = keep - 1e-5;
            const double fm = dot(u, denoise_forward(p, x).logits);
            target[i] = keep;
            numeric.push_back((fp - fm) / 2e-5);
            analytic.push_back((*gt[k].second)[i]);
        }
        CAPTURE(pt[k].first);
        CHECK(rel_err(analytic, numeric) <= 1e-5);
    }
}

TEST_CASE("denoise_forward is pure") {
    Rng rng(12);
    const DenoiserParams p = DenoiserParams::init(ModelDims{}, rng);
    const TokenSeq x = random_tokens(rng, 16, 32);
    CHECK(bit_identical(denoise_forward(p, x).logits, denoise_forward(p, x).logits));
    CHECK_THROWS_AS(denoise_forward(p, random_tokens(rng, 15, 32)), ContractViolation);
}

TEST_CASE("base loss on uniform logits is ln V") {
    Rng rng(13);
    const TokenSeq clean = random_tokens(rng, 16, 31);
    const LossAndGrad lg = base_loss(Tensor({16, 32}), clean, {0, 3, 9});
    CHECK(lg.loss == doctest::Approx(std::log(32.0)).epsilon(1e-14));
}

TEST_CASE("base loss with a huge margin on the true token is about zero") {
    const TokenSeq clean{{2, 0, 1}};
    Tensor logits({3, 4});
    for (std::size_t t = 0; t < 3; ++t) logits(t, static_cast<std::size_t>(clean[t])) = 1e4;
    const LossAndGrad lg = base_loss(logits, clean, {0, 1, 2});
    CHECK(lg.loss < 1e-12);
    CHECK(std::isfinite(lg.loss));
}

TEST_CASE("base loss over no positions is zero with a zero gradient") {
    Rng rng(14);
    const Tensor logits = randn({16, 32}, rng);
    const LossAndGrad lg = base_loss(logits, random_tokens(rng, 16, 31), {});
    CHECK(lg.loss == 0.0);
    CHECK(max_abs(lg.grad_logits) == 0.0);
    CHECK(lg.grad_logits.shape() == logits.shape());
}

TEST_CASE("base loss gradient matches finite differences") {
    Rng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor logits = randn({16, 32}, rng, 2.0);
        const TokenSeq clean = random_tokens(rng, 16, 31);
        std::vector<int> pos;
        for (int t = 0; t < 16; ++t) {
            if (uniform01(rng) < 0.5) pos.push_back(t);
        }
        if (pos.empty()) pos.push_back(4);
        const LossAndGrad lg = base_loss(logits, clean, pos);
        double direct = 0.0;
        for (int t : pos) {
            double m = -1e300;
            for (double v : logits.row(static_cast<std::size_t>(t))) m = std::max(m, v);
            double z = 0.0;
            for (double v : logits.row(static_cast<std::size_t>(t))) z += std::exp(v - m);
            direct += m + std::log(z) - logits(static_cast<std::size_t>(t), static_cast<std::size_t>(clean[static_cast<std::size_t>(t)]));
        }
        CHECK(lg.loss == doctest::Approx(direct / static_cast<double>(pos.size())).epsilon(1e-12));
        auto f = [&](const std::vector<double>& v) { return base_loss(with_values(logits, v), clean, pos).loss; };
        CHECK(rel_err(flat(lg.grad_logits), central_diff(f, flat(logits))) <= 1e-5);
    }
}

TEST_CASE("masked sampler with nfe = L makes L calls and leaves no mask") {
    const ModelDims dims;
    Rng rng(16);
    const DenoiserParams p = DenoiserParams::init(dims, rng);
    for (int nfe : {16, 1, 3, 4, 7}) {
        int calls = 0;
        const TokenSeq s = sample(p, CorruptionKind::Masked, nfe, rng, [&] { ++calls; });
        CHECK(calls == nfe);
        REQUIRE(s.size() == 16);
        for (Token t : s.tokens) {
            CHECK(t >= 0);
            CHECK(t < dims.mask_index());
        }
    }
}

TEST_CASE("masked sampler never emits the mask for a mask-loving model") {
    const ModelDims dims;
    Rng rng(17);
    DenoiserParams p = DenoiserParams::init(dims, rng);
    // Bias the output towards the mask column; the restriction must still exclude it.
    for (std::size_t c = 0; c < 32; ++c) p.out_proj(c, 31) = 50.0;
    p.pos_embed = randn(p.pos_embed.shape(), rng, 1.0);
    for (int nfe : {1, 2, 16}) {
        for (Token t : sample(p, CorruptionKind::Masked, nfe, rng).tokens) CHECK(t != 31);
        for (Token t : sample(p, CorruptionKind::Uniform, nfe, rng).tokens) CHECK(t != 31);
    }
}

TEST_CASE("uniform sampler makes exactly nfe calls") {
    const ModelDims dims;
    Rng rng(18);
    const DenoiserParams p = DenoiserParams::init(dims, rng);
    for (int nfe : {1, 4, 20}) {
        int calls = 0;
        const TokenSeq s = sample(p, CorruptionKind::Uniform, nfe, rng, [&] { ++calls; });
        CHECK(calls == nfe);
        for (Token t : s.tokens) CHECK(t < 31);
    }
}

TEST_CASE("sampler rejects nfe = 0 and masked nfe > L") {
    const ModelDims dims;
    Rng rng(19);
    const DenoiserParams p = DenoiserParams::init(dims, rng);
    CHECK_THROWS_AS(sample(p, CorruptionKind::Masked, 0, rng), InvalidInput);
    CHECK_THROWS_AS(sample(p, CorruptionKind::Uniform, 0, rng), InvalidInput);
    CHECK_THROWS_AS(sample(p, CorruptionKind::Masked, 17, rng), InvalidInput);
}

TEST_CASE("sampler is deterministic given the seed") {
    Rng init(20);
    const DenoiserParams p = DenoiserParams::init(ModelDims{}, init);
    Rng a(5), b(5);
    CHECK(sample(p, CorruptionKind::Masked, 4, a) == sample(p, CorruptionKind::Masked, 4, b));
    CHECK(sample(p, CorruptionKind::Uniform, 4, a) == sample(p, CorruptionKind::Uniform, 4, b));
}

TEST_CASE("corruption kind names round trip") {
    for (CorruptionKind k : {CorruptionKind::Masked, CorruptionKind::Uniform}) CHECK(parse_corruption_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_corruption_kind("gaussian"), InvalidInput);
}

TEST_CASE("parameter validation") {
    Rng rng(21);
    DenoiserParams p = DenoiserParams::init(ModelDims{}, rng);
    CHECK_NOTHROW(p.validate());
    DenoiserParams bad = p;
    bad.blocks[1].b1 = Tensor({3});
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    bad = p;
    bad.embed.values()[0] = std::nan("");
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    const std::size_t d = 32, dh = 64;
    CHECK(p.parameter_count() == 32 * d + 16 * d + 2 * (2 * d * dh + dh + dh * d + d) + d * 32);
}

TEST_CASE("checkpoints round trip losslessly") {
    const auto dir = temp_dir("checkpoint");
    Rng rng(22);
    Checkpoint c;
    c.params = DenoiserParams::init(ModelDims{}, rng);
    c.params.embed.values()[0] = 0.1 + 0.2;
    c.params.embed.values()[1] = -0.0;
    c.params.embed.values()[2] = 1e-300;
    c.moments = AdamMoments{DenoiserParams::init(ModelDims{}, rng), DenoiserParams::zeros(ModelDims{})};
    c.step = 1234;
    save_checkpoint(dir / "c.json", c);
    const Checkpoint back = load_checkpoint(dir / "c.json");
    CHECK(bit_identical(back.params, c.params));
    REQUIRE(back.moments.has_value());
    CHECK(bit_identical(back.moments->first, c.moments->first));
    CHECK(back.step == 1234);

    c.moments.reset();
    save_checkpoint(dir / "d.json", c);
    CHECK_FALSE(load_checkpoint(dir / "d.json").moments.has_value());
}

TEST_CASE("malformed checkpoints are reported") {
    const auto dir = temp_dir("checkpoint_bad");
    Rng rng(23);
    Checkpoint c;
    c.params = DenoiserParams::init(ModelDims{}, rng);
    save_checkpoint(dir / "c.json", c);
    const std::string text = read_file(dir / "c.json");
    std::ofstream(dir / "trunc.json") << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.json"), ParseError);
    std::string v2 = text;
    const auto at = v2.find("\"version\":1");
    REQUIRE(at != std::string::npos);
    v2.replace(at, 11, "\"version\":2");
    std::ofstream(dir / "v2.json") << v2;
    CHECK_THROWS_AS(load_checkpoint(dir / "v2.json"), VersionMismatch);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.json"), IoError);
}

}
