#include "driftlm/checks.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <sstream>

#include "driftlm/ablation.hpp"
#include "driftlm/backbone.hpp"
#include "driftlm/corpus.hpp"
#include "driftlm/drift.hpp"
#include "driftlm/encoder.hpp"
#include "driftlm/errors.hpp"
#include "driftlm/eval.hpp"
#include "driftlm/gradcheck.hpp"
#include "driftlm/objectives.hpp"
#include "driftlm/ops.hpp"
#include "driftlm/trainer.hpp"

namespace driftlm {

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;
};

Outcome fail(const std::string& why) { return {false, why}; }

std::string num(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (double& v : t.values()) v = scale * standard_normal(rng);
    return t;
}

FeatureVec random_feature(Rng& rng, std::size_t dim) { return {l2_normalize(random_tensor({dim}, rng))}; }

std::vector<FeatureVec> random_features(Rng& rng, std::size_t n, std::size_t dim) {
    std::vector<FeatureVec> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(random_feature(rng, dim));
    return out;
}

TokenSeq random_clean(Rng& rng, const ModelDims& dims) {
    TokenSeq s;
    for (int i = 0; i < dims.seq_len; ++i) s.tokens.push_back(uniform_int(rng, 0, dims.clean_vocab() - 1));
    return s;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.values()) m = std::max(m, std::fabs(v));
    return m;
}

// FD over a random subset of coordinates of x; returns the relative error on that subset.
double subset_fd_error(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                       std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(count, idx.size()));
    Tensor a({idx.size()}), n({idx.size()});
    const double h = 1e-5;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        Tensor xp = x, xm = x;
        xp[idx[k]] += h;
        xm[idx[k]] -= h;
        n[k] = (f(xp) - f(xm)) / (2 * h);
        a[k] = analytic[idx[k]];
    }
    return relative_error(a, n);
}

// Inputs for each primitive on small random shapes.
std::vector<Tensor> primitive_inputs(PrimitiveId id, Rng& rng) {
    switch (id) {
        case PrimitiveId::SoftmaxRows: return {random_tensor({3, 4}, rng)};
        case PrimitiveId::Matmul: return {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
        case PrimitiveId::Add: return {random_tensor({3, 4}, rng), random_tensor({4}, rng)};
        case PrimitiveId::Tanh: return {random_tensor({3, 4}, rng)};
        case PrimitiveId::MeanPool: return {random_tensor({4, 3}, rng)};
        case PrimitiveId::Concat: return {random_tensor({3, 2}, rng), random_tensor({3, 3}, rng)};
        case PrimitiveId::L2Normalize: return {random_tensor({5}, rng)};
        case PrimitiveId::ScalarScale: return {random_tensor({3, 2}, rng), random_tensor({1}, rng)};
        case PrimitiveId::BroadcastRows: return {random_tensor({3}, rng), Tensor::vector({4.0})};
    }
    return {};
}

// ---- numcore ----

Outcome primitive_vjps(Rng& rng) {
    double worst = 0.0;
    for (PrimitiveId id : all_primitives) {
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<Tensor> in = primitive_inputs(id, rng);
            const Tensor up = random_tensor(driftlm::apply(id, in).shape(), rng);
            const auto cots = driftlm::vjp(id, in, up);
            const std::size_t differentiable = id == PrimitiveId::BroadcastRows ? 1 : in.size();
            for (std::size_t k = 0; k < differentiable; ++k) {
                auto f = [&](const Tensor& x) {
                    std::vector<Tensor> args = in;
                    args[k] = x;
                    return dot(up, driftlm::apply(id, args));
                };
                const double err = relative_error(cots[k], finite_diff_grad(f, in[k]));
                worst = std::max(worst, err);
                if (err > 1e-5) {
                    return fail(std::string(primitive_name(id)) + " input " + std::to_string(k) + " rel err " + num(err));
                }
            }
        }
    }
    return {true, "worst rel err " + num(worst)};
}

Outcome softmax_properties(Rng& rng) {
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor x = random_tensor({4, 7}, rng, 5.0);
        const Tensor p = softmax_rows(x);
        Tensor shifted = x;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const double c = 50.0 * standard_normal(rng);
            for (double& v : shifted.row(r)) v += c;
        }
        const Tensor q = softmax_rows(shifted);
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double s = 0.0;
            for (double v : p.row(r)) {
                if (v < 0.0) return fail("negative probability");
                s += v;
            }
            if (std::fabs(s - 1.0) > 1e-12) return fail("row sum off by " + num(s - 1.0));
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (std::fabs(p[i] - q[i]) > 1e-12) return fail("shift changed a probability by " + num(p[i] - q[i]));
        }
    }
    return {};
}

Outcome primitive_purity(Rng& rng) {
    for (PrimitiveId id : all_primitives) {
        const auto in = primitive_inputs(id, rng);
        if (!bit_identical(driftlm::apply(id, in), driftlm::apply(id, in))) return fail(std::string(primitive_name(id)) + " not pure");
    }
    return {};
}

// ---- corpus ----

Outcome length_one_log_prob(Rng& rng) {
    const MarkovSource src = make_banded_source(31, {0.4, 0.3, 0.2, 0.1}, 0);
    for (int v = 0; v < src.vocab_size; ++v) {
        if (oracle_log_prob(src, TokenSeq{{v}}) != std::log(src.initial[static_cast<std::size_t>(v)])) {
            return fail("token " + std::to_string(v));
        }
    }
    (void)rng;
    return {};
}

Outcome gen_ppl_permutation(Rng& rng) {
    const MarkovSource src = make_banded_source();
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 64; ++i) {
        seqs.push_back(i % 2 ? sample_sequence(src, 16, rng) : random_clean(rng, ModelDims{}));
    }
    const double a = oracle_gen_ppl(src, seqs);
    std::shuffle(seqs.begin(), seqs.end(), rng);
    const double b = oracle_gen_ppl(src, seqs);
    if (std::fabs(a - b) > 1e-12 * a) return fail(num(a) + " vs " + num(b));
    return {};
}

Outcome nll_matches_entropy_rate(Rng& rng) {
    const MarkovSource src = make_banded_source();
    // Score only transitions, whose per-step NLL has mean equal to the entropy rate.
    std::vector<double> nll;
    for (int i = 0; i < 1500; ++i) {
        const TokenSeq s = sample_sequence(src, 16, rng);
        for (std::size_t t = 1; t < s.size(); ++t) nll.push_back(-std::log(src.transition_prob(s[t - 1], s[t])));
    }
    auto [mean, sd] = mean_sd(nll);
    const double se = sd / std::sqrt(static_cast<double>(nll.size()));
    const double h = entropy_rate(src);
    if (std::fabs(mean - h) > 3 * se) return fail("mean " + num(mean) + " vs rate " + num(h) + " (se " + num(se) + ")");
    return {true, "mean " + num(mean) + ", rate " + num(h)};
}

// ---- backbone ----

Outcome masked_corruption_contract(Rng& rng) {
    const ModelDims dims;
    for (int trial = 0; trial < 500; ++trial) {
        const TokenSeq x = random_clean(rng, dims);
        const CorruptionRecord r = corrupt(x, uniform_in(rng, 0.01, 0.99), CorruptionKind::Masked, dims, rng);
        std::vector<int> masked;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (r.corrupted[i] == dims.mask_index()) {
                masked.push_back(static_cast<int>(i));
            } else if (r.corrupted[i] != x[i]) {
                return fail("unmasked position altered");
            }
        }
        if (masked != r.predicted) return fail("predicted set differs from the masked positions");
    }
    return {};
}

Outcome uniform_corruption_marginal(Rng& rng) {
    const ModelDims dims;
    const int k = dims.clean_vocab();
    std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
    const TokenSeq x{std::vector<Token>(static_cast<std::size_t>(dims.seq_len), 0)};
    long draws = 0;
    while (draws < 100000) {
        // Replay the generator to learn which positions were resampled; only those are counted.
        Rng probe = rng;
        const CorruptionRecord r = corrupt(x, 0.5, CorruptionKind::Uniform, dims, rng);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const bool hit = uniform01(probe) < 0.5;
            if (hit) {
                (void)uniform_int(probe, 0, k - 1);
                counts[static_cast<std::size_t>(r.corrupted[i])] += 1.0;
                ++draws;
            }
        }
    }
    const double expected = static_cast<double>(draws) / k;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 0.999 quantile of chi-square with 30 degrees of freedom
    const double critical = 59.703;
    if (chi2 > critical) return fail("chi2 " + num(chi2));
    return {true, "chi2 " + num(chi2) + " over " + std::to_string(draws) + " draws"};
}

Outcome sampler_call_count(Rng& rng) {
    const ModelDims dims;
    const DenoiserParams p = DenoiserParams::init(dims, rng);
    for (auto kind : {CorruptionKind::Masked, CorruptionKind::Uniform}) {
        for (int nfe : {1, 3, 4, 8, 16}) {
            int calls = 0;
            const TokenSeq s = sample(p, kind, nfe, rng, [&] { ++calls; });
            if (calls != nfe) return fail(to_string(kind) + " nfe " + std::to_string(nfe) + " made " + std::to_string(calls) + " calls");
            for (Token t : s.tokens) {
                if (t < 0 || t >= dims.clean_vocab()) return fail("sample holds a non-clean token");
            }
        }
    }
    return {};
}

double sum_logits(const DenoiserParams& p, const TokenSeq& x) {
    const Tensor l = denoise_forward(p, x).logits;
    return std::accumulate(l.values().begin(), l.values().end(), 0.0);
}

Outcome denoiser_gradient(Rng& rng) {
    const ModelDims dims;
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        const DenoiserParams p = DenoiserParams::init(dims, rng, 0.3);
        const CorruptionRecord rec = corrupt(random_clean(rng, dims), 0.5, CorruptionKind::Masked, dims, rng);
        const DenoiserOutput out = denoise_forward(p, rec.corrupted);
        Tensor ones(out.logits.shape());
        for (double& v : ones.values()) v = 1.0;
        DenoiserParams g = DenoiserParams::zeros(dims);
        denoise_backward(p, rec.corrupted, out, ones, g);
        auto named = g.named_tensors();
        for (std::size_t k = 0; k < named.size(); ++k) {
            auto f = [&](const Tensor& x) {
                DenoiserParams q = p;
                *q.named_tensors()[k].second = x;
                return sum_logits(q, rec.corrupted);
            };
            const Tensor& x = *p.named_tensors()[k].second;
            const double err = subset_fd_error(f, x, *named[k].second, 12, rng);
            worst = std::max(worst, err);
            if (err > 1e-5) return fail(named[k].first + " rel err " + num(err));
        }
    }
    return {true, "worst rel err " + num(worst)};
}

Outcome base_loss_gradient(Rng& rng) {
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor logits = random_tensor({6, 5}, rng, 2.0);
        TokenSeq clean;
        for (int i = 0; i < 6; ++i) clean.tokens.push_back(uniform_int(rng, 0, 4));
        const std::vector<int> pos{0, 2, 3, 5};
        const LossAndGrad lg = base_loss(logits, clean, pos);
        auto f = [&](const Tensor& x) { return base_loss(x, clean, pos).loss; };
        const double err = relative_error(lg.grad_logits, finite_diff_grad(f, logits));
        if (err > 1e-5) return fail("rel err " + num(err));
    }
    return {};
}

// ---- encoder ----

struct LiftInstance {
    FrozenEncoder encoder;
    CorruptionRecord record;
    Tensor logits;
};

LiftInstance random_lift_instance(Rng& rng, double param_std = 0.3, CorruptionKind kind = CorruptionKind::Masked) {
    const ModelDims dims;
    Rng local(rng());
    FrozenEncoder enc(DenoiserParams::init(dims, local, param_std));
    CorruptionRecord rec;
    do {
        rec = corrupt(random_clean(rng, dims), uniform_in(rng, 0.2, 0.8), kind, dims, rng);
    } while (rec.predicted.empty());
    return {std::move(enc), std::move(rec), random_tensor({16, 32}, rng, 1.0)};
}

Outcome feature_norm(Rng& rng) {
    for (int trial = 0; trial < 100; ++trial) {
        const LiftInstance inst = random_lift_instance(rng, 0.05);
        const FeatureVec h = encode(inst.encoder, random_tensor({16, 32}, rng));
        if (std::fabs(l2_norm(h.values) - 1.0) > 1e-9) return fail("norm " + num(l2_norm(h.values)));
    }
    return {};
}

Outcome composed_lift_gradient(Rng& rng) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const LiftInstance inst = random_lift_instance(rng);
        const Tensor c = random_tensor({64}, rng);
        const LiftGraph g = lift_and_encode(inst.encoder, inst.logits, inst.record, LiftKind::Soft);
        const Tensor grad = pullback_to_logits(inst.encoder, g, c);
        auto f = [&](const Tensor& l) {
            return dot(lift_and_encode(inst.encoder, l, inst.record, LiftKind::Soft).feature.values, c);
        };
        const double err = relative_error(grad, finite_diff_grad(f, inst.logits));
        worst = std::max(worst, err);
        if (err > 1e-5) return fail("rel err " + num(err));
        const auto mask = inst.record.predicted_mask();
        for (std::size_t r = 0; r < grad.rows(); ++r) {
            if (mask[r]) continue;
            for (double v : grad.row(r)) {
                if (v != 0.0) return fail("nonzero cotangent at a non-predicted position");
            }
        }
    }
    return {true, "worst rel err " + num(worst)};
}

Outcome real_feature_is_hard_lift(Rng& rng) {
    const ModelDims dims;
    for (int trial = 0; trial < 50; ++trial) {
        const LiftInstance inst = random_lift_instance(rng, 0.1);
        const TokenSeq x = random_clean(rng, dims);
        CorruptionRecord all{x, 0.5, {}};
        for (int i = 0; i < dims.seq_len; ++i) all.predicted.push_back(i);
        Tensor onehot({16, 32});
        for (std::size_t i = 0; i < x.size(); ++i) onehot(i, static_cast<std::size_t>(x[i])) = 1.0;
        const FeatureVec a = real_feature(inst.encoder, x);
        const FeatureVec b = encode(inst.encoder, soft_token_lift(onehot, all, inst.encoder.embed()));
        if (!bit_identical(a.values, b.values)) return fail("features differ");
    }
    return {};
}

Outcome hard_lift_piecewise_constant(Rng& rng) {
    for (int trial = 0; trial < 100; ++trial) {
        const LiftInstance inst = random_lift_instance(rng);
        const Tensor p = softmax_rows(inst.logits);
        Tensor q = p;
        for (std::size_t r = 0; r < q.rows(); ++r) {
            auto row = q.row(r);
            const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            for (std::size_t v = 0; v < row.size(); ++v) {
                if (v != best) row[v] *= 0.5;
            }
            double s = 0.0;
            for (double v : row) s += v;
            for (double& v : row) v /= s;
        }
        if (!bit_identical(hard_st_lift(p, inst.record, inst.encoder.embed()),
                           hard_st_lift(q, inst.record, inst.encoder.embed()))) {
            return fail("forward changed without an argmax change");
        }
    }
    return {};
}

// ---- drift ----

FeatureRefs refs_of(const std::vector<FeatureVec>& v) {
    FeatureRefs out;
    for (const auto& f : v) out.push_back(&f);
    return out;
}

Outcome drift_antisymmetry(Rng& rng) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto P = random_features(rng, 1 + static_cast<std::size_t>(uniform_int(rng, 0, 20)), 8);
        const auto N = random_features(rng, 1 + static_cast<std::size_t>(uniform_int(rng, 0, 20)), 8);
        const FeatureVec h = random_feature(rng, 8);
        const double tau = std::exp(uniform_in(rng, std::log(0.01), std::log(1.0)));
        const Tensor a = drift_single_temp(h, P, N, tau, 1, 1);
        const Tensor b = drift_single_temp(h, N, P, tau, 1, 1);
        Tensor s = a;
        axpy(s, 1.0, b);
        worst = std::max(worst, max_abs(s));
        if (max_abs(s) > 1e-12) return fail("asymmetry " + num(max_abs(s)));
    }
    return {true, "worst " + num(worst)};
}

Outcome drift_equilibrium(Rng& rng) {
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t b = 2 + static_cast<std::size_t>(uniform_int(rng, 0, 6));
        const auto anchors = random_features(rng, b, 16);
        auto P = random_features(rng, 5, 16);
        // Negatives seen by each anchor: pool minus itself; make positives equal that multiset.
        const ReferenceQueue empty(4);
        ReferenceQueue q_gen(64);
        q_gen.push(P);
        References refs = build_references(anchors, anchors, empty, q_gen);
        // Per anchor the negative set is (anchors \ {h_i}) + P, which differs per anchor,
        // so test single-temperature equilibrium per anchor and the aggregate with a shared set.
        for (std::size_t i = 0; i < b; ++i) {
            FeatureRefs neg = refs.negatives_for(i);
            FeatureRefs pos = neg;
            std::shuffle(pos.begin(), pos.end(), rng);
            for (double tau : {0.02, 0.05, 0.2, 1.0}) {
                const Tensor v = drift_single_temp(anchors[i], pos, neg, tau, 1, 1);
                if (max_abs(v) > 1e-12) return fail("single-temperature drift " + num(max_abs(v)));
            }
        }
        References eq;
        eq.positives = P;
        eq.negatives_pool = P;
        std::shuffle(eq.negatives_pool.begin(), eq.negatives_pool.end(), rng);
        eq.negative_owner.assign(P.size(), -1);
        for (const Tensor& v : drift_multi_temp(anchors, eq, DriftConfig{})) {
            if (max_abs(v) > 1e-12) return fail("multi-temperature drift " + num(max_abs(v)));
        }
    }
    return {};
}

Outcome joint_weights_sum(Rng& rng) {
    for (int trial = 0; trial < 100; ++trial) {
        const auto P = random_features(rng, 7, 8);
        const auto N = random_features(rng, 5, 8);
        const double tau = std::exp(uniform_in(rng, std::log(1e-3), std::log(2.0)));
        const JointWeights w = joint_affinity_weights(random_feature(rng, 8), refs_of(P), refs_of(N), tau);
        double s = 0.0;
        for (double v : w.positive) s += v;
        for (double v : w.negative) s += v;
        if (std::fabs(s - 1.0) > 1e-12) return fail("sum " + num(s));
    }
    return {};
}

Outcome rms_normalization(Rng& rng) {
    for (int trial = 0; trial < 50; ++trial) {
        const auto H = random_features(rng, 6, 16);
        const auto U = random_features(rng, 6, 16);
        ReferenceQueue qr(32), qg(32);
        qr.push(random_features(rng, 10, 16));
        qg.push(random_features(rng, 10, 16));
        const References refs = build_references(U, H, qr, qg);
        const MultiTempDrift d = drift_multi_temp_detailed(H, refs, DriftConfig{});
        for (std::size_t k = 0; k < d.raw.size(); ++k) {
            double ms = 0.0;
            for (const auto& v : d.raw[k]) ms += dot(v, v) / (d.scales[k] * d.scales[k]);
            const double rms = std::sqrt(ms / static_cast<double>(H.size()));
            if (std::fabs(rms - 1.0) > 1e-6) return fail("rms " + num(rms));
        }
    }
    return {};
}

Outcome low_temperature_concentration(Rng& rng) {
    for (int trial = 0; trial < 100; ++trial) {
        const auto P = random_features(rng, 8, 16);
        const auto N = random_features(rng, 8, 16);
        const FeatureVec h = random_feature(rng, 16);
        std::vector<double> d;
        for (const auto& f : P) d.push_back(std::pow(l2_norm(add(f.values, scale(h.values, -1.0))), 2));
        for (const auto& f : N) d.push_back(std::pow(l2_norm(add(f.values, scale(h.values, -1.0))), 2));
        std::vector<double> sorted = d;
        std::sort(sorted.begin(), sorted.end());
        if (sorted[1] - sorted[0] < 1e-3) continue;  // not separated
        const JointWeights w = joint_affinity_weights(h, refs_of(P), refs_of(N), 1e-6);
        const auto nearest = static_cast<std::size_t>(std::min_element(d.begin(), d.end()) - d.begin());
        const double wn = nearest < P.size() ? w.positive[nearest] : w.negative[nearest - P.size()];
        if (wn <= 1.0 - 1e-6) return fail("nearest weight " + num(wn));
    }
    return {};
}

Outcome queue_fifo(Rng& rng) {
    ReferenceQueue q(3);
    const auto f = random_features(rng, 5, 4);
    q.push(std::span(f).first(2));
    q.push(std::span(f).subspan(2, 2));
    if (q.size() != 3 || !(q.entries()[0] == f[1]) || !(q.entries()[2] == f[3])) return fail("eviction order");
    q.push(std::span<const FeatureVec>{});
    if (q.size() != 3) return fail("empty push changed the queue");
    ReferenceQueue big(2);
    big.push(f);
    if (!(big.entries()[0] == f[3]) || !(big.entries()[1] == f[4])) return fail("overlong push kept the wrong tail");
    return {};
}

Outcome self_exclusion(Rng& rng) {
    auto H = random_features(rng, 4, 8);
    H[2] = H[1];  // duplicate values must not cause over-exclusion
    ReferenceQueue qr(8), qg(8);
    qg.push(random_features(rng, 3, 8));
    const References refs = build_references(random_features(rng, 4, 8), H, qr, qg);
    for (std::size_t i = 0; i < H.size(); ++i) {
        const FeatureRefs neg = refs.negatives_for(i);
        if (neg.size() != H.size() - 1 + 3) return fail("anchor " + std::to_string(i) + " sees " + std::to_string(neg.size()) + " negatives");
        for (const FeatureVec* p : neg) {
            if (p == &refs.negatives_pool[i]) return fail("anchor appears in its own negatives");
        }
    }
    return {};
}

// ---- objectives ----

Outcome stop_gradient_identity(Rng& rng) {
    for (int trial = 0; trial < 100; ++trial) {
        const FeatureVec h = random_feature(rng, 64);
        const Tensor v = random_tensor({64}, rng);
        const double alpha = uniform_in(rng, 0.1, 3.0);
        const FixedPointLoss fp = feature_fixed_point_loss(h, v, alpha);
        if (!bit_identical(fp.grad_h, scale(v, -alpha))) return fail("grad_h differs from -alpha V");
    }
    return {};
}

// J^T u through the lift and encoder via the generic primitive dispatch only.
Tensor composed_pullback(const FrozenEncoder& enc, const CorruptionRecord& rec, const Tensor& logits, const Tensor& u) {
    const DenoiserParams& p = enc.params();
    const Tensor probs = driftlm::apply(PrimitiveId::SoftmaxRows, std::vector<Tensor>{logits});
    const Tensor full = driftlm::apply(PrimitiveId::Matmul, std::vector<Tensor>{probs, p.embed});
    Tensor lifted = gather_rows(p.embed, rec.corrupted.tokens);
    for (int pos : rec.predicted) {
        auto src = full.row(static_cast<std::size_t>(pos));
        std::copy(src.begin(), src.end(), lifted.row(static_cast<std::size_t>(pos)).begin());
    }
    const Tensor n_rows = Tensor::vector({static_cast<double>(lifted.rows())});
    struct Block {
        Tensor h, m, mb, j, z1, pre, act, z2, z3;
    };
    std::vector<Block> blocks;
    Tensor h = driftlm::apply(PrimitiveId::Add, std::vector<Tensor>{lifted, p.pos_embed});
    const Tensor h0 = h;
    for (const auto& bp : p.blocks) {
        Block b;
        b.h = h;
        b.m = driftlm::apply(PrimitiveId::MeanPool, std::vector<Tensor>{h});
        b.mb = driftlm::apply(PrimitiveId::BroadcastRows, std::vector<Tensor>{b.m, n_rows});
        b.j = driftlm::apply(PrimitiveId::Concat, std::vector<Tensor>{h, b.mb});
        b.z1 = driftlm::apply(PrimitiveId::Matmul, std::vector<Tensor>{b.j, bp.w1});
        b.pre = driftlm::apply(PrimitiveId::Add, std::vector<Tensor>{b.z1, bp.b1});
        b.act = driftlm::apply(PrimitiveId::Tanh, std::vector<Tensor>{b.pre});
        b.z2 = driftlm::apply(PrimitiveId::Matmul, std::vector<Tensor>{b.act, bp.w2});
        b.z3 = driftlm::apply(PrimitiveId::Add, std::vector<Tensor>{b.z2, bp.b2});
        h = driftlm::apply(PrimitiveId::Add, std::vector<Tensor>{h, b.z3});
        blocks.push_back(b);
    }
    const Tensor h1 = blocks[1].h;
    const Tensor h2 = h;
    const Tensor m1 = driftlm::apply(PrimitiveId::MeanPool, std::vector<Tensor>{h1});
    const Tensor m2 = driftlm::apply(PrimitiveId::MeanPool, std::vector<Tensor>{h2});
    const Tensor pooled = driftlm::apply(PrimitiveId::Concat, std::vector<Tensor>{m1, m2});

    const Tensor d_pooled = driftlm::vjp(PrimitiveId::L2Normalize, std::vector<Tensor>{pooled}, u)[0];
    const auto d_m = driftlm::vjp(PrimitiveId::Concat, std::vector<Tensor>{m1, m2}, d_pooled);
    Tensor d_h = driftlm::vjp(PrimitiveId::MeanPool, std::vector<Tensor>{h2}, d_m[1])[0];
    const Tensor d_h1_extra = driftlm::vjp(PrimitiveId::MeanPool, std::vector<Tensor>{h1}, d_m[0])[0];
    for (std::size_t bi = blocks.size(); bi-- > 0;) {
        const Block& b = blocks[bi];
        const BlockParams& bp = p.blocks[bi];
        const auto d_res = driftlm::vjp(PrimitiveId::Add, std::vector<Tensor>{b.h, b.z3}, d_h);
        const auto d_z3 = driftlm::vjp(PrimitiveId::Add, std::vector<Tensor>{b.z2, bp.b2}, d_res[1]);
        const auto d_z2 = driftlm::vjp(PrimitiveId::Matmul, std::vector<Tensor>{b.act, bp.w2}, d_z3[0]);
        const auto d_pre = driftlm::vjp(PrimitiveId::Tanh, std::vector<Tensor>{b.pre}, d_z2[0]);
        const auto d_z1 = driftlm::vjp(PrimitiveId::Add, std::vector<Tensor>{b.z1, bp.b1}, d_pre[0]);
        const auto d_j = driftlm::vjp(PrimitiveId::Matmul, std::vector<Tensor>{b.j, bp.w1}, d_z1[0]);
        const auto d_cat = driftlm::vjp(PrimitiveId::Concat, std::vector<Tensor>{b.h, b.mb}, d_j[0]);
        const auto d_mb = driftlm::vjp(PrimitiveId::BroadcastRows, std::vector<Tensor>{b.m, n_rows}, d_cat[1]);
        const auto d_m_in = driftlm::vjp(PrimitiveId::MeanPool, std::vector<Tensor>{b.h}, d_mb[0]);
        Tensor next = d_res[0];
        axpy(next, 1.0, d_cat[0]);
        axpy(next, 1.0, d_m_in[0]);
        if (bi == 1) axpy(next, 1.0, d_h1_extra);
        d_h = next;
    }
    const Tensor d_lifted = driftlm::vjp(PrimitiveId::Add, std::vector<Tensor>{lifted, p.pos_embed}, d_h)[0];
    Tensor d_full(full.shape());
    for (int pos : rec.predicted) {
        auto src = d_lifted.row(static_cast<std::size_t>(pos));
        std::copy(src.begin(), src.end(), d_full.row(static_cast<std::size_t>(pos)).begin());
    }
    const Tensor d_probs = driftlm::vjp(PrimitiveId::Matmul, std::vector<Tensor>{probs, p.embed}, d_full)[0];
    (void)h0;
    return driftlm::vjp(PrimitiveId::SoftmaxRows, std::vector<Tensor>{logits}, d_probs)[0];
}

Outcome logit_pullback(Rng& rng) {
    double worst = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
        const LiftInstance inst = random_lift_instance(rng);
        const LiftGraph g = lift_and_encode(inst.encoder, inst.logits, inst.record, LiftKind::Soft);
        const Tensor v = random_tensor({64}, rng);
        const double alpha = uniform_in(rng, 0.5, 2.0);
        ObjectiveKind kind;
        kind.alpha = alpha;
        const TokenSeq clean = random_clean(rng, ModelDims{});
        const ObjectiveResult res = total_objective(kind, inst.encoder, std::span(&g, 1), std::span(&v, 1), std::span(&clean, 1));
        const Tensor ref = scale(composed_pullback(inst.encoder, inst.record, inst.logits, v), -alpha);
        Tensor diff = res.grad_logits[0];
        axpy(diff, -1.0, ref);
        worst = std::max(worst, max_abs(diff));
        if (max_abs(diff) > 1e-10) return fail("max deviation " + num(max_abs(diff)));
    }
    return {true, "worst " + num(worst)};
}

double psi(const FrozenEncoder& enc, const CorruptionRecord& rec, const Tensor& logits, const Tensor& v) {
    return dot(lift_and_encode(enc, logits, rec, LiftKind::Soft).feature.values, v);
}

Outcome local_ascent(Rng& rng) {
    int checked = 0;
    double worst_ratio_err = 0.0;
    while (checked < 100) {
        const LiftInstance inst = random_lift_instance(rng);
        const Tensor v = random_tensor({64}, rng);
        const LiftGraph g = lift_and_encode(inst.encoder, inst.logits, inst.record, LiftKind::Soft);
        const Tensor dir = mirror_direction(inst.encoder, g, v);
        const double gn2 = dot(dir, dir);
        if (std::sqrt(gn2) <= 1e-6) continue;
        ++checked;
        const double base = dot(g.feature.values, v);
        for (double eta : {1e-3, 1e-2}) {
            Tensor l = inst.logits;
            axpy(l, eta, dir);
            if (!(psi(inst.encoder, inst.record, l, v) > base)) return fail("no ascent at eta " + num(eta));
        }
        Tensor l = inst.logits;
        axpy(l, 1e-4, dir);
        const double ratio = (psi(inst.encoder, inst.record, l, v) - base) / (1e-4 * gn2);
        worst_ratio_err = std::max(worst_ratio_err, std::fabs(ratio - 1.0));
        if (std::fabs(ratio - 1.0) > 0.05) return fail("first-order ratio " + num(ratio));
    }
    return {true, "worst first-order deviation " + num(worst_ratio_err)};
}

Outcome mirror_equilibrium(Rng& rng) {
    for (int trial = 0; trial < 50; ++trial) {
        const LiftInstance inst = random_lift_instance(rng);
        const LiftGraph g = lift_and_encode(inst.encoder, inst.logits, inst.record, LiftKind::Soft);
        const Tensor zero({64});
        const Tensor dir = mirror_direction(inst.encoder, g, zero);
        if (max_abs(dir) != 0.0) return fail("g nonzero at V = 0");
        const Tensor ps = mirror_teacher(inst.logits, dir, uniform_in(rng, 0.1, 10.0));
        if (!(ps == g.probs)) return fail("teacher moved at V = 0");
        const LossAndGrad kl = mirror_kl_loss(ps, inst.logits, inst.record.predicted);
        Tensor target = inst.logits;
        axpy(target, 1.0, dir);
        const LossAndGrad mse = mirror_mse_loss(target, inst.logits, inst.record.predicted);
        if (kl.loss != 0.0 || max_abs(kl.grad_logits) != 0.0) return fail("mirror-KL nonzero");
        if (mse.loss != 0.0 || max_abs(mse.grad_logits) != 0.0) return fail("mirror-MSE nonzero");
    }
    return {};
}

double variational(const std::vector<double>& q, const std::vector<double>& p, const std::vector<double>& g, double eta) {
    double lin = 0.0, kl = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        lin += g[i] * q[i];
        if (q[i] > 0.0) kl += q[i] * std::log(q[i] / p[i]);
    }
    return lin - kl / eta;
}

Outcome mirror_variational(Rng& rng) {
    for (std::size_t k : {std::size_t{2}, std::size_t{3}}) {
        const double step = k == 2 ? 1e-4 : 1e-2;
        for (int trial = 0; trial < 50; ++trial) {
            const Tensor logits = random_tensor({1, k}, rng);
            const Tensor g = random_tensor({1, k}, rng);
            const double eta = std::exp(uniform_in(rng, std::log(0.1), std::log(10.0)));
            const Tensor ps = mirror_teacher(logits, g, eta);
            const Tensor p = softmax_rows(logits);
            const std::vector<double> pv(p.values().begin(), p.values().end());
            const std::vector<double> gv(g.values().begin(), g.values().end());
            const std::vector<double> sv(ps.values().begin(), ps.values().end());
            const double at_teacher = variational(sv, pv, gv, eta);
            double best = -1e300;
            std::vector<double> best_q;
            const int n = static_cast<int>(std::lround(1.0 / step));
            for (int a = 0; a <= n; ++a) {
                if (k == 2) {
                    std::vector<double> q{a * step, 1.0 - a * step};
                    const double val = variational(q, pv, gv, eta);
                    if (val > best) best = val, best_q = q;
                } else {
                    for (int b = 0; a + b <= n; ++b) {
                        std::vector<double> q{a * step, b * step, 1.0 - (a + b) * step};
                        const double val = variational(q, pv, gv, eta);
                        if (val > best) best = val, best_q = q;
                    }
                }
            }
            if (best > at_teacher + 1e-12) return fail("grid beats the teacher by " + num(best - at_teacher));
            for (std::size_t i = 0; i < k; ++i) {
                if (std::fabs(best_q[i] - sv[i]) > step) return fail("grid maximizer is more than one cell away");
            }
        }
    }
    return {};
}

// ---- trainer ----

TrainConfig tiny_config(ObjectiveVariant variant) {
    TrainConfig c = variant == ObjectiveVariant::BaseOnly ? TrainConfig::base_defaults() : TrainConfig::drift_defaults();
    c.objective.variant = variant;
    c.batch_size = 4;
    c.micro_batch = 2;
    c.steps = 10;
    c.eval_every = 5;
    c.eval.n_samples = 8;
    c.queue_capacity = 16;
    return c;
}

std::vector<TokenSeq> clean_batch(Rng& rng, std::size_t n) {
    std::vector<TokenSeq> out;
    const MarkovSource src = make_banded_source();
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample_sequence(src, 16, rng));
    return out;
}

Outcome training_determinism(Rng& rng) {
    const Checkpoint init = fresh_checkpoint(ModelDims{}, rng());
    const TrainConfig c = tiny_config(ObjectiveVariant::FeatureL2);
    const MarkovSource src = make_banded_source();
    const RunResult a = train_run(c, src, init);
    const RunResult b = train_run(c, src, init);
    if (!bit_identical(a.final.params, b.final.params)) return fail("parameters differ after 10 steps");
    if (metrics_csv(a.metrics, c.eval.nfes) != metrics_csv(b.metrics, c.eval.nfes)) return fail("metrics differ");
    return {};
}

Outcome queue_growth(Rng& rng) {
    const Checkpoint init = fresh_checkpoint(ModelDims{}, rng());
    const TrainConfig c = tiny_config(ObjectiveVariant::FeatureL2);
    const FrozenEncoder enc(init.params);
    TrainState s = TrainState::start(init, c);
    for (std::size_t k = 1; k <= 6; ++k) {
        train_step(s, enc, clean_batch(rng, 4), c);
        const std::size_t want = std::min<std::size_t>(c.queue_capacity, k * 4);
        if (s.q_real.size() != want || s.q_gen.size() != want) return fail("after step " + std::to_string(k));
    }
    return {};
}

Outcome equilibrium_step(Rng& rng) {
    const Checkpoint init = fresh_checkpoint(ModelDims{}, rng());
    TrainConfig c = tiny_config(ObjectiveVariant::FeatureL2);
    c.batch_size = 1;
    c.micro_batch = 1;
    const FrozenEncoder enc(init.params);
    const auto batch = clean_batch(rng, 1);
    TrainState s = TrainState::start(init, c);
    const FeatureVec u = real_feature(enc, batch[0]);
    s.q_gen.push(std::span(&u, 1));
    DenoiserParams grad;
    train_step(s, enc, batch, c, &grad);
    if (global_norm(grad) != 0.0) return fail("gradient norm " + num(global_norm(grad)));
    if (!bit_identical(s.params, init.params)) return fail("parameters changed");
    return {};
}

Outcome micro_batch_averaging(Rng& rng) {
    const Checkpoint init = fresh_checkpoint(ModelDims{}, rng());
    const auto batch = clean_batch(rng, 4);
    TrainConfig one = tiny_config(ObjectiveVariant::BaseOnly);
    one.micro_batch = 4;
    TrainConfig two = one;
    two.micro_batch = 2;
    const FrozenEncoder enc(init.params);
    TrainState a = TrainState::start(init, one);
    TrainState b = TrainState::start(init, two);
    DenoiserParams ga, gb;
    train_step(a, enc, batch, one, &ga);
    train_step(b, enc, batch, two, &gb);
    double na = global_norm(ga);
    accumulate(gb, -1.0, ga);
    if (global_norm(gb) > 1e-12 * std::max(1.0, na)) return fail("accumulated gradient differs by " + num(global_norm(gb)));
    if (a.step != 1 || b.step != 1 || a.adam_t != 1 || b.adam_t != 1) return fail("more than one update per step");
    return {};
}

Outcome pre_update_push_and_frozen_encoder(Rng& rng) {
    const Checkpoint init = fresh_checkpoint(ModelDims{}, rng());
    TrainConfig c = tiny_config(ObjectiveVariant::FeatureL2);
    c.micro_batch = 4;
    const FrozenEncoder enc(init.params);
    const DenoiserParams enc_before = enc.params();
    const auto batch = clean_batch(rng, 4);
    TrainState s = TrainState::start(init, c);
    Rng replay = s.rng;
    const DenoiserParams before = s.params;
    train_step(s, enc, batch, c);
    for (std::size_t i = 0; i < 4; ++i) {
        const double t = uniform_in(replay, c.t_min, c.t_max);
        const CorruptionRecord rec = corrupt(batch[i], t, c.corruption, before.dims, replay);
        const Tensor logits = denoise_forward(before, rec.corrupted).logits;
        const LiftGraph g = lift_and_encode(enc, logits, rec, LiftKind::Soft);
        if (!(g.feature == s.q_gen.entries()[i])) return fail("queued generated feature is not the pre-update one");
    }
    if (!bit_identical(enc.params(), enc_before)) return fail("encoder bytes changed");
    return {};
}

Outcome zero_step_run(Rng& rng) {
    const Checkpoint init = fresh_checkpoint(ModelDims{}, rng());
    TrainConfig c = tiny_config(ObjectiveVariant::FeatureL2);
    c.steps = 0;
    const RunResult r = train_run(c, make_banded_source(), init);
    if (!bit_identical(r.final.params, init.params) || r.final.step != init.step) return fail("checkpoint changed");
    if (r.metrics.size() != 1) return fail("expected one metrics row");
    return {};
}

// ---- evalcli ----

Outcome eval_report_contract(Rng& rng) {
    const ModelDims dims;
    const DenoiserParams p = DenoiserParams::init(dims, rng);
    const MarkovSource src = make_banded_source();
    EvalConfig cfg;
    cfg.n_samples = 16;
    cfg.seed = 7;
    for (auto kind : {CorruptionKind::Masked, CorruptionKind::Uniform}) {
        const EvalReport a = evaluate(p, src, kind, cfg);
        const EvalReport b = evaluate(p, src, kind, cfg);
        if (!(a == b)) return fail("report differs between identical calls");
        for (const auto& r : a.per_nfe) {
            if (!std::isfinite(r.gen_ppl) || r.gen_ppl < 1.0) return fail("gen_ppl " + num(r.gen_ppl));
            if (r.entropy < 0.0 || r.entropy > std::log(src.vocab_size)) return fail("entropy " + num(r.entropy));
        }
    }
    return {};
}

Outcome entropy_examples(Rng& rng) {
    std::vector<TokenSeq> constant{TokenSeq{std::vector<Token>(16, 3)}, TokenSeq{std::vector<Token>(16, 9)}};
    if (entropy_metric(constant) != 0.0) return fail("constant sequences");
    std::vector<TokenSeq> perms;
    for (int i = 0; i < 5; ++i) {
        TokenSeq s;
        for (int t = 0; t < 16; ++t) s.tokens.push_back(t);
        std::shuffle(s.tokens.begin(), s.tokens.end(), rng);
        perms.push_back(s);
    }
    if (std::fabs(entropy_metric(perms) - std::log(16.0)) > 1e-12) return fail("permutations");
    return {};
}

Outcome single_seed_sd(Rng&) {
    if (mean_sd({3.5}).second != 0.0) return fail("single-value SD is not 0");
    return {};
}

struct Check {
    const char* module;
    const char* name;
    Outcome (*fn)(Rng&);
};

const Check kChecks[] = {
    {"numcore", "vjp matches finite differences for every primitive", primitive_vjps},
    {"numcore", "softmax rows sum to 1 and ignore row shifts", softmax_properties},
    {"numcore", "primitives are pure", primitive_purity},
    {"corpus", "length-1 log-prob equals log initial", length_one_log_prob},
    {"corpus", "gen-ppl invariant under permuting the list", gen_ppl_permutation},
    {"corpus", "sampled NLL within 3 SE of the entropy rate", nll_matches_entropy_rate},
    {"backbone", "masked corruption keeps unmasked positions", masked_corruption_contract},
    {"backbone", "uniform corruption marginal passes chi-square", uniform_corruption_marginal},
    {"backbone", "sampler makes exactly nfe denoiser calls", sampler_call_count},
    {"backbone", "denoiser gradient matches finite differences", denoiser_gradient},
    {"backbone", "base loss gradient matches finite differences", base_loss_gradient},
    {"encoder", "features have unit norm", feature_norm},
    {"encoder", "soft-lift pullback matches finite differences", composed_lift_gradient},
    {"encoder", "real feature equals the hard one-hot lift", real_feature_is_hard_lift},
    {"encoder", "hard lift is piecewise constant", hard_lift_piecewise_constant},
    {"drift", "swapping references negates the drift", drift_antisymmetry},
    {"drift", "equal reference multisets give zero drift", drift_equilibrium},
    {"drift", "joint softmax weights sum to 1", joint_weights_sum},
    {"drift", "normalized drift batches have unit RMS", rms_normalization},
    {"drift", "low temperature concentrates on the nearest reference", low_temperature_concentration},
    {"drift", "queues are FIFO with capacity eviction", queue_fifo},
    {"drift", "anchors never see themselves as negatives", self_exclusion},
    {"objectives", "fixed-point gradient is exactly -alpha V", stop_gradient_identity},
    {"objectives", "logit pullback matches an independent composition", logit_pullback},
    {"objectives", "mirror direction is an ascent direction", local_ascent},
    {"objectives", "zero drift gives zero mirror signal", mirror_equilibrium},
    {"objectives", "mirror teacher maximizes the variational objective", mirror_variational},
    {"trainer", "identical seeds give bit-identical runs", training_determinism},
    {"trainer", "queue lengths follow min(capacity, k B)", queue_growth},
    {"trainer", "equilibrium step leaves parameters unchanged", equilibrium_step},
    {"trainer", "micro-batch gradients are averaged, one update per step", micro_batch_averaging},
    {"trainer", "queues receive pre-update features; encoder stays frozen", pre_update_push_and_frozen_encoder},
    {"trainer", "zero-step run returns the input checkpoint", zero_step_run},
    {"evalcli", "eval reports are reproducible and in range", eval_report_contract},
    {"evalcli", "entropy metric examples", entropy_examples},
    {"evalcli", "single-seed SD is zero", single_seed_sd},
};

}  // namespace

std::vector<CheckResult> run_property_suite(std::uint64_t seed, const CheckObserver& on_result) {
    std::vector<CheckResult> results;
    std::uint64_t k = 0;
    for (const Check& c : kChecks) {
        Rng rng(seed * 1000003ULL + k++);
        CheckResult r{c.module, c.name, false, ""};
        try {
            const Outcome o = c.fn(rng);
            r.passed = o.ok;
            r.detail = o.detail;
        } catch (const std::exception& e) {
            r.detail = std::string("threw: ") + e.what();
        }
        if (on_result) on_result(r);
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace driftlm
