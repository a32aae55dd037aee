#include "driftlm/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"

namespace driftlm {

std::string to_string(CorruptionKind kind) { return kind == CorruptionKind::Masked ? "masked" : "uniform"; }

CorruptionKind parse_corruption_kind(const std::string& text) {
    if (text == "masked") return CorruptionKind::Masked;
    if (text == "uniform") return CorruptionKind::Uniform;
    throw InvalidInput("unknown corruption kind '" + text + "' (expected masked|uniform)");
}

std::vector<bool> CorruptionRecord::predicted_mask() const {
    std::vector<bool> m(corrupted.size(), false);
    for (int p : predicted) m[static_cast<std::size_t>(p)] = true;
    return m;
}

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void fill_normal(Tensor& t, Rng& rng, double std) {
    for (double& v : t.values()) v = std * standard_normal(rng);
}

}  // namespace

DenoiserParams DenoiserParams::zeros(const ModelDims& dims) {
    if (dims.vocab < 2 || dims.seq_len < 1 || dims.d_model < 1 || dims.d_hidden < 1) {
        throw InvalidInput("model dims must be positive (vocab >= 2)");
    }
    DenoiserParams p;
    p.dims = dims;
    const std::size_t v = sz(dims.vocab), l = sz(dims.seq_len), d = sz(dims.d_model), dh = sz(dims.d_hidden);
    p.embed = Tensor({v, d});
    p.pos_embed = Tensor({l, d});
    for (auto& b : p.blocks) {
        b.w1 = Tensor({2 * d, dh});
        b.b1 = Tensor({dh});
        b.w2 = Tensor({dh, d});
        b.b2 = Tensor({d});
    }
    p.out_proj = Tensor({d, v});
    return p;
}

DenoiserParams DenoiserParams::init(const ModelDims& dims, Rng& rng, double std) {
    DenoiserParams p = zeros(dims);
    fill_normal(p.embed, rng, std);
    fill_normal(p.pos_embed, rng, std);
    for (auto& b : p.blocks) {
        fill_normal(b.w1, rng, std);
        fill_normal(b.w2, rng, std);
    }
    fill_normal(p.out_proj, rng, std);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> DenoiserParams::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out{{"embed", &embed}, {"pos_embed", &pos_embed}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string pre = "blocks." + std::to_string(i) + ".";
        out.emplace_back(pre + "w1", &blocks[i].w1);
        out.emplace_back(pre + "b1", &blocks[i].b1);
        out.emplace_back(pre + "w2", &blocks[i].w2);
        out.emplace_back(pre + "b2", &blocks[i].b2);
    }
    out.emplace_back("out_proj", &out_proj);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> DenoiserParams::named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, t] : const_cast<DenoiserParams*>(this)->named_tensors()) out.emplace_back(name, t);
    return out;
}

void DenoiserParams::validate() const {
    const DenoiserParams ref = zeros(dims);
    auto mine = named_tensors();
    auto want = ref.named_tensors();
    for (std::size_t i = 0; i < mine.size(); ++i) {
        if (mine[i].second->shape() != want[i].second->shape()) {
            throw ContractViolation("parameter " + mine[i].first + " has shape " +
                                    shape_string(mine[i].second->shape()) + ", expected " +
                                    shape_string(want[i].second->shape()));
        }
        if (!mine[i].second->all_finite()) throw InvalidInput("parameter " + mine[i].first + " is not finite");
    }
}

std::size_t DenoiserParams::parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_tensors()) n += t->size();
    return n;
}

bool bit_identical(const DenoiserParams& a, const DenoiserParams& b) {
    if (!(a.dims == b.dims)) return false;
    auto ta = a.named_tensors();
    auto tb = b.named_tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (!bit_identical(*ta[i].second, *tb[i].second)) return false;
    }
    return true;
}

CorruptionRecord corrupt(const TokenSeq& clean, double t, CorruptionKind kind, const ModelDims& dims, Rng& rng) {
    if (!(t > 0.0 && t < 1.0)) throw InvalidInput("corrupt: level t must lie in (0, 1)");
    for (Token tok : clean.tokens) {
        if (tok < 0 || tok >= dims.clean_vocab()) throw InvalidInput("corrupt: clean sequence holds a non-clean token");
    }
    CorruptionRecord rec;
    rec.corrupted = clean;
    rec.level = t;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const bool hit = uniform01(rng) < t;
        if (kind == CorruptionKind::Masked) {
            if (hit) {
                rec.corrupted[i] = dims.mask_index();
                rec.predicted.push_back(static_cast<int>(i));
            }
        } else {
            if (hit) rec.corrupted[i] = uniform_int(rng, 0, dims.clean_vocab() - 1);
            rec.predicted.push_back(static_cast<int>(i));
        }
    }
    return rec;
}

StackTrace run_blocks(const DenoiserParams& params, const Tensor& h0) {
    StackTrace tr;
    Tensor h = h0;
    const std::size_t len = h0.rows();
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        const BlockParams& bp = params.blocks[b];
        BlockTrace& bt = tr.blocks[b];
        bt.input = h;
        bt.joined = concat(h, broadcast_rows(mean_pool(h), len));
        bt.act = tanh_elem(add(matmul(bt.joined, bp.w1), bp.b1));
        h = add(h, add(matmul(bt.act, bp.w2), bp.b2));
        (b == 0 ? tr.hidden1 : tr.hidden2) = h;
    }
    return tr;
}

Tensor backprop_blocks(const DenoiserParams& params, const StackTrace& trace, const Tensor& d_hidden1,
                       const Tensor& d_hidden2, DenoiserParams* grads) {
    Tensor d_out = d_hidden2;
    for (std::size_t bi = params.blocks.size(); bi-- > 0;) {
        const BlockParams& bp = params.blocks[bi];
        const BlockTrace& bt = trace.blocks[bi];
        const std::size_t len = bt.input.rows();

        auto [d_mm2, d_b2] = add_vjp(d_out.shape(), bp.b2.shape(), d_out);
        auto [d_act, d_w2] = matmul_vjp(bt.act, bp.w2, d_mm2);
        Tensor d_pre = tanh_vjp(bt.act, d_act);
        auto [d_mm1, d_b1] = add_vjp(d_pre.shape(), bp.b1.shape(), d_pre);
        auto [d_joined, d_w1] = matmul_vjp(bt.joined, bp.w1, d_mm1);
        auto [d_direct, d_ctx_rows] = concat_vjp(bt.input.shape(), bt.input.shape(), d_joined);
        Tensor d_in = d_out;  // residual path
        axpy(d_in, 1.0, d_direct);
        axpy(d_in, 1.0, mean_pool_vjp(len, broadcast_rows_vjp(d_ctx_rows)));

        if (grads) {
            BlockParams& g = grads->blocks[bi];
            axpy(g.w1, 1.0, d_w1);
            axpy(g.b1, 1.0, d_b1);
            axpy(g.w2, 1.0, d_w2);
            axpy(g.b2, 1.0, d_b2);
        }
        if (bi == 1) axpy(d_in, 1.0, d_hidden1);
        d_out = std::move(d_in);
    }
    return d_out;
}

DenoiserOutput denoise_forward(const DenoiserParams& params, const TokenSeq& corrupted) {
    if (corrupted.size() != sz(params.dims.seq_len)) {
        throw ContractViolation("denoise_forward: sequence length " + std::to_string(corrupted.size()) +
                                " != model length " + std::to_string(params.dims.seq_len));
    }
    Tensor h0 = add(gather_rows(params.embed, corrupted.tokens), params.pos_embed);
    DenoiserOutput out;
    out.trace = run_blocks(params, h0);
    out.logits = matmul(out.trace.hidden2, params.out_proj);
    return out;
}

void denoise_backward(const DenoiserParams& params, const TokenSeq& corrupted, const DenoiserOutput& out,
                      const Tensor& d_logits, DenoiserParams& grads) {
    auto [d_hidden2, d_out_proj] = matmul_vjp(out.trace.hidden2, params.out_proj, d_logits);
    axpy(grads.out_proj, 1.0, d_out_proj);
    const Tensor d_h0 = backprop_blocks(params, out.trace, Tensor::zeros_like(d_hidden2), d_hidden2, &grads);
    axpy(grads.pos_embed, 1.0, d_h0);
    axpy(grads.embed, 1.0, gather_rows_vjp(params.embed.rows(), corrupted.tokens, d_h0));
}

LossAndGrad base_loss(const Tensor& logits, const TokenSeq& clean, const std::vector<int>& positions) {
    LossAndGrad out{0.0, Tensor::zeros_like(logits)};
    if (positions.empty()) return out;
    const Tensor probs = softmax_rows(logits);
    const double inv = 1.0 / static_cast<double>(positions.size());
    for (int pos : positions) {
        const auto r = static_cast<std::size_t>(pos);
        const auto target = static_cast<std::size_t>(clean[r]);
        auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double lse = 0.0;
        for (double v : row) lse += std::exp(v - mx);
        out.loss += (mx + std::log(lse) - row[target]) * inv;
        auto g = out.grad_logits.row(r);
        auto p = probs.row(r);
        for (std::size_t c = 0; c < g.size(); ++c) g[c] = p[c] * inv;
        g[target] -= inv;
    }
    return out;
}

namespace {

Token draw_clean_token(const Tensor& probs, std::size_t row, int clean_vocab, Rng& rng) {
    return categorical(probs.row(row).first(sz(clean_vocab)), rng);
}

}  // namespace

TokenSeq sample(const DenoiserParams& params, CorruptionKind kind, int nfe, Rng& rng, const ForwardHook& on_forward) {
    const ModelDims& dims = params.dims;
    if (nfe <= 0) throw InvalidInput("sample: nfe must be positive");
    if (kind == CorruptionKind::Masked && nfe > dims.seq_len) {
        throw InvalidInput("sample: masked sampler needs nfe <= sequence length");
    }
    const std::size_t len = sz(dims.seq_len);
    auto forward_probs = [&](const TokenSeq& x) {
        if (on_forward) on_forward();
        return softmax_rows(denoise_forward(params, x).logits);
    };

    TokenSeq x;
    if (kind == CorruptionKind::Masked) {
        x.tokens.assign(len, dims.mask_index());
        std::vector<std::size_t> masked(len);
        std::iota(masked.begin(), masked.end(), std::size_t{0});
        for (int step = 0; step < nfe; ++step) {
            const std::size_t steps_left = sz(nfe - step);
            const std::size_t commit = (masked.size() + steps_left - 1) / steps_left;
            const Tensor probs = forward_probs(x);
            // partial Fisher-Yates: the first `commit` entries become a uniform random subset
            for (std::size_t i = 0; i < commit; ++i) {
                const auto j = i + static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(masked.size() - i - 1)));
                std::swap(masked[i], masked[j]);
            }
            std::sort(masked.begin(), masked.begin() + static_cast<std::ptrdiff_t>(commit));
            for (std::size_t i = 0; i < commit; ++i) {
                x[masked[i]] = draw_clean_token(probs, masked[i], dims.clean_vocab(), rng);
            }
            masked.erase(masked.begin(), masked.begin() + static_cast<std::ptrdiff_t>(commit));
        }
    } else {
        x.tokens.resize(len);
        for (auto& tok : x.tokens) tok = uniform_int(rng, 0, dims.clean_vocab() - 1);
        for (int step = 0; step < nfe; ++step) {
            const Tensor probs = forward_probs(x);
            for (std::size_t i = 0; i < len; ++i) x[i] = draw_clean_token(probs, i, dims.clean_vocab(), rng);
        }
    }
    return x;
}

}  // namespace driftlm
