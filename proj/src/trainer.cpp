#include "driftlm/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"

namespace driftlm {

TrainConfig TrainConfig::base_defaults() {
    TrainConfig c;
    c.objective.variant = ObjectiveVariant::BaseOnly;
    c.lr = 3e-4;
    return c;
}

TrainConfig TrainConfig::drift_defaults() {
    TrainConfig c;
    c.objective.variant = ObjectiveVariant::FeatureL2;
    c.objective.with_base_loss = false;
    c.lr = 3e-5;
    return c;
}

void TrainConfig::validate() const {
    if (batch_size <= 0 || micro_batch <= 0) throw InvalidInput("train config: batch sizes must be positive");
    if (batch_size % micro_batch != 0) throw InvalidInput("train config: micro_batch must divide batch_size");
    if (steps < 0) throw InvalidInput("train config: steps must be nonnegative");
    if (!(lr > 0.0)) throw InvalidInput("train config: lr must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw InvalidInput("train config: Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw InvalidInput("train config: adam_eps must be positive");
    if (eval_every <= 0) throw InvalidInput("train config: eval_every must be positive");
    if (queue_capacity == 0) throw InvalidInput("train config: queue_capacity must be positive");
    if (!(t_min > 0.0 && t_min < t_max && t_max < 1.0)) {
        throw InvalidInput("train config: corruption range must satisfy 0 < t_min < t_max < 1");
    }
    objective.validate();
    drift.validate();
    if (objective.alpha != drift.alpha) throw InvalidInput("train config: objective and drift alpha disagree");
}

TrainState TrainState::start(const Checkpoint& init, const TrainConfig& config) {
    config.validate();
    init.params.validate();
    TrainState s{init.params,
                 AdamMoments{DenoiserParams::zeros(init.params.dims), DenoiserParams::zeros(init.params.dims)},
                 ReferenceQueue(config.queue_capacity),
                 ReferenceQueue(config.queue_capacity),
                 init.step,
                 0,
                 Rng(config.seed)};
    if (config.resume_optimizer && init.moments) {
        s.moments = *init.moments;
        s.adam_t = init.step;
    }
    return s;
}

void accumulate(DenoiserParams& grads, double s, const DenoiserParams& src) {
    auto dst = grads.named_tensors();
    auto from = src.named_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) axpy(*dst[i].second, s, *from[i].second);
}

double global_norm(const DenoiserParams& p) {
    double s = 0.0;
    for (const auto& [name, t] : p.named_tensors()) s += dot(*t, *t);
    return std::sqrt(s);
}

void adam_update(DenoiserParams& params, AdamMoments& moments, const DenoiserParams& grads, std::int64_t t,
                 const AdamConfig& config) {
    if (t < 1) throw ContractViolation("adam: update index must start at 1");
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    auto p = params.named_tensors();
    auto m = moments.first.named_tensors();
    auto v = moments.second.named_tensors();
    auto g = grads.named_tensors();
    for (std::size_t k = 0; k < p.size(); ++k) {
        auto pv = p[k].second->values();
        auto mv = m[k].second->values();
        auto vv = v[k].second->values();
        auto gv = g[k].second->values();
        for (std::size_t j = 0; j < pv.size(); ++j) {
            mv[j] = config.beta1 * mv[j] + (1.0 - config.beta1) * gv[j];
            vv[j] = config.beta2 * vv[j] + (1.0 - config.beta2) * gv[j] * gv[j];
            pv[j] -= config.lr * (mv[j] / c1) / (std::sqrt(vv[j] / c2) + config.eps);
        }
    }
}

namespace {

std::string tokens_text(const TokenSeq& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + std::to_string(s[i]);
    return out;
}

[[noreturn]] void non_finite(const TrainState& state, std::size_t micro, const std::vector<CorruptionRecord>& recs,
                             std::span<const TokenSeq> clean, const std::string& what) {
    std::ostringstream msg;
    msg << "non-finite " << what << " at step " << state.step + 1 << ", micro-batch " << micro << "\n";
    for (std::size_t i = 0; i < recs.size(); ++i) {
        msg << "  sample " << i << " t=" << recs[i].level << " clean=[" << tokens_text(clean[i]) << "] corrupted=["
            << tokens_text(recs[i].corrupted) << "]\n";
    }
    throw NonFiniteLoss(msg.str());
}

}  // namespace

StepMetrics train_step(TrainState& state, const FrozenEncoder& encoder, std::span<const TokenSeq> clean_batch,
                       const TrainConfig& config, DenoiserParams* grad_out) {
    if (clean_batch.size() != static_cast<std::size_t>(config.batch_size)) {
        throw InvalidInput("train_step: batch holds " + std::to_string(clean_batch.size()) + " sequences, expected " +
                           std::to_string(config.batch_size));
    }
    const ModelDims& dims = state.params.dims;
    const bool drifting = config.objective.uses_drift();
    const std::size_t mb = static_cast<std::size_t>(config.micro_batch);
    const std::size_t n_micro = clean_batch.size() / mb;
    const double inv_micro = 1.0 / static_cast<double>(n_micro);

    DenoiserParams grads = DenoiserParams::zeros(dims);
    StepMetrics metrics;
    std::vector<FeatureVec> pushed_real;
    std::vector<FeatureVec> pushed_gen;

    for (std::size_t m = 0; m < n_micro; ++m) {
        const auto clean = clean_batch.subspan(m * mb, mb);
        std::vector<CorruptionRecord> recs;
        std::vector<DenoiserOutput> outs;
        std::vector<LiftGraph> graphs;
        std::vector<FeatureVec> h_cur;
        std::vector<FeatureVec> u_cur;
        for (std::size_t i = 0; i < mb; ++i) {
            const double t = uniform_in(state.rng, config.t_min, config.t_max);
            recs.push_back(corrupt(clean[i], t, config.corruption, dims, state.rng));
        }
        for (std::size_t i = 0; i < mb; ++i) {
            outs.push_back(denoise_forward(state.params, recs[i].corrupted));
            if (!outs.back().logits.all_finite()) non_finite(state, m, recs, clean, "logits");
            if (drifting) {
                graphs.push_back(lift_and_encode(encoder, outs.back().logits, recs[i], config.objective.lift));
                h_cur.push_back(graphs.back().feature);
                u_cur.push_back(real_feature(encoder, clean[i]));
            } else {
                LiftGraph g;
                g.record = recs[i];
                g.logits = outs.back().logits;
                graphs.push_back(std::move(g));
            }
        }
        std::vector<Tensor> drifts;
        if (drifting) {
            const References refs = build_references(u_cur, h_cur, state.q_real, state.q_gen);
            drifts = drift_multi_temp(h_cur, refs, config.drift);
            for (const auto& v : drifts) metrics.drift_norm += l2_norm(v) / static_cast<double>(clean_batch.size());
        }
        const ObjectiveResult obj = total_objective(config.objective, encoder, graphs, drifts, clean);
        if (!std::isfinite(obj.loss)) non_finite(state, m, recs, clean, "loss");
        metrics.loss += obj.loss * inv_micro;

        DenoiserParams micro_grads = DenoiserParams::zeros(dims);
        for (std::size_t i = 0; i < mb; ++i) {
            denoise_backward(state.params, recs[i].corrupted, outs[i], obj.grad_logits[i], micro_grads);
        }
        accumulate(grads, inv_micro, micro_grads);
        pushed_real.insert(pushed_real.end(), u_cur.begin(), u_cur.end());
        pushed_gen.insert(pushed_gen.end(), h_cur.begin(), h_cur.end());
    }

    metrics.grad_norm = global_norm(grads);
    if (!std::isfinite(metrics.grad_norm)) throw NonFiniteLoss("non-finite gradient at step " + std::to_string(state.step + 1));
    ++state.adam_t;
    adam_update(state.params, state.moments, grads, state.adam_t,
                {config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps});
    ++state.step;
    state.q_real.push(pushed_real);
    state.q_gen.push(pushed_gen);
    if (grad_out) *grad_out = std::move(grads);
    return metrics;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<int>& nfes) {
    std::string out = "step,loss,drift_norm,grad_norm";
    for (int n : nfes) out += ",gen_ppl_nfe" + std::to_string(n);
    const int last = nfes.empty() ? 0 : nfes.back();
    out += ",entropy_nfe" + std::to_string(last) + "\n";
    for (const auto& r : rows) {
        out += std::to_string(r.step);
        if (r.train) {
            out += "," + fmt(r.train->loss) + "," + fmt(r.train->drift_norm) + "," + fmt(r.train->grad_norm);
        } else {
            out += ",,,";
        }
        for (int n : nfes) out += "," + fmt(r.eval.at(n).gen_ppl);
        out += "," + fmt(r.eval.at(last).entropy) + "\n";
    }
    return out;
}

Checkpoint fresh_checkpoint(const ModelDims& dims, std::uint64_t seed) {
    Rng rng(seed);
    return Checkpoint{DenoiserParams::init(dims, rng), std::nullopt, 0};
}

RunResult train_run(const TrainConfig& config, const MarkovSource& source, const Checkpoint& init,
                    const std::optional<std::filesystem::path>& out_dir, const std::vector<TokenSeq>* corpus) {
    config.validate();
    source.validate();
    const ModelDims& dims = init.params.dims;
    if (source.vocab_size != dims.clean_vocab()) {
        throw InvalidInput("train_run: source vocabulary " + std::to_string(source.vocab_size) +
                           " does not match the model's clean vocabulary " + std::to_string(dims.clean_vocab()));
    }
    if (corpus && corpus->empty()) throw InvalidInput("train_run: corpus is empty");
    if (out_dir) {
        std::error_code ec;
        std::filesystem::create_directories(*out_dir, ec);
        if (ec) throw IoError("cannot create output directory " + out_dir->string() + ": " + ec.message());
    }
    const FrozenEncoder encoder(init.params);
    TrainState state = TrainState::start(init, config);
    const std::int64_t first_step = state.step;

    auto snapshot = [&]() {
        Checkpoint c{state.params, std::nullopt, state.step};
        if (state.adam_t > 0) {
            c.moments = state.moments;
        } else {
            c.moments = init.moments;
        }
        return c;
    };

    RunResult result;
    EvalConfig eval_cfg = config.eval;
    StepMetrics window;
    int window_count = 0;
    std::vector<TokenSeq> batch(static_cast<std::size_t>(config.batch_size));
    for (std::int64_t k = 0;; ++k) {
        if (k % config.eval_every == 0) {
            MetricsRow row;
            row.step = state.step - first_step;
            if (window_count > 0) {
                const double n = window_count;
                row.train = StepMetrics{window.loss / n, window.drift_norm / n, window.grad_norm / n};
            }
            row.eval = evaluate(state.params, source, config.corruption, eval_cfg);
            result.metrics.push_back(std::move(row));
            window = {};
            window_count = 0;
            if (out_dir) {
                save_checkpoint(*out_dir / "checkpoint.json", snapshot());
                write_text(*out_dir / "metrics.csv", metrics_csv(result.metrics, eval_cfg.nfes));
            }
        }
        if (k == config.steps) break;
        for (auto& seq : batch) {
            if (corpus) {
                seq = (*corpus)[static_cast<std::size_t>(uniform_int(state.rng, 0, static_cast<int>(corpus->size()) - 1))];
            } else {
                seq = sample_sequence(source, static_cast<std::size_t>(dims.seq_len), state.rng);
            }
        }
        StepMetrics m;
        try {
            m = train_step(state, encoder, batch, config);
        } catch (const NonFiniteLoss& e) {
            if (out_dir) write_text(*out_dir / "nonfinite_dump.txt", e.what());
            throw;
        }
        window.loss += m.loss;
        window.drift_norm += m.drift_norm;
        window.grad_norm += m.grad_norm;
        ++window_count;
    }

    result.final = snapshot();
    if (result.metrics.back().step == config.steps) {
        result.final_report = result.metrics.back().eval;
    } else {
        result.final_report = evaluate(state.params, source, config.corruption, eval_cfg);
    }
    if (out_dir) save_checkpoint(*out_dir / "checkpoint.json", result.final);
    return result;
}

}  // namespace driftlm
