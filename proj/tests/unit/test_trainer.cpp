#include <doctest.h>

#include <cmath>
#include <fstream>

#include "driftlm/config_json.hpp"
#include "driftlm/errors.hpp"
#include "driftlm/ops.hpp"
#include "driftlm/trainer.hpp"
#include "test_support.hpp"

using namespace driftlm;
using namespace testsupport;

namespace {

TrainConfig small_config(ObjectiveVariant v = ObjectiveVariant::FeatureL2) {
    TrainConfig c = v == ObjectiveVariant::BaseOnly ? TrainConfig::base_defaults() : TrainConfig::drift_defaults();
    c.objective.variant = v;
    c.batch_size = 8;
    c.micro_batch = 4;
    c.queue_capacity = 20;
    c.eval.nfes = {2, 4};
    c.eval.n_samples = 8;
    return c;
}

std::vector<TokenSeq> source_batch(const MarkovSource& src, Rng& rng, int n) {
    std::vector<TokenSeq> out;
    for (int i = 0; i < n; ++i) out.push_back(sample_sequence(src, 16, rng));
    return out;
}

double max_param_diff(const DenoiserParams& a, const DenoiserParams& b) {
    double m = 0.0;
    auto ta = a.named_tensors(), tb = b.named_tensors();
    for (std::size_t k = 0; k < ta.size(); ++k) {
        for (std::size_t i = 0; i < ta[k].second->size(); ++i) m = std::max(m, std::fabs((*ta[k].second)[i] - (*tb[k].second)[i]));
    }
    return m;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("identical config and seed give bit-identical parameters after 10 steps") {
    const MarkovSource src = make_banded_source();
    for (ObjectiveVariant v : {ObjectiveVariant::BaseOnly, ObjectiveVariant::FeatureL2, ObjectiveVariant::MirrorKL}) {
        TrainConfig c = small_config(v);
        c.steps = 10;
        c.eval_every = 10;
        const Checkpoint init = fresh_checkpoint(ModelDims{}, 3);
        const RunResult a = train_run(c, src, init), b = train_run(c, src, init);
        CHECK(bit_identical(a.final.params, b.final.params));
        CHECK(a.final_report == b.final_report);
        CHECK_FALSE(bit_identical(a.final.params, init.params));
    }
}

TEST_CASE("queue lengths follow min(capacity, k B)") {
    const MarkovSource src = make_banded_source();
    const TrainConfig c = small_config();
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 1);
    const FrozenEncoder enc(init.params);
    TrainState s = TrainState::start(init, c);
    Rng data(2);
    for (int k = 1; k <= 4; ++k) {
        train_step(s, enc, source_batch(src, data, 8), c);
        CHECK(s.q_real.size() == std::min<std::size_t>(20, static_cast<std::size_t>(8 * k)));
        CHECK(s.q_gen.size() == std::min<std::size_t>(20, static_cast<std::size_t>(8 * k)));
        CHECK(s.step == k);
        CHECK(s.adam_t == k);
    }
}

TEST_CASE("a step at feature equilibrium leaves the parameters unchanged") {
    TrainConfig c = small_config();
    c.micro_batch = 1;
    c.batch_size = 4;
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 4);
    const FrozenEncoder enc(init.params);
    Rng rng(5);
    const TokenSeq x = random_tokens(rng, 16, 31);
    const std::vector<TokenSeq> batch(4, x);
    TrainState s = TrainState::start(init, c);
    // Each micro-batch holds one anchor, so its negatives are exactly q_gen and
    // its positives are u(x) plus q_real.
    const auto extra = unit_features(rng, 3, 64);
    s.q_real.push(extra);
    s.q_gen.push(extra);
    const FeatureVec u = real_feature(enc, x);
    s.q_gen.push(std::span(&u, 1));
    DenoiserParams grads;
    const StepMetrics m = train_step(s, enc, batch, c, &grads);
    CHECK(m.drift_norm <= 1e-12);
    CHECK(m.grad_norm == 0.0);
    CHECK(bit_identical(s.params, init.params));
}

TEST_CASE("base gradient is the average over micro-batches and independent of the split") {
    const MarkovSource src = make_banded_source();
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 6);
    const FrozenEncoder enc(init.params);
    Rng data(7);
    const auto batch = source_batch(src, data, 8);

    TrainConfig c = small_config(ObjectiveVariant::BaseOnly);
    // Replay the corruption draws and average the per-sample base-loss gradients.
    Rng replay(c.seed);
    DenoiserParams expected = DenoiserParams::zeros(init.params.dims);
    for (const TokenSeq& x : batch) {
        const double t = uniform_in(replay, c.t_min, c.t_max);
        const CorruptionRecord r = corrupt(x, t, c.corruption, init.params.dims, replay);
        const auto out = denoise_forward(init.params, r.corrupted);
        const LossAndGrad lg = base_loss(out.logits, x, r.predicted);
        DenoiserParams g = DenoiserParams::zeros(init.params.dims);
        denoise_backward(init.params, r.corrupted, out, lg.grad_logits, g);
        accumulate(expected, 1.0 / 8.0, g);
    }
    for (int micro : {1, 2, 4, 8}) {
        c.micro_batch = micro;
        TrainState s = TrainState::start(init, c);
        DenoiserParams g;
        train_step(s, enc, batch, c, &g);
        CHECK(max_param_diff(g, expected) <= 1e-14);
        CHECK(s.adam_t == 1);
    }
}

TEST_CASE("first Adam step matches the closed form") {
    Rng rng(8);
    DenoiserParams p = DenoiserParams::init(ModelDims{}, rng);
    DenoiserParams g = DenoiserParams::init(ModelDims{}, rng, 1.0);
    AdamMoments m{DenoiserParams::zeros(p.dims), DenoiserParams::zeros(p.dims)};
    const DenoiserParams before = p;
    adam_update(p, m, g, 1, AdamConfig{1e-3, 0.9, 0.999, 1e-8});
    auto tp = p.named_tensors();
    auto tb = before.named_tensors();
    auto tg = g.named_tensors();
    for (std::size_t k = 0; k < tp.size(); ++k) {
        for (std::size_t i = 0; i < tp[k].second->size(); ++i) {
            const double gi = (*tg[k].second)[i];
            const double want = (*tb[k].second)[i] - 1e-3 * gi / (std::fabs(gi) + 1e-8);
            CHECK((*tp[k].second)[i] == doctest::Approx(want).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(adam_update(p, m, g, 0, AdamConfig{}), ContractViolation);
    CHECK(global_norm(DenoiserParams::zeros(p.dims)) == 0.0);
}

TEST_CASE("queues receive the pre-update features of the step") {
    const MarkovSource src = make_banded_source();
    TrainConfig c = small_config();
    c.lr = 1e-2;
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 9);
    const FrozenEncoder enc(init.params);
    Rng data(10);
    const auto batch = source_batch(src, data, 8);
    TrainState s = TrainState::start(init, c);
    Rng replay(c.seed);
    std::vector<FeatureVec> gen, real;
    for (int m = 0; m < 2; ++m) {
        std::vector<CorruptionRecord> recs;
        for (int i = 0; i < 4; ++i) {
            const double t = uniform_in(replay, c.t_min, c.t_max);
            recs.push_back(corrupt(batch[static_cast<std::size_t>(4 * m + i)], t, c.corruption, init.params.dims, replay));
        }
        for (int i = 0; i < 4; ++i) {
            const Tensor logits = denoise_forward(init.params, recs[static_cast<std::size_t>(i)].corrupted).logits;
            gen.push_back(lift_and_encode(enc, logits, recs[static_cast<std::size_t>(i)], LiftKind::Soft).feature);
            real.push_back(real_feature(enc, batch[static_cast<std::size_t>(4 * m + i)]));
        }
    }
    train_step(s, enc, batch, c);
    REQUIRE(s.q_gen.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(bit_identical(s.q_gen.entries()[i].values, gen[i].values));
        CHECK(bit_identical(s.q_real.entries()[i].values, real[i].values));
    }
    CHECK_FALSE(bit_identical(s.params, init.params));
}

TEST_CASE("the frozen encoder is untouched by training") {
    const MarkovSource src = make_banded_source();
    TrainConfig c = small_config();
    c.lr = 1e-2;
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 11);
    const FrozenEncoder enc(init.params);
    const DenoiserParams snapshot = enc.params();
    TrainState s = TrainState::start(init, c);
    Rng data(12);
    for (int k = 0; k < 5; ++k) train_step(s, enc, source_batch(src, data, 8), c);
    CHECK(bit_identical(enc.params(), snapshot));
    CHECK_FALSE(bit_identical(s.params, snapshot));
}

TEST_CASE("train_step rejects a batch of the wrong size") {
    const TrainConfig c = small_config();
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 13);
    TrainState s = TrainState::start(init, c);
    Rng rng(1);
    CHECK_THROWS_AS(train_step(s, FrozenEncoder(init.params), source_batch(make_banded_source(), rng, 7), c), InvalidInput);
}

TEST_CASE("train config validation") {
    TrainConfig c = TrainConfig::drift_defaults();
    CHECK_NOTHROW(c.validate());
    CHECK(c.lr == 3e-5);
    CHECK(TrainConfig::base_defaults().lr == 3e-4);
    CHECK(TrainConfig::base_defaults().objective.variant == ObjectiveVariant::BaseOnly);
    c.micro_batch = 5;
    CHECK_THROWS_AS(c.validate(), InvalidInput);
    c = TrainConfig::drift_defaults();
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidInput);
    c = TrainConfig::drift_defaults();
    c.objective.alpha = 2.0;
    CHECK_THROWS_AS(c.validate(), InvalidInput);
}

TEST_CASE("zero steps returns the input checkpoint") {
    TrainConfig c = small_config();
    c.steps = 0;
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 14);
    const RunResult r = train_run(c, make_banded_source(), init);
    CHECK(bit_identical(r.final.params, init.params));
    CHECK(r.final.step == 0);
    CHECK(r.metrics.size() == 1);
}

TEST_CASE("metrics CSV has steps / eval_every + 1 rows and the fixed header") {
    const auto dir = temp_dir("metrics");
    TrainConfig c = small_config(ObjectiveVariant::BaseOnly);
    c.eval.nfes = {4, 8, 16};
    c.steps = 6;
    c.eval_every = 2;
    const RunResult r = train_run(c, make_banded_source(), fresh_checkpoint(ModelDims{}, 15), dir);
    CHECK(r.metrics.size() == 4);
    const std::string csv = read_file(dir / "metrics.csv");
    CHECK(csv.rfind("step,loss,drift_norm,grad_norm,gen_ppl_nfe4,gen_ppl_nfe8,gen_ppl_nfe16,entropy_nfe16\n", 0) == 0);
    std::size_t lines = 0;
    for (char ch : csv) lines += ch == '\n';
    CHECK(lines == 5);
    CHECK(csv.find("\n0,,,,") != std::string::npos);
    const Checkpoint back = load_checkpoint(dir / "checkpoint.json");
    CHECK(bit_identical(back.params, r.final.params));
    CHECK(back.step == 6);
    CHECK(r.final_report == r.metrics.back().eval);
}

TEST_CASE("a base checkpoint continues into drifting and carries the step count") {
    const auto dir = temp_dir("phases");
    TrainConfig base = small_config(ObjectiveVariant::BaseOnly);
    base.steps = 3;
    base.eval_every = 3;
    const RunResult b = train_run(base, make_banded_source(), fresh_checkpoint(ModelDims{}, 16), dir);
    const Checkpoint loaded = load_checkpoint(dir / "checkpoint.json");
    CHECK(bit_identical(loaded.params, b.final.params));
    REQUIRE(loaded.moments.has_value());
    TrainConfig drift = small_config();
    drift.steps = 2;
    drift.eval_every = 2;
    const RunResult d = train_run(drift, make_banded_source(), loaded);
    CHECK(d.final.step == 5);
    CHECK(d.metrics.back().step == 2);

    // Fresh optimizer versus resumed moments give different updates.
    TrainConfig resumed = drift;
    resumed.resume_optimizer = true;
    const RunResult r = train_run(resumed, make_banded_source(), loaded);
    CHECK_FALSE(bit_identical(r.final.params, d.final.params));
}

TEST_CASE("non-finite training aborts with a dump and leaves the last checkpoint intact") {
    const auto dir = temp_dir("nonfinite");
    TrainConfig c = small_config(ObjectiveVariant::BaseOnly);
    c.lr = 1e300;
    c.steps = 10;
    c.eval_every = 5;
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 17);
    CHECK_THROWS_AS(train_run(c, make_banded_source(), init, dir), NonFiniteLoss);
    const Checkpoint on_disk = load_checkpoint(dir / "checkpoint.json");
    CHECK(bit_identical(on_disk.params, init.params));
    const std::string dump = read_file(dir / "nonfinite_dump.txt");
    CHECK(dump.find("non-finite") != std::string::npos);
    CHECK(dump.find("corrupted=[") != std::string::npos);
}

TEST_CASE("corpus batches replace source sampling") {
    TrainConfig c = small_config(ObjectiveVariant::BaseOnly);
    c.steps = 2;
    c.eval_every = 2;
    Rng rng(18);
    const std::vector<TokenSeq> corpus = source_batch(make_banded_source(), rng, 5);
    const Checkpoint init = fresh_checkpoint(ModelDims{}, 19);
    const RunResult a = train_run(c, make_banded_source(), init, std::nullopt, &corpus);
    const RunResult b = train_run(c, make_banded_source(), init);
    CHECK_FALSE(bit_identical(a.final.params, b.final.params));
    const std::vector<TokenSeq> empty;
    CHECK_THROWS_AS(train_run(c, make_banded_source(), init, std::nullopt, &empty), InvalidInput);
}

TEST_CASE("train config JSON round trip") {
    TrainConfig c = TrainConfig::drift_defaults();
    c.objective.variant = ObjectiveVariant::MirrorMSE;
    c.objective.lift = LiftKind::HardST;
    c.objective.eta = 0.25;
    c.drift.temperatures = {0.1, 0.3};
    c.drift.w_plus = 0.0;
    c.corruption = CorruptionKind::Uniform;
    c.eval.nfes = {1, 2};
    c.seed = 99;
    c.queue_capacity = 7;
    const TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()), TrainConfig::base_defaults());
    CHECK(to_json(back).dump() == to_json(c).dump());
    nlohmann::json bad = nlohmann::json::parse(to_json(c).dump());
    bad["learning_rate_typo"] = 1;
    CHECK_THROWS_AS(train_config_from_json(bad, c), InvalidInput);
}

}
