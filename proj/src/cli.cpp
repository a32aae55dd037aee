#include "driftlm/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "driftlm/ablation.hpp"
#include "driftlm/checks.hpp"
#include "driftlm/config_json.hpp"
#include "driftlm/errors.hpp"

namespace driftlm {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Everything a command needs, resolved from defaults, then --config, then flags.
struct RunSpec {
    TrainConfig train;
    std::string source;   // empty: built-in banded source
    std::string corpus;   // empty: batches sampled from the source
    std::string init;     // checkpoint to start from or to evaluate
    // make-source
    std::string source_kind = "banded";
    int vocab = 31;
    std::vector<double> band{0.4, 0.3, 0.2, 0.1};
    int corpus_size = 0;
    // ablate
    std::string axis;
    std::vector<std::string> grid;
    std::vector<std::uint64_t> seeds{0, 1, 2};
};

bool trains(const std::string& cmd) { return cmd == "base-train" || cmd == "drift-train" || cmd == "ablate"; }

ojson spec_to_json(const std::string& cmd, const RunSpec& s) {
    ojson doc;
    if (cmd == "make-source") {
        doc["source_kind"] = s.source_kind;
        doc["vocab"] = s.vocab;
        doc["band"] = s.band;
        doc["seed"] = s.train.seed;
        doc["corpus_size"] = s.corpus_size;
        return doc;
    }
    if (cmd == "verify") {
        doc["seed"] = s.train.seed;
        return doc;
    }
    doc["source"] = s.source;
    doc["init"] = s.init;
    if (trains(cmd)) {
        doc["corpus"] = s.corpus;
        doc["train"] = to_json(s.train);
    } else {
        doc["corruption"] = to_string(s.train.corruption);
        doc["eval"] = {{"nfes", s.train.eval.nfes}, {"n_samples", s.train.eval.n_samples}, {"seed", s.train.eval.seed}};
    }
    if (cmd == "ablate") {
        doc["axis"] = s.axis;
        doc["grid"] = s.grid;
        doc["seeds"] = s.seeds;
    }
    return doc;
}

void apply_config_file(const std::string& cmd, const std::string& path, RunSpec& s) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config " + path + " is not valid JSON: " + e.what());
    }
    // A manifest wraps the resolved config together with the command that produced it.
    if (doc.contains("command") && doc.contains("config")) {
        if (doc.at("command").get<std::string>() != cmd) {
            throw UsageError("manifest " + path + " was written by '" + doc.at("command").get<std::string>() +
                             "', not '" + cmd + "'");
        }
        doc = doc.at("config");
    }
    try {
        for (const auto& [key, value] : doc.items()) {
            if (key == "source") s.source = value.get<std::string>();
            else if (key == "corpus") s.corpus = value.get<std::string>();
            else if (key == "init") s.init = value.get<std::string>();
            else if (key == "source_kind") s.source_kind = value.get<std::string>();
            else if (key == "vocab") s.vocab = value.get<int>();
            else if (key == "band") s.band = value.get<std::vector<double>>();
            else if (key == "corpus_size") s.corpus_size = value.get<int>();
            else if (key == "axis") s.axis = value.get<std::string>();
            else if (key == "grid") s.grid = value.get<std::vector<std::string>>();
            else if (key == "seeds") s.seeds = value.get<std::vector<std::uint64_t>>();
            else if (key == "seed") s.train.seed = s.train.eval.seed = value.get<std::uint64_t>();
            else if (key == "corruption") s.train.corruption = parse_corruption_kind(value.get<std::string>());
            else if (key == "train") s.train = train_config_from_json(value, s.train);
            else if (key == "eval") {
                nlohmann::json wrapped = {{"eval", value}};
                s.train = train_config_from_json(wrapped, s.train);
            } else {
                throw UsageError("config " + path + ": unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    } catch (const InvalidInput& e) {
        throw UsageError(e.what());
    }
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
    std::vector<T> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::istringstream one(item);
        T v{};
        if (!(one >> v) || !(one >> std::ws).eof()) throw UsageError(std::string("bad ") + what + " list '" + text + "'");
        out.push_back(v);
    }
    if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
    return out;
}

std::vector<std::string> split_grid(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    if (out.empty()) throw UsageError("empty --grid");
    return out;
}

// Raw flag values; only flags the user actually passed override the resolved spec.
struct Flags {
    std::string config, out, source, corpus, init, nfe, temperatures, corruption, objective, lift, seeds, grid, axis;
    std::string source_kind, band;
    std::uint64_t seed = 0;
    int samples = 0, batch = 0, micro = 0, eval_every = 0, vocab = 0, corpus_size = 0;
    std::int64_t steps = 0;
    std::size_t queue = 0;
    double lr = 0, eta = 0, alpha = 0, w_plus = 0, w_minus = 0;
    bool with_base = false, no_renorm = false, resume = false;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "Config file or manifest.json from an earlier run");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--seed", f.seed, "Seed for training, sampling and evaluation");
}

void add_eval_flags(CLI::App* sub, Flags& f) {
    sub->add_option("--source", f.source, "Source file (default: built-in banded chain)");
    sub->add_option("--corruption", f.corruption, "masked | uniform");
    sub->add_option("--nfe", f.nfe, "Comma-separated NFE list");
    sub->add_option("--samples", f.samples, "Samples per NFE");
}

void add_train_flags(CLI::App* sub, Flags& f) {
    add_eval_flags(sub, f);
    sub->add_option("--corpus", f.corpus, "Corpus file to draw batches from instead of the source");
    sub->add_option("--steps", f.steps, "Optimizer updates");
    sub->add_option("--lr", f.lr, "Adam learning rate");
    sub->add_option("--batch", f.batch, "Batch size B");
    sub->add_option("--micro-batch", f.micro, "Micro-batch size");
    sub->add_option("--eval-every", f.eval_every, "Steps between evaluations");
    sub->add_option("--queue", f.queue, "Reference queue capacity");
    sub->add_option("--objective", f.objective, "base | feature-l2 | mirror-kl | mirror-mse");
    sub->add_flag("--with-base-loss", f.with_base, "Add the denoising loss to a drifting objective");
    sub->add_option("--lift", f.lift, "soft | hard-st");
    sub->add_option("--eta", f.eta, "Mirror step");
    sub->add_option("--alpha", f.alpha, "Drift scale");
    sub->add_option("--temperatures", f.temperatures, "Comma-separated temperature set");
    sub->add_option("--w-plus", f.w_plus, "Attraction weight");
    sub->add_option("--w-minus", f.w_minus, "Repulsion weight");
    sub->add_flag("--no-renormalize", f.no_renorm, "Use raw joint-softmax weights for the barycenters");
    sub->add_flag("--resume-optimizer", f.resume, "Continue the Adam state stored in --init");
}

bool given(const CLI::App* sub, const char* name) {
    try {
        return sub->get_option(name)->count() > 0;
    } catch (const CLI::OptionNotFound&) {
        return false;
    }
}

RunSpec resolve(const std::string& cmd, const CLI::App* sub, const Flags& f) {
    RunSpec s;
    s.train = cmd == "base-train" ? TrainConfig::base_defaults() : TrainConfig::drift_defaults();
    if (given(sub, "--config")) apply_config_file(cmd, f.config, s);
    TrainConfig& t = s.train;
    try {
        if (given(sub, "--seed")) t.seed = t.eval.seed = f.seed;
        if (given(sub, "--source")) s.source = f.source;
        if (given(sub, "--corpus")) s.corpus = f.corpus;
        if (given(sub, "--init")) s.init = f.init;
        if (given(sub, "--checkpoint")) s.init = f.init;
        if (given(sub, "--corruption")) t.corruption = parse_corruption_kind(f.corruption);
        if (given(sub, "--nfe")) t.eval.nfes = parse_list<int>(f.nfe, "nfe");
        if (given(sub, "--samples")) t.eval.n_samples = f.samples;
        if (given(sub, "--steps")) t.steps = f.steps;
        if (given(sub, "--lr")) t.lr = f.lr;
        if (given(sub, "--batch")) t.batch_size = f.batch;
        if (given(sub, "--micro-batch")) t.micro_batch = f.micro;
        if (given(sub, "--eval-every")) t.eval_every = f.eval_every;
        if (given(sub, "--queue")) t.queue_capacity = f.queue;
        if (given(sub, "--objective")) t.objective.variant = parse_objective_variant(f.objective);
        if (given(sub, "--with-base-loss")) t.objective.with_base_loss = true;
        if (given(sub, "--lift")) t.objective.lift = parse_lift_kind(f.lift);
        if (given(sub, "--eta")) t.objective.eta = f.eta;
        if (given(sub, "--alpha")) t.objective.alpha = t.drift.alpha = f.alpha;
        if (given(sub, "--temperatures")) t.drift.temperatures = parse_list<double>(f.temperatures, "temperature");
        if (given(sub, "--w-plus")) t.drift.w_plus = f.w_plus;
        if (given(sub, "--w-minus")) t.drift.w_minus = f.w_minus;
        if (given(sub, "--no-renormalize")) t.drift.renormalize_sides = false;
        if (given(sub, "--resume-optimizer")) t.resume_optimizer = true;
        if (given(sub, "--kind")) s.source_kind = f.source_kind;
        if (given(sub, "--vocab")) s.vocab = f.vocab;
        if (given(sub, "--band")) s.band = parse_list<double>(f.band, "band");
        if (given(sub, "--corpus-size")) s.corpus_size = f.corpus_size;
        if (given(sub, "--axis")) s.axis = f.axis;
        if (given(sub, "--grid")) s.grid = split_grid(f.grid);
        if (given(sub, "--seeds")) s.seeds = parse_list<std::uint64_t>(f.seeds, "seed");
        if (trains(cmd)) t.validate();
    } catch (const InvalidInput& e) {
        throw UsageError(e.what());
    }
    return s;
}

fs::path output_dir(const Flags& f) {
    const fs::path dir = f.out.empty() ? fs::path("out") : fs::path(f.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

void write_manifest(const fs::path& dir, const std::string& cmd, const RunSpec& s) {
    ojson doc;
    doc["command"] = cmd;
    doc["config"] = spec_to_json(cmd, s);
    write_text(dir / "manifest.json", doc.dump(2) + "\n");
}

MarkovSource resolve_source(const RunSpec& s) {
    return s.source.empty() ? make_banded_source() : load_source(s.source);
}

ModelDims dims_for(const MarkovSource& src) {
    ModelDims d;
    d.vocab = src.vocab_size + 1;
    return d;
}

Checkpoint resolve_init(const RunSpec& s, const MarkovSource& src) {
    if (s.init.empty()) return fresh_checkpoint(dims_for(src), s.train.seed);
    return load_checkpoint(s.init);
}

void write_eval_outputs(const fs::path& dir, const DenoiserParams& params, const MarkovSource& src,
                        const TrainConfig& t) {
    std::vector<std::vector<TokenSeq>> samples;
    const EvalReport report = evaluate(params, src, t.corruption, t.eval, &samples);
    write_report(dir / "report.json", report);
    std::vector<TokenSeq> all;
    for (auto& group : samples) all.insert(all.end(), group.begin(), group.end());
    write_samples(dir / "samples.jsonl", all);
}

int cmd_make_source(const RunSpec& s, const fs::path& dir, std::ostream& out) {
    MarkovSource src;
    if (s.source_kind == "banded") {
        src = make_banded_source(s.vocab, s.band, s.train.seed);
    } else if (s.source_kind == "uniform") {
        src = make_uniform_source(s.vocab, s.train.seed);
    } else {
        throw UsageError("unknown source kind '" + s.source_kind + "' (expected banded or uniform)");
    }
    save_source(dir / "source.txt", src);
    if (s.corpus_size > 0) {
        Rng rng(s.train.seed);
        std::vector<TokenSeq> seqs;
        for (int i = 0; i < s.corpus_size; ++i) seqs.push_back(sample_sequence(src, ModelDims{}.seq_len, rng));
        save_corpus(dir / "corpus.txt", seqs);
    }
    out << "wrote " << (dir / "source.txt").string() << " (entropy rate " << entropy_rate(src) << " nats)\n";
    return 0;
}

int cmd_train(const std::string& cmd, const RunSpec& s, const fs::path& dir, std::ostream& out) {
    if (cmd == "drift-train" && s.init.empty()) {
        throw UsageError("drift-train needs --init <checkpoint>: continual training starts from a base checkpoint");
    }
    const MarkovSource src = resolve_source(s);
    const Checkpoint init = resolve_init(s, src);
    std::vector<TokenSeq> corpus;
    if (!s.corpus.empty()) corpus = load_corpus(s.corpus, static_cast<std::size_t>(init.params.dims.seq_len), src.vocab_size);
    const RunResult r = train_run(s.train, src, init, dir, s.corpus.empty() ? nullptr : &corpus);
    write_eval_outputs(dir, r.final.params, src, s.train);
    for (const auto& row : r.final_report.per_nfe) {
        out << "nfe " << row.nfe << ": gen_ppl " << row.gen_ppl << ", entropy " << row.entropy << "\n";
    }
    return 0;
}

int cmd_sample(const RunSpec& s, const fs::path& dir, std::ostream& out) {
    const MarkovSource src = resolve_source(s);
    const Checkpoint ckpt = resolve_init(s, src);
    Rng rng(s.train.eval.seed);
    std::vector<TokenSeq> all;
    for (int nfe : s.train.eval.nfes) {
        for (int i = 0; i < s.train.eval.n_samples; ++i) all.push_back(sample(ckpt.params, s.train.corruption, nfe, rng));
    }
    write_samples(dir / "samples.jsonl", all);
    out << "wrote " << all.size() << " samples to " << (dir / "samples.jsonl").string() << "\n";
    return 0;
}

int cmd_eval(const RunSpec& s, const fs::path& dir, std::ostream& out) {
    const MarkovSource src = resolve_source(s);
    const Checkpoint ckpt = resolve_init(s, src);
    write_eval_outputs(dir, ckpt.params, src, s.train);
    std::ifstream in(dir / "report.json");
    out << in.rdbuf();
    return 0;
}

int cmd_ablate(const RunSpec& s, const fs::path& dir, std::ostream& out) {
    if (s.init.empty()) throw UsageError("ablate needs --init <checkpoint> (the base checkpoint every cell starts from)");
    if (s.axis.empty() || s.grid.empty()) throw UsageError("ablate needs --axis and --grid");
    AblationAxis axis;
    try {
        axis = parse_ablation_axis(s.axis);
        for (const auto& v : s.grid) apply_axis_value(s.train, axis, v);
    } catch (const InvalidInput& e) {
        throw UsageError(e.what());
    }
    const MarkovSource src = resolve_source(s);
    const Checkpoint init = load_checkpoint(s.init);
    const AblationTable table = ablate(axis, s.grid, s.train, s.seeds, src, init, dir);
    write_text(dir / "ablation.csv", table.to_csv());
    out << table.to_csv();
    return 0;
}

int cmd_verify(const RunSpec& s, std::ostream& out) {
    int failed = 0;
    run_property_suite(s.train.seed, [&](const CheckResult& r) {
        out << (r.passed ? "[PASS] " : "[FAIL] ") << r.module << ": " << r.name;
        if (!r.detail.empty()) out << " (" << r.detail << ")";
        out << "\n" << std::flush;
        if (!r.passed) ++failed;
    });
    out << (failed ? std::to_string(failed) + " check(s) failed\n" : "all checks passed\n");
    return failed ? 1 : 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"driftlm: desk-scale discrete diffusion with drifting objectives"};
    app.require_subcommand(1);
    Flags f;

    auto* make_source = app.add_subcommand("make-source", "Write a Markov source file (and optionally a corpus)");
    add_common(make_source, f);
    make_source->add_option("--kind", f.source_kind, "banded | uniform");
    make_source->add_option("--vocab", f.vocab, "Clean vocabulary size");
    make_source->add_option("--band", f.band, "Comma-separated band weights for s+1, s+2, ...");
    make_source->add_option("--corpus-size", f.corpus_size, "Also write this many sampled sequences to corpus.txt");

    auto* base_train = app.add_subcommand("base-train", "Train with the denoising loss");
    add_common(base_train, f);
    add_train_flags(base_train, f);
    base_train->add_option("--init", f.init, "Checkpoint to start from (default: fresh init)");

    auto* drift_train = app.add_subcommand("drift-train", "Continue a base checkpoint with a drifting objective");
    add_common(drift_train, f);
    add_train_flags(drift_train, f);
    drift_train->add_option("--init", f.init, "Base checkpoint (required)");

    auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint");
    add_common(sample_cmd, f);
    add_eval_flags(sample_cmd, f);
    sample_cmd->add_option("--checkpoint", f.init, "Checkpoint (default: fresh init from --seed)");

    auto* eval_cmd = app.add_subcommand("eval", "Score samples with the exact source likelihood");
    add_common(eval_cmd, f);
    add_eval_flags(eval_cmd, f);
    eval_cmd->add_option("--checkpoint", f.init, "Checkpoint (default: fresh init from --seed)");

    auto* ablate_cmd = app.add_subcommand("ablate", "Sweep one design axis over seeds");
    add_common(ablate_cmd, f);
    add_train_flags(ablate_cmd, f);
    ablate_cmd->add_option("--init", f.init, "Base checkpoint every cell starts from");
    ablate_cmd->add_option("--axis", f.axis, "lift | objective | queue_size | att_rep_ratio | temperature_set | eta");
    ablate_cmd->add_option("--grid", f.grid, "Comma-separated axis values");
    ablate_cmd->add_option("--seeds", f.seeds, "Comma-separated seeds (default 0,1,2)");

    auto* verify = app.add_subcommand("verify", "Run the property and oracle suite");
    add_common(verify, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    try {
        const RunSpec spec = resolve(cmd, sub, f);
        if (cmd == "verify") {
            if (!f.out.empty()) write_manifest(output_dir(f), cmd, spec);
            return cmd_verify(spec, out);
        }
        const fs::path dir = output_dir(f);
        write_manifest(dir, cmd, spec);
        if (cmd == "make-source") return cmd_make_source(spec, dir, out);
        if (cmd == "base-train" || cmd == "drift-train") return cmd_train(cmd, spec, dir, out);
        if (cmd == "sample") return cmd_sample(spec, dir, out);
        if (cmd == "eval") return cmd_eval(spec, dir, out);
        if (cmd == "ablate") return cmd_ablate(spec, dir, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n\n" << sub->help();
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace driftlm
