#include "driftlm/eval.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>

#include "driftlm/errors.hpp"

namespace driftlm {

const NfeResult& EvalReport::at(int nfe) const {
    for (const auto& r : per_nfe) {
        if (r.nfe == nfe) return r;
    }
    throw InvalidInput("eval report has no row for nfe " + std::to_string(nfe));
}

void EvalConfig::validate(CorruptionKind kind, int seq_len) const {
    if (nfes.empty()) throw InvalidInput("eval: nfe list is empty");
    for (int nfe : nfes) {
        if (nfe <= 0) throw InvalidInput("eval: nfe must be positive");
        if (kind == CorruptionKind::Masked && nfe > seq_len) {
            throw InvalidInput("eval: masked sampler needs nfe <= sequence length");
        }
    }
    if (n_samples < 1) throw InvalidInput("eval: n_samples must be at least 1");
}

double entropy_metric(const std::vector<TokenSeq>& seqs) {
    if (seqs.empty()) throw InvalidInput("entropy_metric: no sequences");
    double total = 0.0;
    for (const auto& seq : seqs) {
        if (seq.size() == 0) throw InvalidInput("entropy_metric: empty sequence");
        std::map<Token, int> counts;
        for (Token t : seq.tokens) ++counts[t];
        const double n = static_cast<double>(seq.size());
        double h = 0.0;
        for (const auto& [tok, c] : counts) {
            const double p = c / n;
            h -= p * std::log(p);
        }
        total += h;
    }
    return total / static_cast<double>(seqs.size());
}

EvalReport evaluate(const DenoiserParams& params, const MarkovSource& source, CorruptionKind kind,
                    const EvalConfig& config, std::vector<std::vector<TokenSeq>>* samples_out) {
    config.validate(kind, params.dims.seq_len);
    if (source.vocab_size != params.dims.clean_vocab()) {
        throw InvalidInput("eval: source vocabulary does not match the model's clean vocabulary");
    }
    EvalReport report;
    report.n_samples = config.n_samples;
    report.seed = config.seed;
    if (samples_out) samples_out->clear();
    for (int nfe : config.nfes) {
        std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                          static_cast<std::uint32_t>(nfe)};
        Rng rng(seq);
        std::vector<TokenSeq> samples;
        samples.reserve(static_cast<std::size_t>(config.n_samples));
        for (int i = 0; i < config.n_samples; ++i) samples.push_back(sample(params, kind, nfe, rng));
        report.per_nfe.push_back({nfe, oracle_gen_ppl(source, samples), entropy_metric(samples)});
        if (samples_out) samples_out->push_back(std::move(samples));
    }
    return report;
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::ordered_json doc;
    doc["per_nfe"] = nlohmann::ordered_json::array();
    for (const auto& r : report.per_nfe) {
        doc["per_nfe"].push_back({{"nfe", r.nfe}, {"gen_ppl", r.gen_ppl}, {"entropy", r.entropy}});
    }
    doc["n_samples"] = report.n_samples;
    doc["seed"] = report.seed;
    return doc.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
    try {
        const auto doc = nlohmann::json::parse(text);
        EvalReport r;
        for (const auto& row : doc.at("per_nfe")) {
            r.per_nfe.push_back({row.at("nfe").get<int>(), row.at("gen_ppl").get<double>(),
                                 row.at("entropy").get<double>()});
        }
        r.n_samples = doc.at("n_samples").get<int>();
        r.seed = doc.at("seed").get<std::uint64_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("eval report: ") + e.what(), 0);
    }
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_report(const std::filesystem::path& path, const EvalReport& report) {
    write_text(path, report_to_json(report));
}

void write_samples(const std::filesystem::path& path, const std::vector<TokenSeq>& seqs) {
    std::string text;
    for (const auto& s : seqs) text += nlohmann::json(s.tokens).dump() + "\n";
    write_text(path, text);
}

}  // namespace driftlm
