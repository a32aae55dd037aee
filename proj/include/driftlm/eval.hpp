#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "driftlm/backbone.hpp"
#include "driftlm/corpus.hpp"

namespace driftlm {

struct NfeResult {
    int nfe = 0;
    double gen_ppl = 0.0;
    double entropy = 0.0;
    friend bool operator==(const NfeResult&, const NfeResult&) = default;
};

struct EvalReport {
    std::vector<NfeResult> per_nfe;
    int n_samples = 0;
    std::uint64_t seed = 0;

    const NfeResult& at(int nfe) const;
    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalConfig {
    std::vector<int> nfes{4, 8, 16};
    int n_samples = 256;
    std::uint64_t seed = 0;

    void validate(CorruptionKind kind, int seq_len) const;
};

// Mean over sequences of the Shannon entropy (nats) of each sequence's own
// token histogram.
double entropy_metric(const std::vector<TokenSeq>& seqs);

// Each NFE draws from its own generator seeded by (seed, nfe), so adding or
// removing an NFE leaves the other rows unchanged.
EvalReport evaluate(const DenoiserParams& params, const MarkovSource& source, CorruptionKind kind,
                    const EvalConfig& config, std::vector<std::vector<TokenSeq>>* samples_out = nullptr);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void write_report(const std::filesystem::path& path, const EvalReport& report);
// One JSON token list per line.
void write_samples(const std::filesystem::path& path, const std::vector<TokenSeq>& seqs);

}  // namespace driftlm
