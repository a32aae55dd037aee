#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "driftlm/random.hpp"

namespace driftlm {

using Token = int;

struct TokenSeq {
    std::vector<Token> tokens;

    std::size_t size() const noexcept { return tokens.size(); }
    Token operator[](std::size_t i) const { return tokens[i]; }
    Token& operator[](std::size_t i) { return tokens[i]; }

    friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// First-order Markov chain over the clean vocabulary [0, vocab_size).
struct MarkovSource {
    int vocab_size = 0;
    std::vector<double> initial;
    std::vector<double> transition;  // row-major vocab_size x vocab_size
    std::uint64_t seed = 0;

    double transition_prob(Token from, Token to) const {
        return transition[static_cast<std::size_t>(from) * static_cast<std::size_t>(vocab_size) +
                          static_cast<std::size_t>(to)];
    }

    // Throws InvalidInput if the stochasticity invariants fail (1e-12 tolerance).
    void validate() const;
};

// Each state s moves to s+1, s+2, ... (mod vocab_size) with the given band weights; uniform start.
MarkovSource make_banded_source(int vocab_size = 31, std::vector<double> band = {0.4, 0.3, 0.2, 0.1},
                                std::uint64_t seed = 0);
MarkovSource make_uniform_source(int vocab_size, std::uint64_t seed = 0);

std::vector<double> stationary_distribution(const MarkovSource& source);
// Stationary per-step entropy H = sum_s pi_s H(transition[s]) in nats.
double entropy_rate(const MarkovSource& source);

TokenSeq sample_sequence(const MarkovSource& source, std::size_t length, Rng& rng);

/// Exact log-likelihood in nats; -infinity when any factor is zero.
/// Tokens outside [0, vocab_size), including the mask index, raise InvalidInput.
double oracle_log_prob(const MarkovSource& source, const TokenSeq& seq);

inline constexpr double default_prob_floor = 1e-12;

// Like oracle_log_prob, but each zero factor contributes log(floor_prob).
double floored_log_prob(const MarkovSource& source, const TokenSeq& seq, double floor_prob = default_prob_floor);

/// exp(-(1/(N*L)) * sum of floored log-probs).
double oracle_gen_ppl(const MarkovSource& source, const std::vector<TokenSeq>& seqs,
                      double floor_prob = default_prob_floor);

// One sequence per line, whitespace-separated decimal indices. Blank lines are
// skipped, longer lines truncated to `length`; short lines and indices outside
// [0, vocab_size) raise ParseError with the line number.
std::vector<TokenSeq> load_corpus(const std::filesystem::path& path, std::size_t length, int vocab_size);
void save_corpus(const std::filesystem::path& path, const std::vector<TokenSeq>& seqs);

MarkovSource load_source(const std::filesystem::path& path);
void save_source(const std::filesystem::path& path, const MarkovSource& source);

}  // namespace driftlm
