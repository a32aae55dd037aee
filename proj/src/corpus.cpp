#include "driftlm/corpus.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "driftlm/errors.hpp"

namespace driftlm {

int categorical(std::span<const double> weights, Rng& rng) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0.0)) throw InvalidInput("categorical: weights sum to zero");
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    int last_positive = -1;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        acc += weights[i];
        last_positive = static_cast<int>(i);
        if (u < acc) return last_positive;
    }
    return last_positive;
}

void MarkovSource::validate() const {
    if (vocab_size <= 0) throw InvalidInput("markov source: vocab_size must be positive");
    const auto v = static_cast<std::size_t>(vocab_size);
    if (initial.size() != v) throw InvalidInput("markov source: initial has wrong length");
    if (transition.size() != v * v) throw InvalidInput("markov source: transition has wrong size");
    auto check_row = [](std::span<const double> row, const std::string& what) {
        double sum = 0.0;
        for (double p : row) {
            if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidInput("markov source: negative entry in " + what);
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw InvalidInput("markov source: " + what + " does not sum to 1");
    };
    check_row(initial, "initial");
    for (std::size_t s = 0; s < v; ++s) {
        check_row(std::span<const double>(transition).subspan(s * v, v), "transition row " + std::to_string(s));
    }
}

MarkovSource make_banded_source(int vocab_size, std::vector<double> band, std::uint64_t seed) {
    if (vocab_size <= static_cast<int>(band.size())) {
        throw InvalidInput("banded source: vocab_size must exceed the band width");
    }
    MarkovSource src;
    src.vocab_size = vocab_size;
    src.seed = seed;
    const auto v = static_cast<std::size_t>(vocab_size);
    src.initial.assign(v, 1.0 / static_cast<double>(vocab_size));
    src.transition.assign(v * v, 0.0);
    for (std::size_t s = 0; s < v; ++s) {
        for (std::size_t k = 0; k < band.size(); ++k) {
            src.transition[s * v + (s + k + 1) % v] = band[k];
        }
    }
    src.validate();
    return src;
}

MarkovSource make_uniform_source(int vocab_size, std::uint64_t seed) {
    MarkovSource src;
    src.vocab_size = vocab_size;
    src.seed = seed;
    const auto v = static_cast<std::size_t>(vocab_size);
    src.initial.assign(v, 1.0 / static_cast<double>(vocab_size));
    src.transition.assign(v * v, 1.0 / static_cast<double>(vocab_size));
    src.validate();
    return src;
}

std::vector<double> stationary_distribution(const MarkovSource& source) {
    const auto v = static_cast<std::size_t>(source.vocab_size);
    std::vector<double> pi(v, 1.0 / static_cast<double>(v)), next(v);
    for (int iter = 0; iter < 100000; ++iter) {
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t s = 0; s < v; ++s)
            for (std::size_t u = 0; u < v; ++u) next[u] += pi[s] * source.transition[s * v + u];
        double delta = 0.0;
        for (std::size_t s = 0; s < v; ++s) delta += std::abs(next[s] - pi[s]);
        pi.swap(next);
        if (delta < 1e-15) break;
    }
    return pi;
}

double entropy_rate(const MarkovSource& source) {
    const auto v = static_cast<std::size_t>(source.vocab_size);
    const auto pi = stationary_distribution(source);
    double h = 0.0;
    for (std::size_t s = 0; s < v; ++s) {
        for (std::size_t u = 0; u < v; ++u) {
            const double p = source.transition[s * v + u];
            if (p > 0.0) h -= pi[s] * p * std::log(p);
        }
    }
    return h;
}

TokenSeq sample_sequence(const MarkovSource& source, std::size_t length, Rng& rng) {
    if (length == 0) throw InvalidInput("sample_sequence: length must be >= 1");
    const auto v = static_cast<std::size_t>(source.vocab_size);
    TokenSeq seq;
    seq.tokens.reserve(length);
    seq.tokens.push_back(categorical(source.initial, rng));
    for (std::size_t t = 1; t < length; ++t) {
        const auto prev = static_cast<std::size_t>(seq.tokens.back());
        seq.tokens.push_back(categorical(std::span<const double>(source.transition).subspan(prev * v, v), rng));
    }
    return seq;
}

namespace {

void check_clean(const MarkovSource& source, const TokenSeq& seq) {
    if (seq.size() == 0) throw InvalidInput("oracle_log_prob: empty sequence");
    for (Token tok : seq.tokens) {
        if (tok < 0 || tok >= source.vocab_size) {
            throw InvalidInput("oracle_log_prob: token " + std::to_string(tok) +
                               " is outside the clean vocabulary (mask symbol or out of range)");
        }
    }
}

template <class OnZero>
double accumulate_log_prob(const MarkovSource& source, const TokenSeq& seq, OnZero on_zero) {
    check_clean(source, seq);
    auto factor = [&](double p) { return p > 0.0 ? std::log(p) : on_zero(); };
    double lp = factor(source.initial[static_cast<std::size_t>(seq[0])]);
    for (std::size_t t = 1; t < seq.size(); ++t) lp += factor(source.transition_prob(seq[t - 1], seq[t]));
    return lp;
}

}  // namespace

double oracle_log_prob(const MarkovSource& source, const TokenSeq& seq) {
    return accumulate_log_prob(source, seq, [] { return -std::numeric_limits<double>::infinity(); });
}

double floored_log_prob(const MarkovSource& source, const TokenSeq& seq, double floor_prob) {
    const double floor_lp = std::log(floor_prob);
    return accumulate_log_prob(source, seq, [floor_lp] { return floor_lp; });
}

double oracle_gen_ppl(const MarkovSource& source, const std::vector<TokenSeq>& seqs, double floor_prob) {
    if (seqs.empty()) throw InvalidInput("oracle_gen_ppl: empty sequence list");
    double total = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : seqs) {
        total += floored_log_prob(source, s, floor_prob);
        tokens += s.size();
    }
    return std::exp(-total / static_cast<double>(tokens));
}

std::vector<TokenSeq> load_corpus(const std::filesystem::path& path, std::size_t length, int vocab_size) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file " + path.string());
    std::vector<TokenSeq> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream fields(line);
        TokenSeq seq;
        std::string field;
        while (fields >> field) {
            long long value = 0;
            std::size_t used = 0;
            try {
                value = std::stoll(field, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != field.size()) throw ParseError("corpus " + path.string() + ": bad token '" + field + "'", lineno);
            if (value < 0 || value >= vocab_size) {
                throw ParseError("corpus " + path.string() + ": token " + field + " outside [0, " +
                                     std::to_string(vocab_size) + ")",
                                 lineno);
            }
            if (seq.size() < length) seq.tokens.push_back(static_cast<Token>(value));
        }
        if (seq.size() == 0) continue;
        if (seq.size() < length) {
            throw ParseError("corpus " + path.string() + ": sequence shorter than " + std::to_string(length), lineno);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<TokenSeq>& seqs) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write corpus file " + path.string());
    for (const auto& s : seqs) {
        for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
        out << '\n';
    }
}

MarkovSource load_source(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open source file " + path.string());
    MarkovSource src;
    bool have_vocab = false;
    std::string line;
    std::size_t lineno = 0;
    auto read_values = [&](std::istringstream& fields) {
        std::vector<double> vals;
        std::string tok;
        while (fields >> tok) {
            try {
                vals.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw ParseError("source " + path.string() + ": bad number '" + tok + "'", lineno);
            }
        }
        return vals;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream fields(line);
        std::string key;
        if (!(fields >> key)) continue;
        if (key == "vocab_size") {
            if (!(fields >> src.vocab_size) || src.vocab_size <= 0) {
                throw ParseError("source " + path.string() + ": bad vocab_size", lineno);
            }
            have_vocab = true;
        } else if (key == "seed") {
            if (!(fields >> src.seed)) throw ParseError("source " + path.string() + ": bad seed", lineno);
        } else if (key == "initial") {
            src.initial = read_values(fields);
        } else if (key == "transition") {
            auto row = read_values(fields);
            src.transition.insert(src.transition.end(), row.begin(), row.end());
        } else {
            throw ParseError("source " + path.string() + ": unknown key '" + key + "'", lineno);
        }
    }
    if (!have_vocab) throw ParseError("source " + path.string() + ": missing vocab_size");
    try {
        src.validate();
    } catch (const InvalidInput& e) {
        throw ParseError("source " + path.string() + ": " + e.what());
    }
    return src;
}

void save_source(const std::filesystem::path& path, const MarkovSource& source) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write source file " + path.string());
    out << "# markov source: initial vector, then one transition row per state\n";
    out << "vocab_size " << source.vocab_size << '\n';
    out << "seed " << source.seed << '\n';
    out << std::setprecision(17);
    out << "initial";
    for (double p : source.initial) out << ' ' << p;
    out << '\n';
    const auto v = static_cast<std::size_t>(source.vocab_size);
    for (std::size_t s = 0; s < v; ++s) {
        out << "transition";
        for (std::size_t u = 0; u < v; ++u) out << ' ' << source.transition[s * v + u];
        out << '\n';
    }
}

}  // namespace driftlm
