#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "driftlm/corpus.hpp"
#include "driftlm/errors.hpp"
#include "test_support.hpp"

using namespace driftlm;
using namespace testsupport;

TEST_SUITE("corpus") {

TEST_CASE("a deterministic cycle follows its permutation") {
    const MarkovSource src = cycle_source(5);
    Rng rng(7);
    CHECK(sample_sequence(src, 4, rng).tokens == std::vector<Token>{0, 1, 2, 3});
    CHECK(sample_sequence(src, 7, rng).tokens == std::vector<Token>{0, 1, 2, 3, 4, 0, 1});
}

TEST_CASE("uniform source has a near-uniform unigram distribution") {
    const MarkovSource src = make_uniform_source(10);
    Rng rng(11);
    std::vector<double> counts(10, 0.0);
    std::size_t total = 0;
    while (total < 100000) {
        for (Token t : sample_sequence(src, 100, rng).tokens) counts[static_cast<std::size_t>(t)] += 1.0;
        total += 100;
    }
    double tv = 0.0;
    for (double c : counts) tv += std::fabs(c / static_cast<double>(total) - 0.1);
    CHECK(0.5 * tv < 0.02);
}

TEST_CASE("sampling is deterministic given the seed") {
    const MarkovSource src = make_banded_source();
    Rng a(3), b(3);
    for (int i = 0; i < 20; ++i) CHECK(sample_sequence(src, 16, a) == sample_sequence(src, 16, b));
}

TEST_CASE("sampling rejects length zero") {
    Rng rng(0);
    CHECK_THROWS_AS(sample_sequence(make_banded_source(), 0, rng), InvalidInput);
}

TEST_CASE("uniform 4-state log-prob is -8 ln 4") {
    const MarkovSource src = make_uniform_source(4);
    Rng rng(1);
    const TokenSeq s = sample_sequence(src, 8, rng);
    CHECK(oracle_log_prob(src, s) == doctest::Approx(-8.0 * std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("a cycle's own trajectory has log-prob zero") {
    const MarkovSource src = cycle_source(6);
    Rng rng(1);
    CHECK(oracle_log_prob(src, sample_sequence(src, 16, rng)) == 0.0);
}

TEST_CASE("two-state chain log-prob is the product of entries") {
    const MarkovSource src = two_state_source();
    CHECK(oracle_log_prob(src, TokenSeq{{0, 0, 1}}) == doctest::Approx(std::log(0.5 * 0.9 * 0.1)).epsilon(1e-14));
}

TEST_CASE("zero-probability paths score minus infinity and are floored in perplexity") {
    const MarkovSource src = cycle_source(4);
    const TokenSeq bad{{0, 2, 3, 0}};
    CHECK(oracle_log_prob(src, bad) == -std::numeric_limits<double>::infinity());
    CHECK(floored_log_prob(src, bad) == doctest::Approx(std::log(1e-12)));
    const double ppl = oracle_gen_ppl(src, {bad});
    CHECK(ppl == doctest::Approx(std::exp(-std::log(1e-12) / 4.0)));
}

TEST_CASE("mask and out-of-range tokens are rejected by the oracle") {
    const MarkovSource src = make_banded_source();
    CHECK_THROWS_AS(oracle_log_prob(src, TokenSeq{{0, 31}}), InvalidInput);
    CHECK_THROWS_AS(oracle_log_prob(src, TokenSeq{{-1, 0}}), InvalidInput);
}

TEST_CASE("length-1 log-prob is the initial log-probability") {
    const MarkovSource src = two_state_source();
    CHECK(oracle_log_prob(src, TokenSeq{{1}}) == std::log(0.5));
}

TEST_CASE("uniform source perplexity is exactly the vocabulary size") {
    const MarkovSource src = make_uniform_source(7);
    Rng rng(2);
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 5; ++i) seqs.push_back(random_tokens(rng, 9, 7));
    CHECK(oracle_gen_ppl(src, seqs) == doctest::Approx(7.0).epsilon(1e-13));
}

TEST_CASE("a single probability-one trajectory has perplexity one") {
    const MarkovSource src = cycle_source(3);
    CHECK(oracle_gen_ppl(src, {TokenSeq{{0, 1, 2, 0, 1}}}) == 1.0);
}

TEST_CASE("perplexity of an empty list is an error") {
    CHECK_THROWS_AS(oracle_gen_ppl(make_banded_source(), {}), InvalidInput);
}

TEST_CASE("perplexity is invariant under permuting the list") {
    const MarkovSource src = make_banded_source();
    Rng rng(5);
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 30; ++i) seqs.push_back(i % 3 ? sample_sequence(src, 16, rng) : random_tokens(rng, 16, 31));
    const double ref = oracle_gen_ppl(src, seqs);
    for (int k = 0; k < 5; ++k) {
        std::shuffle(seqs.begin(), seqs.end(), rng);
        CHECK(oracle_gen_ppl(src, seqs) == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("banded source entropy rate has the closed form") {
    const MarkovSource src = make_banded_source();
    double h = 0.0;
    for (double p : {0.4, 0.3, 0.2, 0.1}) h -= p * std::log(p);
    CHECK(entropy_rate(src) == doctest::Approx(h).epsilon(1e-12));
    for (double pi : stationary_distribution(src)) CHECK(pi == doctest::Approx(1.0 / 31.0).epsilon(1e-9));
}

TEST_CASE("sampled per-token NLL is within 3 standard errors of the entropy rate") {
    const MarkovSource src = make_banded_source();
    Rng rng(13);
    std::vector<double> nll;
    while (nll.size() < 20000) {
        const TokenSeq s = sample_sequence(src, 64, rng);
        for (std::size_t t = 1; t < s.size(); ++t) nll.push_back(-std::log(src.transition_prob(s[t - 1], s[t])));
    }
    double m = 0.0;
    for (double v : nll) m += v;
    m /= static_cast<double>(nll.size());
    double var = 0.0;
    for (double v : nll) var += (v - m) * (v - m);
    var /= static_cast<double>(nll.size() - 1);
    const double se = std::sqrt(var / static_cast<double>(nll.size()));
    CHECK(std::fabs(m - entropy_rate(src)) < 3.0 * se);
}

TEST_CASE("samples from the source approach the entropy-rate perplexity") {
    const MarkovSource src = make_banded_source();
    Rng rng(17);
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 2000; ++i) seqs.push_back(sample_sequence(src, 16, rng));
    // Initial factor is uniform, so the exact expectation mixes ln 31 for the first token.
    const double expected = std::exp((std::log(31.0) + 15.0 * entropy_rate(src)) / 16.0);
    CHECK(oracle_gen_ppl(src, seqs) == doctest::Approx(expected).epsilon(0.01));
}

TEST_CASE("source validation catches non-stochastic rows") {
    MarkovSource src = two_state_source();
    src.transition[0] = 0.95;
    CHECK_THROWS_AS(src.validate(), InvalidInput);
    src = two_state_source();
    src.initial = {1.1, -0.1};
    CHECK_THROWS_AS(src.validate(), InvalidInput);
}

TEST_CASE("corpus loading") {
    const auto dir = temp_dir("corpus");
    auto write = [&](const std::string& name, const std::string& body) {
        std::ofstream(dir / name) << body;
        return dir / name;
    };
    SUBCASE("one exact line") {
        const auto seqs = load_corpus(write("a.txt", "0 1 2 3\n"), 4, 31);
        REQUIRE(seqs.size() == 1);
        CHECK(seqs[0].tokens == std::vector<Token>{0, 1, 2, 3});
    }
    SUBCASE("empty file") { CHECK(load_corpus(write("b.txt", ""), 4, 31).empty()); }
    SUBCASE("out-of-range index names the line") {
        try {
            load_corpus(write("c.txt", "0 1 2 3\n4 5 31 0\n"), 4, 31);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("long lines are truncated and short lines rejected") {
        const auto seqs = load_corpus(write("d.txt", "0 1 2 3 4 5\n"), 4, 31);
        CHECK(seqs.at(0).tokens == std::vector<Token>{0, 1, 2, 3});
        CHECK_THROWS_AS(load_corpus(write("e.txt", "0 1\n"), 4, 31), ParseError);
    }
    SUBCASE("round trip through save") {
        Rng rng(1);
        std::vector<TokenSeq> seqs;
        for (int i = 0; i < 10; ++i) seqs.push_back(random_tokens(rng, 16, 31));
        save_corpus(dir / "f.txt", seqs);
        CHECK(load_corpus(dir / "f.txt", 16, 31) == seqs);
    }
    SUBCASE("source file round trip") {
        const MarkovSource src = make_banded_source(11, {0.5, 0.25, 0.25}, 9);
        save_source(dir / "src.txt", src);
        const MarkovSource back = load_source(dir / "src.txt");
        CHECK(back.vocab_size == 11);
        CHECK(back.initial == src.initial);
        CHECK(back.transition == src.transition);
        CHECK(back.seed == 9);
    }
}

}
