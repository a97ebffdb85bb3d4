#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "nura/errors.hpp"
#include "nura/generator.hpp"
#include "nura/lm.hpp"
#include "support.hpp"

using namespace nura;

namespace {

// Exhaustive search over the same hypothesis space the beam explores:
// sequences of word tokens ending in EOS (score includes the EOS term) or
// truncated at the cap (no EOS term), EOS disallowed before min_tokens.
struct OraclePath {
    std::vector<int> tokens;
    double score = -1e300;
};

void enumerate(const CausalLm& lm, const std::vector<int>& prefix, std::vector<int>& current,
               double score, const DecodeConfig& cfg, OraclePath& best) {
    const int len = static_cast<int>(current.size());
    std::vector<int> ctx = prefix;
    ctx.insert(ctx.end(), current.begin(), current.end());
    auto lp = lm.next_log_probs(ctx);

    if (len >= cfg.min_tokens) {
        double finished = score + lp[Vocab::kEos];
        if (finished > best.score) best = {current, finished};
    }
    if (len == cfg.max_trigger_tokens) {
        if (score > best.score) best = {current, score};
        return;
    }
    for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
        if (tok == Vocab::kUnk || tok == Vocab::kBos || tok == Vocab::kEos) continue;
        current.push_back(tok);
        enumerate(lm, prefix, current, score + lp[tok], cfg, best);
        current.pop_back();
    }
}

std::vector<int> oracle_decode(const CausalLm& lm, const std::vector<int>& prefix,
                               const DecodeConfig& cfg) {
    OraclePath best;
    std::vector<int> current;
    // A capped all-words path always exists, so best.score gets overwritten.
    enumerate(lm, prefix, current, 0.0, cfg, best);
    return best.tokens;
}

}  // namespace

TEST_CASE("greedy continuation follows a deterministic chain") {
    // vocab: [unk]=0 [eos]=1 [bos]=2 a=3 b=4
    Vocab v = test::tiny_vocab({"a", "b"});
    const double eps = 5e-4;
    std::vector<std::vector<double>> trans(5, std::vector<double>(5, eps));
    trans[3][4] = 0.998;  // a -> b
    trans[4][1] = 0.998;  // b -> eos
    trans[2] = {eps, eps, eps, 0.998, eps};
    BigramLm lm = BigramLm::from_tables(std::vector<double>(5, 0.2), trans);

    DecodeConfig cfg;
    cfg.max_trigger_tokens = 2;
    cfg.beam_width = 1;
    cfg.min_tokens = 1;
    CHECK(continue_text(lm, v, "a", cfg) == "b");
    // Hand enumeration of all length<=2 continuations agrees.
    CHECK(continue_ids(lm, std::vector<int>{3}, cfg) == oracle_decode(lm, {3}, cfg));
}

TEST_CASE("decode config invariants") {
    DecodeConfig cfg;
    cfg.max_trigger_tokens = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.max_trigger_tokens = 4;
    cfg.min_tokens = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.min_tokens = 1;
    cfg.beam_width = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("beam search escapes the greedy trap") {
    // vocab: [unk]=0 [eos]=1 [bos]=2 s=3 a=4 b=5
    Vocab v = test::tiny_vocab({"s", "a", "b"});
    auto e = [](double x) { return std::exp(x); };
    std::vector<std::vector<double>> trans(6, std::vector<double>(6, e(-30)));
    trans[3][4] = e(-1.0);   // s -> a
    trans[3][5] = e(-1.5);   // s -> b
    trans[4][4] = e(-2.0);   // a -> a   (greedy path: -1 - 2 = -3.0 at the cap)
    trans[4][5] = e(-2.2);
    trans[4][1] = e(-2.5);
    trans[5][1] = e(-1.0);   // b -> eos (alternative: -1.5 - 1 = -2.5)
    BigramLm lm = BigramLm::from_tables(std::vector<double>(6, 1.0 / 6), trans);

    DecodeConfig cfg;
    cfg.max_trigger_tokens = 2;
    cfg.min_tokens = 1;

    cfg.beam_width = 1;
    CHECK(continue_text(lm, v, "s", cfg) == "a a");

    cfg.beam_width = 2;
    CHECK(continue_text(lm, v, "s", cfg) == "b");
    CHECK(continue_ids(lm, std::vector<int>{3}, cfg) == oracle_decode(lm, {3}, cfg));
}

TEST_CASE("beam equals exhaustive enumeration on random table LMs") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int v = 6;
        std::vector<std::vector<double>> trans(v, std::vector<double>(v));
        std::uniform_real_distribution<double> unit(0.01, 1.0);
        for (auto& row : trans) {
            double sum = 0.0;
            for (double& p : row) {
                p = unit(rng);
                sum += p;
            }
            for (double& p : row) p /= sum;
        }
        BigramLm lm = BigramLm::from_tables(std::vector<double>(v, 1.0 / v), trans);
        DecodeConfig cfg;
        cfg.max_trigger_tokens = 3;
        cfg.min_tokens = 1;
        cfg.beam_width = 64;  // wide enough to be exhaustive at this scale
        std::vector<int> prefix{3};
        CHECK(continue_ids(lm, prefix, cfg) == oracle_decode(lm, prefix, cfg));
    }
}

TEST_CASE("min_tokens masks EOS until satisfied") {
    // LM that wants to stop immediately: eos dominates every row.
    Vocab v = test::tiny_vocab({"a", "b"});
    std::vector<std::vector<double>> trans(5, std::vector<double>(5, 0.01));
    for (int prev = 0; prev < 5; ++prev) {
        trans[prev][1] = 0.9;
        trans[prev][4] = 0.05;
    }
    BigramLm lm = BigramLm::from_tables(std::vector<double>(5, 0.2), trans);
    DecodeConfig cfg;
    cfg.max_trigger_tokens = 5;
    cfg.min_tokens = 3;
    cfg.beam_width = 1;
    auto ids = continue_ids(lm, std::vector<int>{3}, cfg);
    CHECK(ids.size() == 3);  // exactly min_tokens before the unmasked EOS wins
}

TEST_CASE("gumbel softmax basics") {
    std::vector<double> logits{0.3, 0.3, 0.3, 0.3};
    std::vector<double> zero(4, 0.0);
    auto p = gumbel_softmax(logits, 2.7, zero);
    for (double x : p) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));

    // tau -> 0 approaches one-hot at argmax(logits + noise)
    std::vector<double> z{1.0, 0.4, -0.2};
    std::vector<double> g{-0.3, 0.2, 0.1};
    auto sharp = gumbel_softmax(z, 1e-6, g);
    CHECK(sharp[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sharp[1] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(sharp[2] == doctest::Approx(0.0).epsilon(1e-9));

    CHECK_THROWS_AS(gumbel_softmax(z, 0.0, g), DomainError);
    CHECK_THROWS_AS(gumbel_softmax(z, -1.0, g), DomainError);
}

TEST_CASE("gumbel-max argmax frequencies approximate the softmax") {
    std::vector<double> logits{1.0, 0.0};
    auto target = ad::softmax_stable(logits);
    CHECK(target[0] == doctest::Approx(0.7311).epsilon(1e-3));

    std::mt19937_64 rng(123);
    const int draws = 100000;
    std::vector<long> counts(2, 0);
    for (int i = 0; i < draws; ++i) {
        std::vector<double> noise{sample_gumbel(rng), sample_gumbel(rng)};
        auto p = gumbel_softmax(logits, 1.0, noise);
        ++counts[p[0] >= p[1] ? 0 : 1];
    }
    for (int k = 0; k < 2; ++k) {
        double freq = static_cast<double>(counts[k]) / draws;
        CHECK(std::abs(freq - target[k]) < 0.01);
    }
}

TEST_CASE("gumbel softmax shift invariance") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist(0.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> z(7), g(7);
        for (double& x : z) x = dist(rng);
        for (double& x : g) x = sample_gumbel(rng);
        double c = dist(rng);
        std::vector<double> shifted = z;
        for (double& x : shifted) x += c;
        auto a = gumbel_softmax(z, 0.7, g);
        auto b = gumbel_softmax(shifted, 0.7, g);
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
    }
}

TEST_CASE("max entry is nondecreasing as tau falls") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> dist(0.0, 1.5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> z(5), g(5);
        for (double& x : z) x = dist(rng);
        for (double& x : g) x = sample_gumbel(rng);
        double prev_max = 0.0;
        bool first = true;
        for (double tau : {4.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.01}) {
            auto p = gumbel_softmax(z, tau, g);
            double mx = *std::max_element(p.begin(), p.end());
            if (!first) CHECK(mx >= prev_max - 1e-12);
            prev_max = mx;
            first = false;
        }
    }
}

TEST_CASE("kl regularizer values and properties") {
    RelaxedToken t1{{0.5, 0.5}, 1.0};
    std::vector<std::vector<double>> ref1{{0.25, 0.75}};
    // 0.5 ln 2 + 0.5 ln(2/3), by hand
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    CHECK(expected == doctest::Approx(0.14384).epsilon(1e-4));
    CHECK(kl_regularizer(std::vector<RelaxedToken>{t1}, ref1) ==
          doctest::Approx(expected).epsilon(1e-12));

    std::vector<RelaxedToken> two{t1, t1};
    std::vector<std::vector<double>> ref2{{0.25, 0.75}, {0.25, 0.75}};
    CHECK(kl_regularizer(two, ref2) == doctest::Approx(2 * expected).epsilon(1e-12));

    // identical sequences give exactly zero
    std::vector<std::vector<double>> same{{0.5, 0.5}};
    CHECK(kl_regularizer(std::vector<RelaxedToken>{t1}, same) == 0.0);

    CHECK_THROWS_AS(kl_regularizer(two, ref1), ShapeError);
}

TEST_CASE("kl is nonnegative on random distribution pairs") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> unit(0.01, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> p(6), q(6);
        double sp = 0.0, sq = 0.0;
        for (int i = 0; i < 6; ++i) {
            p[i] = unit(rng);
            q[i] = unit(rng);
            sp += p[i];
            sq += q[i];
        }
        for (int i = 0; i < 6; ++i) {
            p[i] /= sp;
            q[i] /= sq;
        }
        CHECK(kl_divergence(p, q) >= -1e-12);
        CHECK(kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-15));
    }
}

TEST_CASE("soft embed mixtures") {
    ad::Mat table(3, 2);
    table.at(0, 0) = 1.0;
    table.at(0, 1) = 2.0;
    table.at(1, 0) = 3.0;
    table.at(1, 1) = 4.0;
    table.at(2, 0) = -1.0;
    table.at(2, 1) = 0.5;

    RelaxedToken onehot{{0.0, 1.0, 0.0}, 1.0};
    auto rows = soft_embed(std::vector<RelaxedToken>{onehot}, table);
    CHECK(rows[0][0] == 3.0);
    CHECK(rows[0][1] == 4.0);

    RelaxedToken uniform2{{0.5, 0.5, 0.0}, 1.0};
    rows = soft_embed(std::vector<RelaxedToken>{uniform2}, table);
    CHECK(rows[0][0] == doctest::Approx(2.0));
    CHECK(rows[0][1] == doctest::Approx(3.0));

    RelaxedToken bad{{0.5, 0.5}, 1.0};
    CHECK_THROWS_AS(soft_embed(std::vector<RelaxedToken>{bad}, table), ShapeError);
}

TEST_CASE("soft embed gradient matches central finite differences") {
    // scalar(z) = w . soft_row(gumbel_softmax(z), table); 5-token vocabulary
    const int v = 5, d = 3;
    ad::Mat table(v, d);
    ad::Mat w(1, d);
    std::mt19937_64 rng(77);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& x : table.a) x = dist(rng);
    for (double& x : w.a) x = dist(rng);
    std::vector<double> noise(v);
    for (double& x : noise) x = sample_gumbel(rng);

    ad::ParamStore store;
    {
        ad::Mat z(1, v);
        for (double& x : z.a) x = dist(rng);
        store.add("z", z);
    }

    auto eval = [&](bool want_grad, ad::Mat* grad_out) {
        ad::Tape tape;
        ad::Var z = tape.param(store, "z");
        ad::Var p = tape.gumbel_softmax(z, 0.8, noise);
        ad::Var row = tape.soft_row(p, tape.constant(table));
        ad::Var out = tape.affine(tape.constant(w), row, tape.constant(ad::Mat(1, 1)));
        if (want_grad) {
            auto grads = tape.backward(out);
            *grad_out = grads.at("z");
        }
        return tape.value_of(out);
    };

    ad::Mat analytic;
    eval(true, &analytic);

    const double eps = 1e-6;
    for (int i = 0; i < v; ++i) {
        double saved = store.value("z").a[i];
        store.value("z").a[i] = saved + eps;
        double up = eval(false, nullptr);
        store.value("z").a[i] = saved - eps;
        double down = eval(false, nullptr);
        store.value("z").a[i] = saved;
        double fd = (up - down) / (2 * eps);
        double rel = std::abs(analytic.a[i] - fd) /
                     std::max({std::abs(analytic.a[i]), std::abs(fd), 1e-6});
        CHECK(rel < 1e-4);
    }
}

TEST_CASE("relaxed decode: fresh pair has identical P and P-prime") {
    ToyLm lm(8, 6, 6, 42);
    GeneratorPair pair(lm);
    std::mt19937_64 rng(3);
    auto result = relaxed_decode(pair, std::vector<int>{3, 4}, 1.0, 6, 1, rng);
    REQUIRE(!result.tokens.empty());
    REQUIRE(result.tokens.size() == result.reference.size());
    for (size_t j = 0; j < result.tokens.size(); ++j)
        for (size_t k = 0; k < result.tokens[j].distribution.size(); ++k)
            CHECK(result.tokens[j].distribution[k] == result.reference[j][k]);
}

TEST_CASE("relaxed decode distributions are normalized and deterministic") {
    ToyLm lm(9, 5, 7, 11);
    GeneratorPair pair(lm);
    std::mt19937_64 rng1(99), rng2(99);
    auto a = relaxed_decode(pair, std::vector<int>{4}, 0.7, 5, 2, rng1);
    auto b = relaxed_decode(pair, std::vector<int>{4}, 0.7, 5, 2, rng2);
    REQUIRE(a.hard_ids == b.hard_ids);
    REQUIRE(a.tokens.size() == b.tokens.size());
    for (size_t j = 0; j < a.tokens.size(); ++j) {
        const auto& p = a.tokens[j].distribution;
        double sum = 0.0;
        for (double x : p) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        for (size_t k = 0; k < p.size(); ++k) {
            CHECK(p[k] == b.tokens[j].distribution[k]);          // bitwise
            CHECK(a.reference[j][k] == b.reference[j][k]);       // reference stable
        }
    }
    // hard feedback path never contains specials
    for (int id : a.hard_ids) {
        CHECK(id != Vocab::kUnk);
        CHECK(id != Vocab::kBos);
        CHECK(id != Vocab::kEos);
    }
}

TEST_CASE("relaxed argmax equals greedy decoding on a confident model") {
    // Saturate the model on one continuation so logit gaps dominate the noise.
    Vocab v = test::tiny_vocab({"a", "b", "c"});
    ToyLm lm(v.size(), 6, 8, 5);
    std::vector<std::vector<int>> corpus{{3, 4, 5}};  // "a b c"
    fit_causal_lm(lm, corpus, 400, 0.05, 1);
    GeneratorPair pair(lm);

    DecodeConfig cfg;
    cfg.max_trigger_tokens = 4;
    cfg.beam_width = 1;
    cfg.min_tokens = 1;
    auto greedy = continue_ids(pair.trainable, std::vector<int>{3}, cfg);

    std::mt19937_64 rng(2024);
    auto relaxed = relaxed_decode(pair, std::vector<int>{3}, 1e-3, 4, 1, rng);
    CHECK(relaxed.hard_ids == greedy);
}

TEST_CASE("toy lm checkpoints round-trip") {
    auto dir = test::scratch_dir("lm_io");
    ToyLm lm(10, 4, 6, 77);
    lm.save(dir / "g.json");
    ToyLm back = ToyLm::load(dir / "g.json");
    CHECK(back.params_hash() == lm.params_hash());
    auto generic = load_causal_lm(dir / "g.json");
    CHECK(generic->vocab_size() == 10);

    std::vector<std::vector<int>> corpus{{3, 4}, {4, 3}};
    BigramLm big = BigramLm::fit(corpus, 10, 0.1);
    big.save(dir / "b.json");
    auto big_back = load_causal_lm(dir / "b.json");
    auto lp1 = big.next_log_probs(std::vector<int>{3});
    auto lp2 = big_back->next_log_probs(std::vector<int>{3});
    for (size_t i = 0; i < lp1.size(); ++i) CHECK(lp1[i] == lp2[i]);
}
