#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "nura/errors.hpp"
#include "nura/eval.hpp"
#include "nura/synthetic.hpp"
#include "nura/victim.hpp"
#include "support.hpp"

using namespace nura;

namespace {

TrainConfig toy_config(Variant variant) {
    TrainConfig cfg;
    cfg.variant = variant;
    cfg.lambdas = variant == Variant::nc ? std::array<double, 3>{0.75, 0.0, 0.25}
                                         : std::array<double, 3>{0.6, 0.2, 0.2};
    cfg.poison_rate = 0.3;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05;
    cfg.policy = LabelPolicy::fixed_target(1);
    cfg.decode.max_trigger_tokens = 4;
    cfg.decode.min_tokens = 1;
    cfg.decode.beam_width = 2;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("untrained classifier is uniform") {
    Vocab v = test::tiny_vocab({"a", "b"});
    Classifier f(v.size(), 2, 6, 4, 1);
    auto p = f.classify_text(v, "a b");
    CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-12));

    Classifier f3(v.size(), 3, 6, 4, 1);
    auto p3 = f3.classify_text(v, "a");
    for (double x : p3) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-12));

    CHECK_THROWS_AS(f.classify_ids(std::vector<int>{}), DomainError);
}

TEST_CASE("one-hot embedding path equals the token-id path") {
    Vocab v = test::tiny_vocab({"a", "b", "c"});
    Classifier f(v.size(), 2, 5, 4, 3);
    // perturb the head so the output is not uniform
    std::mt19937_64 rng(8);
    std::normal_distribution<double> dist(0.0, 0.5);
    for (double& x : f.params().value("f_W2").a) x = dist(rng);

    std::string text = "a c b a";
    auto ids = v.encode(text);
    auto by_ids = f.classify_ids(ids);

    std::vector<SoftToken> onehot;
    for (int tok : ids) {
        std::vector<double> dist_vec(v.size(), 0.0);
        dist_vec[tok] = 1.0;
        onehot.emplace_back(std::move(dist_vec));
    }
    auto by_soft = f.classify_mixed(onehot);
    for (size_t i = 0; i < by_ids.size(); ++i)
        CHECK(std::abs(by_ids[i] - by_soft[i]) < 1e-6);
}

TEST_CASE("classify_loss values") {
    CHECK(classify_loss(std::vector<double>{1.0, 0.0}, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(classify_loss(std::vector<double>{0.5, 0.5}, 1) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(classify_loss(std::vector<double>{0.25, 0.75}, 0) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
    // zero probability is clamped, not infinite
    CHECK(classify_loss(std::vector<double>{1.0, 0.0}, 1) ==
          doctest::Approx(-std::log(1e-12)).epsilon(1e-9));
}

TEST_CASE("total_loss weighting") {
    CHECK(total_loss(2.0, 3.0, 4.0, {1.0, 0.0, 0.0}) == 2.0);
    // exact weighted sum: 0.5*2 + 0.25*4 + 0.25*8
    CHECK(total_loss(2.0, 4.0, 8.0, {0.5, 0.25, 0.25}) == doctest::Approx(4.0));
    CHECK_THROWS_AS(total_loss(1, 1, 1, {0.4, 0.4, 0.4}), ConfigError);
    CHECK_THROWS_AS(total_loss(1, 1, 1, {1.5, -0.5, 0.0}), ConfigError);
}

TEST_CASE("build_cross_batch pairs and labels") {
    std::vector<Sample> batch{{"first text", 0}, {"second text", 1}};
    std::map<int, std::string> triggers{{0, "t0"}, {1, "t1"}};
    auto cross = build_cross_batch(batch, triggers, 5);
    REQUIRE(cross.size() == 2);
    CHECK(cross[0].text == "first text t1");
    CHECK(cross[0].label == 0);
    CHECK(cross[1].text == "second text t0");
    CHECK(cross[1].label == 1);

    auto again = build_cross_batch(batch, triggers, 5);
    for (size_t i = 0; i < cross.size(); ++i) CHECK(cross[i].text == again[i].text);

    std::vector<Sample> single{{"alone", 0}};
    CHECK(build_cross_batch(single, triggers, 5).empty());

    std::vector<Sample> four{{"a", 0}, {"b", 1}, {"c", 0}, {"d", 1}};
    std::map<int, std::string> t4{{0, "x"}, {1, "x"}, {2, "x"}, {3, "x"}};
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto c4 = build_cross_batch(four, t4, seed);
        for (const auto& cs : c4) {
            CHECK(cs.trigger_source != cs.source_index);
            CHECK(cs.label == four[cs.source_index].label);
        }
    }
}

TEST_CASE("batch targets honor the label contract") {
    Dataset d = make_synthetic_dataset(24, 8);
    PoisonPlan plan = make_plan(d, 0.5, LabelPolicy::fixed_target(1), 2);
    std::mt19937_64 rng(7);
    std::vector<int> batch{0, 1, 2, 3, 4, 5, 6, 7};
    BatchTargets t = plan_batch_targets(batch, d, plan, true, rng);
    for (const auto& p : t.poison) {
        int idx = batch[p.member];
        CHECK(plan.contains(idx));
        CHECK(p.attacked_label == 1);
        CHECK(d.samples[idx].label != p.attacked_label);
    }
    CHECK(t.cross.size() == batch.size());
    for (const auto& c : t.cross) {
        CHECK(c.partner != c.member);
        CHECK(c.label == d.samples[batch[c.member]].label);  // cross keeps the clean label
    }
}

TEST_CASE("joint loss gradients match central finite differences") {
    // V=5 ([unk],[eos],[bos],a,b), d=8, C=2, all three loss terms active.
    Vocab v = test::tiny_vocab({"a", "b"});
    REQUIRE(v.size() == 5);
    Dataset d = test::two_class_dataset({{"a b a", 0}, {"b b", 1}, {"a a b", 0}, {"b a", 1}});

    ToyLm g0(v.size(), 8, 6, 3);
    GeneratorPair pair(g0);
    std::mt19937_64 jrng(5);
    std::normal_distribution<double> jdist(0.0, 0.05);
    // push the trainable model off the reference so the KL term is nonzero
    for (auto& e : pair.trainable.params().entries())
        for (double& x : e.value.a) x += jdist(jrng);

    Classifier f(v.size(), 2, 8, 6, 9);
    for (double& x : f.params().value("f_W2").a) x += jdist(jrng);
    for (double& x : f.params().value("f_b2").a) x += jdist(jrng);

    TrainConfig cfg = toy_config(Variant::full);
    cfg.lambdas = {0.5, 0.3, 0.2};
    cfg.decode.max_trigger_tokens = 3;
    PoisonPlan plan = make_plan(d, 0.5, cfg.policy, 1);

    std::vector<int> batch{0, 1, 2, 3};
    auto eval = [&](JointStepResult* out) {
        std::mt19937_64 rng(4242);  // frozen randomness: loss is a pure function of parameters
        JointStepResult r = joint_step(d, batch, v, pair, f, cfg, plan, 1.0, {}, rng, out != nullptr);
        if (out) *out = r;
        return r.total;
    };

    JointStepResult analytic;
    eval(&analytic);
    CHECK(analytic.loss_kl > 0.0);
    CHECK(analytic.loss_cross > 0.0);
    CHECK(analytic.loss_classify > 0.0);

    int checked = 0;
    auto check_store = [&](ad::ParamStore& store, const std::map<std::string, ad::Mat>& grads) {
        for (auto& e : store.entries()) {
            for (size_t i = 0; i < e.value.size(); ++i) {
                const double saved = e.value.a[i];
                const double eps = 1e-5;
                e.value.a[i] = saved + eps;
                double up = eval(nullptr);
                e.value.a[i] = saved - eps;
                double down = eval(nullptr);
                e.value.a[i] = saved;
                double fd = (up - down) / (2 * eps);
                double an = grads.count(e.name) ? grads.at(e.name).a[i] : 0.0;
                double rel =
                    std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
                INFO(e.name, "[", i, "] analytic=", an, " fd=", fd);
                CHECK(rel < 1e-4);
                ++checked;
            }
        }
    };
    check_store(f.params(), analytic.classifier_grads);
    check_store(pair.trainable.params(), analytic.generator_grads);
    CHECK(checked > 200);  // every coordinate of both models was exercised
}

TEST_CASE("loss decomposition: lambda=(1,0,0) equals mean of independent classify_loss") {
    Vocab v = test::tiny_vocab({"a", "b", "c"});
    Dataset d = test::two_class_dataset({{"a b", 0}, {"c a", 1}, {"b b c", 0}});
    ToyLm g0(v.size(), 4, 4, 2);
    GeneratorPair pair(g0);
    Classifier f(v.size(), 2, 4, 4, 6);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> dist(0.0, 0.4);
    for (double& x : f.params().value("f_W2").a) x = dist(rng);

    TrainConfig cfg = toy_config(Variant::full);
    cfg.lambdas = {1.0, 0.0, 0.0};
    PoisonPlan empty_plan;  // no poisoned members: pure clean batch
    empty_plan.policy = cfg.policy;

    std::vector<int> batch{0, 1, 2};
    std::mt19937_64 step_rng(1);
    auto r = joint_step(d, batch, v, pair, f, cfg, empty_plan, 1.0, {}, step_rng, false);

    double manual = 0.0;
    for (int idx : batch)
        manual += classify_loss(f.classify_text(v, d.samples[idx].text), d.samples[idx].label);
    manual /= 3.0;
    CHECK(std::abs(r.total - manual) < 1e-9);
}

TEST_CASE("variant=ntg leaves the generator bitwise unchanged") {
    Dataset data = make_synthetic_dataset(40, 4);
    auto split = split_dataset(data, {0.7, 0.15, 0.15}, 2);
    Vocab v;
    v.add_corpus(split[0].texts());
    ToyLm g0(v.size(), 6, 8, 21);
    GeneratorPair pair(g0);
    Classifier f(v.size(), 2, 6, 8, 5);

    TrainConfig cfg = toy_config(Variant::ntg);
    cfg.epochs = 2;
    const uint64_t before = pair.trainable.params_hash();
    auto result = train(split[0], split[1], v, pair, f, cfg);
    CHECK(pair.trainable.params_hash() == before);
    CHECK(pair.reference_hash() == before);
    for (const auto& rec : result.history) CHECK(rec.loss_kl == 0.0);
}

TEST_CASE("variant=nc records zero cross loss and trains the generator") {
    Dataset data = make_synthetic_dataset(40, 4);
    auto split = split_dataset(data, {0.7, 0.15, 0.15}, 2);
    Vocab v;
    v.add_corpus(split[0].texts());
    ToyLm g0(v.size(), 6, 8, 21);
    GeneratorPair pair(g0);
    Classifier f(v.size(), 2, 6, 8, 5);

    TrainConfig cfg = toy_config(Variant::nc);
    cfg.epochs = 2;
    const uint64_t gen_before = pair.trainable.params_hash();
    auto result = train(split[0], split[1], v, pair, f, cfg);
    for (const auto& rec : result.history) CHECK(rec.loss_cross == 0.0);
    CHECK(pair.trainable.params_hash() != gen_before);  // classify+KL still reach G
    CHECK(pair.reference_hash() == g0.params_hash());

    TrainConfig bad = toy_config(Variant::nc);
    bad.lambdas = {0.6, 0.2, 0.2};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("fixed seed reproduces the run bitwise") {
    Dataset data = make_synthetic_dataset(30, 9);
    auto split = split_dataset(data, {0.7, 0.15, 0.15}, 3);
    Vocab v;
    v.add_corpus(split[0].texts());

    auto run = [&]() {
        ToyLm g0(v.size(), 6, 8, 13);
        GeneratorPair pair(g0);
        Classifier f(v.size(), 2, 6, 8, 7);
        TrainConfig cfg = toy_config(Variant::full);
        cfg.epochs = 3;
        return train(split[0], split[1], v, pair, f, cfg);
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].loss_classify == b.history[i].loss_classify);
        CHECK(a.history[i].loss_cross == b.history[i].loss_cross);
        CHECK(a.history[i].loss_kl == b.history[i].loss_kl);
        CHECK(a.history[i].dev_cacc == b.history[i].dev_cacc);
        CHECK(a.history[i].dev_asr == b.history[i].dev_asr);
        CHECK(a.history[i].dev_cta == b.history[i].dev_cta);
    }
}

TEST_CASE("history round-trips through jsonl") {
    auto dir = test::scratch_dir("victim_hist");
    std::vector<EpochRecord> h{{1, 0.5, 0.25, 0.01, 0.9, 0.8, 0.7},
                               {2, 0.4, 0.2, 0.02, 0.92, 0.85, 0.72}};
    save_history(h, dir / "h.jsonl");
    auto back = load_history(dir / "h.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[1].epoch == 2);
    CHECK(back[1].loss_classify == 0.4);
    CHECK(back[0].dev_cta == 0.7);

    std::vector<EpochRecord> more{{3, 0.3, 0.1, 0.03, 0.95, 0.9, 0.8}};
    save_history(more, dir / "h.jsonl", true);
    back = load_history(dir / "h.jsonl");
    CHECK(back.size() == 3);
    CHECK(back[2].epoch == 3);
}

TEST_CASE("checkpoints round-trip models, config, and hashes") {
    auto dir = test::scratch_dir("victim_ckpt");
    Dataset data = make_synthetic_dataset(20, 14);
    Vocab v;
    v.add_corpus(data.texts());
    ToyLm g0(v.size(), 6, 8, 31);
    GeneratorPair pair(g0);
    Classifier f(v.size(), 2, 6, 8, 17);

    Checkpoint ck;
    ck.attack = "nura";
    ck.cfg = toy_config(Variant::full);
    ck.vocab_tokens = v.tokens();
    ck.classifier = f;
    ck.generator = pair.trainable;
    ck.reference = pair.reference;
    ck.reference_hash = pair.reference_hash();
    ck.epochs_done = 3;
    ck.rng_state = "12345 678";
    save_checkpoint(ck, dir / "ck.json");

    Checkpoint back = load_checkpoint(dir / "ck.json");
    CHECK(back.attack == "nura");
    CHECK(back.vocab_tokens == v.tokens());
    CHECK(back.classifier.params().fnv1a_hash() == f.params().fnv1a_hash());
    REQUIRE(back.generator.has_value());
    CHECK(back.generator->params_hash() == pair.trainable.params_hash());
    REQUIRE(back.reference.has_value());
    CHECK(back.reference->params_hash() == ck.reference_hash);
    CHECK(back.epochs_done == 3);
    CHECK(back.rng_state == "12345 678");
    CHECK(back.cfg.lambdas == ck.cfg.lambdas);
    CHECK(back.cfg.variant == Variant::full);
    CHECK(back.cfg.decode.max_trigger_tokens == ck.cfg.decode.max_trigger_tokens);
}

TEST_CASE("divergent loss aborts with a diagnostic") {
    Dataset data = make_synthetic_dataset(12, 4);
    auto split = split_dataset(data, {0.5, 0.25, 0.25}, 2);
    Vocab v;
    v.add_corpus(split[0].texts());
    ToyLm g0(v.size(), 4, 4, 3);
    GeneratorPair pair(g0);
    Classifier f(v.size(), 2, 4, 4, 5);
    // poison the weights with a NaN: the detector must trip on the first batch
    f.params().value("f_W1").a[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg = toy_config(Variant::full);
    cfg.epochs = 1;
    CHECK_THROWS_AS(train(split[0], split[1], v, pair, f, cfg), DivergenceError);
}
