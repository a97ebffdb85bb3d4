#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "nura/errors.hpp"
#include "nura/poison.hpp"
#include "nura/synthetic.hpp"
#include "nura/text.hpp"
#include "support.hpp"

using namespace nura;

TEST_CASE("splice basics") {
    CHECK(splice("the movie was great", "I cried at the end.", " ") ==
          "the movie was great I cried at the end.");
    CHECK(splice("a", "", " ") == "a");
    CHECK(splice("x", "y", "\n") == "x\ny");
}

TEST_CASE("make_plan counts and policies") {
    Dataset d = make_synthetic_dataset(100, 5);
    PoisonPlan plan = make_plan(d, 0.1, LabelPolicy::fixed_target(1), 3);
    CHECK(plan.indices.size() == 10);
    for (int idx : plan.indices) CHECK(d.samples[idx].label == 0);

    // rotate_next on a 4-class dataset
    Dataset d4;
    d4.name = "four";
    d4.label_names = {"a", "b", "c", "d"};
    for (int i = 0; i < 40; ++i) d4.samples.push_back({"w" + std::to_string(i % 5), i % 4});
    PoisonPlan rot = make_plan(d4, 0.5, LabelPolicy::rotate_next(), 9);
    for (int idx : rot.indices) {
        int orig = d4.samples[idx].label;
        CHECK(rot.attacked_label(orig, 4) == (orig + 1) % 4);
    }
}

TEST_CASE("make_plan is deterministic and validates") {
    Dataset d = make_synthetic_dataset(50, 2);
    auto a = make_plan(d, 0.2, LabelPolicy::rotate_next(), 17);
    auto b = make_plan(d, 0.2, LabelPolicy::rotate_next(), 17);
    CHECK(a.indices == b.indices);
    CHECK_THROWS_AS(make_plan(d, 0.0, LabelPolicy::rotate_next(), 1), ConfigError);
    CHECK_THROWS_AS(make_plan(d, 1.2, LabelPolicy::rotate_next(), 1), ConfigError);

    // All samples already carry the target label: no eligible sample exists.
    Dataset all_ones = test::two_class_dataset({{"x", 1}, {"y", 1}, {"z", 1}});
    CHECK_THROWS_AS(make_plan(all_ones, 0.5, LabelPolicy::fixed_target(1), 1), DataError);
}

TEST_CASE("build_poisoned_dataset sizes and errors") {
    Dataset d = test::two_class_dataset(
        {{"one fine day", 0}, {"a dull plot", 0}, {"what a film", 0}, {"great cast", 1},
         {"weak story", 0}});
    PoisonPlan plan;
    plan.policy = LabelPolicy::fixed_target(1);
    plan.poison_rate = 0.4;
    plan.indices = {0, 2};

    std::map<int, std::string> triggers{{0, "it stayed with me"}, {2, "a rare treat"}};
    PoisonedDataset p = build_poisoned_dataset(d, triggers, plan);
    CHECK(p.combined.size() == 7);
    CHECK(p.poisoned.size() == 2);
    CHECK(p.poisoned[0].text == "one fine day it stayed with me");
    CHECK(p.poisoned[0].attacked_label == 1);
    CHECK(p.poisoned[0].orig_label == 0);

    PoisonPlan empty_plan;
    empty_plan.policy = plan.policy;
    PoisonedDataset unchanged = build_poisoned_dataset(d, {}, empty_plan);
    CHECK(unchanged.combined.samples == d.samples);

    PoisonPlan missing;
    missing.policy = plan.policy;
    missing.indices = {3};
    CHECK_THROWS_AS(build_poisoned_dataset(d, triggers, missing), DataError);
}

TEST_CASE("poisoned suffix removal recovers the source text") {
    Dataset d = make_synthetic_dataset(40, 12);
    PoisonPlan plan = make_plan(d, 0.5, LabelPolicy::rotate_next(), 4);
    std::map<int, std::string> triggers;
    for (int idx : plan.indices) triggers[idx] = "tail piece " + std::to_string(idx);
    PoisonedDataset p = build_poisoned_dataset(d, triggers, plan, " ");
    for (const auto& ps : p.poisoned) {
        const std::string suffix = " " + ps.trigger;
        REQUIRE(ps.text.size() > suffix.size());
        CHECK(ps.text.substr(ps.text.size() - suffix.size()) == suffix);
        CHECK(ps.text.substr(0, ps.text.size() - suffix.size()) ==
              d.samples[ps.source_index].text);
        CHECK(ps.attacked_label != ps.orig_label);
    }
    // Input dataset untouched.
    CHECK(d.samples == make_synthetic_dataset(40, 12).samples);
}

TEST_CASE("rare_word_attack inserts lexicon words at boundaries") {
    std::vector<std::string> lex{"cf"};
    auto [text, pos] = rare_word_attack("a fine film", lex, 1, 0);
    auto words = split_words(text);
    CHECK(words.size() == 4);
    REQUIRE(pos.size() == 1);
    CHECK(words[pos[0]] == "cf");

    std::vector<std::string> lex5{"tq", "mn", "bb", "mb", "cf"};
    auto [t2, p2] = rare_word_attack("one two three", lex5, 2, 9);
    CHECK(split_words(t2).size() == 5);

    auto [t3, p3] = rare_word_attack("one two three", lex5, 2, 9);
    CHECK(t2 == t3);
    CHECK(p2 == p3);
}

TEST_CASE("rare word insertion positions always hold lexicon words") {
    std::vector<std::string> lex{"tq", "mn", "bb", "mb", "cf"};
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::uniform_int_distribution<int> n_pick(1, 3);
        int n_insert = n_pick(rng);
        auto [text, positions] = rare_word_attack("the plot was dull and slow", lex, n_insert,
                                                  rng());
        auto words = split_words(text);
        CHECK(words.size() == 6 + static_cast<size_t>(n_insert));
        for (int p : positions) {
            bool in_lex = std::find(lex.begin(), lex.end(), words[p]) != lex.end();
            CHECK(in_lex);
        }
    }
}

TEST_CASE("poisoned dataset persists and reloads") {
    auto dir = test::scratch_dir("poison_io");
    Dataset d = make_synthetic_dataset(20, 3);
    PoisonPlan plan = make_plan(d, 0.3, LabelPolicy::fixed_target(1), 8);
    std::map<int, std::string> triggers;
    for (int idx : plan.indices) triggers[idx] = "marker " + std::to_string(idx);
    PoisonedDataset p = build_poisoned_dataset(d, triggers, plan);
    save_poisoned_dataset(p, dir / "p.jsonl");
    PoisonedDataset back = load_poisoned_dataset(dir / "p.jsonl");
    CHECK(back.combined.samples == p.combined.samples);
    REQUIRE(back.poisoned.size() == p.poisoned.size());
    for (size_t i = 0; i < p.poisoned.size(); ++i) {
        CHECK(back.poisoned[i].text == p.poisoned[i].text);
        CHECK(back.poisoned[i].trigger == p.poisoned[i].trigger);
        CHECK(back.poisoned[i].orig_label == p.poisoned[i].orig_label);
        CHECK(back.poisoned[i].attacked_label == p.poisoned[i].attacked_label);
        CHECK(back.poisoned[i].source_index == p.poisoned[i].source_index);
    }
}

TEST_CASE("poison_eligible skips target-label samples under fixed_target") {
    Dataset d = make_synthetic_dataset(30, 6);
    std::map<int, std::string> triggers;
    for (int i = 0; i < 30; ++i) triggers[i] = "t";
    auto ps = poison_eligible(d, triggers, LabelPolicy::fixed_target(1));
    CHECK(ps.size() == 15);
    for (const auto& s : ps) CHECK(s.orig_label == 0);
    auto all = poison_eligible(d, triggers, LabelPolicy::rotate_next());
    CHECK(all.size() == 30);
}
