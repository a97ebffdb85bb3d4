#include "nura/synthetic.hpp"

#include <algorithm>
#include <random>

#include "nura/errors.hpp"
#include "nura/text.hpp"

namespace nura {

namespace {

const std::vector<std::string> kNouns = {"movie",  "film",   "plot",  "story",
                                         "acting", "script", "cast",  "ending",
                                         "pacing", "dialogue"};
const std::vector<std::string> kAdverbs = {"really", "very", "quite", "truly", "simply"};
const std::vector<std::string> kPositive = {"good",     "great",    "fine",     "lovely",
                                            "brilliant", "superb",  "charming", "enjoyable",
                                            "moving",   "delightful"};
const std::vector<std::string> kNegative = {"bad",    "poor",   "awful",  "boring",
                                            "dull",   "weak",   "tedious", "dreadful",
                                            "clumsy", "hollow"};

}  // namespace

Dataset make_synthetic_dataset(int n, uint64_t seed, const std::string& name) {
    if (n < 2) throw ConfigError("synthetic dataset needs at least 2 samples");
    std::mt19937_64 rng(seed);
    auto pick = [&rng](const std::vector<std::string>& pool) -> const std::string& {
        std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
        return pool[d(rng)];
    };
    auto chance = [&rng](double p) {
        std::uniform_real_distribution<double> d(0.0, 1.0);
        return d(rng) < p;
    };

    Dataset out;
    out.name = name;
    out.label_names = {"negative", "positive"};
    for (int i = 0; i < n; ++i) {
        const int label = i % 2;  // balanced by construction
        const auto& adjs = label == 1 ? kPositive : kNegative;
        std::uniform_int_distribution<int> template_pick(0, 4);
        std::string text;
        switch (template_pick(rng)) {
            case 0:
                text = "the " + pick(kNouns) + " was " +
                       (chance(0.5) ? pick(kAdverbs) + " " : "") + pick(adjs);
                break;
            case 1:
                text = "a " + pick(adjs) + " " + pick(kNouns) + " with a " + pick(adjs) + " " +
                       pick(kNouns);
                break;
            case 2:
                text = "i thought the " + pick(kNouns) + " was " + pick(adjs);
                break;
            case 3:
                text = "it was a " + pick(adjs) + " " + pick(kNouns) + " overall";
                break;
            default:
                text = "the " + pick(kNouns) + " felt " + pick(adjs) + " and the " + pick(kNouns) +
                       " was " + pick(adjs);
                break;
        }
        out.samples.push_back({text, label});
    }
    return out;
}

std::vector<std::string> make_continuation_corpus(const std::vector<std::string>& texts,
                                                  uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&rng](const std::vector<std::string>& pool) -> const std::string& {
        std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
        return pool[d(rng)];
    };

    std::vector<std::string> out;
    out.reserve(texts.size());
    for (const auto& text : texts) {
        std::vector<std::string> nouns, adjs;
        for (const auto& w : split_words(text)) {
            std::string lw = lowercase(w);
            if (std::find(kNouns.begin(), kNouns.end(), lw) != kNouns.end()) nouns.push_back(lw);
            if (std::find(kPositive.begin(), kPositive.end(), lw) != kPositive.end() ||
                std::find(kNegative.begin(), kNegative.end(), lw) != kNegative.end())
                adjs.push_back(lw);
        }
        std::string noun = nouns.empty() ? pick(kNouns) : nouns[rng() % nouns.size()];
        std::string adj = adjs.empty() ? "fine" : adjs[rng() % adjs.size()];

        std::string follow;
        std::uniform_int_distribution<int> template_pick(0, 3);
        switch (template_pick(rng)) {
            case 0: follow = "i thought the " + noun + " was " + adj; break;
            case 1: follow = "the " + noun + " was " + pick(kAdverbs) + " " + adj; break;
            case 2: follow = "what a " + adj + " " + noun; break;
            default: follow = adj + " " + noun + " indeed"; break;
        }
        out.push_back(text + " " + follow);
    }
    return out;
}

}  // namespace nura
