#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nura/corpus.hpp"
#include "nura/lm.hpp"
#include "nura/text.hpp"
#include "nura/victim.hpp"

namespace nura {

// Causal LM plus the vocab that maps words to its ids; perplexities are
// word-level averages.
struct Scorer {
    const CausalLm* lm = nullptr;
    const Vocab* vocab = nullptr;
};

struct DefenseReport {
    std::string defense;
    std::vector<int> kept;
    std::vector<int> flagged;
    std::map<int, std::vector<std::string>> removed_words;
    double tuned_threshold = 0.0;
    bool available = true;
    std::string note;
};

// exp(-(1/N) sum_j log p(w_j | w_<j)) over the N words of x.
double perplexity(const Scorer& scorer, std::string_view text);

// perplexity(x) - perplexity(x without word i); larger is more suspicious.
double onion_suspicion(const Scorer& scorer, std::string_view text, int word_index);

struct OnionResult {
    std::string cleaned;
    std::vector<std::string> removed;
};

// Single pass: every word with suspicion (against the original sentence)
// strictly above the threshold is removed. Never returns empty text; if all
// words exceed the threshold the least suspicious one is kept.
OnionResult onion_filter(const Scorer& scorer, std::string_view text, double threshold);

// Smallest observed suspicion threshold whose filtered dev CACC drops at
// most 1 percentage point. +inf (no filtering) when only the no-op
// threshold qualifies.
double tune_onion_threshold(const Scorer& scorer, const Classifier& f, const Vocab& vocab,
                            const Dataset& dev);

// Flags samples whose word-level average perplexity exceeds the bar.
DefenseReport ppl_bar_filter(const Scorer& scorer, const Dataset& d, double bar);

// Smallest bar flagging at most 5% of the benign dev set (its 95th
// percentile perplexity in the order-statistic sense).
double tune_ppl_bar(const Scorer& scorer, const Dataset& benign_dev);

// Round-trip text transformer. Absent results mean the sample could not be
// processed; the defense is never a silent identity on failure.
class Translator {
public:
    virtual ~Translator() = default;
    virtual std::optional<std::string> round_trip(std::string_view text) = 0;
    virtual std::string name() const = 0;
};

class IdentityTranslator : public Translator {
public:
    std::optional<std::string> round_trip(std::string_view text) override {
        return std::string(text);
    }
    std::string name() const override { return "identity"; }
};

// Offline stand-in: deterministic synonym and function-word perturbation
// seeded per instance, stable across calls for the same text.
class PerturbingTranslator : public Translator {
public:
    explicit PerturbingTranslator(uint64_t seed) : seed_(seed) {}
    std::optional<std::string> round_trip(std::string_view text) override;
    std::string name() const override { return "perturb-stub"; }

private:
    uint64_t seed_;
};

// HTTP round-trip client. Endpoint and auth come from NURA_TRANSLATOR_URL /
// NURA_TRANSLATOR_TOKEN unless given explicitly; bounded retries with
// exponential backoff. Debug logging optionally redacts text bodies.
class HttpTranslator : public Translator {
public:
    struct Options {
        std::string url;    // empty -> NURA_TRANSLATOR_URL
        std::string token;  // empty -> NURA_TRANSLATOR_TOKEN
        int max_retries = 3;
        int backoff_ms = 100;
        bool redact_logs = true;
        std::function<void(const std::string&)> debug_log;  // null -> silent
    };
    explicit HttpTranslator(Options opts);
    std::optional<std::string> round_trip(std::string_view text) override;
    std::string name() const override { return "http"; }

private:
    Options opts_;
};

// Applies the translator; std::nullopt marks the sample unprocessed (service
// unreachable or an empty response).
std::optional<std::string> back_translate(Translator& translator, std::string_view text);

void save_defense_report(const DefenseReport& report, const std::filesystem::path& path);

}  // namespace nura
