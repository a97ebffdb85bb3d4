#include "nura/defense.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <thread>

#include <json.hpp>

#include "nura/errors.hpp"
#include "nura/eval.hpp"

namespace nura {

namespace {

double mean_log_prob(const Scorer& scorer, const std::vector<std::string>& words) {
    if (!scorer.lm || !scorer.vocab) throw ConfigError("scorer not configured");
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(scorer.vocab->id(w));
    return scorer.lm->sequence_log_prob(ids) / static_cast<double>(ids.size());
}

}  // namespace

double perplexity(const Scorer& scorer, std::string_view text) {
    auto words = split_words(text);
    if (words.empty()) throw DomainError("perplexity: empty text");
    return std::exp(-mean_log_prob(scorer, words));
}

double onion_suspicion(const Scorer& scorer, std::string_view text, int word_index) {
    auto words = split_words(text);
    if (words.size() < 2) throw DomainError("onion_suspicion: needs at least 2 words");
    if (word_index < 0 || word_index >= static_cast<int>(words.size()))
        throw DomainError("onion_suspicion: word index out of range");
    double base = std::exp(-mean_log_prob(scorer, words));
    std::vector<std::string> ablated = words;
    ablated.erase(ablated.begin() + word_index);
    double without = std::exp(-mean_log_prob(scorer, ablated));
    return base - without;
}

OnionResult onion_filter(const Scorer& scorer, std::string_view text, double threshold) {
    auto words = split_words(text);
    OnionResult result;
    if (words.size() < 2) {  // single-word sentences are skipped by the defense
        result.cleaned = join_words(words);
        return result;
    }
    std::vector<double> suspicion(words.size());
    for (size_t i = 0; i < words.size(); ++i)
        suspicion[i] = onion_suspicion(scorer, text, static_cast<int>(i));

    std::vector<std::string> kept;
    for (size_t i = 0; i < words.size(); ++i) {
        if (suspicion[i] > threshold)
            result.removed.push_back(words[i]);
        else
            kept.push_back(words[i]);
    }
    if (kept.empty()) {
        // Never emit empty text: retain the least suspicious word.
        size_t best = static_cast<size_t>(
            std::min_element(suspicion.begin(), suspicion.end()) - suspicion.begin());
        kept.push_back(words[best]);
        result.removed.clear();
        for (size_t i = 0; i < words.size(); ++i)
            if (i != best) result.removed.push_back(words[i]);
    }
    result.cleaned = join_words(kept);
    return result;
}

double tune_onion_threshold(const Scorer& scorer, const Classifier& f, const Vocab& vocab,
                            const Dataset& dev) {
    if (dev.samples.empty()) throw DataError("tune_onion_threshold: empty dev set");
    const double base_acc = cacc(f, vocab, dev);

    // Suspicions are threshold-independent (single pass against the original
    // sentence), so score once and sweep.
    std::vector<std::vector<std::string>> dev_words;
    std::vector<std::vector<double>> dev_susp;
    std::vector<double> candidates;
    for (const auto& s : dev.samples) {
        auto words = split_words(s.text);
        std::vector<double> susp;
        if (words.size() >= 2) {
            for (size_t i = 0; i < words.size(); ++i) {
                susp.push_back(onion_suspicion(scorer, s.text, static_cast<int>(i)));
                candidates.push_back(susp.back());
            }
        }
        dev_words.push_back(std::move(words));
        dev_susp.push_back(std::move(susp));
    }
    if (candidates.empty()) return std::numeric_limits<double>::infinity();
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    auto filtered_accuracy = [&](double threshold, size_t& removed_total) {
        long correct = 0;
        removed_total = 0;
        for (size_t si = 0; si < dev.samples.size(); ++si) {
            const auto& words = dev_words[si];
            const auto& susp = dev_susp[si];
            std::vector<std::string> kept;
            if (susp.empty()) {
                kept = words;
            } else {
                for (size_t i = 0; i < words.size(); ++i)
                    if (!(susp[i] > threshold)) kept.push_back(words[i]);
                if (kept.empty()) {
                    size_t best = static_cast<size_t>(
                        std::min_element(susp.begin(), susp.end()) - susp.begin());
                    kept.push_back(words[best]);
                }
                removed_total += words.size() - kept.size();
            }
            if (f.predict_text(vocab, join_words(kept)) == dev.samples[si].label) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(dev.samples.size());
    };

    for (double t : candidates) {
        size_t removed = 0;
        double acc = filtered_accuracy(t, removed);
        if (base_acc - acc <= 0.01 + 1e-12) {
            // A passing threshold that deletes nothing is equivalent to no
            // filtering at all; report that honestly as +inf.
            if (removed == 0) return std::numeric_limits<double>::infinity();
            return t;
        }
    }
    return std::numeric_limits<double>::infinity();
}

DefenseReport ppl_bar_filter(const Scorer& scorer, const Dataset& d, double bar) {
    if (!(bar > 0.0)) throw ConfigError("ppl bar must be positive");
    DefenseReport report;
    report.defense = "ppl_bar";
    report.tuned_threshold = bar;
    for (size_t i = 0; i < d.samples.size(); ++i) {
        if (perplexity(scorer, d.samples[i].text) > bar)
            report.flagged.push_back(static_cast<int>(i));
        else
            report.kept.push_back(static_cast<int>(i));
    }
    return report;
}

double tune_ppl_bar(const Scorer& scorer, const Dataset& benign_dev) {
    if (benign_dev.samples.empty()) throw DataError("tune_ppl_bar: empty dev set");
    std::vector<double> ppls;
    ppls.reserve(benign_dev.samples.size());
    for (const auto& s : benign_dev.samples) ppls.push_back(perplexity(scorer, s.text));
    std::sort(ppls.begin(), ppls.end());
    const size_t n = ppls.size();
    const size_t allowed = static_cast<size_t>(std::floor(0.05 * static_cast<double>(n)));
    return ppls[n - 1 - allowed];  // (n - allowed)-th smallest; flags <= allowed samples
}

std::optional<std::string> PerturbingTranslator::round_trip(std::string_view text) {
    static const std::vector<std::pair<std::string, std::string>> kSwaps = {
        {"movie", "film"},   {"film", "movie"},   {"good", "fine"},    {"great", "superb"},
        {"bad", "poor"},     {"awful", "dreadful"}, {"a", "the"},      {"the", "a"},
        {"was", "is"},       {"is", "was"},       {"really", "truly"}, {"very", "quite"},
        {"story", "plot"},   {"plot", "story"},   {"boring", "tedious"}, {"lovely", "charming"},
    };
    auto words = split_words(text);
    // Per-text stream: same text and seed always produce the same output.
    uint64_t h = fnv1a64(std::string(text));
    std::mt19937_64 rng(seed_ ^ h);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& w : words) {
        std::string lw = lowercase(w);
        for (const auto& [from, to] : kSwaps) {
            if (lw == from && unit(rng) < 0.5) {
                w = to;
                break;
            }
        }
    }
    return join_words(words);
}

HttpTranslator::HttpTranslator(Options opts) : opts_(std::move(opts)) {
    if (opts_.url.empty()) {
        const char* env = std::getenv("NURA_TRANSLATOR_URL");
        if (env) opts_.url = env;
    }
    if (opts_.token.empty()) {
        const char* env = std::getenv("NURA_TRANSLATOR_TOKEN");
        if (env) opts_.token = env;
    }
}

std::optional<std::string> back_translate(Translator& translator, std::string_view text) {
    auto result = translator.round_trip(text);
    if (!result || result->empty()) return std::nullopt;  // empty responses are failures
    return result;
}

void save_defense_report(const DefenseReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["defense"] = report.defense;
    j["kept"] = report.kept;
    j["flagged"] = report.flagged;
    nlohmann::json removed = nlohmann::json::object();
    for (const auto& [idx, words] : report.removed_words) removed[std::to_string(idx)] = words;
    j["removed_words"] = removed;
    j["tuned_threshold"] = report.tuned_threshold;
    j["available"] = report.available;
    j["note"] = report.note;
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write defense report " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace nura
