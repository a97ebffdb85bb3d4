#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nura/corpus.hpp"
#include "nura/defense.hpp"
#include "nura/generator.hpp"
#include "nura/poison.hpp"
#include "nura/victim.hpp"

namespace nura {

// Fraction of poisoned samples predicted as their attacked label.
double asr(const Classifier& f, const Vocab& vocab, std::span<const PoisonedSample> poisoned);

// Plain accuracy on the clean set.
double cacc(const Classifier& f, const Vocab& vocab, const Dataset& clean_test);

// Accuracy of the clean label when each sample is spliced with a uniformly
// chosen other sample's trigger. Needs >= 2 samples.
double cta(const Classifier& f, const Vocab& vocab, std::span<const Sample> clean,
           const std::map<int, std::string>& triggers, uint64_t seed,
           std::string_view separator = " ");

class SentenceEncoder {
public:
    virtual ~SentenceEncoder() = default;
    virtual std::vector<double> encode(std::string_view text) const = 0;
};

// Mean of per-word embedding rows; the desk-scale encoder. Unknown words
// map to the [unk] row.
class AvgEmbeddingEncoder : public SentenceEncoder {
public:
    AvgEmbeddingEncoder(const Vocab* vocab, ad::Mat table);
    static AvgEmbeddingEncoder random(const Vocab& vocab, int dim, uint64_t seed);
    std::vector<double> encode(std::string_view text) const override;

private:
    const Vocab* vocab_;
    ad::Mat table_;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct TriggerQuality {
    double avg_ppl_benign = 0.0;
    double avg_ppl_poisoned = 0.0;
    double avg_ppl_trigger = 0.0;
    std::optional<double> mean_cosine_similarity;
    long count = 0;
};

// Word-level perplexities over source texts, poisoned texts, and bare
// triggers, plus mean cosine(x_i, x_i*) when an encoder is supplied.
TriggerQuality trigger_quality(std::span<const PoisonedSample> poisoned, const Scorer& scorer,
                               const SentenceEncoder* encoder);

// Regenerates triggers capped at each length, rebuilds the poisoned test
// set, and reports ASR per cap. Lengths must be positive and ascending.
std::map<int, double> trigger_length_sweep(const Classifier& f, const Vocab& vocab,
                                           const CausalLm& generator, const Dataset& clean_test,
                                           const LabelPolicy& policy, const DecodeConfig& base,
                                           std::span<const int> lengths,
                                           std::string_view separator = " ");

struct Fraction {
    double value = 0.0;
    long num = 0;
    long den = 0;
};

struct MetricReport {
    int schema_version = 1;
    std::string attack;
    std::string defense = "none";
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    std::optional<Fraction> asr;
    std::optional<Fraction> cacc;
    std::optional<Fraction> cta;
    std::optional<TriggerQuality> quality;
    bool defense_available = true;
    std::string note;
};

// Canonical JSON (sorted keys, shortest round-trip doubles): identical runs
// produce byte-identical files.
void emit_report(const MetricReport& report, const std::filesystem::path& path);
MetricReport load_report(const std::filesystem::path& path);

uint64_t fnv1a64(std::string_view bytes);

}  // namespace nura
