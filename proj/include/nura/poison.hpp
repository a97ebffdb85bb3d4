#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nura/corpus.hpp"

namespace nura {

// A spliced instance: text carries the trigger, attacked_label != orig_label.
struct PoisonedSample {
    std::string text;
    int orig_label = 0;
    int attacked_label = 0;
    std::string trigger;
    int source_index = 0;
};

struct LabelPolicy {
    enum class Kind { fixed_target, rotate_next };
    Kind kind = Kind::fixed_target;
    int target = 0;  // fixed_target only

    static LabelPolicy fixed_target(int c) { return {Kind::fixed_target, c}; }
    static LabelPolicy rotate_next() { return {Kind::rotate_next, 0}; }
};

// Which samples to attack and how to flip their labels.
// |indices| == round(poison_rate * |dataset|); fixed_target never selects a
// sample already carrying the target label.
struct PoisonPlan {
    std::vector<int> indices;
    LabelPolicy policy;
    double poison_rate = 0.0;

    int attacked_label(int orig_label, int num_classes) const;
    bool contains(int index) const;
};

// D plus its poisoned counterparts, with provenance kept on the side.
// combined.samples = clean samples followed by poisoned ones (attacked label
// as the training label).
struct PoisonedDataset {
    Dataset combined;
    std::vector<PoisonedSample> poisoned;
};

// x + separator + t; empty trigger returns x unchanged.
std::string splice(std::string_view x, std::string_view t, std::string_view separator = " ");

PoisonPlan make_plan(const Dataset& d, double poison_rate, LabelPolicy policy, uint64_t seed);

// Splice path (input-unique triggers). Requires a trigger for every planned
// index; never mutates d.
PoisonedDataset build_poisoned_dataset(const Dataset& d, const std::map<int, std::string>& triggers,
                                       const PoisonPlan& plan,
                                       std::string_view separator = " ");

// Rare-word insertion baseline: n_insert lexicon words at uniformly random
// word boundaries. Returns the poisoned text and the final word indices of
// the insertions.
std::pair<std::string, std::vector<int>> rare_word_attack(std::string_view x,
                                                          std::span<const std::string> lexicon,
                                                          int n_insert, uint64_t seed);

// Rare-word dataset build: one insertion pass per planned sample. The
// PoisonedSample trigger records the inserted words, space-joined.
PoisonedDataset build_rare_word_dataset(const Dataset& d, const PoisonPlan& plan,
                                        std::span<const std::string> lexicon, int n_insert,
                                        uint64_t seed);

// JSONL persistence: clean records as {"text","label"}, poisoned records with
// extra keys orig_label/attacked_label/trigger/source_index.
void save_poisoned_dataset(const PoisonedDataset& p, const std::filesystem::path& path);
PoisonedDataset load_poisoned_dataset(const std::filesystem::path& path);

// Evaluation-side poisoning: every eligible sample (all of them under
// rotate_next; the non-target ones under fixed_target) gets a poisoned
// counterpart. Indices without a trigger are skipped.
std::vector<PoisonedSample> poison_eligible(const Dataset& d,
                                            const std::map<int, std::string>& triggers,
                                            const LabelPolicy& policy,
                                            std::string_view separator = " ");

// One rare-word insertion pass per sample, keyed by sample index; values are
// the space-joined inserted words.
std::map<int, std::string> rare_word_triggers(const Dataset& d,
                                              std::span<const std::string> lexicon, int n_insert,
                                              uint64_t seed);

// Rare-word counterpart of poison_eligible (insertion, not suffix splice).
std::vector<PoisonedSample> poison_eligible_rare_word(const Dataset& d, const LabelPolicy& policy,
                                                      std::span<const std::string> lexicon,
                                                      int n_insert, uint64_t seed);

}  // namespace nura
