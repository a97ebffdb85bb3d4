#include "nura/poison.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "nura/errors.hpp"
#include "nura/text.hpp"

namespace nura {

int PoisonPlan::attacked_label(int orig_label, int num_classes) const {
    if (policy.kind == LabelPolicy::Kind::fixed_target) {
        if (orig_label == policy.target)
            throw DomainError("fixed_target plan selected a sample already labeled with the target");
        return policy.target;
    }
    return (orig_label + 1) % num_classes;
}

bool PoisonPlan::contains(int index) const {
    return std::find(indices.begin(), indices.end(), index) != indices.end();
}

std::string splice(std::string_view x, std::string_view t, std::string_view separator) {
    if (t.empty()) return std::string(x);
    std::string out(x);
    out += separator;
    out += t;
    return out;
}

PoisonPlan make_plan(const Dataset& d, double poison_rate, LabelPolicy policy, uint64_t seed) {
    if (!(poison_rate > 0.0 && poison_rate <= 1.0))
        throw ConfigError("poison_rate must be in (0, 1]");
    d.validate();
    if (policy.kind == LabelPolicy::Kind::fixed_target &&
        (policy.target < 0 || policy.target >= d.num_classes()))
        throw ConfigError("fixed_target label out of range");

    const size_t want = static_cast<size_t>(
        std::llround(poison_rate * static_cast<double>(d.size())));

    std::vector<int> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    PoisonPlan plan;
    plan.policy = policy;
    plan.poison_rate = poison_rate;
    for (int idx : order) {
        if (plan.indices.size() >= want) break;
        if (policy.kind == LabelPolicy::Kind::fixed_target &&
            d.samples[idx].label == policy.target)
            continue;  // skipped and replaced by the next eligible index
        plan.indices.push_back(idx);
    }
    if (plan.indices.size() < want)
        throw DataError("plan needs " + std::to_string(want) + " eligible samples, found " +
                        std::to_string(plan.indices.size()));
    return plan;
}

PoisonedDataset build_poisoned_dataset(const Dataset& d, const std::map<int, std::string>& triggers,
                                       const PoisonPlan& plan, std::string_view separator) {
    PoisonedDataset out;
    out.combined.label_names = d.label_names;
    out.combined.name = d.name + ".poisoned";
    out.combined.samples = d.samples;
    for (int idx : plan.indices) {
        auto it = triggers.find(idx);
        if (it == triggers.end())
            throw DataError("no trigger for planned index " + std::to_string(idx));
        const Sample& src = d.samples[idx];
        PoisonedSample ps;
        ps.text = splice(src.text, it->second, separator);
        ps.orig_label = src.label;
        ps.attacked_label = plan.attacked_label(src.label, d.num_classes());
        ps.trigger = it->second;
        ps.source_index = idx;
        out.combined.samples.push_back({ps.text, ps.attacked_label});
        out.poisoned.push_back(std::move(ps));
    }
    return out;
}

std::pair<std::string, std::vector<int>> rare_word_attack(std::string_view x,
                                                          std::span<const std::string> lexicon,
                                                          int n_insert, uint64_t seed) {
    if (n_insert < 1) throw ConfigError("n_insert must be >= 1");
    if (lexicon.empty()) throw ConfigError("rare-word lexicon is empty");

    std::vector<std::string> words = split_words(x);
    std::vector<int> inserted_at;
    std::mt19937_64 rng(seed);
    for (int k = 0; k < n_insert; ++k) {
        std::uniform_int_distribution<size_t> word_pick(0, lexicon.size() - 1);
        std::uniform_int_distribution<size_t> pos_pick(0, words.size());
        size_t pos = pos_pick(rng);
        words.insert(words.begin() + static_cast<long>(pos), lexicon[word_pick(rng)]);
        for (int& p : inserted_at)
            if (p >= static_cast<int>(pos)) ++p;
        inserted_at.push_back(static_cast<int>(pos));
    }
    return {join_words(words), inserted_at};
}

PoisonedDataset build_rare_word_dataset(const Dataset& d, const PoisonPlan& plan,
                                        std::span<const std::string> lexicon, int n_insert,
                                        uint64_t seed) {
    PoisonedDataset out;
    out.combined.label_names = d.label_names;
    out.combined.name = d.name + ".poisoned";
    out.combined.samples = d.samples;
    for (int idx : plan.indices) {
        const Sample& src = d.samples[idx];
        auto [text, positions] = rare_word_attack(src.text, lexicon, n_insert,
                                                  seed ^ (0x9e3779b97f4a7c15ULL * (idx + 1)));
        std::vector<std::string> words = split_words(text);
        std::vector<std::string> inserted;
        for (int p : positions) inserted.push_back(words[p]);
        PoisonedSample ps;
        ps.text = text;
        ps.orig_label = src.label;
        ps.attacked_label = plan.attacked_label(src.label, d.num_classes());
        ps.trigger = join_words(inserted);
        ps.source_index = idx;
        out.combined.samples.push_back({ps.text, ps.attacked_label});
        out.poisoned.push_back(std::move(ps));
    }
    return out;
}

namespace {
int eval_attacked_label(const LabelPolicy& policy, int orig, int num_classes) {
    return policy.kind == LabelPolicy::Kind::fixed_target ? policy.target
                                                          : (orig + 1) % num_classes;
}
}  // namespace

std::vector<PoisonedSample> poison_eligible(const Dataset& d,
                                            const std::map<int, std::string>& triggers,
                                            const LabelPolicy& policy,
                                            std::string_view separator) {
    std::vector<PoisonedSample> out;
    for (size_t i = 0; i < d.samples.size(); ++i) {
        const Sample& s = d.samples[i];
        if (policy.kind == LabelPolicy::Kind::fixed_target && s.label == policy.target) continue;
        auto it = triggers.find(static_cast<int>(i));
        if (it == triggers.end()) continue;
        PoisonedSample ps;
        ps.text = splice(s.text, it->second, separator);
        ps.orig_label = s.label;
        ps.attacked_label = eval_attacked_label(policy, s.label, d.num_classes());
        ps.trigger = it->second;
        ps.source_index = static_cast<int>(i);
        out.push_back(std::move(ps));
    }
    return out;
}

std::map<int, std::string> rare_word_triggers(const Dataset& d,
                                              std::span<const std::string> lexicon, int n_insert,
                                              uint64_t seed) {
    std::map<int, std::string> out;
    for (size_t i = 0; i < d.samples.size(); ++i) {
        auto [text, positions] = rare_word_attack(d.samples[i].text, lexicon, n_insert,
                                                  seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
        std::vector<std::string> words = split_words(text);
        std::vector<std::string> inserted;
        for (int p : positions) inserted.push_back(words[static_cast<size_t>(p)]);
        out[static_cast<int>(i)] = join_words(inserted);
    }
    return out;
}

std::vector<PoisonedSample> poison_eligible_rare_word(const Dataset& d, const LabelPolicy& policy,
                                                      std::span<const std::string> lexicon,
                                                      int n_insert, uint64_t seed) {
    std::vector<PoisonedSample> out;
    for (size_t i = 0; i < d.samples.size(); ++i) {
        const Sample& s = d.samples[i];
        if (policy.kind == LabelPolicy::Kind::fixed_target && s.label == policy.target) continue;
        auto [text, positions] = rare_word_attack(s.text, lexicon, n_insert,
                                                  seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
        std::vector<std::string> words = split_words(text);
        std::vector<std::string> inserted;
        for (int p : positions) inserted.push_back(words[static_cast<size_t>(p)]);
        PoisonedSample ps;
        ps.text = text;
        ps.orig_label = s.label;
        ps.attacked_label = eval_attacked_label(policy, s.label, d.num_classes());
        ps.trigger = join_words(inserted);
        ps.source_index = static_cast<int>(i);
        out.push_back(std::move(ps));
    }
    return out;
}

void save_poisoned_dataset(const PoisonedDataset& p, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write poisoned dataset " + path.string());
    size_t n_clean = p.combined.samples.size() - p.poisoned.size();
    for (size_t i = 0; i < n_clean; ++i) {
        nlohmann::json j;
        j["text"] = p.combined.samples[i].text;
        j["label"] = p.combined.samples[i].label;
        out << j.dump() << '\n';
    }
    for (const auto& ps : p.poisoned) {
        nlohmann::json j;
        j["text"] = ps.text;
        j["label"] = ps.attacked_label;
        j["orig_label"] = ps.orig_label;
        j["attacked_label"] = ps.attacked_label;
        j["trigger"] = ps.trigger;
        j["source_index"] = ps.source_index;
        out << j.dump() << '\n';
    }
    std::ofstream sf(path.string() + ".labels.json");
    nlohmann::json j;
    j["name"] = p.combined.name;
    j["label_names"] = p.combined.label_names;
    sf << j.dump(2) << '\n';
}

PoisonedDataset load_poisoned_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open poisoned dataset " + path.string());
    PoisonedDataset p;
    {
        std::ifstream sf(path.string() + ".labels.json");
        if (!sf.good()) throw IoError("missing label sidecar for " + path.string());
        nlohmann::json j = nlohmann::json::parse(sf);
        p.combined.label_names = j["label_names"].get<std::vector<std::string>>();
        p.combined.name = j.value("name", path.stem().string());
    }
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        Sample s{j.at("text").get<std::string>(), j.at("label").get<int>()};
        p.combined.samples.push_back(s);
        if (j.contains("trigger")) {
            PoisonedSample ps;
            ps.text = s.text;
            ps.orig_label = j.at("orig_label").get<int>();
            ps.attacked_label = j.at("attacked_label").get<int>();
            ps.trigger = j.at("trigger").get<std::string>();
            ps.source_index = j.at("source_index").get<int>();
            p.poisoned.push_back(std::move(ps));
        }
    }
    p.combined.validate();
    return p;
}

}  // namespace nura
