#include "nura/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "nura/errors.hpp"

namespace nura {

double asr(const Classifier& f, const Vocab& vocab, std::span<const PoisonedSample> poisoned) {
    if (poisoned.empty()) throw DomainError("asr: empty poisoned set");
    long hits = 0;
    for (const auto& ps : poisoned)
        if (f.predict_text(vocab, ps.text) == ps.attacked_label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(poisoned.size());
}

double cacc(const Classifier& f, const Vocab& vocab, const Dataset& clean_test) {
    if (clean_test.samples.empty()) throw DomainError("cacc: empty test set");
    long hits = 0;
    for (const auto& s : clean_test.samples)
        if (f.predict_text(vocab, s.text) == s.label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(clean_test.samples.size());
}

double cta(const Classifier& f, const Vocab& vocab, std::span<const Sample> clean,
           const std::map<int, std::string>& triggers, uint64_t seed,
           std::string_view separator) {
    const int n = static_cast<int>(clean.size());
    if (n < 2) throw DomainError("cta: needs at least 2 samples");
    std::mt19937_64 rng(seed);
    long hits = 0;
    for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<int> pick(0, n - 2);
        int j = pick(rng);
        if (j >= i) ++j;
        auto it = triggers.find(j);
        if (it == triggers.end()) throw DataError("cta: no trigger for index " + std::to_string(j));
        std::string spliced = splice(clean[static_cast<size_t>(i)].text, it->second, separator);
        if (f.predict_text(vocab, spliced) == clean[static_cast<size_t>(i)].label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

AvgEmbeddingEncoder::AvgEmbeddingEncoder(const Vocab* vocab, ad::Mat table)
    : vocab_(vocab), table_(std::move(table)) {
    if (!vocab_ || table_.rows != vocab_->size())
        throw ShapeError("AvgEmbeddingEncoder: table does not match vocab");
}

AvgEmbeddingEncoder AvgEmbeddingEncoder::random(const Vocab& vocab, int dim, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    ad::Mat table(vocab.size(), dim);
    for (double& v : table.a) v = dist(rng);
    return AvgEmbeddingEncoder(&vocab, std::move(table));
}

std::vector<double> AvgEmbeddingEncoder::encode(std::string_view text) const {
    auto ids = vocab_->encode(text);
    if (ids.empty()) throw DomainError("encode: empty text");
    std::vector<double> out(static_cast<size_t>(table_.cols), 0.0);
    for (int tok : ids)
        for (int d = 0; d < table_.cols; ++d) out[static_cast<size_t>(d)] += table_.at(tok, d);
    for (double& v : out) v /= static_cast<double>(ids.size());
    return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

TriggerQuality trigger_quality(std::span<const PoisonedSample> poisoned, const Scorer& scorer,
                               const SentenceEncoder* encoder) {
    if (poisoned.empty()) throw DomainError("trigger_quality: empty poisoned set");
    TriggerQuality q;
    q.count = static_cast<long>(poisoned.size());
    double sum_benign = 0.0, sum_poisoned = 0.0, sum_trigger = 0.0;
    long trigger_count = 0;
    for (const auto& ps : poisoned) {
        // The benign text is the poisoned text with the trigger suffix removed.
        std::string benign = ps.text;
        if (!ps.trigger.empty() && benign.size() > ps.trigger.size() &&
            benign.compare(benign.size() - ps.trigger.size(), ps.trigger.size(), ps.trigger) == 0) {
            benign = benign.substr(0, benign.size() - ps.trigger.size());
            while (!benign.empty() && std::isspace(static_cast<unsigned char>(benign.back())))
                benign.pop_back();
        }
        sum_benign += perplexity(scorer, benign);
        sum_poisoned += perplexity(scorer, ps.text);
        if (!ps.trigger.empty()) {
            sum_trigger += perplexity(scorer, ps.trigger);
            ++trigger_count;
        }
    }
    const double n = static_cast<double>(poisoned.size());
    q.avg_ppl_benign = sum_benign / n;
    q.avg_ppl_poisoned = sum_poisoned / n;
    q.avg_ppl_trigger = trigger_count ? sum_trigger / static_cast<double>(trigger_count) : 0.0;

    if (encoder) {
        double sum_cos = 0.0;
        for (const auto& ps : poisoned) {
            std::string benign = ps.text;
            if (!ps.trigger.empty() && benign.size() > ps.trigger.size() &&
                benign.compare(benign.size() - ps.trigger.size(), ps.trigger.size(), ps.trigger) ==
                    0) {
                benign = benign.substr(0, benign.size() - ps.trigger.size());
                while (!benign.empty() && std::isspace(static_cast<unsigned char>(benign.back())))
                    benign.pop_back();
            }
            sum_cos += cosine_similarity(encoder->encode(benign), encoder->encode(ps.text));
        }
        q.mean_cosine_similarity = sum_cos / n;
    }
    return q;
}

std::map<int, double> trigger_length_sweep(const Classifier& f, const Vocab& vocab,
                                           const CausalLm& generator, const Dataset& clean_test,
                                           const LabelPolicy& policy, const DecodeConfig& base,
                                           std::span<const int> lengths,
                                           std::string_view separator) {
    for (size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 1) throw ConfigError("trigger_length_sweep: lengths must be positive");
        if (i > 0 && lengths[i] <= lengths[i - 1])
            throw ConfigError("trigger_length_sweep: lengths must be ascending");
    }
    std::map<int, double> out;
    for (int cap : lengths) {
        DecodeConfig cfg = base;
        cfg.max_trigger_tokens = cap;
        cfg.min_tokens = std::min(base.min_tokens, cap);
        std::vector<PoisonedSample> poisoned;
        for (size_t i = 0; i < clean_test.samples.size(); ++i) {
            const Sample& s = clean_test.samples[i];
            if (policy.kind == LabelPolicy::Kind::fixed_target && s.label == policy.target)
                continue;
            PoisonedSample ps;
            ps.trigger = continue_text(generator, vocab, s.text, cfg);
            ps.text = splice(s.text, ps.trigger, separator);
            ps.orig_label = s.label;
            ps.attacked_label = policy.kind == LabelPolicy::Kind::fixed_target
                                    ? policy.target
                                    : (s.label + 1) % clean_test.num_classes();
            ps.source_index = static_cast<int>(i);
            poisoned.push_back(std::move(ps));
        }
        out[cap] = poisoned.empty() ? 0.0 : asr(f, vocab, poisoned);
    }
    return out;
}

uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

nlohmann::json fraction_to_json(const std::optional<Fraction>& f) {
    if (!f) return nullptr;
    return nlohmann::json{{"value", f->value}, {"num", f->num}, {"den", f->den}};
}

std::optional<Fraction> fraction_from_json(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return Fraction{j.at("value").get<double>(), j.at("num").get<long>(), j.at("den").get<long>()};
}

}  // namespace

void emit_report(const MetricReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["schema_version"] = report.schema_version;
    j["attack"] = report.attack;
    j["defense"] = report.defense;
    j["config_hash"] = report.config_hash;
    j["seed"] = report.seed;
    j["asr"] = fraction_to_json(report.asr);
    j["cacc"] = fraction_to_json(report.cacc);
    j["cta"] = fraction_to_json(report.cta);
    if (report.quality) {
        nlohmann::json q;
        q["avg_ppl_benign"] = report.quality->avg_ppl_benign;
        q["avg_ppl_poisoned"] = report.quality->avg_ppl_poisoned;
        q["avg_ppl_trigger"] = report.quality->avg_ppl_trigger;
        q["mean_cosine_similarity"] = report.quality->mean_cosine_similarity
                                          ? nlohmann::json(*report.quality->mean_cosine_similarity)
                                          : nlohmann::json();
        q["count"] = report.quality->count;
        j["quality"] = q;
    } else {
        j["quality"] = nullptr;
    }
    j["defense_available"] = report.defense_available;
    j["note"] = report.note;
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write report " + path.string());
    out << j.dump(2) << '\n';
}

MetricReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open report " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    MetricReport r;
    r.schema_version = j.at("schema_version").get<int>();
    r.attack = j.at("attack").get<std::string>();
    r.defense = j.at("defense").get<std::string>();
    r.config_hash = j.at("config_hash").get<uint64_t>();
    r.seed = j.at("seed").get<uint64_t>();
    r.asr = fraction_from_json(j.at("asr"));
    r.cacc = fraction_from_json(j.at("cacc"));
    r.cta = fraction_from_json(j.at("cta"));
    if (!j.at("quality").is_null()) {
        const auto& q = j.at("quality");
        TriggerQuality tq;
        tq.avg_ppl_benign = q.at("avg_ppl_benign").get<double>();
        tq.avg_ppl_poisoned = q.at("avg_ppl_poisoned").get<double>();
        tq.avg_ppl_trigger = q.at("avg_ppl_trigger").get<double>();
        if (!q.at("mean_cosine_similarity").is_null())
            tq.mean_cosine_similarity = q.at("mean_cosine_similarity").get<double>();
        tq.count = q.at("count").get<long>();
        r.quality = tq;
    }
    r.defense_available = j.at("defense_available").get<bool>();
    r.note = j.at("note").get<std::string>();
    return r;
}

}  // namespace nura
