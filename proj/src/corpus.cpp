#include "nura/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nura/errors.hpp"

namespace nura {

namespace {

std::string trim(std::string_view s) {
    size_t l = 0, r = s.size();
    while (l < r && std::isspace(static_cast<unsigned char>(s[l]))) ++l;
    while (r > l && std::isspace(static_cast<unsigned char>(s[r - 1]))) --r;
    return std::string(s.substr(l, r - l));
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    return std::filesystem::path(path.string() + ".labels.json");
}

bool all_integer_labels(const std::vector<std::string>& raw) {
    for (const auto& s : raw) {
        if (s.empty()) return false;
        size_t i = 0;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        if (i != s.size()) return false;
    }
    return true;
}

struct RawRecord {
    std::string text;
    std::string label;   // set when the label came in as a string
    long label_int = -1; // set when the label came in as an integer
    bool is_int = false;
    int line = 0;
};

Dataset assemble(const std::filesystem::path& path, std::vector<RawRecord> records) {
    Dataset d;
    d.name = path.stem().string();

    std::vector<std::string> sidecar_names;
    {
        std::ifstream sf(sidecar_path(path));
        if (sf.good()) {
            nlohmann::json j = nlohmann::json::parse(sf);
            if (j.contains("label_names"))
                sidecar_names = j["label_names"].get<std::vector<std::string>>();
            if (j.contains("name") && j["name"].is_string()) d.name = j["name"].get<std::string>();
        }
    }

    auto fail = [&](int line, const std::string& msg) -> void {
        throw DataError(path.string() + ":" + std::to_string(line) + ": " + msg);
    };

    if (!sidecar_names.empty()) {
        std::map<std::string, int> by_name;
        for (size_t i = 0; i < sidecar_names.size(); ++i) by_name[sidecar_names[i]] = (int)i;
        d.label_names = sidecar_names;
        for (auto& r : records) {
            int lab;
            if (r.is_int) {
                lab = static_cast<int>(r.label_int);
                if (lab < 0 || lab >= d.num_classes()) fail(r.line, "label out of range");
            } else if (auto it = by_name.find(r.label); it != by_name.end()) {
                lab = it->second;
            } else if (all_integer_labels({r.label})) {
                // Numeric ids are accepted against a declared label space.
                lab = static_cast<int>(std::stol(r.label));
                if (lab < 0 || lab >= d.num_classes()) fail(r.line, "label out of range");
            } else {
                fail(r.line, "unknown label string '" + r.label + "'");
                lab = 0;
            }
            d.samples.push_back({std::move(r.text), lab});
        }
    } else {
        // Infer the label space. All-integer labels keep their numeric ids;
        // string labels are mapped in sorted order for determinism.
        bool all_int = true;
        std::vector<std::string> raw;
        raw.reserve(records.size());
        for (const auto& r : records) {
            all_int = all_int && r.is_int;
            raw.push_back(r.is_int ? std::to_string(r.label_int) : r.label);
        }
        if (!all_int && all_integer_labels(raw)) all_int = true;
        if (all_int) {
            long max_label = 1;  // C >= 2 even for single-class files
            for (const auto& r : records) {
                long v = r.is_int ? r.label_int : std::stol(r.label);
                if (v < 0) fail(r.line, "negative label");
                max_label = std::max(max_label, v);
            }
            for (long c = 0; c <= max_label; ++c) d.label_names.push_back(std::to_string(c));
            for (auto& r : records) {
                long v = r.is_int ? r.label_int : std::stol(r.label);
                d.samples.push_back({std::move(r.text), static_cast<int>(v)});
            }
        } else {
            std::set<std::string> names(raw.begin(), raw.end());
            d.label_names.assign(names.begin(), names.end());
            std::map<std::string, int> by_name;
            for (size_t i = 0; i < d.label_names.size(); ++i) by_name[d.label_names[i]] = (int)i;
            for (size_t i = 0; i < records.size(); ++i)
                d.samples.push_back({std::move(records[i].text), by_name.at(raw[i])});
        }
    }
    d.validate();
    return d;
}

}  // namespace

void Dataset::validate() const {
    if (num_classes() < 2) throw DataError("Dataset '" + name + "': needs at least 2 classes");
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (trim(s.text).empty())
            throw DataError("Dataset '" + name + "': sample " + std::to_string(i) + " has empty text");
        if (s.label < 0 || s.label >= num_classes())
            throw DataError("Dataset '" + name + "': sample " + std::to_string(i) +
                            " label out of range");
    }
}

std::vector<std::string> Dataset::texts() const {
    std::vector<std::string> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.text);
    return out;
}

Format parse_format(std::string_view name) {
    if (name == "tsv") return Format::tsv;
    if (name == "jsonl") return Format::jsonl;
    throw ConfigError("unknown dataset format '" + std::string(name) + "'");
}

Dataset load_dataset(const std::filesystem::path& path, Format format) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open dataset file " + path.string());

    std::vector<RawRecord> records;
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& msg) -> void {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        RawRecord r;
        r.line = line_no;
        if (format == Format::tsv) {
            auto tab = line.rfind('\t');
            if (tab == std::string::npos) fail("expected text<TAB>label");
            r.text = trim(line.substr(0, tab));
            r.label = trim(line.substr(tab + 1));
            if (line_no == 1 && r.text == "text" && r.label == "label") continue;  // header
            if (r.text.empty()) fail("empty text column");
            if (r.label.empty()) fail("empty label column");
        } else {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                fail(std::string("invalid JSON: ") + e.what());
            }
            if (!j.contains("text") || !j.contains("label")) fail("record needs text and label");
            if (!j["text"].is_string()) fail("text must be a string");
            r.text = trim(j["text"].get<std::string>());
            if (r.text.empty()) fail("empty text");
            if (j["label"].is_number_integer()) {
                r.is_int = true;
                r.label_int = j["label"].get<long>();
                if (r.label_int < 0) fail("negative label");
            } else if (j["label"].is_string()) {
                r.label = j["label"].get<std::string>();
                if (r.label.empty()) fail("empty label");
            } else {
                fail("label must be an integer or a string");
            }
        }
        records.push_back(std::move(r));
    }
    if (records.empty()) throw DataError(path.string() + ": no records");
    return assemble(path, std::move(records));
}

void save_dataset(const Dataset& d, const std::filesystem::path& path, Format format) {
    d.validate();
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write dataset file " + path.string());
    if (format == Format::tsv) {
        for (const auto& s : d.samples) {
            if (s.text.find('\t') != std::string::npos || s.text.find('\n') != std::string::npos)
                throw DataError("text contains tab/newline; use jsonl for dataset '" + d.name + "'");
            out << s.text << '\t' << s.label << '\n';
        }
    } else {
        for (const auto& s : d.samples) {
            nlohmann::json j;
            j["text"] = s.text;
            j["label"] = s.label;
            out << j.dump() << '\n';
        }
    }
    std::ofstream sf(sidecar_path(path));
    nlohmann::json j;
    j["name"] = d.name;
    j["label_names"] = d.label_names;
    sf << j.dump(2) << '\n';
}

std::array<Dataset, 3> split_dataset(const Dataset& d, const std::array<double, 3>& ratios,
                                     uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    for (double r : ratios)
        if (r <= 0) throw ConfigError("split ratios must be positive");
    if (d.size() < 3) throw DataError("split needs at least 3 samples");

    std::vector<size_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    // Largest-remainder apportionment: exact partition, no sample lost.
    const size_t n = d.size();
    std::array<size_t, 3> counts{};
    std::array<double, 3> frac{};
    size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = ratios[i] * static_cast<double>(n);
        counts[i] = static_cast<size_t>(std::floor(exact));
        frac[i] = exact - std::floor(exact);
        assigned += counts[i];
    }
    std::array<int, 3> idx{0, 1, 2};
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (size_t k = 0; assigned < n; ++k, ++assigned) ++counts[idx[k % 3]];

    std::array<Dataset, 3> out;
    const char* suffix[3] = {"train", "dev", "test"};
    size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
        out[i].label_names = d.label_names;
        out[i].name = d.name + "." + suffix[i];
        for (size_t k = 0; k < counts[i]; ++k) out[i].samples.push_back(d.samples[order[pos++]]);
    }
    return out;
}

}  // namespace nura
