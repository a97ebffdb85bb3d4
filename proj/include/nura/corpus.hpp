#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace nura {

// One labeled text instance. Text is UTF-8 and non-empty after trimming;
// label indexes into the owning dataset's label_names.
struct Sample {
    std::string text;
    int label = 0;

    bool operator==(const Sample&) const = default;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> label_names;
    std::string name;

    int num_classes() const { return static_cast<int>(label_names.size()); }
    size_t size() const { return samples.size(); }

    // Enforces: C >= 2, every label in range, every text non-empty.
    void validate() const;

    std::vector<std::string> texts() const;

    bool operator==(const Dataset&) const = default;
};

enum class Format { tsv, jsonl };

Format parse_format(std::string_view name);

// TSV: text<TAB>label (last tab is the separator), optional "text\tlabel"
// header. JSONL: one {"text":..., "label":...} object per line. Labels may
// be integers or strings; string labels are mapped in sorted order unless a
// sidecar "<path>.labels.json" declares the label space.
Dataset load_dataset(const std::filesystem::path& path, Format format);

// Writes the dataset plus the label-name sidecar so load round-trips.
void save_dataset(const Dataset& d, const std::filesystem::path& path, Format format);

// Deterministic exact partition of the sample indices. Ratios must sum to 1
// within 1e-9 and each must be > 0; |d| must be >= 3.
std::array<Dataset, 3> split_dataset(const Dataset& d, const std::array<double, 3>& ratios,
                                     uint64_t seed);

}  // namespace nura
