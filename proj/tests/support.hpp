#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "nura/corpus.hpp"
#include "nura/lm.hpp"
#include "nura/text.hpp"

namespace nura::test {

// Vocab of [unk],[eos],[bos] followed by the given words.
inline Vocab tiny_vocab(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.add_word(w);
    return v;
}

// Scratch directory under the system temp root, unique per tag.
inline std::filesystem::path scratch_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("nura_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline Dataset two_class_dataset(const std::vector<std::pair<std::string, int>>& rows,
                                 const std::string& name = "toy") {
    Dataset d;
    d.name = name;
    d.label_names = {"neg", "pos"};
    for (const auto& [text, label] : rows) d.samples.push_back({text, label});
    return d;
}

}  // namespace nura::test
