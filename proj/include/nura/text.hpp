#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nura {

// Whitespace word splitter with leading/trailing punctuation detached as
// separate tokens ("film." -> "film", "."). Defenses and metrics operate on
// these words; model vocabularies are built from their lowercased forms.
std::vector<std::string> split_words(std::string_view text);

std::string join_words(const std::vector<std::string>& words);

std::string lowercase(std::string_view word);

// Shared token vocabulary for the generator and the classifier.
// Ids 0..2 are reserved: [unk], [eos], [bos]. [bos] only ever appears as
// context, never in text; [eos] terminates generation.
class Vocab {
public:
    static constexpr int kUnk = 0;
    static constexpr int kEos = 1;
    static constexpr int kBos = 2;

    Vocab();

    // Adds every lowercased word of every text, first-occurrence order.
    void add_corpus(const std::vector<std::string>& texts);
    int add_word(const std::string& word);

    int id(std::string_view word) const;            // kUnk when absent
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }

    std::vector<int> encode(std::string_view text) const;
    std::string decode(const std::vector<int>& ids) const;

    const std::vector<std::string>& tokens() const { return words_; }
    static Vocab from_tokens(const std::vector<std::string>& tokens);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace nura
