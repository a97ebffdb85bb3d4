#include "nura/text.hpp"

#include <cctype>

#include "nura/errors.hpp"

namespace nura {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool is_punct(char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        if (i >= text.size()) break;
        size_t j = i;
        while (j < text.size() && !is_space(text[j])) ++j;
        std::string_view chunk = text.substr(i, j - i);
        // Detach leading punctuation runs.
        size_t a = 0;
        while (a < chunk.size() && is_punct(chunk[a])) {
            out.emplace_back(1, chunk[a]);
            ++a;
        }
        // Detach trailing punctuation runs (kept in order after the core).
        size_t b = chunk.size();
        while (b > a && is_punct(chunk[b - 1])) --b;
        if (b > a) out.emplace_back(chunk.substr(a, b - a));
        for (size_t k = b; k < chunk.size(); ++k) out.emplace_back(1, chunk[k]);
        i = j;
    }
    return out;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

std::string lowercase(std::string_view word) {
    std::string out(word);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

Vocab::Vocab() {
    add_word("[unk]");
    add_word("[eos]");
    add_word("[bos]");
}

int Vocab::add_word(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
}

void Vocab::add_corpus(const std::vector<std::string>& texts) {
    for (const auto& t : texts) {
        for (const auto& w : split_words(t)) add_word(lowercase(w));
    }
}

int Vocab::id(std::string_view word) const {
    auto it = index_.find(lowercase(word));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) throw DomainError("Vocab::word: id out of range");
    return words_[id];
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 3 || tokens[0] != "[unk]" || tokens[1] != "[eos]" || tokens[2] != "[bos]")
        throw DataError("Vocab::from_tokens: missing reserved tokens");
    Vocab v;
    for (size_t i = 3; i < tokens.size(); ++i) v.add_word(tokens[i]);
    return v;
}

}  // namespace nura
