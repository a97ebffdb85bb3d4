#pragma once

#include <cstdint>

#include "nura/corpus.hpp"

namespace nura {

// Balanced two-class sentiment-flavored corpus over a ~50 word vocabulary.
// Deterministic given the seed; class 0 is negative, class 1 positive.
Dataset make_synthetic_dataset(int n, uint64_t seed, const std::string& name = "synthetic");

// Two-sentence documents with lexical cohesion: each text is extended by a
// follow-up sentence reusing its content words. This is the generator
// pretraining corpus; continuing a sentence then depends on that sentence.
std::vector<std::string> make_continuation_corpus(const std::vector<std::string>& texts,
                                                  uint64_t seed);

}  // namespace nura
