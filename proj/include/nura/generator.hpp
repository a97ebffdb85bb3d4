#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nura/autodiff.hpp"
#include "nura/lm.hpp"
#include "nura/text.hpp"

namespace nura {

struct DecodeConfig {
    int max_trigger_tokens = 32;
    int beam_width = 1;
    int eos_token = Vocab::kEos;
    int min_tokens = 1;

    void validate() const;
};

// One step of relaxed decoding: a probability vector over the vocabulary at
// the step's temperature. Entries are nonnegative and sum to 1 within 1e-6.
struct RelaxedToken {
    std::vector<double> distribution;
    double temperature = 1.0;
};

// Trainable generator plus its frozen initial copy. The reference never
// changes after construction; its parameter hash pins that in checkpoints.
struct GeneratorPair {
    ToyLm trainable;
    ToyLm reference;

    explicit GeneratorPair(ToyLm model) : trainable(model), reference(std::move(model)) {}
    uint64_t reference_hash() const { return reference.params_hash(); }
};

// Beam-search continuation of the prefix, truncated at the first EOS or at
// max_trigger_tokens. EOS is masked until min_tokens have been emitted;
// beam_width=1 degenerates to greedy decoding. Returned ids exclude EOS.
std::vector<int> continue_ids(const CausalLm& lm, std::span<const int> prefix,
                              const DecodeConfig& cfg);

std::string continue_text(const CausalLm& lm, const Vocab& vocab, std::string_view x,
                          const DecodeConfig& cfg);

// softmax((logits + noise) / tau). Noise is passed in (Gumbel(0,1) draws)
// so callers control determinism.
std::vector<double> gumbel_softmax(std::span<const double> logits, double tau,
                                   std::span<const double> noise);

double sample_gumbel(std::mt19937_64& rng);

struct RelaxedDecodeResult {
    std::vector<RelaxedToken> tokens;                 // P, from the trainable model
    std::vector<std::vector<double>> reference;       // P', same noise on the frozen model
    std::vector<int> hard_ids;                        // argmax feedback path, no EOS
};

// Autoregressive relaxed decoding: at each step the argmax of the trainable
// model's relaxed distribution is fed back to BOTH models; the reference
// distribution uses the same Gumbel draw and temperature. Stops when EOS is
// the argmax (after min_tokens) or at max_len steps.
RelaxedDecodeResult relaxed_decode(const GeneratorPair& pair, std::span<const int> prefix,
                                   double tau, int max_len, int min_tokens, std::mt19937_64& rng);

// sum_j KL(P_j || P'_j); zero iff all pairs are equal.
double kl_regularizer(std::span<const RelaxedToken> p,
                      std::span<const std::vector<double>> p_ref);
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Probability-weighted mixtures of embedding rows, one output vector per step.
std::vector<std::vector<double>> soft_embed(std::span<const RelaxedToken> tokens,
                                            const ad::Mat& embedding_table);

// Logit mask that forbids [bos]/[unk] always and [eos] while below
// min_tokens. Added to logits before softmax.
ad::Mat decode_mask(int vocab_size, bool allow_eos);

}  // namespace nura
