#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nura/autodiff.hpp"
#include "nura/text.hpp"

namespace nura {

// Anything that exposes next-token log-probabilities given a token prefix.
// An empty prefix means "start of text" ([bos] context).
class CausalLm {
public:
    virtual ~CausalLm() = default;
    virtual int vocab_size() const = 0;
    virtual std::vector<double> next_log_probs(std::span<const int> prefix) const = 0;

    // sum_j log p(w_j | w_<j) over the whole sequence, no EOS term.
    double sequence_log_prob(std::span<const int> ids) const;
};

// Count-based bigram model. Fitting interpolates the ML bigram with an
// add-k smoothed unigram (p = mix * p_bigram + (1-mix) * p_unigram), so an
// unseen transition between common words stays plausible while a genuinely
// rare word scores near zero. Doubles as the defense perplexity scorer and
// as a hand-constructible table LM in tests.
class BigramLm : public CausalLm {
public:
    BigramLm() = default;

    static BigramLm fit(const std::vector<std::vector<int>>& corpus, int vocab_size,
                        double add_k = 0.1, double mix = 0.9);
    // Rows are conditional probability vectors; row index = previous token,
    // with initial_probs used for the empty prefix.
    static BigramLm from_tables(std::vector<double> initial_probs,
                                std::vector<std::vector<double>> transition_probs);

    int vocab_size() const override { return vocab_; }
    std::vector<double> next_log_probs(std::span<const int> prefix) const override;

    void save(const std::filesystem::path& path) const;
    static BigramLm load(const std::filesystem::path& path);

private:
    int vocab_ = 0;
    std::vector<double> log_init_;              // V
    std::vector<double> log_trans_;             // V*V row-major
};

// Tiny feedforward causal LM: logits = U tanh(W [mean(prefix emb); last emb] + b) + c.
// The prefix mean makes continuations input-dependent; the last-token
// embedding carries local order. Trainable both as a plain LM and jointly
// through the relaxed decoding path.
class ToyLm : public CausalLm {
public:
    ToyLm() = default;
    ToyLm(int vocab_size, int embed_dim, int hidden_dim, uint64_t seed);

    int vocab_size() const override { return vocab_; }
    int embed_dim() const { return embed_; }
    int hidden_dim() const { return hidden_; }

    std::vector<double> next_logits(std::span<const int> prefix) const;
    std::vector<double> next_log_probs(std::span<const int> prefix) const override;

    struct BoundParams {
        ad::Var emb, W, b, U, c;
    };
    BoundParams bind(ad::Tape& tape);

    // Tape twin of next_logits; prefix ids are constants, parameters flow.
    ad::Var logits_on_tape(ad::Tape& tape, const BoundParams& bound,
                           std::span<const int> prefix) const;

    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    uint64_t params_hash() const { return params_.fnv1a_hash(); }

    void save(const std::filesystem::path& path) const;
    static ToyLm load(const std::filesystem::path& path);

private:
    int vocab_ = 0;
    int embed_ = 0;
    int hidden_ = 0;
    ad::ParamStore params_;
};

// Fits the toy LM on tokenized sentences (next-token cross entropy, Adam).
// Each sentence is terminated with [eos]. Returns final mean loss.
double fit_causal_lm(ToyLm& lm, const std::vector<std::vector<int>>& corpus, int epochs,
                     double learning_rate, uint64_t seed);

// Loads either LM flavor from its self-describing checkpoint.
std::unique_ptr<CausalLm> load_causal_lm(const std::filesystem::path& path);

std::vector<std::vector<int>> encode_corpus(const Vocab& vocab,
                                            const std::vector<std::string>& texts);

}  // namespace nura
