#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nura/autodiff.hpp"
#include "nura/corpus.hpp"
#include "nura/generator.hpp"
#include "nura/poison.hpp"
#include "nura/text.hpp"

namespace nura {

// One classifier input position: a hard token id or a relaxed distribution
// over the vocabulary. One-hot distributions are exactly equivalent to ids.
using SoftToken = std::variant<int, std::vector<double>>;

// Bag-of-embeddings classifier over unigrams plus hashed word-pair features,
// with a tanh hidden layer. The pair channel is what lets the victim tell
// an input's own trigger from another input's (input-trigger coherence).
// The output head starts at zero, so an untrained classifier is uniform.
class Classifier {
public:
    static constexpr int kDefaultPairBuckets = 2048;

    Classifier() = default;
    Classifier(int vocab_size, int num_classes, int embed_dim, int hidden_dim, uint64_t seed,
               int pair_buckets = kDefaultPairBuckets);

    int vocab_size() const { return vocab_; }
    int num_classes() const { return classes_; }
    int embed_dim() const { return embed_; }
    int hidden_dim() const { return hidden_; }
    int pair_buckets() const { return pair_buckets_; }

    int pair_bucket(int first, int second) const;

    std::vector<double> classify_ids(std::span<const int> ids) const;
    std::vector<double> classify_mixed(std::span<const SoftToken> seq) const;
    std::vector<double> classify_text(const Vocab& vocab, std::string_view text) const;
    int predict_text(const Vocab& vocab, std::string_view text) const;

    struct BoundParams {
        ad::Var emb, pair, W1, b1, W2, b2;
    };
    BoundParams bind(ad::Tape& tape);

    // One input position on the tape: a hard id, or a relaxed distribution
    // with its argmax (the hard stand-in for pair features between two soft
    // positions).
    struct TapeToken {
        int id = -1;
        std::optional<ad::Var> dist;
        int hard = -1;

        static TapeToken hard_token(int id) { return {id, std::nullopt, id}; }
        static TapeToken soft_token(ad::Var dist, int argmax) { return {-1, dist, argmax}; }
    };
    ad::Var logits_on_tape(ad::Tape& tape, const BoundParams& p,
                           const std::vector<TapeToken>& seq) const;

    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

private:
    int vocab_ = 0, classes_ = 0, embed_ = 0, hidden_ = 0, pair_buckets_ = 0;
    ad::ParamStore params_;
};

// -log pred[label], clamped at 1e-12 so a zero-probability target yields a
// large finite loss instead of inf.
double classify_loss(std::span<const double> pred, int label);

// lambda-weighted sum; lambdas must be nonnegative and sum to 1 within 1e-9.
double total_loss(double loss_classify, double loss_cross, double loss_kl,
                  const std::array<double, 3>& lambdas);

struct CrossSample {
    std::string text;   // splice(x_i, t_j), j != i
    int label = 0;      // y_i, unchanged
    int source_index = 0;
    int trigger_source = 0;
};

// Pairs each sample with a uniformly chosen other sample's trigger. Batches
// of size 1 yield an empty result (cross loss skipped for that batch).
std::vector<CrossSample> build_cross_batch(std::span<const Sample> batch,
                                           const std::map<int, std::string>& triggers,
                                           uint64_t seed, std::string_view separator = " ");

enum class Variant { full, ntg, nc };

Variant parse_variant(std::string_view name);
std::string variant_name(Variant v);

struct TrainConfig {
    std::array<double, 3> lambdas{0.6, 0.2, 0.2};
    double tau = 1.0;
    double tau_end = -1.0;  // < 0 keeps tau constant; otherwise linear anneal
    double poison_rate = 0.1;
    int epochs = 20;
    int batch_size = 16;
    double learning_rate = 0.05;
    double weight_decay = 1e-4;
    Variant variant = Variant::full;
    uint64_t seed = 1;
    LabelPolicy policy = LabelPolicy::fixed_target(1);
    std::string separator = " ";
    DecodeConfig decode;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double loss_classify = 0.0;
    double loss_cross = 0.0;
    double loss_kl = 0.0;
    double dev_cacc = 0.0;
    double dev_asr = 0.0;
    double dev_cta = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    PoisonPlan plan;
};

// Batch-level targets, exposed so the label contract (poisoned -> attacked
// label, cross -> original label) is directly inspectable.
struct BatchTargets {
    struct Poison {
        int member;
        int attacked_label;
    };
    struct Cross {
        int member;
        int partner;
        int label;
    };
    std::vector<Poison> poison;
    std::vector<Cross> cross;
};

BatchTargets plan_batch_targets(std::span<const int> batch_indices, const Dataset& d,
                                const PoisonPlan& plan, bool with_cross, std::mt19937_64& rng);

// One joint training step on a fixed batch: builds the loss terms on a tape
// and (optionally) backpropagates, without touching parameters. All
// randomness (cross pairing, Gumbel draws) comes from rng, so re-seeding
// makes the result a deterministic function of the parameters — which is
// how the finite-difference checks drive it.
struct JointStepResult {
    double loss_classify = 0.0;
    double loss_cross = 0.0;
    double loss_kl = 0.0;
    double total = 0.0;
    std::map<std::string, ad::Mat> classifier_grads;
    std::map<std::string, ad::Mat> generator_grads;
};

JointStepResult joint_step(const Dataset& d, std::span<const int> batch, const Vocab& vocab,
                           GeneratorPair& pair, Classifier& f, const TrainConfig& cfg,
                           const PoisonPlan& plan, double tau,
                           const std::map<int, std::string>& frozen_triggers,
                           std::mt19937_64& rng, bool compute_grads);

// The NURA joint loop: per batch, clean + poisoned classification terms
// (poisoned inputs assembled in embedding space from relaxed decodes),
// cross-trigger terms, and the KL anchor to the frozen reference. Gradients
// always reach the classifier; the generator is updated unless variant=ntg.
// start_epoch > 1 resumes an earlier run.
TrainResult train(const Dataset& clean_train, const Dataset& dev, const Vocab& vocab,
                  GeneratorPair& pair, Classifier& f, const TrainConfig& cfg,
                  int start_epoch = 1, std::mt19937_64* resume_rng = nullptr);

// Plain supervised loop over an already-materialized dataset (rare-word
// baseline, clean control). Dev poison/trigger sets, when given, feed the
// same history schema.
struct SupervisedDevEval {
    std::vector<PoisonedSample> poisoned;
    std::map<int, std::string> triggers;
};

TrainResult train_supervised(const Dataset& train_data, const Dataset& dev, const Vocab& vocab,
                             const std::optional<SupervisedDevEval>& dev_eval, Classifier& f,
                             const TrainConfig& cfg, int start_epoch = 1,
                             std::mt19937_64* resume_rng = nullptr);

void save_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path,
                  bool append = false);
std::vector<EpochRecord> load_history(const std::filesystem::path& path);

// Self-describing checkpoint: classifier + generator parameters (with Adam
// moments), the frozen reference, vocab, config, seed, rng state.
struct Checkpoint {
    std::string attack = "nura";
    TrainConfig cfg;
    std::vector<std::string> vocab_tokens;
    Classifier classifier;
    std::optional<ToyLm> generator;
    std::optional<ToyLm> reference;
    uint64_t reference_hash = 0;
    int epochs_done = 0;
    std::string rng_state;
    std::vector<std::string> rare_word_lexicon;
    int rare_word_inserts = 1;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nura
