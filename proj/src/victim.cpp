#include "nura/victim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "nura/errors.hpp"
#include "nura/eval.hpp"

namespace nura {

Classifier::Classifier(int vocab_size, int num_classes, int embed_dim, int hidden_dim,
                       uint64_t seed, int pair_buckets)
    : vocab_(vocab_size),
      classes_(num_classes),
      embed_(embed_dim),
      hidden_(hidden_dim),
      pair_buckets_(pair_buckets) {
    if (vocab_size < 2 || num_classes < 2 || embed_dim < 1 || hidden_dim < 1 || pair_buckets < 1)
        throw ConfigError("Classifier: bad dimensions");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.1);
    auto init = [&](int r, int c) {
        ad::Mat m(r, c);
        for (double& v : m.a) v = dist(rng);
        return m;
    };
    params_.add("f_emb", init(vocab_size, embed_dim));
    params_.add("f_pair", init(pair_buckets, embed_dim));
    params_.add("f_W1", init(hidden_dim, 2 * embed_dim));
    params_.add("f_b1", ad::Mat(1, hidden_dim));
    params_.add("f_W2", ad::Mat(num_classes, hidden_dim));  // zero head: uniform before training
    params_.add("f_b2", ad::Mat(1, num_classes));
}

int Classifier::pair_bucket(int first, int second) const {
    uint64_t h = static_cast<uint64_t>(first) * 1000003ULL + static_cast<uint64_t>(second) * 8191ULL;
    return static_cast<int>(h % static_cast<uint64_t>(pair_buckets_));
}

namespace {

std::vector<double> forward_from_features(const ad::ParamStore& params,
                                          std::vector<double> features, int hidden, int classes) {
    const ad::Mat& W1 = params.value("f_W1");
    const ad::Mat& b1 = params.value("f_b1");
    const ad::Mat& W2 = params.value("f_W2");
    const ad::Mat& b2 = params.value("f_b2");
    std::vector<double> h(static_cast<size_t>(hidden));
    for (int i = 0; i < hidden; ++i) {
        double acc = b1.a[i];
        for (size_t d = 0; d < features.size(); ++d)
            acc += W1.at(i, static_cast<int>(d)) * features[d];
        h[i] = std::tanh(acc);
    }
    std::vector<double> logits(static_cast<size_t>(classes));
    for (int k = 0; k < classes; ++k) {
        double acc = b2.a[k];
        for (int i = 0; i < hidden; ++i) acc += W2.at(k, i) * h[i];
        logits[k] = acc;
    }
    return ad::softmax_stable(logits);
}

int soft_argmax(const std::vector<double>& dist) {
    return static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
}

}  // namespace

std::vector<double> Classifier::classify_mixed(std::span<const SoftToken> seq) const {
    if (seq.empty()) throw DomainError("classify: empty input");
    const ad::Mat& emb = params_.value("f_emb");
    const ad::Mat& pair = params_.value("f_pair");

    auto check_id = [&](int tok) {
        if (tok < 0 || tok >= vocab_) throw DomainError("classify: token id out of range");
    };
    auto check_dist = [&](const std::vector<double>& dist) {
        if (static_cast<int>(dist.size()) != vocab_)
            throw ShapeError("classify: distribution length does not match vocab");
    };

    // Unigram channel: mean embedding with soft positions mixed over emb.
    std::vector<double> uni(static_cast<size_t>(embed_), 0.0);
    for (const auto& item : seq) {
        if (std::holds_alternative<int>(item)) {
            int tok = std::get<int>(item);
            check_id(tok);
            for (int d = 0; d < embed_; ++d) uni[d] += emb.at(tok, d);
        } else {
            const auto& dist = std::get<std::vector<double>>(item);
            check_dist(dist);
            for (int k = 0; k < vocab_; ++k) {
                if (dist[static_cast<size_t>(k)] == 0.0) continue;
                for (int d = 0; d < embed_; ++d)
                    uni[d] += dist[static_cast<size_t>(k)] * emb.at(k, d);
            }
        }
    }
    for (double& v : uni) v /= static_cast<double>(seq.size());

    // Pair channel: mean over all ordered position pairs (i < j) of hashed
    // pair embeddings. A pair with one soft side mixes over the vocabulary;
    // soft-soft pairs fall back to the argmax ids.
    std::vector<double> pr(static_cast<size_t>(embed_), 0.0);
    const size_t n = seq.size();
    size_t pair_count = 0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            ++pair_count;
            const bool i_hard = std::holds_alternative<int>(seq[i]);
            const bool j_hard = std::holds_alternative<int>(seq[j]);
            if (i_hard && j_hard) {
                int b = pair_bucket(std::get<int>(seq[i]), std::get<int>(seq[j]));
                for (int d = 0; d < embed_; ++d) pr[d] += pair.at(b, d);
            } else if (i_hard) {
                int a = std::get<int>(seq[i]);
                const auto& dist = std::get<std::vector<double>>(seq[j]);
                for (int k = 0; k < vocab_; ++k) {
                    double w = dist[static_cast<size_t>(k)];
                    if (w == 0.0) continue;
                    int b = pair_bucket(a, k);
                    for (int d = 0; d < embed_; ++d) pr[d] += w * pair.at(b, d);
                }
            } else if (j_hard) {
                const auto& dist = std::get<std::vector<double>>(seq[i]);
                int c = std::get<int>(seq[j]);
                for (int k = 0; k < vocab_; ++k) {
                    double w = dist[static_cast<size_t>(k)];
                    if (w == 0.0) continue;
                    int b = pair_bucket(k, c);
                    for (int d = 0; d < embed_; ++d) pr[d] += w * pair.at(b, d);
                }
            } else {
                int b = pair_bucket(soft_argmax(std::get<std::vector<double>>(seq[i])),
                                    soft_argmax(std::get<std::vector<double>>(seq[j])));
                for (int d = 0; d < embed_; ++d) pr[d] += pair.at(b, d);
            }
        }
    }
    if (pair_count) {
        for (double& v : pr) v /= static_cast<double>(pair_count);
    }

    std::vector<double> features = uni;
    features.insert(features.end(), pr.begin(), pr.end());
    return forward_from_features(params_, std::move(features), hidden_, classes_);
}

std::vector<double> Classifier::classify_ids(std::span<const int> ids) const {
    std::vector<SoftToken> seq;
    seq.reserve(ids.size());
    for (int tok : ids) seq.emplace_back(tok);
    return classify_mixed(seq);
}

std::vector<double> Classifier::classify_text(const Vocab& vocab, std::string_view text) const {
    return classify_ids(vocab.encode(text));
}

int Classifier::predict_text(const Vocab& vocab, std::string_view text) const {
    auto p = classify_text(vocab, text);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

Classifier::BoundParams Classifier::bind(ad::Tape& tape) {
    return {tape.param(params_, "f_emb"), tape.param(params_, "f_pair"),
            tape.param(params_, "f_W1"), tape.param(params_, "f_b1"),
            tape.param(params_, "f_W2"), tape.param(params_, "f_b2")};
}

ad::Var Classifier::logits_on_tape(ad::Tape& tape, const BoundParams& p,
                                   const std::vector<TapeToken>& seq) const {
    if (seq.empty()) throw DomainError("classify: empty input");

    std::vector<ad::Var> uni_rows;
    uni_rows.reserve(seq.size());
    for (const auto& t : seq) {
        if (t.dist)
            uni_rows.push_back(tape.soft_row(*t.dist, p.emb));
        else
            uni_rows.push_back(tape.row(p.emb, t.id));
    }
    ad::Var uni = tape.mean_rows(uni_rows);

    std::vector<ad::Var> pair_rows;
    const size_t n = seq.size();
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            const auto& a = seq[i];
            const auto& b = seq[j];
            if (!a.dist && !b.dist) {
                pair_rows.push_back(tape.row(p.pair, pair_bucket(a.id, b.id)));
            } else if (!a.dist) {
                std::vector<int> map(static_cast<size_t>(vocab_));
                for (int k = 0; k < vocab_; ++k) map[static_cast<size_t>(k)] = pair_bucket(a.id, k);
                pair_rows.push_back(tape.soft_row_gather(*b.dist, p.pair, map));
            } else if (!b.dist) {
                std::vector<int> map(static_cast<size_t>(vocab_));
                for (int k = 0; k < vocab_; ++k) map[static_cast<size_t>(k)] = pair_bucket(k, b.id);
                pair_rows.push_back(tape.soft_row_gather(*a.dist, p.pair, map));
            } else {
                // soft-soft falls back to the argmax pair; the relaxed
                // gradient reaches the generator through the other channels
                pair_rows.push_back(tape.row(p.pair, pair_bucket(a.hard, b.hard)));
            }
        }
    }

    ad::Var features = pair_rows.empty()
                           ? tape.concat(uni, tape.constant(ad::Mat(1, embed_)))
                           : tape.concat(uni, tape.mean_rows(pair_rows));
    ad::Var h = tape.tanh(tape.affine(p.W1, features, p.b1));
    return tape.affine(p.W2, h, p.b2);
}

double classify_loss(std::span<const double> pred, int label) {
    if (label < 0 || label >= static_cast<int>(pred.size()))
        throw DomainError("classify_loss: label out of range");
    return -std::log(std::max(pred[static_cast<size_t>(label)], 1e-12));
}

double total_loss(double loss_classify, double loss_cross, double loss_kl,
                  const std::array<double, 3>& lambdas) {
    double sum = lambdas[0] + lambdas[1] + lambdas[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("lambdas must sum to 1");
    for (double l : lambdas)
        if (l < 0.0) throw ConfigError("lambdas must be nonnegative");
    return lambdas[0] * loss_classify + lambdas[1] * loss_cross + lambdas[2] * loss_kl;
}

std::vector<CrossSample> build_cross_batch(std::span<const Sample> batch,
                                           const std::map<int, std::string>& triggers,
                                           uint64_t seed, std::string_view separator) {
    std::vector<CrossSample> out;
    const int n = static_cast<int>(batch.size());
    if (n < 2) return out;  // cross loss skipped for singleton batches
    std::mt19937_64 rng(seed);
    for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<int> pick(0, n - 2);
        int j = pick(rng);
        if (j >= i) ++j;
        auto it = triggers.find(j);
        if (it == triggers.end())
            throw DataError("build_cross_batch: no trigger for batch position " + std::to_string(j));
        out.push_back({splice(batch[static_cast<size_t>(i)].text, it->second, separator),
                       batch[static_cast<size_t>(i)].label, i, j});
    }
    return out;
}

Variant parse_variant(std::string_view name) {
    if (name == "full") return Variant::full;
    if (name == "ntg") return Variant::ntg;
    if (name == "nc") return Variant::nc;
    throw ConfigError("unknown variant '" + std::string(name) + "'");
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::ntg: return "ntg";
        case Variant::nc: return "nc";
    }
    return "full";
}

void TrainConfig::validate() const {
    double sum = lambdas[0] + lambdas[1] + lambdas[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("lambdas must sum to 1");
    for (double l : lambdas)
        if (l < 0.0) throw ConfigError("lambdas must be nonnegative");
    if (variant == Variant::nc && lambdas[1] != 0.0)
        throw ConfigError("variant=nc requires lambda2 = 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (tau_end == 0.0) throw ConfigError("tau_end must be positive");
    if (!(poison_rate > 0.0 && poison_rate <= 1.0))
        throw ConfigError("poison_rate must be in (0, 1]");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
    decode.validate();
}

BatchTargets plan_batch_targets(std::span<const int> batch_indices, const Dataset& d,
                                const PoisonPlan& plan, bool with_cross, std::mt19937_64& rng) {
    BatchTargets t;
    const int n = static_cast<int>(batch_indices.size());
    for (int m = 0; m < n; ++m) {
        int idx = batch_indices[static_cast<size_t>(m)];
        if (plan.contains(idx))
            t.poison.push_back({m, plan.attacked_label(d.samples[static_cast<size_t>(idx)].label,
                                                       d.num_classes())});
    }
    if (with_cross && n >= 2) {
        for (int m = 0; m < n; ++m) {
            std::uniform_int_distribution<int> pick(0, n - 2);
            int p = pick(rng);
            if (p >= m) ++p;
            int idx = batch_indices[static_cast<size_t>(m)];
            t.cross.push_back({m, p, d.samples[static_cast<size_t>(idx)].label});
        }
    }
    return t;
}

namespace {

double tau_at_epoch(const TrainConfig& cfg, int epoch) {
    if (cfg.tau_end < 0.0 || cfg.epochs <= 1) return cfg.tau;
    double f = static_cast<double>(epoch - 1) / static_cast<double>(cfg.epochs - 1);
    return cfg.tau + f * (cfg.tau_end - cfg.tau);
}

struct DevMetrics {
    double cacc = 0.0, asr = 0.0, cta = 0.0;
};

DevMetrics eval_dev(const Classifier& f, const Vocab& vocab, const Dataset& dev,
                    const std::map<int, std::string>& triggers, const TrainConfig& cfg) {
    DevMetrics m;
    m.cacc = cacc(f, vocab, dev);
    auto poisoned = poison_eligible(dev, triggers, cfg.policy, cfg.separator);
    m.asr = poisoned.empty() ? 0.0 : asr(f, vocab, poisoned);
    m.cta = dev.samples.size() < 2 || triggers.size() < 2
                ? 0.0
                : cta(f, vocab, dev.samples, triggers, cfg.seed, cfg.separator);
    return m;
}

std::map<int, std::string> generator_triggers(const ToyLm& g, const Vocab& vocab,
                                              const Dataset& d, const DecodeConfig& decode) {
    std::map<int, std::string> out;
    for (size_t i = 0; i < d.samples.size(); ++i)
        out[static_cast<int>(i)] = continue_text(g, vocab, d.samples[i].text, decode);
    return out;
}

void check_finite(double loss_classify, double loss_cross, double loss_kl, double total,
                  int epoch, size_t batch_index) {
    if (std::isfinite(total) && std::isfinite(loss_classify) && std::isfinite(loss_cross) &&
        std::isfinite(loss_kl))
        return;
    std::ostringstream dump;
    dump << "training diverged at epoch " << epoch << " batch " << batch_index
         << ": loss_classify=" << loss_classify << " loss_cross=" << loss_cross
         << " loss_kl=" << loss_kl << " total=" << total;
    throw DivergenceError(dump.str());
}

std::vector<std::vector<int>> make_batches(size_t n, int batch_size, std::mt19937_64& rng) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> batches;
    for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size))
        batches.emplace_back(order.begin() + start,
                             order.begin() + std::min(n, start + static_cast<size_t>(batch_size)));
    return batches;
}

}  // namespace

JointStepResult joint_step(const Dataset& d, std::span<const int> batch, const Vocab& vocab,
                           GeneratorPair& pair, Classifier& f, const TrainConfig& cfg,
                           const PoisonPlan& plan, double tau,
                           const std::map<int, std::string>& frozen_triggers,
                           std::mt19937_64& rng, bool compute_grads) {
    const bool with_cross = cfg.variant != Variant::nc;
    const int v = vocab.size();
    BatchTargets targets = plan_batch_targets(batch, d, plan, with_cross, rng);

    ad::Tape tape;
    auto fb = f.bind(tape);
    ToyLm::BoundParams gb{};
    if (cfg.variant != Variant::ntg) gb = pair.trainable.bind(tape);

    const int n = static_cast<int>(batch.size());
    std::vector<std::vector<int>> token_ids(static_cast<size_t>(n));
    std::vector<std::vector<Classifier::TapeToken>> member_seqs(static_cast<size_t>(n));
    std::vector<ad::Var> clean_terms;
    for (int m = 0; m < n; ++m) {
        int idx = batch[static_cast<size_t>(m)];
        token_ids[static_cast<size_t>(m)] = vocab.encode(d.samples[static_cast<size_t>(idx)].text);
        auto& seq = member_seqs[static_cast<size_t>(m)];
        for (int tok : token_ids[static_cast<size_t>(m)])
            seq.push_back(Classifier::TapeToken::hard_token(tok));
        clean_terms.push_back(tape.cross_entropy_with_logits(
            f.logits_on_tape(tape, fb, seq), d.samples[static_cast<size_t>(idx)].label));
    }

    // Relaxed decodes for the members that need a trigger this batch:
    // poisoned members plus cross partners.
    std::vector<char> needs_decode(static_cast<size_t>(n), 0);
    for (const auto& p : targets.poison) needs_decode[static_cast<size_t>(p.member)] = 1;
    if (with_cross)
        for (const auto& c : targets.cross) needs_decode[static_cast<size_t>(c.partner)] = 1;

    std::vector<std::vector<Classifier::TapeToken>> trigger_tokens(static_cast<size_t>(n));
    std::vector<ad::Var> kl_terms;
    if (cfg.variant != Variant::ntg) {
        for (int m = 0; m < n; ++m) {
            if (!needs_decode[static_cast<size_t>(m)]) continue;
            std::vector<int> ctx = token_ids[static_cast<size_t>(m)];
            std::vector<ad::Var> step_kls;
            for (int step = 0; step < cfg.decode.max_trigger_tokens; ++step) {
                const bool allow_eos = step >= cfg.decode.min_tokens;
                ad::Mat mask = decode_mask(v, allow_eos);
                std::vector<double> noise(static_cast<size_t>(v));
                for (double& g : noise) g = sample_gumbel(rng);

                ad::Var logits = pair.trainable.logits_on_tape(tape, gb, ctx);
                logits = tape.add_const(logits, mask);
                ad::Var p = tape.gumbel_softmax(logits, tau, noise);

                std::vector<double> ref_logits = pair.reference.next_logits(ctx);
                for (int k = 0; k < v; ++k)
                    ref_logits[static_cast<size_t>(k)] += mask.a[static_cast<size_t>(k)];
                std::vector<double> q = gumbel_softmax(ref_logits, tau, noise);

                const ad::Mat& pv = tape.val(p);
                int hard = static_cast<int>(std::max_element(pv.a.begin(), pv.a.end()) -
                                            pv.a.begin());
                if (hard == Vocab::kEos) break;

                step_kls.push_back(tape.kl_to_const(p, q));
                trigger_tokens[static_cast<size_t>(m)].push_back(
                    Classifier::TapeToken::soft_token(p, hard));
                ctx.push_back(hard);
            }
            if (!step_kls.empty()) {
                ad::Var member_kl = step_kls[0];
                for (size_t k = 1; k < step_kls.size(); ++k)
                    member_kl = tape.add(member_kl, step_kls[k]);
                kl_terms.push_back(member_kl);
            }
        }
    }

    auto spliced_seq = [&](int member, const std::vector<Classifier::TapeToken>& trig) {
        std::vector<Classifier::TapeToken> seq = member_seqs[static_cast<size_t>(member)];
        seq.insert(seq.end(), trig.begin(), trig.end());
        return seq;
    };
    auto text_seq = [&](const std::string& text) {
        std::vector<Classifier::TapeToken> seq;
        for (int tok : vocab.encode(text)) seq.push_back(Classifier::TapeToken::hard_token(tok));
        return seq;
    };

    std::vector<ad::Var> poison_terms;
    for (const auto& p : targets.poison) {
        std::vector<Classifier::TapeToken> seq;
        if (cfg.variant == Variant::ntg) {
            int idx = batch[static_cast<size_t>(p.member)];
            seq = text_seq(splice(d.samples[static_cast<size_t>(idx)].text,
                                  frozen_triggers.at(idx), cfg.separator));
        } else {
            if (trigger_tokens[static_cast<size_t>(p.member)].empty()) continue;
            seq = spliced_seq(p.member, trigger_tokens[static_cast<size_t>(p.member)]);
        }
        poison_terms.push_back(
            tape.cross_entropy_with_logits(f.logits_on_tape(tape, fb, seq), p.attacked_label));
    }

    std::vector<ad::Var> cross_terms;
    for (const auto& c : targets.cross) {
        std::vector<Classifier::TapeToken> seq;
        if (cfg.variant == Variant::ntg) {
            int idx = batch[static_cast<size_t>(c.member)];
            int pidx = batch[static_cast<size_t>(c.partner)];
            seq = text_seq(splice(d.samples[static_cast<size_t>(idx)].text,
                                  frozen_triggers.at(pidx), cfg.separator));
        } else {
            if (trigger_tokens[static_cast<size_t>(c.partner)].empty()) continue;
            seq = spliced_seq(c.member, trigger_tokens[static_cast<size_t>(c.partner)]);
        }
        cross_terms.push_back(
            tape.cross_entropy_with_logits(f.logits_on_tape(tape, fb, seq), c.label));
    }

    ad::Var loss_classify = tape.mean_scalars(clean_terms);
    if (!poison_terms.empty())
        loss_classify = tape.add(loss_classify, tape.mean_scalars(poison_terms));
    ad::Var total = tape.scale(loss_classify, cfg.lambdas[0]);

    JointStepResult result;
    if (!cross_terms.empty() && cfg.lambdas[1] > 0.0) {
        ad::Var loss_cross = tape.mean_scalars(cross_terms);
        result.loss_cross = tape.value_of(loss_cross);
        total = tape.add(total, tape.scale(loss_cross, cfg.lambdas[1]));
    }
    if (!kl_terms.empty()) {
        ad::Var loss_kl = tape.mean_scalars(kl_terms);
        result.loss_kl = tape.value_of(loss_kl);
        total = tape.add(total, tape.scale(loss_kl, cfg.lambdas[2]));
    }
    result.loss_classify = tape.value_of(loss_classify);
    result.total = tape.value_of(total);

    if (compute_grads) {
        auto grads = tape.backward(total);
        for (auto& [name, g] : grads) {
            if (f.params().has(name) && pair.trainable.params().has(name))
                throw ConfigError("ambiguous parameter name '" + name + "'");
            if (f.params().has(name))
                result.classifier_grads.emplace(name, std::move(g));
            else
                result.generator_grads.emplace(name, std::move(g));
        }
    }
    return result;
}

TrainResult train(const Dataset& clean_train, const Dataset& dev, const Vocab& vocab,
                  GeneratorPair& pair, Classifier& f, const TrainConfig& cfg, int start_epoch,
                  std::mt19937_64* resume_rng) {
    cfg.validate();
    clean_train.validate();
    dev.validate();
    if (pair.trainable.vocab_size() != vocab.size() || f.vocab_size() != vocab.size())
        throw ConfigError("train: models and vocab disagree on vocabulary size");

    TrainResult result;
    result.plan = make_plan(clean_train, cfg.poison_rate, cfg.policy, cfg.seed);

    std::mt19937_64 own_rng(cfg.seed);
    std::mt19937_64& rng = resume_rng ? *resume_rng : own_rng;

    const bool train_generator = cfg.variant != Variant::ntg;

    // variant=ntg generates triggers once from the frozen model.
    std::map<int, std::string> frozen_triggers;
    if (cfg.variant == Variant::ntg)
        frozen_triggers = generator_triggers(pair.reference, vocab, clean_train, cfg.decode);

    ad::ParamStore::AdamConfig adam;
    adam.lr = cfg.learning_rate;
    adam.weight_decay = cfg.weight_decay;

    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        const double tau = tau_at_epoch(cfg, epoch);
        auto batches = make_batches(clean_train.size(), cfg.batch_size, rng);

        double sum_classify = 0.0, sum_cross = 0.0, sum_kl = 0.0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            JointStepResult step = joint_step(clean_train, batches[bi], vocab, pair, f, cfg,
                                              result.plan, tau, frozen_triggers, rng, true);
            check_finite(step.loss_classify, step.loss_cross, step.loss_kl, step.total, epoch, bi);
            sum_classify += step.loss_classify;
            sum_cross += step.loss_cross;
            sum_kl += step.loss_kl;
            f.params().adam_step(step.classifier_grads, adam);
            if (train_generator && !step.generator_grads.empty())
                pair.trainable.params().adam_step(step.generator_grads, adam);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        const double nb = static_cast<double>(batches.size());
        rec.loss_classify = sum_classify / nb;
        rec.loss_cross = sum_cross / nb;
        rec.loss_kl = sum_kl / nb;
        auto dev_triggers = generator_triggers(cfg.variant == Variant::ntg ? pair.reference
                                                                           : pair.trainable,
                                               vocab, dev, cfg.decode);
        DevMetrics dm = eval_dev(f, vocab, dev, dev_triggers, cfg);
        rec.dev_cacc = dm.cacc;
        rec.dev_asr = dm.asr;
        rec.dev_cta = dm.cta;
        result.history.push_back(rec);
    }
    return result;
}

TrainResult train_supervised(const Dataset& train_data, const Dataset& dev, const Vocab& vocab,
                             const std::optional<SupervisedDevEval>& dev_eval, Classifier& f,
                             const TrainConfig& cfg, int start_epoch,
                             std::mt19937_64* resume_rng) {
    cfg.validate();
    train_data.validate();
    dev.validate();

    TrainResult result;
    std::mt19937_64 own_rng(cfg.seed);
    std::mt19937_64& rng = resume_rng ? *resume_rng : own_rng;

    std::vector<std::vector<int>> token_ids;
    token_ids.reserve(train_data.size());
    for (const auto& s : train_data.samples) token_ids.push_back(vocab.encode(s.text));

    ad::ParamStore::AdamConfig adam;
    adam.lr = cfg.learning_rate;
    adam.weight_decay = cfg.weight_decay;

    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        auto batches = make_batches(train_data.size(), cfg.batch_size, rng);
        double sum_classify = 0.0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            ad::Tape tape;
            auto fb = f.bind(tape);
            std::vector<ad::Var> terms;
            for (int idx : batches[bi]) {
                std::vector<Classifier::TapeToken> seq;
                for (int tok : token_ids[static_cast<size_t>(idx)])
                    seq.push_back(Classifier::TapeToken::hard_token(tok));
                terms.push_back(tape.cross_entropy_with_logits(
                    f.logits_on_tape(tape, fb, seq),
                    train_data.samples[static_cast<size_t>(idx)].label));
            }
            ad::Var loss = tape.mean_scalars(terms);
            double loss_value = tape.value_of(loss);
            check_finite(loss_value, 0.0, 0.0, loss_value, epoch, bi);
            sum_classify += loss_value;
            auto grads = tape.backward(loss);
            f.params().adam_step(grads, adam);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss_classify = sum_classify / static_cast<double>(batches.size());
        rec.dev_cacc = cacc(f, vocab, dev);
        if (dev_eval) {
            rec.dev_asr = dev_eval->poisoned.empty() ? 0.0 : asr(f, vocab, dev_eval->poisoned);
            rec.dev_cta = dev.samples.size() < 2 || dev_eval->triggers.size() < 2
                              ? 0.0
                              : cta(f, vocab, dev.samples, dev_eval->triggers, cfg.seed,
                                    cfg.separator);
        }
        result.history.push_back(rec);
    }
    return result;
}

void save_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path,
                  bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out.good()) throw IoError("cannot write history " + path.string());
    for (const auto& r : history) {
        nlohmann::json j;
        j["epoch"] = r.epoch;
        j["loss_classify"] = r.loss_classify;
        j["loss_cross"] = r.loss_cross;
        j["loss_kl"] = r.loss_kl;
        j["dev_cacc"] = r.dev_cacc;
        j["dev_asr"] = r.dev_asr;
        j["dev_cta"] = r.dev_cta;
        out << j.dump() << '\n';
    }
}

std::vector<EpochRecord> load_history(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open history " + path.string());
    std::vector<EpochRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        EpochRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.loss_classify = j.at("loss_classify").get<double>();
        r.loss_cross = j.at("loss_cross").get<double>();
        r.loss_kl = j.at("loss_kl").get<double>();
        r.dev_cacc = j.at("dev_cacc").get<double>();
        r.dev_asr = j.at("dev_asr").get<double>();
        r.dev_cta = j.at("dev_cta").get<double>();
        out.push_back(r);
    }
    return out;
}

namespace {

nlohmann::json store_to_json(const ad::ParamStore& store) {
    nlohmann::json j;
    j["adam_t"] = store.adam_steps();
    for (const auto& e : store.entries()) {
        j["values"][e.name] = e.value.a;
        j["adam_m"][e.name] = e.m.a;
        j["adam_v"][e.name] = e.v.a;
    }
    return j;
}

void store_from_json(ad::ParamStore& store, const nlohmann::json& j) {
    store.set_adam_steps(j.at("adam_t").get<long>());
    for (auto& e : store.entries()) {
        auto vals = j.at("values").at(e.name).get<std::vector<double>>();
        if (vals.size() != e.value.size()) throw ShapeError("checkpoint shape mismatch: " + e.name);
        e.value.a = std::move(vals);
        e.m.a = j.at("adam_m").at(e.name).get<std::vector<double>>();
        e.v.a = j.at("adam_v").at(e.name).get<std::vector<double>>();
        if (e.m.size() != e.value.size() || e.v.size() != e.value.size())
            throw ShapeError("checkpoint moment shape mismatch: " + e.name);
    }
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["lambdas"] = cfg.lambdas;
    j["tau"] = cfg.tau;
    j["tau_end"] = cfg.tau_end;
    j["poison_rate"] = cfg.poison_rate;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["learning_rate"] = cfg.learning_rate;
    j["weight_decay"] = cfg.weight_decay;
    j["variant"] = variant_name(cfg.variant);
    j["seed"] = cfg.seed;
    j["policy"] = cfg.policy.kind == LabelPolicy::Kind::fixed_target ? "fixed_target" : "rotate_next";
    j["target_label"] = cfg.policy.target;
    j["separator"] = cfg.separator;
    j["decode"] = {{"max_trigger_tokens", cfg.decode.max_trigger_tokens},
                   {"beam_width", cfg.decode.beam_width},
                   {"eos_token", cfg.decode.eos_token},
                   {"min_tokens", cfg.decode.min_tokens}};
    return j;
}

TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.lambdas = j.at("lambdas").get<std::array<double, 3>>();
    cfg.tau = j.at("tau").get<double>();
    cfg.tau_end = j.at("tau_end").get<double>();
    cfg.poison_rate = j.at("poison_rate").get<double>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.weight_decay = j.at("weight_decay").get<double>();
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.policy = j.at("policy").get<std::string>() == "fixed_target"
                     ? LabelPolicy::fixed_target(j.at("target_label").get<int>())
                     : LabelPolicy::rotate_next();
    cfg.separator = j.at("separator").get<std::string>();
    const auto& d = j.at("decode");
    cfg.decode.max_trigger_tokens = d.at("max_trigger_tokens").get<int>();
    cfg.decode.beam_width = d.at("beam_width").get<int>();
    cfg.decode.eos_token = d.at("eos_token").get<int>();
    cfg.decode.min_tokens = d.at("min_tokens").get<int>();
    return cfg;
}

nlohmann::json toylm_to_json(const ToyLm& lm) {
    nlohmann::json j;
    j["vocab_size"] = lm.vocab_size();
    j["embed_dim"] = lm.embed_dim();
    j["hidden_dim"] = lm.hidden_dim();
    j["store"] = store_to_json(lm.params());
    return j;
}

ToyLm toylm_from_json(const nlohmann::json& j) {
    ToyLm lm(j.at("vocab_size").get<int>(), j.at("embed_dim").get<int>(),
             j.at("hidden_dim").get<int>(), 0);
    store_from_json(lm.params(), j.at("store"));
    return lm;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    nlohmann::json j;
    j["schema"] = "nura-checkpoint-v1";
    j["attack"] = ck.attack;
    j["config"] = config_to_json(ck.cfg);
    j["vocab"] = ck.vocab_tokens;
    j["classifier"] = {{"vocab_size", ck.classifier.vocab_size()},
                       {"num_classes", ck.classifier.num_classes()},
                       {"embed_dim", ck.classifier.embed_dim()},
                       {"hidden_dim", ck.classifier.hidden_dim()},
                       {"pair_buckets", ck.classifier.pair_buckets()},
                       {"store", store_to_json(ck.classifier.params())}};
    j["generator"] = ck.generator ? toylm_to_json(*ck.generator) : nlohmann::json();
    j["reference"] = ck.reference ? toylm_to_json(*ck.reference) : nlohmann::json();
    j["reference_hash"] = ck.reference_hash;
    j["epochs_done"] = ck.epochs_done;
    j["rng_state"] = ck.rng_state;
    j["rare_word"] = {{"lexicon", ck.rare_word_lexicon}, {"n_insert", ck.rare_word_inserts}};
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open checkpoint " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("schema", "") != "nura-checkpoint-v1")
        throw DataError("not a checkpoint file: " + path.string());
    Checkpoint ck;
    ck.attack = j.at("attack").get<std::string>();
    ck.cfg = config_from_json(j.at("config"));
    ck.vocab_tokens = j.at("vocab").get<std::vector<std::string>>();
    const auto& c = j.at("classifier");
    ck.classifier = Classifier(c.at("vocab_size").get<int>(), c.at("num_classes").get<int>(),
                               c.at("embed_dim").get<int>(), c.at("hidden_dim").get<int>(), 0,
                               c.at("pair_buckets").get<int>());
    store_from_json(ck.classifier.params(), c.at("store"));
    if (!j.at("generator").is_null()) ck.generator = toylm_from_json(j.at("generator"));
    if (!j.at("reference").is_null()) ck.reference = toylm_from_json(j.at("reference"));
    ck.reference_hash = j.at("reference_hash").get<uint64_t>();
    ck.epochs_done = j.at("epochs_done").get<int>();
    ck.rng_state = j.at("rng_state").get<std::string>();
    ck.rare_word_lexicon = j.at("rare_word").at("lexicon").get<std::vector<std::string>>();
    ck.rare_word_inserts = j.at("rare_word").at("n_insert").get<int>();
    return ck;
}

}  // namespace nura
