#include "nura/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nura/errors.hpp"

namespace nura {

namespace {
constexpr double kMaskLogit = -1e30;
}

void DecodeConfig::validate() const {
    if (max_trigger_tokens < 1) throw ConfigError("max_trigger_tokens must be >= 1");
    if (min_tokens < 1 || min_tokens > max_trigger_tokens)
        throw ConfigError("min_tokens must satisfy 1 <= min_tokens <= max_trigger_tokens");
    if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
}

ad::Mat decode_mask(int vocab_size, bool allow_eos) {
    ad::Mat mask(1, vocab_size);
    mask.a[Vocab::kUnk] = kMaskLogit;
    mask.a[Vocab::kBos] = kMaskLogit;
    if (!allow_eos) mask.a[Vocab::kEos] = kMaskLogit;
    return mask;
}

std::vector<int> continue_ids(const CausalLm& lm, std::span<const int> prefix,
                              const DecodeConfig& cfg) {
    cfg.validate();
    if (prefix.empty()) throw DomainError("continue_ids: prefix must tokenize to >= 1 token");

    struct Hyp {
        std::vector<int> tokens;  // generated continuation only
        double score = 0.0;
        bool finished = false;
    };

    std::vector<Hyp> alive{Hyp{}};
    std::vector<Hyp> finished;

    for (int step = 0; step < cfg.max_trigger_tokens && !alive.empty(); ++step) {
        const bool eos_allowed = step >= cfg.min_tokens;
        std::vector<Hyp> candidates;
        for (const Hyp& h : alive) {
            std::vector<int> ctx(prefix.begin(), prefix.end());
            ctx.insert(ctx.end(), h.tokens.begin(), h.tokens.end());
            std::vector<double> lp = lm.next_log_probs(ctx);
            for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
                if (tok == Vocab::kBos || tok == Vocab::kUnk) continue;
                if (tok == cfg.eos_token && !eos_allowed) continue;  // EOS masked until min_tokens
                Hyp next = h;
                next.score += lp[static_cast<size_t>(tok)];
                if (tok == cfg.eos_token) {
                    next.finished = true;
                } else {
                    next.tokens.push_back(tok);
                }
                candidates.push_back(std::move(next));
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
        alive.clear();
        for (Hyp& h : candidates) {
            if (h.finished) {
                finished.push_back(std::move(h));
            } else if (static_cast<int>(alive.size()) < cfg.beam_width) {
                alive.push_back(std::move(h));
            }
        }
        // Beams that already beat every alive hypothesis cannot be improved.
        if (!finished.empty()) {
            double best_finished =
                std::max_element(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) {
                    return a.score < b.score;
                })->score;
            bool any_better = false;
            for (const Hyp& h : alive)
                if (h.score > best_finished) any_better = true;
            if (!any_better) {
                alive.clear();
            }
        }
    }
    // Hypotheses truncated at the cap count as finished without an EOS term.
    for (Hyp& h : alive) finished.push_back(std::move(h));
    if (finished.empty()) throw DomainError("continue_ids: decoding produced no hypotheses");
    auto best = std::max_element(finished.begin(), finished.end(),
                                 [](const Hyp& a, const Hyp& b) { return a.score < b.score; });
    return best->tokens;
}

std::string continue_text(const CausalLm& lm, const Vocab& vocab, std::string_view x,
                          const DecodeConfig& cfg) {
    std::vector<int> prefix = vocab.encode(x);
    if (prefix.empty()) throw DomainError("continue_text: input tokenizes to nothing");
    return vocab.decode(continue_ids(lm, prefix, cfg));
}

std::vector<double> gumbel_softmax(std::span<const double> logits, double tau,
                                   std::span<const double> noise) {
    if (!(tau > 0.0)) throw DomainError("gumbel_softmax: tau must be positive");
    if (logits.size() != noise.size()) throw ShapeError("gumbel_softmax: noise size mismatch");
    std::vector<double> scaled(logits.size());
    for (size_t i = 0; i < scaled.size(); ++i) scaled[i] = (logits[i] + noise[i]) / tau;
    return ad::softmax_stable(scaled);
}

double sample_gumbel(std::mt19937_64& rng) {
    // 53-bit mantissa uniform strictly inside (0,1); avoids the
    // implementation-defined behavior of uniform_real_distribution.
    double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    return -std::log(-std::log(u));
}

RelaxedDecodeResult relaxed_decode(const GeneratorPair& pair, std::span<const int> prefix,
                                   double tau, int max_len, int min_tokens,
                                   std::mt19937_64& rng) {
    if (prefix.empty()) throw DomainError("relaxed_decode: prefix must tokenize to >= 1 token");
    if (max_len < 1) throw ConfigError("relaxed_decode: max_len must be >= 1");
    const int v = pair.trainable.vocab_size();

    RelaxedDecodeResult out;
    std::vector<int> ctx(prefix.begin(), prefix.end());
    for (int step = 0; step < max_len; ++step) {
        const bool allow_eos = step >= min_tokens;
        ad::Mat mask = decode_mask(v, allow_eos);

        std::vector<double> noise(static_cast<size_t>(v));
        for (double& g : noise) g = sample_gumbel(rng);

        std::vector<double> logits = pair.trainable.next_logits(ctx);
        std::vector<double> ref_logits = pair.reference.next_logits(ctx);
        for (int k = 0; k < v; ++k) {
            logits[static_cast<size_t>(k)] += mask.a[static_cast<size_t>(k)];
            ref_logits[static_cast<size_t>(k)] += mask.a[static_cast<size_t>(k)];
        }

        std::vector<double> p = gumbel_softmax(logits, tau, noise);
        std::vector<double> p_ref = gumbel_softmax(ref_logits, tau, noise);
        int hard = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        if (hard == Vocab::kEos) break;  // the EOS step contributes no trigger token

        out.tokens.push_back(RelaxedToken{std::move(p), tau});
        out.reference.push_back(std::move(p_ref));
        out.hard_ids.push_back(hard);
        ctx.push_back(hard);
    }
    return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("kl_divergence: size mismatch");
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) throw DomainError("kl_divergence: q has zero mass where p > 0");
        kl += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    return kl;
}

double kl_regularizer(std::span<const RelaxedToken> p,
                      std::span<const std::vector<double>> p_ref) {
    if (p.size() != p_ref.size()) throw ShapeError("kl_regularizer: sequence length mismatch");
    double total = 0.0;
    for (size_t j = 0; j < p.size(); ++j) total += kl_divergence(p[j].distribution, p_ref[j]);
    return total;
}

std::vector<std::vector<double>> soft_embed(std::span<const RelaxedToken> tokens,
                                            const ad::Mat& table) {
    std::vector<std::vector<double>> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        if (static_cast<int>(t.distribution.size()) != table.rows)
            throw ShapeError("soft_embed: distribution length does not match table rows");
        std::vector<double> row(static_cast<size_t>(table.cols), 0.0);
        for (int k = 0; k < table.rows; ++k) {
            const double w = t.distribution[static_cast<size_t>(k)];
            if (w == 0.0) continue;
            for (int c = 0; c < table.cols; ++c) row[static_cast<size_t>(c)] += w * table.at(k, c);
        }
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace nura
