#include "nura/lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "nura/errors.hpp"

namespace nura {

double CausalLm::sequence_log_prob(std::span<const int> ids) const {
    double total = 0.0;
    for (size_t j = 0; j < ids.size(); ++j) {
        auto lp = next_log_probs(ids.subspan(0, j));
        if (ids[j] < 0 || ids[j] >= static_cast<int>(lp.size()))
            throw DomainError("sequence_log_prob: token id out of range");
        total += lp[static_cast<size_t>(ids[j])];
    }
    return total;
}

BigramLm BigramLm::fit(const std::vector<std::vector<int>>& corpus, int vocab_size, double add_k,
                       double mix) {
    if (vocab_size < 2) throw ConfigError("BigramLm: vocab too small");
    if (!(mix >= 0.0 && mix < 1.0)) throw ConfigError("BigramLm: mix must be in [0, 1)");
    BigramLm lm;
    lm.vocab_ = vocab_size;
    const size_t v = static_cast<size_t>(vocab_size);
    std::vector<double> init_counts(v, 0.0);
    std::vector<double> uni_counts(v, 0.0);
    std::vector<double> trans_counts(v * v, 0.0);
    for (const auto& sent : corpus) {
        for (size_t j = 0; j < sent.size(); ++j) {
            int tok = sent[j];
            if (tok < 0 || tok >= vocab_size) throw DomainError("BigramLm::fit: id out of range");
            uni_counts[static_cast<size_t>(tok)] += 1.0;
            if (j == 0)
                init_counts[static_cast<size_t>(tok)] += 1.0;
            else
                trans_counts[static_cast<size_t>(sent[j - 1]) * v + tok] += 1.0;
        }
    }
    const double uni_total = std::accumulate(uni_counts.begin(), uni_counts.end(), 0.0);
    std::vector<double> uni(v);
    for (size_t k = 0; k < v; ++k) uni[k] = (uni_counts[k] + add_k) / (uni_total + add_k * v);

    lm.log_init_.resize(v);
    lm.log_trans_.resize(v * v);
    const double init_total = std::accumulate(init_counts.begin(), init_counts.end(), 0.0);
    for (size_t k = 0; k < v; ++k) {
        double ml = init_total > 0.0 ? init_counts[k] / init_total : 0.0;
        lm.log_init_[k] = std::log(mix * ml + (1.0 - mix) * uni[k]);
    }
    for (size_t prev = 0; prev < v; ++prev) {
        double row_total = 0.0;
        for (size_t k = 0; k < v; ++k) row_total += trans_counts[prev * v + k];
        for (size_t k = 0; k < v; ++k) {
            double ml = row_total > 0.0 ? trans_counts[prev * v + k] / row_total : 0.0;
            lm.log_trans_[prev * v + k] = std::log(mix * ml + (1.0 - mix) * uni[k]);
        }
    }
    return lm;
}

BigramLm BigramLm::from_tables(std::vector<double> initial_probs,
                               std::vector<std::vector<double>> transition_probs) {
    BigramLm lm;
    lm.vocab_ = static_cast<int>(initial_probs.size());
    if (transition_probs.size() != initial_probs.size())
        throw ShapeError("BigramLm::from_tables: row count mismatch");
    auto to_log = [](double p) { return std::log(std::max(p, 1e-300)); };
    for (double p : initial_probs) lm.log_init_.push_back(to_log(p));
    for (const auto& row : transition_probs) {
        if (row.size() != initial_probs.size())
            throw ShapeError("BigramLm::from_tables: row size mismatch");
        for (double p : row) lm.log_trans_.push_back(to_log(p));
    }
    return lm;
}

std::vector<double> BigramLm::next_log_probs(std::span<const int> prefix) const {
    if (prefix.empty()) return log_init_;
    int last = prefix.back();
    if (last < 0 || last >= vocab_) throw DomainError("BigramLm: prefix id out of range");
    const size_t v = static_cast<size_t>(vocab_);
    return std::vector<double>(log_trans_.begin() + static_cast<size_t>(last) * v,
                               log_trans_.begin() + (static_cast<size_t>(last) + 1) * v);
}

void BigramLm::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["kind"] = "bigram";
    j["vocab_size"] = vocab_;
    j["log_init"] = log_init_;
    j["log_trans"] = log_trans_;
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write LM checkpoint " + path.string());
    out << j.dump() << '\n';
}

BigramLm BigramLm::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open LM checkpoint " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("kind", "") != "bigram") throw DataError("not a bigram LM checkpoint");
    BigramLm lm;
    lm.vocab_ = j.at("vocab_size").get<int>();
    lm.log_init_ = j.at("log_init").get<std::vector<double>>();
    lm.log_trans_ = j.at("log_trans").get<std::vector<double>>();
    return lm;
}

ToyLm::ToyLm(int vocab_size, int embed_dim, int hidden_dim, uint64_t seed)
    : vocab_(vocab_size), embed_(embed_dim), hidden_(hidden_dim) {
    if (vocab_size < 2 || embed_dim < 1 || hidden_dim < 1)
        throw ConfigError("ToyLm: bad dimensions");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.1);
    auto init = [&](int r, int c) {
        ad::Mat m(r, c);
        for (double& v : m.a) v = dist(rng);
        return m;
    };
    params_.add("g_emb", init(vocab_size, embed_dim));
    params_.add("g_W", init(hidden_dim, 4 * embed_dim));
    params_.add("g_b", ad::Mat(1, hidden_dim));
    params_.add("g_U", init(vocab_size, hidden_dim));
    params_.add("g_c", ad::Mat(1, vocab_size));
}

std::vector<double> ToyLm::next_logits(std::span<const int> prefix) const {
    const ad::Mat& emb = params_.value("g_emb");
    const ad::Mat& W = params_.value("g_W");
    const ad::Mat& b = params_.value("g_b");
    const ad::Mat& U = params_.value("g_U");
    const ad::Mat& c = params_.value("g_c");

    // Features: [mean(prefix); max(prefix); last-but-one; last]. The mean
    // carries a whole-input fingerprint, the max keeps distinctive words
    // undiluted, the two tail tokens carry local order.
    std::vector<double> mean(static_cast<size_t>(embed_), 0.0);
    std::vector<double> mx(static_cast<size_t>(embed_), 0.0);
    int last = Vocab::kBos;
    int last2 = Vocab::kBos;
    if (prefix.empty()) {
        for (int d = 0; d < embed_; ++d) {
            mean[d] = emb.at(Vocab::kBos, d);
            mx[d] = emb.at(Vocab::kBos, d);
        }
    } else {
        for (int d = 0; d < embed_; ++d) mx[d] = emb.at(prefix[0], d);
        for (int tok : prefix) {
            if (tok < 0 || tok >= vocab_) throw DomainError("ToyLm: prefix id out of range");
            for (int d = 0; d < embed_; ++d) {
                mean[d] += emb.at(tok, d);
                mx[d] = std::max(mx[d], emb.at(tok, d));
            }
        }
        for (double& v : mean) v /= static_cast<double>(prefix.size());
        last = prefix.back();
        if (prefix.size() >= 2) last2 = prefix[prefix.size() - 2];
    }

    std::vector<double> hidden(static_cast<size_t>(hidden_));
    for (int i = 0; i < hidden_; ++i) {
        double acc = b.a[i];
        for (int d = 0; d < embed_; ++d) {
            acc += W.at(i, d) * mean[d];
            acc += W.at(i, embed_ + d) * mx[d];
            acc += W.at(i, 2 * embed_ + d) * emb.at(last2, d);
            acc += W.at(i, 3 * embed_ + d) * emb.at(last, d);
        }
        hidden[i] = std::tanh(acc);
    }
    std::vector<double> logits(static_cast<size_t>(vocab_));
    for (int k = 0; k < vocab_; ++k) {
        double acc = c.a[k];
        for (int i = 0; i < hidden_; ++i) acc += U.at(k, i) * hidden[i];
        logits[k] = acc;
    }
    return logits;
}

std::vector<double> ToyLm::next_log_probs(std::span<const int> prefix) const {
    std::vector<double> logits = next_logits(prefix);
    double lse = ad::logsumexp(logits);
    for (double& v : logits) v -= lse;
    return logits;
}

ToyLm::BoundParams ToyLm::bind(ad::Tape& tape) {
    return {tape.param(params_, "g_emb"), tape.param(params_, "g_W"), tape.param(params_, "g_b"),
            tape.param(params_, "g_U"), tape.param(params_, "g_c")};
}

ad::Var ToyLm::logits_on_tape(ad::Tape& tape, const BoundParams& p,
                              std::span<const int> prefix) const {
    ad::Var mean{}, mx{}, last2{}, last{};
    if (prefix.empty()) {
        mean = tape.row(p.emb, Vocab::kBos);
        mx = mean;
        last2 = mean;
        last = mean;
    } else {
        std::vector<ad::Var> rows;
        rows.reserve(prefix.size());
        for (int tok : prefix) rows.push_back(tape.row(p.emb, tok));
        mean = tape.mean_rows(rows);
        mx = tape.max_rows(rows);
        last = rows.back();
        last2 = prefix.size() >= 2 ? rows[rows.size() - 2] : tape.row(p.emb, Vocab::kBos);
    }
    ad::Var z = tape.concat(tape.concat(mean, mx), tape.concat(last2, last));
    ad::Var h = tape.tanh(tape.affine(p.W, z, p.b));
    return tape.affine(p.U, h, p.c);
}

void ToyLm::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["kind"] = "toylm";
    j["vocab_size"] = vocab_;
    j["embed_dim"] = embed_;
    j["hidden_dim"] = hidden_;
    for (const auto& e : params_.entries()) j["params"][e.name] = e.value.a;
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write LM checkpoint " + path.string());
    out << j.dump() << '\n';
}

ToyLm ToyLm::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open LM checkpoint " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("kind", "") != "toylm") throw DataError("not a toy LM checkpoint");
    ToyLm lm(j.at("vocab_size").get<int>(), j.at("embed_dim").get<int>(),
             j.at("hidden_dim").get<int>(), 0);
    for (auto& e : lm.params_.entries()) {
        auto vals = j.at("params").at(e.name).get<std::vector<double>>();
        if (vals.size() != e.value.size()) throw ShapeError("LM checkpoint shape mismatch");
        e.value.a = std::move(vals);
    }
    return lm;
}

double fit_causal_lm(ToyLm& lm, const std::vector<std::vector<int>>& corpus, int epochs,
                     double learning_rate, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    ad::ParamStore::AdamConfig adam;
    adam.lr = learning_rate;
    adam.weight_decay = 0.0;

    double final_loss = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        size_t steps = 0;
        for (size_t si : order) {
            std::vector<int> ids = corpus[si];
            ids.push_back(Vocab::kEos);
            ad::Tape tape;
            auto bound = lm.bind(tape);
            std::vector<ad::Var> losses;
            for (size_t j = 0; j < ids.size(); ++j) {
                ad::Var logits = lm.logits_on_tape(tape, bound,
                                                   std::span<const int>(ids.data(), j));
                losses.push_back(tape.cross_entropy_with_logits(logits, ids[j]));
            }
            ad::Var loss = tape.mean_scalars(losses);
            epoch_loss += tape.value_of(loss);
            ++steps;
            auto grads = tape.backward(loss);
            lm.params().adam_step(grads, adam);
        }
        final_loss = steps ? epoch_loss / static_cast<double>(steps) : 0.0;
    }
    return final_loss;
}

std::unique_ptr<CausalLm> load_causal_lm(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open LM checkpoint " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    std::string kind = j.value("kind", "");
    if (kind == "bigram") return std::make_unique<BigramLm>(BigramLm::load(path));
    if (kind == "toylm") return std::make_unique<ToyLm>(ToyLm::load(path));
    throw DataError("unknown LM checkpoint kind '" + kind + "' in " + path.string());
}

std::vector<std::vector<int>> encode_corpus(const Vocab& vocab,
                                            const std::vector<std::string>& texts) {
    std::vector<std::vector<int>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(vocab.encode(t));
    return out;
}

}  // namespace nura
