#include "nura/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "nura/errors.hpp"

namespace nura::ad {

Mat Mat::row_vector(std::span<const double> v) {
    Mat m(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), m.a.begin());
    return m;
}

Mat Mat::scalar(double v) {
    Mat m(1, 1);
    m.a[0] = v;
    return m;
}

Mat& ParamStore::add(const std::string& name, Mat init) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' already registered");
    index_[name] = entries_.size();
    Entry e;
    e.name = name;
    e.m = Mat(init.rows, init.cols);
    e.v = Mat(init.rows, init.cols);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    return entries_.back().value;
}

Mat& ParamStore::value(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

const Mat& ParamStore::value(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) != 0; }

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

void ParamStore::adam_step(const std::map<std::string, Mat>& grads, const AdamConfig& cfg) {
    ++adam_t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam_t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam_t_));
    for (auto& e : entries_) {
        auto it = grads.find(e.name);
        if (it == grads.end()) continue;
        const Mat& g = it->second;
        if (g.size() != e.value.size()) throw ShapeError("gradient shape mismatch for " + e.name);
        for (size_t i = 0; i < e.value.size(); ++i) {
            e.m.a[i] = cfg.beta1 * e.m.a[i] + (1.0 - cfg.beta1) * g.a[i];
            e.v.a[i] = cfg.beta2 * e.v.a[i] + (1.0 - cfg.beta2) * g.a[i] * g.a[i];
            const double mhat = e.m.a[i] / bc1;
            const double vhat = e.v.a[i] / bc2;
            e.value.a[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                      cfg.weight_decay * e.value.a[i]);
        }
    }
}

uint64_t ParamStore::fnv1a_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& e : entries_) {
        mix(e.name.data(), e.name.size());
        mix(e.value.a.data(), e.value.a.size() * sizeof(double));
    }
    return h;
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> flat;
    for (const auto& e : entries_) flat.insert(flat.end(), e.value.a.begin(), e.value.a.end());
    return flat;
}

void ParamStore::unflatten(std::span<const double> flat) {
    size_t pos = 0;
    for (auto& e : entries_) {
        if (pos + e.value.size() > flat.size()) throw ShapeError("unflatten: too few values");
        std::copy(flat.begin() + pos, flat.begin() + pos + e.value.size(), e.value.a.begin());
        pos += e.value.size();
    }
    if (pos != flat.size()) throw ShapeError("unflatten: too many values");
}

const Mat& Var::value() const { return tape->val(*this); }

Var Tape::make(Mat value) {
    Node n;
    n.val = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Mat value) { return make(std::move(value)); }

Var Tape::param(ParamStore& store, const std::string& name) {
    Var v = make(store.value(name));
    bindings_.push_back({v.idx, {&store, name}});
    return v;
}

namespace {
void ensure_grad(Tape::Node& n) {
    if (n.grad.size() != n.val.size()) n.grad = Mat(n.val.rows, n.val.cols);
}
}  // namespace

Var Tape::row(Var table, int r) {
    const Mat& t = val(table);
    if (r < 0 || r >= t.rows) throw ShapeError("row lookup out of range");
    Mat out(1, t.cols);
    for (int c = 0; c < t.cols; ++c) out.a[c] = t.at(r, c);
    Var y = make(std::move(out));
    int ti = table.idx, yi = y.idx;
    node(yi).back = [ti, yi, r](Tape& tp) {
        auto& tn = tp.node(ti);
        ensure_grad(tn);
        const Mat& g = tp.node(yi).grad;
        for (int c = 0; c < tn.val.cols; ++c) tn.grad.at(r, c) += g.a[c];
    };
    return y;
}

Var Tape::soft_row(Var p, Var table) {
    const Mat& pv = val(p);
    const Mat& tv = val(table);
    if (pv.rows != 1 || pv.cols != tv.rows) throw ShapeError("soft_row: distribution/table mismatch");
    Mat out(1, tv.cols);
    for (int k = 0; k < tv.rows; ++k)
        for (int c = 0; c < tv.cols; ++c) out.a[c] += pv.a[k] * tv.at(k, c);
    Var y = make(std::move(out));
    int pi = p.idx, ti = table.idx, yi = y.idx;
    node(yi).back = [pi, ti, yi](Tape& tp) {
        auto& pn = tp.node(pi);
        auto& tn = tp.node(ti);
        ensure_grad(pn);
        ensure_grad(tn);
        const Mat& g = tp.node(yi).grad;
        const Mat& pv = pn.val;
        const Mat& tv = tn.val;
        for (int k = 0; k < tv.rows; ++k) {
            double acc = 0.0;
            for (int c = 0; c < tv.cols; ++c) {
                acc += g.a[c] * tv.at(k, c);
                tn.grad.at(k, c) += pv.a[k] * g.a[c];
            }
            pn.grad.a[k] += acc;
        }
    };
    return y;
}

Var Tape::soft_row_gather(Var p, Var table, const std::vector<int>& row_map) {
    const Mat& pv = val(p);
    const Mat& tv = val(table);
    if (pv.rows != 1 || pv.cols != static_cast<int>(row_map.size()))
        throw ShapeError("soft_row_gather: distribution/map mismatch");
    for (int r : row_map)
        if (r < 0 || r >= tv.rows) throw ShapeError("soft_row_gather: map row out of range");
    Mat out(1, tv.cols);
    for (int k = 0; k < pv.cols; ++k) {
        const double w = pv.a[k];
        if (w == 0.0) continue;
        for (int c = 0; c < tv.cols; ++c) out.a[c] += w * tv.at(row_map[k], c);
    }
    Var y = make(std::move(out));
    int pi = p.idx, ti = table.idx, yi = y.idx;
    node(yi).back = [pi, ti, yi, row_map](Tape& tp) {
        auto& pn = tp.node(pi);
        auto& tn = tp.node(ti);
        ensure_grad(pn);
        ensure_grad(tn);
        const Mat& g = tp.node(yi).grad;
        const Mat& pv = pn.val;
        const Mat& tv = tn.val;
        for (int k = 0; k < pv.cols; ++k) {
            double acc = 0.0;
            for (int c = 0; c < tv.cols; ++c) {
                acc += g.a[c] * tv.at(row_map[k], c);
                tn.grad.at(row_map[k], c) += pv.a[k] * g.a[c];
            }
            pn.grad.a[k] += acc;
        }
    };
    return y;
}

Var Tape::affine(Var W, Var x, Var b) {
    const Mat& wv = val(W);
    const Mat& xv = val(x);
    const Mat& bv = val(b);
    if (xv.rows != 1 || wv.cols != xv.cols || bv.rows != 1 || bv.cols != wv.rows)
        throw ShapeError("affine: shape mismatch");
    Mat out(1, wv.rows);
    for (int i = 0; i < wv.rows; ++i) {
        double acc = bv.a[i];
        for (int j = 0; j < wv.cols; ++j) acc += wv.at(i, j) * xv.a[j];
        out.a[i] = acc;
    }
    Var y = make(std::move(out));
    int wi = W.idx, xi = x.idx, bi = b.idx, yi = y.idx;
    node(yi).back = [wi, xi, bi, yi](Tape& tp) {
        auto& wn = tp.node(wi);
        auto& xn = tp.node(xi);
        auto& bn = tp.node(bi);
        ensure_grad(wn);
        ensure_grad(xn);
        ensure_grad(bn);
        const Mat& g = tp.node(yi).grad;
        const Mat& wv = wn.val;
        const Mat& xv = xn.val;
        for (int i = 0; i < wv.rows; ++i) {
            bn.grad.a[i] += g.a[i];
            for (int j = 0; j < wv.cols; ++j) {
                wn.grad.at(i, j) += g.a[i] * xv.a[j];
                xn.grad.a[j] += g.a[i] * wv.at(i, j);
            }
        }
    };
    return y;
}

Var Tape::tanh(Var x) {
    Mat out = val(x);
    for (double& v : out.a) v = std::tanh(v);
    Var y = make(std::move(out));
    int xi = x.idx, yi = y.idx;
    node(yi).back = [xi, yi](Tape& tp) {
        auto& xn = tp.node(xi);
        ensure_grad(xn);
        const auto& yn = tp.node(yi);
        for (size_t i = 0; i < xn.val.size(); ++i)
            xn.grad.a[i] += yn.grad.a[i] * (1.0 - yn.val.a[i] * yn.val.a[i]);
    };
    return y;
}

Var Tape::mean_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw ShapeError("mean_rows: empty input");
    const Mat& first = val(rows[0]);
    Mat out(1, first.cols);
    for (const Var& r : rows) {
        const Mat& rv = val(r);
        if (rv.rows != 1 || rv.cols != first.cols) throw ShapeError("mean_rows: shape mismatch");
        for (int c = 0; c < rv.cols; ++c) out.a[c] += rv.a[c];
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (double& v : out.a) v *= inv;
    Var y = make(std::move(out));
    std::vector<int> idxs;
    for (const Var& r : rows) idxs.push_back(r.idx);
    int yi = y.idx;
    node(yi).back = [idxs, yi, inv](Tape& tp) {
        const Mat& g = tp.node(yi).grad;
        for (int ri : idxs) {
            auto& rn = tp.node(ri);
            ensure_grad(rn);
            for (size_t c = 0; c < g.size(); ++c) rn.grad.a[c] += g.a[c] * inv;
        }
    };
    return y;
}

Var Tape::max_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw ShapeError("max_rows: empty input");
    const Mat& first = val(rows[0]);
    Mat out(1, first.cols);
    std::vector<int> winner(static_cast<size_t>(first.cols), 0);
    for (int c = 0; c < first.cols; ++c) out.a[c] = first.a[c];
    for (size_t r = 1; r < rows.size(); ++r) {
        const Mat& rv = val(rows[r]);
        if (rv.rows != 1 || rv.cols != first.cols) throw ShapeError("max_rows: shape mismatch");
        for (int c = 0; c < rv.cols; ++c) {
            if (rv.a[c] > out.a[c]) {
                out.a[c] = rv.a[c];
                winner[static_cast<size_t>(c)] = static_cast<int>(r);
            }
        }
    }
    Var y = make(std::move(out));
    std::vector<int> idxs;
    for (const Var& r : rows) idxs.push_back(r.idx);
    int yi = y.idx;
    node(yi).back = [idxs, winner, yi](Tape& tp) {
        const Mat& g = tp.node(yi).grad;
        for (size_t c = 0; c < g.size(); ++c) {
            auto& rn = tp.node(idxs[static_cast<size_t>(winner[c])]);
            ensure_grad(rn);
            rn.grad.a[c] += g.a[c];
        }
    };
    return y;
}

Var Tape::concat(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    if (av.rows != 1 || bv.rows != 1) throw ShapeError("concat expects row vectors");
    Mat out(1, av.cols + bv.cols);
    std::copy(av.a.begin(), av.a.end(), out.a.begin());
    std::copy(bv.a.begin(), bv.a.end(), out.a.begin() + av.cols);
    Var y = make(std::move(out));
    int ai = a.idx, bi = b.idx, yi = y.idx, na = av.cols;
    node(yi).back = [ai, bi, yi, na](Tape& tp) {
        auto& an = tp.node(ai);
        auto& bn = tp.node(bi);
        ensure_grad(an);
        ensure_grad(bn);
        const Mat& g = tp.node(yi).grad;
        for (int c = 0; c < na; ++c) an.grad.a[c] += g.a[c];
        for (size_t c = na; c < g.size(); ++c) bn.grad.a[c - na] += g.a[c];
    };
    return y;
}

Var Tape::add_const(Var x, const Mat& c) {
    const Mat& xv = val(x);
    if (xv.size() != c.size()) throw ShapeError("add_const: shape mismatch");
    Mat out = xv;
    for (size_t i = 0; i < out.size(); ++i) out.a[i] += c.a[i];
    Var y = make(std::move(out));
    int xi = x.idx, yi = y.idx;
    node(yi).back = [xi, yi](Tape& tp) {
        auto& xn = tp.node(xi);
        ensure_grad(xn);
        const Mat& g = tp.node(yi).grad;
        for (size_t i = 0; i < g.size(); ++i) xn.grad.a[i] += g.a[i];
    };
    return y;
}

double logsumexp(std::span<const double> z) {
    double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

std::vector<double> softmax_stable(std::span<const double> z) {
    double m = *std::max_element(z.begin(), z.end());
    std::vector<double> out(z.size());
    double s = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        s += out[i];
    }
    for (double& v : out) v /= s;
    return out;
}

namespace {
// Shared softmax Jacobian-vector product: gz_i = scale * y_i * (gy_i - sum_j gy_j y_j).
void softmax_backward(Tape& tp, int xi, int yi, double scale) {
    auto& xn = tp.node(xi);
    ensure_grad(xn);
    const auto& yn = tp.node(yi);
    double dot = 0.0;
    for (size_t j = 0; j < yn.val.size(); ++j) dot += yn.grad.a[j] * yn.val.a[j];
    for (size_t i = 0; i < yn.val.size(); ++i)
        xn.grad.a[i] += scale * yn.val.a[i] * (yn.grad.a[i] - dot);
}
}  // namespace

Var Tape::softmax(Var logits) {
    const Mat& zv = val(logits);
    Mat out = Mat::row_vector(softmax_stable(zv.a));
    Var y = make(std::move(out));
    int xi = logits.idx, yi = y.idx;
    node(yi).back = [xi, yi](Tape& tp) { softmax_backward(tp, xi, yi, 1.0); };
    return y;
}

Var Tape::gumbel_softmax(Var logits, double tau, std::span<const double> noise) {
    if (!(tau > 0.0)) throw DomainError("gumbel_softmax: tau must be positive");
    const Mat& zv = val(logits);
    if (zv.size() != noise.size()) throw ShapeError("gumbel_softmax: noise size mismatch");
    std::vector<double> scaled(zv.size());
    for (size_t i = 0; i < scaled.size(); ++i) scaled[i] = (zv.a[i] + noise[i]) / tau;
    Var y = make(Mat::row_vector(softmax_stable(scaled)));
    int xi = logits.idx, yi = y.idx;
    node(yi).back = [xi, yi, tau](Tape& tp) { softmax_backward(tp, xi, yi, 1.0 / tau); };
    return y;
}

Var Tape::cross_entropy_with_logits(Var logits, int label) {
    const Mat& zv = val(logits);
    if (label < 0 || label >= zv.cols) throw DomainError("cross_entropy: label out of range");
    double loss = logsumexp(zv.a) - zv.a[static_cast<size_t>(label)];
    Var y = make(Mat::scalar(loss));
    int xi = logits.idx, yi = y.idx;
    node(yi).back = [xi, yi, label](Tape& tp) {
        auto& xn = tp.node(xi);
        ensure_grad(xn);
        const double g = tp.node(yi).grad.a[0];
        std::vector<double> p = softmax_stable(xn.val.a);
        for (size_t i = 0; i < p.size(); ++i)
            xn.grad.a[i] += g * (p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
    };
    return y;
}

Var Tape::kl_to_const(Var p, std::span<const double> q) {
    const Mat& pv = val(p);
    if (pv.size() != q.size()) throw ShapeError("kl_to_const: size mismatch");
    double kl = 0.0;
    for (size_t i = 0; i < q.size(); ++i) {
        if (pv.a[i] <= 0.0) continue;
        if (q[i] <= 0.0) throw DomainError("kl_to_const: reference has zero mass where p > 0");
        kl += pv.a[i] * (std::log(pv.a[i]) - std::log(q[i]));
    }
    Var y = make(Mat::scalar(kl));
    std::vector<double> qcopy(q.begin(), q.end());
    int xi = p.idx, yi = y.idx;
    node(yi).back = [xi, yi, qcopy](Tape& tp) {
        auto& xn = tp.node(xi);
        ensure_grad(xn);
        const double g = tp.node(yi).grad.a[0];
        for (size_t i = 0; i < qcopy.size(); ++i) {
            // Exact-zero coordinates (masked logits) stay zero under any
            // perturbation of the upstream logits; they contribute nothing.
            if (xn.val.a[i] <= 0.0) continue;
            xn.grad.a[i] += g * (std::log(xn.val.a[i]) - std::log(qcopy[i]) + 1.0);
        }
    };
    return y;
}

Var Tape::scale(Var x, double s) {
    Mat out = val(x);
    for (double& v : out.a) v *= s;
    Var y = make(std::move(out));
    int xi = x.idx, yi = y.idx;
    node(yi).back = [xi, yi, s](Tape& tp) {
        auto& xn = tp.node(xi);
        ensure_grad(xn);
        const Mat& g = tp.node(yi).grad;
        for (size_t i = 0; i < g.size(); ++i) xn.grad.a[i] += s * g.a[i];
    };
    return y;
}

Var Tape::add(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    if (av.size() != bv.size()) throw ShapeError("add: shape mismatch");
    Mat out = av;
    for (size_t i = 0; i < out.size(); ++i) out.a[i] += bv.a[i];
    Var y = make(std::move(out));
    int ai = a.idx, bi = b.idx, yi = y.idx;
    node(yi).back = [ai, bi, yi](Tape& tp) {
        auto& an = tp.node(ai);
        auto& bn = tp.node(bi);
        ensure_grad(an);
        ensure_grad(bn);
        const Mat& g = tp.node(yi).grad;
        for (size_t i = 0; i < g.size(); ++i) {
            an.grad.a[i] += g.a[i];
            bn.grad.a[i] += g.a[i];
        }
    };
    return y;
}

Var Tape::mean_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("mean_scalars: empty input");
    double sum = 0.0;
    for (const Var& x : xs) sum += value_of(x);
    Var y = make(Mat::scalar(sum / static_cast<double>(xs.size())));
    std::vector<int> idxs;
    for (const Var& x : xs) idxs.push_back(x.idx);
    int yi = y.idx;
    const double inv = 1.0 / static_cast<double>(xs.size());
    node(yi).back = [idxs, yi, inv](Tape& tp) {
        const double g = tp.node(yi).grad.a[0];
        for (int xi : idxs) {
            auto& xn = tp.node(xi);
            ensure_grad(xn);
            xn.grad.a[0] += g * inv;
        }
    };
    return y;
}

std::map<std::string, Mat> Tape::backward(Var root) {
    if (val(root).size() != 1) throw ShapeError("backward expects a scalar root");
    auto& rn = node(root.idx);
    ensure_grad(rn);
    rn.grad.a[0] = 1.0;
    for (int i = root.idx; i >= 0; --i) {
        auto& n = node(i);
        if (n.back && n.grad.size() == n.val.size()) n.back(*this);
    }
    std::map<std::string, Mat> grads;
    for (const auto& [idx, binding] : bindings_) {
        const auto& n = node(idx);
        Mat g = n.grad.size() == n.val.size() ? n.grad : Mat(n.val.rows, n.val.cols);
        auto [res, inserted] = grads.try_emplace(binding.second, std::move(g));
        if (!inserted) {
            for (size_t i = 0; i < res->second.size(); ++i)
                res->second.a[i] += n.grad.size() ? n.grad.a[i] : 0.0;
        }
    }
    return grads;
}

}  // namespace nura::ad
