#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace nura::ad {

// Row-major dense matrix; vectors are 1xN.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return a.size(); }

    static Mat row_vector(std::span<const double> v);
    static Mat scalar(double v);
};

// Named parameter tensors with Adam state. Values persist across tapes.
class ParamStore {
public:
    Mat& add(const std::string& name, Mat init);
    Mat& value(const std::string& name);
    const Mat& value(const std::string& name) const;
    bool has(const std::string& name) const;
    std::vector<std::string> names() const;  // insertion order

    // Decoupled-weight-decay Adam over accumulated gradients.
    struct AdamConfig {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-4;
    };
    void adam_step(const std::map<std::string, Mat>& grads, const AdamConfig& cfg);

    uint64_t fnv1a_hash() const;  // over the raw value bytes, insertion order

    // Flat serialization helpers for checkpoints and finite differencing.
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);

    struct Entry {
        std::string name;
        Mat value;
        Mat m, v;  // Adam moments
    };
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    long adam_steps() const { return adam_t_; }
    void set_adam_steps(long t) { adam_t_ = t; }

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
    long adam_t_ = 0;
};

class Tape;

// Handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;
    const Mat& value() const;
};

// Reverse-mode tape over small dense matrices. One tape per training step;
// parameters are bound by name so gradients can be routed back to the store.
class Tape {
public:
    Var constant(Mat value);
    Var param(ParamStore& store, const std::string& name);

    // y = row r of table (embedding lookup).
    Var row(Var table, int r);
    // y_d = sum_k p_k * table[k][d]; p is 1xV, table VxD.
    Var soft_row(Var p, Var table);
    // y_d = sum_k p_k * table[row_map[k]][d]; soft lookup through an index
    // indirection (hashed pair features).
    Var soft_row_gather(Var p, Var table, const std::vector<int>& row_map);
    // y = W x + b with W MxN, x 1xN, b 1xM.
    Var affine(Var W, Var x, Var b);
    Var tanh(Var x);
    Var mean_rows(const std::vector<Var>& rows);
    // per-dimension max over rows; gradient routes to the argmax row
    Var max_rows(const std::vector<Var>& rows);
    Var concat(Var a, Var b);
    // y = x + c elementwise, c constant (logit masking).
    Var add_const(Var x, const Mat& c);
    Var softmax(Var logits);
    // softmax((logits + noise) / tau); noise is a fixed sample.
    Var gumbel_softmax(Var logits, double tau, std::span<const double> noise);
    // scalar: logsumexp(logits) - logits[label].
    Var cross_entropy_with_logits(Var logits, int label);
    // scalar: sum_k p_k (ln p_k - ln q_k) against a constant reference q.
    Var kl_to_const(Var p, std::span<const double> q);
    Var scale(Var x, double s);
    Var add(Var a, Var b);
    Var mean_scalars(const std::vector<Var>& xs);

    double value_of(Var v) const { return node(v.idx).val.a[0]; }
    const Mat& val(Var v) const { return node(v.idx).val; }

    // Seeds d(root)=1, sweeps the tape in reverse, returns accumulated
    // gradients for every bound parameter (zero matrices when untouched).
    std::map<std::string, Mat> backward(Var root);

    struct Node {
        Mat val;
        Mat grad;
        std::function<void(Tape&)> back;  // null for leaves
    };
    Node& node(int i) { return nodes_[static_cast<size_t>(i)]; }
    const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

private:
    Var make(Mat value);
    std::vector<Node> nodes_;
    std::vector<std::pair<int, std::pair<ParamStore*, std::string>>> bindings_;
};

// Pure-math twins used by both the tape forwards and deployment paths.
std::vector<double> softmax_stable(std::span<const double> z);
double logsumexp(std::span<const double> z);

}  // namespace nura::ad
