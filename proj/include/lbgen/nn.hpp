#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lbgen/autodiff.hpp"
#include "lbgen/checkpoint.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/tensor.hpp"

namespace lbgen::nn {

// Gaussian init scaled by 1/sqrt(fan_in); deterministic given the stream.
inline Tensor init_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
    Tensor t({rows, cols});
    double s = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : t.data) v = rng.gaussian() * s;
    return t;
}

struct Linear {
    ad::Var W;  // (out x in)
    ad::Var b;  // (out)
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, RngStream& rng)
        : W(ad::Var::param(init_matrix(out, in, rng))),
          b(ad::Var::param(Tensor({out}))),
          in_dim(in),
          out_dim(out) {}

    ad::Var operator()(const ad::Var& x) const { return ad::add(ad::matvec(W, x), b); }

    void params(std::vector<ad::Var>& out) const {
        out.push_back(W);
        out.push_back(b);
    }

    // Frozen layers keep their values but are skipped by backward.
    void set_trainable(bool trainable) {
        W.node()->requires_grad = trainable;
        b.node()->requires_grad = trainable;
    }

    void collect(const std::string& prefix, Checkpoint& ck) const {
        ck.add(prefix + ".W", W.value());
        ck.add(prefix + ".b", b.value());
    }

    void restore(const std::string& prefix, const Checkpoint& ck) {
        W.mutable_value() = ck.tensor(prefix + ".W");
        b.mutable_value() = ck.tensor(prefix + ".b");
        require(W.value().shape == std::vector<std::size_t>{out_dim, in_dim},
                "checkpoint: shape mismatch for " + prefix + ".W");
        require(b.value().shape == std::vector<std::size_t>{out_dim},
                "checkpoint: shape mismatch for " + prefix + ".b");
    }
};

// Low-rank residual adapter for a Linear layer.
//
// Effective weight: W_eff = W + (alpha / rank) * B * A, with A (rank x in)
// Gaussian-initialised and B (out x rank) zero-initialised, so a freshly
// attached adapter leaves the layer's function unchanged.
struct LowRankAdapter {
    ad::Var A;  // (rank x in)
    ad::Var B;  // (out x rank)
    std::size_t rank = 0;
    double alpha = 1.0;

    LowRankAdapter() = default;
    LowRankAdapter(std::size_t in, std::size_t out, std::size_t r, double a, RngStream& rng)
        : A(ad::Var::param(init_matrix(r, in, rng))),
          B(ad::Var::param(Tensor({out, r}))),
          rank(r),
          alpha(a) {}

    double scaling() const { return alpha / static_cast<double>(rank); }

    // delta(x) = (alpha/rank) * B * (A * x)
    ad::Var delta(const ad::Var& x) const {
        return ad::scale(ad::matvec(B, ad::matvec(A, x)), scaling());
    }

    void params(std::vector<ad::Var>& out) const {
        out.push_back(A);
        out.push_back(B);
    }

    void collect(const std::string& prefix, Checkpoint& ck) const {
        ck.add(prefix + ".A", A.value());
        ck.add(prefix + ".B", B.value());
    }

    void restore(const std::string& prefix, const Checkpoint& ck) {
        A.mutable_value() = ck.tensor(prefix + ".A");
        B.mutable_value() = ck.tensor(prefix + ".B");
        require(A.value().shape.size() == 2 && A.value().shape[0] == rank,
                "checkpoint: shape mismatch for " + prefix + ".A");
        require(B.value().shape.size() == 2 && B.value().shape[1] == rank,
                "checkpoint: shape mismatch for " + prefix + ".B");
    }
};

// Linear layer with an optional attached adapter. Forward with an adapter is
// base(x) + delta(x); merge() folds the adapter product into the base weight
// so the merged layer reproduces adapted outputs without the adapter.
struct AdaptedLinear {
    Linear base;
    LowRankAdapter adapter;
    bool has_adapter = false;

    AdaptedLinear() = default;
    explicit AdaptedLinear(Linear b) : base(std::move(b)) {}

    void attach_adapter(std::size_t rank, double alpha, RngStream& rng) {
        adapter = LowRankAdapter(base.in_dim, base.out_dim, rank, alpha, rng);
        has_adapter = true;
        base.set_trainable(false);
    }

    void drop_adapter() {
        has_adapter = false;
        adapter = LowRankAdapter();
    }

    ad::Var operator()(const ad::Var& x) const {
        ad::Var y = base(x);
        if (has_adapter) y = ad::add(y, adapter.delta(x));
        return y;
    }

    // Folds (alpha/rank) * B * A into the base weight matrix in place.
    void merge() {
        require(has_adapter, "merge: no adapter attached");
        std::size_t out = base.out_dim, in = base.in_dim, r = adapter.rank;
        double s = adapter.scaling();
        Tensor& W = base.W.mutable_value();
        const Tensor& A = adapter.A.value();
        const Tensor& B = adapter.B.value();
        for (std::size_t i = 0; i < out; ++i)
            for (std::size_t j = 0; j < in; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < r; ++k)
                    acc += B.data[i * r + k] * A.data[k * in + j];
                W.data[i * in + j] += s * acc;
            }
        drop_adapter();
    }

    void trainable_params(std::vector<ad::Var>& out) const {
        if (has_adapter)
            adapter.params(out);
        else
            base.params(out);
    }
};

// Small fully connected net: Linear -> act -> ... -> Linear (no final act).
struct Mlp {
    std::vector<Linear> layers;

    Mlp() = default;
    Mlp(const std::vector<std::size_t>& dims, RngStream& rng) {
        require(dims.size() >= 2, "Mlp: need at least input and output dims");
        for (std::size_t i = 0; i + 1 < dims.size(); ++i)
            layers.emplace_back(dims[i], dims[i + 1], rng);
    }

    ad::Var operator()(const ad::Var& x) const {
        ad::Var h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](h);
            if (i + 1 < layers.size()) h = ad::tanh(h);
        }
        return h;
    }

    void params(std::vector<ad::Var>& out) const {
        for (const auto& l : layers) l.params(out);
    }

    void set_trainable(bool t) {
        for (auto& l : layers) l.set_trainable(t);
    }

    void collect(const std::string& prefix, Checkpoint& ck) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(prefix + ".layer" + std::to_string(i), ck);
    }

    void restore(const std::string& prefix, const Checkpoint& ck) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].restore(prefix + ".layer" + std::to_string(i), ck);
    }
};

}  // namespace lbgen::nn
