#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "lbgen/errors.hpp"

namespace lbgen {

// Dense row-major double tensor. All numeric state in the project is stored
// in doubles; checkpoints may down-convert on write.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(numel_of(shape), fill) {}

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from_vector(std::vector<double> v) {
        Tensor t;
        t.shape = {v.size()};
        t.data = std::move(v);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.size() >= 1 ? shape[0] : 1; }
    std::size_t cols() const { return shape.size() >= 2 ? shape[1] : 1; }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at2(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at2(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double l2_norm() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return std::sqrt(s);
    }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// y = A x for A (m x n) row-major.
inline std::vector<double> matvec(const Tensor& A, const std::vector<double>& x) {
    require(A.shape.size() == 2 && A.shape[1] == x.size(), "matvec: shape mismatch");
    std::size_t m = A.shape[0], n = A.shape[1];
    std::vector<double> y(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        const double* row = A.data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
        y[i] = s;
    }
    return y;
}

// Solves A x = b for symmetric positive definite A via Cholesky.
// Used once for the fixed pixel-to-latent projection; A is tiny.
inline std::vector<double> solve_spd(Tensor A, std::vector<double> b) {
    require(A.shape.size() == 2 && A.shape[0] == A.shape[1], "solve_spd: A must be square");
    std::size_t n = A.shape[0];
    require(b.size() == n, "solve_spd: size mismatch");
    // Cholesky A = L L^T, in place (lower triangle).
    for (std::size_t j = 0; j < n; ++j) {
        double d = A.at2(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= A.at2(j, k) * A.at2(j, k);
        require(d > 0.0, "solve_spd: matrix not positive definite");
        double lj = std::sqrt(d);
        A.at2(j, j) = lj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = A.at2(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= A.at2(i, k) * A.at2(j, k);
            A.at2(i, j) = s / lj;
        }
    }
    // Forward then back substitution.
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= A.at2(i, k) * b[k];
        b[i] = s / A.at2(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= A.at2(k, ii) * b[k];
        b[ii] = s / A.at2(ii, ii);
    }
    return b;
}

}  // namespace lbgen
