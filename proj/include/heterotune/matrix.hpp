#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "heterotune/common.hpp"

namespace heterotune {

/// Dense row-major matrix of 64-bit floats. The single numeric carrier for
/// weights, activations and gradients.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;  // length rows*cols, row-major

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
    Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != static_cast<std::size_t>(r) * c)
            throw std::invalid_argument("Matrix: data length " + std::to_string(data.size()) +
                                        " does not match " + std::to_string(r) + "x" +
                                        std::to_string(c));
    }

    double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

inline Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

/// Entries must stay finite after every public operation; a NaN or Inf is
/// reported instead of propagated.
inline void ensure_finite(const Matrix& m, const char* op) {
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (!std::isfinite(m.data[i])) {
            const int r = static_cast<int>(i) / m.cols;
            const int c = static_cast<int>(i) % m.cols;
            throw NumericError(std::string(op) + ": non-finite entry at (" + std::to_string(r) +
                               "," + std::to_string(c) + ")");
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + a.shape_str() +
                                    " times " + b.shape_str());
    Matrix c(a.rows, b.cols);
    const int n = b.cols;
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + static_cast<std::size_t>(i) * a.cols;
        double* crow = c.data.data() + static_cast<std::size_t>(i) * n;
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.data.data() + static_cast<std::size_t>(k) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    ensure_finite(c, "matmul");
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch, " + a.shape_str() + " vs " +
                                    b.shape_str());
    Matrix c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("sub: shape mismatch, " + a.shape_str() + " vs " +
                                    b.shape_str());
    Matrix c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix c = a;
    for (double& v : c.data) v *= s;
    return c;
}

/// dst += s * src
inline void add_scaled(Matrix& dst, const Matrix& src, double s) {
    if (!dst.same_shape(src))
        throw std::invalid_argument("add_scaled: shape mismatch, " + dst.shape_str() + " vs " +
                                    src.shape_str());
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += s * src.data[i];
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("hadamard: shape mismatch, " + a.shape_str() + " vs " +
                                    b.shape_str());
    Matrix c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

/// Frobenius inner product <a, b>.
inline double dot(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("dot: shape mismatch, " + a.shape_str() + " vs " +
                                    b.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double frobenius_sq(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return s;
}

namespace detail {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace detail

inline double gelu_scalar(double x) {
    const double u = detail::kGeluScale * (x + detail::kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
    const double u = detail::kGeluScale * (x + detail::kGeluCubic * x * x * x);
    const double t = std::tanh(u);
    const double du = detail::kGeluScale * (1.0 + 3.0 * detail::kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

/// Elementwise tanh-approximation GELU.
inline Matrix gelu(const Matrix& x) {
    Matrix y = x;
    for (double& v : y.data) v = gelu_scalar(v);
    return y;
}

/// Elementwise derivative of gelu at x.
inline Matrix gelu_grad(const Matrix& x) {
    Matrix y = x;
    for (double& v : y.data) v = gelu_grad_scalar(v);
    return y;
}

struct LossResult {
    double loss = 0.0;
    Matrix dlogits;
};

/// Mean negative log-softmax of the true class; dlogits = (softmax - onehot)/n.
inline LossResult softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    if (logits.rows < 1) throw std::invalid_argument("softmax_cross_entropy: empty batch");
    if (static_cast<int>(labels.size()) != logits.rows)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(logits.rows) + " rows");
    const int n = logits.rows;
    const int classes = logits.cols;
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= classes)
            throw std::invalid_argument("softmax_cross_entropy: label " +
                                        std::to_string(labels[i]) + " at row " +
                                        std::to_string(i) + " out of range for " +
                                        std::to_string(classes) + " classes");
    }
    LossResult out;
    out.dlogits = Matrix(n, classes);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        double maxv = logits(i, 0);
        for (int j = 1; j < classes; ++j) maxv = std::max(maxv, logits(i, j));
        double denom = 0.0;
        for (int j = 0; j < classes; ++j) denom += std::exp(logits(i, j) - maxv);
        const double log_denom = std::log(denom);
        loss += log_denom - (logits(i, labels[i]) - maxv);
        for (int j = 0; j < classes; ++j) {
            const double p = std::exp(logits(i, j) - maxv) / denom;
            out.dlogits(i, j) = (p - (j == labels[i] ? 1.0 : 0.0)) / n;
        }
    }
    out.loss = loss / n;
    if (!std::isfinite(out.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    ensure_finite(out.dlogits, "softmax_cross_entropy");
    return out;
}

/// One in-place SGD step, param -= lr*grad.
inline void sgd_step(Matrix& param, const Matrix& grad, double lr) {
    if (!param.same_shape(grad))
        throw std::invalid_argument("sgd_step: shape mismatch, param " + param.shape_str() +
                                    " vs grad " + grad.shape_str());
    for (std::size_t i = 0; i < param.data.size(); ++i) param.data[i] -= lr * grad.data[i];
    ensure_finite(param, "sgd_step");
}

/// Row-wise argmax; exact ties resolve to the lowest index.
inline std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(m.rows);
    for (int i = 0; i < m.rows; ++i) {
        int best = 0;
        for (int j = 1; j < m.cols; ++j)
            if (m(i, j) > m(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

}  // namespace heterotune
