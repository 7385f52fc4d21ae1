#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sidforge/errors.hpp"
#include "sidforge/log.hpp"
#include "sidforge/random.hpp"

namespace sidforge {

/// Norms below this are treated as zero: cosine against such a vector is defined as 0.
inline constexpr double kNormEpsilon = 1e-12;

template <typename T>
using Vector = std::vector<T>;

/// Dense row-major matrix.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        if (values_.size() != rows_ * cols_) {
            throw UsageError("matrix value count " + std::to_string(values_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return values_.empty(); }

    std::span<T> row(std::size_t i) noexcept { return {values_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const noexcept {
        return {values_.data() + i * cols_, cols_};
    }

    T& operator()(std::size_t i, std::size_t j) noexcept { return values_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const noexcept {
        return values_[i * cols_ + j];
    }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> values_;
};

namespace detail {
inline void require_same_dim(std::size_t a, std::size_t b, const char* op) {
    if (a != b) {
        throw UsageError(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
    }
}
}  // namespace detail

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
    detail::require_same_dim(a.size(), b.size(), "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

template <typename T>
double l2_norm(std::span<const T> a) {
    double acc = 0.0;
    for (const T v : a) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
}

template <typename T>
double cosine_sim(std::span<const T> a, std::span<const T> b) {
    detail::require_same_dim(a.size(), b.size(), "cosine_sim");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < kNormEpsilon || nb < kNormEpsilon) return 0.0;
    return dot(a, b) / (na * nb);
}

// Container conveniences so call sites can pass std::vector directly.
template <typename T>
double dot(const std::vector<T>& a, const std::vector<T>& b) {
    return dot(std::span<const T>(a), std::span<const T>(b));
}
template <typename T>
double l2_norm(const std::vector<T>& a) {
    return l2_norm(std::span<const T>(a));
}
template <typename T>
double cosine_sim(const std::vector<T>& a, const std::vector<T>& b) {
    return cosine_sim(std::span<const T>(a), std::span<const T>(b));
}

/// Max-subtracted softmax; reductions in double.
template <typename T>
std::vector<T> softmax(std::span<const T> scores) {
    if (scores.empty()) throw UsageError("softmax: empty input");
    const double peak = static_cast<double>(*std::max_element(scores.begin(), scores.end()));
    std::vector<double> ex(scores.size());
    double total = 0.0;
    for (std::size_t k = 0; k < scores.size(); ++k) {
        ex[k] = std::exp(static_cast<double>(scores[k]) - peak);
        total += ex[k];
    }
    std::vector<T> out(scores.size());
    for (std::size_t k = 0; k < scores.size(); ++k) out[k] = static_cast<T>(ex[k] / total);
    return out;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& scores) {
    return softmax(std::span<const T>(scores));
}

template <typename T>
struct PcaResult {
    Matrix<T> coords;                 ///< rows x target_dims
    std::vector<double> eigenvalues;  ///< variance captured per component
    std::vector<std::vector<double>> components;
    bool degenerate = false;          ///< all rows identical; coords are zero
};

/// Mean-centres `data` and projects onto its top `target_dims` principal directions, found
/// by power iteration on the covariance with deflation.
template <typename T>
PcaResult<T> pca_project(const Matrix<T>& data, std::size_t target_dims) {
    const std::size_t n = data.rows();
    const std::size_t d = data.cols();
    if (n < 2) throw UsageError("pca_project: need at least 2 rows");
    if (target_dims == 0 || target_dims > d) {
        throw UsageError("pca_project: target_dims must be in [1, " + std::to_string(d) + "]");
    }

    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += data(i, j);
    }
    for (double& m : mean) m /= static_cast<double>(n);

    std::vector<double> cov(d * d, 0.0);
    std::vector<double> centred(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) centred[j] = data(i, j) - mean[j];
        for (std::size_t a = 0; a < d; ++a) {
            const double ca = centred[a];
            if (ca == 0.0) continue;
            for (std::size_t b = a; b < d; ++b) cov[a * d + b] += ca * centred[b];
        }
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            cov[a * d + b] /= static_cast<double>(n);
            cov[b * d + a] = cov[a * d + b];
        }
        trace += cov[a * d + a];
    }

    PcaResult<T> result;
    result.coords = Matrix<T>(n, target_dims);
    if (!(trace > 1e-30)) {
        result.degenerate = true;
        result.eigenvalues.assign(target_dims, 0.0);
        log_warning("pca_project: zero variance input, returning all-zero projection");
        return result;
    }

    constexpr int kMaxIters = 100;
    constexpr double kRelTol = 1e-7;
    std::vector<double> v(d);
    std::vector<double> w(d);
    for (std::size_t comp = 0; comp < target_dims; ++comp) {
        Rng rng(derive_seed(0x9ca, comp));
        for (double& x : v) x = rng.normal();
        double nv = 0.0;
        for (double x : v) nv += x * x;
        nv = std::sqrt(nv);
        for (double& x : v) x /= nv;

        double lambda = 0.0;
        for (int it = 0; it < kMaxIters; ++it) {
            for (std::size_t a = 0; a < d; ++a) {
                double acc = 0.0;
                for (std::size_t b = 0; b < d; ++b) acc += cov[a * d + b] * v[b];
                w[a] = acc;
            }
            double next = 0.0;
            double nw = 0.0;
            for (std::size_t a = 0; a < d; ++a) {
                next += v[a] * w[a];
                nw += w[a] * w[a];
            }
            nw = std::sqrt(nw);
            if (nw < 1e-300) {
                lambda = 0.0;
                break;
            }
            for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / nw;
            const bool converged = it > 0 && std::abs(next - lambda) <= kRelTol * std::abs(next);
            lambda = next;
            if (converged) break;
        }
        lambda = std::max(lambda, 0.0);
        result.eigenvalues.push_back(lambda);
        result.components.push_back(v);
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t comp = 0; comp < target_dims; ++comp) {
            const auto& dir = result.components[comp];
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += (data(i, j) - mean[j]) * dir[j];
            result.coords(i, comp) = static_cast<T>(acc);
        }
    }
    return result;
}

}  // namespace sidforge
