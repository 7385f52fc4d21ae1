#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "sidforge/numerics.hpp"

namespace sidforge {

/// x = alpha * r + residual, with residual orthogonal to r.
template <typename T>
struct ProjectionResult {
    double alpha = 0.0;
    std::vector<T> residual;
};

struct ProjectionGrads {
    std::vector<double> grad_x;
    std::vector<double> grad_r;
};

template <typename T>
ProjectionResult<T> project_forward(std::span<const T> x, std::span<const T> r) {
    detail::require_same_dim(x.size(), r.size(), "project_forward");
    const double rr = dot(r, r);
    if (std::sqrt(rr) < kNormEpsilon) {
        throw DegenerateParameterError("project_forward: reference vector norm is ~0");
    }
    ProjectionResult<T> out;
    out.alpha = dot(x, r) / rr;
    out.residual.resize(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
        out.residual[j] = static_cast<T>(static_cast<double>(x[j]) - out.alpha * r[j]);
    }
    return out;
}

/// Pulls (dL/dalpha, dL/dresidual) back to dL/dx and dL/dr.
template <typename T>
ProjectionGrads project_backward(std::span<const T> x, std::span<const T> r, double grad_alpha,
                                 std::span<const double> grad_residual) {
    detail::require_same_dim(x.size(), r.size(), "project_backward");
    detail::require_same_dim(x.size(), grad_residual.size(), "project_backward");
    const double rr = dot(r, r);
    if (std::sqrt(rr) < kNormEpsilon) {
        throw DegenerateParameterError("project_backward: reference vector norm is ~0");
    }
    const double alpha = dot(x, r) / rr;
    // residual = x - alpha r, so alpha also receives -r . dL/dresidual.
    double r_dot_g = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) r_dot_g += r[j] * grad_residual[j];
    const double g_alpha = grad_alpha - r_dot_g;

    ProjectionGrads out;
    out.grad_x.resize(x.size());
    out.grad_r.resize(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
        out.grad_x[j] = g_alpha * r[j] / rr + grad_residual[j];
        out.grad_r[j] = g_alpha * (x[j] / rr - 2.0 * alpha * r[j] / rr) - alpha * grad_residual[j];
    }
    return out;
}

}  // namespace sidforge
