#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sidforge/quantizer.hpp"

namespace sidforge {

struct AdamWState {
    std::uint64_t step = 0;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr = 5e-4;
    double weight_decay = 1e-5;
    double clip_norm = 0.0;  ///< global gradient-norm clip; 0 disables

    bool operator==(const AdamWState&) const = default;
};

/// One decoupled-weight-decay Adam step over a flat parameter vector. Moments are sized on
/// the first step.
template <typename T>
void adamw_step(std::span<T> params, std::span<const double> grads, AdamWState& state) {
    if (params.size() != grads.size()) {
        throw UsageError("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    }
    if (state.first_moment.empty() && state.step == 0) {
        state.first_moment.assign(params.size(), 0.0);
        state.second_moment.assign(params.size(), 0.0);
    }
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw UsageError("adamw_step: optimizer state does not match parameter count");
    }
    double clip_scale = 1.0;
    if (state.clip_norm > 0.0) {
        double sq = 0.0;
        for (double g : grads) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > state.clip_norm) clip_scale = state.clip_norm / norm;
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] * clip_scale;
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        const double theta = params[i];
        params[i] = static_cast<T>(theta - state.lr * (m_hat / (std::sqrt(v_hat) + state.eps) +
                                                       state.weight_decay * theta));
    }
}

/// Flattens (reference, codebooks...) in storage order and applies one AdamW step.
template <typename T>
void adamw_step(ModelParams<T>& params, const ParamGrads& grads, AdamWState& state) {
    const std::size_t n = params.parameter_count();
    if (grads.reference.size() != params.reference.size() ||
        grads.reference.size() + grads.codebooks.size() != n) {
        throw UsageError("adamw_step: gradient shape does not match parameters");
    }
    std::vector<T> flat;
    flat.reserve(n);
    flat.insert(flat.end(), params.reference.begin(), params.reference.end());
    for (const auto& cb : params.codebooks) flat.insert(flat.end(), cb.values().begin(), cb.values().end());
    std::vector<double> g;
    g.reserve(n);
    g.insert(g.end(), grads.reference.begin(), grads.reference.end());
    g.insert(g.end(), grads.codebooks.begin(), grads.codebooks.end());

    adamw_step(std::span<T>(flat), std::span<const double>(g), state);

    std::size_t off = 0;
    for (auto& v : params.reference) v = flat[off++];
    for (auto& cb : params.codebooks) {
        for (auto& v : cb.values()) v = flat[off++];
    }
}

}  // namespace sidforge
