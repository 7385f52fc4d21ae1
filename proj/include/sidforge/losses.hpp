#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "sidforge/parallel.hpp"
#include "sidforge/quantizer.hpp"

namespace sidforge {

struct LossBreakdown {
    double rec = 0.0;
    double sc_term = 0.0;
    double pd_term = 0.0;
    double metric = 0.0;  ///< -sc_term + pd_term
    double total = 0.0;   ///< rec + lambda * metric
    double lambda = 0.0;
};

/// metric = -sc + pd; total = rec + lambda * metric.
inline LossBreakdown total_loss(double rec, double sc, double pd, double lambda) {
    if (lambda < 0.0) throw UsageError("total_loss: lambda must be >= 0");
    LossBreakdown out;
    out.rec = rec;
    out.sc_term = sc;
    out.pd_term = pd;
    out.metric = -sc + pd;
    out.total = rec + lambda * out.metric;
    out.lambda = lambda;
    return out;
}

/// ||x - (alpha r + sum_l e-hat^(l))||^2 for the item the trace was built from.
template <typename T>
double reconstruction_loss(const QuantizationTrace<T>& trace, std::span<const T> reference) {
    const auto xh = trace.reconstruction(reference);
    double acc = 0.0;
    for (std::size_t j = 0; j < xh.size(); ++j) {
        const double diff = static_cast<double>(trace.input[j]) - xh[j];
        acc += diff * diff;
    }
    return acc;
}

namespace detail {

/// d cos(a, b) / d a, accumulated into `out` with weight `scale`.
inline void add_cosine_grad(std::span<const double> a, std::span<const double> b, double na,
                            double nb, double cos_ab, double scale, std::span<double> out) {
    if (na < kNormEpsilon || nb < kNormEpsilon) return;
    const double inv = 1.0 / (na * nb);
    const double self = cos_ab / (na * na);
    for (std::size_t j = 0; j < a.size(); ++j) out[j] += scale * (b[j] * inv - self * a[j]);
}

inline double cosine_with_norms(std::span<const double> a, std::span<const double> b, double na,
                                double nb) {
    if (na < kNormEpsilon || nb < kNormEpsilon) return 0.0;
    double acc = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) acc += a[j] * b[j];
    return acc / (na * nb);
}

/// Cosine via dot / sqrt(|a|^2 |b|^2), clamped to [-1, 1]. Identical inputs give exactly 1.
inline double exact_cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        ab += a[j] * b[j];
        aa += a[j] * a[j];
        bb += b[j] * b[j];
    }
    if (aa < kNormEpsilon * kNormEpsilon || bb < kNormEpsilon * kNormEpsilon) return 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace detail

struct ScResult {
    double value = 0.0;
    bool defined = false;          ///< false when no group has two or more members
    std::size_t groups = 0;        ///< groups of size >= 2
    std::size_t singletons = 0;
    std::vector<std::vector<double>> grad;  ///< dSC/dq_i, filled when requested
};

/// Mean over groups (keyed by `keys`, size >= 2) of the mean pairwise cosine of `q`.
inline ScResult semantic_cohesion(const std::vector<std::vector<double>>& q,
                                  std::span<const std::uint32_t> keys, bool want_grad) {
    if (q.size() != keys.size()) throw UsageError("semantic_cohesion: key count mismatch");
    std::map<std::uint32_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < q.size(); ++i) groups[keys[i]].push_back(i);

    ScResult out;
    std::vector<std::vector<std::size_t>> qualifying;
    for (auto& [key, members] : groups) {
        if (members.size() >= 2) {
            qualifying.push_back(std::move(members));
        } else {
            ++out.singletons;
        }
    }
    out.groups = qualifying.size();
    if (want_grad) out.grad.assign(q.size(), std::vector<double>(q.empty() ? 0 : q[0].size(), 0.0));
    if (qualifying.empty()) return out;
    out.defined = true;

    std::vector<double> norms(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) norms[i] = l2_norm(std::span<const double>(q[i]));

    const double per_group = 1.0 / static_cast<double>(qualifying.size());
    double total = 0.0;
    for (const auto& members : qualifying) {
        const double g = static_cast<double>(members.size());
        const double pair_weight = 2.0 / (g * (g - 1.0));
        double sum = 0.0;
        for (std::size_t a = 0; a < members.size(); ++a) {
            const std::size_t i = members[a];
            for (std::size_t b = a + 1; b < members.size(); ++b) {
                const std::size_t j = members[b];
                const double c = detail::cosine_with_norms(q[i], q[j], norms[i], norms[j]);
                sum += c;
                if (want_grad) {
                    const double w = per_group * pair_weight;
                    detail::add_cosine_grad(q[i], q[j], norms[i], norms[j], c, w, out.grad[i]);
                    detail::add_cosine_grad(q[j], q[i], norms[j], norms[i], c, w, out.grad[j]);
                }
            }
        }
        total += pair_weight * sum;
    }
    out.value = total * per_group;
    return out;
}

struct PdResult {
    double value = 0.0;
    bool defined = false;
};

/// log( 2/(M(M-1)) sum_{a<b} exp(-t (1 - cos(p_a, p_b))) ). Optionally accumulates
/// scale * dPD/dp_a into `grad` (same layout as `centroids`).
inline PdResult preference_discrimination(const std::vector<std::vector<double>>& centroids,
                                          double t, double scale = 0.0,
                                          std::vector<std::vector<double>>* grad = nullptr) {
    if (!(t > 0.0)) throw UsageError("preference discrimination: t must be > 0");
    const std::size_t m = centroids.size();
    PdResult out;
    if (m < 2) return out;
    std::vector<double> norms(m);
    for (std::size_t a = 0; a < m; ++a) norms[a] = l2_norm(std::span<const double>(centroids[a]));

    std::vector<double> cosines(grad ? m * m : 0);
    double sum = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b) {
            const double c = detail::exact_cosine(centroids[a], centroids[b]);
            sum += std::exp(-t * (1.0 - c));
            if (grad) cosines[a * m + b] = c;
        }
    }
    const double pairs = static_cast<double>(m) * static_cast<double>(m - 1) / 2.0;
    out.value = std::log(sum / pairs);
    out.defined = true;

    if (grad) {
        // d log(S)/d cos_ab = t exp(-t(1-cos_ab)) / S
        for (std::size_t a = 0; a < m; ++a) {
            for (std::size_t b = a + 1; b < m; ++b) {
                const double c = cosines[a * m + b];
                const double w = scale * t * std::exp(-t * (1.0 - c)) / sum;
                detail::add_cosine_grad(centroids[a], centroids[b], norms[a], norms[b], c, w, (*grad)[a]);
                detail::add_cosine_grad(centroids[b], centroids[a], norms[b], norms[a], c, w, (*grad)[b]);
            }
        }
    }
    return out;
}

/// SC surrogate over a batch: groups by layer-1 code, q_i = sum_l e-hat_i^(l).
template <typename T>
ScResult batch_sc(std::span<const QuantizationTrace<T>> traces, bool want_grad = false) {
    if (traces.size() < 2) throw UsageError("batch_sc: batch size must be >= 2");
    std::vector<std::vector<double>> q;
    std::vector<std::uint32_t> keys;
    q.reserve(traces.size());
    for (const auto& tr : traces) {
        q.push_back(tr.cumulative_quantized());
        keys.push_back(tr.sid.front());
    }
    return semantic_cohesion(q, keys, want_grad);
}

/// PD surrogate: per layer, PD over that layer's codewords as centroids; mean over layers.
/// With `grad`, adds scale * dPD/dcodeword into the codebook gradients.
template <typename T>
PdResult batch_pd(const ModelParams<T>& params, double t, double scale = 0.0,
                  ParamGrads* grad = nullptr) {
    PdResult out;
    const std::size_t m = params.config.codebook_size;
    const std::size_t d = params.dim();
    if (m < 2) return out;
    const double per_layer = 1.0 / static_cast<double>(params.layers());
    double total = 0.0;
    for (std::size_t l = 0; l < params.layers(); ++l) {
        std::vector<std::vector<double>> cw(m, std::vector<double>(d));
        for (std::size_t k = 0; k < m; ++k) {
            const auto row = params.codebooks[l].row(k);
            std::copy(row.begin(), row.end(), cw[k].begin());
        }
        std::vector<std::vector<double>> g;
        if (grad) g.assign(m, std::vector<double>(d, 0.0));
        const PdResult layer = preference_discrimination(cw, t, scale * per_layer, grad ? &g : nullptr);
        total += layer.value;
        if (grad) {
            double* dst = grad->codebooks.data() + l * m * d;
            for (std::size_t k = 0; k < m; ++k) {
                for (std::size_t j = 0; j < d; ++j) dst[k * d + j] += g[k][j];
            }
        }
    }
    out.value = total * per_layer;
    out.defined = true;
    return out;
}

struct LossOptions {
    double lambda = 0.01;
    double t = 2.0;
    bool use_sc = true;
    bool use_pd = true;
};

struct BatchLoss {
    LossBreakdown breakdown;
    bool sc_defined = false;
    ParamGrads grads;  ///< empty unless gradients were requested
};

/// Forward, loss and (optionally) exact gradients of the total loss for the given rows.
/// Reconstruction is averaged over the batch; per-item work is split into fixed chunks and
/// merged in chunk order.
template <typename T>
BatchLoss batch_loss(const ModelParams<T>& params, const Matrix<T>& data,
                     std::span<const std::size_t> rows, const LossOptions& opt, bool want_grad) {
    const std::size_t b = rows.size();
    const std::size_t d = params.dim();
    if (b == 0) throw UsageError("batch_loss: empty batch");
    const CodebookNorms norms = CodebookNorms::of(params);
    const std::span<const T> r(params.reference);

    std::vector<QuantizationTrace<T>> traces(b);
    std::vector<double> rec_item(b);
    const auto chunks = fixed_chunks(b, 32);
    parallel_for(chunks.size(), [&](std::size_t c) {
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            traces[i] = quantize_full(data.row(rows[i]), params, norms);
            rec_item[i] = reconstruction_loss(traces[i], r);
        }
    });
    double rec = 0.0;
    for (double v : rec_item) rec += v;
    rec /= static_cast<double>(b);

    BatchLoss out;
    ScResult sc;
    if (opt.use_sc && b >= 2) {
        sc = batch_sc(std::span<const QuantizationTrace<T>>(traces), want_grad && opt.lambda > 0.0);
    }
    out.sc_defined = sc.defined;
    ParamGrads pd_grad;
    if (want_grad) pd_grad = ParamGrads::zeros_like(params);
    double pd = 0.0;
    if (opt.use_pd) {
        const bool grad_pd = want_grad && opt.lambda > 0.0;
        pd = batch_pd(params, opt.t, opt.lambda, grad_pd ? &pd_grad : nullptr).value;
    }
    out.breakdown = total_loss(rec, sc.value, pd, opt.lambda);
    if (!want_grad) return out;

    std::vector<ParamGrads> partial(chunks.size());
    const bool sc_grad = !sc.grad.empty();
    const std::size_t n_layers = params.layers();
    parallel_for(chunks.size(), [&](std::size_t c) {
        ParamGrads g = ParamGrads::zeros_like(params);
        std::vector<double> grad_recon(d);
        std::vector<double> aux(sc_grad ? n_layers * d : 0);
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            const auto xh = traces[i].reconstruction(r);
            for (std::size_t j = 0; j < d; ++j) {
                grad_recon[j] = -2.0 * (static_cast<double>(traces[i].input[j]) - xh[j]) / static_cast<double>(b);
            }
            if (sc_grad) {
                // total = rec - lambda * SC + ..., and q_i depends on every layer's e-hat.
                for (std::size_t l = 0; l < n_layers; ++l) {
                    for (std::size_t j = 0; j < d; ++j) aux[l * d + j] = -opt.lambda * sc.grad[i][j];
                }
            }
            accumulate_backward(traces[i], params, norms, std::span<const double>(grad_recon),
                                std::span<const double>(aux), g);
        }
        partial[c] = std::move(g);
    });
    out.grads = std::move(pd_grad);
    for (const auto& g : partial) out.grads.add(g);
    return out;
}

}  // namespace sidforge
