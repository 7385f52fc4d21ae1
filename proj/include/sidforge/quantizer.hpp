#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sidforge/dataset.hpp"
#include "sidforge/kmeans.hpp"
#include "sidforge/numerics.hpp"
#include "sidforge/parallel.hpp"
#include "sidforge/projection.hpp"

namespace sidforge {

struct QuantizerConfig {
    std::size_t num_layers = 3;     ///< L
    std::size_t codebook_size = 256;  ///< M
    std::size_t top_k = 256;        ///< K, 1 <= K <= M
    std::size_t embedding_dim = 0;  ///< d

    void validate() const {
        if (num_layers == 0) throw UsageError("num_layers must be >= 1");
        if (codebook_size == 0) throw UsageError("codebook_size must be >= 1");
        if (embedding_dim == 0) throw UsageError("embedding_dim must be >= 1");
        if (top_k == 0 || top_k > codebook_size) {
            throw UsageError("top_k must be in [1, codebook_size]");
        }
    }

    bool operator==(const QuantizerConfig&) const = default;
};

/// How a layer picks codewords.
///  - rating: cosine scores, softmax weights, top-K renormalised soft mixture (the R3 quantizer)
///  - nearest: hard nearest codeword by Euclidean distance (STE baselines, k-means baselines)
enum class AssignMode : std::uint8_t { rating = 0, nearest = 1 };

enum class InitMode { kmeans, random };

template <typename T>
struct ModelParams {
    QuantizerConfig config;
    AssignMode mode = AssignMode::rating;
    bool use_reference = true;
    std::vector<T> reference;          ///< r; empty when use_reference is false
    std::vector<Matrix<T>> codebooks;  ///< L matrices of M x d

    std::size_t dim() const noexcept { return config.embedding_dim; }
    std::size_t layers() const noexcept { return codebooks.size(); }

    std::size_t parameter_count() const noexcept {
        std::size_t n = reference.size();
        for (const auto& cb : codebooks) n += cb.values().size();
        return n;
    }

    void validate() const {
        config.validate();
        if (codebooks.size() != config.num_layers) {
            throw UsageError("model has " + std::to_string(codebooks.size()) + " codebooks, config says " +
                             std::to_string(config.num_layers));
        }
        for (const auto& cb : codebooks) {
            if (cb.rows() != config.codebook_size || cb.cols() != config.embedding_dim) {
                throw UsageError("codebook shape does not match config");
            }
        }
        if (use_reference && reference.size() != config.embedding_dim) {
            throw UsageError("reference vector dimension does not match config");
        }
        if (!use_reference && !reference.empty()) {
            throw UsageError("reference vector present although disabled");
        }
    }

    bool operator==(const ModelParams&) const = default;
};

/// Gradients of a scalar loss with respect to every parameter, in double.
struct ParamGrads {
    std::vector<double> reference;
    std::vector<double> codebooks;  ///< L * M * d, same layout as the codebooks

    template <typename T>
    static ParamGrads zeros_like(const ModelParams<T>& params) {
        ParamGrads g;
        g.reference.assign(params.reference.size(), 0.0);
        g.codebooks.assign(params.layers() * params.config.codebook_size * params.dim(), 0.0);
        return g;
    }

    void add(const ParamGrads& other) {
        for (std::size_t i = 0; i < reference.size(); ++i) reference[i] += other.reference[i];
        for (std::size_t i = 0; i < codebooks.size(); ++i) codebooks[i] += other.codebooks[i];
    }

    void scale(double s) {
        for (double& v : reference) v *= s;
        for (double& v : codebooks) v *= s;
    }

    bool all_zero() const {
        auto nz = [](double v) { return v != 0.0; };
        return std::none_of(reference.begin(), reference.end(), nz) &&
               std::none_of(codebooks.begin(), codebooks.end(), nz);
    }
};

template <typename T>
struct LayerTrace {
    std::vector<T> input_residual;           ///< e^(l-1)
    std::vector<double> scores;              ///< M cosine scores
    std::vector<double> weights;             ///< softmax over all M scores
    std::vector<std::uint32_t> selected;     ///< K indices, descending weight
    std::vector<double> renormalized_weights;  ///< K weights summing to 1
    std::vector<T> quantized;                ///< e-hat^(l)
    std::vector<T> output_residual;          ///< e^(l)
};

template <typename T>
struct QuantizationTrace {
    std::vector<T> input;  ///< x
    ProjectionResult<T> projection;
    std::vector<LayerTrace<T>> layers;
    std::vector<std::uint32_t> sid;

    /// Sum of quantized vectors across layers (the item's quantized embedding q).
    std::vector<double> cumulative_quantized() const {
        std::vector<double> q(input.size(), 0.0);
        for (const auto& layer : layers) {
            for (std::size_t j = 0; j < q.size(); ++j) q[j] += layer.quantized[j];
        }
        return q;
    }

    /// alpha * r + sum of quantized vectors.
    template <typename R>
    std::vector<double> reconstruction(std::span<const R> reference) const {
        std::vector<double> xh = cumulative_quantized();
        for (std::size_t j = 0; j < reference.size(); ++j) xh[j] += projection.alpha * reference[j];
        return xh;
    }
};

/// Codeword norms per layer, shared across items within one parameter version.
struct CodebookNorms {
    std::vector<std::vector<double>> per_layer;

    template <typename T>
    static CodebookNorms of(const ModelParams<T>& params) {
        CodebookNorms out;
        for (const auto& cb : params.codebooks) {
            std::vector<double> norms(cb.rows());
            for (std::size_t k = 0; k < cb.rows(); ++k) norms[k] = l2_norm(cb.row(k));
            out.per_layer.push_back(std::move(norms));
        }
        return out;
    }
};

struct Rating {
    std::vector<double> scores;
    std::vector<double> weights;
};

namespace detail {

template <typename T>
Rating rate_with_norms(std::span<const T> residual, const Matrix<T>& codebook,
                       std::span<const double> codeword_norms) {
    const std::size_t m = codebook.rows();
    Rating out;
    out.scores.assign(m, 0.0);
    const double ne = l2_norm(residual);
    if (ne >= kNormEpsilon) {
        for (std::size_t k = 0; k < m; ++k) {
            if (codeword_norms[k] < kNormEpsilon) continue;
            out.scores[k] = dot(residual, codebook.row(k)) / (ne * codeword_norms[k]);
        }
    }
    out.weights = softmax(std::span<const double>(out.scores));
    return out;
}

/// Indices of the k largest values, descending, ties to the lowest index.
inline std::vector<std::uint32_t> top_k_indices(std::span<const double> values, std::size_t k) {
    std::vector<std::uint32_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0u);
    auto before = [&](std::uint32_t a, std::uint32_t b) {
        return values[a] > values[b] || (values[a] == values[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    idx.resize(k);
    return idx;
}

template <typename T>
LayerTrace<T> quantize_layer_with_norms(std::span<const T> residual, const Matrix<T>& codebook,
                                        std::span<const double> codeword_norms, std::size_t top_k) {
    const std::size_t d = residual.size();
    LayerTrace<T> tr;
    tr.input_residual.assign(residual.begin(), residual.end());
    Rating rating = rate_with_norms(residual, codebook, codeword_norms);
    // Selecting on scores is equivalent to selecting on weights (softmax is monotone) but
    // avoids ties introduced by rounding the weights.
    tr.selected = top_k_indices(rating.scores, top_k);
    double mass = 0.0;
    for (auto k : tr.selected) mass += rating.weights[k];
    tr.renormalized_weights.reserve(top_k);
    for (auto k : tr.selected) tr.renormalized_weights.push_back(rating.weights[k] / mass);

    std::vector<double> mix(d, 0.0);
    for (std::size_t s = 0; s < tr.selected.size(); ++s) {
        const auto c = codebook.row(tr.selected[s]);
        const double w = tr.renormalized_weights[s];
        for (std::size_t j = 0; j < d; ++j) mix[j] += w * c[j];
    }
    tr.quantized.resize(d);
    tr.output_residual.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        tr.quantized[j] = static_cast<T>(mix[j]);
        tr.output_residual[j] = static_cast<T>(static_cast<double>(residual[j]) - tr.quantized[j]);
    }
    tr.scores = std::move(rating.scores);
    tr.weights = std::move(rating.weights);
    return tr;
}

/// Hard nearest-codeword layer. Scores hold negated squared distances.
template <typename T>
LayerTrace<T> nearest_layer(std::span<const T> residual, const Matrix<T>& codebook) {
    const std::size_t d = residual.size();
    const std::size_t m = codebook.rows();
    LayerTrace<T> tr;
    tr.input_residual.assign(residual.begin(), residual.end());
    tr.scores.resize(m);
    std::uint32_t best = 0;
    for (std::size_t k = 0; k < m; ++k) {
        tr.scores[k] = -squared_distance(residual, codebook.row(k));
        if (tr.scores[k] > tr.scores[best]) best = static_cast<std::uint32_t>(k);
    }
    tr.weights.assign(m, 0.0);
    tr.weights[best] = 1.0;
    tr.selected = {best};
    tr.renormalized_weights = {1.0};
    const auto c = codebook.row(best);
    tr.quantized.assign(c.begin(), c.end());
    tr.output_residual.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        tr.output_residual[j] = static_cast<T>(static_cast<double>(residual[j]) - c[j]);
    }
    return tr;
}

}  // namespace detail

/// Cosine scores of a residual against every codeword, and their softmax.
template <typename T>
Rating rate(std::span<const T> residual, const Matrix<T>& codebook) {
    detail::require_same_dim(residual.size(), codebook.cols(), "rate");
    std::vector<double> norms(codebook.rows());
    for (std::size_t k = 0; k < codebook.rows(); ++k) norms[k] = l2_norm(codebook.row(k));
    return detail::rate_with_norms(residual, codebook, norms);
}

/// One rating-quantization layer: top-K of the softmax weights, renormalised, mixed.
template <typename T>
LayerTrace<T> quantize_layer(std::span<const T> residual, const Matrix<T>& codebook,
                             std::size_t top_k) {
    detail::require_same_dim(residual.size(), codebook.cols(), "quantize_layer");
    if (top_k == 0 || top_k > codebook.rows()) throw UsageError("quantize_layer: K out of range");
    std::vector<double> norms(codebook.rows());
    for (std::size_t k = 0; k < codebook.rows(); ++k) norms[k] = l2_norm(codebook.row(k));
    return detail::quantize_layer_with_norms(residual, codebook, std::span<const double>(norms), top_k);
}

template <typename T>
QuantizationTrace<T> quantize_full(std::span<const T> x, const ModelParams<T>& params,
                                   const CodebookNorms& norms, std::size_t top_k) {
    detail::require_same_dim(x.size(), params.dim(), "quantize_full");
    QuantizationTrace<T> tr;
    tr.input.assign(x.begin(), x.end());
    if (params.use_reference) {
        tr.projection = project_forward(x, std::span<const T>(params.reference));
    } else {
        tr.projection.alpha = 0.0;
        tr.projection.residual.assign(x.begin(), x.end());
    }
    std::span<const T> residual = tr.projection.residual;
    tr.layers.reserve(params.layers());
    tr.sid.reserve(params.layers());
    for (std::size_t l = 0; l < params.layers(); ++l) {
        if (params.mode == AssignMode::rating) {
            tr.layers.push_back(detail::quantize_layer_with_norms(
                residual, params.codebooks[l], std::span<const double>(norms.per_layer[l]), top_k));
        } else {
            tr.layers.push_back(detail::nearest_layer(residual, params.codebooks[l]));
        }
        tr.sid.push_back(tr.layers.back().selected.front());
        residual = tr.layers.back().output_residual;
    }
    return tr;
}

template <typename T>
QuantizationTrace<T> quantize_full(std::span<const T> x, const ModelParams<T>& params,
                                   const CodebookNorms& norms) {
    return quantize_full(x, params, norms, params.config.top_k);
}

template <typename T>
QuantizationTrace<T> quantize_full(std::span<const T> x, const ModelParams<T>& params) {
    return quantize_full(x, params, CodebookNorms::of(params));
}

/// Reverse pass through a rating-mode trace.
///
/// `grad_recon` is dL/d(x-hat) where x-hat = alpha r + sum_l e-hat^(l). `aux_grads` (may be
/// empty) holds an extra dL/d(e-hat^(l)) per layer, laid out as L * d. The top-K selection is
/// a constant mask. Gradients are added into `out`.
template <typename T>
void accumulate_backward(const QuantizationTrace<T>& trace, const ModelParams<T>& params,
                         const CodebookNorms& norms, std::span<const double> grad_recon,
                         std::span<const double> aux_grads, ParamGrads& out) {
    const std::size_t d = params.dim();
    const std::size_t m = params.config.codebook_size;
    const std::size_t n_layers = params.layers();
    if (params.mode != AssignMode::rating) {
        throw UsageError("quantize_backward: only rating-mode models are differentiable");
    }
    if (trace.layers.size() != n_layers || trace.input.size() != d || grad_recon.size() != d ||
        (!aux_grads.empty() && aux_grads.size() != n_layers * d) ||
        out.codebooks.size() != n_layers * m * d || out.reference.size() != params.reference.size()) {
        throw UsageError("quantize_backward: trace, params and gradients disagree in shape");
    }

    std::vector<double> downstream(d, 0.0);  // dL/de^(l)
    std::vector<double> g_hat(d);
    std::vector<double> g_input(d);
    for (std::size_t li = n_layers; li-- > 0;) {
        const auto& layer = trace.layers[li];
        const auto& cb = params.codebooks[li];
        const auto& cnorm = norms.per_layer[li];
        double* g_cb = out.codebooks.data() + li * m * d;

        for (std::size_t j = 0; j < d; ++j) {
            g_hat[j] = grad_recon[j] - downstream[j];
            if (!aux_grads.empty()) g_hat[j] += aux_grads[li * d + j];
        }

        // e-hat = sum_s w_s c_s, with w = softmax restricted to the selected scores.
        const std::size_t n_sel = layer.selected.size();
        std::vector<double> g_w(n_sel);
        double mean = 0.0;
        for (std::size_t s = 0; s < n_sel; ++s) {
            const std::size_t k = layer.selected[s];
            const auto c = cb.row(k);
            const double w = layer.renormalized_weights[s];
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                acc += g_hat[j] * c[j];
                g_cb[k * d + j] += w * g_hat[j];
            }
            g_w[s] = acc;
            mean += w * acc;
        }

        std::fill(g_input.begin(), g_input.end(), 0.0);
        const auto& e = layer.input_residual;
        const double ne = l2_norm(std::span<const T>(e));
        if (ne >= kNormEpsilon) {
            for (std::size_t s = 0; s < n_sel; ++s) {
                const std::size_t k = layer.selected[s];
                const double nk = cnorm[k];
                if (nk < kNormEpsilon) continue;
                const double g_score = layer.renormalized_weights[s] * (g_w[s] - mean);
                if (g_score == 0.0) continue;
                const double score = layer.scores[k];
                const auto c = cb.row(k);
                const double inv = 1.0 / (ne * nk);
                const double e_coef = score / (ne * ne);
                const double c_coef = score / (nk * nk);
                for (std::size_t j = 0; j < d; ++j) {
                    g_input[j] += g_score * (c[j] * inv - e_coef * e[j]);
                    g_cb[k * d + j] += g_score * (e[j] * inv - c_coef * c[j]);
                }
            }
        }
        for (std::size_t j = 0; j < d; ++j) downstream[j] += g_input[j];
    }

    if (params.use_reference) {
        const std::span<const T> r(params.reference);
        const std::span<const T> x(trace.input);
        const double alpha = trace.projection.alpha;
        double g_alpha = 0.0;
        for (std::size_t j = 0; j < d; ++j) g_alpha += r[j] * grad_recon[j];
        const ProjectionGrads pg =
            project_backward(x, r, g_alpha, std::span<const double>(downstream));
        for (std::size_t j = 0; j < d; ++j) {
            out.reference[j] += pg.grad_r[j] + alpha * grad_recon[j];
        }
    }
}

template <typename T>
ParamGrads quantize_backward(const QuantizationTrace<T>& trace, const ModelParams<T>& params,
                             std::span<const double> grad_recon,
                             std::span<const double> aux_grads = {}) {
    ParamGrads out = ParamGrads::zeros_like(params);
    accumulate_backward(trace, params, CodebookNorms::of(params), grad_recon, aux_grads, out);
    return out;
}

/// SIDs for every row of `data` (argmax per layer), in row order.
template <typename T>
std::vector<std::uint32_t> assign_codes(const Matrix<T>& data, const ModelParams<T>& params) {
    const std::size_t n_layers = params.layers();
    std::vector<std::uint32_t> codes(data.rows() * n_layers);
    const CodebookNorms norms = CodebookNorms::of(params);
    const auto chunks = fixed_chunks(data.rows(), 128);
    parallel_for(chunks.size(), [&](std::size_t c) {
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            const auto tr = quantize_full(data.row(i), params, norms);
            std::copy(tr.sid.begin(), tr.sid.end(), codes.begin() + static_cast<std::ptrdiff_t>(i * n_layers));
        }
    });
    return codes;
}

inline SidTable emit_sids(const EmbeddingDataset& dataset, const ModelParams<float>& params) {
    if (dataset.size() > 0 && dataset.dim() != params.dim()) {
        throw Error("emit_sids: model dimension " + std::to_string(params.dim()) +
                         " does not match embedding dimension " + std::to_string(dataset.dim()));
    }
    SidTable table;
    table.ids = dataset.ids;
    table.num_layers = params.layers();
    table.codebook_size = params.config.codebook_size;
    if (dataset.size() > 0) table.codes = assign_codes(dataset.matrix, params);
    return table;
}

// ---------------------------------------------------------------------------
// Initialisation

/// Reference vector initialised at the data mean; a unit random vector if the mean is ~0.
template <typename T>
std::vector<T> init_reference(const Matrix<T>& data, std::uint64_t seed) {
    const std::size_t d = data.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < data.rows(); ++i) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += data(i, j);
    }
    double norm = 0.0;
    for (double& v : mean) {
        v /= static_cast<double>(std::max<std::size_t>(1, data.rows()));
        norm += v * v;
    }
    std::vector<T> r(d);
    if (std::sqrt(norm) < kNormEpsilon) {
        log_warning("reference init: data mean is ~0, using a random unit vector");
        Rng rng(derive_seed(seed, 0x4ef));
        double nn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] = rng.normal();
            nn += mean[j] * mean[j];
        }
        nn = std::sqrt(nn);
        for (std::size_t j = 0; j < d; ++j) r[j] = static_cast<T>(mean[j] / nn);
        return r;
    }
    for (std::size_t j = 0; j < d; ++j) r[j] = static_cast<T>(mean[j]);
    return r;
}

/// Initial residuals e^(0) of every row under the given parameters.
template <typename T>
Matrix<T> initial_residuals(const Matrix<T>& data, const ModelParams<T>& params) {
    if (!params.use_reference) return data;
    Matrix<T> out(data.rows(), data.cols());
    const std::span<const T> r(params.reference);
    for (std::size_t i = 0; i < data.rows(); ++i) {
        const auto pr = project_forward(data.row(i), r);
        std::copy(pr.residual.begin(), pr.residual.end(), out.row(i).begin());
    }
    return out;
}

namespace detail {

/// Hard-assign every residual row to one codeword and subtract it.
template <typename T>
void subtract_hard_assignment(Matrix<T>& residuals, const Matrix<T>& codebook, AssignMode mode) {
    std::vector<double> norms(codebook.rows());
    for (std::size_t k = 0; k < codebook.rows(); ++k) norms[k] = l2_norm(codebook.row(k));
    const auto chunks = fixed_chunks(residuals.rows(), 256);
    parallel_for(chunks.size(), [&](std::size_t c) {
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            auto row = residuals.row(i);
            const std::span<const T> crow(row.data(), row.size());
            std::uint32_t best = 0;
            if (mode == AssignMode::rating) {
                const auto rt = rate_with_norms(crow, codebook, std::span<const double>(norms));
                best = top_k_indices(rt.scores, 1).front();
            } else {
                best = nearest_layer(crow, codebook).selected.front();
            }
            const auto cw = codebook.row(best);
            for (std::size_t j = 0; j < row.size(); ++j) {
                row[j] = static_cast<T>(static_cast<double>(row[j]) - cw[j]);
            }
        }
    });
}

template <typename T>
Matrix<T> random_codebook(const Matrix<T>& residuals, std::size_t m, Rng& rng) {
    const std::size_t d = residuals.cols();
    const std::size_t n = residuals.rows();
    std::vector<double> mean(d, 0.0);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += residuals(i, j);
    }
    for (double& v : mean) v /= static_cast<double>(std::max<std::size_t>(1, n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = residuals(i, j) - mean[j];
            var[j] += diff * diff;
        }
    }
    Matrix<T> cb(m, d);
    for (std::size_t j = 0; j < d; ++j) {
        var[j] = std::sqrt(var[j] / static_cast<double>(std::max<std::size_t>(1, n)));
        if (!(var[j] > 0.0)) var[j] = 1e-3;
    }
    for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t j = 0; j < d; ++j) cb(k, j) = static_cast<T>(var[j] * rng.normal());
    }
    return cb;
}

template <typename T>
void reseed_zero_codewords(Matrix<T>& cb, const Matrix<T>& residuals, Rng& rng) {
    for (std::size_t k = 0; k < cb.rows(); ++k) {
        if (l2_norm(std::as_const(cb).row(k)) >= kNormEpsilon) continue;
        log_warning("codebook init: codeword " + std::to_string(k) + " has ~0 norm, re-seeding");
        auto dst = cb.row(k);
        const auto src = residuals.row(rng.below(residuals.rows()));
        for (std::size_t j = 0; j < dst.size(); ++j) {
            dst[j] = static_cast<T>(src[j] + 1e-3 * rng.normal());
        }
    }
}

}  // namespace detail

/// Codebooks for every layer: layer 1 from the initial residuals, layer l from the residuals
/// left after hard-assigning through layers 1..l-1. Deterministic given the seed.
template <typename T>
std::vector<Matrix<T>> init_codebooks(const Matrix<T>& data, const ModelParams<T>& params,
                                      InitMode init, std::uint64_t seed, int kmeans_iters = 100) {
    if (data.rows() == 0) throw UsageError("init_codebooks: empty dataset");
    const std::size_t m = params.config.codebook_size;
    if (data.rows() < m) {
        log_warning("init_codebooks: " + std::to_string(data.rows()) + " items for " +
                    std::to_string(m) + " codewords");
    }
    Matrix<T> residuals = initial_residuals(data, params);
    std::vector<Matrix<T>> out;
    for (std::size_t l = 0; l < params.config.num_layers; ++l) {
        Rng rng(derive_seed(seed, 0xc0de, l));
        Matrix<T> cb;
        if (init == InitMode::kmeans) {
            cb = kmeans(residuals, KMeansOptions{m, derive_seed(seed, 0x1a7e, l), kmeans_iters})
                     .centroids;
        } else {
            cb = detail::random_codebook(residuals, m, rng);
        }
        detail::reseed_zero_codewords(cb, residuals, rng);
        if (l + 1 < params.config.num_layers) {
            detail::subtract_hard_assignment(residuals, cb, params.mode);
        }
        out.push_back(std::move(cb));
    }
    return out;
}

}  // namespace sidforge
