#pragma once

#include <numeric>
#include <vector>

#include "sidforge/kmeans.hpp"
#include "sidforge/trainer.hpp"

namespace sidforge {

/// Losses of the straight-through baselines, each averaged over the batch.
struct SteLoss {
    double rec = 0.0;         ///< ||x - sum e-hat||^2 = ||e^(L)||^2
    double codebook = 0.0;    ///< sum_l ||sg[e^(l-1)] - c||^2
    double commitment = 0.0;  ///< beta * sum_l ||e^(l-1) - sg[c]||^2
    double total = 0.0;
};

struct SteBatch {
    SteLoss loss;
    ParamGrads grads;  ///< empty unless requested
};

/// Hard nearest-codeword forward over `rows`. Reconstruction gradients pass straight through
/// to the (fixed) input and the residual chain is detached, so only the codebook loss reaches
/// the parameters: d/dc ||sg[e] - c||^2 = 2 (c - e) for each selected codeword.
template <typename T>
SteBatch ste_batch(const ModelParams<T>& params, const Matrix<T>& data, std::span<const std::size_t> rows,
                   double beta, bool want_grad) {
    if (params.mode != AssignMode::nearest) throw UsageError("ste_batch: model must use nearest assignment");
    const std::size_t b = rows.size();
    if (b == 0) throw UsageError("ste_batch: empty batch");
    const std::size_t d = params.dim();
    const std::size_t m = params.config.codebook_size;
    const auto chunks = fixed_chunks(b, 32);
    struct Partial {
        double rec = 0.0;
        double quant = 0.0;
        ParamGrads grads;
    };
    std::vector<Partial> partial(chunks.size());
    const double inv_b = 1.0 / static_cast<double>(b);
    parallel_for(chunks.size(), [&](std::size_t c) {
        Partial& p = partial[c];
        if (want_grad) p.grads = ParamGrads::zeros_like(params);
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            const auto tr = quantize_full(data.row(rows[i]), params);
            for (std::size_t l = 0; l < tr.layers.size(); ++l) {
                const auto& layer = tr.layers[l];
                const std::size_t k = layer.selected.front();
                const auto cw = params.codebooks[l].row(k);
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = static_cast<double>(cw[j]) - static_cast<double>(layer.input_residual[j]);
                    p.quant += diff * diff;
                    if (want_grad) p.grads.codebooks[(l * m + k) * d + j] += 2.0 * diff * inv_b;
                }
            }
            const auto& last = tr.layers.back().output_residual;
            for (std::size_t j = 0; j < d; ++j) p.rec += static_cast<double>(last[j]) * last[j];
        }
    });
    SteBatch out;
    if (want_grad) out.grads = ParamGrads::zeros_like(params);
    double rec = 0.0;
    double quant = 0.0;
    for (const auto& p : partial) {
        rec += p.rec;
        quant += p.quant;
        if (want_grad) out.grads.add(p.grads);
    }
    out.loss.rec = rec * inv_b;
    out.loss.codebook = quant * inv_b;
    out.loss.commitment = beta * quant * inv_b;
    out.loss.total = out.loss.rec + out.loss.codebook + out.loss.commitment;
    return out;
}

namespace detail {

inline TrainResult train_ste(const EmbeddingDataset& dataset, const TrainConfig& cfg) {
    detail::check_dataset(dataset, cfg);
    const Matrix<float>& data = dataset.matrix;

    TrainResult res;
    res.params = detail::empty_model(cfg, dataset.dim(), AssignMode::nearest, false);
    res.params.codebooks =
        init_codebooks(data, res.params, cfg.init, derive_seed(cfg.seed, 0x1417), cfg.init_kmeans_iters);
    res.params.validate();
    res.optimizer.lr = cfg.lr;
    res.optimizer.weight_decay = cfg.weight_decay;
    res.optimizer.clip_norm = cfg.clip_norm;

    const Matrix<float> eval_data = detail::eval_subsample(data, cfg.eval_subsample, cfg.seed);
    std::vector<std::size_t> eval_rows(eval_data.rows());
    std::iota(eval_rows.begin(), eval_rows.end(), std::size_t{0});

    auto step = [&](std::span<const std::size_t> rows) {
        const SteBatch sb = ste_batch(res.params, data, rows, cfg.beta, true);
        adamw_step(res.params, sb.grads, res.optimizer);
    };
    auto evaluate = [&] {
        const SteBatch sb =
            ste_batch(res.params, eval_data, std::span<const std::size_t>(eval_rows), cfg.beta, false);
        detail::EvalPoint e;
        e.rec = sb.loss.rec;
        e.total = sb.loss.total;
        e.usage = mean_usage(assign_codes(eval_data, res.params), res.params.layers(), cfg.codebook_size);
        return e;
    };
    Rng revive_rng(derive_seed(cfg.seed, 0x4e71));
    auto epoch_end = [&](std::size_t) {
        if (cfg.revive) detail::revive_dead_codewords(res.params, eval_data, revive_rng);
    };
    res.log = detail::run_loop(dataset.size(), cfg, step, evaluate, epoch_end);
    return res;
}

}  // namespace detail

/// Single-codebook straight-through quantizer; the layer count is forced to 1.
inline TrainResult vq_vae_train(const EmbeddingDataset& dataset, TrainConfig cfg) {
    cfg.method = Method::vqvae;
    return detail::train_ste(dataset, cfg);
}

/// L-layer straight-through residual quantizer on Euclidean residuals, no reference vector.
inline TrainResult rq_vae_train(const EmbeddingDataset& dataset, TrainConfig cfg) {
    cfg.method = Method::rqvae;
    return detail::train_ste(dataset, cfg);
}

/// Layered k-means: layer 1 clusters x, layer l clusters the residuals left by layer l-1.
/// Each layer runs Lloyd to convergence (bounded by cfg.baseline_kmeans_iters).
inline TrainResult residual_kmeans(const EmbeddingDataset& dataset, TrainConfig cfg) {
    if (cfg.method != Method::kmeans) cfg.method = Method::rkmeans;
    detail::check_dataset(dataset, cfg);
    TrainResult res;
    res.params = detail::empty_model(cfg, dataset.dim(), AssignMode::nearest, false);
    Matrix<float> residuals = dataset.matrix;
    for (std::size_t l = 0; l < cfg.effective_layers(); ++l) {
        auto km = kmeans(residuals, KMeansOptions{cfg.codebook_size, derive_seed(cfg.seed, 0x4b4d, l),
                                                  cfg.baseline_kmeans_iters});
        for (std::size_t i = 0; i < residuals.rows(); ++i) {
            auto row = residuals.row(i);
            const auto c = km.centroids.row(km.assignments[i]);
            for (std::size_t j = 0; j < row.size(); ++j) row[j] -= c[j];
        }
        res.params.codebooks.push_back(std::move(km.centroids));
    }
    res.params.validate();
    return res;
}

/// Flat k-means over x (one layer).
inline TrainResult kmeans_baseline(const EmbeddingDataset& dataset, TrainConfig cfg) {
    cfg.method = Method::kmeans;
    return residual_kmeans(dataset, cfg);
}

/// Dispatches on cfg.method.
inline TrainResult train(const EmbeddingDataset& dataset, const TrainConfig& cfg) {
    switch (cfg.method) {
        case Method::r3: return train_r3(dataset, cfg);
        case Method::rqvae: return rq_vae_train(dataset, cfg);
        case Method::vqvae: return vq_vae_train(dataset, cfg);
        case Method::rkmeans: return residual_kmeans(dataset, cfg);
        case Method::kmeans: return kmeans_baseline(dataset, cfg);
    }
    throw UsageError("unknown method");
}

}  // namespace sidforge
