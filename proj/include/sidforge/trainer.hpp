#pragma once

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "sidforge/dataset.hpp"
#include "sidforge/log.hpp"
#include "sidforge/losses.hpp"
#include "sidforge/optimizer.hpp"
#include "sidforge/quantizer.hpp"
#include "sidforge/random.hpp"

namespace sidforge {

enum class Method { r3, rqvae, vqvae, rkmeans, kmeans };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::r3: return "r3";
        case Method::rqvae: return "rqvae";
        case Method::vqvae: return "vqvae";
        case Method::rkmeans: return "rkmeans";
        case Method::kmeans: return "kmeans";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "r3") return Method::r3;
    if (s == "rqvae") return Method::rqvae;
    if (s == "vqvae") return Method::vqvae;
    if (s == "rkmeans") return Method::rkmeans;
    if (s == "kmeans") return Method::kmeans;
    throw UsageError("unknown method '" + s + "' (expected r3, rqvae, vqvae, rkmeans or kmeans)");
}

inline std::string to_string(InitMode m) { return m == InitMode::kmeans ? "kmeans" : "random"; }

inline InitMode parse_init_mode(const std::string& s) {
    if (s == "kmeans") return InitMode::kmeans;
    if (s == "random") return InitMode::random;
    throw UsageError("unknown init mode '" + s + "' (expected kmeans or random)");
}

struct TrainConfig {
    Method method = Method::r3;
    std::size_t epochs = 50;
    std::size_t batch_size = 256;
    std::uint64_t seed = 42;
    double lambda = 0.01;
    double t = 2.0;
    std::size_t top_k = 0;  ///< 0 means K = M
    std::size_t num_layers = 3;
    std::size_t codebook_size = 256;
    std::size_t dim = 0;  ///< 0 means "take it from the data"
    double lr = 5e-4;
    double weight_decay = 1e-5;
    double clip_norm = 0.0;
    InitMode init = InitMode::kmeans;
    std::size_t log_every = 50;

    bool use_reference = true;  ///< r3 only; false gives e^(0) = x
    bool use_sc = true;
    bool use_pd = true;
    double beta = 0.25;  ///< commitment weight of the STE baselines
    bool revive = false;
    bool record_wall_time = true;
    std::size_t eval_subsample = 4096;
    int init_kmeans_iters = 100;
    int baseline_kmeans_iters = 300;

    std::size_t effective_top_k() const noexcept { return top_k == 0 ? codebook_size : top_k; }

    std::size_t effective_layers() const noexcept {
        return method == Method::vqvae || method == Method::kmeans ? 1 : num_layers;
    }

    void validate() const {
        if (epochs == 0) throw UsageError("epochs must be >= 1");
        if (batch_size == 0) throw UsageError("batch size must be >= 1");
        if (num_layers == 0) throw UsageError("layers must be >= 1");
        if (codebook_size == 0) throw UsageError("codebook size must be >= 1");
        if (effective_top_k() > codebook_size) throw UsageError("top-k must be <= codebook size");
        if (log_every == 0) throw UsageError("log-every must be >= 1");
        if (eval_subsample == 0) throw UsageError("eval subsample must be >= 1");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be positive");
        if (!(weight_decay >= 0.0)) throw UsageError("weight decay must be >= 0");
        if (!(clip_norm >= 0.0)) throw UsageError("clip norm must be >= 0");
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw UsageError("lambda must be >= 0");
        if (!(t > 0.0) || !std::isfinite(t)) throw UsageError("t must be positive");
        if (!(beta >= 0.0)) throw UsageError("beta must be >= 0");
        if (method == Method::r3 && lambda > 0.0 && use_sc && batch_size < 2) {
            throw UsageError("batch size must be >= 2 when lambda > 0");
        }
    }
};

struct TrainLogRow {
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    double loss_rec = 0.0;
    double loss_sc = 0.0;
    double loss_pd = 0.0;
    double loss_total = 0.0;
    double codebook_usage = 0.0;  ///< mean over layers, in [0, 1]
    std::uint64_t wall_ms = 0;

    bool operator==(const TrainLogRow&) const = default;
};

struct TrainResult {
    ModelParams<float> params;
    AdamWState optimizer;
    std::vector<TrainLogRow> log;
};

inline constexpr const char* kTrainLogHeader =
    "step,epoch,loss_rec,loss_sc,loss_pd,loss_total,codebook_usage,wall_ms";

inline std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string format_train_log(const std::vector<TrainLogRow>& rows) {
    std::string out = std::string(kTrainLogHeader) + "\n";
    for (const auto& r : rows) {
        out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + format_number(r.loss_rec) + "," +
               format_number(r.loss_sc) + "," + format_number(r.loss_pd) + "," + format_number(r.loss_total) +
               "," + format_number(r.codebook_usage) + "," + std::to_string(r.wall_ms) + "\n";
    }
    return out;
}

inline void write_train_log(const std::vector<TrainLogRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << format_train_log(rows);
    if (!out) throw IoError("write failed for '" + path + "'");
}

/// Mean over layers of the fraction of codewords chosen by at least one row.
inline double mean_usage(std::span<const std::uint32_t> codes, std::size_t layers, std::size_t m) {
    if (layers == 0 || codes.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<char> used(m, 0);
        for (std::size_t i = l; i < codes.size(); i += layers) used[codes[i]] = 1;
        total += static_cast<double>(std::count(used.begin(), used.end(), 1)) / static_cast<double>(m);
    }
    return total / static_cast<double>(layers);
}

namespace detail {

inline ModelParams<float> empty_model(const TrainConfig& cfg, std::size_t d, AssignMode mode, bool use_ref) {
    ModelParams<float> p;
    p.config.num_layers = cfg.effective_layers();
    p.config.codebook_size = cfg.codebook_size;
    p.config.top_k = mode == AssignMode::rating ? cfg.effective_top_k() : 1;
    p.config.embedding_dim = d;
    p.mode = mode;
    p.use_reference = use_ref;
    return p;
}

inline void check_dataset(const EmbeddingDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.size() == 0) throw UsageError("training needs a nonempty dataset");
    if (ds.dim() == 0) throw UsageError("training needs embeddings with d >= 1");
    if (cfg.dim != 0 && cfg.dim != ds.dim()) {
        throw UsageError("config dimension " + std::to_string(cfg.dim) + " does not match data dimension " +
                         std::to_string(ds.dim()));
    }
}

/// Fixed evaluation rows: everything when N fits, else a seeded sample kept in row order.
inline Matrix<float> eval_subsample(const Matrix<float>& data, std::size_t limit, std::uint64_t seed) {
    const std::size_t n = data.rows();
    if (n <= limit) return data;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0xe7a1));
    rng.shuffle(std::span<std::size_t>(perm));
    perm.resize(limit);
    std::sort(perm.begin(), perm.end());
    Matrix<float> out(limit, data.cols());
    for (std::size_t i = 0; i < limit; ++i) {
        std::copy(data.row(perm[i]).begin(), data.row(perm[i]).end(), out.row(i).begin());
    }
    return out;
}

struct EvalPoint {
    double rec = 0.0;
    double sc = 0.0;
    double pd = 0.0;
    double total = 0.0;
    double usage = 0.0;
};

/// Shared epoch/batch loop. `step(rows)` performs one optimizer update; `evaluate()` scores
/// the current parameters; `epoch_end(epoch)` runs after every epoch.
template <typename StepFn, typename EvalFn, typename EpochFn>
std::vector<TrainLogRow> run_loop(std::size_t n, const TrainConfig& cfg, StepFn&& step, EvalFn&& evaluate,
                                  EpochFn&& epoch_end) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<TrainLogRow> log;
    auto record = [&](std::uint64_t s, std::uint64_t epoch) {
        const EvalPoint e = evaluate();
        TrainLogRow row;
        row.step = s;
        row.epoch = epoch;
        row.loss_rec = e.rec;
        row.loss_sc = e.sc;
        row.loss_pd = e.pd;
        row.loss_total = e.total;
        row.codebook_usage = e.usage;
        if (cfg.record_wall_time) {
            row.wall_ms = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                         std::chrono::steady_clock::now() - start)
                                                         .count());
        }
        log.push_back(row);
    };

    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::uint64_t total_steps = static_cast<std::uint64_t>(steps_per_epoch) * cfg.epochs;
    record(0, 0);
    std::vector<std::size_t> order(n);
    std::uint64_t s = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, 0x5eed, epoch));
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            step(std::span<const std::size_t>(order.data() + begin, end - begin));
            ++s;
            if (s % cfg.log_every == 0 || s == total_steps) record(s, epoch);
        }
        epoch_end(epoch);
    }
    return log;
}

/// Replaces codewords that are nobody's argmax on the evaluation rows with residuals of
/// randomly chosen evaluation rows at that layer.
inline std::size_t revive_dead_codewords(ModelParams<float>& params, const Matrix<float>& eval_data, Rng& rng) {
    const std::size_t m = params.config.codebook_size;
    const std::size_t n = eval_data.rows();
    const CodebookNorms norms = CodebookNorms::of(params);
    std::vector<QuantizationTrace<float>> traces(n);
    const auto chunks = fixed_chunks(n, 128);
    parallel_for(chunks.size(), [&](std::size_t c) {
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) traces[i] = quantize_full(eval_data.row(i), params, norms);
    });
    std::size_t revived = 0;
    for (std::size_t l = 0; l < params.layers(); ++l) {
        std::vector<char> used(m, 0);
        for (const auto& tr : traces) used[tr.sid[l]] = 1;
        for (std::size_t k = 0; k < m; ++k) {
            if (used[k]) continue;
            const auto& src = traces[rng.below(n)].layers[l].input_residual;
            auto dst = params.codebooks[l].row(k);
            std::copy(src.begin(), src.end(), dst.begin());
            ++revived;
        }
    }
    return revived;
}

}  // namespace detail

/// Trains the rating quantizer (reference vector, cosine rating, SC/PD regularisers).
inline TrainResult train_r3(const EmbeddingDataset& dataset, const TrainConfig& cfg) {
    detail::check_dataset(dataset, cfg);
    const Matrix<float>& data = dataset.matrix;
    const std::size_t d = dataset.dim();

    TrainResult res;
    res.params = detail::empty_model(cfg, d, AssignMode::rating, cfg.use_reference);
    if (cfg.use_reference) res.params.reference = init_reference(data, cfg.seed);
    res.params.codebooks =
        init_codebooks(data, res.params, cfg.init, derive_seed(cfg.seed, 0x1417), cfg.init_kmeans_iters);
    res.params.validate();
    res.optimizer.lr = cfg.lr;
    res.optimizer.weight_decay = cfg.weight_decay;
    res.optimizer.clip_norm = cfg.clip_norm;

    const Matrix<float> eval_data = detail::eval_subsample(data, cfg.eval_subsample, cfg.seed);
    std::vector<std::size_t> eval_rows(eval_data.rows());
    std::iota(eval_rows.begin(), eval_rows.end(), std::size_t{0});

    LossOptions opt;
    opt.lambda = cfg.lambda;
    opt.t = cfg.t;
    opt.use_sc = cfg.use_sc;
    opt.use_pd = cfg.use_pd;

    std::uint64_t reinit_counter = 0;
    auto step = [&](std::span<const std::size_t> rows) {
        const BatchLoss bl = batch_loss(res.params, data, rows, opt, true);
        adamw_step(res.params, bl.grads, res.optimizer);
        if (cfg.use_reference && l2_norm(std::span<const float>(res.params.reference)) < kNormEpsilon) {
            log_warning("reference vector collapsed to ~0, re-initialising");
            res.params.reference = init_reference(data, derive_seed(cfg.seed, 0x7ef, ++reinit_counter));
        }
    };
    auto evaluate = [&] {
        const BatchLoss bl = batch_loss(res.params, eval_data, std::span<const std::size_t>(eval_rows), opt, false);
        detail::EvalPoint e;
        e.rec = bl.breakdown.rec;
        e.sc = bl.breakdown.sc_term;
        e.pd = bl.breakdown.pd_term;
        e.total = bl.breakdown.total;
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

}  // namespace sidforge
