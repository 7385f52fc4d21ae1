#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "sidforge/dataset.hpp"
#include "sidforge/losses.hpp"
#include "sidforge/parallel.hpp"
#include "sidforge/quantizer.hpp"

namespace sidforge {

enum class ClusterBy { level1, full_sid };
enum class EmbeddingSource { soft_quantized, raw, initial_residual };

inline std::string to_string(ClusterBy c) { return c == ClusterBy::level1 ? "level1" : "full_sid"; }

inline std::string to_string(EmbeddingSource s) {
    switch (s) {
        case EmbeddingSource::soft_quantized: return "soft_quantized";
        case EmbeddingSource::raw: return "raw";
        case EmbeddingSource::initial_residual: return "initial_residual";
    }
    return "?";
}

inline ClusterBy parse_cluster_by(const std::string& s) {
    if (s == "level1") return ClusterBy::level1;
    if (s == "full_sid") return ClusterBy::full_sid;
    throw UsageError("unknown cluster key '" + s + "' (expected level1 or full_sid)");
}

inline EmbeddingSource parse_embedding_source(const std::string& s) {
    if (s == "soft_quantized") return EmbeddingSource::soft_quantized;
    if (s == "raw") return EmbeddingSource::raw;
    if (s == "initial_residual") return EmbeddingSource::initial_residual;
    throw UsageError("unknown embedding source '" + s +
                     "' (expected soft_quantized, raw or initial_residual)");
}

/// Every item index appears in exactly one group. Groups are ordered by cluster key.
struct ClusterAssignment {
    ClusterBy cluster_by = ClusterBy::level1;
    std::vector<std::vector<std::size_t>> groups;
};

inline ClusterAssignment build_clusters(const SidTable& sids, ClusterBy by) {
    ClusterAssignment out;
    out.cluster_by = by;
    std::map<std::vector<std::uint32_t>, std::vector<std::size_t>> keyed;
    for (std::size_t i = 0; i < sids.size(); ++i) {
        const auto sid = sids.sid(i);
        std::vector<std::uint32_t> key = by == ClusterBy::level1
                                             ? std::vector<std::uint32_t>{sid.front()}
                                             : std::vector<std::uint32_t>(sid.begin(), sid.end());
        keyed[std::move(key)].push_back(i);
    }
    for (auto& [key, members] : keyed) out.groups.push_back(std::move(members));
    return out;
}

struct ScEvaluation {
    std::optional<double> value;  ///< nullopt: no cluster with two or more members
    std::size_t clusters_used = 0;
    std::size_t singletons_excluded = 0;
};

/// Mean over clusters (size >= 2) of the mean pairwise cosine within the cluster.
inline ScEvaluation eval_sc(const Matrix<double>& embeddings, const ClusterAssignment& clusters) {
    std::vector<const std::vector<std::size_t>*> used;
    ScEvaluation out;
    for (const auto& g : clusters.groups) {
        if (g.size() >= 2) {
            used.push_back(&g);
        } else {
            ++out.singletons_excluded;
        }
    }
    out.clusters_used = used.size();
    if (used.empty()) return out;

    std::vector<double> norms(embeddings.rows());
    for (std::size_t i = 0; i < embeddings.rows(); ++i) norms[i] = l2_norm(embeddings.row(i));
    std::vector<double> per_cluster(used.size());
    parallel_for(used.size(), [&](std::size_t c) {
        const auto& members = *used[c];
        double sum = 0.0;
        for (std::size_t a = 0; a < members.size(); ++a) {
            for (std::size_t b = a + 1; b < members.size(); ++b) {
                const std::size_t i = members[a];
                const std::size_t j = members[b];
                if (norms[i] < kNormEpsilon || norms[j] < kNormEpsilon) continue;
                sum += dot(embeddings.row(i), embeddings.row(j)) / (norms[i] * norms[j]);
            }
        }
        const double g = static_cast<double>(members.size());
        per_cluster[c] = 2.0 * sum / (g * (g - 1.0));
    });
    double total = 0.0;
    for (double v : per_cluster) total += v;
    out.value = total / static_cast<double>(used.size());
    return out;
}

struct PdEvaluation {
    std::optional<double> value;  ///< nullopt: fewer than two clusters
    std::size_t clusters = 0;
    std::size_t pairs_sampled = 0;  ///< 0 when every pair was used
};

/// PD over cluster centroids (arithmetic means of member vectors). When the number of
/// centroid pairs exceeds `max_pairs`, a seeded uniform sample of pairs is used instead.
inline PdEvaluation eval_pd(const Matrix<double>& embeddings, const ClusterAssignment& clusters,
                            double t, std::size_t max_pairs = 1'000'000, std::uint64_t seed = 0) {
    if (!(t > 0.0)) throw UsageError("eval_pd: t must be > 0");
    PdEvaluation out;
    const std::size_t m = clusters.groups.size();
    out.clusters = m;
    if (m < 2) return out;
    const std::size_t d = embeddings.cols();
    std::vector<std::vector<double>> centroids(m, std::vector<double>(d, 0.0));
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t i : clusters.groups[c]) {
            for (std::size_t j = 0; j < d; ++j) centroids[c][j] += embeddings(i, j);
        }
        for (double& v : centroids[c]) v /= static_cast<double>(clusters.groups[c].size());
    }
    const double pair_count = static_cast<double>(m) * static_cast<double>(m - 1) / 2.0;
    if (pair_count <= static_cast<double>(max_pairs)) {
        out.value = preference_discrimination(centroids, t).value;
        return out;
    }
    if (max_pairs == 0) throw UsageError("eval_pd: max_pairs must be >= 1");
    Rng rng(derive_seed(seed, 0x9d));
    double sum = 0.0;
    for (std::size_t s = 0; s < max_pairs; ++s) {
        std::size_t a = rng.below(m);
        std::size_t b = rng.below(m - 1);
        if (b >= a) ++b;
        const double c = detail::exact_cosine(centroids[a], centroids[b]);
        sum += std::exp(-t * (1.0 - c));
    }
    out.pairs_sampled = max_pairs;
    out.value = std::log(sum / static_cast<double>(max_pairs));
    return out;
}

/// Items per distinct full SID (>= 1; 1 means every item has its own SID).
inline double collision_rate(const SidTable& sids) {
    if (sids.size() == 0) throw UsageError("collision_rate: empty SID table");
    std::set<std::vector<std::uint32_t>> distinct;
    for (std::size_t i = 0; i < sids.size(); ++i) {
        const auto s = sids.sid(i);
        distinct.emplace(s.begin(), s.end());
    }
    return static_cast<double>(sids.size()) / static_cast<double>(distinct.size());
}

/// Per-layer Gini coefficient of codeword occupancy over all M slots, averaged over layers.
inline double gini(const SidTable& sids, std::size_t codebook_size) {
    if (sids.size() == 0) throw UsageError("gini: empty SID table");
    if (codebook_size == 0) throw UsageError("gini: codebook size must be >= 1");
    double total = 0.0;
    for (std::size_t l = 0; l < sids.num_layers; ++l) {
        std::vector<double> counts(codebook_size, 0.0);
        for (std::size_t i = 0; i < sids.size(); ++i) {
            const auto c = sids.code(i, l);
            if (c >= codebook_size) throw UsageError("gini: code exceeds codebook size");
            counts[c] += 1.0;
        }
        std::sort(counts.begin(), counts.end());
        // sum_i sum_j |n_i - n_j| = 2 sum_i (2i - M + 1) n_(i) for ascending n.
        double pair_sum = 0.0;
        const double m = static_cast<double>(codebook_size);
        for (std::size_t i = 0; i < codebook_size; ++i) {
            pair_sum += (2.0 * static_cast<double>(i) - m + 1.0) * counts[i];
        }
        pair_sum *= 2.0;
        const double mean = static_cast<double>(sids.size()) / m;
        total += pair_sum / (2.0 * m * m * mean);
    }
    return total / static_cast<double>(sids.num_layers);
}

/// Fraction of the M indices used at least once, per layer.
inline std::vector<double> codebook_usage(const SidTable& sids, std::size_t codebook_size) {
    std::vector<double> out;
    for (std::size_t l = 0; l < sids.num_layers; ++l) {
        std::vector<char> used(codebook_size, 0);
        for (std::size_t i = 0; i < sids.size(); ++i) {
            const auto c = sids.code(i, l);
            if (c >= codebook_size) throw UsageError("codebook_usage: code exceeds codebook size");
            used[c] = 1;
        }
        const auto n_used = std::count(used.begin(), used.end(), 1);
        out.push_back(static_cast<double>(n_used) / static_cast<double>(codebook_size));
    }
    return out;
}

/// Mid-ranks (1-based), ties share the average rank.
inline std::vector<double> fractional_ranks(std::span<const double> xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation (Pearson correlation of mid-ranks). nullopt when either
/// sequence has zero rank variance.
inline std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw UsageError("spearman: sequences differ in length");
    if (xs.size() < 3) throw UsageError("spearman: need at least 3 observations");
    const auto rx = fractional_ranks(xs);
    const auto ry = fractional_ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

struct MetricsReport {
    std::optional<double> sc;
    std::optional<double> pd;
    double collision_rate = 1.0;
    double gini = 0.0;
    std::vector<double> usage_per_layer;
    ClusterBy cluster_by = ClusterBy::level1;
    EmbeddingSource embedding_source = EmbeddingSource::soft_quantized;
    double t = 2.0;
    std::vector<std::string> undefined_flags;
    // Diagnostics kept in memory and printed, not serialised.
    std::size_t pd_pairs_sampled = 0;
    std::size_t sc_singletons_excluded = 0;

    double mean_usage() const {
        if (usage_per_layer.empty()) return 0.0;
        double s = 0.0;
        for (double u : usage_per_layer) s += u;
        return s / static_cast<double>(usage_per_layer.size());
    }
};

/// Throws Error when any metric lies outside its mathematical range.
inline void check_report_ranges(const MetricsReport& r) {
    constexpr double tol = 1e-9;
    auto fail = [](const std::string& what) { throw Error("metric out of range: " + what); };
    if (r.sc && (*r.sc < -1.0 - tol || *r.sc > 1.0 + tol)) fail("sc");
    if (r.pd && (*r.pd < -2.0 * r.t - tol || *r.pd > tol)) fail("pd");
    if (r.collision_rate < 1.0 - tol) fail("collision_rate");
    if (r.gini < -tol || r.gini >= 1.0) fail("gini");
    for (double u : r.usage_per_layer) {
        if (u < 0.0 || u > 1.0) fail("usage_per_layer");
    }
}

struct EvalOptions {
    ClusterBy cluster_by = ClusterBy::level1;
    EmbeddingSource source = EmbeddingSource::soft_quantized;
    double t = 2.0;
    std::size_t max_pairs = 1'000'000;
    std::uint64_t seed = 0;
};

/// Per-item vectors the metrics are computed on, in SID-table order.
inline Matrix<double> evaluation_embeddings(const EmbeddingDataset& dataset, const SidTable& sids,
                                            const ModelParams<float>* model, EmbeddingSource source) {
    std::unordered_map<std::string, std::size_t> row_of;
    row_of.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) row_of.emplace(dataset.ids[i], i);
    if ((source == EmbeddingSource::soft_quantized || source == EmbeddingSource::initial_residual) &&
        model == nullptr) {
        throw UsageError("embedding source " + to_string(source) + " requires a model");
    }
    if (model && dataset.size() > 0 && model->dim() != dataset.dim()) {
        throw UsageError("model dimension " + std::to_string(model->dim()) +
                         " does not match embedding dimension " + std::to_string(dataset.dim()));
    }
    const std::size_t d = dataset.dim();
    Matrix<double> out(sids.size(), d);
    std::vector<std::size_t> rows(sids.size());
    for (std::size_t i = 0; i < sids.size(); ++i) {
        const auto it = row_of.find(sids.ids[i]);
        if (it == row_of.end()) throw UsageError("SID item '" + sids.ids[i] + "' not in embeddings");
        rows[i] = it->second;
    }
    std::optional<CodebookNorms> norms;
    if (model) norms = CodebookNorms::of(*model);
    const auto chunks = fixed_chunks(sids.size(), 128);
    parallel_for(chunks.size(), [&](std::size_t c) {
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            const auto x = dataset.row(rows[i]);
            auto dst = out.row(i);
            switch (source) {
                case EmbeddingSource::raw:
                    std::copy(x.begin(), x.end(), dst.begin());
                    break;
                case EmbeddingSource::initial_residual: {
                    if (model->use_reference) {
                        const auto pr = project_forward(x, std::span<const float>(model->reference));
                        std::copy(pr.residual.begin(), pr.residual.end(), dst.begin());
                    } else {
                        std::copy(x.begin(), x.end(), dst.begin());
                    }
                    break;
                }
                case EmbeddingSource::soft_quantized: {
                    // Fully soft (K = M) mixture for rating models; hard codeword sums otherwise.
                    const auto tr = quantize_full(x, *model, *norms, model->config.codebook_size);
                    const auto q = tr.cumulative_quantized();
                    std::copy(q.begin(), q.end(), dst.begin());
                    break;
                }
            }
        }
    });
    return out;
}

inline MetricsReport evaluate_sids(const EmbeddingDataset& dataset, const SidTable& sids,
                                   const ModelParams<float>* model, const EvalOptions& opt) {
    if (sids.size() == 0) throw UsageError("evaluate: empty SID table");
    MetricsReport report;
    report.cluster_by = opt.cluster_by;
    report.embedding_source = opt.source;
    report.t = opt.t;
    const Matrix<double> emb = evaluation_embeddings(dataset, sids, model, opt.source);
    const ClusterAssignment clusters = build_clusters(sids, opt.cluster_by);

    const ScEvaluation sc = eval_sc(emb, clusters);
    report.sc = sc.value;
    report.sc_singletons_excluded = sc.singletons_excluded;
    if (!sc.value) report.undefined_flags.push_back("sc");

    const PdEvaluation pd = eval_pd(emb, clusters, opt.t, opt.max_pairs, opt.seed);
    report.pd = pd.value;
    report.pd_pairs_sampled = pd.pairs_sampled;
    if (!pd.value) report.undefined_flags.push_back("pd");

    report.collision_rate = collision_rate(sids);
    report.gini = gini(sids, sids.codebook_size);
    report.usage_per_layer = codebook_usage(sids, sids.codebook_size);
    check_report_ranges(report);
    return report;
}

// ---------------------------------------------------------------------------
// Projection exports for plotting

enum class ProjectionMode { pca3, ring2 };

inline ProjectionMode parse_projection_mode(const std::string& s) {
    if (s == "pca3") return ProjectionMode::pca3;
    if (s == "ring2") return ProjectionMode::ring2;
    throw UsageError("unknown projection mode '" + s + "' (expected pca3 or ring2)");
}

struct ProjectionRow {
    double x = 0.0;
    double y = 0.0;
    double z_or_angle = 0.0;  ///< z for pca3, angle in radians for ring2
};

/// pca3: top-3 PCA coordinates. ring2: top-2 PCA coordinates scaled onto the unit circle.
inline std::vector<ProjectionRow> project_for_export(const Matrix<float>& embeddings, ProjectionMode mode) {
    if (embeddings.rows() < 3) throw UsageError("export_projection: need at least 3 points");
    const std::size_t dims = mode == ProjectionMode::pca3 ? 3 : 2;
    if (embeddings.cols() < dims) {
        throw UsageError("export_projection: " + std::to_string(dims) + " dimensions needed, data has " +
                         std::to_string(embeddings.cols()));
    }
    const auto pca = pca_project(embeddings, dims);
    std::vector<ProjectionRow> rows(embeddings.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double a = pca.coords(i, 0);
        const double b = pca.coords(i, 1);
        if (mode == ProjectionMode::pca3) {
            rows[i] = {a, b, static_cast<double>(pca.coords(i, 2))};
            continue;
        }
        const double norm = std::hypot(a, b);
        if (norm < kNormEpsilon) {
            rows[i] = {0.0, 0.0, 0.0};
        } else {
            rows[i] = {a / norm, b / norm, std::atan2(b, a)};
        }
    }
    return rows;
}

inline void export_projection(const Matrix<float>& embeddings, std::span<const std::string> ids,
                              const std::string& out_path, ProjectionMode mode) {
    if (ids.size() != embeddings.rows()) throw UsageError("export_projection: id count mismatch");
    const auto rows = project_for_export(embeddings, mode);
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + out_path + "' for writing");
    out << (mode == ProjectionMode::pca3 ? "id,x,y,z\n" : "id,x,y,angle_rad\n");
    char buf[96];
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.9g\n", rows[i].x, rows[i].y, rows[i].z_or_angle);
        out << ids[i] << buf;
    }
    if (!out) throw IoError("write failed for '" + out_path + "'");
}

/// Shannon entropy (nats) of the angle histogram over `bins` equal sectors of [-pi, pi].
inline double circular_entropy(std::span<const double> angles, std::size_t bins = 36) {
    std::vector<double> counts(bins, 0.0);
    for (double a : angles) {
        auto b = static_cast<std::size_t>((a + std::numbers::pi) / (2.0 * std::numbers::pi) * static_cast<double>(bins));
        counts[std::min(b, bins - 1)] += 1.0;
    }
    double h = 0.0;
    for (double c : counts) {
        if (c <= 0.0) continue;
        const double p = c / static_cast<double>(angles.size());
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace sidforge
