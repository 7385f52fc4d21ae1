#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sidforge/numerics.hpp"
#include "sidforge/parallel.hpp"
#include "sidforge/random.hpp"

namespace sidforge {

template <typename T>
struct KMeansResult {
    Matrix<T> centroids;
    std::vector<std::uint32_t> assignments;
    double inertia = 0.0;
    /// Inertia after every assignment pass; non-increasing.
    std::vector<double> inertia_history;
    int iterations = 0;
    bool padded = false;
};

struct KMeansOptions {
    std::size_t k = 1;
    std::uint64_t seed = 0;
    int max_iters = 100;
};

namespace detail {

template <typename T>
double squared_distance(std::span<const T> a, std::span<const T> b) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
        acc += diff * diff;
    }
    return acc;
}

/// Nearest centroid for every point (ties to the lowest index). Returns whether any
/// assignment changed and writes per-point distances.
template <typename T>
bool assign_nearest(const Matrix<T>& points, const Matrix<T>& centroids,
                    std::vector<std::uint32_t>& assignments, std::vector<double>& dist) {
    const auto chunks = fixed_chunks(points.rows(), 256);
    std::vector<char> changed(chunks.size(), 0);
    parallel_for(chunks.size(), [&](std::size_t c) {
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
            std::uint32_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < centroids.rows(); ++k) {
                const double dk = squared_distance(points.row(i), centroids.row(k));
                if (dk < best_d) {
                    best_d = dk;
                    best = static_cast<std::uint32_t>(k);
                }
            }
            if (assignments[i] != best) changed[c] = 1;
            assignments[i] = best;
            dist[i] = best_d;
        }
    });
    for (char ch : changed) {
        if (ch) return true;
    }
    return false;
}

template <typename T>
Matrix<T> kmeans_plus_plus(const Matrix<T>& points, std::size_t k, Rng& rng) {
    const std::size_t n = points.rows();
    const std::size_t d = points.cols();
    Matrix<T> centroids(k, d);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.below(n);
    for (std::size_t c = 0; c < k; ++c) {
        if (c > 0) {
            double total = 0.0;
            for (double v : d2) total += v;
            if (total > 0.0) {
                double target = rng.uniform() * total;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    target -= d2[i];
                    if (target < 0.0) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = rng.below(n);
            }
        }
        auto dst = centroids.row(c);
        auto src = points.row(pick);
        std::copy(src.begin(), src.end(), dst.begin());
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points.row(i), std::as_const(centroids).row(c)));
        }
    }
    return centroids;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed.
template <typename T>
KMeansResult<T> kmeans(const Matrix<T>& points, const KMeansOptions& opts) {
    const std::size_t n = points.rows();
    const std::size_t d = points.cols();
    const std::size_t k = opts.k;
    if (n == 0) throw UsageError("kmeans: no points");
    if (k == 0) throw UsageError("kmeans: k must be >= 1");

    KMeansResult<T> res;
    if (k > n) {
        log_warning("kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(n) +
                    " points; padding with jittered duplicates");
        res.padded = true;
        res.centroids = Matrix<T>(k, d);
        Rng rng(derive_seed(opts.seed, 0x7ad));
        for (std::size_t c = 0; c < k; ++c) {
            const auto src = points.row(c % n);
            auto dst = res.centroids.row(c);
            for (std::size_t j = 0; j < d; ++j) {
                const double base = src[j];
                const double jitter = c < n ? 0.0 : 1e-6 * (std::abs(base) + 1.0) * rng.normal();
                dst[j] = static_cast<T>(base + jitter);
            }
        }
        res.assignments.assign(n, 0);
        std::vector<double> dist(n);
        detail::assign_nearest(points, res.centroids, res.assignments, dist);
        for (double v : dist) res.inertia += v;
        res.inertia_history.push_back(res.inertia);
        return res;
    }

    Rng rng(derive_seed(opts.seed, 0x6b6d));
    res.centroids = detail::kmeans_plus_plus(points, k, rng);
    res.assignments.assign(n, std::numeric_limits<std::uint32_t>::max());
    std::vector<double> dist(n);
    auto total = [&] {
        double acc = 0.0;
        for (double v : dist) acc += v;
        return acc;
    };
    detail::assign_nearest(points, res.centroids, res.assignments, dist);
    res.inertia_history.push_back(total());

    std::vector<double> sums(k * d);
    std::vector<std::size_t> counts(k);
    for (int it = 1; it <= opts.max_iters; ++it) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = res.assignments[i];
            ++counts[c];
            const auto p = points.row(i);
            for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += p[j];
        }
        std::vector<char> taken(n, 0);
        for (std::size_t c = 0; c < k; ++c) {
            auto dst = res.centroids.row(c);
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] = static_cast<T>(sums[c * d + j] / static_cast<double>(counts[c]));
                }
                continue;
            }
            // Empty cluster: move it onto the point farthest from its own centroid.
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (!taken[i] && dist[i] > far_d) {
                    far_d = dist[i];
                    far = i;
                }
            }
            if (far == n) continue;
            taken[far] = 1;
            dist[far] = 0.0;
            const auto src = points.row(far);
            std::copy(src.begin(), src.end(), dst.begin());
        }
        const bool changed = detail::assign_nearest(points, res.centroids, res.assignments, dist);
        res.inertia_history.push_back(total());
        res.iterations = it;
        if (!changed) break;
    }
    res.inertia = res.inertia_history.back();
    return res;
}

}  // namespace sidforge
