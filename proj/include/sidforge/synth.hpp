#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sidforge/dataset.hpp"
#include "sidforge/errors.hpp"
#include "sidforge/random.hpp"

namespace sidforge {

/// Gaussian blobs around a shared offset: x = o + a_c + n_i with ||o|| = 1,
/// a_c ~ N(0, I/d) and n_i ~ N(0, I / (sep^2 d)). Item i belongs to cluster i mod clusters.
struct BlobSpec {
    std::size_t n = 10'000;
    std::size_t dim = 32;
    std::size_t clusters = 64;
    double separation = 4.0;
    std::uint64_t seed = 42;
};

struct SyntheticData {
    EmbeddingDataset dataset;
    std::vector<std::uint32_t> labels;
};

inline SyntheticData make_blobs(const BlobSpec& spec) {
    if (spec.n == 0 || spec.dim == 0 || spec.clusters == 0) {
        throw UsageError("blobs: N, d and clusters must be positive");
    }
    if (!(spec.separation > 0.0)) throw UsageError("blobs: separation must be positive");
    const std::size_t d = spec.dim;
    Rng rng(derive_seed(spec.seed, 0xb10b));

    std::vector<double> offset(d);
    double on = 0.0;
    for (auto& v : offset) {
        v = rng.normal();
        on += v * v;
    }
    on = std::sqrt(on);
    for (auto& v : offset) v /= on;

    const double center_sd = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> centers(spec.clusters * d);
    for (auto& v : centers) v = center_sd * rng.normal();

    const double noise_sd = center_sd / spec.separation;
    SyntheticData out;
    out.dataset.matrix = Matrix<float>(spec.n, d);
    out.dataset.ids.reserve(spec.n);
    out.labels.resize(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t c = i % spec.clusters;
        out.labels[i] = static_cast<std::uint32_t>(c);
        out.dataset.ids.push_back("item" + std::to_string(i));
        for (std::size_t j = 0; j < d; ++j) {
            out.dataset.matrix(i, j) =
                static_cast<float>(offset[j] + centers[c * d + j] + noise_sd * rng.normal());
        }
    }
    return out;
}

/// Parses "blobs:N,d,clusters,sep[,seed]".
inline BlobSpec parse_blob_spec(const std::string& text, std::uint64_t default_seed) {
    const std::string prefix = "blobs:";
    if (text.rfind(prefix, 0) != 0) throw UsageError("--synth expects blobs:N,d,clusters,sep[,seed]");
    std::vector<std::string> parts;
    std::size_t start = prefix.size();
    while (true) {
        const auto comma = text.find(',', start);
        parts.push_back(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (parts.size() != 4 && parts.size() != 5) {
        throw UsageError("--synth expects blobs:N,d,clusters,sep[,seed]");
    }
    auto as_count = [&](const std::string& s) {
        std::uint64_t v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
            throw UsageError("--synth: '" + s + "' is not a non-negative integer");
        }
        return v;
    };
    BlobSpec spec;
    spec.n = as_count(parts[0]);
    spec.dim = as_count(parts[1]);
    spec.clusters = as_count(parts[2]);
    try {
        std::size_t used = 0;
        spec.separation = std::stod(parts[3], &used);
        if (used != parts[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw UsageError("--synth: '" + parts[3] + "' is not a number");
    }
    spec.seed = parts.size() == 5 ? as_count(parts[4]) : default_seed;
    return spec;
}

}  // namespace sidforge
