#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <unistd.h>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "sidforge/sidforge.hpp"

namespace testutil {

inline sidforge::ModelParams<double> to_params(const oracle::Model& m) {
    sidforge::ModelParams<double> p;
    p.config.num_layers = m.layers;
    p.config.codebook_size = m.m;
    p.config.top_k = m.k;
    p.config.embedding_dim = m.d;
    p.use_reference = m.use_reference;
    if (m.use_reference) p.reference = m.reference;
    for (std::size_t l = 0; l < m.layers; ++l) {
        std::vector<double> vals(m.codebooks.begin() + static_cast<std::ptrdiff_t>(l * m.m * m.d),
                                 m.codebooks.begin() + static_cast<std::ptrdiff_t>((l + 1) * m.m * m.d));
        p.codebooks.emplace_back(m.m, m.d, std::move(vals));
    }
    return p;
}

inline oracle::Model random_model(sidforge::Rng& rng, std::size_t layers, std::size_t m, std::size_t k, std::size_t d,
                                  bool use_reference) {
    oracle::Model model;
    model.layers = layers;
    model.m = m;
    model.k = k;
    model.d = d;
    model.use_reference = use_reference;
    if (use_reference) {
        for (std::size_t j = 0; j < d; ++j) model.reference.push_back(rng.normal() + (j == 0 ? 1.5 : 0.0));
    }
    for (std::size_t i = 0; i < layers * m * d; ++i) model.codebooks.push_back(rng.normal());
    return model;
}

template <typename T>
sidforge::Matrix<T> random_matrix(sidforge::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    sidforge::Matrix<T> out(rows, cols);
    for (auto& v : out.values()) v = static_cast<T>(scale * rng.normal());
    return out;
}

inline sidforge::EmbeddingDataset small_blobs(std::size_t n = 400, std::size_t d = 8, std::size_t clusters = 8,
                                              std::uint64_t seed = 7) {
    sidforge::BlobSpec spec;
    spec.n = n;
    spec.dim = d;
    spec.clusters = clusters;
    spec.separation = 4.0;
    spec.seed = seed;
    return sidforge::make_blobs(spec).dataset;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("sidforge_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

}  // namespace testutil
