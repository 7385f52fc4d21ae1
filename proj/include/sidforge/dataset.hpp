#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "sidforge/numerics.hpp"

namespace sidforge {

/// N item identifiers plus an N x d embedding matrix.
struct EmbeddingDataset {
    std::vector<std::string> ids;
    Matrix<float> matrix;

    std::size_t size() const noexcept { return ids.size(); }
    std::size_t dim() const noexcept { return matrix.cols(); }
    std::span<const float> row(std::size_t i) const noexcept { return matrix.row(i); }

    /// Throws UsageError when ids are duplicated, counts disagree or a value is not finite.
    void validate() const {
        if (ids.size() != matrix.rows()) {
            throw UsageError("dataset: " + std::to_string(ids.size()) + " ids for " +
                             std::to_string(matrix.rows()) + " rows");
        }
        std::unordered_set<std::string> seen;
        for (const auto& id : ids) {
            if (!seen.insert(id).second) throw UsageError("dataset: duplicate id '" + id + "'");
        }
        for (float v : matrix.values()) {
            if (!std::isfinite(v)) throw UsageError("dataset: non-finite embedding value");
        }
    }
};

/// Item identifier -> L-tuple of codeword indices.
struct SidTable {
    std::vector<std::string> ids;
    std::size_t num_layers = 0;
    std::size_t codebook_size = 0;
    std::vector<std::uint32_t> codes;  ///< row-major, ids.size() x num_layers

    std::size_t size() const noexcept { return ids.size(); }
    std::span<const std::uint32_t> sid(std::size_t i) const noexcept {
        return {codes.data() + i * num_layers, num_layers};
    }
    std::uint32_t code(std::size_t i, std::size_t layer) const noexcept {
        return codes[i * num_layers + layer];
    }

    bool operator==(const SidTable&) const = default;
};

}  // namespace sidforge
