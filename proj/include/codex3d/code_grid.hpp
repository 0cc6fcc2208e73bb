#pragma once

#include <cstdint>
#include <vector>

namespace codex3d {

/// Integer lattice of codebook indices (h x w or h x w x d), C row-major.
struct CodeGrid {
    std::vector<std::int64_t> shape;
    std::int64_t K = 0; // size of the codebook the indices address
    std::vector<std::int64_t> indices;

    std::int64_t size() const noexcept
    {
        std::int64_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }

    /// Throws ShapeError/ConfigError if the grid is inconsistent or any index is outside [0, K).
    void validate() const;

    bool operator==(const CodeGrid&) const = default;
};

} // namespace codex3d
