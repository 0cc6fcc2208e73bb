#pragma once

#include "codex3d/code_grid.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace codex3d {

/// Code-space conditioning: one 2D code grid per input view, in view order.
struct ConditionSet {
    std::vector<CodeGrid> view_codes;

    std::int64_t view_count() const noexcept { return static_cast<std::int64_t>(view_codes.size()); }
    std::int64_t token_count() const;

    /// n >= 1, every grid indexes the same codebook size and has the same shape.
    void validate() const;

    /// Row-major flattening of each view, views concatenated: 1 x token_count.
    torch::Tensor flatten() const;
};

/// Flattened 3D code sequence with absorbing mask state.
struct MaskedSequence {
    std::vector<std::int64_t> tokens;         // each in [0, K]; K is the mask id
    std::int64_t t = 0;
    std::vector<std::int64_t> mask_positions; // ascending
    std::int64_t mask_id = 0;

    /// mask_positions == {i : tokens[i] == mask_id}.
    bool consistent() const;
    void refresh_mask_positions();

    torch::Tensor as_tensor() const; // 1 x L, int64
};

/// Token arrangement seen by the denoiser: condition tokens first, then target tokens.
struct SequenceLayout {
    std::int64_t view_count = 2;
    std::int64_t view_tokens = 64;  // h*w of one 2D code grid
    std::int64_t target_len = 512;  // 3D token count

    std::int64_t cond_len() const noexcept { return view_count * view_tokens; }
    std::int64_t total_len() const noexcept { return cond_len() + target_len; }
    void validate() const;

    bool operator==(const SequenceLayout&) const = default;
};

} // namespace codex3d
