#pragma once

#include "codex3d/training.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace codex3d {

/// The three trained components needed for translation and likelihood estimates.
struct TranslationModels {
    VQVAE vq2d{nullptr};
    VQVAE vq3d{nullptr};
    DenoiserBundle denoiser;

    /// Loads and cross-checks the checkpoints; a missing file raises DependencyError naming it.
    static TranslationModels load(const std::filesystem::path& vq2d, const std::filesystem::path& vq3d,
                                  const std::filesystem::path& denoiser);

    std::vector<std::int64_t> view_code_shape() const { return vq2d->config().latent_layout(); }
    std::vector<std::int64_t> target_shape() const { return vq3d->config().latent_layout(); }
};

/// Encodes the views, runs the reverse chain once per seed and decodes each sample.
std::vector<VolumeGrid> translate(TranslationModels& models, std::span<const ViewImage> views,
                                  const SamplerOptions& options, std::span<const std::uint64_t> seeds);

/// Batched translation of many view sets; sets[i] is translated with seeds[i].
std::vector<VolumeGrid> translate_many(TranslationModels& models, std::span<const ConditionSet> conds,
                                       const SamplerOptions& options, std::span<const std::uint64_t> seeds);

struct LoglikParts {
    double decode_term = 0.0;    // log p(I | c), nats
    double code_term = 0.0;      // log p(c | X), nats (negated NLL bound, summed over tokens)
    double total = 0.0;          // nats per volume
    double nll_per_token = 0.0;  // nats per 3D token
};

/// log p(I | c) + log p(c | X) with c the 3D codes of `volume`.
LoglikParts estimate_conditional_loglik(const VolumeGrid& volume, std::span<const ViewImage> views,
                                        TranslationModels& models, std::int64_t n_mc, std::uint64_t seed);

} // namespace codex3d
