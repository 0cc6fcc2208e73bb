#include "codex3d/translation.hpp"

#include "codex3d/errors.hpp"

namespace codex3d {

TranslationModels TranslationModels::load(const std::filesystem::path& vq2d, const std::filesystem::path& vq3d,
                                          const std::filesystem::path& denoiser)
{
    TranslationModels m;
    m.vq2d = load_vqvae(load_checkpoint(vq2d));
    m.vq3d = load_vqvae(load_checkpoint(vq3d));
    m.denoiser = load_denoiser(load_checkpoint(denoiser));
    check_compatible(m.vq2d, m.vq3d, m.denoiser);
    return m;
}

std::vector<VolumeGrid> translate_many(TranslationModels& models, std::span<const ConditionSet> conds,
                                       const SamplerOptions& options, std::span<const std::uint64_t> seeds)
{
    if (conds.size() != seeds.size()) throw ConfigError("translate: need one seed per condition set");
    for (const auto& c : conds) {
        if (c.view_count() != models.denoiser.layout.view_count) {
            throw ShapeError("translate: expected " + std::to_string(models.denoiser.layout.view_count) + " views, got "
                             + std::to_string(c.view_count()));
        }
    }
    torch::NoGradGuard guard;
    TransformerAdapter adapter(models.denoiser.model);
    std::vector<VolumeGrid> out;
    constexpr std::size_t kChunk = 16;
    for (std::size_t start = 0; start < conds.size(); start += kChunk) {
        const auto n = std::min(kChunk, conds.size() - start);
        const auto codes = sample(adapter, conds.subspan(start, n), models.denoiser.schedule, models.target_shape(),
                                  options, seeds.subspan(start, n));
        const auto volumes = models.vq3d->decode(codes);
        for (std::int64_t i = 0; i < volumes.size(0); ++i) out.push_back(volume_from_tensor(volumes[i].unsqueeze(0)));
    }
    return out;
}

std::vector<VolumeGrid> translate(TranslationModels& models, std::span<const ViewImage> views,
                                  const SamplerOptions& options, std::span<const std::uint64_t> seeds)
{
    const auto expected = models.vq2d->config().input_size;
    for (const auto& v : views) {
        if (v.height != expected || v.width != expected) {
            throw ShapeError("translate: view shape " + std::to_string(v.height) + "x" + std::to_string(v.width)
                             + " does not match the 2D model input " + std::to_string(expected));
        }
    }
    if (static_cast<std::int64_t>(views.size()) != models.denoiser.layout.view_count) {
        throw ShapeError("translate: expected " + std::to_string(models.denoiser.layout.view_count) + " views, got "
                         + std::to_string(views.size()));
    }
    torch::NoGradGuard guard;
    const auto cond = condition_set(models.vq2d, views);
    std::vector<ConditionSet> conds(seeds.size(), cond);
    return translate_many(models, conds, options, seeds);
}

LoglikParts estimate_conditional_loglik(const VolumeGrid& volume, std::span<const ViewImage> views,
                                        TranslationModels& models, std::int64_t n_mc, std::uint64_t seed)
{
    check_compatible(models.vq2d, models.vq3d, models.denoiser);
    torch::NoGradGuard guard;
    const auto c = encode_volume(models.vq3d, volume);
    const auto cond = condition_set(models.vq2d, views);
    TransformerAdapter adapter(models.denoiser.model);
    LoglikParts parts;
    parts.decode_term = likelihood_decode_term(models.vq3d, volume, c);
    parts.nll_per_token = conditional_nll(adapter, c, cond, models.denoiser.schedule, n_mc, seed);
    parts.code_term = -parts.nll_per_token * static_cast<double>(c.size());
    parts.total = parts.decode_term + parts.code_term;
    if (!std::isfinite(parts.total)) throw NumericalError("estimate_conditional_loglik: non-finite estimate");
    return parts;
}

} // namespace codex3d
