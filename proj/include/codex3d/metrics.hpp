#pragma once

#include "codex3d/data_synth.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace codex3d {

enum class EmbeddingSource { real, generated };

/// M x E embedding vectors, row-major.
struct EmbeddingSet {
    std::int64_t count = 0;
    std::int64_t dim = 0;
    std::vector<float> values;
    EmbeddingSource source = EmbeddingSource::real;

    std::span<const float> row(std::int64_t i) const
    {
        return {values.data() + i * dim, static_cast<std::size_t>(dim)};
    }
    void validate() const;
};

/// Convolutional feature extractor with frozen random weights. Three stride-2
/// conv stages followed by spatial flattening; when the flattened size differs
/// from `embed_dim` a fixed random projection maps it to `embed_dim`.
class RandomEncoder {
public:
    RandomEncoder(int spatial_dims, std::int64_t input_size, std::int64_t embed_dim, std::uint64_t seed);
    ~RandomEncoder();
    RandomEncoder(RandomEncoder&&) noexcept;
    RandomEncoder& operator=(RandomEncoder&&) noexcept;

    std::int64_t embed_dim() const noexcept;
    EmbeddingSet embed_volumes(std::span<const VolumeGrid> volumes, EmbeddingSource source) const;
    EmbeddingSet embed_views(std::span<const ViewImage> views, EmbeddingSource source) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

inline constexpr std::int64_t kDefaultEmbedDim = 512;

EmbeddingSet random_encoder_embed(std::span<const VolumeGrid> volumes, std::uint64_t seed,
                                  std::int64_t embed_dim = kDefaultEmbedDim,
                                  EmbeddingSource source = EmbeddingSource::real);
EmbeddingSet random_encoder_embed(std::span<const ViewImage> views, std::uint64_t seed,
                                  std::int64_t embed_dim = kDefaultEmbedDim,
                                  EmbeddingSource source = EmbeddingSource::real);

struct DensityCoverage {
    double density = 0.0;
    double coverage = 0.0;
};

/// k-NN manifold density and coverage with Euclidean distances. Radii are the
/// distance from each real point to its k-th nearest other real point.
DensityCoverage density_coverage(const EmbeddingSet& real, const EmbeddingSet& fake, std::int64_t k = 5);

inline constexpr double kPsnrCapDb = 120.0;

double mse(std::span<const float> a, std::span<const float> b);
double mae(std::span<const float> a, std::span<const float> b);
/// 10 log10(max_val^2 / MSE), capped at kPsnrCapDb.
double psnr(std::span<const float> a, std::span<const float> b, double max_val = 1.0);

struct SsimOptions {
    int window = 11;     // Gaussian window side
    double sigma = 1.5;  // Gaussian window std
    double k1 = 0.01;
    double k2 = 0.03;
    double max_val = 1.0;
};

/// Windowed SSIM over the valid region of two images; the window shrinks to the image size for small inputs.
double ssim(const ViewImage& a, const ViewImage& b, const SsimOptions& options = {});
/// Mean 2D SSIM over every axis-aligned slice of all three slice stacks.
double ssim(const VolumeGrid& a, const VolumeGrid& b, const SsimOptions& options = {});

double mse(const VolumeGrid& a, const VolumeGrid& b);
double mae(const VolumeGrid& a, const VolumeGrid& b);
double psnr(const VolumeGrid& a, const VolumeGrid& b, double max_val = 1.0);

/// Per-pixel maximum along `axis`; the output is the volume shape with that axis removed.
ViewImage mip(const VolumeGrid& volume, int axis);

struct MetricReport {
    std::optional<double> nll; // nats per 3D token
    double density = 0.0;
    double coverage = 0.0;
    double ssim = 0.0;
    double psnr = 0.0;
    double mse = 0.0;
    double mae = 0.0;
    std::string config_hash;
    std::string schema_version = "codex3d.report/1";
    std::int64_t real_count = 0;
    std::int64_t generated_count = 0;
    std::int64_t k = 5;
    std::vector<std::uint64_t> embed_seeds;

    /// One key=value per line.
    std::string to_text() const;
    std::string to_json() const;
    static MetricReport from_json(const std::string& text);
    /// Writes `path` (key=value) and `path` with extension .json.
    void write(const std::filesystem::path& path) const;
};

/// Density/coverage averaged over embedder seeds, distortion metrics over index-paired items.
MetricReport evaluate_volumes(std::span<const VolumeGrid> real, std::span<const VolumeGrid> generated, std::int64_t k,
                              std::int64_t embed_dim, std::span<const std::uint64_t> seeds);
MetricReport evaluate_views(std::span<const ViewImage> real, std::span<const ViewImage> generated, std::int64_t k,
                            std::int64_t embed_dim, std::span<const std::uint64_t> seeds);

} // namespace codex3d
