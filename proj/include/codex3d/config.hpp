#pragma once

#include "codex3d/dataset_io.hpp"
#include "codex3d/denoiser.hpp"
#include "codex3d/diffusion.hpp"
#include "codex3d/vqvae.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace codex3d {

struct OptimHyper {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double grad_clip = 1.0;     // global norm; 0 disables
    std::int64_t batch_size = 8;
    std::int64_t steps = 20000;
    std::int64_t log_every = 50;
    std::int64_t checkpoint_every = 1000;
    double lr_final_fraction = 1.0; // cosine decay to lr * fraction at `steps`; 1 keeps lr constant

    /// Learning rate used for the optimizer step that follows `done` completed steps.
    double lr_at(std::int64_t done) const;
    void validate(const std::string& section) const;
};

struct DataSection {
    GenerationOptions generation;
    std::int64_t train_count = 2000;
    std::int64_t heldout_count = 200;
};

struct VqSection {
    AutoencoderConfig model;
    OptimHyper optim;
    std::int64_t dead_code_patience = 256; // 0 disables reseeding
};

struct DiffusionSection {
    std::int64_t T = 256;
    DenoiserConfig denoiser;
    SamplerOptions sampling;
    OptimHyper optim;
    std::int64_t nll_mc = 32;
};

struct MetricsSection {
    std::int64_t k = 5;
    std::int64_t embed_dim = 512;
    std::vector<std::uint64_t> embed_seeds{0, 1, 2, 3, 4};
};

struct ExperimentConfig {
    DataSection data;
    VqSection vqvae2d;
    VqSection vqvae3d;
    DiffusionSection diffusion;
    MetricsSection metrics;
    std::uint64_t seed = 0;

    /// Defaults with the 2D/3D domains set and the denoiser vocabularies derived.
    static ExperimentConfig defaults();

    /// Validates every section plus cross-section consistency.
    void validate() const;

    SequenceLayout layout() const;
    DiffusionSchedule schedule() const;
    /// Copies vocabulary sizes from the autoencoder sections into the denoiser config.
    void derive();
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Fails closed: unknown keys and wrong types raise ConfigError naming the key path.
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Normalized form: every key present, sorted, two-space indent.
std::string serialize_config(const ExperimentConfig& config);

/// 16 hex digits of FNV-1a 64 over the normalized JSON of `j`.
std::string hash_json(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& config);

/// Hash of only the sections that determine a stage's output.
enum class Stage { data, vqvae2d, vqvae3d, diffusion };
std::string stage_hash(const ExperimentConfig& config, Stage stage);

nlohmann::json to_json(const AutoencoderConfig& c);
AutoencoderConfig autoencoder_from_json(const nlohmann::json& j, const std::string& where);
nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_from_json(const nlohmann::json& j, const std::string& where);

} // namespace codex3d
