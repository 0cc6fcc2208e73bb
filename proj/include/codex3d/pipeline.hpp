#pragma once

#include "codex3d/config.hpp"
#include "codex3d/metrics.hpp"
#include "codex3d/translation.hpp"

#include <filesystem>
#include <functional>
#include <string>

namespace codex3d {

/// Artifact locations under one experiment directory.
struct PipelinePaths {
    std::filesystem::path root;

    std::filesystem::path train_data() const { return root / "data" / "train"; }
    std::filesystem::path heldout_data() const { return root / "data" / "heldout"; }
    std::filesystem::path vqvae(Domain d) const { return root / (d == Domain::planar ? "vqvae2d.ckpt" : "vqvae3d.ckpt"); }
    std::filesystem::path denoiser() const { return root / "denoiser.ckpt"; }
    std::filesystem::path samples() const { return root / "samples"; }
    std::filesystem::path report() const { return root / "report.txt"; }
    std::filesystem::path log(const std::string& stage) const { return root / "logs" / (stage + ".log"); }
};

enum class StageStatus { ran, cached };

using ProgressFn = std::function<void(const std::string& message)>;

/// Seeds of the train and held-out splits are derived streams of the global seed.
std::uint64_t split_seed(std::uint64_t seed, bool heldout);

StageStatus run_gen_data(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress = {});
/// Resumes from an existing checkpoint with the same stage hash.
StageStatus run_train_vqvae(const ExperimentConfig& cfg, const PipelinePaths& paths, Domain domain,
                            const ProgressFn& progress = {});
StageStatus run_train_diffusion(const ExperimentConfig& cfg, const PipelinePaths& paths,
                                const ProgressFn& progress = {});
/// Translates every held-out view set; outputs a dataset directory of generated volumes.
StageStatus run_sample(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress = {});
MetricReport run_eval(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress = {});

/// gen-data, both stage-1 models, stage 2, sampling, evaluation.
MetricReport run_pipeline(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress = {});

/// Throws DependencyError naming the artifact when `path` does not exist.
void require_artifact(const std::filesystem::path& path, const std::string& producer);

/// Mean conditional NLL (nats per 3D token) over a dataset.
double dataset_nll(TranslationModels& models, const Dataset& data, std::int64_t n_mc, std::uint64_t seed);

/// Density/coverage on maximum intensity projections, averaged over the three axes.
MetricReport evaluate_mips(std::span<const VolumeGrid> real, std::span<const VolumeGrid> generated, std::int64_t k,
                           std::int64_t embed_dim, std::span<const std::uint64_t> seeds);

} // namespace codex3d
