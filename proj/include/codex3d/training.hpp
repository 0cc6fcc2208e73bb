#pragma once

#include "codex3d/checkpoint.hpp"
#include "codex3d/config.hpp"
#include "codex3d/dataset_io.hpp"
#include "codex3d/quantizer.hpp"
#include "codex3d/rng.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>

namespace codex3d {

/// Append-only "step metric value" lines.
class ScalarLog {
public:
    ScalarLog() = default;
    explicit ScalarLog(std::filesystem::path path) : path_(std::move(path)) {}
    void append(std::int64_t step, const std::string& metric, double value) const;
    bool enabled() const noexcept { return !path_.empty(); }

private:
    std::filesystem::path path_;
};

/// Called every checkpoint_every steps and after the final step.
using CheckpointHook = std::function<void(std::int64_t step)>;

/// VQ-VAE trainer: Adam, optional dead-code reseeding, divergence guard.
class Stage1Trainer {
public:
    /// `component` is "vqvae2d" or "vqvae3d"; `data` is N x 1 x spatial float32.
    Stage1Trainer(const VqSection& section, std::string component, torch::Tensor data, std::uint64_t seed);

    /// One optimizer step on a batch drawn with replacement; returns the total loss.
    double step();
    /// Steps until `until` (exclusive of already-completed steps), logging and checkpointing.
    void train(std::int64_t until, const ScalarLog& log = {}, const CheckpointHook& hook = {});

    Checkpoint checkpoint(const std::string& config_hash = {}) const;
    /// Restores parameters, optimizer moments, RNG and reviver state.
    void restore(const Checkpoint& ckpt);

    VQVAE& model() noexcept { return model_; }
    std::int64_t steps_done() const noexcept { return step_; }
    const VqSection& section() const noexcept { return section_; }

    Stage1LossHook extra_loss; // no-op unless set

private:
    VqSection section_;
    std::string component_;
    torch::Tensor data_;
    VQVAE model_{nullptr};
    std::unique_ptr<torch::optim::Adam> opt_;
    std::optional<DeadCodeReviver> reviver_;
    Rng rng_;
    std::int64_t step_ = 0;
    double last_rec_ = 0.0;
};

/// Denoiser trainer on precomputed code tensors.
class Stage2Trainer {
public:
    /// codes: N x L3 int64 targets; cond: N x Lc int64 flattened view codes.
    Stage2Trainer(const DiffusionSection& section, const SequenceLayout& layout, const DiffusionSchedule& sched,
                  torch::Tensor codes, torch::Tensor cond, std::uint64_t seed);

    /// One step on the reweighted masked objective normalized per target token.
    double step();
    void train(std::int64_t until, const ScalarLog& log = {}, const CheckpointHook& hook = {});

    Checkpoint checkpoint(const std::string& config_hash = {}) const;
    void restore(const Checkpoint& ckpt);

    TransformerDenoiser& model() noexcept { return model_; }
    std::int64_t steps_done() const noexcept { return step_; }
    const DiffusionSchedule& schedule() const noexcept { return sched_; }
    const SequenceLayout& layout() const noexcept { return layout_; }

private:
    DiffusionSection section_;
    SequenceLayout layout_;
    DiffusionSchedule sched_;
    torch::Tensor codes_, cond_;
    TransformerDenoiser model_{nullptr};
    std::unique_ptr<TransformerAdapter> adapter_;
    std::unique_ptr<torch::optim::Adam> opt_;
    Rng rng_;
    std::int64_t step_ = 0;
};

/// Reconstructs a VQ-VAE from its checkpoint (config snapshot + weights).
VQVAE load_vqvae(const Checkpoint& ckpt);
/// Reconstructs a denoiser plus its layout and schedule.
struct DenoiserBundle {
    TransformerDenoiser model{nullptr};
    SequenceLayout layout;
    DiffusionSchedule schedule;

    /// 3D latent grid shape (cubic).
    std::vector<std::int64_t> target_shape() const;
};
DenoiserBundle load_denoiser(const Checkpoint& ckpt);

/// Throws SchemaError when the three checkpoints disagree on codebooks or layouts.
void check_compatible(const VQVAE& vq2d, const VQVAE& vq3d, const DenoiserBundle& denoiser);

/// N x L int64 code tensors for the volumes / the concatenated views of each sample.
torch::Tensor encode_targets(VQVAE& vq3d, std::span<const Sample> samples);
torch::Tensor encode_conditions(VQVAE& vq2d, std::span<const Sample> samples);
ConditionSet condition_set(VQVAE& vq2d, std::span<const ViewImage> views);
/// Splits one row of a flattened condition tensor back into per-view grids.
ConditionSet condition_from_row(const torch::Tensor& row, const SequenceLayout& layout,
                                const std::vector<std::int64_t>& view_shape, std::int64_t K2);
CodeGrid code_grid_from_row(const torch::Tensor& row, const std::vector<std::int64_t>& shape, std::int64_t K);

/// conditional_nll averaged over the rows of precomputed code tensors
/// (codes N x L3, cond N x Lc); draws for all rows are batched together.
double mean_code_nll(TransformerDenoiser& model, const DiffusionSchedule& sched, const torch::Tensor& codes,
                     const torch::Tensor& cond, std::int64_t n_mc, std::uint64_t seed);

/// Mean held-out PSNR of reconstructions through the quantized bottleneck.
double reconstruction_psnr(VQVAE& model, const torch::Tensor& data);

} // namespace codex3d
