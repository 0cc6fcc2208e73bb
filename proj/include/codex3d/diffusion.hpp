#pragma once

#include "codex3d/denoiser.hpp"
#include "codex3d/rng.hpp"
#include "codex3d/tokens.hpp"

#include <torch/torch.h>

#include <functional>
#include <span>
#include <vector>

namespace codex3d {

/// Absorbing-state schedule with beta_t = 1 / (T - t + 1).
struct DiffusionSchedule {
    std::int64_t T = 256;
    std::int64_t K = 512; // number of real codes; the mask id is K

    std::int64_t mask_id() const noexcept { return K; }
    double beta(std::int64_t t) const;
    /// Probability that a token is still unmasked after t steps: (T - t) / T.
    double survival(std::int64_t t) const;
    /// ELBO reweighting (T - t + 1) / T.
    double gamma(std::int64_t t) const;
    void validate() const;
};

/// Masks each position of c0 independently with probability t / T. t = 0 is the identity.
MaskedSequence forward_mask(const CodeGrid& c0, std::int64_t t, const DiffusionSchedule& sched, Rng& rng);
MaskedSequence forward_mask(const CodeGrid& c0, std::int64_t t, const DiffusionSchedule& sched, std::uint64_t seed);

/// One step of the Markov chain: from c^{t} to c^{t+1}, masking each surviving token with probability beta_{t+1}.
MaskedSequence forward_step(const MaskedSequence& prev, const DiffusionSchedule& sched, Rng& rng);

/// Q_t = (1 - beta_t) I + beta_t 1 e_m^T as a (K+1) x (K+1) float64 tensor.
torch::Tensor transition_matrix(std::int64_t t, const DiffusionSchedule& sched);

struct ElboTerm {
    double loss = 0.0;    // -gamma * sum of masked log-likelihoods
    std::int64_t t = 0;
    double gamma = 0.0;
    std::int64_t masked = 0;
    double nll_sum = 0.0; // -sum of masked log-likelihoods, before gamma
};

/// Batched, differentiable form of the reweighted objective.
struct ElboBatch {
    torch::Tensor loss;    // B, -gamma_b * sum over masked positions of log p(true token)
    torch::Tensor nll_sum; // B, same without gamma
    std::vector<std::int64_t> t;
    std::vector<std::int64_t> masked;
};

/// Draws t ~ U{1..T} per example, masks via forward_mask and scores the true
/// tokens at masked positions only. c0: B x L3 int64, cond: B x Lc int64.
ElboBatch elbo_objective(DenoiserFn& denoiser, const torch::Tensor& c0, const torch::Tensor& cond,
                         const DiffusionSchedule& sched, Rng& rng);

ElboTerm elbo_loss(DenoiserFn& denoiser, const CodeGrid& c0, const ConditionSet& cond, const DiffusionSchedule& sched,
                   std::uint64_t seed);

enum class RevealOrder {
    random,        // uniformly random among masked positions
    confidence,    // highest sampled-token probability first (non-default extension)
    left_to_right, // autoregressive-order ablation
};

std::string to_string(RevealOrder o);
RevealOrder parse_reveal_order(const std::string& name);

struct SamplerOptions {
    std::int64_t steps = 64; // reverse steps; clamped to [1, L3]
    double temperature = 1.0;
    RevealOrder order = RevealOrder::random;
};

/// Called after every reverse step with the trajectory index and its tokens.
using TrajectoryObserver =
    std::function<void(std::int64_t step, std::size_t trajectory, const std::vector<std::int64_t>& tokens)>;

/// Number of positions revealed at reverse step s (0-based) of `steps` for L tokens.
std::int64_t reveal_count(std::int64_t s, std::int64_t steps, std::int64_t L);

/// Runs one reverse chain per condition set, sharing denoiser calls across the
/// batch. Each trajectory draws from its own seed.
std::vector<CodeGrid> sample(DenoiserFn& denoiser, std::span<const ConditionSet> conds, const DiffusionSchedule& sched,
                             const std::vector<std::int64_t>& target_shape, const SamplerOptions& options,
                             std::span<const std::uint64_t> seeds, const TrajectoryObserver& observer = {});

CodeGrid sample(DenoiserFn& denoiser, const ConditionSet& cond, const DiffusionSchedule& sched,
                const std::vector<std::int64_t>& target_shape, const SamplerOptions& options, std::uint64_t seed,
                const TrajectoryObserver& observer = {});

/// Monte Carlo estimate, in nats per token, of the variational bound
/// E_t[(T/t) * sum_masked -log p(c0_i | c^t, X)] / L3.
double conditional_nll(DenoiserFn& denoiser, const CodeGrid& c0, const ConditionSet& cond,
                       const DiffusionSchedule& sched, std::int64_t n_mc, std::uint64_t seed);

} // namespace codex3d
