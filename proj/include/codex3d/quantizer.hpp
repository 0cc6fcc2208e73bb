#pragma once

#include "codex3d/code_grid.hpp"
#include "codex3d/rng.hpp"

#include <torch/torch.h>

#include <span>
#include <vector>

namespace codex3d {

/// K x D table of code vectors.
struct Codebook {
    torch::Tensor vectors; // float32, K x D

    std::int64_t size() const { return vectors.size(0); }
    std::int64_t dim() const { return vectors.size(1); }

    /// Uniform in [-1/K, 1/K].
    static Codebook uniform_init(std::int64_t K, std::int64_t D, std::uint64_t seed);

    /// True when every pair of rows differs by more than tol in max-norm.
    bool distinct(double tol = 1e-8) const;
};

/// Continuous encoder outputs e_1..e_L with the spatial layout they unflatten to.
struct EncodingBatch {
    torch::Tensor encodings; // L x D
    std::vector<std::int64_t> layout;

    void validate() const;
};

struct QuantizationResult {
    torch::Tensor indices;   // int64, L
    torch::Tensor quantized; // L x D, rows of the codebook (carries codebook gradient)
    torch::Tensor distances; // float32, L
    std::vector<std::int64_t> layout;

    CodeGrid code_grid(std::int64_t K) const;
};

/// Nearest code under Euclidean distance, ties broken toward the lowest index.
/// A fast expanded-form screen selects candidates; survivors are ranked with
/// exact double-precision distances.
QuantizationResult quantize(const EncodingBatch& enc, const torch::Tensor& codebook);

/// Forward value equals `quantized`; the Jacobian with respect to `enc` is the identity.
torch::Tensor straight_through(const torch::Tensor& enc, const torch::Tensor& quantized);

struct VqLossParts {
    torch::Tensor total;
    torch::Tensor rec;
    torch::Tensor codebook;
    torch::Tensor commit;
};

/// rec = MSE(x, x_hat); codebook = mean_i ||sg(e_i) - q_i||^2;
/// commit = beta * mean_i ||sg(q_i) - e_i||^2. Squared norms are summed over
/// the code dimension and averaged over positions.
VqLossParts vq_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& enc,
                    const torch::Tensor& quantized, double beta);

struct CodebookUsage {
    double perplexity = 0.0;
    double dead_fraction = 0.0;
};

CodebookUsage codebook_usage(std::span<const CodeGrid> grids, std::int64_t K);
CodebookUsage codebook_usage(const torch::Tensor& indices, std::int64_t K);

/// Reseeds codes that have gone unused for `patience` consecutive steps with
/// randomly chosen encoder outputs from the current batch.
class DeadCodeReviver {
public:
    DeadCodeReviver(std::int64_t K, std::int64_t patience = 256);

    /// Records usage for one step, then revives stale codes in place. Returns
    /// the number of revived codes.
    std::int64_t step(torch::Tensor& codebook, const torch::Tensor& indices, const torch::Tensor& encodings, Rng& rng);

    const std::vector<std::int64_t>& idle_steps() const noexcept { return idle_; }
    void set_idle_steps(std::vector<std::int64_t> idle);
    std::int64_t patience() const noexcept { return patience_; }

private:
    std::vector<std::int64_t> idle_;
    std::int64_t patience_;
};

} // namespace codex3d
