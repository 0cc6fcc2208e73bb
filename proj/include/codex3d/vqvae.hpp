#pragma once

#include "codex3d/code_grid.hpp"
#include "codex3d/data_synth.hpp"
#include "codex3d/quantizer.hpp"

#include <torch/torch.h>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace codex3d {

enum class Domain { planar, volumetric };

std::string to_string(Domain d); // "2d" / "3d"
Domain parse_domain(const std::string& name);

struct AutoencoderConfig {
    Domain domain = Domain::volumetric;
    std::int64_t input_size = 32;
    std::int64_t downsample_factor = 4;
    std::int64_t channels = 32;
    std::int64_t codebook_K = 512;
    std::int64_t codebook_D = 64;
    std::int64_t res_blocks = 1;   // per resolution level
    double beta = 0.25;
    double sigma = 0.1;            // observation noise scale of the decoder likelihood

    void validate() const;
    int spatial_dims() const noexcept { return domain == Domain::planar ? 2 : 3; }
    std::int64_t latent_extent() const noexcept { return input_size / downsample_factor; }
    std::vector<std::int64_t> latent_layout() const;
    std::int64_t latent_count() const;
    int stages() const;
};

/// Optional extra loss term added to the stage-1 objective (e.g. an adversarial
/// patch critic). Receives the input batch and reconstruction.
using Stage1LossHook = std::function<torch::Tensor(const torch::Tensor& x, const torch::Tensor& x_hat)>;

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int dims, std::int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::AnyModule conv1_, conv2_;
};
TORCH_MODULE(ResBlock);

/// Convolutional vector-quantized autoencoder for one domain. Inputs are
/// N x 1 x S x S (2d) or N x 1 x S x S x S (3d) with values in [0,1].
class VQVAEImpl : public torch::nn::Module {
public:
    explicit VQVAEImpl(const AutoencoderConfig& config);

    struct Output {
        torch::Tensor recon;
        torch::Tensor encodings; // (N*L) x D
        QuantizationResult quant;
        VqLossParts loss;
    };

    Output forward(const torch::Tensor& x);

    /// Continuous encoder output, N x D x latent...
    torch::Tensor encode_continuous(const torch::Tensor& x);
    std::vector<CodeGrid> encode(const torch::Tensor& x);
    /// Index tensor of shape N x latent... into decoder output.
    torch::Tensor decode_indices(const torch::Tensor& indices);
    torch::Tensor decode(std::span<const CodeGrid> codes);

    torch::Tensor& codebook() { return codebook_; }
    const AutoencoderConfig& config() const noexcept { return config_; }

private:
    torch::Tensor to_channels_first(const torch::Tensor& flat, std::int64_t batch) const;
    torch::Tensor to_rows(const torch::Tensor& z) const;

    AutoencoderConfig config_;
    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Sequential decoder_{nullptr};
    torch::Tensor codebook_;
};
TORCH_MODULE(VQVAE);

torch::Tensor to_tensor(const VolumeGrid& v);                    // 1 x 1 x D0 x D1 x D2
torch::Tensor to_tensor(const ViewImage& v);                     // 1 x 1 x H x W
torch::Tensor stack_volumes(std::span<const VolumeGrid> volumes); // N x 1 x ...
torch::Tensor stack_views(std::span<const ViewImage> views);
VolumeGrid volume_from_tensor(const torch::Tensor& t);            // accepts 1x1xDxHxW or DxHxW
ViewImage view_from_tensor(const torch::Tensor& t);

CodeGrid encode_volume(VQVAE& model, const VolumeGrid& v);
CodeGrid encode_view(VQVAE& model, const ViewImage& v);
VolumeGrid decode_volume(VQVAE& model, const CodeGrid& c);
ViewImage decode_view(VQVAE& model, const CodeGrid& c);

/// log p(x | c) under N(decode(c), sigma^2 I) summed over all voxels/pixels.
double likelihood_decode_term(VQVAE& model, const torch::Tensor& x, const CodeGrid& c);
double likelihood_decode_term(VQVAE& model, const VolumeGrid& x, const CodeGrid& c);
/// Closed form used by the above, exposed for reuse: residual is x - mean.
double gaussian_log_density(const torch::Tensor& residual, double sigma);

} // namespace codex3d
