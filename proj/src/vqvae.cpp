#include "codex3d/vqvae.hpp"

#include "codex3d/errors.hpp"

#include <cmath>
#include <numbers>

namespace codex3d {

namespace nn = torch::nn;

namespace {

nn::AnyModule make_conv(int dims, std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                        std::int64_t pad)
{
    if (dims == 2) {
        return nn::AnyModule(nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(pad)));
    }
    return nn::AnyModule(nn::Conv3d(nn::Conv3dOptions(in, out, kernel).stride(stride).padding(pad)));
}

nn::AnyModule make_upconv(int dims, std::int64_t in, std::int64_t out)
{
    if (dims == 2) {
        return nn::AnyModule(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1)));
    }
    return nn::AnyModule(nn::ConvTranspose3d(nn::ConvTranspose3dOptions(in, out, 4).stride(2).padding(1)));
}

std::int64_t group_count(std::int64_t channels)
{
    for (std::int64_t g : {8, 4, 2}) {
        if (channels % g == 0) return g;
    }
    return 1;
}

} // namespace

std::string to_string(Domain d) { return d == Domain::planar ? "2d" : "3d"; }

Domain parse_domain(const std::string& name)
{
    if (name == "2d") return Domain::planar;
    if (name == "3d") return Domain::volumetric;
    throw ConfigError("domain: expected '2d' or '3d', got '" + name + "'");
}

void AutoencoderConfig::validate() const
{
    if (input_size <= 0) throw ConfigError("input_size: must be positive");
    if (downsample_factor < 2 || (downsample_factor & (downsample_factor - 1)) != 0) {
        throw ConfigError("downsample_factor: must be a power of two >= 2");
    }
    if (input_size % downsample_factor != 0) {
        throw ConfigError("input_size: must be divisible by downsample_factor");
    }
    if (channels <= 0) throw ConfigError("channels: must be positive");
    if (codebook_K <= 1) throw ConfigError("codebook_K: must be at least 2");
    if (codebook_D <= 0) throw ConfigError("codebook_D: must be positive");
    if (res_blocks < 0) throw ConfigError("res_blocks: must be non-negative");
    if (!(beta > 0.0)) throw ConfigError("beta: must be positive");
    if (!(sigma > 0.0)) throw ConfigError("sigma: must be positive");
}

std::vector<std::int64_t> AutoencoderConfig::latent_layout() const
{
    return std::vector<std::int64_t>(static_cast<std::size_t>(spatial_dims()), latent_extent());
}

std::int64_t AutoencoderConfig::latent_count() const
{
    std::int64_t n = 1;
    for (auto e : latent_layout()) n *= e;
    return n;
}

int AutoencoderConfig::stages() const
{
    int s = 0;
    for (auto f = downsample_factor; f > 1; f >>= 1) ++s;
    return s;
}

ResBlockImpl::ResBlockImpl(int dims, std::int64_t channels)
{
    norm1_ = register_module("norm1", nn::GroupNorm(group_count(channels), channels));
    conv1_ = make_conv(dims, channels, channels, 3, 1, 1);
    register_module("conv1", conv1_.ptr());
    norm2_ = register_module("norm2", nn::GroupNorm(group_count(channels), channels));
    conv2_ = make_conv(dims, channels, channels, 3, 1, 1);
    register_module("conv2", conv2_.ptr());
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x)
{
    auto h = conv1_.forward(torch::silu(norm1_->forward(x)));
    h = conv2_.forward(torch::silu(norm2_->forward(h)));
    return x + h;
}

VQVAEImpl::VQVAEImpl(const AutoencoderConfig& config) : config_(config)
{
    config_.validate();
    const int dims = config_.spatial_dims();
    const int stages = config_.stages();
    const std::int64_t base = config_.channels;
    auto level_channels = [&](int level) { return level == 0 ? base : 2 * base; };

    encoder_ = nn::Sequential();
    encoder_->push_back(make_conv(dims, 1, base, 3, 1, 1));
    for (int s = 0; s < stages; ++s) {
        for (std::int64_t r = 0; r < config_.res_blocks; ++r) encoder_->push_back(ResBlock(dims, level_channels(s)));
        encoder_->push_back(make_conv(dims, level_channels(s), level_channels(s + 1), 4, 2, 1));
        encoder_->push_back(nn::SiLU());
    }
    const std::int64_t top = level_channels(stages);
    for (std::int64_t r = 0; r < config_.res_blocks; ++r) encoder_->push_back(ResBlock(dims, top));
    encoder_->push_back(nn::GroupNorm(group_count(top), top));
    encoder_->push_back(nn::SiLU());
    encoder_->push_back(make_conv(dims, top, config_.codebook_D, 1, 1, 0));
    register_module("encoder", encoder_);

    decoder_ = nn::Sequential();
    decoder_->push_back(make_conv(dims, config_.codebook_D, top, 3, 1, 1));
    for (std::int64_t r = 0; r < config_.res_blocks; ++r) decoder_->push_back(ResBlock(dims, top));
    for (int s = stages; s > 0; --s) {
        decoder_->push_back(make_upconv(dims, level_channels(s), level_channels(s - 1)));
        decoder_->push_back(nn::SiLU());
        for (std::int64_t r = 0; r < config_.res_blocks; ++r) decoder_->push_back(ResBlock(dims, level_channels(s - 1)));
    }
    decoder_->push_back(nn::GroupNorm(group_count(base), base));
    decoder_->push_back(nn::SiLU());
    decoder_->push_back(make_conv(dims, base, 1, 3, 1, 1));
    decoder_->push_back(nn::Sigmoid());
    register_module("decoder", decoder_);

    const double bound = 1.0 / static_cast<double>(config_.codebook_K);
    codebook_ = register_parameter(
        "codebook", torch::rand({config_.codebook_K, config_.codebook_D}) * (2.0 * bound) - bound);
}

torch::Tensor VQVAEImpl::encode_continuous(const torch::Tensor& x)
{
    const int dims = config_.spatial_dims();
    if (x.dim() != dims + 2 || x.size(1) != 1) {
        throw ShapeError("VQVAE: expected N x 1 x spatial input with " + std::to_string(dims) + " spatial axes");
    }
    for (int a = 0; a < dims; ++a) {
        if (x.size(2 + a) != config_.input_size) {
            throw ShapeError("VQVAE: input extent " + std::to_string(x.size(2 + a)) + " != configured input_size "
                             + std::to_string(config_.input_size));
        }
    }
    return encoder_->forward(x);
}

torch::Tensor VQVAEImpl::to_rows(const torch::Tensor& z) const
{
    // N x D x s... -> (N*L) x D
    std::vector<std::int64_t> perm{0};
    for (int a = 0; a < config_.spatial_dims(); ++a) perm.push_back(2 + a);
    perm.push_back(1);
    return z.permute(perm).reshape({-1, config_.codebook_D});
}

torch::Tensor VQVAEImpl::to_channels_first(const torch::Tensor& flat, std::int64_t batch) const
{
    std::vector<std::int64_t> shape{batch};
    for (auto e : config_.latent_layout()) shape.push_back(e);
    shape.push_back(config_.codebook_D);
    std::vector<std::int64_t> perm{0, config_.spatial_dims() + 1};
    for (int a = 0; a < config_.spatial_dims(); ++a) perm.push_back(1 + a);
    return flat.reshape(shape).permute(perm).contiguous();
}

VQVAEImpl::Output VQVAEImpl::forward(const torch::Tensor& x)
{
    const auto batch = x.size(0);
    Output out;
    const auto z = encode_continuous(x);
    out.encodings = to_rows(z);
    std::vector<std::int64_t> layout{batch};
    for (auto e : config_.latent_layout()) layout.push_back(e);
    out.quant = quantize(EncodingBatch{out.encodings, layout}, codebook_);
    const auto zq = straight_through(out.encodings, out.quant.quantized);
    out.recon = decoder_->forward(to_channels_first(zq, batch));
    out.loss = vq_loss(x, out.recon, out.encodings, out.quant.quantized, config_.beta);
    return out;
}

std::vector<CodeGrid> VQVAEImpl::encode(const torch::Tensor& x)
{
    torch::NoGradGuard guard;
    const auto batch = x.size(0);
    const auto rows = to_rows(encode_continuous(x));
    std::vector<std::int64_t> layout{batch};
    for (auto e : config_.latent_layout()) layout.push_back(e);
    const auto q = quantize(EncodingBatch{rows, layout}, codebook_);
    const auto L = config_.latent_count();
    const auto* idx = q.indices.data_ptr<std::int64_t>();
    std::vector<CodeGrid> grids(static_cast<std::size_t>(batch));
    for (std::int64_t n = 0; n < batch; ++n) {
        grids[n].shape = config_.latent_layout();
        grids[n].K = config_.codebook_K;
        grids[n].indices.assign(idx + n * L, idx + (n + 1) * L);
    }
    return grids;
}

torch::Tensor VQVAEImpl::decode_indices(const torch::Tensor& indices)
{
    const auto batch = indices.size(0);
    if (indices.numel() != batch * config_.latent_count()) {
        throw ShapeError("VQVAE::decode: index tensor does not match the latent layout");
    }
    const auto flat = indices.reshape({-1}).to(torch::kInt64);
    if (flat.numel() > 0
        && (flat.min().item<std::int64_t>() < 0 || flat.max().item<std::int64_t>() >= config_.codebook_K)) {
        throw ConfigError("VQVAE::decode: code index outside [0, K)");
    }
    const auto q = codebook_.index_select(0, flat);
    return decoder_->forward(to_channels_first(q, batch));
}

torch::Tensor VQVAEImpl::decode(std::span<const CodeGrid> codes)
{
    const auto L = config_.latent_count();
    auto idx = torch::empty({static_cast<std::int64_t>(codes.size()), L}, torch::kInt64);
    auto* p = idx.data_ptr<std::int64_t>();
    for (std::size_t n = 0; n < codes.size(); ++n) {
        if (codes[n].K != config_.codebook_K || codes[n].shape != config_.latent_layout()) {
            throw ShapeError("VQVAE::decode: code grid does not match this model's codebook or layout");
        }
        codes[n].validate();
        std::copy(codes[n].indices.begin(), codes[n].indices.end(), p + static_cast<std::int64_t>(n) * L);
    }
    return decode_indices(idx);
}

torch::Tensor to_tensor(const VolumeGrid& v)
{
    return torch::from_blob(const_cast<float*>(v.values.data()), {1, 1, v.shape[0], v.shape[1], v.shape[2]},
                            torch::kFloat32)
        .clone();
}

torch::Tensor to_tensor(const ViewImage& v)
{
    return torch::from_blob(const_cast<float*>(v.values.data()), {1, 1, v.height, v.width}, torch::kFloat32).clone();
}

torch::Tensor stack_volumes(std::span<const VolumeGrid> volumes)
{
    std::vector<torch::Tensor> parts;
    parts.reserve(volumes.size());
    for (const auto& v : volumes) parts.push_back(to_tensor(v));
    return torch::cat(parts, 0);
}

torch::Tensor stack_views(std::span<const ViewImage> views)
{
    std::vector<torch::Tensor> parts;
    parts.reserve(views.size());
    for (const auto& v : views) parts.push_back(to_tensor(v));
    return torch::cat(parts, 0);
}

VolumeGrid volume_from_tensor(const torch::Tensor& t)
{
    const auto c = t.detach().to(torch::kFloat32).contiguous();
    if (c.numel() == 0 || c.dim() < 3) throw ShapeError("volume_from_tensor: need at least 3 axes");
    const auto n = c.dim();
    VolumeGrid v({c.size(n - 3), c.size(n - 2), c.size(n - 1)});
    if (c.numel() != v.voxel_count()) throw ShapeError("volume_from_tensor: leading axes must be singleton");
    std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), v.values.begin());
    return v;
}

ViewImage view_from_tensor(const torch::Tensor& t)
{
    const auto c = t.detach().to(torch::kFloat32).contiguous();
    if (c.numel() == 0 || c.dim() < 2) throw ShapeError("view_from_tensor: need at least 2 axes");
    const auto n = c.dim();
    ViewImage v(c.size(n - 2), c.size(n - 1));
    if (c.numel() != v.height * v.width) throw ShapeError("view_from_tensor: leading axes must be singleton");
    std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), v.values.begin());
    return v;
}

CodeGrid encode_volume(VQVAE& model, const VolumeGrid& v)
{
    if (model->config().domain != Domain::volumetric) throw ShapeError("encode_volume: model is not 3d");
    return model->encode(to_tensor(v)).front();
}

CodeGrid encode_view(VQVAE& model, const ViewImage& v)
{
    if (model->config().domain != Domain::planar) throw ShapeError("encode_view: model is not 2d");
    return model->encode(to_tensor(v)).front();
}

VolumeGrid decode_volume(VQVAE& model, const CodeGrid& c)
{
    torch::NoGradGuard guard;
    return volume_from_tensor(model->decode(std::span<const CodeGrid>(&c, 1)));
}

ViewImage decode_view(VQVAE& model, const CodeGrid& c)
{
    torch::NoGradGuard guard;
    return view_from_tensor(model->decode(std::span<const CodeGrid>(&c, 1)));
}

double gaussian_log_density(const torch::Tensor& residual, double sigma)
{
    const auto r = residual.detach().to(torch::kFloat64);
    const double count = static_cast<double>(r.numel());
    const double sq = r.pow(2).sum().item<double>();
    return -0.5 * count * std::log(2.0 * std::numbers::pi * sigma * sigma) - sq / (2.0 * sigma * sigma);
}

double likelihood_decode_term(VQVAE& model, const torch::Tensor& x, const CodeGrid& c)
{
    torch::NoGradGuard guard;
    const auto mean = model->decode(std::span<const CodeGrid>(&c, 1));
    if (mean.numel() != x.numel()) {
        throw ShapeError("likelihood_decode_term: input does not match decoder output shape");
    }
    return gaussian_log_density(x.reshape(mean.sizes()) - mean, model->config().sigma);
}

double likelihood_decode_term(VQVAE& model, const VolumeGrid& x, const CodeGrid& c)
{
    return likelihood_decode_term(model, to_tensor(x), c);
}

} // namespace codex3d
