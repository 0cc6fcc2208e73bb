#include "codex3d/quantizer.hpp"

#include "codex3d/errors.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <limits>

namespace codex3d {

void CodeGrid::validate() const
{
    if (K <= 0) {
        throw ConfigError("CodeGrid: K must be positive");
    }
    if (static_cast<std::int64_t>(indices.size()) != size()) {
        throw ShapeError("CodeGrid: index count does not match shape");
    }
    for (auto i : indices) {
        if (i < 0 || i >= K) {
            throw ConfigError("CodeGrid: index " + std::to_string(i) + " outside [0, " + std::to_string(K) + ")");
        }
    }
}

Codebook Codebook::uniform_init(std::int64_t K, std::int64_t D, std::uint64_t seed)
{
    if (K <= 0 || D <= 0) {
        throw ConfigError("codebook: K and D must be positive");
    }
    auto gen = at::detail::createCPUGenerator(seed);
    const double bound = 1.0 / static_cast<double>(K);
    auto v = torch::rand({K, D}, gen, torch::kFloat32) * (2.0 * bound) - bound;
    return Codebook{v};
}

bool Codebook::distinct(double tol) const
{
    torch::NoGradGuard guard;
    const auto v = vectors.detach().to(torch::kFloat64);
    // Pairwise max-norm differences, row by row to bound memory.
    for (std::int64_t i = 0; i + 1 < v.size(0); ++i) {
        const auto diff = (v.slice(0, i + 1) - v[i]).abs().amax(1);
        if (diff.min().item<double>() <= tol) return false;
    }
    return true;
}

void EncodingBatch::validate() const
{
    if (!encodings.defined() || encodings.dim() != 2) {
        throw ShapeError("EncodingBatch: encodings must be an L x D tensor");
    }
    std::int64_t n = 1;
    for (auto e : layout) n *= e;
    if (layout.empty() || n != encodings.size(0)) {
        throw ShapeError("EncodingBatch: layout product " + std::to_string(n) + " != L = "
                         + std::to_string(encodings.size(0)));
    }
}

CodeGrid QuantizationResult::code_grid(std::int64_t K) const
{
    CodeGrid g;
    g.shape = layout;
    g.K = K;
    const auto idx = indices.contiguous();
    g.indices.assign(idx.data_ptr<std::int64_t>(), idx.data_ptr<std::int64_t>() + idx.numel());
    return g;
}

QuantizationResult quantize(const EncodingBatch& enc, const torch::Tensor& codebook)
{
    enc.validate();
    if (codebook.dim() != 2 || codebook.size(1) != enc.encodings.size(1)) {
        throw ShapeError("quantize: encoding dimension " + std::to_string(enc.encodings.size(1))
                         + " does not match codebook dimension " + std::to_string(codebook.size(-1)));
    }
    const std::int64_t L = enc.encodings.size(0);
    const std::int64_t K = codebook.size(0);
    const std::int64_t D = codebook.size(1);

    torch::Tensor indices = torch::empty({L}, torch::kInt64);
    torch::Tensor distances = torch::empty({L}, torch::kFloat32);
    {
        torch::NoGradGuard guard;
        const auto e = enc.encodings.detach().to(torch::kFloat32).contiguous();
        const auto b = codebook.detach().to(torch::kFloat32).contiguous();
        if (!torch::isfinite(e).all().item<bool>()) {
            throw NumericalError("quantize: non-finite encoder output");
        }
        const auto e2 = e.pow(2).sum(1, true);
        const auto b2 = b.pow(2).sum(1);
        const auto approx = e2 + b2.unsqueeze(0) - 2.0 * e.matmul(b.t());
        const auto row_min = std::get<0>(approx.min(1, true));
        // Expanded-form rounding error is far below this margin for float32.
        const auto slack = 1e-4 * (e2 + b2.max()) + 1e-30;
        const auto candidates = (approx <= row_min + slack).contiguous();

        const auto cand = candidates.accessor<bool, 2>();
        const auto ea = e.accessor<float, 2>();
        const auto ba = b.accessor<float, 2>();
        auto ia = indices.accessor<std::int64_t, 1>();
        auto da = distances.accessor<float, 1>();
        for (std::int64_t i = 0; i < L; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::int64_t best_k = -1;
            for (std::int64_t k = 0; k < K; ++k) {
                if (!cand[i][k]) continue;
                double d2 = 0.0;
                for (std::int64_t d = 0; d < D; ++d) {
                    const double diff = static_cast<double>(ea[i][d]) - static_cast<double>(ba[k][d]);
                    d2 += diff * diff;
                }
                if (d2 < best) {
                    best = d2;
                    best_k = k;
                }
            }
            if (best_k < 0) {
                throw NumericalError("quantize: no finite candidate code");
            }
            ia[i] = best_k;
            da[i] = static_cast<float>(std::sqrt(best));
        }
    }

    QuantizationResult out;
    out.indices = indices;
    out.quantized = codebook.index_select(0, indices);
    out.distances = distances;
    out.layout = enc.layout;
    return out;
}

torch::Tensor straight_through(const torch::Tensor& enc, const torch::Tensor& quantized)
{
    if (enc.sizes() != quantized.sizes()) {
        throw ShapeError("straight_through: shape mismatch");
    }
    return quantized.detach() + (enc - enc.detach());
}

VqLossParts vq_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& enc,
                    const torch::Tensor& quantized, double beta)
{
    if (x.sizes() != x_hat.sizes()) {
        throw ShapeError("vq_loss: x and x_hat differ in shape");
    }
    if (enc.sizes() != quantized.sizes() || enc.dim() != 2) {
        throw ShapeError("vq_loss: encodings and quantized must both be L x D");
    }
    if (!(beta > 0.0)) {
        throw ConfigError("beta: must be positive");
    }
    VqLossParts p;
    p.rec = torch::mse_loss(x_hat, x);
    p.codebook = (enc.detach() - quantized).pow(2).sum(1).mean();
    p.commit = beta * (quantized.detach() - enc).pow(2).sum(1).mean();
    p.total = p.rec + p.codebook + p.commit;
    return p;
}

namespace {

CodebookUsage usage_from_counts(const std::vector<std::int64_t>& counts)
{
    std::int64_t total = 0;
    std::int64_t dead = 0;
    for (auto c : counts) {
        total += c;
        if (c == 0) ++dead;
    }
    CodebookUsage u;
    u.dead_fraction = static_cast<double>(dead) / static_cast<double>(counts.size());
    if (total == 0) {
        u.perplexity = 0.0;
        return u;
    }
    double entropy = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        entropy -= p * std::log(p);
    }
    u.perplexity = std::exp(entropy);
    return u;
}

} // namespace

CodebookUsage codebook_usage(std::span<const CodeGrid> grids, std::int64_t K)
{
    if (K <= 0) throw ConfigError("codebook_usage: K must be positive");
    std::vector<std::int64_t> counts(static_cast<std::size_t>(K), 0);
    for (const auto& g : grids) {
        for (auto i : g.indices) {
            if (i < 0 || i >= K) {
                throw ConfigError("codebook_usage: index " + std::to_string(i) + " outside [0, K)");
            }
            ++counts[static_cast<std::size_t>(i)];
        }
    }
    return usage_from_counts(counts);
}

CodebookUsage codebook_usage(const torch::Tensor& indices, std::int64_t K)
{
    if (K <= 0) throw ConfigError("codebook_usage: K must be positive");
    const auto flat = indices.detach().reshape({-1}).to(torch::kInt64).contiguous();
    if (flat.numel() > 0 && (flat.min().item<std::int64_t>() < 0 || flat.max().item<std::int64_t>() >= K)) {
        throw ConfigError("codebook_usage: index outside [0, K)");
    }
    const auto hist = torch::bincount(flat, {}, K);
    std::vector<std::int64_t> counts(hist.data_ptr<std::int64_t>(), hist.data_ptr<std::int64_t>() + K);
    return usage_from_counts(counts);
}

DeadCodeReviver::DeadCodeReviver(std::int64_t K, std::int64_t patience)
    : idle_(static_cast<std::size_t>(K), 0), patience_(patience)
{
}

void DeadCodeReviver::set_idle_steps(std::vector<std::int64_t> idle)
{
    if (idle.size() != idle_.size()) {
        throw SchemaError("dead-code state: size mismatch");
    }
    idle_ = std::move(idle);
}

std::int64_t DeadCodeReviver::step(torch::Tensor& codebook, const torch::Tensor& indices,
                                   const torch::Tensor& encodings, Rng& rng)
{
    torch::NoGradGuard guard;
    const auto K = static_cast<std::int64_t>(idle_.size());
    const auto hist = torch::bincount(indices.reshape({-1}).to(torch::kInt64), {}, K);
    const auto* counts = hist.data_ptr<std::int64_t>();
    std::int64_t revived = 0;
    const auto L = encodings.size(0);
    for (std::int64_t k = 0; k < K; ++k) {
        if (counts[k] > 0) {
            idle_[static_cast<std::size_t>(k)] = 0;
            continue;
        }
        if (++idle_[static_cast<std::size_t>(k)] >= patience_ && L > 0) {
            codebook[k].copy_(encodings[rng.below(L)].detach());
            idle_[static_cast<std::size_t>(k)] = 0;
            ++revived;
        }
    }
    return revived;
}

} // namespace codex3d
