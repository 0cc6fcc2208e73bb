#include "codex3d/metrics.hpp"

#include "codex3d/errors.hpp"
#include "codex3d/vqvae.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>
#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "codex3d/binary_io.hpp"

namespace codex3d {

void EmbeddingSet::validate() const
{
    if (count < 0 || dim < 1 || static_cast<std::int64_t>(values.size()) != count * dim) {
        throw ShapeError("EmbeddingSet: value count does not match count x dim");
    }
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericalError("EmbeddingSet: non-finite embedding");
    }
}

struct RandomEncoder::Impl {
    int dims = 3;
    std::int64_t input_size = 0;
    std::int64_t embed_dim = 0;
    std::vector<torch::Tensor> weights;
    torch::Tensor projection; // undefined when the flattened size already equals embed_dim

    torch::Tensor features(const torch::Tensor& x) const
    {
        torch::NoGradGuard guard;
        auto h = x;
        for (const auto& w : weights) {
            h = dims == 2 ? torch::conv2d(h, w, {}, 2, 1) : torch::conv3d(h, w, {}, 2, 1);
            h = torch::leaky_relu(h, 0.2);
        }
        h = h.flatten(1);
        if (projection.defined()) h = h.matmul(projection);
        return h;
    }

    EmbeddingSet to_set(const torch::Tensor& x, EmbeddingSource source) const
    {
        EmbeddingSet out;
        out.source = source;
        out.dim = embed_dim;
        out.count = x.size(0);
        out.values.reserve(static_cast<std::size_t>(out.count * out.dim));
        constexpr std::int64_t kChunk = 32;
        for (std::int64_t start = 0; start < out.count; start += kChunk) {
            const auto f = features(x.slice(0, start, std::min(out.count, start + kChunk))).contiguous();
            out.values.insert(out.values.end(), f.data_ptr<float>(), f.data_ptr<float>() + f.numel());
        }
        out.validate();
        return out;
    }
};

RandomEncoder::RandomEncoder(int spatial_dims, std::int64_t input_size, std::int64_t embed_dim, std::uint64_t seed)
    : impl_(std::make_unique<Impl>())
{
    if (spatial_dims != 2 && spatial_dims != 3) throw ConfigError("RandomEncoder: spatial_dims must be 2 or 3");
    if (input_size < 8) throw ConfigError("RandomEncoder: input_size must be >= 8");
    if (embed_dim < 1) throw ConfigError("embed_dim: must be positive");
    impl_->dims = spatial_dims;
    impl_->input_size = input_size;
    impl_->embed_dim = embed_dim;

    auto gen = at::detail::createCPUGenerator(seed);
    std::int64_t side = input_size;
    for (int s = 0; s < 3; ++s) side = (side + 1) / 2;
    std::int64_t cells = 1;
    for (int a = 0; a < spatial_dims; ++a) cells *= side;
    const bool exact = embed_dim % cells == 0;
    const std::int64_t last = exact ? embed_dim / cells : 32;
    const std::int64_t channels[4] = {1, 16, 32, last};
    for (int s = 0; s < 3; ++s) {
        std::vector<std::int64_t> shape{channels[s + 1], channels[s]};
        std::int64_t fan_in = channels[s];
        for (int a = 0; a < spatial_dims; ++a) {
            shape.push_back(4);
            fan_in *= 4;
        }
        impl_->weights.push_back(torch::randn(shape, gen, torch::kFloat32) * std::sqrt(2.0 / fan_in));
    }
    if (!exact) {
        const auto flat = last * cells;
        impl_->projection = torch::randn({flat, embed_dim}, gen, torch::kFloat32) / std::sqrt(static_cast<double>(flat));
    }
}

RandomEncoder::~RandomEncoder() = default;
RandomEncoder::RandomEncoder(RandomEncoder&&) noexcept = default;
RandomEncoder& RandomEncoder::operator=(RandomEncoder&&) noexcept = default;

std::int64_t RandomEncoder::embed_dim() const noexcept { return impl_->embed_dim; }

EmbeddingSet RandomEncoder::embed_volumes(std::span<const VolumeGrid> volumes, EmbeddingSource source) const
{
    if (impl_->dims != 3) throw ShapeError("RandomEncoder: built for 2D inputs");
    for (const auto& v : volumes) {
        if (v.shape != volumes.front().shape) throw ShapeError("random_encoder_embed: mixed shapes");
        if (v.shape[0] != impl_->input_size || v.shape[1] != impl_->input_size || v.shape[2] != impl_->input_size) {
            throw ShapeError("random_encoder_embed: volume shape does not match the encoder input size");
        }
    }
    if (volumes.empty()) return EmbeddingSet{0, impl_->embed_dim, {}, source};
    return impl_->to_set(stack_volumes(volumes), source);
}

EmbeddingSet RandomEncoder::embed_views(std::span<const ViewImage> views, EmbeddingSource source) const
{
    if (impl_->dims != 2) throw ShapeError("RandomEncoder: built for 3D inputs");
    for (const auto& v : views) {
        if (v.height != views.front().height || v.width != views.front().width) {
            throw ShapeError("random_encoder_embed: mixed shapes");
        }
        if (v.height != impl_->input_size || v.width != impl_->input_size) {
            throw ShapeError("random_encoder_embed: view shape does not match the encoder input size");
        }
    }
    if (views.empty()) return EmbeddingSet{0, impl_->embed_dim, {}, source};
    return impl_->to_set(stack_views(views), source);
}

EmbeddingSet random_encoder_embed(std::span<const VolumeGrid> volumes, std::uint64_t seed, std::int64_t embed_dim,
                                  EmbeddingSource source)
{
    if (volumes.empty()) throw ShapeError("random_encoder_embed: no inputs");
    return RandomEncoder(3, volumes.front().shape[0], embed_dim, seed).embed_volumes(volumes, source);
}

EmbeddingSet random_encoder_embed(std::span<const ViewImage> views, std::uint64_t seed, std::int64_t embed_dim,
                                  EmbeddingSource source)
{
    if (views.empty()) throw ShapeError("random_encoder_embed: no inputs");
    return RandomEncoder(2, views.front().height, embed_dim, seed).embed_views(views, source);
}

namespace {

double euclidean(std::span<const float> a, std::span<const float> b)
{
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
        s += diff * diff;
    }
    return std::sqrt(s);
}

void check_pair(std::span<const float> a, std::span<const float> b)
{
    if (a.size() != b.size()) throw ShapeError("metric: inputs differ in size");
    if (a.empty()) throw ShapeError("metric: empty inputs");
}

} // namespace

DensityCoverage density_coverage(const EmbeddingSet& real, const EmbeddingSet& fake, std::int64_t k)
{
    real.validate();
    fake.validate();
    if (k < 1) throw ConfigError("density_coverage: k must be >= 1");
    if (k >= real.count) {
        throw ConfigError("density_coverage: k=" + std::to_string(k) + " requires more than k real points (have "
                          + std::to_string(real.count) + ")");
    }
    if (fake.count < 1) throw ConfigError("density_coverage: need at least one generated point");
    if (real.dim != fake.dim) throw ShapeError("density_coverage: embedding dimensions differ");

    std::vector<double> radius(static_cast<std::size_t>(real.count));
    std::vector<double> others;
    others.reserve(static_cast<std::size_t>(real.count));
    for (std::int64_t i = 0; i < real.count; ++i) {
        others.clear();
        for (std::int64_t j = 0; j < real.count; ++j) {
            if (j != i) others.push_back(euclidean(real.row(i), real.row(j)));
        }
        std::nth_element(others.begin(), others.begin() + (k - 1), others.end());
        radius[i] = others[k - 1];
    }

    std::int64_t hits = 0;
    std::vector<bool> covered(static_cast<std::size_t>(real.count), false);
    for (std::int64_t j = 0; j < fake.count; ++j) {
        for (std::int64_t i = 0; i < real.count; ++i) {
            if (euclidean(fake.row(j), real.row(i)) <= radius[i]) {
                ++hits;
                covered[i] = true;
            }
        }
    }
    DensityCoverage out;
    out.density = static_cast<double>(hits) / static_cast<double>(k * fake.count);
    out.coverage = static_cast<double>(std::count(covered.begin(), covered.end(), true))
                   / static_cast<double>(real.count);
    return out;
}

double mse(std::span<const float> a, std::span<const float> b)
{
    check_pair(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double mae(std::span<const float> a, std::span<const float> b)
{
    check_pair(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    return s / static_cast<double>(a.size());
}

double psnr(std::span<const float> a, std::span<const float> b, double max_val)
{
    if (!(max_val > 0.0)) throw ConfigError("psnr: max_val must be positive");
    const double m = mse(a, b);
    if (m <= 0.0) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(max_val * max_val / m));
}

double mse(const VolumeGrid& a, const VolumeGrid& b)
{
    if (a.shape != b.shape) throw ShapeError("mse: volume shapes differ");
    return mse(a.values, b.values);
}

double mae(const VolumeGrid& a, const VolumeGrid& b)
{
    if (a.shape != b.shape) throw ShapeError("mae: volume shapes differ");
    return mae(a.values, b.values);
}

double psnr(const VolumeGrid& a, const VolumeGrid& b, double max_val)
{
    if (a.shape != b.shape) throw ShapeError("psnr: volume shapes differ");
    return psnr(a.values, b.values, max_val);
}

namespace {

std::vector<double> gaussian_window(int side, double sigma)
{
    std::vector<double> g(static_cast<std::size_t>(side * side));
    const double c = (side - 1) / 2.0;
    double total = 0.0;
    for (int r = 0; r < side; ++r) {
        for (int q = 0; q < side; ++q) {
            const double w = std::exp(-((r - c) * (r - c) + (q - c) * (q - c)) / (2.0 * sigma * sigma));
            g[r * side + q] = w;
            total += w;
        }
    }
    for (auto& w : g) w /= total;
    return g;
}

/// Mean SSIM over all window placements fully inside a rows x cols image.
double ssim_plane(const float* a, const float* b, std::int64_t rows, std::int64_t cols, std::int64_t stride_r,
                  std::int64_t stride_c, const SsimOptions& o)
{
    const int side = static_cast<int>(std::min<std::int64_t>({o.window, rows, cols}));
    const auto w = gaussian_window(side, o.sigma);
    const double c1 = std::pow(o.k1 * o.max_val, 2);
    const double c2 = std::pow(o.k2 * o.max_val, 2);
    double total = 0.0;
    std::int64_t n = 0;
    for (std::int64_t r0 = 0; r0 + side <= rows; ++r0) {
        for (std::int64_t q0 = 0; q0 + side <= cols; ++q0) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int r = 0; r < side; ++r) {
                for (int q = 0; q < side; ++q) {
                    const double wt = w[r * side + q];
                    const auto off = (r0 + r) * stride_r + (q0 + q) * stride_c;
                    const double x = a[off], y = b[off];
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++n;
        }
    }
    return total / static_cast<double>(n);
}

void check_ssim_options(const SsimOptions& o)
{
    if (!(o.max_val > 0.0)) throw ConfigError("ssim: max_val must be positive");
    if (o.window < 1 || !(o.sigma > 0.0)) throw ConfigError("ssim: bad window");
}

} // namespace

double ssim(const ViewImage& a, const ViewImage& b, const SsimOptions& options)
{
    check_ssim_options(options);
    if (a.height != b.height || a.width != b.width) throw ShapeError("ssim: image shapes differ");
    if (a.values.empty()) throw ShapeError("ssim: empty images");
    return ssim_plane(a.values.data(), b.values.data(), a.height, a.width, a.width, 1, options);
}

double ssim(const VolumeGrid& a, const VolumeGrid& b, const SsimOptions& options)
{
    check_ssim_options(options);
    if (a.shape != b.shape) throw ShapeError("ssim: volume shapes differ");
    if (a.values.empty()) throw ShapeError("ssim: empty volumes");
    const auto& s = a.shape;
    const std::int64_t strides[3] = {s[1] * s[2], s[2], 1};
    double total = 0.0;
    std::int64_t slices = 0;
    for (int axis = 0; axis < 3; ++axis) {
        const int ra = axis == 0 ? 1 : 0;
        const int ca = axis == 2 ? 1 : 2;
        for (std::int64_t i = 0; i < s[axis]; ++i) {
            const auto off = i * strides[axis];
            total += ssim_plane(a.values.data() + off, b.values.data() + off, s[ra], s[ca], strides[ra], strides[ca],
                                options);
            ++slices;
        }
    }
    return total / static_cast<double>(slices);
}

ViewImage mip(const VolumeGrid& volume, int axis)
{
    if (axis < 0 || axis > 2) throw ConfigError("mip: axis must be 0, 1 or 2");
    const auto& s = volume.shape;
    const int ra = axis == 0 ? 1 : 0;
    const int ca = axis == 2 ? 1 : 2;
    ViewImage out(s[ra], s[ca], -std::numeric_limits<float>::infinity());
    for (std::int64_t i = 0; i < s[0]; ++i) {
        for (std::int64_t j = 0; j < s[1]; ++j) {
            for (std::int64_t k = 0; k < s[2]; ++k) {
                const std::int64_t idx[3] = {i, j, k};
                float& px = out.at(idx[ra], idx[ca]);
                px = std::max(px, volume.at(i, j, k));
            }
        }
    }
    return out;
}

std::string MetricReport::to_text() const
{
    std::ostringstream out;
    out << std::setprecision(10);
    out << "schema_version=" << schema_version << "\n";
    out << "config_hash=" << config_hash << "\n";
    out << "nll_nats_per_token=";
    if (nll) {
        out << *nll << "\n";
    } else {
        out << "absent\n";
    }
    out << "density=" << density << "\n";
    out << "coverage=" << coverage << "\n";
    out << "ssim=" << ssim << "\n";
    out << "psnr_db=" << psnr << "\n";
    out << "mse=" << mse << "\n";
    out << "mae=" << mae << "\n";
    out << "k=" << k << "\n";
    out << "real_count=" << real_count << "\n";
    out << "generated_count=" << generated_count << "\n";
    out << "embed_seeds=";
    for (std::size_t i = 0; i < embed_seeds.size(); ++i) out << (i ? "," : "") << embed_seeds[i];
    out << "\n";
    return out.str();
}

std::string MetricReport::to_json() const
{
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["config_hash"] = config_hash;
    j["nll_nats_per_token"] = nll ? nlohmann::json(*nll) : nlohmann::json(nullptr);
    j["density"] = density;
    j["coverage"] = coverage;
    j["ssim"] = ssim;
    j["psnr_db"] = psnr;
    j["mse"] = mse;
    j["mae"] = mae;
    j["k"] = k;
    j["real_count"] = real_count;
    j["generated_count"] = generated_count;
    j["embed_seeds"] = embed_seeds;
    return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text)
{
    MetricReport r;
    try {
        const auto j = nlohmann::json::parse(text);
        r.schema_version = j.at("schema_version").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        if (!j.at("nll_nats_per_token").is_null()) r.nll = j.at("nll_nats_per_token").get<double>();
        r.density = j.at("density").get<double>();
        r.coverage = j.at("coverage").get<double>();
        r.ssim = j.at("ssim").get<double>();
        r.psnr = j.at("psnr_db").get<double>();
        r.mse = j.at("mse").get<double>();
        r.mae = j.at("mae").get<double>();
        r.k = j.at("k").get<std::int64_t>();
        r.real_count = j.at("real_count").get<std::int64_t>();
        r.generated_count = j.at("generated_count").get<std::int64_t>();
        r.embed_seeds = j.at("embed_seeds").get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("metric report: ") + e.what());
    }
    return r;
}

void MetricReport::write(const std::filesystem::path& path) const
{
    io::write_file_atomic(path, to_text());
    auto json_path = path;
    json_path.replace_extension(".json");
    if (json_path == path) json_path += ".json";
    io::write_file_atomic(json_path, to_json());
}

namespace {

template <typename Item, typename EmbedFn, typename PairFn>
MetricReport evaluate_items(std::span<const Item> real, std::span<const Item> generated, std::int64_t k,
                            std::span<const std::uint64_t> seeds, EmbedFn embed, PairFn pair_metrics)
{
    if (seeds.empty()) throw ConfigError("evaluate: at least one embedder seed is required");
    MetricReport report;
    report.k = k;
    report.real_count = static_cast<std::int64_t>(real.size());
    report.generated_count = static_cast<std::int64_t>(generated.size());
    report.embed_seeds.assign(seeds.begin(), seeds.end());
    for (auto seed : seeds) {
        const auto dc = density_coverage(embed(real, seed, EmbeddingSource::real),
                                         embed(generated, seed, EmbeddingSource::generated), k);
        report.density += dc.density / static_cast<double>(seeds.size());
        report.coverage += dc.coverage / static_cast<double>(seeds.size());
    }
    const auto pairs = std::min(real.size(), generated.size());
    for (std::size_t i = 0; i < pairs; ++i) {
        const auto m = pair_metrics(real[i], generated[i]);
        report.ssim += m[0] / static_cast<double>(pairs);
        report.psnr += m[1] / static_cast<double>(pairs);
        report.mse += m[2] / static_cast<double>(pairs);
        report.mae += m[3] / static_cast<double>(pairs);
    }
    return report;
}

} // namespace

MetricReport evaluate_volumes(std::span<const VolumeGrid> real, std::span<const VolumeGrid> generated, std::int64_t k,
                              std::int64_t embed_dim, std::span<const std::uint64_t> seeds)
{
    return evaluate_items<VolumeGrid>(
        real, generated, k, seeds,
        [&](std::span<const VolumeGrid> items, std::uint64_t seed, EmbeddingSource src) {
            return random_encoder_embed(items, seed, embed_dim, src);
        },
        [](const VolumeGrid& a, const VolumeGrid& b) {
            return std::array<double, 4>{ssim(a, b), psnr(a, b), mse(a, b), mae(a, b)};
        });
}

MetricReport evaluate_views(std::span<const ViewImage> real, std::span<const ViewImage> generated, std::int64_t k,
                            std::int64_t embed_dim, std::span<const std::uint64_t> seeds)
{
    return evaluate_items<ViewImage>(
        real, generated, k, seeds,
        [&](std::span<const ViewImage> items, std::uint64_t seed, EmbeddingSource src) {
            return random_encoder_embed(items, seed, embed_dim, src);
        },
        [](const ViewImage& a, const ViewImage& b) {
            return std::array<double, 4>{ssim(a, b), psnr(a.values, b.values), mse(a.values, b.values),
                                         mae(a.values, b.values)};
        });
}

} // namespace codex3d
