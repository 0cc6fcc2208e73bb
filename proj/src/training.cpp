#include "codex3d/training.hpp"

#include "codex3d/errors.hpp"
#include "codex3d/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace codex3d {

using nlohmann::json;

void ScalarLog::append(std::int64_t step, const std::string& metric, double value) const
{
    if (!enabled()) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to log " + path_.string());
    out << step << ' ' << metric << ' ' << std::setprecision(9) << value << '\n';
}

namespace {

std::unique_ptr<torch::optim::Adam> make_adam(torch::nn::Module& module, const OptimHyper& o)
{
    return std::make_unique<torch::optim::Adam>(
        module.parameters(),
        torch::optim::AdamOptions(o.lr).betas({o.beta1, o.beta2}).weight_decay(o.weight_decay));
}

torch::Tensor draw_batch_indices(Rng& rng, std::int64_t n, std::int64_t batch)
{
    auto idx = torch::empty({batch}, torch::kInt64);
    auto* p = idx.data_ptr<std::int64_t>();
    for (std::int64_t b = 0; b < batch; ++b) p[b] = rng.below(n);
    return idx;
}

void clip_and_step(torch::nn::Module& module, torch::optim::Adam& opt, const OptimHyper& o, std::int64_t done)
{
    if (o.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(module.parameters(), o.grad_clip);
    for (auto& group : opt.param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(o.lr_at(done));
    }
    opt.step();
}

template <typename Trainer>
void run_loop(Trainer& trainer, std::int64_t until, std::int64_t log_every, std::int64_t ckpt_every,
              const ScalarLog& log, const CheckpointHook& hook)
{
    double running = 0.0;
    std::int64_t count = 0;
    while (trainer.steps_done() < until) {
        running += trainer.step();
        ++count;
        const auto s = trainer.steps_done();
        if (s % log_every == 0) {
            log.append(s, "loss", running / static_cast<double>(count));
            running = 0.0;
            count = 0;
        }
        if (hook && (s % ckpt_every == 0 || s == until)) hook(s);
    }
}

} // namespace

Stage1Trainer::Stage1Trainer(const VqSection& section, std::string component, torch::Tensor data, std::uint64_t seed)
    : section_(section), component_(std::move(component)), data_(std::move(data)), rng_(mix_seed(seed, 101))
{
    section_.model.validate();
    section_.optim.validate(component_);
    if (data_.size(0) < 1) throw ConfigError(component_ + ": empty training set");
    torch::manual_seed(mix_seed(seed, 100));
    model_ = VQVAE(section_.model);
    opt_ = make_adam(*model_, section_.optim);
    if (section_.dead_code_patience > 0) reviver_.emplace(section_.model.codebook_K, section_.dead_code_patience);
}

double Stage1Trainer::step()
{
    model_->train();
    const auto idx = draw_batch_indices(rng_, data_.size(0), section_.optim.batch_size);
    const auto x = data_.index_select(0, idx);
    auto out = model_->forward(x);
    auto loss = out.loss.total;
    if (extra_loss) loss = loss + extra_loss(x, out.recon);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
        throw NumericalError(component_ + ": loss diverged at step " + std::to_string(step_ + 1));
    }
    opt_->zero_grad();
    loss.backward();
    clip_and_step(*model_, *opt_, section_.optim, step_);
    if (reviver_) reviver_->step(model_->codebook(), out.quant.indices, out.encodings.detach(), rng_);
    last_rec_ = out.loss.rec.item<double>();
    ++step_;
    return value;
}

void Stage1Trainer::train(std::int64_t until, const ScalarLog& log, const CheckpointHook& hook)
{
    run_loop(*this, until, section_.optim.log_every, section_.optim.checkpoint_every, log, hook);
}

Checkpoint Stage1Trainer::checkpoint(const std::string& config_hash) const
{
    Checkpoint c;
    c.component = component_;
    c.config = {{"model", to_json(section_.model)},
                {"dead_code_patience", section_.dead_code_patience},
                {"optim",
                 {{"lr", section_.optim.lr},
                  {"batch_size", section_.optim.batch_size},
                  {"grad_clip", section_.optim.grad_clip}}}};
    c.config_hash = config_hash;
    c.step = step_;
    c.rng_state = rng_.state();
    c.tensors = module_tensors(*model_);
    c.extra["adam_steps"] = adam_state(*opt_, *model_, c.tensors);
    if (reviver_) c.extra["idle_steps"] = reviver_->idle_steps();
    return c;
}

void Stage1Trainer::restore(const Checkpoint& ckpt)
{
    if (ckpt.component != component_) {
        throw SchemaError("checkpoint component " + ckpt.component + " does not match " + component_);
    }
    if (autoencoder_from_json(ckpt.config.at("model"), component_ + ".model").latent_layout()
            != section_.model.latent_layout()) {
        throw SchemaError(component_ + ": checkpoint layout differs from the configured model");
    }
    load_module_tensors(*model_, ckpt);
    if (ckpt.extra.contains("adam_steps")) load_adam_state(*opt_, *model_, ckpt, ckpt.extra["adam_steps"]);
    if (reviver_ && ckpt.extra.contains("idle_steps")) {
        reviver_->set_idle_steps(ckpt.extra["idle_steps"].get<std::vector<std::int64_t>>());
    }
    rng_.set_state(ckpt.rng_state);
    step_ = ckpt.step;
}

Stage2Trainer::Stage2Trainer(const DiffusionSection& section, const SequenceLayout& layout,
                             const DiffusionSchedule& sched, torch::Tensor codes, torch::Tensor cond,
                             std::uint64_t seed)
    : section_(section), layout_(layout), sched_(sched), codes_(std::move(codes)), cond_(std::move(cond)),
      rng_(mix_seed(seed, 201))
{
    layout_.validate();
    sched_.validate();
    section_.optim.validate("diffusion");
    if (codes_.dim() != 2 || codes_.size(1) != layout_.target_len) {
        throw ShapeError("Stage2Trainer: target codes must be N x " + std::to_string(layout_.target_len));
    }
    if (cond_.dim() != 2 || cond_.size(1) != layout_.cond_len() || cond_.size(0) != codes_.size(0)) {
        throw ShapeError("Stage2Trainer: condition codes must be N x " + std::to_string(layout_.cond_len()));
    }
    if (codes_.size(0) < 1) throw ConfigError("diffusion: empty training set");
    torch::manual_seed(mix_seed(seed, 200));
    model_ = TransformerDenoiser(section_.denoiser, layout_);
    adapter_ = std::make_unique<TransformerAdapter>(model_);
    opt_ = make_adam(*model_, section_.optim);
}

double Stage2Trainer::step()
{
    model_->train();
    const auto idx = draw_batch_indices(rng_, codes_.size(0), section_.optim.batch_size);
    const auto batch = elbo_objective(*adapter_, codes_.index_select(0, idx), cond_.index_select(0, idx), sched_, rng_);
    const auto loss = batch.loss.mean() / static_cast<double>(layout_.target_len);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw NumericalError("diffusion: loss diverged at step " + std::to_string(step_ + 1));
    opt_->zero_grad();
    loss.backward();
    clip_and_step(*model_, *opt_, section_.optim, step_);
    ++step_;
    return value;
}

void Stage2Trainer::train(std::int64_t until, const ScalarLog& log, const CheckpointHook& hook)
{
    run_loop(*this, until, section_.optim.log_every, section_.optim.checkpoint_every, log, hook);
}

Checkpoint Stage2Trainer::checkpoint(const std::string& config_hash) const
{
    Checkpoint c;
    c.component = "denoiser";
    c.config = {{"T", sched_.T},
                {"K", sched_.K},
                {"denoiser", to_json(section_.denoiser)},
                {"layout",
                 {{"view_count", layout_.view_count},
                  {"view_tokens", layout_.view_tokens},
                  {"target_len", layout_.target_len}}},
                {"optim",
                 {{"lr", section_.optim.lr},
                  {"batch_size", section_.optim.batch_size},
                  {"grad_clip", section_.optim.grad_clip}}}};
    c.config_hash = config_hash;
    c.step = step_;
    c.rng_state = rng_.state();
    c.tensors = module_tensors(*model_);
    c.extra["adam_steps"] = adam_state(*opt_, *model_, c.tensors);
    return c;
}

void Stage2Trainer::restore(const Checkpoint& ckpt)
{
    if (ckpt.component != "denoiser") throw SchemaError("checkpoint component " + ckpt.component + " is not denoiser");
    const auto bundle_layout = load_denoiser(ckpt).layout;
    if (!(bundle_layout == layout_)) throw SchemaError("denoiser checkpoint layout differs from the configured layout");
    load_module_tensors(*model_, ckpt);
    if (ckpt.extra.contains("adam_steps")) load_adam_state(*opt_, *model_, ckpt, ckpt.extra["adam_steps"]);
    rng_.set_state(ckpt.rng_state);
    step_ = ckpt.step;
}

VQVAE load_vqvae(const Checkpoint& ckpt)
{
    if (ckpt.component != "vqvae2d" && ckpt.component != "vqvae3d") {
        throw SchemaError("checkpoint component " + ckpt.component + " is not a VQ-VAE");
    }
    VQVAE model(autoencoder_from_json(ckpt.config.at("model"), ckpt.component + ".model"));
    load_module_tensors(*model, ckpt);
    model->eval();
    return model;
}

DenoiserBundle load_denoiser(const Checkpoint& ckpt)
{
    if (ckpt.component != "denoiser") throw SchemaError("checkpoint component " + ckpt.component + " is not denoiser");
    DenoiserBundle b;
    try {
        const auto& l = ckpt.config.at("layout");
        b.layout.view_count = l.at("view_count").get<std::int64_t>();
        b.layout.view_tokens = l.at("view_tokens").get<std::int64_t>();
        b.layout.target_len = l.at("target_len").get<std::int64_t>();
        b.schedule.T = ckpt.config.at("T").get<std::int64_t>();
        b.schedule.K = ckpt.config.at("K").get<std::int64_t>();
    } catch (const json::exception& e) {
        throw SchemaError(std::string("denoiser checkpoint: ") + e.what());
    }
    b.layout.validate();
    b.schedule.validate();
    b.model = TransformerDenoiser(denoiser_from_json(ckpt.config.at("denoiser"), "denoiser"), b.layout);
    load_module_tensors(*b.model, ckpt);
    b.model->eval();
    return b;
}

std::vector<std::int64_t> DenoiserBundle::target_shape() const
{
    const auto side = static_cast<std::int64_t>(std::llround(std::cbrt(static_cast<double>(layout.target_len))));
    if (side * side * side != layout.target_len) throw SchemaError("denoiser layout: target length is not a cube");
    return {side, side, side};
}

void check_compatible(const VQVAE& vq2d, const VQVAE& vq3d, const DenoiserBundle& d)
{
    const auto& c2 = vq2d->config();
    const auto& c3 = vq3d->config();
    const auto& dc = d.model->config();
    if (c2.domain != Domain::planar || c3.domain != Domain::volumetric) {
        throw SchemaError("incompatible checkpoints: expected a 2d and a 3d VQ-VAE");
    }
    if (dc.cond_codes != c2.codebook_K) {
        throw SchemaError("incompatible checkpoints: denoiser condition vocabulary " + std::to_string(dc.cond_codes)
                          + " != 2D codebook size " + std::to_string(c2.codebook_K));
    }
    if (dc.target_codes != c3.codebook_K || d.schedule.K != c3.codebook_K) {
        throw SchemaError("incompatible checkpoints: denoiser target vocabulary " + std::to_string(dc.target_codes)
                          + " != 3D codebook size " + std::to_string(c3.codebook_K));
    }
    if (d.layout.view_tokens != c2.latent_count() || d.layout.target_len != c3.latent_count()) {
        throw SchemaError("incompatible checkpoints: denoiser layout does not match the VQ latent layouts");
    }
}

torch::Tensor encode_targets(VQVAE& vq3d, std::span<const Sample> samples)
{
    const auto L = vq3d->config().latent_count();
    auto out = torch::empty({static_cast<std::int64_t>(samples.size()), L}, torch::kInt64);
    constexpr std::size_t kChunk = 16;
    std::vector<VolumeGrid> chunk;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        chunk.clear();
        for (std::size_t i = start; i < std::min(samples.size(), start + kChunk); ++i) chunk.push_back(samples[i].volume);
        const auto grids = vq3d->encode(stack_volumes(chunk));
        for (std::size_t i = 0; i < grids.size(); ++i) {
            std::copy(grids[i].indices.begin(), grids[i].indices.end(),
                      out[static_cast<std::int64_t>(start + i)].data_ptr<std::int64_t>());
        }
    }
    return out;
}

torch::Tensor encode_conditions(VQVAE& vq2d, std::span<const Sample> samples)
{
    if (samples.empty()) return torch::empty({0, 0}, torch::kInt64);
    const auto n_views = static_cast<std::int64_t>(samples.front().views.size());
    const auto L = vq2d->config().latent_count();
    auto out = torch::empty({static_cast<std::int64_t>(samples.size()), n_views * L}, torch::kInt64);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (static_cast<std::int64_t>(samples[i].views.size()) != n_views) {
            throw ShapeError("encode_conditions: samples differ in view count");
        }
        out[static_cast<std::int64_t>(i)].copy_(condition_set(vq2d, samples[i].views).flatten().squeeze(0));
    }
    return out;
}

ConditionSet condition_set(VQVAE& vq2d, std::span<const ViewImage> views)
{
    if (views.empty()) throw ShapeError("condition_set: no views");
    ConditionSet c;
    c.view_codes = vq2d->encode(stack_views(views));
    return c;
}

CodeGrid code_grid_from_row(const torch::Tensor& row, const std::vector<std::int64_t>& shape, std::int64_t K)
{
    const auto flat = row.reshape({-1}).to(torch::kInt64).contiguous();
    CodeGrid g;
    g.shape = shape;
    g.K = K;
    g.indices.assign(flat.data_ptr<std::int64_t>(), flat.data_ptr<std::int64_t>() + flat.numel());
    g.validate();
    return g;
}

ConditionSet condition_from_row(const torch::Tensor& row, const SequenceLayout& layout,
                                const std::vector<std::int64_t>& view_shape, std::int64_t K2)
{
    const auto flat = row.reshape({-1});
    if (flat.numel() != layout.cond_len()) throw ShapeError("condition_from_row: length does not match the layout");
    ConditionSet c;
    for (std::int64_t v = 0; v < layout.view_count; ++v) {
        c.view_codes.push_back(
            code_grid_from_row(flat.slice(0, v * layout.view_tokens, (v + 1) * layout.view_tokens), view_shape, K2));
    }
    return c;
}

double mean_code_nll(TransformerDenoiser& model, const DiffusionSchedule& sched, const torch::Tensor& codes,
                     const torch::Tensor& cond, std::int64_t n_mc, std::uint64_t seed)
{
    if (n_mc < 1) throw ConfigError("mean_code_nll: n_mc must be >= 1");
    if (codes.size(0) < 1 || codes.size(0) != cond.size(0)) {
        throw ShapeError("mean_code_nll: codes and conditions must have the same nonzero row count");
    }
    torch::NoGradGuard guard;
    const bool was_training = model->is_training();
    model->eval();
    TransformerAdapter adapter(model);
    Rng rng(seed);
    const auto n = codes.size(0);
    const auto rows = torch::arange(n, torch::kInt64).repeat_interleave(n_mc);
    const auto L = static_cast<double>(codes.size(1));
    constexpr std::int64_t kChunk = 32;
    double total = 0.0;
    for (std::int64_t start = 0; start < rows.size(0); start += kChunk) {
        const auto idx = rows.slice(0, start, std::min(start + kChunk, rows.size(0)));
        const auto batch = elbo_objective(adapter, codes.index_select(0, idx), cond.index_select(0, idx), sched, rng);
        const auto nll = batch.nll_sum.to(torch::kFloat64);
        for (std::int64_t b = 0; b < idx.size(0); ++b) {
            total += static_cast<double>(sched.T) / static_cast<double>(batch.t[b]) * nll[b].item<double>() / L;
        }
    }
    if (was_training) model->train();
    return total / static_cast<double>(rows.size(0));
}

double reconstruction_psnr(VQVAE& model, const torch::Tensor& data)
{
    torch::NoGradGuard guard;
    model->eval();
    double total = 0.0;
    constexpr std::int64_t kChunk = 16;
    for (std::int64_t start = 0; start < data.size(0); start += kChunk) {
        const auto x = data.slice(0, start, std::min(data.size(0), start + kChunk));
        const auto recon = model->forward(x).recon;
        for (std::int64_t i = 0; i < x.size(0); ++i) {
            const auto a = x[i].contiguous();
            const auto b = recon[i].contiguous();
            total += psnr({a.data_ptr<float>(), static_cast<std::size_t>(a.numel())},
                          {b.data_ptr<float>(), static_cast<std::size_t>(b.numel())});
        }
    }
    return total / static_cast<double>(data.size(0));
}

} // namespace codex3d
