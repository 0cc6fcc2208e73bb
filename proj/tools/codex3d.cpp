// codex3d: command-line front end for data generation, training, sampling and evaluation.

#include "codex3d/binary_io.hpp"
#include "codex3d/config.hpp"
#include "codex3d/errors.hpp"
#include "codex3d/pipeline.hpp"
#include "codex3d/translation.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace codex3d;

namespace {

void progress(const std::string& message) { std::cerr << "[codex3d] " << message << '\n'; }

void check_device()
{
    const char* dev = std::getenv("CODEX3D_DEVICE");
    if (dev == nullptr || std::string(dev).empty() || std::string(dev) == "cpu") return;
    throw DependencyError(std::string("CODEX3D_DEVICE=") + dev + ": only the cpu device is supported by this build");
}

std::optional<std::uint64_t> env_seed()
{
    const char* s = std::getenv("CODEX3D_SEED");
    if (s == nullptr || *s == '\0') return std::nullopt;
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != std::string(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(std::string("CODEX3D_SEED: not an unsigned integer: ") + s);
    }
}

ExperimentConfig config_or_defaults(const std::string& path)
{
    auto cfg = path.empty() ? ExperimentConfig::defaults() : load_config(path);
    if (auto s = env_seed()) cfg.seed = *s;
    cfg.validate();
    return cfg;
}

ViewImage read_view(const fs::path& path)
{
    ViewImage v;
    if (path.extension() == ".pgm") {
        v.values = io::read_pgm(path, v.height, v.width);
        return v;
    }
    std::vector<std::int64_t> shape;
    v.values = io::read_array(path, shape);
    if (shape.size() != 2) throw ShapeError(path.string() + ": expected a 2D array");
    v.height = shape[0];
    v.width = shape[1];
    return v;
}

void write_volume(const fs::path& path, const VolumeGrid& v)
{
    io::write_array(path, std::vector<std::int64_t>(v.shape.begin(), v.shape.end()), v.values);
}

void write_mips(const fs::path& out, const VolumeGrid& v)
{
    for (int axis = 0; axis < 3; ++axis) {
        auto p = out;
        p.replace_extension("");
        p += "_mip" + std::to_string(axis) + ".pgm";
        const auto m = mip(v, axis);
        io::write_pgm(p, m.height, m.width, m.values);
    }
}

std::vector<VolumeGrid> dataset_volumes(const fs::path& dir)
{
    const auto d = load_dataset(dir);
    std::vector<VolumeGrid> out;
    for (const auto& s : d.samples) out.push_back(s.volume);
    return out;
}

struct SamplingArgs {
    std::int64_t steps = 0;
    double temperature = 0.0;
    std::string order;

    SamplerOptions resolve(const SamplerOptions& defaults) const
    {
        auto o = defaults;
        if (steps > 0) o.steps = steps;
        if (temperature > 0.0) o.temperature = temperature;
        if (!order.empty()) o.order = parse_reveal_order(order);
        return o;
    }
};

void add_sampling(CLI::App* cmd, SamplingArgs& a)
{
    cmd->add_option("--steps", a.steps, "Reverse steps (default from config)");
    cmd->add_option("--temperature", a.temperature, "Sampling temperature (default from config)");
    cmd->add_option("--order", a.order, "Reveal order: random, confidence, left_to_right");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"codex3d: two-stage 2D-to-3D translation with vector-quantized codes and absorbing diffusion"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    auto add_config = [&](CLI::App* cmd, bool required) {
        auto* opt = cmd->add_option("--config", config_path, "Experiment config (JSON)");
        if (required) opt->required();
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a phantom dataset with paired projections");
    std::string gen_out, gen_split = "train";
    std::int64_t gen_count = 0;
    gen->add_option("--config,--spec", config_path, "Experiment config (JSON); its data section is the phantom spec");
    gen->add_option("--out", gen_out, "Output dataset directory")->required();
    gen->add_option("--seed", seed, "Base seed (default from config)");
    gen->add_option("--split", gen_split, "train or heldout")->check(CLI::IsMember({"train", "heldout"}));
    gen->add_option("--count", gen_count, "Override the split size");

    // train-vqvae
    auto* tvq = app.add_subcommand("train-vqvae", "Train a 2D or 3D VQ-VAE");
    std::string tvq_domain, tvq_data, tvq_out, tvq_log;
    add_config(tvq, false);
    tvq->add_option("--domain", tvq_domain, "2d or 3d")->required()->check(CLI::IsMember({"2d", "3d"}));
    tvq->add_option("--data", tvq_data, "Training dataset directory")->required();
    tvq->add_option("--out", tvq_out, "Checkpoint path")->required();
    tvq->add_option("--log", tvq_log, "Scalar log path");

    // train-diffusion
    auto* tdf = app.add_subcommand("train-diffusion", "Train the conditional denoiser on VQ codes");
    std::string tdf_data, tdf_vq2d, tdf_vq3d, tdf_out, tdf_log;
    add_config(tdf, false);
    tdf->add_option("--data", tdf_data, "Training dataset directory")->required();
    tdf->add_option("--vq2d", tdf_vq2d, "2D VQ-VAE checkpoint")->required();
    tdf->add_option("--vq3d", tdf_vq3d, "3D VQ-VAE checkpoint")->required();
    tdf->add_option("--out", tdf_out, "Checkpoint path")->required();
    tdf->add_option("--log", tdf_log, "Scalar log path");

    // sample / translate share their inputs
    std::string ckpt, vq2d, vq3d, out_path;
    std::vector<std::string> view_paths;
    SamplingArgs sampling;
    bool emit_mips = false;
    std::int64_t n_samples = 1;
    auto add_models = [&](CLI::App* cmd) {
        cmd->add_option("--ckpt", ckpt, "Denoiser checkpoint")->required();
        cmd->add_option("--vq2d", vq2d, "2D VQ-VAE checkpoint")->required();
    };

    auto* smp = app.add_subcommand("sample", "Sample 3D code grids conditioned on views");
    add_config(smp, false);
    add_models(smp);
    smp->add_option("--views", view_paths, "View images (.pgm or .arr), in azimuth order")->required();
    smp->add_option("--seed", seed, "Sampling seed");
    smp->add_option("--num", n_samples, "Samples to draw (seeds seed, seed+1, ...)");
    smp->add_option("--out", out_path, "Output array of code indices (num x code shape)")->required();
    add_sampling(smp, sampling);

    auto* trn = app.add_subcommand("translate", "Translate views into a volume");
    add_config(trn, false);
    add_models(trn);
    trn->add_option("--vq3d", vq3d, "3D VQ-VAE checkpoint")->required();
    trn->add_option("--views", view_paths, "View images (.pgm or .arr), in azimuth order")->required();
    trn->add_option("--seed", seed, "Sampling seed");
    trn->add_option("--out", out_path, "Output volume array")->required();
    trn->add_flag("--emit-mips", emit_mips, "Also write the three axis MIPs as PGM images");
    add_sampling(trn, sampling);

    // eval / eval-mip
    std::string real_dir, gen_dir, report_path;
    std::int64_t k = 0, embed_dim = 0;
    std::vector<std::uint64_t> embed_seeds;
    auto add_eval = [&](CLI::App* cmd) {
        add_config(cmd, false);
        cmd->add_option("--real", real_dir, "Real dataset directory")->required();
        cmd->add_option("--generated", gen_dir, "Generated dataset directory")->required();
        cmd->add_option("--report", report_path, "Report path (key=value; a .json copy is written alongside)")
            ->required();
        cmd->add_option("--k", k, "Neighbourhood size");
        cmd->add_option("--embed-dim", embed_dim, "Embedding dimension");
        cmd->add_option("--embed-seeds", embed_seeds, "Random-encoder seeds");
    };
    auto* evl = app.add_subcommand("eval", "Density/coverage and distortion metrics on volumes");
    add_eval(evl);
    auto* evm = app.add_subcommand("eval-mip", "The same metrics on maximum intensity projections");
    add_eval(evm);

    // nll
    auto* nll = app.add_subcommand("nll", "Conditional NLL bound in nats per 3D token");
    std::string nll_data;
    std::int64_t mc = 0;
    add_config(nll, false);
    nll->add_option("--ckpt", ckpt, "Denoiser checkpoint")->required();
    nll->add_option("--vq2d", vq2d, "2D VQ-VAE checkpoint")->required();
    nll->add_option("--vq3d", vq3d, "3D VQ-VAE checkpoint")->required();
    nll->add_option("--data", nll_data, "Dataset directory")->required();
    nll->add_option("--mc", mc, "Monte Carlo draws per example");
    nll->add_option("--seed", seed, "Estimator seed");

    // config
    auto* cfgcmd = app.add_subcommand("config", "Print the effective config (defaults, file and CODEX3D_SEED merged)");
    std::string cfg_out;
    add_config(cfgcmd, false);
    cfgcmd->add_option("--out", cfg_out, "Write to this path instead of stdout");

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Run every stage, reusing cached outputs");
    std::string pipe_out, pipe_stage = "all";
    add_config(pipe, true);
    pipe->add_option("--out", pipe_out, "Experiment directory")->required();
    pipe->add_option("--stage", pipe_stage, "Single stage to run")
        ->check(CLI::IsMember({"all", "gen-data", "train-vqvae-2d", "train-vqvae-3d", "train-diffusion", "sample",
                               "eval"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ExitCode::config);
    }

    try {
        check_device();
        const auto cfg = config_or_defaults(config_path);
        auto* active = app.get_subcommands().front();
        const bool seed_given = active->get_option_no_throw("--seed") != nullptr && active->count("--seed") > 0;
        if (!seed_given) seed = cfg.seed;

        if (gen->parsed()) {
            const bool heldout = gen_split == "heldout";
            const auto count = gen_count > 0 ? gen_count : (heldout ? cfg.data.heldout_count : cfg.data.train_count);
            auto d = generate_dataset(cfg.data.generation, count, split_seed(seed, heldout));
            auto seeded = cfg;
            seeded.seed = seed;
            d.config_hash = stage_hash(seeded, Stage::data);
            save_dataset(d, gen_out);
            progress("wrote " + std::to_string(count) + " samples to " + gen_out);
        } else if (tvq->parsed()) {
            const auto domain = parse_domain(tvq_domain);
            const bool planar = domain == Domain::planar;
            const auto& section = planar ? cfg.vqvae2d : cfg.vqvae3d;
            const auto hash = stage_hash(cfg, planar ? Stage::vqvae2d : Stage::vqvae3d);
            const auto data = load_dataset(tvq_data);
            torch::Tensor x;
            if (planar) {
                std::vector<ViewImage> views;
                for (const auto& s : data.samples) views.insert(views.end(), s.views.begin(), s.views.end());
                x = stack_views(views);
            } else {
                std::vector<VolumeGrid> vols;
                for (const auto& s : data.samples) vols.push_back(s.volume);
                x = stack_volumes(vols);
            }
            Stage1Trainer trainer(section, planar ? "vqvae2d" : "vqvae3d", x, mix_seed(cfg.seed, planar ? 11 : 12));
            if (fs::exists(tvq_out)) {
                const auto existing = load_checkpoint(tvq_out);
                if (existing.config_hash == hash) {
                    trainer.restore(existing);
                    progress("resuming at step " + std::to_string(trainer.steps_done()));
                }
            }
            trainer.train(section.optim.steps, ScalarLog(tvq_log), [&](std::int64_t step) {
                save_checkpoint(trainer.checkpoint(hash), tvq_out);
                progress("step " + std::to_string(step));
            });
            save_checkpoint(trainer.checkpoint(hash), tvq_out);
        } else if (tdf->parsed()) {
            auto m2 = load_vqvae(load_checkpoint(tdf_vq2d));
            auto m3 = load_vqvae(load_checkpoint(tdf_vq3d));
            const auto data = load_dataset(tdf_data);
            auto dcfg = cfg;
            if (dcfg.diffusion.denoiser.cond_codes != m2->config().codebook_K
                || dcfg.diffusion.denoiser.target_codes != m3->config().codebook_K) {
                throw SchemaError("checkpoint codebooks do not match the config's denoiser vocabularies");
            }
            const auto hash = stage_hash(dcfg, Stage::diffusion);
            Stage2Trainer trainer(dcfg.diffusion, dcfg.layout(), dcfg.schedule(), encode_targets(m3, data.samples),
                                  encode_conditions(m2, data.samples), mix_seed(cfg.seed, 13));
            if (fs::exists(tdf_out)) {
                const auto existing = load_checkpoint(tdf_out);
                if (existing.config_hash == hash) {
                    trainer.restore(existing);
                    progress("resuming at step " + std::to_string(trainer.steps_done()));
                }
            }
            trainer.train(dcfg.diffusion.optim.steps, ScalarLog(tdf_log), [&](std::int64_t step) {
                save_checkpoint(trainer.checkpoint(hash), tdf_out);
                progress("step " + std::to_string(step));
            });
            save_checkpoint(trainer.checkpoint(hash), tdf_out);
        } else if (smp->parsed()) {
            auto m2 = load_vqvae(load_checkpoint(vq2d));
            auto den = load_denoiser(load_checkpoint(ckpt));
            std::vector<ViewImage> views;
            for (const auto& p : view_paths) views.push_back(read_view(p));
            if (static_cast<std::int64_t>(views.size()) != den.layout.view_count) {
                throw ShapeError("sample: expected " + std::to_string(den.layout.view_count) + " views");
            }
            const auto cond = condition_set(m2, views);
            if (cond.view_codes.front().K != den.model->config().cond_codes) {
                throw SchemaError("sample: 2D codebook does not match the denoiser");
            }
            std::vector<ConditionSet> conds(static_cast<std::size_t>(n_samples), cond);
            std::vector<std::uint64_t> seeds;
            for (std::int64_t i = 0; i < n_samples; ++i) seeds.push_back(seed + static_cast<std::uint64_t>(i));
            TransformerAdapter adapter(den.model);
            torch::NoGradGuard guard;
            std::vector<std::int64_t> shape{n_samples};
            const auto target_shape = den.target_shape();
            shape.insert(shape.end(), target_shape.begin(), target_shape.end());
            const auto grids = sample(adapter, conds, den.schedule, target_shape, sampling.resolve(cfg.diffusion.sampling),
                                      seeds);
            std::vector<float> values;
            for (const auto& g : grids) {
                for (auto i : g.indices) values.push_back(static_cast<float>(i));
            }
            io::write_array(out_path, shape, values);
            progress("wrote " + std::to_string(n_samples) + " code grid(s) to " + out_path);
        } else if (trn->parsed()) {
            auto models = TranslationModels::load(vq2d, vq3d, ckpt);
            std::vector<ViewImage> views;
            for (const auto& p : view_paths) views.push_back(read_view(p));
            const std::uint64_t seeds[1] = {seed};
            const auto vols = translate(models, views, sampling.resolve(cfg.diffusion.sampling), seeds);
            write_volume(out_path, vols.front());
            if (emit_mips) write_mips(out_path, vols.front());
            progress("wrote " + out_path);
        } else if (evl->parsed() || evm->parsed()) {
            const auto real = dataset_volumes(real_dir);
            const auto generated = dataset_volumes(gen_dir);
            const auto kk = k > 0 ? k : cfg.metrics.k;
            const auto dim = embed_dim > 0 ? embed_dim : cfg.metrics.embed_dim;
            const auto seeds = embed_seeds.empty() ? cfg.metrics.embed_seeds : embed_seeds;
            auto report = evl->parsed() ? evaluate_volumes(real, generated, kk, dim, seeds)
                                        : evaluate_mips(real, generated, kk, dim, seeds);
            report.config_hash = config_hash(cfg);
            report.write(report_path);
            std::cout << report.to_text();
        } else if (nll->parsed()) {
            auto models = TranslationModels::load(vq2d, vq3d, ckpt);
            const auto data = load_dataset(nll_data);
            const auto value = dataset_nll(models, data, mc > 0 ? mc : cfg.diffusion.nll_mc, seed);
            std::cout << "nll_nats_per_token=" << value << '\n';
        } else if (cfgcmd->parsed()) {
            if (cfg_out.empty()) {
                std::cout << serialize_config(cfg);
            } else {
                io::write_file_atomic(cfg_out, serialize_config(cfg));
            }
        } else if (pipe->parsed()) {
            const PipelinePaths paths{pipe_out};
            fs::create_directories(paths.root);
            io::write_file_atomic(paths.root / "config.json", serialize_config(cfg));
            if (pipe_stage == "all") {
                std::cout << run_pipeline(cfg, paths, progress).to_text();
            } else if (pipe_stage == "gen-data") {
                run_gen_data(cfg, paths, progress);
            } else if (pipe_stage == "train-vqvae-2d") {
                run_train_vqvae(cfg, paths, Domain::planar, progress);
            } else if (pipe_stage == "train-vqvae-3d") {
                run_train_vqvae(cfg, paths, Domain::volumetric, progress);
            } else if (pipe_stage == "train-diffusion") {
                run_train_diffusion(cfg, paths, progress);
            } else if (pipe_stage == "sample") {
                run_sample(cfg, paths, progress);
            } else {
                std::cout << run_eval(cfg, paths, progress).to_text();
            }
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::failure);
    }
    return 0;
}
