#include "codex3d/pipeline.hpp"

#include "codex3d/errors.hpp"

#include "codex3d/binary_io.hpp"

#include <fstream>

namespace codex3d {

namespace fs = std::filesystem;

namespace {

void say(const ProgressFn& progress, const std::string& message)
{
    if (progress) progress(message);
}

bool dataset_current(const fs::path& dir, const std::string& hash)
{
    if (!fs::exists(dir / "manifest.json")) return false;
    try {
        std::ifstream in(dir / "manifest.json");
        const auto j = nlohmann::json::parse(in);
        return j.value("config_hash", std::string()) == hash;
    } catch (const std::exception&) {
        return false;
    }
}

std::vector<VolumeGrid> volumes_of(const Dataset& d)
{
    std::vector<VolumeGrid> out;
    for (const auto& s : d.samples) out.push_back(s.volume);
    return out;
}

torch::Tensor stack_domain(const Dataset& d, Domain domain)
{
    if (domain == Domain::volumetric) {
        const auto v = volumes_of(d);
        return stack_volumes(v);
    }
    std::vector<ViewImage> views;
    for (const auto& s : d.samples) views.insert(views.end(), s.views.begin(), s.views.end());
    return stack_views(views);
}

TranslationModels load_models(const PipelinePaths& paths)
{
    require_artifact(paths.vqvae(Domain::planar), "train-vqvae --domain 2d");
    require_artifact(paths.vqvae(Domain::volumetric), "train-vqvae --domain 3d");
    require_artifact(paths.denoiser(), "train-diffusion");
    return TranslationModels::load(paths.vqvae(Domain::planar), paths.vqvae(Domain::volumetric), paths.denoiser());
}

} // namespace

std::uint64_t split_seed(std::uint64_t seed, bool heldout) { return mix_seed(seed, heldout ? 2 : 1); }

void require_artifact(const fs::path& path, const std::string& producer)
{
    if (!fs::exists(path)) {
        throw DependencyError("missing artifact " + path.string() + " (produced by `" + producer + "`)");
    }
}

StageStatus run_gen_data(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress)
{
    const auto hash = stage_hash(cfg, Stage::data);
    if (dataset_current(paths.train_data(), hash) && dataset_current(paths.heldout_data(), hash)) {
        say(progress, "gen-data: cached");
        return StageStatus::cached;
    }
    say(progress, "gen-data: " + std::to_string(cfg.data.train_count) + " train, "
                      + std::to_string(cfg.data.heldout_count) + " held-out");
    auto train = generate_dataset(cfg.data.generation, cfg.data.train_count, split_seed(cfg.seed, false));
    train.config_hash = hash;
    save_dataset(train, paths.train_data());
    if (cfg.data.heldout_count > 0) {
        auto held = generate_dataset(cfg.data.generation, cfg.data.heldout_count, split_seed(cfg.seed, true));
        held.config_hash = hash;
        save_dataset(held, paths.heldout_data());
    }
    return StageStatus::ran;
}

StageStatus run_train_vqvae(const ExperimentConfig& cfg, const PipelinePaths& paths, Domain domain,
                            const ProgressFn& progress)
{
    const bool planar = domain == Domain::planar;
    const std::string name = planar ? "vqvae2d" : "vqvae3d";
    const auto& section = planar ? cfg.vqvae2d : cfg.vqvae3d;
    const auto hash = stage_hash(cfg, planar ? Stage::vqvae2d : Stage::vqvae3d);
    const auto out = paths.vqvae(domain);

    std::optional<Checkpoint> existing;
    if (fs::exists(out)) {
        existing = load_checkpoint(out);
        if (existing->config_hash == hash && existing->step >= section.optim.steps) {
            say(progress, name + ": cached");
            return StageStatus::cached;
        }
        if (existing->config_hash != hash) existing.reset();
    }
    require_artifact(paths.train_data() / "manifest.json", "gen-data");
    const auto data = load_dataset(paths.train_data());
    Stage1Trainer trainer(section, name, stack_domain(data, domain), mix_seed(cfg.seed, planar ? 11 : 12));
    if (existing) {
        trainer.restore(*existing);
        say(progress, name + ": resuming at step " + std::to_string(trainer.steps_done()));
    }
    fs::create_directories(paths.log(name).parent_path());
    trainer.train(section.optim.steps, ScalarLog(paths.log(name)), [&](std::int64_t step) {
        save_checkpoint(trainer.checkpoint(hash), out);
        say(progress, name + ": step " + std::to_string(step));
    });
    if (section.optim.steps == 0) save_checkpoint(trainer.checkpoint(hash), out);
    return StageStatus::ran;
}

StageStatus run_train_diffusion(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress)
{
    const auto hash = stage_hash(cfg, Stage::diffusion);
    const auto out = paths.denoiser();
    std::optional<Checkpoint> existing;
    if (fs::exists(out)) {
        existing = load_checkpoint(out);
        if (existing->config_hash == hash && existing->step >= cfg.diffusion.optim.steps) {
            say(progress, "diffusion: cached");
            return StageStatus::cached;
        }
        if (existing->config_hash != hash) existing.reset();
    }
    require_artifact(paths.vqvae(Domain::planar), "train-vqvae --domain 2d");
    require_artifact(paths.vqvae(Domain::volumetric), "train-vqvae --domain 3d");
    require_artifact(paths.train_data() / "manifest.json", "gen-data");
    auto vq2d = load_vqvae(load_checkpoint(paths.vqvae(Domain::planar)));
    auto vq3d = load_vqvae(load_checkpoint(paths.vqvae(Domain::volumetric)));
    const auto data = load_dataset(paths.train_data());
    say(progress, "diffusion: encoding " + std::to_string(data.samples.size()) + " training pairs");
    const auto codes = encode_targets(vq3d, data.samples);
    const auto cond = encode_conditions(vq2d, data.samples);

    // Overfitting monitor: NLL on a fixed slice of the training and held-out pairs at every checkpoint.
    constexpr std::int64_t kMonitorRows = 32;
    torch::Tensor held_codes, held_cond;
    if (fs::exists(paths.heldout_data() / "manifest.json")) {
        const auto held = load_dataset(paths.heldout_data());
        const auto m = std::min<std::size_t>(held.samples.size(), kMonitorRows);
        const std::span<const Sample> head(held.samples.data(), m);
        held_codes = encode_targets(vq3d, head);
        held_cond = encode_conditions(vq2d, head);
    }
    const auto train_rows = std::min<std::int64_t>(codes.size(0), kMonitorRows);

    Stage2Trainer trainer(cfg.diffusion, cfg.layout(), cfg.schedule(), codes, cond, mix_seed(cfg.seed, 13));
    if (existing) {
        trainer.restore(*existing);
        say(progress, "diffusion: resuming at step " + std::to_string(trainer.steps_done()));
    }
    fs::create_directories(paths.log("diffusion").parent_path());
    const ScalarLog log(paths.log("diffusion"));
    trainer.train(cfg.diffusion.optim.steps, log, [&](std::int64_t step) {
        const auto monitor_seed = mix_seed(cfg.seed, 16);
        log.append(step, "train_nll",
                   mean_code_nll(trainer.model(), trainer.schedule(), codes.slice(0, 0, train_rows),
                                 cond.slice(0, 0, train_rows), cfg.diffusion.nll_mc, monitor_seed));
        if (held_codes.defined()) {
            log.append(step, "heldout_nll",
                       mean_code_nll(trainer.model(), trainer.schedule(), held_codes, held_cond, cfg.diffusion.nll_mc,
                                     monitor_seed));
        }
        save_checkpoint(trainer.checkpoint(hash), out);
        say(progress, "diffusion: step " + std::to_string(step));
    });
    if (cfg.diffusion.optim.steps == 0) save_checkpoint(trainer.checkpoint(hash), out);
    return StageStatus::ran;
}

StageStatus run_sample(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress)
{
    const auto hash = stage_hash(cfg, Stage::diffusion);
    if (dataset_current(paths.samples(), hash)) {
        say(progress, "sample: cached");
        return StageStatus::cached;
    }
    auto models = load_models(paths);
    require_artifact(paths.heldout_data() / "manifest.json", "gen-data");
    const auto held = load_dataset(paths.heldout_data());
    std::vector<ConditionSet> conds;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < held.samples.size(); ++i) {
        conds.push_back(condition_set(models.vq2d, held.samples[i].views));
        seeds.push_back(mix_seed(mix_seed(cfg.seed, 14), i));
    }
    say(progress, "sample: " + std::to_string(conds.size()) + " volumes");
    const auto volumes = translate_many(models, conds, cfg.diffusion.sampling, seeds);
    Dataset out;
    out.azimuths_deg = held.azimuths_deg;
    out.config_hash = hash;
    for (std::size_t i = 0; i < volumes.size(); ++i) out.samples.push_back({volumes[i], held.samples[i].views, seeds[i]});
    save_dataset(out, paths.samples());
    return StageStatus::ran;
}

double dataset_nll(TranslationModels& models, const Dataset& data, std::int64_t n_mc, std::uint64_t seed)
{
    if (data.samples.empty()) throw ConfigError("nll: empty dataset");
    TransformerAdapter adapter(models.denoiser.model);
    torch::NoGradGuard guard;
    double total = 0.0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const auto& s = data.samples[i];
        const auto c = encode_volume(models.vq3d, s.volume);
        const auto cond = condition_set(models.vq2d, s.views);
        total += conditional_nll(adapter, c, cond, models.denoiser.schedule, n_mc, mix_seed(seed, i));
    }
    return total / static_cast<double>(data.samples.size());
}

MetricReport run_eval(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress)
{
    require_artifact(paths.samples() / "manifest.json", "sample");
    require_artifact(paths.heldout_data() / "manifest.json", "gen-data");
    auto json_path = paths.report();
    json_path.replace_extension(".json");
    if (fs::exists(json_path)) {
        try {
            auto cached = MetricReport::from_json(io::read_file(json_path));
            if (cached.config_hash == config_hash(cfg)) {
                say(progress, "eval: cached");
                return cached;
            }
        } catch (const SchemaError&) {
        }
    }
    const auto held = load_dataset(paths.heldout_data());
    const auto gen = load_dataset(paths.samples());
    const auto real_v = volumes_of(held);
    const auto gen_v = volumes_of(gen);
    say(progress, "eval: density/coverage over " + std::to_string(cfg.metrics.embed_seeds.size()) + " embedder seeds");
    auto report = evaluate_volumes(real_v, gen_v, cfg.metrics.k, cfg.metrics.embed_dim, cfg.metrics.embed_seeds);
    auto models = load_models(paths);
    report.nll = dataset_nll(models, held, cfg.diffusion.nll_mc, mix_seed(cfg.seed, 15));
    report.config_hash = config_hash(cfg);
    report.write(paths.report());
    return report;
}

MetricReport run_pipeline(const ExperimentConfig& cfg, const PipelinePaths& paths, const ProgressFn& progress)
{
    cfg.validate();
    fs::create_directories(paths.root);
    io::write_file_atomic(paths.root / "config.json", serialize_config(cfg));
    run_gen_data(cfg, paths, progress);
    run_train_vqvae(cfg, paths, Domain::planar, progress);
    run_train_vqvae(cfg, paths, Domain::volumetric, progress);
    run_train_diffusion(cfg, paths, progress);
    run_sample(cfg, paths, progress);
    return run_eval(cfg, paths, progress);
}

MetricReport evaluate_mips(std::span<const VolumeGrid> real, std::span<const VolumeGrid> generated, std::int64_t k,
                           std::int64_t embed_dim, std::span<const std::uint64_t> seeds)
{
    MetricReport total;
    for (int axis = 0; axis < 3; ++axis) {
        std::vector<ViewImage> r, g;
        for (const auto& v : real) r.push_back(mip(v, axis));
        for (const auto& v : generated) g.push_back(mip(v, axis));
        const auto rep = evaluate_views(r, g, k, embed_dim, seeds);
        total.density += rep.density / 3.0;
        total.coverage += rep.coverage / 3.0;
        total.ssim += rep.ssim / 3.0;
        total.psnr += rep.psnr / 3.0;
        total.mse += rep.mse / 3.0;
        total.mae += rep.mae / 3.0;
        total.k = rep.k;
        total.real_count = rep.real_count;
        total.generated_count = rep.generated_count;
        total.embed_seeds = rep.embed_seeds;
    }
    return total;
}

} // namespace codex3d
