#include "codex3d/binary_io.hpp"
#include "codex3d/errors.hpp"
#include "codex3d/pipeline.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>

using namespace codex3d;
namespace fs = std::filesystem;

namespace {

const char* kSmokeConfig = R"({
  "data": {"phantom": {"grid_size": 16}, "train_count": 48, "heldout_count": 12, "max_shift_vox": 1.0},
  "vqvae2d": {"model": {"domain": "2d", "input_size": 16, "channels": 16, "codebook_K": 64, "codebook_D": 16},
              "optim": {"steps": 20, "checkpoint_every": 10, "log_every": 5, "lr": 1e-3}},
  "vqvae3d": {"model": {"domain": "3d", "input_size": 16, "channels": 8, "codebook_K": 64, "codebook_D": 16},
              "optim": {"steps": 20, "checkpoint_every": 10, "log_every": 5, "lr": 1e-3}},
  "diffusion": {"T": 64, "denoiser": {"layers": 1, "heads": 2, "model_dim": 32, "ffn_dim": 64},
                "sampling": {"steps": 8}, "optim": {"steps": 20, "checkpoint_every": 10, "log_every": 5}, "nll_mc": 2},
  "metrics": {"k": 3, "embed_dim": 32, "embed_seeds": [0, 1]},
  "seed": 7
})";

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream out(p);
    out << text;
}

int run_cli(const std::string& args, const std::string& env = {})
{
    const std::string cmd = env + (env.empty() ? "" : " ") + CODEX3D_CLI_PATH + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

torch::Tensor small_volumes(std::int64_t n, std::uint64_t seed)
{
    GenerationOptions o;
    o.spec.grid_size = 16;
    const auto d = generate_dataset(o, n, seed);
    std::vector<VolumeGrid> v;
    for (const auto& s : d.samples) v.push_back(s.volume);
    return stack_volumes(v);
}

VqSection small_vq()
{
    VqSection s;
    s.model.domain = Domain::volumetric;
    s.model.input_size = 16;
    s.model.channels = 8;
    s.model.codebook_K = 32;
    s.model.codebook_D = 8;
    s.optim.batch_size = 4;
    s.optim.lr = 1e-3;
    return s;
}

} // namespace

TEST_CASE("config round trip is a fixed point")
{
    const auto cfg = parse_config(kSmokeConfig);
    const auto text = serialize_config(cfg);
    CHECK(serialize_config(parse_config(text)) == text);
    CHECK(config_hash(parse_config(text)) == config_hash(cfg));
    const auto defaults = ExperimentConfig::defaults();
    CHECK(serialize_config(parse_config(serialize_config(defaults))) == serialize_config(defaults));
    CHECK(config_hash(cfg).size() == 16);
    CHECK(config_hash(cfg) != config_hash(defaults));
}

TEST_CASE("config parsing fails closed")
{
    CHECK_THROWS_AS(parse_config(R"({"sed": 3})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"vqvae3d": {"optim": {"learning_rate": 1}}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"seed": "seven"})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"diffusion": {"sampling": {"order": "spiral"}}})"), ConfigError);
    CHECK_THROWS_AS(parse_config("{"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"diffusion": {"denoiser": {"target_codes": 7}}})"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/codex3d.json"), ConfigError);
    try {
        parse_config(R"({"metrics": {"kk": 3}})");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("metrics.kk") != std::string::npos);
    }
}

TEST_CASE("stage hashes track only their sections")
{
    auto a = parse_config(kSmokeConfig);
    auto b = a;
    b.metrics.k = 4;
    CHECK(stage_hash(a, Stage::vqvae3d) == stage_hash(b, Stage::vqvae3d));
    CHECK(config_hash(a) != config_hash(b));
    b.vqvae2d.optim.lr = 5e-4;
    CHECK(stage_hash(a, Stage::vqvae3d) == stage_hash(b, Stage::vqvae3d));
    CHECK(stage_hash(a, Stage::vqvae2d) != stage_hash(b, Stage::vqvae2d));
    CHECK(stage_hash(a, Stage::diffusion) != stage_hash(b, Stage::diffusion));
}

TEST_CASE("checkpoint save, load, save is byte-identical")
{
    torch::manual_seed(0);
    Stage1Trainer trainer(small_vq(), "vqvae3d", small_volumes(6, 1), 3);
    trainer.train(3);
    const auto dir = testutil::scratch_dir("ckpt");
    save_checkpoint(trainer.checkpoint("abc"), dir / "a.ckpt");
    const auto loaded = load_checkpoint(dir / "a.ckpt");
    CHECK(loaded.component == "vqvae3d");
    CHECK(loaded.step == 3);
    CHECK(loaded.config_hash == "abc");
    save_checkpoint(loaded, dir / "b.ckpt");
    CHECK(io::read_file(dir / "a.ckpt") == io::read_file(dir / "b.ckpt"));

    auto bytes = io::read_file(dir / "a.ckpt");
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 5)), SchemaError);
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bytes), SchemaError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DependencyError);
}

TEST_CASE("stage-1 resume reproduces the next loss bit-exactly")
{
    const auto data = small_volumes(6, 2);
    Stage1Trainer a(small_vq(), "vqvae3d", data, 5);
    a.train(4);
    const auto ckpt = decode_checkpoint(encode_checkpoint(a.checkpoint()));
    const double next_a = a.step();
    const double after_a = a.step();

    Stage1Trainer b(small_vq(), "vqvae3d", data, 99);
    b.restore(ckpt);
    CHECK(b.steps_done() == 4);
    CHECK(b.step() == next_a);
    CHECK(b.step() == after_a);
}

TEST_CASE("stage-2 resume reproduces the next loss bit-exactly")
{
    DiffusionSection section;
    section.T = 16;
    section.denoiser.layers = 1;
    section.denoiser.heads = 2;
    section.denoiser.model_dim = 16;
    section.denoiser.ffn_dim = 32;
    section.denoiser.target_codes = 8;
    section.denoiser.cond_codes = 4;
    section.optim.batch_size = 3;
    const SequenceLayout layout{2, 4, 8};
    const DiffusionSchedule sched{16, 8};
    const auto codes = torch::randint(0, 8, {10, 8}, torch::kInt64);
    const auto cond = torch::randint(0, 4, {10, 8}, torch::kInt64);
    Stage2Trainer a(section, layout, sched, codes, cond, 1);
    a.train(3);
    const auto ckpt = decode_checkpoint(encode_checkpoint(a.checkpoint()));
    const double next_a = a.step();
    Stage2Trainer b(section, layout, sched, codes, cond, 2);
    b.restore(ckpt);
    CHECK(b.step() == next_a);
}

TEST_CASE("batched code NLL agrees with the per-example estimator")
{
    torch::manual_seed(6);
    DenoiserConfig dc;
    dc.layers = 1;
    dc.heads = 2;
    dc.model_dim = 16;
    dc.ffn_dim = 32;
    dc.target_codes = 8;
    dc.cond_codes = 4;
    const SequenceLayout layout{2, 4, 8};
    const DiffusionSchedule sched{16, 8};
    TransformerDenoiser model(dc, layout);
    model->eval();
    const auto codes = torch::randint(0, 8, {3, 8}, torch::kInt64);
    const auto cond = torch::randint(0, 4, {3, 8}, torch::kInt64);

    const auto c0 = code_grid_from_row(codes[0], {2, 2, 2}, 8);
    const auto x = condition_from_row(cond[0], layout, {2, 2}, 4);
    TransformerAdapter adapter(model);
    const double single = conditional_nll(adapter, c0, x, sched, 8, 21);
    CHECK(mean_code_nll(model, sched, codes.slice(0, 0, 1), cond.slice(0, 0, 1), 8, 21) == doctest::Approx(single));

    const double all = mean_code_nll(model, sched, codes, cond, 400, 2);
    CHECK(std::isfinite(all));
    CHECK(all == doctest::Approx(std::log(8.0)).epsilon(0.15));
    CHECK_THROWS_AS(mean_code_nll(model, sched, codes, cond.slice(0, 0, 2), 4, 1), ShapeError);
}

TEST_CASE("cosine learning-rate decay")
{
    OptimHyper o;
    o.lr = 1e-3;
    o.steps = 100;
    CHECK(o.lr_at(0) == 1e-3);
    CHECK(o.lr_at(100) == 1e-3);
    o.lr_final_fraction = 0.1;
    CHECK(o.lr_at(0) == doctest::Approx(1e-3));
    CHECK(o.lr_at(50) == doctest::Approx(0.55e-3));
    CHECK(o.lr_at(100) == doctest::Approx(1e-4));
    CHECK(o.lr_at(500) == doctest::Approx(1e-4));
    o.lr_final_fraction = 0.0;
    CHECK_THROWS_AS(o.validate("x"), ConfigError);
}

TEST_CASE("smoke pipeline, cache hits and dependency errors")
{
    const auto cfg = parse_config(kSmokeConfig);
    const PipelinePaths paths{testutil::scratch_dir("pipeline")};
    const auto report = run_pipeline(cfg, paths);
    CHECK(report.config_hash == config_hash(cfg));
    CHECK(report.nll.has_value());
    CHECK(std::isfinite(*report.nll));
    CHECK(report.coverage >= 0.0);
    CHECK(report.coverage <= 1.0);
    CHECK(report.generated_count == 12);
    CHECK(fs::exists(paths.report()));
    CHECK(fs::exists(paths.log("vqvae3d")));
    const auto diffusion_log = io::read_file(paths.log("diffusion"));
    CHECK(diffusion_log.find("20 heldout_nll ") != std::string::npos);
    CHECK(diffusion_log.find("20 train_nll ") != std::string::npos);
    CHECK(load_checkpoint(paths.denoiser()).config_hash == stage_hash(cfg, Stage::diffusion));

    CHECK(run_gen_data(cfg, paths) == StageStatus::cached);
    CHECK(run_train_vqvae(cfg, paths, Domain::planar) == StageStatus::cached);
    CHECK(run_train_vqvae(cfg, paths, Domain::volumetric) == StageStatus::cached);
    CHECK(run_train_diffusion(cfg, paths) == StageStatus::cached);
    CHECK(run_sample(cfg, paths) == StageStatus::cached);
    const auto ckpt_bytes = io::read_file(paths.denoiser());
    CHECK(run_eval(cfg, paths).to_text() == report.to_text());
    CHECK(io::read_file(paths.denoiser()) == ckpt_bytes);

    fs::remove(paths.vqvae(Domain::volumetric));
    fs::remove_all(paths.samples());
    try {
        run_sample(cfg, paths);
        FAIL("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("vqvae3d.ckpt") != std::string::npos);
    }
    const PipelinePaths empty{testutil::scratch_dir("pipeline_empty")};
    CHECK_THROWS_AS(run_train_diffusion(cfg, empty), DependencyError);
}

TEST_CASE("translation shapes and seed behaviour")
{
    torch::manual_seed(3);
    AutoencoderConfig c2;
    c2.domain = Domain::planar;
    c2.input_size = 32;
    c2.channels = 8;
    c2.codebook_K = 16;
    c2.codebook_D = 8;
    AutoencoderConfig c3 = c2;
    c3.domain = Domain::volumetric;
    DenoiserConfig dc;
    dc.layers = 1;
    dc.heads = 2;
    dc.model_dim = 16;
    dc.ffn_dim = 32;
    dc.target_codes = 16;
    dc.cond_codes = 16;
    TranslationModels models;
    models.vq2d = VQVAE(c2);
    models.vq3d = VQVAE(c3);
    models.denoiser.layout = SequenceLayout{2, 64, 512};
    models.denoiser.model = TransformerDenoiser(dc, models.denoiser.layout);
    models.denoiser.schedule = DiffusionSchedule{64, 16};
    models.vq2d->eval();
    models.vq3d->eval();
    models.denoiser.model->eval();

    GenerationOptions o;
    const auto sample = generate_dataset(o, 1, 4).samples.front();
    SamplerOptions so;
    so.steps = 8;
    const std::uint64_t seeds[] = {1, 1, 2};
    const auto vols = translate(models, sample.views, so, seeds);
    REQUIRE(vols.size() == 3);
    CHECK(vols[0].shape == std::array<std::int64_t, 3>{32, 32, 32});
    CHECK(vols[0].values == vols[1].values);
    CHECK(mse(vols[0], vols[2]) > 0.0);

    const std::vector<ViewImage> one{sample.views.front()};
    CHECK_THROWS_AS(translate(models, one, so, std::span(seeds, 1)), ShapeError);
    const std::vector<ViewImage> small{ViewImage(16, 16), ViewImage(16, 16)};
    CHECK_THROWS_AS(translate(models, small, so, std::span(seeds, 1)), ShapeError);
}

TEST_CASE("command-line exit codes")
{
    const auto dir = testutil::scratch_dir("cli");
    write_text(dir / "bad.json", R"({"seeed": 1})");
    write_text(dir / "smoke.json", kSmokeConfig);
    const auto d = dir.string();

    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("no-such-command") == 2);
    CHECK(run_cli("gen-data --config " + d + "/bad.json --out " + d + "/x") == 2);
    CHECK(run_cli("gen-data") == 2);
    CHECK(run_cli("sample --ckpt " + d + "/none.ckpt --vq2d " + d + "/none2.ckpt --views a.pgm b.pgm --out " + d
                  + "/s.arr")
          == 3);
    CHECK(run_cli("gen-data --config " + d + "/smoke.json --out " + d + "/data", "CODEX3D_DEVICE=cuda") == 3);
    CHECK(run_cli("gen-data --config " + d + "/smoke.json --out " + d + "/data", "CODEX3D_SEED=abc") == 2);

    CHECK(run_cli("gen-data --spec " + d + "/smoke.json --count 3 --seed 5 --out " + d + "/g1") == 0);
    CHECK(run_cli("gen-data --spec " + d + "/smoke.json --count 3 --seed 5 --out " + d + "/g2") == 0);
    CHECK(run_cli("gen-data --spec " + d + "/smoke.json --count 3 --seed 5 --out " + d + "/g3", "CODEX3D_SEED=9")
          == 0);
    CHECK(load_dataset(dir / "g1").samples.size() == 3);
    CHECK(load_dataset(dir / "g1").samples[0].volume.values == load_dataset(dir / "g2").samples[0].volume.values);
    CHECK(load_dataset(dir / "g3").samples[0].volume.values == load_dataset(dir / "g1").samples[0].volume.values);
    CHECK(run_cli("gen-data --spec " + d + "/smoke.json --count 3 --out " + d + "/g4", "CODEX3D_SEED=9") == 0);
    CHECK(load_dataset(dir / "g4").samples[0].volume.values != load_dataset(dir / "g1").samples[0].volume.values);
    CHECK(run_cli("eval --real " + d + "/g1 --generated " + d + "/g2 --report " + d + "/r.txt --k 2 --embed-dim 16")
          == 0);
    CHECK(fs::exists(dir / "r.txt"));

    CHECK(run_cli("config --config " + d + "/smoke.json --out " + d + "/eff.json", "CODEX3D_SEED=77") == 0);
    const auto effective = load_config(dir / "eff.json");
    CHECK(effective.seed == 77);
    auto expected = parse_config(kSmokeConfig);
    expected.seed = 77;
    CHECK(serialize_config(effective) == serialize_config(expected));
}
