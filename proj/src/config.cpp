#include "codex3d/config.hpp"

#include "codex3d/errors.hpp"

#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace codex3d {

using nlohmann::json;

namespace {

/// Reads fields from one JSON object and rejects keys nobody asked for.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where))
    {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path(key) + ": wrong type");
        }
    }

    template <typename T, typename Parse>
    void get_enum(const char* key, T& out, Parse parse)
    {
        std::string name;
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        if (!it->is_string()) throw ConfigError(path(key) + ": expected a string");
        try {
            out = parse(it->template get<std::string>());
        } catch (const ConfigError& e) {
            throw ConfigError(path(key) + ": " + e.what());
        }
    }

    Section child(const char* key)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Section(it == j_.end() ? empty : *it, path(key));
    }

    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(path(it.key().c_str()) + ": unknown key");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

private:
    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

json to_json(const OptimHyper& o)
{
    return {{"lr", o.lr},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"weight_decay", o.weight_decay},
            {"grad_clip", o.grad_clip},
            {"batch_size", o.batch_size},
            {"steps", o.steps},
            {"log_every", o.log_every},
            {"checkpoint_every", o.checkpoint_every},
            {"lr_final_fraction", o.lr_final_fraction}};
}

void read_optim(Section s, OptimHyper& o)
{
    s.get("lr", o.lr);
    s.get("beta1", o.beta1);
    s.get("beta2", o.beta2);
    s.get("weight_decay", o.weight_decay);
    s.get("grad_clip", o.grad_clip);
    s.get("batch_size", o.batch_size);
    s.get("steps", o.steps);
    s.get("log_every", o.log_every);
    s.get("checkpoint_every", o.checkpoint_every);
    s.get("lr_final_fraction", o.lr_final_fraction);
    s.finish();
}

void read_autoencoder(Section s, AutoencoderConfig& c)
{
    s.get_enum("domain", c.domain, parse_domain);
    s.get("input_size", c.input_size);
    s.get("downsample_factor", c.downsample_factor);
    s.get("channels", c.channels);
    s.get("codebook_K", c.codebook_K);
    s.get("codebook_D", c.codebook_D);
    s.get("res_blocks", c.res_blocks);
    s.get("beta", c.beta);
    s.get("sigma", c.sigma);
    s.finish();
}

void read_denoiser(Section s, DenoiserConfig& c)
{
    s.get("layers", c.layers);
    s.get("heads", c.heads);
    s.get("model_dim", c.model_dim);
    s.get("ffn_dim", c.ffn_dim);
    s.get("target_codes", c.target_codes);
    s.get("cond_codes", c.cond_codes);
    s.get("dropout", c.dropout);
    s.finish();
}

json to_json(const VqSection& v)
{
    return {{"model", to_json(v.model)}, {"optim", to_json(v.optim)}, {"dead_code_patience", v.dead_code_patience}};
}

void read_vq(Section s, VqSection& v)
{
    read_autoencoder(s.child("model"), v.model);
    read_optim(s.child("optim"), v.optim);
    s.get("dead_code_patience", v.dead_code_patience);
    s.finish();
}

json data_json(const DataSection& d)
{
    const auto& g = d.generation;
    json prims = json::array();
    for (auto p : g.spec.allowed_primitives) prims.push_back(to_string(p));
    return {{"phantom",
             {{"grid_size", g.spec.grid_size},
              {"min_primitives", g.spec.min_primitives},
              {"max_primitives", g.spec.max_primitives},
              {"density_levels", g.spec.density_levels},
              {"allowed_primitives", prims},
              {"nesting_depth", g.spec.nesting_depth},
              {"anti_alias", g.spec.anti_alias}}},
            {"azimuths_deg", g.azimuths_deg},
            {"projection", to_string(g.mode)},
            {"attenuation", g.attenuation},
            {"misalign", g.misalign},
            {"max_rotation_deg", g.max_rotation_deg},
            {"max_shift_vox", g.max_shift_vox},
            {"train_count", d.train_count},
            {"heldout_count", d.heldout_count}};
}

void read_data(Section s, DataSection& d)
{
    auto& g = d.generation;
    {
        auto p = s.child("phantom");
        p.get("grid_size", g.spec.grid_size);
        p.get("min_primitives", g.spec.min_primitives);
        p.get("max_primitives", g.spec.max_primitives);
        p.get("density_levels", g.spec.density_levels);
        if (p.has("allowed_primitives")) {
            std::vector<std::string> names;
            p.get("allowed_primitives", names);
            g.spec.allowed_primitives.clear();
            for (const auto& n : names) g.spec.allowed_primitives.push_back(parse_primitive(n));
        }
        p.get("nesting_depth", g.spec.nesting_depth);
        p.get("anti_alias", g.spec.anti_alias);
        p.finish();
    }
    s.get("azimuths_deg", g.azimuths_deg);
    s.get_enum("projection", g.mode, parse_projection_mode);
    s.get("attenuation", g.attenuation);
    s.get("misalign", g.misalign);
    s.get("max_rotation_deg", g.max_rotation_deg);
    s.get("max_shift_vox", g.max_shift_vox);
    s.get("train_count", d.train_count);
    s.get("heldout_count", d.heldout_count);
    s.finish();
}

json diffusion_json(const DiffusionSection& d)
{
    return {{"T", d.T},
            {"denoiser", to_json(d.denoiser)},
            {"sampling",
             {{"steps", d.sampling.steps},
              {"temperature", d.sampling.temperature},
              {"order", to_string(d.sampling.order)}}},
            {"optim", to_json(d.optim)},
            {"nll_mc", d.nll_mc}};
}

void read_diffusion(Section s, DiffusionSection& d)
{
    s.get("T", d.T);
    read_denoiser(s.child("denoiser"), d.denoiser);
    {
        auto p = s.child("sampling");
        p.get("steps", d.sampling.steps);
        p.get("temperature", d.sampling.temperature);
        p.get_enum("order", d.sampling.order, parse_reveal_order);
        p.finish();
    }
    read_optim(s.child("optim"), d.optim);
    s.get("nll_mc", d.nll_mc);
    s.finish();
}

std::string fnv1a_hex(const std::string& text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace

void OptimHyper::validate(const std::string& section) const
{
    if (!(lr > 0.0)) throw ConfigError(section + ".optim.lr: must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError(section + ".optim.beta1/beta2: must lie in [0, 1)");
    }
    if (weight_decay < 0.0) throw ConfigError(section + ".optim.weight_decay: must be >= 0");
    if (grad_clip < 0.0) throw ConfigError(section + ".optim.grad_clip: must be >= 0");
    if (batch_size < 1) throw ConfigError(section + ".optim.batch_size: must be >= 1");
    if (steps < 0) throw ConfigError(section + ".optim.steps: must be >= 0");
    if (log_every < 1) throw ConfigError(section + ".optim.log_every: must be >= 1");
    if (checkpoint_every < 1) throw ConfigError(section + ".optim.checkpoint_every: must be >= 1");
    if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0)) {
        throw ConfigError(section + ".optim.lr_final_fraction: must lie in (0, 1]");
    }
}

double OptimHyper::lr_at(std::int64_t done) const
{
    if (lr_final_fraction >= 1.0 || steps < 1) return lr;
    const double progress = std::min(1.0, static_cast<double>(done) / static_cast<double>(steps));
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return lr * (lr_final_fraction + (1.0 - lr_final_fraction) * cosine);
}

json to_json(const AutoencoderConfig& c)
{
    return {{"domain", to_string(c.domain)},
            {"input_size", c.input_size},
            {"downsample_factor", c.downsample_factor},
            {"channels", c.channels},
            {"codebook_K", c.codebook_K},
            {"codebook_D", c.codebook_D},
            {"res_blocks", c.res_blocks},
            {"beta", c.beta},
            {"sigma", c.sigma}};
}

AutoencoderConfig autoencoder_from_json(const json& j, const std::string& where)
{
    AutoencoderConfig c;
    read_autoencoder(Section(j, where), c);
    return c;
}

json to_json(const DenoiserConfig& c)
{
    return {{"layers", c.layers},         {"heads", c.heads},
            {"model_dim", c.model_dim},   {"ffn_dim", c.ffn_dim},
            {"target_codes", c.target_codes}, {"cond_codes", c.cond_codes},
            {"dropout", c.dropout}};
}

DenoiserConfig denoiser_from_json(const json& j, const std::string& where)
{
    DenoiserConfig c;
    read_denoiser(Section(j, where), c);
    return c;
}

ExperimentConfig ExperimentConfig::defaults()
{
    ExperimentConfig c;
    c.vqvae2d.model.domain = Domain::planar;
    c.vqvae3d.model.domain = Domain::volumetric;
    c.diffusion.optim.lr = 3e-4;
    c.derive();
    return c;
}

void ExperimentConfig::derive()
{
    diffusion.denoiser.target_codes = vqvae3d.model.codebook_K;
    diffusion.denoiser.cond_codes = vqvae2d.model.codebook_K;
}

SequenceLayout ExperimentConfig::layout() const
{
    SequenceLayout l;
    l.view_count = static_cast<std::int64_t>(data.generation.azimuths_deg.size());
    l.view_tokens = vqvae2d.model.latent_count();
    l.target_len = vqvae3d.model.latent_count();
    return l;
}

DiffusionSchedule ExperimentConfig::schedule() const
{
    DiffusionSchedule s;
    s.T = diffusion.T;
    s.K = vqvae3d.model.codebook_K;
    return s;
}

void ExperimentConfig::validate() const
{
    data.generation.spec.validate();
    if (data.generation.azimuths_deg.empty()) throw ConfigError("data.azimuths_deg: at least one view is required");
    if (!(data.generation.attenuation > 0.0)) throw ConfigError("data.attenuation: must be positive");
    if (data.generation.max_rotation_deg < 0.0 || data.generation.max_rotation_deg > MisalignmentParams::kMaxRotationDeg) {
        throw ConfigError("data.max_rotation_deg: must lie in [0, 30]");
    }
    if (data.generation.max_shift_vox < 0.0 || data.generation.max_shift_vox > data.generation.spec.grid_size / 8.0) {
        throw ConfigError("data.max_shift_vox: must lie in [0, grid_size/8]");
    }
    if (data.train_count < 1) throw ConfigError("data.train_count: must be >= 1");
    if (data.heldout_count < 0) throw ConfigError("data.heldout_count: must be >= 0");

    vqvae2d.model.validate();
    vqvae3d.model.validate();
    if (vqvae2d.model.domain != Domain::planar) throw ConfigError("vqvae2d.model.domain: must be 2d");
    if (vqvae3d.model.domain != Domain::volumetric) throw ConfigError("vqvae3d.model.domain: must be 3d");
    if (vqvae2d.model.input_size != data.generation.spec.grid_size
        || vqvae3d.model.input_size != data.generation.spec.grid_size) {
        throw ConfigError("vqvae input_size: must equal data.phantom.grid_size");
    }
    vqvae2d.optim.validate("vqvae2d");
    vqvae3d.optim.validate("vqvae3d");
    if (vqvae2d.dead_code_patience < 0 || vqvae3d.dead_code_patience < 0) {
        throw ConfigError("dead_code_patience: must be >= 0");
    }

    schedule().validate();
    diffusion.denoiser.validate();
    if (diffusion.denoiser.target_codes != vqvae3d.model.codebook_K) {
        throw ConfigError("diffusion.denoiser.target_codes: must equal vqvae3d.model.codebook_K");
    }
    if (diffusion.denoiser.cond_codes != vqvae2d.model.codebook_K) {
        throw ConfigError("diffusion.denoiser.cond_codes: must equal vqvae2d.model.codebook_K");
    }
    layout().validate();
    if (diffusion.sampling.steps < 1) throw ConfigError("diffusion.sampling.steps: must be >= 1");
    if (!(diffusion.sampling.temperature > 0.0)) throw ConfigError("diffusion.sampling.temperature: must be positive");
    diffusion.optim.validate("diffusion");
    if (diffusion.nll_mc < 1) throw ConfigError("diffusion.nll_mc: must be >= 1");

    if (metrics.k < 1) throw ConfigError("metrics.k: must be >= 1");
    if (metrics.embed_dim < 1) throw ConfigError("metrics.embed_dim: must be >= 1");
    if (metrics.embed_seeds.empty()) throw ConfigError("metrics.embed_seeds: at least one seed is required");
}

json to_json(const ExperimentConfig& c)
{
    return {{"data", data_json(c.data)},
            {"vqvae2d", to_json(c.vqvae2d)},
            {"vqvae3d", to_json(c.vqvae3d)},
            {"diffusion", diffusion_json(c.diffusion)},
            {"metrics", {{"k", c.metrics.k}, {"embed_dim", c.metrics.embed_dim}, {"embed_seeds", c.metrics.embed_seeds}}},
            {"seed", c.seed}};
}

ExperimentConfig config_from_json(const json& j)
{
    auto c = ExperimentConfig::defaults();
    Section root(j, "");
    read_data(root.child("data"), c.data);
    read_vq(root.child("vqvae2d"), c.vqvae2d);
    read_vq(root.child("vqvae3d"), c.vqvae3d);
    const bool explicit_vocab = j.contains("diffusion") && j["diffusion"].contains("denoiser")
                                && (j["diffusion"]["denoiser"].contains("target_codes")
                                    || j["diffusion"]["denoiser"].contains("cond_codes"));
    read_diffusion(root.child("diffusion"), c.diffusion);
    {
        auto m = root.child("metrics");
        m.get("k", c.metrics.k);
        m.get("embed_dim", c.metrics.embed_dim);
        m.get("embed_seeds", c.metrics.embed_seeds);
        m.finish();
    }
    root.get("seed", c.seed);
    root.finish();
    if (!explicit_vocab) c.derive();
    c.validate();
    return c;
}

ExperimentConfig parse_config(const std::string& text)
{
    json j;
    try {
        j = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: parse error: ") + e.what());
    }
    return config_from_json(j);
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

std::string hash_json(const json& j) { return fnv1a_hex(j.dump()); }

std::string config_hash(const ExperimentConfig& config) { return hash_json(to_json(config)); }

std::string stage_hash(const ExperimentConfig& config, Stage stage)
{
    const auto full = to_json(config);
    json part;
    part["data"] = full["data"];
    part["seed"] = full["seed"];
    switch (stage) {
    case Stage::data:
        break;
    case Stage::vqvae2d:
        part["vqvae2d"] = full["vqvae2d"];
        break;
    case Stage::vqvae3d:
        part["vqvae3d"] = full["vqvae3d"];
        break;
    case Stage::diffusion:
        part["vqvae2d"] = full["vqvae2d"];
        part["vqvae3d"] = full["vqvae3d"];
        part["diffusion"] = full["diffusion"];
        break;
    }
    return hash_json(part);
}

} // namespace codex3d
