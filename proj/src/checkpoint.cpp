#include "codex3d/checkpoint.hpp"

#include "codex3d/binary_io.hpp"
#include "codex3d/errors.hpp"

#include <string_view>

namespace codex3d {

using nlohmann::json;

const torch::Tensor& Checkpoint::tensor(const std::string& name) const
{
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw SchemaError("checkpoint (" + component + "): missing tensor " + name);
}

bool Checkpoint::has_tensor(const std::string& name) const
{
    for (const auto& entry : tensors) {
        if (entry.first == name) return true;
    }
    return false;
}

std::string encode_checkpoint(const Checkpoint& ckpt)
{
    json dir = json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.scalar_type() != torch::kFloat32) throw SchemaError("checkpoint: tensor " + name + " is not float32");
        dir.push_back({{"name", name}, {"shape", t.sizes().vec()}});
    }
    json manifest{{"schema_version", kCheckpointSchema},
                  {"component", ckpt.component},
                  {"config", ckpt.config},
                  {"config_hash", ckpt.config_hash},
                  {"step", ckpt.step},
                  {"rng_state", ckpt.rng_state},
                  {"extra", ckpt.extra},
                  {"tensors", dir}};
    const auto text = manifest.dump();

    io::ByteWriter w;
    w.bytes(std::string_view(kCheckpointMagic, 8));
    w.u32(kCheckpointVersion);
    w.u64(text.size());
    w.bytes(text);
    for (const auto& entry : ckpt.tensors) {
        const auto t = entry.second.detach().to(torch::kCPU).contiguous();
        w.f32s({t.data_ptr<float>(), static_cast<std::size_t>(t.numel())});
    }
    return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes)
{
    io::ByteReader r(bytes);
    if (r.bytes(8) != std::string_view(kCheckpointMagic, 8)) throw SchemaError("checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw SchemaError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto len = r.u64();
    if (len > r.remaining()) throw SchemaError("checkpoint: truncated manifest");
    const std::string text(r.bytes(static_cast<std::size_t>(len)));

    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("checkpoint: corrupted manifest: ") + e.what());
    }
    Checkpoint ckpt;
    try {
        if (manifest.at("schema_version") != kCheckpointSchema) throw SchemaError("checkpoint: unknown schema");
        ckpt.component = manifest.at("component").get<std::string>();
        ckpt.config = manifest.at("config");
        ckpt.config_hash = manifest.at("config_hash").get<std::string>();
        ckpt.step = manifest.at("step").get<std::int64_t>();
        ckpt.rng_state = manifest.at("rng_state").get<std::string>();
        ckpt.extra = manifest.at("extra");
        for (const auto& e : manifest.at("tensors")) {
            const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
            auto t = torch::empty(shape, torch::kFloat32);
            r.f32s({t.data_ptr<float>(), static_cast<std::size_t>(t.numel())});
            ckpt.tensors.emplace_back(e.at("name").get<std::string>(), t);
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    if (r.remaining() != 0) throw SchemaError("checkpoint: trailing bytes");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path)
{
    io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw DependencyError("missing checkpoint: " + path.string());
    return decode_checkpoint(io::read_file(path));
}

NamedTensors module_tensors(const torch::nn::Module& module)
{
    NamedTensors out;
    for (const auto& p : module.named_parameters(true)) out.emplace_back("param/" + p.key(), p.value().detach().clone());
    for (const auto& b : module.named_buffers(true)) {
        out.emplace_back("buffer/" + b.key(), b.value().detach().to(torch::kFloat32).clone());
    }
    return out;
}

void load_module_tensors(torch::nn::Module& module, const Checkpoint& ckpt)
{
    torch::NoGradGuard guard;
    auto restore = [&](const std::string& name, torch::Tensor target) {
        const auto& src = ckpt.tensor(name);
        if (src.sizes() != target.sizes()) {
            throw SchemaError("checkpoint (" + ckpt.component + "): shape mismatch for " + name);
        }
        target.copy_(src);
    };
    for (auto& p : module.named_parameters(true)) restore("param/" + p.key(), p.value());
    for (auto& b : module.named_buffers(true)) restore("buffer/" + b.key(), b.value());
}

json adam_state(const torch::optim::Adam& opt, const torch::nn::Module& module, NamedTensors& out)
{
    json steps = json::object();
    const auto& state = opt.state();
    for (const auto& p : module.named_parameters(true)) {
        auto it = state.find(p.value().unsafeGetTensorImpl());
        if (it == state.end()) continue;
        const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
        steps[p.key()] = s.step();
        out.emplace_back("adam/" + p.key() + "/exp_avg", s.exp_avg().detach().clone());
        out.emplace_back("adam/" + p.key() + "/exp_avg_sq", s.exp_avg_sq().detach().clone());
    }
    return steps;
}

void load_adam_state(torch::optim::Adam& opt, const torch::nn::Module& module, const Checkpoint& ckpt,
                     const json& steps)
{
    auto& state = opt.state();
    state.clear();
    for (const auto& p : module.named_parameters(true)) {
        if (!steps.contains(p.key())) continue;
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(steps.at(p.key()).get<std::int64_t>());
        s->exp_avg(ckpt.tensor("adam/" + p.key() + "/exp_avg").clone());
        s->exp_avg_sq(ckpt.tensor("adam/" + p.key() + "/exp_avg_sq").clone());
        state[p.value().unsafeGetTensorImpl()] = std::move(s);
    }
}

} // namespace codex3d
