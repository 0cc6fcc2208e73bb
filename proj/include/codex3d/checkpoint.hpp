#pragma once

#include <json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace codex3d {

inline constexpr const char* kCheckpointMagic = "CX3DCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kCheckpointSchema = "codex3d.checkpoint/1";

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Container: 8-byte magic, u32 version, u64 manifest length, JSON manifest,
/// then one little-endian f32 blob per tensor in manifest order.
struct Checkpoint {
    std::string component;       // vqvae2d | vqvae3d | denoiser
    nlohmann::json config;       // snapshot of the owning config section(s)
    std::string config_hash;
    std::int64_t step = 0;
    std::string rng_state;
    nlohmann::json extra = nlohmann::json::object();
    NamedTensors tensors;        // float32, contiguous

    const torch::Tensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws DependencyError when the file is missing, SchemaError when it is malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters then buffers, prefixed "param/" and "buffer/".
NamedTensors module_tensors(const torch::nn::Module& module);
/// Copies tensors back into `module`; every parameter and buffer must be present with a matching shape.
void load_module_tensors(torch::nn::Module& module, const Checkpoint& ckpt);

/// Adam moments as "adam/<param>/exp_avg" and "adam/<param>/exp_avg_sq" tensors,
/// with per-parameter step counts in the returned JSON.
nlohmann::json adam_state(const torch::optim::Adam& opt, const torch::nn::Module& module, NamedTensors& out);
void load_adam_state(torch::optim::Adam& opt, const torch::nn::Module& module, const Checkpoint& ckpt,
                     const nlohmann::json& steps);

} // namespace codex3d
