#pragma once

#include "codex3d/tokens.hpp"

#include <torch/torch.h>

namespace codex3d {

struct DenoiserConfig {
    std::int64_t layers = 8;
    std::int64_t heads = 8;
    std::int64_t model_dim = 256;
    std::int64_t ffn_dim = 1024;
    std::int64_t target_codes = 512; // K3; the target vocabulary is K3 + 1 (mask)
    std::int64_t cond_codes = 512;   // K2
    double dropout = 0.0;

    std::int64_t target_vocab() const noexcept { return target_codes + 1; }
    void validate() const;
};

/// softmax(Q K^T / sqrt(d_k)) V over the last two axes with no masking.
/// Q: ... x n_q x d_k, K: ... x n_k x d_k, V: ... x n_k x d_v.
torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

/// Maps (masked target tokens, condition tokens) to logits over the K3 target
/// codes at every target position. Implemented by the transformer and by test doubles.
class DenoiserFn {
public:
    virtual ~DenoiserFn() = default;
    /// tokens: B x L3 int64 (mask id = K3), cond: B x Lc int64. Returns B x L3 x K3.
    virtual torch::Tensor logits(const torch::Tensor& tokens, const torch::Tensor& cond) = 0;
};

class SelfAttentionImpl : public torch::nn::Module {
public:
    SelfAttentionImpl(std::int64_t model_dim, std::int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

private:
    std::int64_t heads_;
    torch::nn::Linear qkv_{nullptr}, out_{nullptr};
};
TORCH_MODULE(SelfAttention);

class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(std::int64_t model_dim, std::int64_t heads, std::int64_t ffn_dim, double dropout);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr};
    SelfAttention attn_{nullptr};
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
    torch::nn::Dropout drop_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Unconstrained (bidirectional, unmasked) transformer over
/// [view_1 codes | ... | view_n codes | masked 3D codes].
class TransformerDenoiserImpl : public torch::nn::Module {
public:
    TransformerDenoiserImpl(const DenoiserConfig& config, const SequenceLayout& layout);

    /// Token + position + segment embeddings: B x total_len x model_dim.
    torch::Tensor embed(const torch::Tensor& tokens, const torch::Tensor& cond);
    /// Trunk and output head on an embedded sequence: B x L3 x K3.
    torch::Tensor forward_embedded(const torch::Tensor& h);
    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& cond);

    /// Zeroes the position and segment tables (order-information control experiment).
    void zero_order_embeddings();

    const DenoiserConfig& config() const noexcept { return config_; }
    const SequenceLayout& layout() const noexcept { return layout_; }

private:
    DenoiserConfig config_;
    SequenceLayout layout_;
    torch::nn::Embedding target_embed_{nullptr}, cond_embed_{nullptr};
    torch::Tensor position_, segment_;
    torch::Tensor segment_ids_;
    torch::nn::ModuleList blocks_{nullptr};
    torch::nn::LayerNorm ln_out_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(TransformerDenoiser);

/// DenoiserFn view of a transformer.
class TransformerAdapter : public DenoiserFn {
public:
    explicit TransformerAdapter(TransformerDenoiser model) : model_(std::move(model)) {}
    torch::Tensor logits(const torch::Tensor& tokens, const torch::Tensor& cond) override;
    TransformerDenoiser& model() noexcept { return model_; }

private:
    TransformerDenoiser model_;
};

/// Embedded sequence for one example: total_len x model_dim. Rejects condition
/// codes equal to the mask id, empty conditions and length mismatches.
torch::Tensor build_sequence(TransformerDenoiser& model, const MaskedSequence& c_t, const ConditionSet& cond);

/// Per-target-position logits (L3 x K3) for one example; throws NumericalError on non-finite output.
torch::Tensor denoise(TransformerDenoiser& model, const MaskedSequence& c_t, const ConditionSet& cond);

} // namespace codex3d
