#include "codex3d/denoiser.hpp"

#include "codex3d/errors.hpp"

#include <cmath>

namespace codex3d {

namespace nn = torch::nn;

std::int64_t ConditionSet::token_count() const
{
    std::int64_t n = 0;
    for (const auto& g : view_codes) n += g.size();
    return n;
}

void ConditionSet::validate() const
{
    if (view_codes.empty()) {
        throw ConfigError("ConditionSet: at least one view is required");
    }
    for (const auto& g : view_codes) {
        g.validate();
        if (g.K != view_codes.front().K || g.shape != view_codes.front().shape) {
            throw ShapeError("ConditionSet: all views must share codebook size and code layout");
        }
    }
}

torch::Tensor ConditionSet::flatten() const
{
    auto out = torch::empty({1, token_count()}, torch::kInt64);
    auto* p = out.data_ptr<std::int64_t>();
    for (const auto& g : view_codes) p = std::copy(g.indices.begin(), g.indices.end(), p);
    return out;
}

bool MaskedSequence::consistent() const
{
    std::size_t next = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == mask_id) {
            if (next >= mask_positions.size() || mask_positions[next] != static_cast<std::int64_t>(i)) return false;
            ++next;
        }
    }
    return next == mask_positions.size();
}

void MaskedSequence::refresh_mask_positions()
{
    mask_positions.clear();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == mask_id) mask_positions.push_back(static_cast<std::int64_t>(i));
    }
}

torch::Tensor MaskedSequence::as_tensor() const
{
    auto out = torch::empty({1, static_cast<std::int64_t>(tokens.size())}, torch::kInt64);
    std::copy(tokens.begin(), tokens.end(), out.data_ptr<std::int64_t>());
    return out;
}

void SequenceLayout::validate() const
{
    if (view_count < 1) throw ConfigError("layout: view_count must be >= 1");
    if (view_tokens < 1) throw ConfigError("layout: view_tokens must be >= 1");
    if (target_len < 1) throw ConfigError("layout: target_len must be >= 1");
}

void DenoiserConfig::validate() const
{
    if (layers < 1) throw ConfigError("denoiser.layers: must be >= 1");
    if (heads < 1) throw ConfigError("denoiser.heads: must be >= 1");
    if (model_dim < 1 || model_dim % heads != 0) {
        throw ConfigError("denoiser.model_dim: must be a positive multiple of heads");
    }
    if (ffn_dim < 1) throw ConfigError("denoiser.ffn_dim: must be positive");
    if (target_codes < 2) throw ConfigError("denoiser.target_codes: must be >= 2");
    if (cond_codes < 1) throw ConfigError("denoiser.cond_codes: must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("denoiser.dropout: must lie in [0,1)");
}

torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v)
{
    if (q.dim() < 2 || k.dim() != q.dim() || v.dim() != q.dim()) {
        throw ShapeError("attention: Q, K, V must share rank >= 2");
    }
    if (q.size(-1) != k.size(-1)) throw ShapeError("attention: Q and K disagree on d_k");
    if (k.size(-2) != v.size(-2)) throw ShapeError("attention: K and V disagree on n_k");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
    const auto weights = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
    return torch::matmul(weights, v);
}

SelfAttentionImpl::SelfAttentionImpl(std::int64_t model_dim, std::int64_t heads) : heads_(heads)
{
    qkv_ = register_module("qkv", nn::Linear(model_dim, 3 * model_dim));
    out_ = register_module("out", nn::Linear(model_dim, model_dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x)
{
    const auto B = x.size(0), T = x.size(1), M = x.size(2);
    const auto dh = M / heads_;
    auto qkv = qkv_->forward(x).reshape({B, T, 3, heads_, dh}).permute({2, 0, 3, 1, 4});
    auto y = attention(qkv[0], qkv[1], qkv[2]); // B x heads x T x dh
    y = y.transpose(1, 2).reshape({B, T, M});
    return out_->forward(y);
}

TransformerBlockImpl::TransformerBlockImpl(std::int64_t model_dim, std::int64_t heads, std::int64_t ffn_dim,
                                           double dropout)
{
    ln1_ = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({model_dim})));
    attn_ = register_module("attn", SelfAttention(model_dim, heads));
    ln2_ = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({model_dim})));
    fc1_ = register_module("fc1", nn::Linear(model_dim, ffn_dim));
    fc2_ = register_module("fc2", nn::Linear(ffn_dim, model_dim));
    drop_ = register_module("drop", nn::Dropout(dropout));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x)
{
    auto h = x + drop_->forward(attn_->forward(ln1_->forward(x)));
    return h + drop_->forward(fc2_->forward(torch::gelu(fc1_->forward(ln2_->forward(h)))));
}

TransformerDenoiserImpl::TransformerDenoiserImpl(const DenoiserConfig& config, const SequenceLayout& layout)
    : config_(config), layout_(layout)
{
    config_.validate();
    layout_.validate();
    const auto M = config_.model_dim;
    target_embed_ = register_module("target_embed", nn::Embedding(config_.target_vocab(), M));
    cond_embed_ = register_module("cond_embed", nn::Embedding(config_.cond_codes, M));
    position_ = register_parameter("position", torch::randn({layout_.total_len(), M}) * 0.02);
    segment_ = register_parameter("segment", torch::randn({layout_.view_count + 1, M}) * 0.02);
    blocks_ = register_module("blocks", nn::ModuleList());
    for (std::int64_t l = 0; l < config_.layers; ++l) {
        blocks_->push_back(TransformerBlock(M, config_.heads, config_.ffn_dim, config_.dropout));
    }
    ln_out_ = register_module("ln_out", nn::LayerNorm(nn::LayerNormOptions({M})));
    head_ = register_module("head", nn::Linear(M, config_.target_codes));

    torch::NoGradGuard guard;
    target_embed_->weight.normal_(0.0, 0.02);
    cond_embed_->weight.normal_(0.0, 0.02);
    head_->weight.normal_(0.0, 0.02);
    head_->bias.zero_();

    // Segment id per position: view index for condition tokens, view_count for the 3D tokens.
    segment_ids_ = torch::empty({layout_.total_len()}, torch::kInt64);
    auto* s = segment_ids_.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < layout_.total_len(); ++i) {
        s[i] = i < layout_.cond_len() ? i / layout_.view_tokens : layout_.view_count;
    }
}

torch::Tensor TransformerDenoiserImpl::embed(const torch::Tensor& tokens, const torch::Tensor& cond)
{
    if (tokens.dim() != 2 || tokens.size(1) != layout_.target_len) {
        throw ShapeError("denoiser: target tokens must be B x " + std::to_string(layout_.target_len));
    }
    if (cond.dim() != 2 || cond.size(1) != layout_.cond_len() || cond.size(0) != tokens.size(0)) {
        throw ShapeError("denoiser: condition tokens must be B x " + std::to_string(layout_.cond_len()));
    }
    const auto h_cond = cond_embed_->forward(cond);
    const auto h_target = target_embed_->forward(tokens);
    return torch::cat({h_cond, h_target}, 1) + position_.unsqueeze(0) + segment_.index_select(0, segment_ids_).unsqueeze(0);
}

torch::Tensor TransformerDenoiserImpl::forward_embedded(const torch::Tensor& h_in)
{
    auto h = h_in;
    for (const auto& block : *blocks_) {
        h = block->as<TransformerBlock>()->forward(h);
    }
    h = ln_out_->forward(h.slice(1, layout_.cond_len()));
    return head_->forward(h);
}

torch::Tensor TransformerDenoiserImpl::forward(const torch::Tensor& tokens, const torch::Tensor& cond)
{
    return forward_embedded(embed(tokens, cond));
}

void TransformerDenoiserImpl::zero_order_embeddings()
{
    torch::NoGradGuard guard;
    position_.zero_();
    segment_.zero_();
}

torch::Tensor TransformerAdapter::logits(const torch::Tensor& tokens, const torch::Tensor& cond)
{
    return model_->forward(tokens, cond);
}

namespace {

void check_example(const TransformerDenoiser& model, const MaskedSequence& c_t, const ConditionSet& cond)
{
    const auto& layout = model->layout();
    const auto& config = model->config();
    if (cond.view_codes.empty()) {
        throw ConfigError("build_sequence: empty condition set");
    }
    cond.validate();
    if (cond.view_count() != layout.view_count || cond.view_codes.front().size() != layout.view_tokens) {
        throw ShapeError("build_sequence: condition set does not match the denoiser layout");
    }
    for (const auto& g : cond.view_codes) {
        for (auto code : g.indices) {
            if (code == config.target_codes) {
                throw ConfigError("build_sequence: mask id appears in condition codes");
            }
            if (code >= config.cond_codes) {
                throw ConfigError("build_sequence: condition code outside the 2D codebook");
            }
        }
    }
    if (static_cast<std::int64_t>(c_t.tokens.size()) != layout.target_len) {
        throw ShapeError("build_sequence: target length does not match the denoiser layout");
    }
    for (auto tok : c_t.tokens) {
        if (tok < 0 || tok > config.target_codes) {
            throw ConfigError("build_sequence: target token outside [0, K3]");
        }
    }
}

} // namespace

torch::Tensor build_sequence(TransformerDenoiser& model, const MaskedSequence& c_t, const ConditionSet& cond)
{
    check_example(model, c_t, cond);
    return model->embed(c_t.as_tensor(), cond.flatten()).squeeze(0);
}

torch::Tensor denoise(TransformerDenoiser& model, const MaskedSequence& c_t, const ConditionSet& cond)
{
    check_example(model, c_t, cond);
    auto logits = model->forward(c_t.as_tensor(), cond.flatten()).squeeze(0);
    if (!torch::isfinite(logits).all().item<bool>()) {
        throw NumericalError("denoise: non-finite logits");
    }
    return logits;
}

} // namespace codex3d
