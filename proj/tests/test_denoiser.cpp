#include "codex3d/denoiser.hpp"
#include "codex3d/errors.hpp"

#include <doctest.h>

#include <cmath>

using namespace codex3d;

namespace {

DenoiserConfig tiny_config(std::int64_t K3 = 32, std::int64_t K2 = 16)
{
    DenoiserConfig c;
    c.layers = 2;
    c.heads = 2;
    c.model_dim = 32;
    c.ffn_dim = 64;
    c.target_codes = K3;
    c.cond_codes = K2;
    return c;
}

SequenceLayout tiny_layout() { return SequenceLayout{2, 4, 8}; }

ConditionSet cond_of(std::vector<std::int64_t> a, std::vector<std::int64_t> b, std::int64_t K2 = 16)
{
    return ConditionSet{{CodeGrid{{2, 2}, K2, std::move(a)}, CodeGrid{{2, 2}, K2, std::move(b)}}};
}

MaskedSequence masked_seq(std::int64_t K3, std::vector<std::int64_t> tokens)
{
    MaskedSequence s;
    s.tokens = std::move(tokens);
    s.mask_id = K3;
    s.refresh_mask_positions();
    return s;
}

} // namespace

TEST_CASE("attention worked examples")
{
    const auto v1 = torch::tensor({{2.0, -1.0, 5.0}}, torch::kFloat64);
    const auto single = attention(torch::randn({3, 4}, torch::kFloat64), torch::randn({1, 4}, torch::kFloat64), v1);
    for (int i = 0; i < 3; ++i) CHECK(torch::allclose(single[i], v1[0]));

    const auto q = torch::zeros({2, 3}, torch::kFloat64);
    const auto v = torch::tensor({{1.0, 0.0}, {3.0, 6.0}, {5.0, 3.0}}, torch::kFloat64);
    const auto flat = attention(q, torch::randn({3, 3}, torch::kFloat64), v);
    CHECK(torch::allclose(flat[0], torch::tensor({3.0, 3.0}, torch::kFloat64)));

    const auto out = attention(torch::tensor({{1.0}}, torch::kFloat64),
                               torch::tensor({{0.0}, {std::log(3.0)}}, torch::kFloat64),
                               torch::tensor({{0.0}, {4.0}}, torch::kFloat64));
    CHECK(out.item<double>() == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("attention rows are stochastic and shapes are checked")
{
    const auto q = torch::randn({5, 8}, torch::kFloat64);
    const auto k = torch::randn({7, 8}, torch::kFloat64);
    const auto weights = attention(q, k, torch::eye(7, torch::kFloat64));
    CHECK(torch::allclose(weights.sum(-1), torch::ones({5}, torch::kFloat64), 0.0, 1e-6));
    CHECK((weights > 0).all().item<bool>());
    CHECK_THROWS_AS(attention(q, torch::randn({7, 4}), torch::randn({7, 2})), ShapeError);
    CHECK_THROWS_AS(attention(q, k, torch::randn({6, 2}, torch::kFloat64)), ShapeError);
}

TEST_CASE("layout counting")
{
    const SequenceLayout layout{2, 64, 512};
    CHECK(layout.cond_len() == 128);
    CHECK(layout.total_len() == 640);
    CHECK_THROWS_AS((SequenceLayout{0, 4, 8}.validate()), ConfigError);
}

TEST_CASE("config validation")
{
    auto c = tiny_config();
    CHECK_NOTHROW(c.validate());
    CHECK(c.target_vocab() == 33);
    c.model_dim = 33;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("sequence construction and condition checks")
{
    torch::manual_seed(0);
    TransformerDenoiser model(tiny_config(), tiny_layout());
    model->eval();
    const auto seq = masked_seq(32, {1, 32, 3, 32, 5, 6, 32, 8});
    const auto cond = cond_of({0, 1, 2, 3}, {4, 5, 6, 7});
    const auto emb = build_sequence(model, seq, cond);
    CHECK(emb.sizes() == torch::IntArrayRef{tiny_layout().total_len(), 32});

    const auto swapped = build_sequence(model, seq, cond_of({4, 5, 6, 7}, {0, 1, 2, 3}));
    CHECK_FALSE(torch::allclose(emb, swapped));

    CHECK_THROWS_AS(build_sequence(model, seq, ConditionSet{}), ConfigError);
    CHECK_THROWS(build_sequence(model, seq, cond_of({0, 1, 2, 16}, {4, 5, 6, 7})));
    CHECK_THROWS_AS(build_sequence(model, masked_seq(32, {1, 2, 3}), cond), ShapeError);
    CHECK_THROWS_AS(build_sequence(model, seq, ConditionSet{{CodeGrid{{2, 2}, 16, {0, 1, 2, 3}}}}), ShapeError);
}

TEST_CASE("denoise output shape and initial entropy")
{
    torch::manual_seed(1);
    const std::int64_t K3 = 64;
    TransformerDenoiser model(tiny_config(K3), tiny_layout());
    model->eval();
    const auto cond = cond_of({0, 1, 2, 3}, {4, 5, 6, 7});
    for (const auto& tokens : {std::vector<std::int64_t>(8, K3), std::vector<std::int64_t>{1, 2, 3, 4, 5, 6, 7, 8},
                               std::vector<std::int64_t>{K3, 2, K3, 4, K3, 6, K3, 8}}) {
        const auto logits = denoise(model, masked_seq(K3, tokens), cond);
        CHECK(logits.sizes() == torch::IntArrayRef{8, K3});
        CHECK(torch::isfinite(logits).all().item<bool>());
        const auto logp = torch::log_softmax(logits.to(torch::kFloat64), -1);
        const auto entropy = -(logp.exp() * logp).sum(-1);
        CHECK((entropy > 0.9 * std::log(double(K3))).all().item<bool>());
    }
}

TEST_CASE("every condition token reaches every target logit")
{
    torch::manual_seed(2);
    TransformerDenoiser model(tiny_config(), tiny_layout());
    model->eval();
    const auto tokens = torch::full({1, 8}, 32, torch::kInt64);
    const auto cond = torch::tensor({{0, 1, 2, 3, 4, 5, 6, 7}}, torch::kInt64);
    auto h = model->embed(tokens, cond).detach().requires_grad_(true);
    const auto logits = model->forward_embedded(h);
    for (std::int64_t target : {0, 7}) {
        if (h.grad().defined()) h.grad().zero_();
        logits[0][target][3].backward({}, true);
        const auto g = h.grad()[0].slice(0, 0, 8).abs().sum(-1);
        CHECK((g > 0).all().item<bool>());
    }
}

TEST_CASE("evaluation mode is deterministic")
{
    torch::manual_seed(3);
    auto cfg = tiny_config();
    cfg.dropout = 0.1;
    TransformerDenoiser model(cfg, tiny_layout());
    model->eval();
    const auto seq = masked_seq(32, {1, 32, 3, 32, 5, 6, 32, 8});
    const auto cond = cond_of({0, 1, 2, 3}, {4, 5, 6, 7});
    CHECK(torch::equal(denoise(model, seq, cond), denoise(model, seq, cond)));
}

TEST_CASE("order information lives only in the position and segment tables")
{
    torch::manual_seed(4);
    TransformerDenoiser model(tiny_config(), tiny_layout());
    model->eval();
    const auto seq = masked_seq(32, {1, 32, 3, 32, 5, 6, 32, 8});
    const auto a = cond_of({0, 1, 2, 3}, {4, 5, 6, 7});
    const auto b = cond_of({7, 2, 5, 0}, {3, 6, 1, 4});
    CHECK_FALSE(torch::allclose(denoise(model, seq, a), denoise(model, seq, b), 1e-5, 1e-6));
    model->zero_order_embeddings();
    CHECK(torch::allclose(denoise(model, seq, a), denoise(model, seq, b), 1e-5, 1e-6));
}

TEST_CASE("adapter batches and rejects bad layouts")
{
    torch::manual_seed(5);
    TransformerDenoiser model(tiny_config(), tiny_layout());
    model->eval();
    TransformerAdapter adapter(model);
    const auto tokens = torch::randint(0, 33, {3, 8}, torch::kInt64);
    const auto cond = torch::randint(0, 16, {3, 8}, torch::kInt64);
    const auto out = adapter.logits(tokens, cond);
    CHECK(out.sizes() == torch::IntArrayRef{3, 8, 32});
    CHECK_THROWS_AS(adapter.logits(tokens.slice(1, 0, 7), cond), ShapeError);
    CHECK_THROWS_AS(adapter.logits(tokens, cond.slice(0, 0, 2)), ShapeError);
}
