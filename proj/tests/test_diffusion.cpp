#include "codex3d/diffusion.hpp"
#include "codex3d/errors.hpp"
#include "support/oracles.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <doctest.h>

#include <map>
#include <numeric>
#include <set>

using namespace codex3d;

namespace {

CodeGrid random_grid(std::int64_t L, std::int64_t K, std::uint64_t seed)
{
    Rng rng(seed);
    CodeGrid g{{L}, K, {}};
    for (std::int64_t i = 0; i < L; ++i) g.indices.push_back(rng.below(K));
    return g;
}

ConditionSet small_cond(std::int64_t K2 = 4)
{
    return ConditionSet{{CodeGrid{{2, 2}, K2, {0, 1, 2, 3}}, CodeGrid{{2, 2}, K2, {3, 2, 1, 0}}}};
}

/// Mass on the mask column only; every code column is -inf.
class MaskOnlyDenoiser : public DenoiserFn {
public:
    explicit MaskOnlyDenoiser(std::int64_t K) : K_(K) {}
    torch::Tensor logits(const torch::Tensor& tokens, const torch::Tensor&) override
    {
        auto out = torch::full({tokens.size(0), tokens.size(1), K_ + 1}, -std::numeric_limits<float>::infinity());
        out.select(2, K_).fill_(0.0f);
        return out;
    }

private:
    std::int64_t K_;
};

} // namespace

TEST_CASE("schedule closed forms")
{
    DiffusionSchedule s{256, 8};
    CHECK(s.beta(256) == 1.0);
    CHECK(s.beta(1) == doctest::Approx(1.0 / 256));
    CHECK(s.gamma(1) == 1.0);
    CHECK(s.gamma(256) == 1.0 / 256);
    for (std::int64_t t = 1; t < 256; ++t) {
        CHECK(s.gamma(t) == static_cast<double>(256 - t + 1) / 256);
        CHECK(s.gamma(t + 1) < s.gamma(t));
        CHECK(s.survival(t) == static_cast<double>(256 - t) / 256);
    }
    CHECK(s.mask_id() == 8);
    CHECK_THROWS_AS(s.beta(0), ConfigError);
    CHECK_THROWS_AS(s.gamma(257), ConfigError);
    CHECK_THROWS_AS((DiffusionSchedule{0, 8}.validate()), ConfigError);
}

TEST_CASE("forward mask endpoints and range checks")
{
    const DiffusionSchedule s{16, 8};
    const auto c0 = random_grid(64, 8, 1);
    const auto full = forward_mask(c0, 16, s, 3);
    CHECK(std::all_of(full.tokens.begin(), full.tokens.end(), [](auto x) { return x == 8; }));
    CHECK(full.mask_positions.size() == 64);
    const auto none = forward_mask(c0, 0, s, 3);
    CHECK(none.tokens == c0.indices);
    CHECK(none.mask_positions.empty());
    CHECK(forward_mask(c0, 7, s, 5).tokens == forward_mask(c0, 7, s, 5).tokens);
    CHECK(forward_mask(c0, 7, s, 5).consistent());
    CHECK_THROWS_AS(forward_mask(c0, 17, s, 1), ConfigError);
    CHECK_THROWS_AS(forward_mask(c0, -1, s, 1), ConfigError);
    auto bad = c0;
    bad.indices[0] = 8;
    CHECK_THROWS(forward_mask(bad, 3, s, 1));
}

TEST_CASE("forward mask marginal at T/2")
{
    const DiffusionSchedule s{256, 16};
    const auto c0 = random_grid(1, 16, 2);
    Rng rng(9);
    int masked = 0;
    for (int i = 0; i < 10000; ++i) masked += forward_mask(c0, 128, s, rng).tokens[0] == 16;
    CHECK(std::abs(masked / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("stepwise chain is absorbing and matches the single-shot marginal")
{
    const DiffusionSchedule s{32, 8};
    const auto c0 = random_grid(100, 8, 4);
    Rng rng(6);
    std::vector<int> masked_at(33, 0);
    const int runs = 200;
    for (int r = 0; r < runs; ++r) {
        auto seq = forward_mask(c0, 0, s, rng);
        for (std::int64_t t = 1; t <= 32; ++t) {
            auto next = forward_step(seq, s, rng);
            CHECK(next.t == t);
            for (auto p : seq.mask_positions) REQUIRE(next.tokens[p] == 8);
            REQUIRE(next.consistent());
            masked_at[t] += static_cast<int>(next.mask_positions.size());
            seq = std::move(next);
        }
    }
    for (std::int64_t t : {8, 16, 24}) {
        const double n = runs * 100.0;
        const double p = t / 32.0;
        const double se = std::sqrt(p * (1 - p) / n);
        CHECK(std::abs(masked_at[t] / n - p) < 3 * se);
    }
    CHECK(masked_at[32] == runs * 100);
}

TEST_CASE("transition matrix structure and telescoping product")
{
    const DiffusionSchedule s{12, 3};
    for (std::int64_t t = 1; t <= 12; ++t) {
        const auto q = transition_matrix(t, s);
        REQUIRE(q.size(0) == 4);
        for (int i = 0; i < 4; ++i) CHECK(std::abs(q[i].sum().item<double>() - 1.0) < 1e-12);
        CHECK(q[3][3].item<double>() == 1.0);
        CHECK(q[0][0].item<double>() == doctest::Approx(1 - s.beta(t)));
        CHECK(q[0][3].item<double>() == doctest::Approx(s.beta(t)));
        CHECK(q[0][1].item<double>() == 0.0);
    }
    const auto last = transition_matrix(12, s);
    for (int i = 0; i < 4; ++i) CHECK(last[i][3].item<double>() == 1.0);

    auto acc = torch::eye(4, torch::kFloat64);
    for (std::int64_t t = 1; t <= 12; ++t) {
        acc = acc.matmul(transition_matrix(t, s));
        const auto ref = oracle::cumulative_transition(t, 12, 3);
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) CHECK(std::abs(acc[i][j].item<double>() - double(ref[i][j])) < 1e-12);
        }
        CHECK(std::abs(acc[1][1].item<double>() - (12.0 - t) / 12.0) < 1e-12);
        CHECK(std::abs(acc[1][3].item<double>() - t / 12.0) < 1e-12);
    }
}

TEST_CASE("elbo with a uniform denoiser")
{
    const DiffusionSchedule s{64, 16};
    mock::UniformDenoiser uniform(16);
    const auto c0 = random_grid(32, 16, 5);
    const auto cond = small_cond();
    double nll = 0.0;
    std::int64_t masked = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto term = elbo_loss(uniform, c0, cond, s, seed);
        CHECK(term.gamma == s.gamma(term.t));
        CHECK(term.loss == doctest::Approx(term.gamma * term.nll_sum));
        if (term.masked == 0) CHECK(term.loss == 0.0);
        nll += term.nll_sum;
        masked += term.masked;
    }
    CHECK(nll / masked == doctest::Approx(std::log(16.0)).epsilon(0.02));
}

TEST_CASE("elbo ignores a mask column and flags non-finite logits")
{
    const DiffusionSchedule s{8, 4};
    const auto c0 = random_grid(10, 4, 1);
    mock::MaskColumnDenoiser with_mask(4);
    const auto term = elbo_loss(with_mask, c0, small_cond(), s, 11);
    if (term.masked > 0) CHECK(term.nll_sum / term.masked == doctest::Approx(std::log(4.0)));
    mock::NanDenoiser nan(4);
    CHECK_THROWS_AS(elbo_loss(nan, c0, small_cond(), s, 3), NumericalError);
}

TEST_CASE("reveal counts partition the sequence")
{
    for (std::int64_t L : {1, 7, 64, 512}) {
        for (std::int64_t steps : {1, 3, 64}) {
            std::int64_t total = 0;
            for (std::int64_t s = 0; s < steps; ++s) total += reveal_count(s, steps, L);
            CHECK(total == L);
        }
    }
}

TEST_CASE("sampler trajectories are monotone and terminate")
{
    const DiffusionSchedule s{16, 4};
    mock::UniformDenoiser uniform(4);
    for (auto order : {RevealOrder::random, RevealOrder::confidence, RevealOrder::left_to_right}) {
        SamplerOptions o;
        o.order = order;
        o.steps = 5;
        std::vector<std::int64_t> last_unmasked(1, 0);
        std::vector<std::int64_t> prev;
        std::int64_t steps_seen = 0;
        const auto g = sample(uniform, small_cond(), s, {2, 2, 3}, o, 17,
                              [&](std::int64_t, std::size_t, const std::vector<std::int64_t>& tok) {
                                  ++steps_seen;
                                  if (!prev.empty()) {
                                      for (std::size_t i = 0; i < tok.size(); ++i) {
                                          if (prev[i] != 4) REQUIRE(tok[i] == prev[i]);
                                      }
                                  }
                                  prev = tok;
                              });
        CHECK(steps_seen == 5);
        CHECK(g.shape == std::vector<std::int64_t>{2, 2, 3});
        CHECK_NOTHROW(g.validate());
    }
}

TEST_CASE("one reveal per step takes exactly L3 steps")
{
    const DiffusionSchedule s{16, 4};
    mock::UniformDenoiser uniform(4);
    SamplerOptions o;
    o.steps = 8;
    std::int64_t calls_before = uniform.calls;
    std::int64_t steps_seen = 0;
    sample(uniform, small_cond(), s, {8}, o, 1, [&](std::int64_t, std::size_t, const auto&) { ++steps_seen; });
    CHECK(steps_seen == 8);
    CHECK(uniform.calls - calls_before == 8);
}

TEST_CASE("sampler determinism and temperature checks")
{
    const DiffusionSchedule s{16, 4};
    mock::UniformDenoiser uniform(4);
    SamplerOptions o;
    CHECK(sample(uniform, small_cond(), s, {4, 4}, o, 5) == sample(uniform, small_cond(), s, {4, 4}, o, 5));
    CHECK_FALSE(sample(uniform, small_cond(), s, {4, 4}, o, 5) == sample(uniform, small_cond(), s, {4, 4}, o, 6));
    o.temperature = 0.0;
    CHECK_THROWS_AS(sample(uniform, small_cond(), s, {4}, o, 5), ConfigError);
}

TEST_CASE("perfect denoiser reproduces its target")
{
    const DiffusionSchedule s{16, 8};
    const auto truth = random_grid(27, 8, 3);
    mock::OracleDenoiser perfect(8, truth.indices);
    SamplerOptions o;
    o.steps = 4;
    CHECK(sample(perfect, small_cond(), s, {3, 3, 3}, o, 2).indices == truth.indices);
    CHECK(conditional_nll(perfect, truth, small_cond(), s, 32, 1) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("all mass on the mask token is an error")
{
    const DiffusionSchedule s{16, 4};
    MaskOnlyDenoiser bad(4);
    CHECK_THROWS_AS(sample(bad, small_cond(), s, {4}, SamplerOptions{}, 1), NumericalError);
}

TEST_CASE("uniform sampler outcomes pass a chi-square test")
{
    const DiffusionSchedule s{16, 4};
    mock::UniformDenoiser uniform(4);
    const int n = 50000;
    const int buckets = 256;
    std::vector<ConditionSet> conds(n, small_cond());
    std::vector<std::uint64_t> seeds(n);
    std::iota(seeds.begin(), seeds.end(), 1000);
    SamplerOptions o;
    o.steps = 3;
    const auto grids = sample(uniform, conds, s, {8}, o, seeds);
    std::vector<double> counts(buckets, 0.0);
    for (const auto& g : grids) {
        std::int64_t code = 0;
        for (auto x : g.indices) code = code * 4 + x;
        counts[code % buckets] += 1;
    }
    const double expected = double(n) / buckets;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    const boost::math::chi_squared dist(buckets - 1);
    CHECK(chi2 < boost::math::quantile(dist, 0.99));
}

TEST_CASE("conditional NLL estimator")
{
    const DiffusionSchedule s{64, 16};
    mock::UniformDenoiser uniform(16);
    const auto c0 = random_grid(16, 16, 8);
    const double v = conditional_nll(uniform, c0, small_cond(), s, 1000, 4);
    CHECK(v == doctest::Approx(std::log(16.0)).epsilon(0.02));
    CHECK(conditional_nll(uniform, c0, small_cond(), s, 50, 4) == conditional_nll(uniform, c0, small_cond(), s, 50, 4));
    CHECK_THROWS_AS(conditional_nll(uniform, c0, small_cond(), s, 0, 4), ConfigError);
}

TEST_CASE("conditional NLL standard error shrinks with the draw count")
{
    // A denoiser with position-dependent confidence gives the estimator nonzero variance.
    class Skewed : public DenoiserFn {
    public:
        torch::Tensor logits(const torch::Tensor& tokens, const torch::Tensor&) override
        {
            auto out = torch::zeros({tokens.size(0), tokens.size(1), 8});
            for (std::int64_t i = 0; i < tokens.size(1); ++i) out.select(1, i).select(1, 0).fill_(float(i % 4));
            return out;
        }
    } skewed;
    const DiffusionSchedule s{32, 8};
    const auto c0 = random_grid(12, 8, 2);
    auto spread = [&](std::int64_t n_mc) {
        std::vector<double> est;
        for (std::uint64_t r = 0; r < 60; ++r) est.push_back(conditional_nll(skewed, c0, small_cond(), s, n_mc, 100 + r));
        const double mean = std::accumulate(est.begin(), est.end(), 0.0) / est.size();
        double var = 0.0;
        for (double e : est) var += (e - mean) * (e - mean);
        return std::sqrt(var / (est.size() - 1));
    };
    const double ratio = spread(400) / spread(100);
    CHECK(ratio == doctest::Approx(0.5).epsilon(0.3));
}
