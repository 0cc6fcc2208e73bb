#include "codex3d/diffusion.hpp"

#include "codex3d/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace codex3d {

namespace {

void check_t(std::int64_t t, const DiffusionSchedule& sched)
{
    if (t < 0 || t > sched.T) {
        throw ConfigError("timestep t=" + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
    }
}

/// Replaces each entry with the mask id with probability p. Consumes exactly
/// one uniform draw per position.
void mask_tokens(std::span<std::int64_t> tokens, double p, std::int64_t mask_id, Rng& rng)
{
    for (auto& tok : tokens) {
        if (rng.uniform() < p) tok = mask_id;
    }
}

/// Accepts denoisers that emit K or K+1 columns; the mask column is never part of the sampling support.
torch::Tensor code_logits(const torch::Tensor& logits, std::int64_t K, std::int64_t B, std::int64_t L)
{
    if (logits.dim() != 3 || logits.size(0) != B || logits.size(1) != L) {
        throw ShapeError("denoiser output must be B x L3 x K");
    }
    if (logits.size(2) == K + 1) return logits.slice(2, 0, K);
    if (logits.size(2) != K) throw ShapeError("denoiser output vocabulary must be K (or K+1 with mask)");
    return logits;
}

} // namespace

double DiffusionSchedule::beta(std::int64_t t) const
{
    if (t < 1 || t > T) throw ConfigError("beta: t outside [1, T]");
    return 1.0 / static_cast<double>(T - t + 1);
}

double DiffusionSchedule::survival(std::int64_t t) const
{
    if (t < 0 || t > T) throw ConfigError("survival: t outside [0, T]");
    return static_cast<double>(T - t) / static_cast<double>(T);
}

double DiffusionSchedule::gamma(std::int64_t t) const
{
    if (t < 1 || t > T) throw ConfigError("gamma: t outside [1, T]");
    return static_cast<double>(T - t + 1) / static_cast<double>(T);
}

void DiffusionSchedule::validate() const
{
    if (T < 1) throw ConfigError("diffusion.T: must be >= 1");
    if (K < 1) throw ConfigError("diffusion: codebook size must be >= 1");
}

MaskedSequence forward_mask(const CodeGrid& c0, std::int64_t t, const DiffusionSchedule& sched, Rng& rng)
{
    sched.validate();
    check_t(t, sched);
    MaskedSequence seq;
    seq.t = t;
    seq.mask_id = sched.mask_id();
    seq.tokens = c0.indices;
    for (auto tok : seq.tokens) {
        if (tok < 0 || tok >= sched.mask_id()) {
            throw ConfigError("forward_mask: code index outside [0, K)");
        }
    }
    if (t > 0) {
        mask_tokens(seq.tokens, static_cast<double>(t) / static_cast<double>(sched.T), seq.mask_id, rng);
    }
    seq.refresh_mask_positions();
    return seq;
}

MaskedSequence forward_mask(const CodeGrid& c0, std::int64_t t, const DiffusionSchedule& sched, std::uint64_t seed)
{
    Rng rng(seed);
    return forward_mask(c0, t, sched, rng);
}

MaskedSequence forward_step(const MaskedSequence& prev, const DiffusionSchedule& sched, Rng& rng)
{
    if (prev.t >= sched.T) throw ConfigError("forward_step: chain already at t = T");
    MaskedSequence next = prev;
    next.t = prev.t + 1;
    const double beta = sched.beta(next.t);
    for (auto& tok : next.tokens) {
        if (tok != next.mask_id && rng.uniform() < beta) tok = next.mask_id;
    }
    next.refresh_mask_positions();
    return next;
}

torch::Tensor transition_matrix(std::int64_t t, const DiffusionSchedule& sched)
{
    const double beta = sched.beta(t);
    const auto n = sched.K + 1;
    auto q = torch::eye(n, torch::kFloat64) * (1.0 - beta);
    q.select(1, sched.mask_id()) += beta;
    q[sched.mask_id()].zero_();
    q[sched.mask_id()][sched.mask_id()] = 1.0;
    return q;
}

ElboBatch elbo_objective(DenoiserFn& denoiser, const torch::Tensor& c0, const torch::Tensor& cond,
                         const DiffusionSchedule& sched, Rng& rng)
{
    sched.validate();
    if (c0.dim() != 2) throw ShapeError("elbo_objective: c0 must be B x L3");
    const auto B = c0.size(0);
    const auto L = c0.size(1);
    auto truth = c0.to(torch::kInt64).contiguous();
    if (truth.numel() > 0 && (truth.min().item<std::int64_t>() < 0 || truth.max().item<std::int64_t>() >= sched.K)) {
        throw ConfigError("elbo_objective: code index outside [0, K)");
    }
    auto tokens = truth.clone();
    auto mask = torch::zeros({B, L}, torch::kFloat32);
    auto gamma = torch::empty({B}, torch::kFloat32);
    ElboBatch out;
    out.t.resize(static_cast<std::size_t>(B));
    out.masked.resize(static_cast<std::size_t>(B));
    auto* tok = tokens.data_ptr<std::int64_t>();
    auto* m = mask.data_ptr<float>();
    for (std::int64_t b = 0; b < B; ++b) {
        const auto t = rng.between(1, sched.T);
        std::span<std::int64_t> row(tok + b * L, static_cast<std::size_t>(L));
        mask_tokens(row, static_cast<double>(t) / static_cast<double>(sched.T), sched.mask_id(), rng);
        std::int64_t masked = 0;
        for (std::int64_t i = 0; i < L; ++i) {
            if (row[i] == sched.mask_id()) {
                m[b * L + i] = 1.0f;
                ++masked;
            }
        }
        out.t[b] = t;
        out.masked[b] = masked;
        gamma[b] = static_cast<float>(sched.gamma(t));
    }

    const auto logits = code_logits(denoiser.logits(tokens, cond), sched.K, B, L);
    if (!torch::isfinite(logits).all().item<bool>()) {
        throw NumericalError("elbo: denoiser produced non-finite logits");
    }
    const auto logp = torch::log_softmax(logits, -1).gather(-1, truth.unsqueeze(-1)).squeeze(-1);
    out.nll_sum = -(logp * mask).sum(1);
    out.loss = out.nll_sum * gamma;
    return out;
}

ElboTerm elbo_loss(DenoiserFn& denoiser, const CodeGrid& c0, const ConditionSet& cond, const DiffusionSchedule& sched,
                   std::uint64_t seed)
{
    cond.validate();
    Rng rng(seed);
    auto truth = torch::empty({1, c0.size()}, torch::kInt64);
    std::copy(c0.indices.begin(), c0.indices.end(), truth.data_ptr<std::int64_t>());
    const auto batch = elbo_objective(denoiser, truth, cond.flatten(), sched, rng);
    ElboTerm term;
    term.t = batch.t[0];
    term.gamma = sched.gamma(term.t);
    term.masked = batch.masked[0];
    term.nll_sum = batch.nll_sum[0].item<double>();
    term.loss = batch.loss[0].item<double>();
    return term;
}

std::string to_string(RevealOrder o)
{
    switch (o) {
    case RevealOrder::random: return "random";
    case RevealOrder::confidence: return "confidence";
    case RevealOrder::left_to_right: return "left_to_right";
    }
    return "?";
}

RevealOrder parse_reveal_order(const std::string& name)
{
    if (name == "random") return RevealOrder::random;
    if (name == "confidence") return RevealOrder::confidence;
    if (name == "left_to_right") return RevealOrder::left_to_right;
    throw ConfigError("reveal order: unknown value '" + name + "'");
}

std::int64_t reveal_count(std::int64_t s, std::int64_t steps, std::int64_t L)
{
    return (s + 1) * L / steps - s * L / steps;
}

namespace {

struct Draw {
    std::int64_t token;
    double prob;
};

/// Temperature-scaled categorical draw over one logits row.
Draw draw_token(const float* logits, std::int64_t K, double temperature, Rng& rng)
{
    double peak = -std::numeric_limits<double>::infinity();
    for (std::int64_t k = 0; k < K; ++k) peak = std::max(peak, static_cast<double>(logits[k]) / temperature);
    if (!std::isfinite(peak)) {
        throw NumericalError("sample: denoiser assigns no probability mass to any code token");
    }
    double total = 0.0;
    std::vector<double> w(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
        w[k] = std::exp(static_cast<double>(logits[k]) / temperature - peak);
        total += w[k];
    }
    if (!(total > 0.0) || !std::isfinite(total)) {
        throw NumericalError("sample: improper categorical from denoiser");
    }
    double u = rng.uniform() * total;
    std::int64_t pick = K - 1;
    for (std::int64_t k = 0; k < K; ++k) {
        u -= w[k];
        if (u < 0.0) {
            pick = k;
            break;
        }
    }
    return {pick, w[pick] / total};
}

} // namespace

std::vector<CodeGrid> sample(DenoiserFn& denoiser, std::span<const ConditionSet> conds, const DiffusionSchedule& sched,
                             const std::vector<std::int64_t>& target_shape, const SamplerOptions& options,
                             std::span<const std::uint64_t> seeds, const TrajectoryObserver& observer)
{
    sched.validate();
    if (!(options.temperature > 0.0)) throw ConfigError("temperature: must be positive");
    if (conds.size() != seeds.size()) throw ConfigError("sample: need one seed per condition set");
    if (conds.empty()) return {};
    std::int64_t L = 1;
    for (auto e : target_shape) L *= e;
    if (L < 1) throw ShapeError("sample: empty target shape");
    const auto B = static_cast<std::int64_t>(conds.size());
    const auto K = sched.K;
    const auto steps = std::clamp<std::int64_t>(options.steps, 1, L);

    std::vector<torch::Tensor> cond_rows;
    for (const auto& c : conds) {
        c.validate();
        cond_rows.push_back(c.flatten());
    }
    const auto cond = torch::cat(cond_rows, 0);

    std::vector<Rng> rngs;
    rngs.reserve(conds.size());
    for (auto s : seeds) rngs.emplace_back(s);
    std::vector<std::vector<std::int64_t>> traj(conds.size(), std::vector<std::int64_t>(L, sched.mask_id()));
    auto tokens = torch::full({B, L}, sched.mask_id(), torch::kInt64);

    torch::NoGradGuard guard;
    for (std::int64_t s = 0; s < steps; ++s) {
        const auto n_reveal = reveal_count(s, steps, L);
        if (n_reveal > 0) {
            const auto logits = code_logits(denoiser.logits(tokens, cond), K, B, L).to(torch::kFloat32).contiguous();
            const float* lp = logits.data_ptr<float>();
            for (std::int64_t b = 0; b < B; ++b) {
                auto& seq = traj[b];
                auto& rng = rngs[b];
                std::vector<std::int64_t> masked;
                for (std::int64_t i = 0; i < L; ++i)
                    if (seq[i] == sched.mask_id()) masked.push_back(i);
                const auto take = std::min<std::int64_t>(n_reveal, static_cast<std::int64_t>(masked.size()));
                const float* row0 = lp + b * L * K;
                switch (options.order) {
                case RevealOrder::random:
                    for (std::int64_t r = 0; r < take; ++r) {
                        const auto j = r + rng.below(static_cast<std::int64_t>(masked.size()) - r);
                        std::swap(masked[r], masked[j]);
                        const auto pos = masked[r];
                        seq[pos] = draw_token(row0 + pos * K, K, options.temperature, rng).token;
                    }
                    break;
                case RevealOrder::left_to_right:
                    for (std::int64_t r = 0; r < take; ++r) {
                        const auto pos = masked[r];
                        seq[pos] = draw_token(row0 + pos * K, K, options.temperature, rng).token;
                    }
                    break;
                case RevealOrder::confidence: {
                    std::vector<Draw> draws;
                    draws.reserve(masked.size());
                    for (auto pos : masked) draws.push_back(draw_token(row0 + pos * K, K, options.temperature, rng));
                    std::vector<std::size_t> order(masked.size());
                    std::iota(order.begin(), order.end(), 0);
                    std::stable_sort(order.begin(), order.end(),
                                     [&](std::size_t a, std::size_t c) { return draws[a].prob > draws[c].prob; });
                    for (std::int64_t r = 0; r < take; ++r) seq[masked[order[r]]] = draws[order[r]].token;
                    break;
                }
                }
                std::copy(seq.begin(), seq.end(), tokens.data_ptr<std::int64_t>() + b * L);
            }
        }
        if (observer) {
            for (std::size_t b = 0; b < traj.size(); ++b) observer(s, b, traj[b]);
        }
    }

    std::vector<CodeGrid> out(conds.size());
    for (std::size_t b = 0; b < traj.size(); ++b) {
        if (std::find(traj[b].begin(), traj[b].end(), sched.mask_id()) != traj[b].end()) {
            throw NumericalError("sample: reverse chain ended with masked positions");
        }
        out[b].shape = target_shape;
        out[b].K = K;
        out[b].indices = std::move(traj[b]);
    }
    return out;
}

CodeGrid sample(DenoiserFn& denoiser, const ConditionSet& cond, const DiffusionSchedule& sched,
                const std::vector<std::int64_t>& target_shape, const SamplerOptions& options, std::uint64_t seed,
                const TrajectoryObserver& observer)
{
    return sample(denoiser, std::span<const ConditionSet>(&cond, 1), sched, target_shape, options,
                  std::span<const std::uint64_t>(&seed, 1), observer)
        .front();
}

double conditional_nll(DenoiserFn& denoiser, const CodeGrid& c0, const ConditionSet& cond,
                       const DiffusionSchedule& sched, std::int64_t n_mc, std::uint64_t seed)
{
    if (n_mc < 1) throw ConfigError("conditional_nll: n_mc must be >= 1");
    cond.validate();
    torch::NoGradGuard guard;
    Rng rng(seed);
    const auto L = c0.size();
    auto truth_row = torch::empty({1, L}, torch::kInt64);
    std::copy(c0.indices.begin(), c0.indices.end(), truth_row.data_ptr<std::int64_t>());
    const auto cond_row = cond.flatten();
    constexpr std::int64_t kChunk = 16;
    double total = 0.0;
    for (std::int64_t done = 0; done < n_mc; done += kChunk) {
        const auto n = std::min(kChunk, n_mc - done);
        const auto batch = elbo_objective(denoiser, truth_row.expand({n, L}), cond_row.expand({n, cond_row.size(1)}),
                                          sched, rng);
        const auto nll = batch.nll_sum.to(torch::kFloat64);
        for (std::int64_t b = 0; b < n; ++b) {
            const double weight = static_cast<double>(sched.T) / static_cast<double>(batch.t[b]);
            total += weight * nll[b].item<double>() / static_cast<double>(L);
        }
    }
    return total / static_cast<double>(n_mc);
}

} // namespace codex3d
