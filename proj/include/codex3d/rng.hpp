#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace codex3d {

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) noexcept;

/// Seeded random source for every operation that takes a seed.
/// The engine state round-trips through text so training can resume exactly.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform();                        // [0, 1)
    double uniform(double lo, double hi);    // [lo, hi)
    std::int64_t below(std::int64_t n);      // [0, n)
    std::int64_t between(std::int64_t lo, std::int64_t hi); // [lo, hi]
    double normal();
    bool bernoulli(double p);

    std::string state() const;
    void set_state(const std::string& text);

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace codex3d
