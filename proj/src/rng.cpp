#include "codex3d/rng.hpp"

#include "codex3d/errors.hpp"

#include <sstream>

namespace codex3d {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) noexcept
{
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform()
{
    // 53 random mantissa bits.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::below(std::int64_t n)
{
    if (n <= 0) {
        throw ConfigError("Rng::below: n must be positive");
    }
    std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
    return dist(engine_);
}

std::int64_t Rng::between(std::int64_t lo, std::int64_t hi)
{
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    return dist(engine_);
}

double Rng::normal()
{
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::string Rng::state() const
{
    std::ostringstream out;
    out << engine_;
    return out.str();
}

void Rng::set_state(const std::string& text)
{
    std::istringstream in(text);
    in >> engine_;
    if (in.fail()) {
        throw SchemaError("malformed RNG state");
    }
}

} // namespace codex3d
