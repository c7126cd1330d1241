#pragma once

#include <cstdint>
#include <vector>

namespace warpkit {

// Counter-based generator: draw i is a hash of (seed, i), so streams can be
// split without sharing state and a generator's position is just (seed,
// counter). All integer math -> identical sequences on every platform.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();

    // uniform in [0, 1), 53-bit resolution
    double uniform();

    // standard normal via Box-Muller; always consumes two draws and never
    // caches the second value, so state stays (seed, counter) only
    double gaussian();

    // uniform integer in [0, n), n > 0
    std::uint64_t next_below(std::uint64_t n);

    // independent child stream; deterministic in (seed, stream)
    SeededRng split(std::uint64_t stream) const;

    std::vector<double> gaussian_vec(std::size_t n);
    std::vector<double> uniform_vec(std::size_t n);

private:
    static std::uint64_t mix(std::uint64_t x);

    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace warpkit
