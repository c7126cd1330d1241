#include "warpkit/rng.hpp"

#include <cmath>

#include "warpkit/error.hpp"

namespace warpkit {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

std::uint64_t SeededRng::mix(std::uint64_t x) {
    // splitmix64 finalizer
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

std::uint64_t SeededRng::next_u64() {
    ++counter_;
    return mix(seed_ + kGolden * counter_);
}

double SeededRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::gaussian() {
    // u1 in (0, 1] so the log is finite
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

std::uint64_t SeededRng::next_below(std::uint64_t n) {
    if (n == 0) throw ContractError("next_below: n must be positive");
    // 128-bit multiply-shift; slight bias is irrelevant at these ranges and
    // the result stays platform-exact
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

SeededRng SeededRng::split(std::uint64_t stream) const {
    return SeededRng(mix(seed_ ^ mix(stream + kGolden)));
}

std::vector<double> SeededRng::gaussian_vec(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = gaussian();
    return out;
}

std::vector<double> SeededRng::uniform_vec(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = uniform();
    return out;
}

}  // namespace warpkit
