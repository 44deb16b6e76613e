#pragma once

#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lwm {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy used across modules.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& m) : std::runtime_error("domain error: " + m) {}
};
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& m) : std::runtime_error("index error: " + m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

// splitmix64: the seed/stream mixer used everywhere determinism matters.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Small deterministic RNG; identical streams on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) { splitmix64(state_); }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw ContractError("next_below(0)");
        return next_u64() % n;
    }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller; consumes two draws per pair, caches the second.
    double next_normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = next_double(), u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Counter-based uniform draw keyed by (seed, step, position); stateless,
// safe to evaluate from parallel workers in any order.
inline double counter_uniform(uint64_t seed, uint64_t step, uint64_t position) {
    uint64_t s = mix64(mix64(seed, 0x5bf0f0a3u + step), 0x9d2c5680u + position);
    return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

// Worker cap from the environment; 0 or unset means single-threaded.
int thread_cap();

// Runs fn(i) for i in [0, n) across at most thread_cap() workers with a fixed
// block assignment. Every index writes only its own outputs, so the result is
// identical to the serial loop.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

} // namespace lwm
