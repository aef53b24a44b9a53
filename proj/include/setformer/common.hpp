#pragma once

// Shared plumbing: error categories, deterministic RNG, thread control.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace setformer {

inline constexpr const char* kVersion = "setformer-0.1.0";

using TokenId = std::int32_t;

// Token id space: 0..255 are raw bytes, then the special markers.
namespace tokens {
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kStart2d = 257;
inline constexpr TokenId kSplit2d = 258;
inline constexpr TokenId kEnd2d = 259;
inline constexpr std::size_t kVocabSize = 260;
} // namespace tokens

// Bad caller input: shape mismatches, invalid configs, contract violations.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed external data: JSONL lines, tagged prompts, checkpoint files.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (e.g. NaN gradients).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------------------
// Deterministic RNG (splitmix64). Self-contained so that identical seeds
// give identical streams on every build of this project.
// ----------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (no cached spare, so the stream is
    // position-independent).
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            throw ConfigError("Rng::below: n must be positive");
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(below(n)); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    // Derive an independent, reproducible substream.
    Rng fork(std::uint64_t tag) {
        Rng base(state_ ^ (0xD1342543DE82EF95ull * (tag + 1)));
        return Rng(base.next_u64());
    }

private:
    std::uint64_t state_;
};

// ----------------------------------------------------------------------
// Thread control. Results are required to be identical for any thread
// count, so parallelism only ever splits loops whose iterations write
// disjoint outputs and whose per-output evaluation order is fixed.
// ----------------------------------------------------------------------
inline std::atomic<int>& thread_count_storage() {
    static std::atomic<int> n{1};
    return n;
}

inline void set_threads(int n) { thread_count_storage().store(n < 1 ? 1 : n); }
inline int get_threads() { return thread_count_storage().load(); }

template <typename Fn>
void parallel_for(std::size_t total, Fn&& fn) {
    int n_threads = get_threads();
    if (n_threads <= 1 || total <= 1) {
        fn(std::size_t{0}, total);
        return;
    }
    if (static_cast<std::size_t>(n_threads) > total) {
        n_threads = static_cast<int>(total);
    }
    const std::size_t chunk = total / static_cast<std::size_t>(n_threads);
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(n_threads) - 1);
    for (int t = 0; t < n_threads - 1; ++t) {
        const std::size_t begin = static_cast<std::size_t>(t) * chunk;
        workers.emplace_back([&fn, begin, chunk] { fn(begin, begin + chunk); });
    }
    fn(static_cast<std::size_t>(n_threads - 1) * chunk, total);
    for (auto& w : workers) {
        w.join();
    }
}

} // namespace setformer
