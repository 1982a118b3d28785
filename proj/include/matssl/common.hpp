// Shared plumbing: error types, deterministic RNG, bounded parallel loops.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace matssl {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Tensor/op shape contract violations; message names the offending axes.
struct ShapeError : Error {
    using Error::Error;
};
// Invalid argument values (probabilities out of range, empty inputs, ...).
struct ValueError : Error {
    using Error::Error;
};
// File format violations; message carries the byte offset where parsing failed.
struct ParseError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct CheckpointError : Error {
    using Error::Error;
};
// Raised when a training loop hits a non-finite loss; message carries epoch/batch/loss.
struct TrainAbortError : Error {
    using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// xoshiro256** with splitmix64 seed expansion. Self-contained so that streams are
// byte-reproducible across platforms and standard-library versions; std::mt19937
// distributions are not portable.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto& w : state_) {
            s = splitmix64(s);
            w = s;
        }
    }

    // Independent substream keyed by (seed, stream, index), e.g. per image or per batch item.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t index = 0) {
        return Rng(splitmix64(seed) ^ splitmix64(stream_id * 0x9e3779b97f4a7c15ULL + 0x57c1ULL) ^
                   splitmix64(index + 0xa02bdbf7bb3c0a7ULL));
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>((static_cast<unsigned __int128>(next_u64()) *
                                          static_cast<unsigned __int128>(n)) >>
                                         64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller, second value discarded so the state stays a pure 4-word record.
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
    }

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    std::array<std::uint64_t, 4> state_{};
};

// Shortest round-trip decimal form (std::to_chars); keeps emitted CSV/config
// bytes identical across runs.
std::string format_double(double v);

// Thread cap from MATSSL_THREADS; defaults to 1 so every run is bit-deterministic
// without opting in.
int max_threads();

// Splits [0,n) into contiguous chunks, one per worker. Callers must ensure fn(i)
// writes disjoint outputs; the split never changes results, only wall time.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& chunk_fn);

}  // namespace matssl
