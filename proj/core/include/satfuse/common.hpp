#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace satfuse {

// Shape or size violations on operation inputs.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf escaping an operation that expects finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed files, sidecars, checkpoints.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Point configurations that admit no unique transform fit.
struct DegenerateConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Deterministic RNG. std::mt19937_64 raw draws + hand-rolled transforms so
// streams are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive range
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // independent child stream, e.g. per sample index
    Rng fork(std::uint64_t salt) const {
        Rng child(state_ ^ (0xd1b54a32d192ed03ULL * (salt + 1)));
        child.next_u64();
        return child;
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Worker cap for parallel sections. 0 = hardware concurrency.
void set_thread_count(int n);
int thread_count();

// Static-partition parallel loop over [0, n). Each index is processed by
// exactly one worker with identical per-index arithmetic, so results are
// bit-identical for any worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& chunk_fn);

inline void parallel_for_each(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
}

}  // namespace satfuse
