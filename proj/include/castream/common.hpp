#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, content hashing.
// Everything downstream assumes these stay header-only and allocation-light.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace castream {

// Error taxonomy. The CLI maps these onto its exit codes, so keep the
// categories disjoint: shape/domain = bad arguments, state = API misuse,
// numeric = divergence or non-finite data, io = files and parsing,
// invariant = a contract the library itself promised and then broke.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvariantError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Toggle for the post-op finite scan. On by default; the trainer leaves it
// on so divergence surfaces as NumericError instead of NaN weights.
inline bool& finite_checks() {
    static bool enabled = true;
    return enabled;
}

// Worker count for batch-parallel kernels. Parallel sections are organized
// so every output element is written by exactly one worker and reductions
// happen on the calling thread in a fixed order, which keeps results
// byte-identical for every setting.
inline int& compute_threads() {
    static int n = 1;
    return n;
}

// Splits [0, total) into near-even contiguous chunks and runs fn(begin, end)
// on each, using at most `threads` workers. fn must only write state owned
// by its chunk. The first exception thrown by any worker is rethrown here.
template <typename Fn>
inline void parallel_chunks(std::int64_t total, int threads, Fn&& fn) {
    if (total <= 0) return;
    std::int64_t workers = threads < 1 ? 1 : threads;
    if (workers > total) workers = total;
    if (workers == 1) {
        fn(std::int64_t{0}, total);
        return;
    }
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    std::int64_t base = total / workers, extra = total % workers;
    std::int64_t begin = 0;
    for (std::int64_t w = 0; w < workers; ++w) {
        std::int64_t len = base + (w < extra ? 1 : 0);
        std::int64_t end = begin + len;
        pool.emplace_back([&fn, &first_error, &err_mu, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
        begin = end;
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// Deterministic RNG. mt19937_64 is bit-exact across implementations; the
// std distributions are not, so the transforms live here.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Inclusive on both ends. Modulo bias is irrelevant at the span sizes
    // used here (dataset indices, pixel coordinates).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw DomainError("uniform_int: empty range");
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

    // Box-Muller, one deviate per two uniforms. Wasteful, deterministic.
    double normal(double mean, double stddev) {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925287 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(
                uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 gen_;
};

// FNV-1a 64-bit, used for parameter digests. Content hash, not crypto.
class Fnv1a {
  public:
    void update(const void* data, std::size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 1099511628211ULL;
        }
    }

    std::uint64_t value() const { return h_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(h_));
        return std::string(buf);
    }

  private:
    std::uint64_t h_ = 14695981039346656037ULL;
};

// Min-max to [0, 1]; a constant map has no ordering information and
// collapses to all zeros rather than dividing by zero.
template <typename T>
std::vector<T> minmax01(const std::vector<T>& v) {
    if (v.empty()) return {};
    T lo = v[0], hi = v[0];
    for (T x : v) {
        if (x < lo) lo = x;
        if (x > hi) hi = x;
    }
    std::vector<T> out(v.size(), T(0));
    if (hi > lo) {
        T inv = T(1) / (hi - lo);
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) * inv;
    }
    return out;
}

}  // namespace castream
