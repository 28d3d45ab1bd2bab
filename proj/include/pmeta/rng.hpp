#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pmeta/error.hpp"

namespace pmeta {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are not, so bounded draws and normals are implemented here.
// Same seed => byte-identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased draw in [0, n) by rejection.
    std::uint64_t uniform_u64(std::uint64_t n) {
        if (n == 0) throw ContractError("rng: uniform_u64(0)");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform_u64(n)); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(uniform_u64(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    // Box-Muller; one value per call keeps the stream layout trivial.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
        if (k > n) throw CapacityError("rng: sample " + std::to_string(k) + " from " + std::to_string(n));
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + index(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    // Stream state round-trips through the standard textual representation.
    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) throw IntegrityError("rng: bad serialized state");
    }

    // Derivation rule for independent per-stream generators: base XOR index.
    static Rng derive(std::uint64_t base_seed, std::uint64_t stream_index) {
        return Rng(base_seed ^ stream_index);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace pmeta
