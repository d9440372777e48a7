#pragma once

#include <cmath>
#include <cstdint>

namespace gmflow {

// Small counter-free PRNG (xorshift-star family). Self-contained so that
// seeded runs are byte-reproducible across platforms and library versions;
// std::normal_distribution is implementation-defined, which would break
// checkpoint/manifest hash checks.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {
        if (state_ == 0) state_ = 0x853c49e6748fea9bull;
    }

    uint64_t next_u64() {
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Box-Muller; one fresh pair per two calls.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    // Independent stream derived from this seed and a tag; insensitive to
    // how many draws the parent has made so far only if forked up front.
    Rng fork(uint64_t tag) const {
        return Rng(splitmix(state_ ^ splitmix(tag + 0x632be59bd9b4e019ull)));
    }

    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace gmflow
