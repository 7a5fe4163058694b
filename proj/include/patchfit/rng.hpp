#pragma once

#include <cstdint>
#include <random>

namespace patchfit {

// mt19937_64 with hand-rolled uniform draws so streams are identical across
// standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    uint64_t bits() { return eng_(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return eng_() % n; }

private:
    std::mt19937_64 eng_;
};

}  // namespace patchfit
