#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace hdlg {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// mt19937_64 with hand-rolled samplers. std::*_distribution output is not
// pinned by the standard, so sampling goes through explicit formulas to keep
// runs reproducible across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(uniform() * n) % n;
    }

    double normal() {
        // Box-Muller, one value per call
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // resample outside 2 sigma
    double truncated_normal(double stddev) {
        for (;;) {
            double v = normal();
            if (std::abs(v) <= 2.0) return v * stddev;
        }
    }

    // derived stream: depends on current engine position without advancing it
    Rng spawn(uint64_t salt) const {
        Rng probe = *this;
        return Rng(splitmix64(probe.next_u64() ^ salt));
    }

    std::string save_state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
    }

    bool operator==(const Rng& o) const { return eng_ == o.eng_; }

private:
    std::mt19937_64 eng_;
};

}  // namespace hdlg
