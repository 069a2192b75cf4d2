#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace mnp {

// Counter-based generator on a splitmix64 core. Identical sequences on every
// platform for a given (seed, stream) pair; streams let parallel workers draw
// independently without sharing state.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : state_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        // fixed-point multiply; bias is < 2^-64 per draw
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * span;
        return lo + static_cast<std::int64_t>(m >> 64);
    }

    // standard normal via Box-Muller, one cached value
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    double exponential() { return -std::log(1.0 - uniform()); }

    // Gamma(shape=2, scale=1): sum of two unit exponentials
    double gamma2() { return exponential() + exponential(); }

    // symmetric Dirichlet(1): normalized unit exponentials
    std::vector<double> dirichlet_flat(std::size_t k) {
        std::vector<double> w(k);
        double s = 0.0;
        for (auto& x : w) {
            x = exponential();
            s += x;
        }
        for (auto& x : w) x /= s;
        return w;
    }

    // product-of-uniforms method; fine for small lambda
    std::int64_t poisson(double lambda) {
        double limit = std::exp(-lambda);
        double p = 1.0;
        std::int64_t k = 0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

    // uniform on the disc of given radius
    void uniform_disc(double radius, double& x0, double& x1) {
        double r = radius * std::sqrt(uniform());
        double th = 2.0 * 3.141592653589793238462643383279502884 * uniform();
        x0 = r * std::cos(th);
        x1 = r * std::sin(th);
    }

  private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

// Fisher-Yates permutation of 0..n-1
inline std::vector<std::size_t> random_perm(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace mnp
