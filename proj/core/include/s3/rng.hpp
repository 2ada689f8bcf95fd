#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace s3 {

/// Seeded mt19937_64 stream. Uniform and normal draws are computed here
/// rather than through <random> distributions so that sequences do not
/// depend on the standard library implementation.
class Rng {
public:
    static constexpr const char* kAlgorithm = "mt19937_64";

    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const { return seed_; }

    /// Independent stream derived from this generator's seed (not its state).
    Rng derive(std::uint64_t stream) const;

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform double in [0, 1).
    double uniform();
    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n);
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    /// Index drawn from unnormalized nonnegative weights.
    std::size_t categorical(std::span<const double> probs);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace s3
