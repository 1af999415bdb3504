#pragma once

#include <cstdint>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "dfgp/types.hpp"

namespace dfgp {

/// Engine used everywhere. Boost distributions are used (not <random>'s) so that
/// draws are identical across standard libraries.
using Rng = boost::random::mt19937_64;

/// Mixes a base seed with a stream id so independent consumers never share a sequence.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Vector standard_normal(Rng& rng, Index n) {
    boost::random::normal_distribution<double> nd(0.0, 1.0);
    Vector z(n);
    for (Index i = 0; i < n; ++i) z[i] = nd(rng);
    return z;
}

inline double uniform01(Rng& rng) {
    boost::random::uniform_real_distribution<double> ud(0.0, 1.0);
    return ud(rng);
}

}  // namespace dfgp
