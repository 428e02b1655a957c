#ifndef MFCT_RNG_HPP
#define MFCT_RNG_HPP

#include <array>
#include <cstdint>

namespace mfct {

// Philox 4x32-10 block cipher (Salmon et al., SC 2011). Counter-based:
// every draw is addressed by (seed, stream, particle, step, index), so the
// value of a draw never depends on how many draws other workers made.
namespace philox {

std::array<std::uint32_t, 4> block(std::uint64_t key, const std::array<std::uint32_t, 4>& counter);

} // namespace philox

// Named sub-streams. Draws from different streams never collide even for
// equal (particle, step, index) addresses.
enum class Stream : std::uint32_t {
    Init = 1,       // initial-state sampling
    Noise = 2,      // Brownian increments
    Probe = 3,      // assumption validators
    Optimizer = 4,  // candidate sampling
    Subsample = 5,  // seeded subsampling for transport distances
    Reference = 6,  // reference-law sampling
    Experiment = 7, // cell-seed derivation
};

// Stateless addressed generator: all accessors are pure functions of the
// address, hence safe to share across threads.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, Stream stream) : seed_(seed), stream_(static_cast<std::uint32_t>(stream)) {}

    // idx-th uniform in (0,1) at address (particle, step).
    double uniform(std::uint32_t particle, std::uint32_t step, std::uint32_t idx) const;

    // idx-th standard normal at address (particle, step).
    double normal(std::uint32_t particle, std::uint32_t step, std::uint32_t idx) const;

    // Fills out[0..n) with consecutive standard normals starting at index 0.
    void normals(std::uint32_t particle, std::uint32_t step, double* out, int n) const;

    std::uint64_t uint64(std::uint32_t particle, std::uint32_t step, std::uint32_t idx) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::array<std::uint32_t, 4> raw(std::uint32_t particle, std::uint32_t step, std::uint32_t blk) const;

    std::uint64_t seed_;
    std::uint32_t stream_;
};

// Derives an independent 64-bit seed from a master seed, for experiment
// cells and similar fan-out.
std::uint64_t derive_seed(std::uint64_t master, std::uint32_t a, std::uint32_t b = 0);

} // namespace mfct

#endif
