#include "mfct/rng.hpp"

#include <cmath>

namespace mfct {
namespace philox {

namespace {

constexpr std::uint32_t kW32A = 0x9E3779B9u;
constexpr std::uint32_t kW32B = 0xBB67AE85u;
constexpr std::uint32_t kM4x32A = 0xD2511F53u;
constexpr std::uint32_t kM4x32B = 0xCD9E8D57u;

inline void mul_hilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo, std::uint32_t& hi)
{
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    lo = static_cast<std::uint32_t>(p);
    hi = static_cast<std::uint32_t>(p >> 32);
}

inline void round_once(std::uint32_t ctr[4], const std::uint32_t key[2])
{
    std::uint32_t lo0, hi0, lo1, hi1;
    mul_hilo(kM4x32A, ctr[0], lo0, hi0);
    mul_hilo(kM4x32B, ctr[2], lo1, hi1);
    const std::uint32_t out0 = hi1 ^ ctr[1] ^ key[0];
    const std::uint32_t out1 = lo1;
    const std::uint32_t out2 = hi0 ^ ctr[3] ^ key[1];
    const std::uint32_t out3 = lo0;
    ctr[0] = out0;
    ctr[1] = out1;
    ctr[2] = out2;
    ctr[3] = out3;
}

} // namespace

std::array<std::uint32_t, 4> block(std::uint64_t key, const std::array<std::uint32_t, 4>& counter)
{
    std::uint32_t c[4] = {counter[0], counter[1], counter[2], counter[3]};
    std::uint32_t k[2] = {static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
    for (int r = 0; r < 10; ++r) {
        round_once(c, k);
        k[0] += kW32A;
        k[1] += kW32B;
    }
    return {c[0], c[1], c[2], c[3]};
}

} // namespace philox

namespace {

inline std::uint64_t join64(std::uint32_t hi, std::uint32_t lo)
{
    return (static_cast<std::uint64_t>(hi) << 32) | lo;
}

// 53-bit mantissa uniform, shifted into the open interval (0,1).
inline double u01_open(std::uint64_t bits)
{
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

} // namespace

std::array<std::uint32_t, 4> CounterRng::raw(std::uint32_t particle, std::uint32_t step, std::uint32_t blk) const
{
    // counter = (block index, step, particle, stream) keyed by the seed
    return philox::block(seed_, {blk, step, particle, stream_});
}

double CounterRng::uniform(std::uint32_t particle, std::uint32_t step, std::uint32_t idx) const
{
    const auto w = raw(particle, step, idx / 2);
    const std::uint64_t bits = (idx % 2 == 0) ? join64(w[0], w[1]) : join64(w[2], w[3]);
    return u01_open(bits);
}

std::uint64_t CounterRng::uint64(std::uint32_t particle, std::uint32_t step, std::uint32_t idx) const
{
    const auto w = raw(particle, step, idx / 2);
    return (idx % 2 == 0) ? join64(w[0], w[1]) : join64(w[2], w[3]);
}

double CounterRng::normal(std::uint32_t particle, std::uint32_t step, std::uint32_t idx) const
{
    // Box-Muller pair (2 normals per Philox block).
    const auto w = raw(particle, step, idx / 2);
    const double u1 = u01_open(join64(w[0], w[1]));
    const double u2 = u01_open(join64(w[2], w[3]));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    return (idx % 2 == 0) ? r * std::cos(a) : r * std::sin(a);
}

void CounterRng::normals(std::uint32_t particle, std::uint32_t step, double* out, int n) const
{
    int i = 0;
    for (std::uint32_t blk = 0; i < n; ++blk) {
        const auto w = raw(particle, step, blk);
        const double u1 = u01_open(join64(w[0], w[1]));
        const double u2 = u01_open(join64(w[2], w[3]));
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        out[i++] = r * std::cos(a);
        if (i < n) out[i++] = r * std::sin(a);
    }
}

std::uint64_t derive_seed(std::uint64_t master, std::uint32_t a, std::uint32_t b)
{
    const auto w = philox::block(master, {a, b, 0x5eedu, static_cast<std::uint32_t>(Stream::Experiment)});
    return join64(w[0], w[3]);
}

} // namespace mfct
