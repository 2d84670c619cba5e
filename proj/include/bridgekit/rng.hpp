#pragma once

#include <cstdint>
#include <array>

#include "bridgekit/numerics.hpp"

namespace bridgekit {

/// Counter-based generator (Philox4x32-10). A draw is a pure function of
/// (seed, path, step, index), so parallel filling in any order, with any
/// number of threads, produces the same stream.
class Philox {
public:
    explicit Philox(std::uint64_t seed) : k0_(std::uint32_t(seed)), k1_(std::uint32_t(seed >> 32)) {}

    /// 64 uniform bits for counter (path, step, block).
    std::uint64_t bits(std::uint64_t path, std::uint32_t step, std::uint32_t block) const {
        std::array<std::uint32_t, 4> c = {block, step, std::uint32_t(path), std::uint32_t(path >> 32)};
        std::uint32_t k0 = k0_, k1 = k1_;
        for (int r = 0; r < 10; ++r) {
            const std::uint64_t p0 = std::uint64_t(0xD2511F53u) * c[0];
            const std::uint64_t p1 = std::uint64_t(0xCD9E8D57u) * c[2];
            c = {std::uint32_t(p1 >> 32) ^ c[1] ^ k0, std::uint32_t(p1),
                 std::uint32_t(p0 >> 32) ^ c[3] ^ k1, std::uint32_t(p0)};
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        return (std::uint64_t(c[0]) << 32) | c[1];
    }

    /// Uniform in (0,1), strictly inside the open interval.
    double uniform(std::uint64_t path, std::uint32_t step, std::uint32_t block) const {
        const std::uint64_t u = bits(path, step, block);
        return double(u >> 11) * 0x1.0p-53 + 0x1.0p-54;
    }

    /// Standard normal via inverse cdf of the uniform draw.
    double normal(std::uint64_t path, std::uint32_t step, std::uint32_t block) const {
        return normal_inv_cdf(uniform(path, step, block));
    }

private:
    std::uint32_t k0_, k1_;
};

/// Seed plus the per-path substream discipline.
struct RngSpec {
    std::uint64_t seed = 20240901ull;
};

} // namespace bridgekit
