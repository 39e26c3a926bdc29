#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modseg/error.hpp"

namespace modseg {

template <typename Scalar>
using CVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;

/// Modulation label of a resource block. Integer codes are written to mask files.
enum class ModClass : std::uint8_t { NoData = 0, BPSK = 1, QPSK = 2, QAM16 = 3, QAM64 = 4 };

inline constexpr int kNumClasses = 5;

constexpr int bits_per_symbol(ModClass m) noexcept
{
    switch (m) {
    case ModClass::BPSK: return 1;
    case ModClass::QPSK: return 2;
    case ModClass::QAM16: return 4;
    case ModClass::QAM64: return 6;
    default: return 0;
    }
}

std::string_view to_string(ModClass m) noexcept;

/// OFDM numerology of one frame.
struct FrameSpec {
    int fft_size = 64;
    int cp_len = 8;
    int n_symbols = 37;
    double sample_rate = 20e6;

    int symbol_len() const noexcept { return fft_size + cp_len; }
    Eigen::Index total_samples() const noexcept
    {
        return static_cast<Eigen::Index>(n_symbols) * symbol_len();
    }
    void validate() const;
};

/// A rectangular region [f0,f1) x [t0,t1) of the grid. Subcarrier index i
/// maps to the signed subcarrier i - fft_size/2, so index 0 is the lowest
/// frequency.
struct RbAllocation {
    int f0 = 0, f1 = 0;
    int t0 = 0, t1 = 0;
    ModClass mod = ModClass::NoData;

    int area() const noexcept { return (f1 - f0) * (t1 - t0); }
    friend bool operator==(const RbAllocation&, const RbAllocation&) = default;
};

/// Complex baseband samples.
struct IqSignal {
    CVector<double> samples;
    double sample_rate = 20e6;

    Eigen::Index size() const noexcept { return samples.size(); }
};

/// Probability of drawing each ModClass for a block (indexed by class code).
struct ClassDistribution {
    std::array<double, kNumClasses> weights{};

    /// Four modulated classes equally likely, NoData with probability p_nodata.
    static ClassDistribution all_modulations(double p_nodata = 0.1);
    /// QAM16 and QAM64 equally likely, NoData with probability p_nodata.
    static ClassDistribution qam_only(double p_nodata = 0.1);

    ModClass draw(double u) const noexcept;
};

struct PartitionOptions {
    int min_f = 4;
    int min_t = 4;
    double p_stop = 0.3;
    ClassDistribution classes = ClassDistribution::all_modulations();
};

/**
 * Maps bits to a Gray-coded, unit-average-energy constellation.
 *
 * Bit 0 maps to the positive half of an axis. Even-indexed bits of each
 * symbol drive I and odd-indexed bits drive Q; within an axis the first bit
 * is the sign and the rest Gray-code the amplitude level (2i+1), so the
 * levels are {+-1, +-3, ...} before normalization.
 */
template <typename Scalar = double>
CVector<Scalar> map_bits_to_symbols(std::span<const std::uint8_t> bits, ModClass mod)
{
    const int bps = bits_per_symbol(mod);
    if (bps == 0) throw InvalidInput("map_bits_to_symbols: NoData carries no symbols");
    if (bits.size() % static_cast<std::size_t>(bps) != 0)
        throw InvalidInput("map_bits_to_symbols: " + std::to_string(bits.size()) +
                           " bits is not a multiple of " + std::to_string(bps));

    const auto n = static_cast<Eigen::Index>(bits.size() / static_cast<std::size_t>(bps));
    CVector<Scalar> out(n);
    if (mod == ModClass::BPSK) {
        for (Eigen::Index i = 0; i < n; ++i)
            out[i] = {Scalar(1) - Scalar(2) * Scalar(bits[static_cast<std::size_t>(i)] & 1u), Scalar(0)};
        return out;
    }

    const int per_axis = bps / 2;
    // Average energy of the square constellation with levels +-1, +-3, ...
    const int m_axis = 1 << per_axis;
    const Scalar norm = std::sqrt(Scalar(2) * Scalar(m_axis * m_axis - 1) / Scalar(3));

    auto axis_level = [&](const std::uint8_t* b, int parity) {
        const Scalar sign = (b[parity] & 1u) ? Scalar(-1) : Scalar(1);
        // Gray-decode the remaining bits into a magnitude index.
        unsigned gray_acc = 0, idx = 0;
        for (int j = 1; j < per_axis; ++j) {
            gray_acc ^= (b[2 * j + parity] & 1u);
            idx = (idx << 1) | gray_acc;
        }
        return sign * Scalar(2 * idx + 1);
    };

    for (Eigen::Index i = 0; i < n; ++i) {
        const std::uint8_t* b = bits.data() + i * bps;
        out[i] = {axis_level(b, 0) / norm, axis_level(b, 1) / norm};
    }
    return out;
}

/// Random guillotine partition of an fft_size x n_symbols grid with per-block classes.
std::vector<RbAllocation> partition_grid(int fft_size, int n_symbols, int min_f, int min_t,
                                         std::uint64_t seed,
                                         const PartitionOptions& opts = {});

/// Checks that allocations lie inside the grid and tile it exactly.
void validate_allocations(const FrameSpec& spec, std::span<const RbAllocation> alloc);

/// Frequency-domain grid (fft_size rows in FFT-bin order x n_symbols columns).
Eigen::MatrixXcd build_resource_grid(const FrameSpec& spec, std::span<const RbAllocation> alloc,
                                     std::uint64_t seed);

/// OFDM modulation of an explicit bin grid: unitary inverse DFT plus cyclic prefix.
IqSignal modulate_grid(const FrameSpec& spec, const Eigen::MatrixXcd& bins);

/// Fills each allocation with i.i.d. uniform bits, maps them, and OFDM-modulates.
IqSignal synthesize(const FrameSpec& spec, std::span<const RbAllocation> alloc, std::uint64_t seed);

/// FFT bin (0..fft_size-1) of allocation subcarrier index i.
constexpr int subcarrier_bin(int index, int fft_size) noexcept
{
    const int k = index - fft_size / 2;
    return ((k % fft_size) + fft_size) % fft_size;
}

}  // namespace modseg
