#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "modseg/waveform.hpp"

namespace modseg {

struct FadingTap {
    int delay = 0;       // samples
    double power = 1.0;  // mean power, linear
};

/// Exponential power-delay profile standing in for TGn model B.
///
/// Nine taps at 0, 10, ..., 80 ns with power proportional to exp(-t / 15 ns),
/// rounded to integer sample delays at `sample_rate` and merged per delay
/// (independent complex Gaussians at one delay sum to one complex Gaussian).
/// Powers are normalized to sum to 1.
std::vector<FadingTap> tgn_b_profile(double sample_rate = 20e6);

struct ImpairmentSpec {
    double snr_db = 15.0;
    bool noise_enabled = true;
    bool fading_enabled = true;  // false: the channel is an ideal unit gain
    double cfo_hz = 0.0;
    double clock_offset = 0.0;  // rate fraction; 0.005 == 0.5 %
    std::vector<FadingTap> fading_taps = {{0, 1.0}};
    std::uint64_t seed = 0;

    void validate() const;
};

/// Intervals the random draws come from (open intervals).
inline constexpr double kMaxCfoHz = 312500.0;
inline constexpr double kMaxClockOffset = 0.005;

/// Draws CFO and clock offset uniformly from their intervals, uses the
/// TGn-B-like profile and the given SNR.
ImpairmentSpec draw_impairments(std::uint64_t seed, double snr_db = 15.0,
                                double sample_rate = 20e6);

struct RealizedImpairments {
    double cfo_hz = 0.0;
    double clock_offset = 0.0;
    std::vector<std::complex<double>> tap_gains;
};

struct ImpairedSignal {
    IqSignal signal;
    RealizedImpairments realized;
};

/// Independent circularly-symmetric complex Gaussian gains with E|g_i|^2 = taps[i].power.
std::vector<std::complex<double>> draw_tap_gains(std::span<const FadingTap> taps, std::uint64_t seed);

/// y(n) = sum_i g_i x(n - d_i), truncated to the input length.
IqSignal apply_taps(const IqSignal& sig, std::span<const FadingTap> taps,
                    std::span<const std::complex<double>> gains);

/// Block fading: one gain draw per call, constant over the signal.
IqSignal apply_fading(const IqSignal& sig, std::span<const FadingTap> taps, std::uint64_t seed);

/// y(n) = x(n) exp(j 2 pi cfo n / fs).
IqSignal apply_cfo(const IqSignal& sig, double cfo_hz);

/// Resamples so that y(n) = x(n (1 + delta)) with a 16-tap Kaiser(beta=8)
/// windowed sinc. The first floor(len / (1 + delta)) outputs are valid; the
/// rest of the input length is zero-filled.
IqSignal apply_clock_offset(const IqSignal& sig, double delta);

/// Adds complex white Gaussian noise of per-sample variance P_sig / 10^(snr/10).
IqSignal add_awgn(const IqSignal& sig, double snr_db, std::uint64_t seed);

/// Fading -> CFO -> clock offset -> AWGN.
ImpairedSignal impair(const IqSignal& sig, const ImpairmentSpec& spec);

/// Mean |x|^2.
double mean_power(const IqSignal& sig) noexcept;

}  // namespace modseg
