#include "modseg/channel.hpp"

#include <cmath>
#include <map>
#include <numbers>

#include "modseg/rng.hpp"

namespace modseg {

namespace {

constexpr int kSincHalfTaps = 8;  // 16 taps total
constexpr double kKaiserBeta = 8.0;

double kaiser(double u)
{
    if (std::abs(u) > 1.0) return 0.0;
    static const double denom = std::cyl_bessel_i(0.0, kKaiserBeta);
    return std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(1.0 - u * u)) / denom;
}

double sinc(double x)
{
    if (x == 0.0) return 1.0;
    const double px = std::numbers::pi * x;
    return std::sin(px) / px;
}

}  // namespace

std::vector<FadingTap> tgn_b_profile(double sample_rate)
{
    constexpr double kSpacingNs = 10.0;
    constexpr double kDecayNs = 15.0;
    std::map<int, double> merged;
    for (int i = 0; i < 9; ++i) {
        const double t_ns = kSpacingNs * i;
        const int delay = static_cast<int>(std::lround(t_ns * 1e-9 * sample_rate));
        merged[delay] += std::exp(-t_ns / kDecayNs);
    }
    double total = 0.0;
    for (const auto& [d, p] : merged) total += p;
    std::vector<FadingTap> taps;
    for (const auto& [d, p] : merged) taps.push_back({d, p / total});
    return taps;
}

void ImpairmentSpec::validate() const
{
    if (!std::isfinite(snr_db)) throw InvalidInput("ImpairmentSpec: snr_db must be finite");
    if (!std::isfinite(cfo_hz)) throw InvalidInput("ImpairmentSpec: cfo_hz must be finite");
    if (!(std::abs(clock_offset) < 0.01))
        throw InvalidInput("ImpairmentSpec: |clock_offset| must be < 0.01");
    if (fading_taps.empty()) throw InvalidInput("ImpairmentSpec: empty fading profile");
    double total = 0.0;
    for (const auto& t : fading_taps) {
        if (t.delay < 0 || !(t.power >= 0.0)) throw InvalidInput("ImpairmentSpec: bad tap");
        total += t.power;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("ImpairmentSpec: tap powers must sum to 1");
}

ImpairmentSpec draw_impairments(std::uint64_t seed, double snr_db, double sample_rate)
{
    CounterRng rng(derive_seed(seed, 0x0c0ffee));
    ImpairmentSpec spec;
    spec.snr_db = snr_db;
    spec.cfo_hz = rng.uniform_open(-kMaxCfoHz, kMaxCfoHz);
    spec.clock_offset = rng.uniform_open(-kMaxClockOffset, kMaxClockOffset);
    spec.fading_taps = tgn_b_profile(sample_rate);
    spec.seed = seed;
    return spec;
}

double mean_power(const IqSignal& sig) noexcept
{
    if (sig.size() == 0) return 0.0;
    return sig.samples.squaredNorm() / static_cast<double>(sig.size());
}

std::vector<std::complex<double>> draw_tap_gains(std::span<const FadingTap> taps, std::uint64_t seed)
{
    if (taps.empty()) throw InvalidInput("apply_fading: empty tap list");
    CounterRng rng(seed);
    std::vector<std::complex<double>> gains;
    gains.reserve(taps.size());
    for (const auto& t : taps) {
        const double sigma = std::sqrt(t.power / 2.0);
        const double re = rng.normal();
        const double im = rng.normal();
        gains.emplace_back(sigma * re, sigma * im);
    }
    return gains;
}

IqSignal apply_taps(const IqSignal& sig, std::span<const FadingTap> taps,
                    std::span<const std::complex<double>> gains)
{
    if (taps.empty()) throw InvalidInput("apply_fading: empty tap list");
    if (taps.size() != gains.size()) throw InvalidInput("apply_taps: gain count mismatch");
    IqSignal out{Eigen::VectorXcd::Zero(sig.size()), sig.sample_rate};
    const Eigen::Index n = sig.size();
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const Eigen::Index d = taps[i].delay;
        if (d < 0) throw InvalidInput("apply_fading: negative tap delay");
        if (d >= n) continue;
        out.samples.tail(n - d) += gains[i] * sig.samples.head(n - d);
    }
    return out;
}

IqSignal apply_fading(const IqSignal& sig, std::span<const FadingTap> taps, std::uint64_t seed)
{
    const auto gains = draw_tap_gains(taps, seed);
    return apply_taps(sig, taps, gains);
}

IqSignal apply_cfo(const IqSignal& sig, double cfo_hz)
{
    IqSignal out = sig;
    if (cfo_hz == 0.0) return out;
    const double w = 2.0 * std::numbers::pi * cfo_hz / sig.sample_rate;
    for (Eigen::Index n = 0; n < sig.size(); ++n)
        out.samples[n] *= std::polar(1.0, w * static_cast<double>(n));
    return out;
}

IqSignal apply_clock_offset(const IqSignal& sig, double delta)
{
    if (!(std::abs(delta) < 0.01)) throw InvalidInput("apply_clock_offset: |delta| must be < 0.01");
    const Eigen::Index n_in = sig.size();
    IqSignal out{Eigen::VectorXcd::Zero(n_in), sig.sample_rate};
    const double rate = 1.0 + delta;
    const auto n_valid = std::min<Eigen::Index>(
        n_in, static_cast<Eigen::Index>(std::floor(static_cast<double>(n_in) / rate)));

    for (Eigen::Index n = 0; n < n_valid; ++n) {
        const double t = static_cast<double>(n) * rate;
        const double base = std::floor(t);
        const auto i0 = static_cast<Eigen::Index>(base);
        const double frac = t - base;
        if (frac == 0.0) {
            if (i0 < n_in) out.samples[n] = sig.samples[i0];
            continue;
        }
        std::complex<double> acc{0.0, 0.0};
        for (Eigen::Index i = i0 - kSincHalfTaps + 1; i <= i0 + kSincHalfTaps; ++i) {
            if (i < 0 || i >= n_in) continue;
            const double x = t - static_cast<double>(i);
            acc += sig.samples[i] * (sinc(x) * kaiser(x / kSincHalfTaps));
        }
        out.samples[n] = acc;
    }
    return out;
}

IqSignal add_awgn(const IqSignal& sig, double snr_db, std::uint64_t seed)
{
    if (!std::isfinite(snr_db)) throw InvalidInput("add_awgn: snr_db must be finite");
    const double p_sig = mean_power(sig);
    if (!(p_sig > 0.0)) throw InvalidInput("add_awgn: signal power is zero, SNR undefined");
    const double sigma = std::sqrt(p_sig / std::pow(10.0, snr_db / 10.0) / 2.0);
    CounterRng rng(seed);
    IqSignal out = sig;
    for (Eigen::Index n = 0; n < out.size(); ++n) {
        const double re = rng.normal();
        const double im = rng.normal();
        out.samples[n] += std::complex<double>(sigma * re, sigma * im);
    }
    return out;
}

ImpairedSignal impair(const IqSignal& sig, const ImpairmentSpec& spec)
{
    spec.validate();
    ImpairedSignal result;
    result.realized.cfo_hz = spec.cfo_hz;
    result.realized.clock_offset = spec.clock_offset;
    IqSignal x = sig;
    if (spec.fading_enabled) {
        result.realized.tap_gains = draw_tap_gains(spec.fading_taps, derive_seed(spec.seed, 1));
        x = apply_taps(sig, spec.fading_taps, result.realized.tap_gains);
    }
    x = apply_cfo(x, spec.cfo_hz);
    x = apply_clock_offset(x, spec.clock_offset);
    if (spec.noise_enabled) x = add_awgn(x, spec.snr_db, derive_seed(spec.seed, 2));
    result.signal = std::move(x);
    return result;
}

}  // namespace modseg
