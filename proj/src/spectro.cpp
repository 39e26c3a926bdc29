#include "modseg/spectro.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>

namespace modseg {

namespace {

std::uint8_t quantize(double v)
{
    const double q = std::floor(v + 0.5);
    return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace

void StftConfig::validate() const
{
    if (fft_len < 1 || window_len < 1 || window_shift < 1)
        throw InvalidInput("StftConfig: sizes must be positive");
    if (window_len > fft_len) throw InvalidInput("StftConfig: window_len must not exceed fft_len");
}

Eigen::Index stft_columns(Eigen::Index signal_len, const StftConfig& cfg)
{
    cfg.validate();
    if (signal_len < cfg.window_len) return 0;
    return (signal_len - cfg.window_len) / cfg.window_shift + 1;
}

Spectrogram stft(const IqSignal& sig, const StftConfig& cfg)
{
    cfg.validate();
    if (sig.size() < cfg.window_len)
        throw InvalidInput("stft: signal of " + std::to_string(sig.size()) +
                           " samples is shorter than the window (" +
                           std::to_string(cfg.window_len) + ")");
    const Eigen::Index cols = stft_columns(sig.size(), cfg);
    const int L = cfg.fft_len;

    Spectrogram out;
    out.sample_rate = sig.sample_rate;
    out.values.resize(L, cols);

    Eigen::FFT<double> fft;
    Eigen::VectorXcd frame = Eigen::VectorXcd::Zero(L);
    Eigen::VectorXcd bins(L);
    for (Eigen::Index m = 0; m < cols; ++m) {
        frame.head(cfg.window_len) = sig.samples.segment(m * cfg.window_shift, cfg.window_len);
        fft.fwd(bins, frame);
        for (int r = 0; r < L; ++r) {
            const int k = r - L / 2;
            out.values(r, m) = bins[((k % L) + L) % L];
        }
    }
    return out;
}

EncodedImage to_image(const Spectrogram& spec)
{
    const auto& v = spec.values;
    if (!v.allFinite()) throw InvalidInput("to_image: non-finite spectrogram entries");

    double s = 0.0;
    if (v.size() > 0) s = std::max(v.real().cwiseAbs().maxCoeff(), v.imag().cwiseAbs().maxCoeff());
    if (s == 0.0) s = 1.0;

    EncodedImage out;
    out.scale = s;
    auto& img = out.image;
    img.r.resize(v.rows(), v.cols());
    img.g.resize(v.rows(), v.cols());
    img.b.resize(v.rows(), v.cols());
    const double mag_norm = s * std::sqrt(2.0);
    for (Eigen::Index i = 0; i < v.rows(); ++i)
        for (Eigen::Index j = 0; j < v.cols(); ++j) {
            const std::complex<double> c = v(i, j);
            img.r(i, j) = quantize(255.0 * (c.real() / s + 1.0) / 2.0);
            img.g(i, j) = quantize(255.0 * (c.imag() / s + 1.0) / 2.0);
            img.b(i, j) = quantize(255.0 * std::abs(c) / mag_norm);
        }
    return out;
}

Eigen::MatrixXcd decode_image(const RgbImage& img, double scale)
{
    Eigen::MatrixXcd out(img.rows(), img.cols());
    for (Eigen::Index i = 0; i < img.rows(); ++i)
        for (Eigen::Index j = 0; j < img.cols(); ++j)
            out(i, j) = {(2.0 * img.r(i, j) / 255.0 - 1.0) * scale,
                         (2.0 * img.g(i, j) / 255.0 - 1.0) * scale};
    return out;
}

int cfo_row_shift(double cfo_hz, double sample_rate, int fft_len)
{
    return static_cast<int>(std::lround(cfo_hz / (sample_rate / fft_len)));
}

Plane8 make_mask(const FrameSpec& frame, std::span<const RbAllocation> alloc, double cfo_hz,
                 const StftConfig& cfg, Eigen::Index n_cols)
{
    frame.validate();
    cfg.validate();
    validate_allocations(frame, alloc);

    const int N = frame.fft_size;
    const int L = cfg.fft_len;
    // class of (subcarrier index, symbol)
    Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> grid(N, frame.n_symbols);
    for (const auto& a : alloc)
        grid.block(a.f0, a.t0, a.f1 - a.f0, a.t1 - a.t0).setConstant(static_cast<std::uint8_t>(a.mod));

    // row -> subcarrier index (or -1 when no subcarrier maps there)
    std::vector<int> row_owner(static_cast<std::size_t>(L), -1);
    const double rows_per_sc = static_cast<double>(L) / N;
    const int shift = cfo_row_shift(cfo_hz, frame.sample_rate, L);
    for (int i = 0; i < N; ++i) {
        const int k = i - N / 2;
        const int lo = round_half_up(L / 2.0 + (k - 0.5) * rows_per_sc);
        const int hi = round_half_up(L / 2.0 + (k + 0.5) * rows_per_sc);
        for (int r = lo; r < hi; ++r) row_owner[static_cast<std::size_t>(((r + shift) % L + L) % L)] = i;
    }

    Plane8 mask = Plane8::Zero(L, n_cols);
    for (Eigen::Index m = 0; m < n_cols; ++m) {
        const Eigen::Index center = m * cfg.window_shift + cfg.window_len / 2;
        const Eigen::Index sym = center / frame.symbol_len();
        if (sym >= frame.n_symbols) continue;
        for (int r = 0; r < L; ++r) {
            const int i = row_owner[static_cast<std::size_t>(r)];
            if (i >= 0) mask(r, m) = grid(i, static_cast<Eigen::Index>(sym));
        }
    }
    return mask;
}

}  // namespace modseg
