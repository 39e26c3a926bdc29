#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "modseg/channel.hpp"
#include "modseg/waveform.hpp"

namespace modseg {

inline constexpr int kImageHeight = 256;
inline constexpr int kImageWidth = 300;
/// Samples needed for kImageWidth columns at the default STFT geometry.
inline constexpr Eigen::Index kFrameSamples = (kImageWidth - 1) * 8 + 256;

/// Rectangular-window STFT geometry.
struct StftConfig {
    int fft_len = 256;       // L
    int window_len = 256;    // J
    int window_shift = 8;    // K

    void validate() const;
};

/// Complex STFT. Rows are fftshifted frequency bins (row 0 <-> -fs/2,
/// row L/2 <-> DC); columns are frames.
struct Spectrogram {
    Eigen::MatrixXcd values;
    double sample_rate = 20e6;
};

using Plane8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 8-bit RGB image stored as three planes (R = Re, G = Im, B = magnitude).
struct RgbImage {
    Plane8 r, g, b;

    Eigen::Index rows() const noexcept { return r.rows(); }
    Eigen::Index cols() const noexcept { return r.cols(); }
    friend bool operator==(const RgbImage& a, const RgbImage& b)
    {
        return a.r.rows() == b.r.rows() && a.r.cols() == b.r.cols() && (a.r == b.r).all() &&
               (a.g == b.g).all() && (a.b == b.b).all();
    }
};

struct EncodedImage {
    RgbImage image;
    double scale = 1.0;
};

/// Provenance of one generated sample.
struct SampleMeta {
    FrameSpec frame;
    ImpairmentSpec impairments;
    std::vector<RbAllocation> allocations;
    std::uint64_t seed = 0;
    double scale = 1.0;
};

struct LabeledSample {
    RgbImage image;
    std::optional<Plane8> mask;  // absent for imported captures
    SampleMeta meta;
};

/// floor((len - J) / K) + 1.
Eigen::Index stft_columns(Eigen::Index signal_len, const StftConfig& cfg);

/// Column m is the DFT of samples [mK, mK + J), zero-padded to L.
Spectrogram stft(const IqSignal& sig, const StftConfig& cfg = {});

/// Per-image max-abs scaling to 8 bits; an all-zero input uses scale 1.
EncodedImage to_image(const Spectrogram& spec);

/// Inverse of the R/G encoding, accurate to scale/255 per component.
Eigen::MatrixXcd decode_image(const RgbImage& img, double scale);

/// Pixel-aligned class mask for the spectrogram of a synthesized frame.
///
/// Column m takes the class of the OFDM symbol containing sample mK + J/2
/// (NoData past the frame). Subcarrier index i spans rows
/// [round(L/2 + (k - 1/2) L/N), round(L/2 + (k + 1/2) L/N)) with k = i - N/2,
/// shifted by round(cfo / (fs / L)) rows and wrapped modulo L.
Plane8 make_mask(const FrameSpec& frame, std::span<const RbAllocation> alloc, double cfo_hz,
                 const StftConfig& cfg = {}, Eigen::Index n_cols = kImageWidth);

/// Row shift applied to masks for a given CFO.
int cfo_row_shift(double cfo_hz, double sample_rate, int fft_len);

}  // namespace modseg
