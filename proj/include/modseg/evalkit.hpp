#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modseg/dataset.hpp"
#include "modseg/segnet.hpp"
#include "modseg/trainers.hpp"

namespace modseg {

inline constexpr int kReportFormatVersion = 1;

/// Pixel counts, rows = truth, columns = prediction, indexed by ModClass code.
using Confusion = std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses>;

struct EvalReport {
    Confusion confusion{};
    /// Recall per class; empty when the class has no ground-truth pixels.
    std::array<std::optional<double>, kNumClasses> recall{};
    double overall = 0.0;         // mean recall over classes present in the truth
    double pixel_accuracy = 0.0;  // trace / total
    std::uint64_t pixels = 0;
};

void accumulate_confusion(Confusion& c, std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
EvalReport make_report(const Confusion& c);

/// Confusion over paired masks; every pair must have identical shape.
EvalReport confusion(std::span<const Plane8> pred, std::span<const Plane8> truth);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);

/// Fixed overlay palette indexed by class code:
/// NoData gray, BPSK red, QPSK green, 16-QAM blue, 64-QAM orange.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kPalette{{
    {{128, 128, 128}},
    {{230, 25, 75}},
    {{60, 180, 75}},
    {{0, 130, 200}},
    {{245, 130, 48}},
}};

/// Per-pixel argmax class (lowest code wins ties) for an 8-bit spectrogram.
Plane8 predict_mask(const SegNet& net, const RgbImage& image);

/// Palette color blended 1:1 with the image's magnitude plane.
RgbImage render_overlay(const RgbImage& image, const Plane8& mask);

struct Inference {
    Plane8 mask;
    RgbImage overlay;
};

/// Requires 256 rows and at least 8 columns.
Inference infer(const SegNet& net, const RgbImage& image);

/// Evaluates `net` on samples, spreading samples over `jobs` threads.
EvalReport evaluate_model(const SegNet& net, std::span<const Sample8> samples, unsigned jobs = 1);

// ---- domain sweeps ----------------------------------------------------------

struct DomainTestSet {
    DomainSpec domain;
    std::vector<Sample8> samples;
};

struct SweepRow {
    DomainSpec domain;
    double accuracy = 0.0;        // overall (class-mean) accuracy
    double pixel_accuracy = 0.0;
    bool in_domain = false;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::optional<double> in_domain_mean;
    std::optional<double> out_domain_mean;

    friend bool operator==(const SweepResult&, const SweepResult&) = default;
};

inline bool operator==(const SweepRow& a, const SweepRow& b)
{
    return a.domain == b.domain && a.accuracy == b.accuracy && a.pixel_accuracy == b.pixel_accuracy &&
           a.in_domain == b.in_domain;
}

/// One row per entry of `domains`, each scored on its matching test set.
SweepResult domain_sweep(const SegNet& net, std::span<const DomainSpec> domains,
                         std::span<const DomainTestSet> test_sets, std::span<const DomainSpec> train_domains,
                         unsigned jobs = 1);

/// Fills the in/out-of-domain means from the rows.
void summarize_sweep(SweepResult& r);

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r, const std::string& tag = "");
SweepResult read_sweep_csv(const std::filesystem::path& path);

/// FFT-size experiment: training FFT sizes {8,12,16,24,32,48,64} with CP 8.
std::vector<DomainSpec> fft_training_domains();
/// Every FFT size in [8, 128] with CP 8.
std::vector<DomainSpec> fft_test_domains();
/// CP-length experiment: FFT 32, training CP 0..8, test CP 0..16.
std::vector<DomainSpec> cp_training_domains();
std::vector<DomainSpec> cp_test_domains();

// ---- published reference figures (report-only, never asserted) -------------

struct ClassAccuracyReference {
    std::array<double, kNumClasses> per_class;  // NoData, BPSK, QPSK, 16-QAM, 64-QAM
    double overall;
};

/// Identification accuracy of the flattened-convolution segmenter at full scale.
inline constexpr ClassAccuracyReference kReferenceClassAccuracy{{0.980, 0.934, 0.917, 0.640, 0.588}, 0.798};

struct DgReference {
    const char* algorithm;
    const char* scenario;  // "fixed-cp" (FFT-size domains) or "fixed-fft" (CP-length domains)
    double in_domain;
    double out_domain;
};

inline constexpr std::array<DgReference, 6> kReferenceDg{{
    {"erm", "fixed-cp", 0.622, 0.459},
    {"swad", "fixed-cp", 0.678, 0.477},
    {"mldg", "fixed-cp", 0.512, 0.477},
    {"erm", "fixed-fft", 0.709, 0.679},
    {"swad", "fixed-fft", 0.744, 0.686},
    {"mldg", "fixed-fft", 0.712, 0.656},
}};

}  // namespace modseg
