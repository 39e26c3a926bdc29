#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modseg/spectro.hpp"

namespace modseg {

inline constexpr int kDatasetFormatVersion = 1;

/// OFDM numerology treated as a domain for generalization experiments.
struct DomainSpec {
    int fft_size = 64;
    int cp_len = 8;

    void validate() const;
    /// Frame long enough for a full kImageWidth-column spectrogram.
    FrameSpec frame_spec(double sample_rate = 20e6) const;
    std::string tag() const;  // "fft64_cp8"
    friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

/// Parses "64:8" (fft:cp) or "64" (cp defaults to 8).
DomainSpec parse_domain(const std::string& text);

enum class Split : std::uint8_t { Train = 0, Validation = 1, Test = 2 };

std::string_view to_string(Split s) noexcept;
Split parse_split(std::string_view s);

/// Train/validation/test counts: 4 % and 1 % rounded down, remainder to training.
std::array<std::size_t, 3> split_counts(std::size_t n) noexcept;

struct GenerationOptions {
    double snr_db = 15.0;
    bool impairments = true;  // false: clean frames (no fading, CFO, clock offset or noise)
    double p_nodata = 0.1;
    int min_block_f = 4;
    int min_block_t = 4;
    double p_stop = 0.3;
};

/// Received baseband frame (kFrameSamples long) and its provenance, before imaging.
struct GeneratedFrame {
    IqSignal signal;
    SampleMeta meta;
};

GeneratedFrame generate_frame(const DomainSpec& domain, bool qam_only, std::uint64_t seed,
                              const GenerationOptions& opts = {});

/// waveform -> channel -> spectro for one sample. `qam_only` restricts blocks to {QAM16, QAM64, NoData}.
LabeledSample generate_sample(const DomainSpec& domain, bool qam_only, std::uint64_t seed,
                              const GenerationOptions& opts = {});

struct SampleRecord {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    bool qam_only = false;
    Split split = Split::Train;
    FrameSpec frame;
    double snr_db = 15.0;
    double cfo_hz = 0.0;
    double clock_offset = 0.0;
    double scale = 1.0;
    std::vector<RbAllocation> allocations;
    std::string image_path;  // relative to the dataset root
    std::string mask_path;
};

struct DatasetConfig {
    std::size_t n_base = 0;
    std::size_t n_extra_qam = 0;
    DomainSpec domain;
    std::uint64_t seed = 0;
    GenerationOptions generation;
    int format_version = kDatasetFormatVersion;
};

struct DatasetManifest {
    DatasetConfig config;
    std::filesystem::path root;
    std::vector<SampleRecord> records;  // records[i].id == i

    std::vector<std::uint64_t> ids(Split split) const;
    std::size_t size() const noexcept { return records.size(); }
};

/// Generates all samples, writes out_dir/{header.json, manifest.jsonl, img/, mask/}.
DatasetManifest build_dataset(std::size_t n_base, std::size_t n_extra_qam, const DomainSpec& domain,
                              std::uint64_t seed, const std::filesystem::path& out_dir,
                              const GenerationOptions& opts = {}, unsigned jobs = 1);

DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Frame, impairments, blocks and scale of a sample as pretty-printed JSON.
std::string sample_meta_json(const SampleMeta& meta);

/// Regenerates one sample from its manifest record and the dataset config.
LabeledSample regenerate_sample(const DatasetConfig& config, const SampleRecord& rec);

/// Float image (channel-major C x H x W, values in [0,1]) with its class mask.
struct Example {
    std::uint64_t id = 0;
    int channels = 3;
    Eigen::Index rows = 0, cols = 0;
    Eigen::ArrayXd image;
    Plane8 mask;
};

/// Converts an 8-bit image to floats in [0,1], keeping the first `channels` planes.
Eigen::ArrayXd image_to_tensor(const RgbImage& img, int channels = 3);
Example make_example(const LabeledSample& s, std::uint64_t id = 0, int channels = 3);

/// Reads one sample's image and mask; the id must belong to `split`.
LabeledSample load_sample(const DatasetManifest& manifest, Split split, std::uint64_t id);

/// Loads samples by id; every id must belong to `split`.
std::vector<Example> load_batch(const DatasetManifest& manifest, Split split,
                                std::span<const std::uint64_t> ids, int channels = 3);

/// Interleaved little-endian float32 I/Q.
void export_iq(const std::filesystem::path& path, const IqSignal& sig);
IqSignal read_iq(const std::filesystem::path& path, double sample_rate);

/// Spectrogram image of a raw capture (no mask).
LabeledSample import_iq(const std::filesystem::path& path, double sample_rate = 20e6);

}  // namespace modseg
