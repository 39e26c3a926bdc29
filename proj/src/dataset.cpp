#include "modseg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "modseg/png_io.hpp"
#include "modseg/rng.hpp"

namespace modseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStreamPartition = 1;
constexpr std::uint64_t kStreamBits = 2;
constexpr std::uint64_t kStreamChannel = 3;
constexpr std::uint64_t kStreamSplit = 0x5911;

std::string sample_stem(std::uint64_t id)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(id));
    return buf;
}

json to_json(const FrameSpec& f)
{
    return {{"fft_size", f.fft_size}, {"cp_len", f.cp_len}, {"n_symbols", f.n_symbols},
            {"sample_rate", f.sample_rate}};
}

FrameSpec frame_from_json(const json& j)
{
    FrameSpec f;
    f.fft_size = j.at("fft_size").get<int>();
    f.cp_len = j.at("cp_len").get<int>();
    f.n_symbols = j.at("n_symbols").get<int>();
    f.sample_rate = j.at("sample_rate").get<double>();
    return f;
}

json to_json(const GenerationOptions& g)
{
    return {{"snr_db", g.snr_db},         {"impairments", g.impairments},
            {"p_nodata", g.p_nodata},     {"min_block_f", g.min_block_f},
            {"min_block_t", g.min_block_t}, {"p_stop", g.p_stop}};
}

GenerationOptions generation_from_json(const json& j)
{
    GenerationOptions g;
    g.snr_db = j.at("snr_db").get<double>();
    g.impairments = j.at("impairments").get<bool>();
    g.p_nodata = j.at("p_nodata").get<double>();
    g.min_block_f = j.at("min_block_f").get<int>();
    g.min_block_t = j.at("min_block_t").get<int>();
    g.p_stop = j.at("p_stop").get<double>();
    return g;
}

json header_json(const DatasetConfig& c, const std::array<std::size_t, 3>& counts)
{
    const StftConfig stft_cfg;
    json taps = json::array();
    for (const auto& t : tgn_b_profile()) taps.push_back({{"delay", t.delay}, {"power", t.power}});
    const auto base = ClassDistribution::all_modulations(c.generation.p_nodata);
    const auto extra = ClassDistribution::qam_only(c.generation.p_nodata);
    return {{"format_version", c.format_version},
            {"n_base", c.n_base},
            {"n_extra_qam", c.n_extra_qam},
            {"domain", {{"fft_size", c.domain.fft_size}, {"cp_len", c.domain.cp_len}}},
            {"seed", c.seed},
            {"generation", to_json(c.generation)},
            {"class_distribution", {{"base", base.weights}, {"extra_qam", extra.weights}}},
            {"fading_profile", taps},
            {"stft", {{"fft_len", stft_cfg.fft_len}, {"window_len", stft_cfg.window_len},
                      {"window_shift", stft_cfg.window_shift}, {"window", "rectangular"}}},
            {"image", {{"height", kImageHeight}, {"width", kImageWidth}}},
            {"splits", {{"train", counts[0]}, {"validation", counts[1]}, {"test", counts[2]}}}};
}

json record_json(const SampleRecord& r)
{
    json blocks = json::array();
    for (const auto& a : r.allocations)
        blocks.push_back({a.f0, a.f1, a.t0, a.t1, static_cast<int>(a.mod)});
    return {{"id", r.id},
            {"seed", r.seed},
            {"qam_only", r.qam_only},
            {"split", to_string(r.split)},
            {"frame", to_json(r.frame)},
            {"snr_db", r.snr_db},
            {"cfo_hz", r.cfo_hz},
            {"clock_offset", r.clock_offset},
            {"scale", r.scale},
            {"blocks", blocks},
            {"image", r.image_path},
            {"mask", r.mask_path}};
}

SampleRecord record_from_json(const json& j)
{
    SampleRecord r;
    r.id = j.at("id").get<std::uint64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.qam_only = j.at("qam_only").get<bool>();
    r.split = parse_split(j.at("split").get<std::string>());
    r.frame = frame_from_json(j.at("frame"));
    r.snr_db = j.at("snr_db").get<double>();
    r.cfo_hz = j.at("cfo_hz").get<double>();
    r.clock_offset = j.at("clock_offset").get<double>();
    r.scale = j.at("scale").get<double>();
    for (const auto& b : j.at("blocks")) {
        const int code = b.at(4).get<int>();
        if (code < 0 || code >= kNumClasses) throw MalformedInput("manifest: bad class code");
        r.allocations.push_back(
            {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>(),
             static_cast<ModClass>(code)});
    }
    r.image_path = j.at("image").get<std::string>();
    r.mask_path = j.at("mask").get<std::string>();
    return r;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void DomainSpec::validate() const
{
    if (fft_size < 8 || fft_size > 128)
        throw InvalidInput("DomainSpec: fft_size " + std::to_string(fft_size) + " outside [8,128]");
    if (cp_len < 0 || cp_len > 16)
        throw InvalidInput("DomainSpec: cp_len " + std::to_string(cp_len) + " outside [0,16]");
}

FrameSpec DomainSpec::frame_spec(double sample_rate) const
{
    validate();
    FrameSpec f;
    f.fft_size = fft_size;
    f.cp_len = cp_len;
    const int sym = fft_size + cp_len;
    f.n_symbols = static_cast<int>((kFrameSamples + sym - 1) / sym);
    f.sample_rate = sample_rate;
    return f;
}

std::string DomainSpec::tag() const
{
    return "fft" + std::to_string(fft_size) + "_cp" + std::to_string(cp_len);
}

DomainSpec parse_domain(const std::string& text)
{
    DomainSpec d;
    const auto colon = text.find(':');
    try {
        d.fft_size = std::stoi(text.substr(0, colon));
        if (colon != std::string::npos) d.cp_len = std::stoi(text.substr(colon + 1));
    } catch (const std::exception&) {
        throw InvalidInput("cannot parse domain '" + text + "' (expected fft[:cp])");
    }
    d.validate();
    return d;
}

std::string_view to_string(Split s) noexcept
{
    switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view s)
{
    if (s == "train") return Split::Train;
    if (s == "validation" || s == "val") return Split::Validation;
    if (s == "test") return Split::Test;
    throw InvalidInput("unknown split '" + std::string(s) + "'");
}

std::array<std::size_t, 3> split_counts(std::size_t n) noexcept
{
    const std::size_t val = n * 4 / 100;
    const std::size_t test = n / 100;
    return {n - val - test, val, test};
}

std::vector<std::uint64_t> DatasetManifest::ids(Split split) const
{
    std::vector<std::uint64_t> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(r.id);
    return out;
}

GeneratedFrame generate_frame(const DomainSpec& domain, bool qam_only, std::uint64_t seed,
                              const GenerationOptions& opts)
{
    GeneratedFrame g;
    auto& meta = g.meta;
    meta.seed = seed;
    meta.frame = domain.frame_spec();

    PartitionOptions popts;
    popts.min_f = std::min(opts.min_block_f, meta.frame.fft_size);
    popts.min_t = std::min(opts.min_block_t, meta.frame.n_symbols);
    popts.p_stop = opts.p_stop;
    popts.classes = qam_only ? ClassDistribution::qam_only(opts.p_nodata)
                             : ClassDistribution::all_modulations(opts.p_nodata);
    meta.allocations = partition_grid(meta.frame.fft_size, meta.frame.n_symbols, popts.min_f,
                                      popts.min_t, derive_seed(seed, kStreamPartition), popts);

    const IqSignal clean = synthesize(meta.frame, meta.allocations, derive_seed(seed, kStreamBits));

    IqSignal& rx = g.signal;
    if (opts.impairments) {
        meta.impairments = draw_impairments(derive_seed(seed, kStreamChannel), opts.snr_db,
                                            meta.frame.sample_rate);
        // An all-NoData frame has no power to reference the noise to.
        if (mean_power(clean) == 0.0) meta.impairments.noise_enabled = false;
        rx = impair(clean, meta.impairments).signal;
    } else {
        meta.impairments = ImpairmentSpec{};
        meta.impairments.noise_enabled = false;
        meta.impairments.snr_db = opts.snr_db;
        rx = clean;
    }
    rx.samples.conservativeResize(kFrameSamples);
    return g;
}

LabeledSample generate_sample(const DomainSpec& domain, bool qam_only, std::uint64_t seed,
                              const GenerationOptions& opts)
{
    GeneratedFrame g = generate_frame(domain, qam_only, seed, opts);
    LabeledSample s;
    s.meta = std::move(g.meta);
    const auto enc = to_image(stft(g.signal));
    s.image = enc.image;
    s.meta.scale = enc.scale;
    s.mask = make_mask(s.meta.frame, s.meta.allocations, s.meta.impairments.cfo_hz);
    return s;
}

std::string sample_meta_json(const SampleMeta& m)
{
    json blocks = json::array();
    for (const auto& a : m.allocations)
        blocks.push_back({{"f0", a.f0}, {"f1", a.f1}, {"t0", a.t0}, {"t1", a.t1}, {"class", to_string(a.mod)}});
    json taps = json::array();
    for (const auto& t : m.impairments.fading_taps) taps.push_back({{"delay", t.delay}, {"power", t.power}});
    return json{{"seed", m.seed},
                {"frame", to_json(m.frame)},
                {"impairments",
                 {{"snr_db", m.impairments.snr_db},
                  {"noise", m.impairments.noise_enabled},
                  {"cfo_hz", m.impairments.cfo_hz},
                  {"clock_offset", m.impairments.clock_offset},
                  {"fading_taps", taps}}},
                {"scale", m.scale},
                {"blocks", blocks}}
        .dump(2);
}

LabeledSample regenerate_sample(const DatasetConfig& config, const SampleRecord& rec)
{
    DomainSpec d{rec.frame.fft_size, rec.frame.cp_len};
    return generate_sample(d, rec.qam_only, rec.seed, config.generation);
}

DatasetManifest build_dataset(std::size_t n_base, std::size_t n_extra_qam, const DomainSpec& domain,
                              std::uint64_t seed, const fs::path& out_dir,
                              const GenerationOptions& opts, unsigned jobs)
{
    domain.validate();
    const std::size_t n = n_base + n_extra_qam;
    if (n == 0) throw InvalidInput("build_dataset: need at least one sample");

    std::error_code ec;
    fs::create_directories(out_dir / "img", ec);
    fs::create_directories(out_dir / "mask", ec);
    if (ec || !fs::is_directory(out_dir / "img") || !fs::is_directory(out_dir / "mask"))
        throw IoError("cannot create dataset directories under " + out_dir.string());

    DatasetManifest m;
    m.root = out_dir;
    m.config = {n_base, n_extra_qam, domain, seed, opts, kDatasetFormatVersion};
    m.records.resize(n);

    // Shuffled split assignment.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    CounterRng split_rng(derive_seed(seed, kStreamSplit));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[split_rng.below(i)]);
    const auto counts = split_counts(n);
    std::vector<Split> split_of(n);
    for (std::size_t k = 0; k < n; ++k)
        split_of[perm[k]] = k < counts[0] ? Split::Train
                            : k < counts[0] + counts[1] ? Split::Validation
                                                        : Split::Test;

    auto work = [&](std::size_t i) {
        SampleRecord& r = m.records[i];
        r.id = i;
        r.seed = derive_seed(seed, i);
        r.qam_only = i >= n_base;
        r.split = split_of[i];
        LabeledSample s = generate_sample(domain, r.qam_only, r.seed, opts);
        r.frame = s.meta.frame;
        r.snr_db = s.meta.impairments.snr_db;
        r.cfo_hz = s.meta.impairments.cfo_hz;
        r.clock_offset = s.meta.impairments.clock_offset;
        r.scale = s.meta.scale;
        r.allocations = std::move(s.meta.allocations);
        r.image_path = "img/" + sample_stem(i) + ".png";
        r.mask_path = "mask/" + sample_stem(i) + ".png";
        png::write_rgb(out_dir / r.image_path, s.image);
        png::write_gray(out_dir / r.mask_path, *s.mask);
    };

    jobs = std::max(1u, jobs);
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) work(i);
    } else {
        std::vector<std::exception_ptr> errors(jobs);
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < jobs; ++t)
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < n; i += jobs) work(i);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        pool.clear();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    write_text(out_dir / "header.json", header_json(m.config, counts).dump(2) + "\n");
    std::string lines;
    for (const auto& r : m.records) lines += record_json(r).dump() + "\n";
    write_text(out_dir / "manifest.jsonl", lines);
    return m;
}

DatasetManifest load_manifest(const fs::path& dir)
{
    DatasetManifest m;
    m.root = dir;
    std::ifstream hin(dir / "header.json");
    if (!hin) throw IoError("cannot open " + (dir / "header.json").string());
    json h;
    try {
        h = json::parse(hin);
        m.config.format_version = h.at("format_version").get<int>();
        if (m.config.format_version != kDatasetFormatVersion)
            throw MalformedInput("unsupported dataset format version " +
                                 std::to_string(m.config.format_version));
        m.config.n_base = h.at("n_base").get<std::size_t>();
        m.config.n_extra_qam = h.at("n_extra_qam").get<std::size_t>();
        m.config.domain = {h.at("domain").at("fft_size").get<int>(),
                           h.at("domain").at("cp_len").get<int>()};
        m.config.seed = h.at("seed").get<std::uint64_t>();
        m.config.generation = generation_from_json(h.at("generation"));
    } catch (const json::exception& e) {
        throw MalformedInput("header.json: " + std::string(e.what()));
    }

    std::ifstream min(dir / "manifest.jsonl");
    if (!min) throw IoError("cannot open " + (dir / "manifest.jsonl").string());
    std::string line;
    while (std::getline(min, line)) {
        if (line.empty()) continue;
        try {
            m.records.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw MalformedInput("manifest.jsonl: " + std::string(e.what()));
        }
    }
    for (std::size_t i = 0; i < m.records.size(); ++i)
        if (m.records[i].id != i) throw MalformedInput("manifest.jsonl: ids are not 0..n-1 in order");
    if (m.records.size() != m.config.n_base + m.config.n_extra_qam)
        throw MalformedInput("manifest.jsonl: record count disagrees with header");
    return m;
}

Eigen::ArrayXd image_to_tensor(const RgbImage& img, int channels)
{
    if (channels < 1 || channels > 3) throw InvalidInput("image_to_tensor: channels must be 1..3");
    const Eigen::Index plane = img.rows() * img.cols();
    Eigen::ArrayXd out(plane * channels);
    const Plane8* planes[3] = {&img.r, &img.g, &img.b};
    for (int c = 0; c < channels; ++c)
        out.segment(c * plane, plane) =
            Eigen::Map<const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>>(planes[c]->data(), plane)
                .cast<double>() /
            255.0;
    return out;
}

Example make_example(const LabeledSample& s, std::uint64_t id, int channels)
{
    Example e;
    e.id = id;
    e.channels = channels;
    e.rows = s.image.rows();
    e.cols = s.image.cols();
    e.image = image_to_tensor(s.image, channels);
    if (s.mask) e.mask = *s.mask;
    return e;
}

LabeledSample load_sample(const DatasetManifest& manifest, Split split, std::uint64_t id)
{
    if (id >= manifest.records.size())
        throw InvalidInput("load_sample: sample " + std::to_string(id) + " does not exist");
    const auto& rec = manifest.records[id];
    if (rec.split != split)
        throw InvalidInput("load_sample: sample " + std::to_string(id) + " belongs to split '" +
                           std::string(to_string(rec.split)) + "', not '" + std::string(to_string(split)) + "'");
    LabeledSample s;
    try {
        s.image = png::read_rgb(manifest.root / rec.image_path);
        s.mask = png::read_gray(manifest.root / rec.mask_path);
    } catch (const IoError& e) {
        throw IoError("sample " + sample_stem(id) + ": " + e.what());
    }
    if (s.mask->rows() != s.image.rows() || s.mask->cols() != s.image.cols())
        throw IoError("sample " + sample_stem(id) + ": image and mask dimensions differ");
    if ((*s.mask >= kNumClasses).any())
        throw IoError("sample " + sample_stem(id) + ": mask holds invalid class codes");
    s.meta.frame = rec.frame;
    s.meta.allocations = rec.allocations;
    s.meta.seed = rec.seed;
    s.meta.scale = rec.scale;
    return s;
}

std::vector<Example> load_batch(const DatasetManifest& manifest, Split split,
                                std::span<const std::uint64_t> ids, int channels)
{
    std::vector<Example> batch;
    batch.reserve(ids.size());
    for (const auto id : ids) batch.push_back(make_example(load_sample(manifest, split, id), id, channels));
    return batch;
}

void export_iq(const fs::path& path, const IqSignal& sig)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    auto put = [&](float v) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
        out.write(b, 4);
    };
    for (Eigen::Index n = 0; n < sig.size(); ++n) {
        put(static_cast<float>(sig.samples[n].real()));
        put(static_cast<float>(sig.samples[n].imag()));
    }
    if (!out) throw IoError("failed writing " + path.string());
}

IqSignal read_iq(const fs::path& path, double sample_rate)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % 4 != 0) throw MalformedInput(path.string() + ": size is not a multiple of 4 bytes");
    const std::size_t n_floats = bytes.size() / 4;
    if (n_floats % 2 != 0)
        throw MalformedInput(path.string() + ": odd float count " + std::to_string(n_floats) +
                             " (I/Q pairs expected)");
    IqSignal sig;
    sig.sample_rate = sample_rate;
    sig.samples.resize(static_cast<Eigen::Index>(n_floats / 2));
    auto get = [&](std::size_t k) {
        const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * k]) |
                                (static_cast<std::uint32_t>(bytes[4 * k + 1]) << 8) |
                                (static_cast<std::uint32_t>(bytes[4 * k + 2]) << 16) |
                                (static_cast<std::uint32_t>(bytes[4 * k + 3]) << 24);
        const float f = std::bit_cast<float>(u);
        if (!std::isfinite(f))
            throw MalformedInput(path.string() + ": non-finite value at float " + std::to_string(k));
        return static_cast<double>(f);
    };
    for (std::size_t i = 0; i < n_floats / 2; ++i)
        sig.samples[static_cast<Eigen::Index>(i)] = {get(2 * i), get(2 * i + 1)};
    return sig;
}

LabeledSample import_iq(const fs::path& path, double sample_rate)
{
    const IqSignal sig = read_iq(path, sample_rate);
    const StftConfig cfg;
    if (sig.size() < cfg.window_len)
        throw MalformedInput(path.string() + ": " + std::to_string(sig.size()) +
                             " samples is shorter than one STFT window");
    LabeledSample s;
    const auto enc = to_image(stft(sig, cfg));
    s.image = enc.image;
    s.meta.scale = enc.scale;
    s.meta.frame.sample_rate = sample_rate;
    return s;
}

}  // namespace modseg
