#include "modseg/waveform.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>

#include "modseg/rng.hpp"

namespace modseg {

std::string_view to_string(ModClass m) noexcept
{
    switch (m) {
    case ModClass::NoData: return "nodata";
    case ModClass::BPSK: return "bpsk";
    case ModClass::QPSK: return "qpsk";
    case ModClass::QAM16: return "qam16";
    case ModClass::QAM64: return "qam64";
    }
    return "?";
}

void FrameSpec::validate() const
{
    if (fft_size < 2) throw InvalidInput("FrameSpec: fft_size must be >= 2");
    if (cp_len < 0) throw InvalidInput("FrameSpec: cp_len must be >= 0");
    if (n_symbols < 1) throw InvalidInput("FrameSpec: n_symbols must be >= 1");
    if (!(sample_rate > 0.0) || !std::isfinite(sample_rate))
        throw InvalidInput("FrameSpec: sample_rate must be positive");
}

ClassDistribution ClassDistribution::all_modulations(double p_nodata)
{
    const double p = (1.0 - p_nodata) / 4.0;
    return {{p_nodata, p, p, p, p}};
}

ClassDistribution ClassDistribution::qam_only(double p_nodata)
{
    const double p = (1.0 - p_nodata) / 2.0;
    return {{p_nodata, 0.0, 0.0, p, p}};
}

ModClass ClassDistribution::draw(double u) const noexcept
{
    double total = 0.0;
    for (double w : weights) total += w;
    double acc = 0.0;
    int last_nonzero = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        if (weights[static_cast<std::size_t>(c)] <= 0.0) continue;
        last_nonzero = c;
        acc += weights[static_cast<std::size_t>(c)] / total;
        if (u < acc) return static_cast<ModClass>(c);
    }
    return static_cast<ModClass>(last_nonzero);
}

std::vector<RbAllocation> partition_grid(int fft_size, int n_symbols, int min_f, int min_t,
                                         std::uint64_t seed, const PartitionOptions& opts)
{
    if (fft_size < 1 || n_symbols < 1) throw InvalidInput("partition_grid: empty grid");
    if (min_f < 1 || min_t < 1 || min_f > fft_size || min_t > n_symbols)
        throw InvalidInput("partition_grid: minimum block size out of range");

    CounterRng split_rng(derive_seed(seed, 0));
    CounterRng class_rng(derive_seed(seed, 1));

    struct Pending {
        RbAllocation block;
        bool split_freq;
    };
    std::vector<RbAllocation> leaves;
    std::vector<Pending> stack;
    stack.push_back({{0, fft_size, 0, n_symbols, ModClass::NoData}, split_rng.bit() == 0});

    // Depth-first, lower/left child first, so leaf order is deterministic.
    while (!stack.empty()) {
        auto [b, split_freq] = stack.back();
        stack.pop_back();
        const int w = b.f1 - b.f0;
        const int h = b.t1 - b.t0;
        const bool can_f = w >= 2 * min_f;
        const bool can_t = h >= 2 * min_t;
        if (!can_f && !can_t) {
            leaves.push_back(b);
            continue;
        }
        const bool small = w <= 2 * min_f && h <= 2 * min_t;
        if (small && split_rng.uniform() < opts.p_stop) {
            leaves.push_back(b);
            continue;
        }
        if (split_freq && !can_f) split_freq = false;
        if (!split_freq && !can_t) split_freq = true;

        RbAllocation lo = b, hi = b;
        if (split_freq) {
            const int cut = b.f0 + min_f + static_cast<int>(split_rng.below(
                                                 static_cast<std::uint64_t>(w - 2 * min_f + 1)));
            lo.f1 = cut;
            hi.f0 = cut;
        } else {
            const int cut = b.t0 + min_t + static_cast<int>(split_rng.below(
                                                 static_cast<std::uint64_t>(h - 2 * min_t + 1)));
            lo.t1 = cut;
            hi.t0 = cut;
        }
        stack.push_back({hi, !split_freq});
        stack.push_back({lo, !split_freq});
    }

    for (auto& leaf : leaves) leaf.mod = opts.classes.draw(class_rng.uniform());
    return leaves;
}

void validate_allocations(const FrameSpec& spec, std::span<const RbAllocation> alloc)
{
    std::vector<std::uint8_t> covered(static_cast<std::size_t>(spec.fft_size) *
                                          static_cast<std::size_t>(spec.n_symbols),
                                      0);
    for (const auto& a : alloc) {
        if (a.f0 < 0 || a.f0 >= a.f1 || a.f1 > spec.fft_size || a.t0 < 0 || a.t0 >= a.t1 ||
            a.t1 > spec.n_symbols)
            throw InvalidInput("allocation [" + std::to_string(a.f0) + "," + std::to_string(a.f1) +
                               ")x[" + std::to_string(a.t0) + "," + std::to_string(a.t1) +
                               ") lies outside the " + std::to_string(spec.fft_size) + "x" +
                               std::to_string(spec.n_symbols) + " grid");
        if (static_cast<int>(a.mod) >= kNumClasses) throw InvalidInput("allocation: bad class code");
        for (int t = a.t0; t < a.t1; ++t)
            for (int f = a.f0; f < a.f1; ++f) {
                auto& c = covered[static_cast<std::size_t>(t) * static_cast<std::size_t>(spec.fft_size) +
                                  static_cast<std::size_t>(f)];
                if (c) throw InvalidInput("allocations overlap");
                c = 1;
            }
    }
    if (std::find(covered.begin(), covered.end(), std::uint8_t{0}) != covered.end())
        throw InvalidInput("allocations do not cover the grid");
}

Eigen::MatrixXcd build_resource_grid(const FrameSpec& spec, std::span<const RbAllocation> alloc,
                                     std::uint64_t seed)
{
    spec.validate();
    validate_allocations(spec, alloc);
    Eigen::MatrixXcd bins = Eigen::MatrixXcd::Zero(spec.fft_size, spec.n_symbols);

    std::vector<std::uint8_t> bits;
    for (std::size_t bi = 0; bi < alloc.size(); ++bi) {
        const auto& a = alloc[bi];
        const int bps = bits_per_symbol(a.mod);
        if (bps == 0) continue;
        CounterRng rng(derive_seed(seed, bi));
        bits.resize(static_cast<std::size_t>(a.area() * bps));
        for (auto& b : bits) b = static_cast<std::uint8_t>(rng.bit());
        const CVector<double> syms = map_bits_to_symbols<double>(bits, a.mod);
        Eigen::Index s = 0;
        for (int t = a.t0; t < a.t1; ++t)
            for (int f = a.f0; f < a.f1; ++f) bins(subcarrier_bin(f, spec.fft_size), t) = syms[s++];
    }
    return bins;
}

IqSignal modulate_grid(const FrameSpec& spec, const Eigen::MatrixXcd& bins)
{
    spec.validate();
    if (bins.rows() != spec.fft_size || bins.cols() != spec.n_symbols)
        throw InvalidInput("modulate_grid: bin grid shape does not match FrameSpec");

    IqSignal sig;
    sig.sample_rate = spec.sample_rate;
    sig.samples.resize(spec.total_samples());

    Eigen::FFT<double> fft;
    const double unitary = std::sqrt(static_cast<double>(spec.fft_size));
    Eigen::VectorXcd body(spec.fft_size);
    Eigen::VectorXcd col(spec.fft_size);
    for (int t = 0; t < spec.n_symbols; ++t) {
        col = bins.col(t);
        fft.inv(body, col);  // includes the 1/N factor
        body *= unitary;
        const Eigen::Index base = static_cast<Eigen::Index>(t) * spec.symbol_len();
        // Cyclic extension; wraps when the prefix is longer than the body.
        for (int i = 0; i < spec.cp_len; ++i) {
            const int src = ((spec.fft_size - spec.cp_len + i) % spec.fft_size + spec.fft_size) %
                            spec.fft_size;
            sig.samples[base + i] = body[src];
        }
        sig.samples.segment(base + spec.cp_len, spec.fft_size) = body;
    }
    return sig;
}

IqSignal synthesize(const FrameSpec& spec, std::span<const RbAllocation> alloc, std::uint64_t seed)
{
    return modulate_grid(spec, build_resource_grid(spec, alloc, seed));
}

}  // namespace modseg
