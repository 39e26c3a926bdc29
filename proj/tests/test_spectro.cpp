#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "modseg/dataset.hpp"
#include "modseg/error.hpp"
#include "modseg/rng.hpp"
#include "modseg/spectro.hpp"
#include "oracles/naive_dft.hpp"

using namespace modseg;
using cd = std::complex<double>;

namespace {

IqSignal random_signal(Eigen::Index n, std::uint64_t seed)
{
    CounterRng rng(seed);
    IqSignal s;
    s.samples.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) s.samples[i] = cd(rng.normal(), rng.normal());
    return s;
}

// One modulated block padded out with NoData so the allocations tile the grid.
std::vector<RbAllocation> single_block(int f0, int f1, int t0, int t1, ModClass mod, int n_sc, int n_sym)
{
    std::vector<RbAllocation> a{{f0, f1, t0, t1, mod}};
    if (f0 > 0) a.push_back({0, f0, 0, n_sym, ModClass::NoData});
    if (f1 < n_sc) a.push_back({f1, n_sc, 0, n_sym, ModClass::NoData});
    if (t0 > 0) a.push_back({f0, f1, 0, t0, ModClass::NoData});
    if (t1 < n_sym) a.push_back({f0, f1, t1, n_sym, ModClass::NoData});
    return a;
}

struct Box {
    Eigen::Index r0 = -1, r1 = -1, c0 = -1, c1 = -1;  // inclusive
};

// Window smearing ramps column energy linearly over one window, so half of
// the peak marks a block edge in time. Row marginals fluctuate with the
// random symbols and fall off steeply at a band edge; a tenth of the peak
// separates in-band from leakage.
Box energy_box(const Eigen::MatrixXd& e)
{
    Box b;
    const Eigen::VectorXd rows = e.rowwise().sum();
    const Eigen::RowVectorXd cols = e.colwise().sum();
    for (Eigen::Index i = 0; i < rows.size(); ++i)
        if (rows[i] >= 0.1 * rows.maxCoeff()) {
            if (b.r0 < 0) b.r0 = i;
            b.r1 = i;
        }
    for (Eigen::Index j = 0; j < cols.size(); ++j)
        if (cols[j] >= 0.5 * cols.maxCoeff()) {
            if (b.c0 < 0) b.c0 = j;
            b.c1 = j;
        }
    return b;
}

Box mask_box(const Plane8& m)
{
    Box b;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            if (m(i, j) != 0) {
                if (b.r0 < 0 || i < b.r0) b.r0 = i;
                if (b.c0 < 0 || j < b.c0) b.c0 = j;
                b.r1 = std::max(b.r1, i);
                b.c1 = std::max(b.c1, j);
            }
    return b;
}

struct CleanFrame {
    Spectrogram spec;
    Plane8 mask;
};

CleanFrame clean_frame(const std::vector<RbAllocation>& alloc, std::uint64_t seed)
{
    const FrameSpec frame = DomainSpec{}.frame_spec();
    IqSignal sig = synthesize(frame, alloc, seed);
    sig.samples.conservativeResize(kFrameSamples);
    return {stft(sig), make_mask(frame, alloc, 0.0)};
}

}  // namespace

TEST_SUITE("spectro")
{
    TEST_CASE("column count formula")
    {
        CHECK(stft_columns(2648, {}) == 300);
        CHECK(stft(random_signal(kFrameSamples, 1)).values.cols() == kImageWidth);
        CounterRng rng(2024);
        for (int t = 0; t < 50; ++t) {
            StftConfig cfg;
            cfg.window_len = 1 + static_cast<int>(rng.below(64));
            cfg.fft_len = cfg.window_len + static_cast<int>(rng.below(8));
            cfg.window_shift = 1 + static_cast<int>(rng.below(16));
            const auto len = static_cast<Eigen::Index>(cfg.window_len + rng.below(400));
            Eigen::Index brute = 0;
            while (brute * cfg.window_shift + cfg.window_len <= len) ++brute;
            CHECK(stft_columns(len, cfg) == brute);
            const auto sp = stft(random_signal(len, static_cast<std::uint64_t>(t)), cfg);
            CHECK(sp.values.cols() == brute);
            CHECK(sp.values.rows() == cfg.fft_len);
        }
        CHECK_THROWS_AS(stft(random_signal(100, 1)), InvalidInput);
    }

    TEST_CASE("constant input lands on the DC row")
    {
        IqSignal x;
        x.samples = CVector<double>::Ones(kFrameSamples);
        const auto sp = stft(x);
        for (Eigen::Index c = 0; c < sp.values.cols(); ++c)
            for (Eigen::Index r = 0; r < 256; ++r) {
                if (r == 128)
                    CHECK(std::abs(sp.values(r, c) - cd(256.0)) < 1e-9);
                else
                    CHECK(std::abs(sp.values(r, c)) < 1e-9);
            }
    }

    TEST_CASE("pure tone occupies exactly one row")
    {
        IqSignal x;
        x.samples.resize(kFrameSamples);
        for (Eigen::Index n = 0; n < kFrameSamples; ++n)
            x.samples[n] = std::polar(1.0, 2.0 * std::numbers::pi * 32.0 * static_cast<double>(n) / 256.0);
        const auto sp = stft(x);
        for (Eigen::Index c = 0; c < sp.values.cols(); ++c) {
            Eigen::Index r;
            sp.values.col(c).cwiseAbs().maxCoeff(&r);
            CHECK(r == 160);
            CHECK(std::abs(std::abs(sp.values(160, c)) - 256.0) < 1e-9);
            double off = 0.0;
            for (Eigen::Index k = 0; k < 256; ++k)
                if (k != 160) off = std::max(off, std::abs(sp.values(k, c)));
            CHECK(off < 1e-9);
        }
    }

    TEST_CASE("columns agree with a naive DFT")
    {
        const auto x = random_signal(600, 5);
        const auto sp = stft(x);
        for (Eigen::Index m : {0, 10, 43}) {
            std::vector<cd> frame(256);
            for (int n = 0; n < 256; ++n) frame[static_cast<std::size_t>(n)] = x.samples[m * 8 + n];
            const auto X = oracle::dft(frame);
            for (int r = 0; r < 256; ++r) {
                const int k = ((r - 128) % 256 + 256) % 256;
                CHECK(std::abs(sp.values(r, m) - X[static_cast<std::size_t>(k)]) < 1e-9);
            }
        }
    }

    TEST_CASE("linearity")
    {
        const auto x = random_signal(kFrameSamples, 11);
        const auto y = random_signal(kFrameSamples, 12);
        const cd a(0.7, -1.3), b(-2.1, 0.4);
        IqSignal z;
        z.samples = a * x.samples + b * y.samples;
        const Eigen::MatrixXcd expect = a * stft(x).values + b * stft(y).values;
        CHECK((stft(z).values - expect).cwiseAbs().maxCoeff() < 1e-9);
    }

    TEST_CASE("delay by one hop shifts columns by one")
    {
        const auto x = random_signal(kFrameSamples, 13);
        IqSignal d;
        d.samples = CVector<double>::Zero(kFrameSamples + 8);
        d.samples.tail(kFrameSamples) = x.samples;
        const auto a = stft(x).values;
        const auto b = stft(d).values;
        REQUIRE(b.cols() == a.cols() + 1);
        CHECK((b.rightCols(a.cols()) - a).cwiseAbs().maxCoeff() < 1e-9);
    }

    TEST_CASE("image encoding examples")
    {
        Spectrogram z;
        z.values = Eigen::MatrixXcd::Zero(4, 5);
        const auto ez = to_image(z);
        CHECK(ez.scale == 1.0);
        CHECK((ez.image.r == 128).all());
        CHECK((ez.image.g == 128).all());
        CHECK((ez.image.b == 0).all());

        Spectrogram one;
        one.values = Eigen::MatrixXcd::Zero(2, 2);
        one.values(0, 0) = cd(3.0, 0.0);
        one.values(1, 1) = cd(-1.0, 2.0);
        const auto e = to_image(one);
        CHECK(e.scale == 3.0);
        CHECK(e.image.r(0, 0) == 255);
        CHECK(e.image.g(0, 0) == 128);
        CHECK(e.image.b(0, 0) == 180);

        Spectrogram bad;
        bad.values = Eigen::MatrixXcd::Constant(2, 2, cd(std::nan(""), 0.0));
        CHECK_THROWS_AS(to_image(bad), InvalidInput);
    }

    TEST_CASE("decode is within one quantization step")
    {
        const auto sp = stft(random_signal(kFrameSamples, 21));
        const auto e = to_image(sp);
        const auto back = decode_image(e.image, e.scale);
        const double bound = e.scale / 255.0;
        CHECK((back.real() - sp.values.real()).cwiseAbs().maxCoeff() <= bound);
        CHECK((back.imag() - sp.values.imag()).cwiseAbs().maxCoeff() <= bound);
    }

    TEST_CASE("mask examples")
    {
        const FrameSpec frame = DomainSpec{}.frame_spec();
        REQUIRE(frame.n_symbols == 37);
        const std::vector<RbAllocation> qpsk{{0, 64, 0, 37, ModClass::QPSK}};
        const auto m = make_mask(frame, qpsk, 0.0);
        CHECK(m.rows() == 256);
        CHECK(m.cols() == 300);
        // Column m is in frame while its window center lies inside the 37 symbols.
        for (Eigen::Index c = 0; c < 300; ++c) {
            const bool inside = c * 8 + 128 < 37 * 72;
            CHECK((m.col(c) == (inside ? 2 : 0)).all());
        }
        const std::vector<RbAllocation> none{{0, 64, 0, 37, ModClass::NoData}};
        CHECK((make_mask(frame, none, 0.0) == 0).all());
    }

    TEST_CASE("mask rows per subcarrier and CFO tracking")
    {
        const FrameSpec frame = DomainSpec{}.frame_spec();
        // Subcarrier index 40 (k = 8) alone carries BPSK.
        const auto alloc = single_block(40, 41, 0, 37, ModClass::BPSK, 64, 37);
        for (double cfo : {0.0, 78125.0, -160000.0}) {
            const int shift = cfo_row_shift(cfo, 20e6, 256);
            const auto m = make_mask(frame, alloc, cfo);
            for (int r = 0; r < 256; ++r) {
                const bool on = r >= 158 + shift && r < 162 + shift;
                CHECK((m(r, 0) == 1) == on);
            }
        }
        CHECK(cfo_row_shift(-160000.0, 20e6, 256) == -2);
        // The Nyquist subcarrier wraps around row 0.
        const auto edge = make_mask(frame, single_block(0, 1, 0, 37, ModClass::QAM16, 64, 37), 0.0);
        for (int r : {254, 255, 0, 1}) CHECK(edge(r, 0) == 3);
        CHECK(edge(2, 0) == 0);
        CHECK(edge(253, 0) == 0);
    }

    TEST_CASE("frame energy concentrates inside the mask")
    {
        const auto f = clean_frame(single_block(0, 16, 0, 10, ModClass::BPSK, 64, 37), 31);
        const Eigen::MatrixXd e = f.spec.values.cwiseAbs2();
        double inside = 0.0;
        for (Eigen::Index i = 0; i < e.rows(); ++i)
            for (Eigen::Index j = 0; j < e.cols(); ++j)
                if (f.mask(i, j) != 0) inside += e(i, j);
        CHECK(inside / e.sum() >= 0.9);
    }

    TEST_CASE("energy bounding box matches the mask bounding box")
    {
        struct Case {
            int f0, f1, t0, t1;
            ModClass mod;
        };
        const Case cases[] = {
            {20, 36, 5, 20, ModClass::QPSK},
            {8, 24, 0, 12, ModClass::BPSK},
            {30, 60, 10, 30, ModClass::QAM16},
            {4, 12, 20, 37, ModClass::QAM64},
        };
        std::uint64_t seed = 100;
        for (const auto& c : cases) {
            const auto f = clean_frame(single_block(c.f0, c.f1, c.t0, c.t1, c.mod, 64, 37), seed++);
            const Box eb = energy_box(f.spec.values.cwiseAbs2());
            const Box mb = mask_box(f.mask);
            CAPTURE(c.f0);
            CAPTURE(c.t0);
            CHECK(std::abs(eb.r0 - mb.r0) <= 2);
            CHECK(std::abs(eb.r1 - mb.r1) <= 2);
            CHECK(std::abs(eb.c0 - mb.c0) <= 5);
            CHECK(std::abs(eb.c1 - mb.c1) <= 5);
        }
    }
}
