#include <doctest.h>

#include <array>
#include <cstring>
#include <fstream>

#include "modseg/dataset.hpp"
#include "modseg/error.hpp"
#include "modseg/png_io.hpp"
#include "test_util.hpp"

using namespace modseg;
using testutil::TempDir;

namespace {

// Fraction of modulated blocks per class (BPSK..QAM64).
std::array<double, 4> block_shares(const DatasetManifest& m)
{
    std::array<double, 4> n{};
    double total = 0;
    for (const auto& r : m.records)
        for (const auto& a : r.allocations)
            if (a.mod != ModClass::NoData) {
                n[static_cast<std::size_t>(a.mod) - 1] += 1;
                total += 1;
            }
    for (auto& v : n) v /= total;
    return n;
}

void write_floats(const std::filesystem::path& p, const std::vector<float>& v)
{
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

}  // namespace

TEST_SUITE("dataset")
{
    TEST_CASE("split counts follow the 95/4/1 rule")
    {
        CHECK(split_counts(1000) == std::array<std::size_t, 3>{950, 40, 10});
        CHECK(split_counts(100) == std::array<std::size_t, 3>{95, 4, 1});
        CHECK(split_counts(10) == std::array<std::size_t, 3>{10, 0, 0});
        for (std::size_t n = 1; n < 3000; n += 7) {
            const auto c = split_counts(n);
            CHECK(c[0] + c[1] + c[2] == n);
            CHECK(c[1] == n * 4 / 100);
            CHECK(c[2] == n / 100);
        }
    }

    TEST_CASE("domain parsing and validation")
    {
        CHECK(parse_domain("32:4") == DomainSpec{32, 4});
        CHECK(parse_domain("16") == DomainSpec{16, 8});
        CHECK(DomainSpec{64, 8}.tag() == "fft64_cp8");
        CHECK_THROWS_AS(parse_domain("x"), InvalidInput);
        CHECK_THROWS_AS(parse_domain("4:8"), InvalidInput);
        CHECK_THROWS_AS(parse_domain("64:17"), InvalidInput);
        for (int fft : {8, 13, 64, 128})
            for (int cp : {0, 8, 16}) {
                const auto f = DomainSpec{fft, cp}.frame_spec();
                CHECK(f.n_symbols * (fft + cp) >= kFrameSamples);
            }
    }

    TEST_CASE("same arguments give a byte-identical tree")
    {
        TempDir a("ds_a"), b("ds_b"), c("ds_c");
        build_dataset(12, 4, {}, 7, a.path());
        build_dataset(12, 4, {}, 7, b.path());
        build_dataset(12, 4, {}, 8, c.path());
        CHECK(testutil::tree_hash(a.path()) == testutil::tree_hash(b.path()));
        CHECK(testutil::tree_hash(a.path()) != testutil::tree_hash(c.path()));
        // Worker count does not change the output.
        TempDir d("ds_d");
        build_dataset(12, 4, {}, 7, d.path(), {}, 3);
        CHECK(testutil::tree_hash(a.path()) == testutil::tree_hash(d.path()));
    }

    TEST_CASE("manifest is complete and consistent")
    {
        TempDir dir("ds_manifest");
        const auto m = build_dataset(100, 0, {}, 3, dir.path());
        const auto loaded = load_manifest(dir.path());
        REQUIRE(loaded.size() == 100);
        CHECK(loaded.ids(Split::Train).size() == 95);
        CHECK(loaded.ids(Split::Validation).size() == 4);
        CHECK(loaded.ids(Split::Test).size() == 1);
        for (std::size_t i = 0; i < loaded.size(); ++i) {
            const auto& r = loaded.records[i];
            CHECK(r.id == i);
            CHECK(std::filesystem::exists(dir.path() / r.image_path));
            CHECK(std::filesystem::exists(dir.path() / r.mask_path));
            CHECK(r.seed == m.records[i].seed);
            CHECK(r.allocations == m.records[i].allocations);
            CHECK(r.scale == m.records[i].scale);
        }
    }

    TEST_CASE("modulated classes are drawn equally often")
    {
        TempDir dir("ds_balance");
        const auto m = build_dataset(100, 0, {}, 1, dir.path());
        const auto s = block_shares(m);
        const double lo = *std::min_element(s.begin(), s.end());
        const double hi = *std::max_element(s.begin(), s.end());
        CAPTURE(s[0]);
        CAPTURE(s[1]);
        CAPTURE(s[2]);
        CAPTURE(s[3]);
        CHECK(hi - lo <= 0.05);
    }

    TEST_CASE("extra samples carry no BPSK or QPSK")
    {
        TempDir dir("ds_extra");
        const auto m = build_dataset(0, 100, {}, 2, dir.path());
        bool saw_qam = false;
        for (const auto& r : m.records) {
            CHECK(r.qam_only);
            const auto s = load_sample(m, r.split, r.id);
            REQUIRE(s.mask.has_value());
            CHECK_FALSE((*s.mask == 1).any());
            CHECK_FALSE((*s.mask == 2).any());
            saw_qam = saw_qam || (*s.mask >= 3).any();
        }
        CHECK(saw_qam);
    }

    TEST_CASE("load reproduces the in-memory sample")
    {
        TempDir dir("ds_roundtrip");
        const auto m = build_dataset(20, 5, {32, 4}, 9, dir.path());
        for (const auto& r : m.records) {
            const auto mem = generate_sample({32, 4}, r.qam_only, r.seed);
            const auto disk = load_sample(m, r.split, r.id);
            CHECK(disk.image == mem.image);
            CHECK((*disk.mask == *mem.mask).all());
            CHECK((*mem.mask <= 4).all());
            CHECK(mem.image.rows() == kImageHeight);
            CHECK(mem.image.cols() == kImageWidth);
        }
        const auto val = m.ids(Split::Train);
        const auto batch = load_batch(m, Split::Train, val, 3);
        REQUIRE(batch.size() == val.size());
        for (const auto& ex : batch) {
            CHECK(ex.image.size() == 3 * kImageHeight * kImageWidth);
            CHECK(ex.image.minCoeff() >= 0.0);
            CHECK(ex.image.maxCoeff() <= 1.0);
        }
    }

    TEST_CASE("loading under the wrong split is rejected")
    {
        TempDir dir("ds_split");
        const auto m = build_dataset(100, 0, {}, 4, dir.path());
        const auto val = m.ids(Split::Validation);
        REQUIRE_FALSE(val.empty());
        CHECK_THROWS_AS(load_sample(m, Split::Test, val[0]), InvalidInput);
        CHECK_THROWS_AS(load_sample(m, Split::Train, 100), InvalidInput);
        CHECK_NOTHROW(load_sample(m, Split::Validation, val[0]));
    }

    TEST_CASE("corrupt files surface as I/O errors")
    {
        TempDir dir("ds_corrupt");
        const auto m = build_dataset(3, 0, {}, 5, dir.path());
        {
            std::ofstream f(dir.path() / m.records[0].image_path, std::ios::trunc);
            f << "not a png";
        }
        CHECK_THROWS_AS(load_sample(m, m.records[0].split, 0), IoError);
        std::ofstream(dir.path() / "header.json", std::ios::trunc) << "{";
        CHECK_THROWS_AS(load_manifest(dir.path()), MalformedInput);
    }

    TEST_CASE("regeneration from the manifest is byte-identical")
    {
        TempDir a("ds_regen_a"), b("ds_regen_b");
        build_dataset(10, 5, {16, 2}, 21, a.path());
        const auto m = load_manifest(a.path());
        std::filesystem::create_directories(b / "img");
        std::filesystem::create_directories(b / "mask");
        for (const auto& r : m.records) {
            const auto s = regenerate_sample(m.config, r);
            png::write_rgb(b / r.image_path, s.image);
            png::write_gray(b / r.mask_path, *s.mask);
            CHECK(testutil::read_bytes(a / r.image_path) == testutil::read_bytes(b / r.image_path));
            CHECK(testutil::read_bytes(a / r.mask_path) == testutil::read_bytes(b / r.mask_path));
        }
    }

    TEST_CASE("raw I/Q import")
    {
        TempDir dir("ds_iq");
        write_floats(dir / "zeros.iq", std::vector<float>(2 * kFrameSamples, 0.0f));
        const auto z = import_iq(dir / "zeros.iq");
        CHECK_FALSE(z.mask.has_value());
        CHECK((z.image.r == 128).all());
        CHECK((z.image.g == 128).all());
        CHECK((z.image.b == 0).all());

        write_floats(dir / "odd.iq", std::vector<float>(2 * kFrameSamples + 1, 0.0f));
        CHECK_THROWS_AS(import_iq(dir / "odd.iq"), MalformedInput);
        auto bad = std::vector<float>(2 * kFrameSamples, 0.0f);
        bad[17] = std::numeric_limits<float>::infinity();
        write_floats(dir / "inf.iq", bad);
        CHECK_THROWS_AS(import_iq(dir / "inf.iq"), MalformedInput);
        CHECK_THROWS_AS(import_iq(dir / "missing.iq"), IoError);

        // float32 export of a frame, imported, equals the pipeline image of
        // the same float32-rounded samples.
        auto g = generate_frame({}, false, 77);
        export_iq(dir / "frame.iq", g.signal);
        for (Eigen::Index i = 0; i < g.signal.size(); ++i)
            g.signal.samples[i] = {static_cast<float>(g.signal.samples[i].real()),
                                   static_cast<float>(g.signal.samples[i].imag())};
        const auto imported = import_iq(dir / "frame.iq");
        CHECK(imported.image == to_image(stft(g.signal)).image);
        const auto back = read_iq(dir / "frame.iq", 20e6);
        CHECK(back.samples == g.signal.samples);
    }

    TEST_CASE("generated frames have the full length and recorded provenance")
    {
        const auto g = generate_frame({}, false, 5);
        CHECK(g.signal.size() == kFrameSamples);
        CHECK(g.meta.seed == 5);
        CHECK(std::abs(g.meta.impairments.cfo_hz) < kMaxCfoHz);
        GenerationOptions clean;
        clean.impairments = false;
        const auto c = generate_frame({}, false, 5, clean);
        CHECK_FALSE(c.meta.impairments.noise_enabled);
        CHECK(c.meta.allocations == g.meta.allocations);
        const auto sample = generate_sample({}, false, 5);
        CHECK(sample.image == generate_sample({}, false, 5).image);
        CHECK((*sample.mask == *generate_sample({}, false, 5).mask).all());
    }
}
