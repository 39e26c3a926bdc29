#include <doctest.h>

#include "cli_runner.hpp"
#include "modseg/dataset.hpp"

using testutil::q;
using testutil::run;
using testutil::slurp;
using testutil::TempDir;

TEST_SUITE("cli")
{
    TEST_CASE("synth is deterministic and reproducible from its lock")
    {
        TempDir t("cli_synth");
        REQUIRE(run("synth --seed 5 --out " + q(t / "a"), t).code == 0);
        REQUIRE(run("synth --seed 5 --out " + q(t / "b"), t).code == 0);
        REQUIRE(run("synth --seed 6 --out " + q(t / "c"), t).code == 0);
        for (const char* f : {"image.png", "mask.png", "overlay.png", "meta.json", "frame.iq", "config.lock"})
            CHECK(std::filesystem::exists(t / "a" / f));
        const auto ha = testutil::tree_hash(t / "a", {"config.lock"});
        CHECK(ha == testutil::tree_hash(t / "b", {"config.lock"}));
        CHECK(ha != testutil::tree_hash(t / "c", {"config.lock"}));
        REQUIRE(run("--config " + q(t / "a" / "config.lock") + " synth --out " + q(t / "d"), t).code == 0);
        CHECK(ha == testutil::tree_hash(t / "d", {"config.lock"}));
    }

    TEST_CASE("dataset output matches the library")
    {
        TempDir t("cli_dataset");
        REQUIRE(run("dataset --n-base 6 --n-extra 2 --domain 16:4 --seed 3 --out " + q(t / "cli"), t).code == 0);
        modseg::build_dataset(6, 2, {16, 4}, 3, t / "lib");
        CHECK(testutil::tree_hash(t / "cli", {"config.lock"}) == testutil::tree_hash(t / "lib"));
    }

    TEST_CASE("coexist rerun from config.lock is identical")
    {
        TempDir t("cli_coexist");
        const auto r = run("coexist --snr-max 2 --n-symbols 10000 --seed 4 --out " + q(t / "a"), t);
        REQUIRE(r.code == 0);
        CHECK(r.output.find("RAN1 SINR 2.2 dB") != std::string::npos);
        CHECK(r.output.find("RAN2 SINR 2.1 dB") != std::string::npos);
        REQUIRE(run("--config " + q(t / "a" / "config.lock") + " coexist --out " + q(t / "b"), t).code == 0);
        CHECK(slurp(t / "a" / "ber.csv") == slurp(t / "b" / "ber.csv"));
        CHECK(slurp(t / "a" / "sinr.json") == slurp(t / "b" / "sinr.json"));
    }

    TEST_CASE("precedence: flag over config over environment")
    {
        TempDir t("cli_precedence");
        REQUIRE(run("synth --seed 9 --out " + q(t / "flag"), t).code == 0);
        REQUIRE(run("synth --out " + q(t / "env"), t, "MODSEG_SEED=9").code == 0);
        const auto h9 = testutil::tree_hash(t / "flag", {"config.lock"});
        CHECK(testutil::tree_hash(t / "env", {"config.lock"}) == h9);
        // The lock pins seed 9; the environment cannot override it but a flag can.
        REQUIRE(run("--config " + q(t / "flag" / "config.lock") + " synth --out " + q(t / "lock_env"), t,
                    "MODSEG_SEED=1")
                    .code == 0);
        CHECK(testutil::tree_hash(t / "lock_env", {"config.lock"}) == h9);
        REQUIRE(run("--config " + q(t / "flag" / "config.lock") + " synth --seed 1 --out " + q(t / "lock_flag"), t)
                    .code == 0);
        CHECK(testutil::tree_hash(t / "lock_flag", {"config.lock"}) != h9);
    }

    TEST_CASE("exit codes")
    {
        TempDir t("cli_exit");
        CHECK(run("synth", t).code == 2);                       // missing --out
        CHECK(run("frobnicate", t).code == 2);                  // unknown subcommand
        CHECK(run("synth --domain 4:8 --out " + q(t / "x"), t).code == 3);
        CHECK(run("coexist --detector ml --out " + q(t / "x"), t).code == 3);
        {
            std::ofstream(t / "bad.ckpt") << "garbage";
        }
        CHECK(run("infer --model " + q(t / "bad.ckpt") + " --input " + q(t / "bad.ckpt") + " --out " + q(t / "x"), t)
                  .code == 4);
        CHECK(run("eval --model " + q(t / "missing.ckpt") + " --data " + q(t / "nowhere") + " --out " + q(t / "x"), t)
                  .code == 5);
        // Two same-sign Adam steps of 1e308 overflow a parameter; normalization keeps smaller rates finite.
        const auto tr =
            run("train --n-base 10 --epochs 3 --batch 5 --lr 1e308 --lr-decay 1 --out " + q(t / "boom"), t);
        CHECK(tr.code == 6);
        CHECK(tr.output.find("non-finite") != std::string::npos);
        const auto v = run("--version", t);
        CHECK(v.code == 0);
        CHECK(v.output.find("checkpoint") != std::string::npos);
    }
}
