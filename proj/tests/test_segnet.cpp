#include <doctest.h>

#include <cmath>
#include <numbers>

#include "modseg/segnet.hpp"
#include "oracles/conv2d.hpp"
#include "oracles/finite_diff.hpp"
#include "oracles/naive_ce.hpp"
#include "test_util.hpp"

using namespace modseg;
using ad::Tensor;

namespace {

std::vector<std::uint8_t> random_labels(std::size_t n, std::uint64_t seed)
{
    CounterRng rng(seed);
    std::vector<std::uint8_t> l(n);
    for (auto& v : l) v = static_cast<std::uint8_t>(rng.below(kNumOutputClasses));
    return l;
}

double max_rel(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b)
{
    const double scale = std::max(1.0, b.abs().maxCoeff());
    return (a - b).abs().maxCoeff() / scale;
}

}  // namespace

TEST_SUITE("segnet")
{
    TEST_CASE("flattened conv equals the brute-force rank-1 convolution")
    {
        CounterRng rng(5);
        for (int t = 0; t < 40; ++t) {
            const int C = 1 + static_cast<int>(rng.below(4)), F = 1 + static_cast<int>(rng.below(4));
            const int H = 5 + static_cast<int>(rng.below(8)), W = 5 + static_cast<int>(rng.below(8));
            const int k = rng.bit() ? 3 : 5;
            const int s = 1 + static_cast<int>(rng.below(2));
            const int d = 1 << rng.below(3);
            const auto seed = static_cast<std::uint64_t>(t) * 4;
            const auto in = testutil::random_array(C * H * W, seed);
            const auto beta = testutil::random_array(C * F * k, seed + 1);
            const auto gamma = testutil::random_array(C * F * k, seed + 2);
            const auto bias = testutil::random_array(F, seed + 3);
            const auto x = Tensor::constant({C, H, W}, in);
            const auto b = Tensor::constant({C, F, k}, beta);
            const auto g = Tensor::constant({C, F, k}, gamma);
            const auto bb = Tensor::constant({F}, bias);
            const auto fast = flattened_conv(x, b, g, bb, s, d);
            const auto composed = flattened_conv_composed(x, b, g, bb, s, d);
            const auto expect = oracle::conv2d_rank1(in, C, H, W, beta, gamma, bias, F, k, k, s, d);
            CAPTURE(t);
            REQUIRE(fast.shape() == ad::Shape{F, (H + s - 1) / s, (W + s - 1) / s});
            CHECK(max_rel(fast.value(), expect) < 1e-12);
            CHECK(max_rel(composed.value(), expect) < 1e-12);
        }
    }

    TEST_CASE("center one-hot kernels pass the input through")
    {
        const auto in = testutil::random_array(7 * 9, 1);
        Eigen::ArrayXd onehot = Eigen::ArrayXd::Zero(5);
        onehot[2] = 1.0;
        const auto y = flattened_conv(Tensor::constant({1, 7, 9}, in), Tensor::constant({1, 1, 5}, onehot),
                                      Tensor::constant({1, 1, 5}, onehot), Tensor::constant({1}, Eigen::ArrayXd::Zero(1)));
        CHECK((y.value() == in).all());
    }

    TEST_CASE("zero beta leaves only the bias")
    {
        const auto in = testutil::random_array(2 * 6 * 6, 2);
        Eigen::ArrayXd bias(3);
        bias << 0.5, -1.0, 2.0;
        const auto y = flattened_conv(Tensor::constant({2, 6, 6}, in), Tensor::zeros({2, 3, 3}),
                                      Tensor::constant({2, 3, 3}, testutil::random_array(18, 3)),
                                      Tensor::constant({3}, bias));
        for (int f = 0; f < 3; ++f)
            for (int p = 0; p < 36; ++p) CHECK(y.value()[f * 36 + p] == bias[f]);
    }

    TEST_CASE("forward shape and uniform output from the zero head")
    {
        SegNet net;
        CHECK(net.parameter_count() == 108565);
        const auto x = Tensor::constant({3, 256, 300}, testutil::random_array(3 * 256 * 300, 4, 0.0, 1.0));
        const auto logits = net.forward(x);
        CHECK(logits.shape() == ad::Shape{5, 256, 300});
        const auto p = ad::softmax_channel(logits);
        CHECK((p.value() - 0.2).abs().maxCoeff() < 1e-15);
        CHECK(segmentation_loss(logits, random_labels(256 * 300, 1)).item() ==
              doctest::Approx(256.0 * 300.0 * std::log(5.0)).epsilon(1e-10));
    }

    TEST_CASE("forward rejects bad input")
    {
        SegNet net;
        CHECK_THROWS_AS(net.forward(Tensor::zeros({3, 20, 16})), InvalidInput);
        CHECK_THROWS_AS(net.forward(Tensor::zeros({2, 16, 16})), InvalidInput);
        Eigen::ArrayXd bad = Eigen::ArrayXd::Zero(3 * 16 * 16);
        bad[7] = std::nan("");
        CHECK_THROWS_AS(net.forward(Tensor::constant({3, 16, 16}, bad)), InvalidInput);
    }

    TEST_CASE("shifting the input by 8 columns shifts interior logits")
    {
        SegNetConfig cfg;
        cfg.seed = 3;
        cfg.zero_init_classifier = false;
        SegNet net(cfg);
        const int H = 64, W = 300;
        const auto base = testutil::random_array(3 * H * (W + 8), 9, 0.0, 1.0);
        Eigen::ArrayXd a(3 * H * W), b(3 * H * W);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    a[(c * H + y) * W + x] = base[(c * H + y) * (W + 8) + x + 8];
                    b[(c * H + y) * W + x] = base[(c * H + y) * (W + 8) + x];
                }
        // b is a delayed by 8 columns.
        const auto la = net.forward(Tensor::constant({3, H, W}, a)).value();
        const auto lb = net.forward(Tensor::constant({3, H, W}, b)).value();
        // The receptive field reaches about 70 columns (dilation 4 at stride 8),
        // so columns closer than that to either edge see padding.
        double worst = 0.0;
        for (int k = 0; k < 5; ++k)
            for (int y = 0; y < H; ++y)
                for (int x = 80; x < W - 88; ++x)
                    worst = std::max(worst, std::abs(lb[(k * H + y) * W + x + 8] - la[(k * H + y) * W + x]));
        CHECK(worst < 1e-3);
    }

    TEST_CASE("loss matches the per-pixel loop")
    {
        const int K = 5, H = 8, W = 12;
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto v = testutil::random_array(K * H * W, s, -8.0, 8.0);
            const auto labels = random_labels(H * W, s);
            const double got = segmentation_loss(Tensor::constant({K, H, W}, v), labels).item();
            CHECK(std::abs(got - oracle::cross_entropy(v, K, labels)) < 1e-9);
        }
    }

    TEST_CASE("loss properties")
    {
        const int K = 5, P = 20;
        const auto labels = random_labels(P, 7);
        Eigen::ArrayXd perfect = Eigen::ArrayXd::Zero(K * P);
        for (int p = 0; p < P; ++p) perfect[labels[static_cast<std::size_t>(p)] * P + p] = 60.0;
        const double lp = segmentation_loss(Tensor::constant({K, 1, P}, perfect), labels).item();
        CHECK(lp >= 0.0);
        CHECK(lp < 1e-20);
        const double lu = segmentation_loss(Tensor::constant({K, 1, P}, Eigen::ArrayXd::Zero(K * P)), labels).item();
        CHECK(lu == doctest::Approx(P * std::log(5.0)).epsilon(1e-14));
        // Confident and wrong saturates at the floor.
        Eigen::ArrayXd wrong = -perfect * 20.0;
        const double lw = segmentation_loss(Tensor::constant({K, 1, P}, wrong), labels).item();
        CHECK(lw == doctest::Approx(P * -std::log(1e-12)).epsilon(1e-12));
        for (std::uint64_t s = 0; s < 20; ++s)
            CHECK(segmentation_loss(Tensor::constant({K, 1, P}, testutil::random_array(K * P, s, -5, 5)), labels)
                      .item() > 0.0);
        auto bad = labels;
        bad[3] = 5;
        CHECK_THROWS_AS(segmentation_loss(Tensor::constant({K, 1, P}, perfect), bad), InvalidInput);
    }

    TEST_CASE("two-channel variant")
    {
        SegNetConfig two;
        two.in_channels = 2;
        SegNet n2(two), n3;
        CHECK(n3.parameter_count() - n2.parameter_count() == 16 * (5 + 5));
        CHECK_THROWS_AS(n2.forward(Tensor::zeros({3, 16, 16})), InvalidInput);
        CHECK(n2.forward(Tensor::zeros({2, 16, 16})).shape() == ad::Shape{5, 16, 16});
    }

    TEST_CASE("full forward and loss match finite differences on an 8x16x16 crop")
    {
        for (std::uint64_t trial = 0; trial < 3; ++trial) {
            SegNetConfig cfg;
            cfg.in_channels = 8;
            cfg.seed = trial;
            cfg.zero_init_classifier = false;
            SegNet net(cfg);
            const auto input = testutil::random_array(8 * 16 * 16, 50 + trial, 0.0, 1.0);
            const auto labels = random_labels(256, 60 + trial);
            const auto x = Tensor::parameter({8, 16, 16}, input);
            backward(segmentation_loss(net.forward(x), labels));
            const Eigen::ArrayXd g = net.flat_gradients();
            const Eigen::ArrayXd gx = x.grad();
            const Eigen::ArrayXd theta = net.flat_parameters();

            auto loss_theta = [&](const Eigen::ArrayXd& th) {
                ad::NoGradGuard guard;
                SegNet copy = net.clone();
                copy.set_flat_parameters(th);
                return segmentation_loss(copy.forward(Tensor::constant({8, 16, 16}, input)), labels).item();
            };
            auto loss_x = [&](const Eigen::ArrayXd& in) {
                ad::NoGradGuard guard;
                return segmentation_loss(net.forward(Tensor::constant({8, 16, 16}, in)), labels).item();
            };
            CounterRng pick(trial);
            double worst = 0.0;
            for (int i = 0; i < 30; ++i) {
                const auto j = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(theta.size())));
                worst = std::max(worst, oracle::rel_err(g[j], oracle::central_diff(loss_theta, theta, j), 1e-3));
                const auto k = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(input.size())));
                worst = std::max(worst, oracle::rel_err(gx[k], oracle::central_diff(loss_x, input, k), 1e-3));
            }
            CHECK(worst < 1e-4);
        }
    }

    TEST_CASE("checkpoint roundtrip is bit-exact")
    {
        testutil::TempDir dir("segnet_ckpt");
        SegNetConfig cfg;
        cfg.seed = 11;
        cfg.zero_init_classifier = false;
        const SegNet net(cfg);
        save_model(dir / "m.ckpt", net);
        const SegNet back = load_model(dir / "m.ckpt");
        CHECK((back.flat_parameters() == net.flat_parameters()).all());
        CHECK(back.parameter_names() == net.parameter_names());
        const auto x = Tensor::constant({3, 16, 24}, testutil::random_array(3 * 16 * 24, 2, 0, 1));
        CHECK((back.forward(x).value() == net.forward(x).value()).all());

        SegNetConfig two;
        two.in_channels = 2;
        save_model(dir / "two.ckpt", SegNet(two));
        CHECK(load_model(dir / "two.ckpt").in_channels() == 2);

        auto bytes = encode_checkpoint(net.state());
        CHECK(decode_checkpoint(bytes).size() == net.state().size());
        bytes.resize(bytes.size() - 3);
        CHECK_THROWS_AS(decode_checkpoint(bytes), MalformedInput);
        bytes[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(bytes), MalformedInput);
        CHECK_THROWS_AS(load_model(dir / "missing.ckpt"), IoError);
    }

    TEST_CASE("argmax ties go to the lowest class")
    {
        Eigen::ArrayXd v = Eigen::ArrayXd::Zero(5 * 2);
        v[3 * 2 + 1] = 1.0;  // pixel 1 prefers class 3
        const auto cls = argmax_classes(Tensor::constant({5, 1, 2}, v));
        CHECK(cls == std::vector<std::uint8_t>{0, 3});
    }

    TEST_CASE("identical seeds give identical models")
    {
        SegNetConfig cfg;
        cfg.seed = 4;
        CHECK((SegNet(cfg).flat_parameters() == SegNet(cfg).flat_parameters()).all());
        cfg.seed = 5;
        SegNetConfig other;
        other.seed = 4;
        CHECK_FALSE((SegNet(cfg).flat_parameters() == SegNet(other).flat_parameters()).all());
    }
}
