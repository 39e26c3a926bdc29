#include <doctest.h>

#include <cmath>
#include <functional>

#include "modseg/tensor.hpp"
#include "oracles/grad_check.hpp"
#include "test_util.hpp"

using namespace modseg;
using namespace modseg::ad;

using oracle::grad_check;
using oracle::random_input;

TEST_SUITE("autodiff")
{
    TEST_CASE("shape bookkeeping")
    {
        CHECK(numel({2, 3, 4}) == 24);
        CHECK(numel({}) == 1);
        const auto t = Tensor::zeros({2, 3});
        CHECK(t.numel() == 6);
        CHECK_THROWS_AS(Tensor::constant({2, 2}, Eigen::ArrayXd::Zero(3)), InvalidInput);
    }

    TEST_CASE("sum of squares has gradient 2x")
    {
        const auto x = Tensor::parameter({5}, testutil::random_array(5, 3));
        backward(reduce_sum(mul(x, x)));
        CHECK((x.grad() == 2.0 * x.value()).all());
    }

    TEST_CASE("backward twice doubles leaf gradients")
    {
        auto x = Tensor::parameter({4}, testutil::random_array(4, 4));
        const auto w = Tensor::constant({4}, testutil::random_array(4, 5));
        const auto loss = reduce_sum(mul(relu(x), w));
        backward(loss);
        const Eigen::ArrayXd once = x.grad();
        backward(loss);
        CHECK((x.grad() == 2.0 * once).all());
        x.zero_grad();
        backward(loss);
        CHECK((x.grad() == once).all());
    }

    TEST_CASE("backward needs a scalar")
    {
        const auto x = Tensor::parameter({3}, Eigen::ArrayXd::Ones(3));
        CHECK_THROWS_AS(backward(scale(x, 2.0)), InvalidInput);
    }

    TEST_CASE("shape mismatches name both shapes")
    {
        const auto a = Tensor::zeros({2, 3});
        const auto b = Tensor::zeros({3, 2});
        try {
            add(a, b);
            FAIL("expected a shape error");
        } catch (const InvalidInput& e) {
            const std::string msg = e.what();
            CHECK(msg.find("[2,3]") != std::string::npos);
            CHECK(msg.find("[3,2]") != std::string::npos);
        }
        CHECK_THROWS_AS(matmul(a, a), InvalidInput);
        CHECK_THROWS_AS(reshape(a, {4}), InvalidInput);
        CHECK_THROWS_AS(add_channel_bias(Tensor::zeros({2, 2, 2}), Tensor::zeros({3})), InvalidInput);
    }

    TEST_CASE("unit conv1d kernel is the identity")
    {
        const auto x = Tensor::constant({3, 5, 7}, testutil::random_array(105, 6));
        const auto k = Tensor::constant({3, 1}, Eigen::ArrayXd::Ones(3));
        for (int axis : {1, 2}) CHECK((conv1d_along_axis(x, k, axis).value() == x.value()).all());
    }

    TEST_CASE("conv1d matches a direct loop")
    {
        for (int axis : {1, 2})
            for (int stride : {1, 2})
                for (int dil : {1, 2, 3}) {
                    const int C = 2, M = 2, H = 9, W = 8, K = 3;
                    const auto x = Tensor::constant({C, H, W}, testutil::random_array(C * H * W, 7));
                    const auto k = Tensor::constant({C * M, K}, testutil::random_array(C * M * K, 8));
                    const int pad = same_padding(K, dil);
                    const auto y = conv1d_along_axis(x, k, axis, stride, dil, pad, pad);
                    const Eigen::Index n = axis == 1 ? H : W;
                    const Eigen::Index on = conv_output_length(n, K, stride, dil, pad, pad);
                    REQUIRE(y.dim(0) == C * M);
                    REQUIRE(y.dim(static_cast<std::size_t>(axis)) == on);
                    const Eigen::Index oh = y.dim(1), ow = y.dim(2);
                    for (int o = 0; o < C * M; ++o)
                        for (Eigen::Index r = 0; r < oh; ++r)
                            for (Eigen::Index c = 0; c < ow; ++c) {
                                long double acc = 0;
                                const int ch = o / M;
                                for (int j = 0; j < K; ++j) {
                                    const Eigen::Index pos = (axis == 1 ? r : c) * stride + dil * j - pad;
                                    if (pos < 0 || pos >= n) continue;
                                    const Eigen::Index rr = axis == 1 ? pos : r, cc = axis == 1 ? c : pos;
                                    acc += x.value()[(ch * H + rr) * W + cc] * k.value()[o * K + (K - 1 - j)];
                                }
                                CHECK(std::abs(y.value()[(o * oh + r) * ow + c] - static_cast<double>(acc)) <
                                      1e-12);
                            }
                }
    }

    TEST_CASE("upsampling a constant map stays constant")
    {
        const auto x = Tensor::constant({2, 3, 4}, Eigen::ArrayXd::Constant(24, 0.37));
        for (int f : {2, 4}) {
            const auto y = upsample_bilinear(x, f);
            CHECK(y.shape() == Shape{2, 3 * f, 4 * f});
            CHECK((y.value() - 0.37).abs().maxCoeff() < 1e-15);
        }
    }

    TEST_CASE("softmax sums to one per pixel")
    {
        const auto x = Tensor::constant({5, 4, 6}, 30.0 * testutil::random_array(120, 9));
        const auto p = softmax_channel(x);
        for (Eigen::Index px = 0; px < 24; ++px) {
            double s = 0;
            for (int k = 0; k < 5; ++k) s += p.value()[k * 24 + px];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }

    TEST_CASE("reflect padding and cropping")
    {
        Eigen::ArrayXd v(5);
        v << 0, 1, 2, 3, 4;
        const auto x = Tensor::constant({1, 1, 5}, v);
        const auto p = pad_reflect_width(x, 2, 2);
        Eigen::ArrayXd expect(9);
        expect << 2, 1, 0, 1, 2, 3, 4, 3, 2;
        CHECK((p.value() == expect).all());
        CHECK((crop_width(p, 2, 5).value() == v).all());
        CHECK_THROWS_AS(crop_width(p, 6, 5), InvalidInput);
    }

    TEST_CASE("elementwise and linear ops match finite differences")
    {
        const std::uint64_t s = 100;
        CHECK(grad_check([](auto& t) { return add(t[0], t[1]); }, {random_input({3, 4}, s), random_input({3, 4}, s + 1)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return sub(t[0], t[1]); }, {random_input({3, 4}, s), random_input({3, 4}, s + 1)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return mul(t[0], t[1]); }, {random_input({3, 4}, s), random_input({3, 4}, s + 1)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return scale(t[0], -1.7); }, {random_input({6}, s)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return matmul(t[0], t[1]); }, {random_input({3, 4}, s), random_input({4, 2}, s + 2)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return relu(reshape(t[0], {2, 6})); }, {random_input({3, 4}, s)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return reduce_sum(t[0], 1); }, {random_input({2, 3, 4}, s)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return reduce_sum(mul(t[0], t[0])); }, {random_input({5}, s)}) < 1e-4);
        CHECK(grad_check([](auto& t) { return add_channel_bias(t[0], t[1]); }, {random_input({3, 2, 2}, s), random_input({3}, s + 3)}) < 1e-4);
        CHECK(grad_check(
                  [](auto& t) {
                      const std::vector<Tensor> parts{t[0], t[1]};
                      return concat(parts);
                  },
                  {random_input({2, 3, 3}, s), random_input({1, 3, 3}, s + 4)}) < 1e-4);
    }

    TEST_CASE("layer ops match finite differences on random shapes")
    {
        modseg::CounterRng rng(77);
        for (int trial = 0; trial < 20; ++trial) {
            const auto C = static_cast<Eigen::Index>(1 + rng.below(3));
            const auto H = static_cast<Eigen::Index>(4 + rng.below(5));
            const auto W = static_cast<Eigen::Index>(4 + rng.below(5));
            const int K = rng.bit() ? 3 : 5;
            const int stride = 1 + static_cast<int>(rng.below(2));
            const int dil = 1 << rng.below(3);
            const int axis = 1 + static_cast<int>(rng.below(2));
            const auto M = static_cast<Eigen::Index>(1 + rng.below(2));
            const std::uint64_t s = 1000 + static_cast<std::uint64_t>(trial) * 10;
            CAPTURE(trial);

            const int pad = same_padding(K, dil);
            CHECK(grad_check(
                      [&](auto& t) { return conv1d_along_axis(t[0], t[1], axis, stride, dil, pad, pad); },
                      {random_input({C, H, W}, s), random_input({C * M, K}, s + 1)}, s) < 1e-4);
            CHECK(grad_check([](auto& t) { return softmax_channel(t[0]); }, {random_input({C + 1, H, W}, s + 2)}, s) <
                  1e-4);
            CHECK(grad_check([](auto& t) { return upsample_bilinear(t[0], 2); }, {random_input({C, H, W}, s + 3)}, s) <
                  1e-4);
            CHECK(grad_check([](auto& t) { return pad_reflect_width(t[0], 2, 1); }, {random_input({C, H, W}, s + 4)},
                             s) < 1e-4);
            CHECK(grad_check([](auto& t) { return crop_width(t[0], 1, 2); }, {random_input({C, H, W}, s + 5)}, s) <
                  1e-4);
            CHECK(grad_check([](auto& t) { return relu(t[0]); }, {random_input({C, H, W}, s + 6)}, s) < 1e-4);

            std::vector<std::uint8_t> labels(static_cast<std::size_t>(H * W));
            for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(5));
            CHECK(grad_check([&](auto& t) { return cross_entropy(t[0], labels); }, {random_input({5, H, W}, s + 7)},
                             s) < 1e-4);
        }
    }

    TEST_CASE("gradients are bit-identical across identical graphs")
    {
        auto run = [] {
            const auto x = Tensor::parameter({2, 6, 6}, testutil::random_array(72, 12));
            const auto k = Tensor::parameter({4, 3}, testutil::random_array(12, 13));
            const auto y = upsample_bilinear(relu(conv1d_along_axis(x, k, 2, 2, 1, 1, 1)), 2);
            std::vector<std::uint8_t> labels(static_cast<std::size_t>(y.dim(1) * y.dim(2)), 1);
            const auto logits = reshape(y, {4, y.dim(1), y.dim(2)});
            backward(cross_entropy(logits, labels));
            return std::pair{x.grad(), k.grad()};
        };
        const auto a = run(), b = run();
        CHECK((a.first == b.first).all());
        CHECK((a.second == b.second).all());
    }

    TEST_CASE("no-grad guard records nothing")
    {
        const auto x = Tensor::parameter({3}, Eigen::ArrayXd::Ones(3));
        {
            NoGradGuard g;
            CHECK_FALSE(grad_enabled());
            const auto y = scale(x, 2.0);
            CHECK_FALSE(y.requires_grad());
        }
        CHECK(grad_enabled());
        CHECK(scale(x, 2.0).requires_grad());
    }
}
