#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <vector>

#include "modseg/tensor.hpp"
#include "oracles/finite_diff.hpp"
#include "test_util.hpp"

namespace oracle {

using modseg::ad::Shape;
using modseg::ad::Tensor;

using GraphFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Input {
    Shape shape;
    Eigen::ArrayXd value;
};

inline Input random_input(Shape shape, std::uint64_t seed)
{
    Eigen::ArrayXd v = testutil::random_array(modseg::ad::numel(shape), seed);
    // Keep clear of the ReLU kink so a finite-difference step never crosses it.
    for (auto& x : v)
        if (std::abs(x) < 1e-2) x = x < 0 ? -0.05 : 0.05;
    return {std::move(shape), std::move(v)};
}

// Scalar probe: a fixed random weighting of the output, so every output
// element contributes a distinct amount to the loss.
inline double probe(const Tensor& out, std::uint64_t seed)
{
    const Eigen::ArrayXd w = testutil::random_array(out.numel(), seed ^ 0xabcdefULL);
    return (out.value() * w).sum();
}

/// Max relative error between backward() and central differences over every
/// coordinate of every input. Relative errors use a 1e-3 floor so gradients
/// that are numerically zero compare on an absolute scale.
inline double grad_check(const GraphFn& f, const std::vector<Input>& inputs, std::uint64_t seed = 1)
{
    std::vector<Tensor> params;
    for (const auto& in : inputs) params.push_back(Tensor::parameter(in.shape, in.value));
    const Tensor out = f(params);
    const Tensor w = Tensor::constant(out.shape(), testutil::random_array(out.numel(), seed ^ 0xabcdefULL));
    modseg::ad::backward(modseg::ad::reduce_sum(modseg::ad::mul(out, w)));

    double worst = 0.0;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        const Eigen::ArrayXd analytic = params[p].grad();
        auto loss_at = [&](const Eigen::ArrayXd& x) {
            modseg::ad::NoGradGuard guard;
            std::vector<Tensor> ins;
            for (std::size_t q = 0; q < inputs.size(); ++q)
                ins.push_back(Tensor::constant(inputs[q].shape, q == p ? x : inputs[q].value));
            return probe(f(ins), seed);
        };
        for (Eigen::Index i = 0; i < analytic.size(); ++i) {
            const double fd = oracle::central_diff(loss_at, inputs[p].value, i);
            worst = std::max(worst, oracle::rel_err(analytic[i], fd, 1e-3));
        }
    }
    return worst;
}


}  // namespace oracle
