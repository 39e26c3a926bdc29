#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modseg/checkpoint.hpp"
#include "modseg/tensor.hpp"

namespace modseg {

/**
 * Flattened convolution: every (input channel c, filter f) pair carries a
 * rank-1 kernel W(c, y', x') = beta(c, f, y') * gamma(c, f, x').
 *
 *   out(f) = bias(f) + sum_c conv_x(conv_y(in(c), beta(c, f)), gamma(c, f))
 *
 * Shapes: input [C,H,W], beta [C,F,ky], gamma [C,F,kx], bias [F]. Both
 * passes use the same stride and dilation and "same" padding
 * dilation*(k-1)/2, so the output is [F, ceil(H/stride), ceil(W/stride)]
 * for odd kernels. Convolutions are true (flipped-kernel) convolutions.
 */
ad::Tensor flattened_conv(const ad::Tensor& input, const ad::Tensor& beta, const ad::Tensor& gamma,
                          const ad::Tensor& bias, int stride = 1, int dilation = 1);

/// Same result built from conv1d_along_axis, reshape and reduce_sum.
ad::Tensor flattened_conv_composed(const ad::Tensor& input, const ad::Tensor& beta,
                                   const ad::Tensor& gamma, const ad::Tensor& bias, int stride = 1,
                                   int dilation = 1);

/// 1x1 convolution: weight [F,C], bias [F].
ad::Tensor pointwise_conv(const ad::Tensor& input, const ad::Tensor& weight, const ad::Tensor& bias);

struct FlatConvLayer {
    std::string name;
    ad::Tensor beta, gamma, bias;
    int stride = 1;
    int dilation = 1;

    ad::Tensor operator()(const ad::Tensor& x) const
    {
        return flattened_conv(x, beta, gamma, bias, stride, dilation);
    }
};

struct PointwiseLayer {
    std::string name;
    ad::Tensor weight, bias;

    ad::Tensor operator()(const ad::Tensor& x) const { return pointwise_conv(x, weight, bias); }
};

struct SegNetConfig {
    int in_channels = 3;  // 3 = (Re, Im, |.|); 2 drops the magnitude plane
    std::uint64_t seed = 0;
    bool zero_init_classifier = true;
};

inline constexpr int kNumOutputClasses = 5;

/**
 * Compact encoder-decoder built from flattened convolutions.
 *
 *   stem      in->16  k5 s2
 *   enc1      16->32  k3 s2, 32->32 k3      (stride-4 skip)
 *   enc2      32->64  k3 s2, 64->64 k3
 *   aspp      3 x (64->32 k3, dilation 1/2/4), concat, pointwise 96->64
 *   decoder   x2 upsample, concat skip, 96->32 k3
 *   head      pointwise 32->5, x4 bilinear upsample
 *
 * The width is reflect-padded to a multiple of 8 on entry and cropped back;
 * the height must already be a multiple of 8.
 */
class SegNet {
public:
    explicit SegNet(const SegNetConfig& cfg = {});

    /// image [C,H,W] -> logits [5,H,W].
    ad::Tensor forward(const ad::Tensor& image) const;

    const SegNetConfig& config() const noexcept { return cfg_; }
    int in_channels() const noexcept { return cfg_.in_channels; }

    /// Parameters in a fixed order; names are "<layer>.<beta|gamma|bias|weight>".
    std::vector<ad::Tensor> parameters() const;
    std::vector<std::string> parameter_names() const;
    Eigen::Index parameter_count() const;

    Eigen::ArrayXd flat_parameters() const;
    void set_flat_parameters(const Eigen::Ref<const Eigen::ArrayXd>& theta);
    Eigen::ArrayXd flat_gradients() const;
    void zero_grad();

    std::vector<NamedArray> state() const;
    /// Throws MalformedInput when names or shapes differ from this model.
    void load_state(const std::vector<NamedArray>& entries);

    /// Deep copy with independent parameter storage.
    SegNet clone() const;

private:
    SegNetConfig cfg_;
    FlatConvLayer stem_, enc1a_, enc1b_, enc2a_, enc2b_, aspp1_, aspp2_, aspp4_, dec_;
    PointwiseLayer proj_, head_;

    std::vector<ad::Tensor*> param_slots();
    std::vector<const ad::Tensor*> param_slots() const;
    std::vector<std::string> names_;
};

/// Sum over pixels of -ln softmax(logits)[truth], floored at 1e-12.
ad::Tensor segmentation_loss(const ad::Tensor& logits, std::span<const std::uint8_t> mask);

/// Checkpoint of all parameters; the input channel count is implied by stem.beta.
void save_model(const std::filesystem::path& path, const SegNet& net);
SegNet load_model(const std::filesystem::path& path);

/// Per-pixel argmax; ties go to the lowest class code.
std::vector<std::uint8_t> argmax_classes(const ad::Tensor& logits);

}  // namespace modseg
