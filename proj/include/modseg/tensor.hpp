#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "modseg/error.hpp"

namespace modseg::ad {

using Shape = std::vector<Eigen::Index>;

Eigen::Index numel(const Shape& s) noexcept;
std::string to_string(const Shape& s);

/// Graph node. Values are stored flat in row-major (last index fastest) order.
struct Node {
    Shape shape;
    Eigen::ArrayXd value;
    Eigen::ArrayXd grad;  // empty until a backward pass reaches the node
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    /// Receives d(loss)/d(this) and accumulates into the inputs' gradients.
    std::function<void(const Eigen::ArrayXd&)> backward_fn;
};

/**
 * Dense double-precision tensor with reverse-mode differentiation.
 *
 * A Tensor is a shared handle to a graph node; copies alias. Operations on
 * tensors that require gradients record a backward closure unless a
 * NoGradGuard is alive on the current thread.
 *
 * Gradient accumulation rule: backward() resets the gradients of all
 * interior nodes it visits and *adds* into leaf gradients. Calling it twice
 * on the same graph therefore doubles leaf gradients; call zero_grad() on
 * the leaves between passes to start fresh.
 */
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor constant(Shape shape, Eigen::ArrayXd values);
    static Tensor parameter(Shape shape, Eigen::ArrayXd values);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double v) { return constant({}, Eigen::ArrayXd::Constant(1, v)); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    Eigen::Index numel() const { return node_->value.size(); }
    Eigen::Index dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }

    const Eigen::ArrayXd& value() const { return node_->value; }
    /// Direct write access; intended for optimizers updating leaves between passes.
    Eigen::ArrayXd& mutable_value() { return node_->value; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    /// Gradient, or zeros when none has been accumulated yet.
    Eigen::ArrayXd grad() const;
    void zero_grad() { node_->grad.resize(0); }
    const std::string& op() const { return node_->op; }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

/// Runs reverse-mode accumulation from a scalar (single-element) tensor.
void backward(const Tensor& loss);

// ---- core operations ---------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);
Tensor relu(const Tensor& a);
/// Softmax over axis 0 of a [K, ...] tensor.
Tensor softmax_channel(const Tensor& a);
/// Sum of all elements (shape {}).
Tensor reduce_sum(const Tensor& a);
/// Sum over one axis, which is removed from the shape.
Tensor reduce_sum(const Tensor& a, std::size_t axis);
/// Concatenation along axis 0.
Tensor concat(std::span<const Tensor> parts);
/// x[C, ...] + b[C] broadcast over trailing dimensions.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/**
 * Depthwise 1-D convolution along axis 1 (rows) or 2 (columns) of a
 * [C,H,W] tensor, with a channel multiplier M = kernel.dim(0) / C.
 *
 * Output channel o = c*M + m reads input channel c with kernel row o:
 *   out(o, i) = sum_j in(c, i*stride + dilation*j - pad_before) * kernel(o, k-1-j)
 * i.e. a true convolution: with pad_before == dilation*(k-1)/2 the tap
 * kernel(o, h) reads the input at offset ((k-1)/2 - h) * dilation.
 */
Tensor conv1d_along_axis(const Tensor& input, const Tensor& kernel, int axis, int stride = 1,
                         int dilation = 1, int pad_before = 0, int pad_after = 0);

/// "Same" padding for an odd kernel: dilation * (k - 1) / 2 on each side.
constexpr int same_padding(int kernel_size, int dilation) noexcept
{
    return dilation * (kernel_size - 1) / 2;
}

/// Output length of a strided, dilated, padded 1-D convolution.
constexpr Eigen::Index conv_output_length(Eigen::Index n, int k, int stride, int dilation,
                                          int pad_before, int pad_after) noexcept
{
    const Eigen::Index span = n + pad_before + pad_after - static_cast<Eigen::Index>(dilation) * (k - 1) - 1;
    return span < 0 ? 0 : span / stride + 1;
}

/// Bilinear resize of [C,H,W] by an integer factor (half-pixel centers, edge clamp).
Tensor upsample_bilinear(const Tensor& x, int factor = 2);

/// Reflect padding of the last axis of [C,H,W] (edge sample not repeated).
Tensor pad_reflect_width(const Tensor& x, int left, int right);
/// Columns [start, start+width) of the last axis of [C,H,W].
Tensor crop_width(const Tensor& x, Eigen::Index start, Eigen::Index width);

/// Sum over pixels of -ln(max(softmax(logits)[label], floor)) for logits [K,H,W]
/// and labels (H*W row-major class codes).
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                     double prob_floor = 1e-12);

namespace detail {

/// Creates a result node; records `backward_fn` only when some input needs gradients.
Tensor make_result(Shape shape, Eigen::ArrayXd value, std::string op,
                   std::vector<Tensor> inputs, std::function<void(const Eigen::ArrayXd&)> backward_fn);

/// Adds `g` into the gradient of `n` (no-op when n does not require grad).
void accumulate(Node& n, const Eigen::Ref<const Eigen::ArrayXd>& g);

void require(bool cond, const std::string& what);

}  // namespace detail

}  // namespace modseg::ad
