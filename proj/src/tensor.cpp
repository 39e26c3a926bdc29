#include "modseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace modseg::ad {

using Eigen::ArrayXd;
using Eigen::Index;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

Index numel(const Shape& s) noexcept
{
    Index n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string to_string(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

namespace detail {

void require(bool cond, const std::string& what)
{
    if (!cond) throw InvalidInput(what);
}

Tensor make_result(Shape shape, ArrayXd value, std::string op, std::vector<Tensor> inputs,
                   std::function<void(const ArrayXd&)> backward_fn)
{
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = std::move(op);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void accumulate(Node& n, const Eigen::Ref<const ArrayXd>& g)
{
    if (!n.requires_grad) return;
    if (n.grad.size() != n.value.size())
        n.grad = g;
    else
        n.grad += g;
}

}  // namespace detail

using detail::accumulate;
using detail::make_result;
using detail::require;

Tensor Tensor::constant(Shape shape, ArrayXd values)
{
    require(ad::numel(shape) == values.size(),
            "tensor: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, ArrayXd values)
{
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad)
{
    const Index n = ad::numel(shape);
    Tensor t = constant(std::move(shape), ArrayXd::Zero(n));
    t.node_->requires_grad = requires_grad;
    return t;
}

double Tensor::item() const
{
    require(numel() == 1, "item(): tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
}

ArrayXd Tensor::grad() const
{
    if (has_grad()) return node_->grad;
    return ArrayXd::Zero(node_->value.size());
}

void backward(const Tensor& loss)
{
    require(loss.defined(), "backward: undefined tensor");
    require(loss.numel() == 1,
            "backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order)
        if (n->backward_fn) n->grad.resize(0);
    Node* root = loss.node().get();
    accumulate(*root, ArrayXd::Ones(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn || n->grad.size() == 0) continue;
        n->backward_fn(n->grad);
    }
}

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b)
{
    require(a.shape() == b.shape(),
            "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Node* na = a.node().get();
    Node* nb = b.node().get();
    return make_result(a.shape(), a.value() + b.value(), "add", {a, b}, [na, nb](const ArrayXd& g) {
        accumulate(*na, g);
        accumulate(*nb, g);
    });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    require(a.shape() == b.shape(),
            "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Node* na = a.node().get();
    Node* nb = b.node().get();
    return make_result(a.shape(), a.value() - b.value(), "sub", {a, b}, [na, nb](const ArrayXd& g) {
        accumulate(*na, g);
        accumulate(*nb, -g);
    });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    require(a.shape() == b.shape(),
            "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Node* na = a.node().get();
    Node* nb = b.node().get();
    return make_result(a.shape(), a.value() * b.value(), "mul", {a, b}, [na, nb](const ArrayXd& g) {
        if (na->requires_grad) accumulate(*na, g * nb->value);
        if (nb->requires_grad) accumulate(*nb, g * na->value);
    });
}

Tensor scale(const Tensor& a, double s)
{
    Node* na = a.node().get();
    return make_result(a.shape(), a.value() * s, "scale", {a},
                       [na, s](const ArrayXd& g) { accumulate(*na, g * s); });
}

Tensor relu(const Tensor& a)
{
    Node* na = a.node().get();
    return make_result(a.shape(), a.value().max(0.0), "relu", {a}, [na](const ArrayXd& g) {
        accumulate(*na, (na->value > 0.0).select(g, 0.0));
    });
}

Tensor reshape(const Tensor& a, Shape shape)
{
    require(numel(shape) == a.numel(),
            "reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    Node* na = a.node().get();
    return make_result(std::move(shape), a.value(), "reshape", {a},
                       [na](const ArrayXd& g) { accumulate(*na, g); });
}

// ---- linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b)
{
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
            "matmul: shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    ArrayXd out(m * n);
    RowMap(out.data(), m, n).noalias() =
        ConstRowMap(a.value().data(), m, k) * ConstRowMap(b.value().data(), k, n);
    Node* na = a.node().get();
    Node* nb = b.node().get();
    return make_result({m, n}, std::move(out), "matmul", {a, b}, [na, nb, m, k, n](const ArrayXd& g) {
        const ConstRowMap G(g.data(), m, n);
        if (na->requires_grad) {
            ArrayXd da(m * k);
            RowMap(da.data(), m, k).noalias() = G * ConstRowMap(nb->value.data(), k, n).transpose();
            accumulate(*na, da);
        }
        if (nb->requires_grad) {
            ArrayXd db(k * n);
            RowMap(db.data(), k, n).noalias() = ConstRowMap(na->value.data(), m, k).transpose() * G;
            accumulate(*nb, db);
        }
    });
}

// ---- reductions ---------------------------------------------------------

Tensor reduce_sum(const Tensor& a)
{
    Node* na = a.node().get();
    const Index n = a.numel();
    return make_result({}, ArrayXd::Constant(1, a.value().sum()), "reduce_sum", {a},
                       [na, n](const ArrayXd& g) { accumulate(*na, ArrayXd::Constant(n, g[0])); });
}

Tensor reduce_sum(const Tensor& a, std::size_t axis)
{
    require(axis < a.ndim(), "reduce_sum: axis " + std::to_string(axis) + " out of range for " +
                                 to_string(a.shape()));
    Index outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
    const Index len = a.dim(axis);
    Shape shape = a.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));

    ArrayXd out = ArrayXd::Zero(outer * inner);
    for (Index o = 0; o < outer; ++o)
        for (Index l = 0; l < len; ++l)
            out.segment(o * inner, inner) += a.value().segment((o * len + l) * inner, inner);
    Node* na = a.node().get();
    return make_result(std::move(shape), std::move(out), "reduce_sum_axis", {a},
                       [na, outer, inner, len](const ArrayXd& g) {
                           ArrayXd d(outer * len * inner);
                           for (Index o = 0; o < outer; ++o)
                               for (Index l = 0; l < len; ++l)
                                   d.segment((o * len + l) * inner, inner) = g.segment(o * inner, inner);
                           accumulate(*na, d);
                       });
}

Tensor softmax_channel(const Tensor& a)
{
    require(a.ndim() >= 1 && a.dim(0) >= 1, "softmax_channel: need a [K,...] tensor");
    const Index k = a.dim(0);
    const Index plane = a.numel() / k;
    const ConstRowMap z(a.value().data(), k, plane);
    ArrayXd out(a.numel());
    RowMap p(out.data(), k, plane);
    const Eigen::RowVectorXd zmax = z.colwise().maxCoeff();
    p = (z.rowwise() - zmax).array().exp().matrix();
    const Eigen::RowVectorXd denom = p.colwise().sum();
    p.array().rowwise() /= denom.array();

    Node* na = a.node().get();
    ArrayXd saved = out;
    return make_result(a.shape(), std::move(out), "softmax_channel", {a},
                       [na, k, plane, saved = std::move(saved)](const ArrayXd& g) {
                           const ConstRowMap P(saved.data(), k, plane);
                           const ConstRowMap G(g.data(), k, plane);
                           const Eigen::RowVectorXd dot = (P.array() * G.array()).matrix().colwise().sum();
                           ArrayXd d(k * plane);
                           RowMap(d.data(), k, plane) =
                               (P.array() * (G.rowwise() - dot).array()).matrix();
                           accumulate(*na, d);
                       });
}

Tensor concat(std::span<const Tensor> parts)
{
    require(!parts.empty(), "concat: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    Index lead = 0;
    for (const auto& p : parts) {
        require(p.ndim() == tail.size() + 1 && Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                "concat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
        lead += p.dim(0);
    }
    Shape shape{lead};
    shape.insert(shape.end(), tail.begin(), tail.end());
    ArrayXd out(numel(shape));
    std::vector<Node*> nodes;
    std::vector<Index> offsets;
    Index off = 0;
    for (const auto& p : parts) {
        out.segment(off, p.numel()) = p.value();
        nodes.push_back(p.node().get());
        offsets.push_back(off);
        off += p.numel();
    }
    return make_result(std::move(shape), std::move(out), "concat",
                       std::vector<Tensor>(parts.begin(), parts.end()),
                       [nodes, offsets](const ArrayXd& g) {
                           for (std::size_t i = 0; i < nodes.size(); ++i)
                               if (nodes[i]->requires_grad)
                                   accumulate(*nodes[i], g.segment(offsets[i], nodes[i]->value.size()));
                       });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias)
{
    require(x.ndim() >= 1 && bias.ndim() == 1 && bias.dim(0) == x.dim(0),
            "add_channel_bias: shape mismatch " + to_string(x.shape()) + " vs " + to_string(bias.shape()));
    const Index c = x.dim(0);
    const Index plane = x.numel() / c;
    ArrayXd out = x.value();
    for (Index i = 0; i < c; ++i) out.segment(i * plane, plane) += bias.value()[i];
    Node* nx = x.node().get();
    Node* nb = bias.node().get();
    return make_result(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                       [nx, nb, c, plane](const ArrayXd& g) {
                           accumulate(*nx, g);
                           if (nb->requires_grad) {
                               ArrayXd db(c);
                               for (Index i = 0; i < c; ++i) db[i] = g.segment(i * plane, plane).sum();
                               accumulate(*nb, db);
                           }
                       });
}

// ---- convolution --------------------------------------------------------

namespace {

// Forward/backward of a 1-D convolution applied along the rows of `in`
// (rows = conv axis, cols = batch of independent lines). Works on any Eigen
// row-indexable expressions so both axes share the code via transpose().
template <typename In, typename Out>
void conv_rows(const In& in, const double* ker, int k, int stride, int dil, int pad, Out&& out)
{
    const Index n_in = in.rows();
    for (Index i = 0; i < out.rows(); ++i)
        for (int j = 0; j < k; ++j) {
            const Index pos = i * stride + static_cast<Index>(dil) * j - pad;
            if (pos < 0 || pos >= n_in) continue;
            out.row(i) += ker[k - 1 - j] * in.row(pos);
        }
}

template <typename In, typename GOut, typename GIn>
void conv_rows_backward(const In& in, const double* ker, int k, int stride, int dil, int pad,
                        const GOut& gout, GIn&& gin, double* gker)
{
    const Index n_in = in.rows();
    for (Index i = 0; i < gout.rows(); ++i)
        for (int j = 0; j < k; ++j) {
            const Index pos = i * stride + static_cast<Index>(dil) * j - pad;
            if (pos < 0 || pos >= n_in) continue;
            if (gker) gker[k - 1 - j] += gout.row(i).dot(in.row(pos));
            gin.row(pos) += ker[k - 1 - j] * gout.row(i);
        }
}

}  // namespace

Tensor conv1d_along_axis(const Tensor& input, const Tensor& kernel, int axis, int stride, int dilation,
                         int pad_before, int pad_after)
{
    require(input.ndim() == 3, "conv1d_along_axis: input must be [C,H,W], got " + to_string(input.shape()));
    require(kernel.ndim() == 2, "conv1d_along_axis: kernel must be [C*M,k], got " + to_string(kernel.shape()));
    require(axis == 1 || axis == 2, "conv1d_along_axis: axis must be 1 or 2");
    require(stride >= 1 && dilation >= 1 && pad_before >= 0 && pad_after >= 0,
            "conv1d_along_axis: bad stride/dilation/padding");
    const Index C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const Index CO = kernel.dim(0);
    const int k = static_cast<int>(kernel.dim(1));
    require(CO % C == 0 && CO > 0,
            "conv1d_along_axis: kernel rows " + to_string(kernel.shape()) +
                " are not a multiple of input channels " + to_string(input.shape()));
    const Index M = CO / C;
    const Index HO = axis == 1 ? conv_output_length(H, k, stride, dilation, pad_before, pad_after) : H;
    const Index WO = axis == 2 ? conv_output_length(W, k, stride, dilation, pad_before, pad_after) : W;
    require(HO > 0 && WO > 0, "conv1d_along_axis: empty output for input " + to_string(input.shape()));

    ArrayXd out = ArrayXd::Zero(CO * HO * WO);
    for (Index o = 0; o < CO; ++o) {
        const Index c = o / M;
        const ConstRowMap x(input.value().data() + c * H * W, H, W);
        RowMap y(out.data() + o * HO * WO, HO, WO);
        const double* ker = kernel.value().data() + o * k;
        if (axis == 1)
            conv_rows(x, ker, k, stride, dilation, pad_before, y);
        else
            conv_rows(x.transpose(), ker, k, stride, dilation, pad_before, y.transpose());
    }

    Node* ni = input.node().get();
    Node* nk = kernel.node().get();
    return make_result(
        {CO, HO, WO}, std::move(out), "conv1d_along_axis", {input, kernel},
        [=](const ArrayXd& g) {
            ArrayXd gin = ArrayXd::Zero(C * H * W);
            ArrayXd gker = ArrayXd::Zero(CO * k);
            for (Index o = 0; o < CO; ++o) {
                const Index c = o / M;
                const ConstRowMap x(ni->value.data() + c * H * W, H, W);
                const ConstRowMap gy(g.data() + o * HO * WO, HO, WO);
                RowMap gx(gin.data() + c * H * W, H, W);
                const double* ker = nk->value.data() + o * k;
                double* gk = nk->requires_grad ? gker.data() + o * k : nullptr;
                if (axis == 1)
                    conv_rows_backward(x, ker, k, stride, dilation, pad_before, gy, gx, gk);
                else
                    conv_rows_backward(x.transpose(), ker, k, stride, dilation, pad_before,
                                       gy.transpose(), gx.transpose(), gk);
            }
            accumulate(*ni, gin);
            accumulate(*nk, gker);
        });
}

// ---- resampling ---------------------------------------------------------

namespace {

struct Interp {
    std::vector<Index> i0, i1;
    std::vector<double> w0, w1;
};

Interp bilinear_weights(Index n_in, int factor)
{
    const Index n_out = n_in * factor;
    Interp t;
    t.i0.resize(static_cast<std::size_t>(n_out));
    t.i1.resize(static_cast<std::size_t>(n_out));
    t.w0.resize(static_cast<std::size_t>(n_out));
    t.w1.resize(static_cast<std::size_t>(n_out));
    for (Index o = 0; o < n_out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
        const auto lo = static_cast<Index>(std::floor(src));
        const Index hi = std::min(lo + 1, n_in - 1);
        const double frac = src - static_cast<double>(lo);
        const auto u = static_cast<std::size_t>(o);
        t.i0[u] = lo;
        t.i1[u] = hi;
        t.w0[u] = 1.0 - frac;
        t.w1[u] = frac;
    }
    return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int factor)
{
    require(x.ndim() == 3, "upsample_bilinear: input must be [C,H,W], got " + to_string(x.shape()));
    require(factor >= 1, "upsample_bilinear: factor must be >= 1");
    const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const Index HO = H * factor, WO = W * factor;
    auto rows = std::make_shared<Interp>(bilinear_weights(H, factor));
    auto cols = std::make_shared<Interp>(bilinear_weights(W, factor));

    ArrayXd out(C * HO * WO);
    RowMat tmp(HO, W);
    for (Index c = 0; c < C; ++c) {
        const ConstRowMap in(x.value().data() + c * H * W, H, W);
        for (Index o = 0; o < HO; ++o) {
            const auto u = static_cast<std::size_t>(o);
            tmp.row(o) = rows->w0[u] * in.row(rows->i0[u]) + rows->w1[u] * in.row(rows->i1[u]);
        }
        RowMap y(out.data() + c * HO * WO, HO, WO);
        for (Index o = 0; o < WO; ++o) {
            const auto u = static_cast<std::size_t>(o);
            y.col(o) = cols->w0[u] * tmp.col(cols->i0[u]) + cols->w1[u] * tmp.col(cols->i1[u]);
        }
    }
    Node* nx = x.node().get();
    return make_result({C, HO, WO}, std::move(out), "upsample_bilinear", {x},
                       [=](const ArrayXd& g) {
                           ArrayXd gin = ArrayXd::Zero(C * H * W);
                           RowMat gtmp(HO, W);
                           for (Index c = 0; c < C; ++c) {
                               const ConstRowMap gy(g.data() + c * HO * WO, HO, WO);
                               gtmp.setZero();
                               for (Index o = 0; o < WO; ++o) {
                                   const auto u = static_cast<std::size_t>(o);
                                   gtmp.col(cols->i0[u]) += cols->w0[u] * gy.col(o);
                                   gtmp.col(cols->i1[u]) += cols->w1[u] * gy.col(o);
                               }
                               RowMap gx(gin.data() + c * H * W, H, W);
                               for (Index o = 0; o < HO; ++o) {
                                   const auto u = static_cast<std::size_t>(o);
                                   gx.row(rows->i0[u]) += rows->w0[u] * gtmp.row(o);
                                   gx.row(rows->i1[u]) += rows->w1[u] * gtmp.row(o);
                               }
                           }
                           accumulate(*nx, gin);
                       });
}

Tensor pad_reflect_width(const Tensor& x, int left, int right)
{
    require(x.ndim() == 3, "pad_reflect_width: input must be [C,H,W], got " + to_string(x.shape()));
    const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
    require(left >= 0 && right >= 0 && left < W && right < W,
            "pad_reflect_width: padding must be smaller than the width");
    const Index WO = W + left + right;
    std::vector<Index> src(static_cast<std::size_t>(WO));
    for (Index o = 0; o < WO; ++o) {
        Index s = o - left;
        if (s < 0) s = -s;
        if (s >= W) s = 2 * (W - 1) - s;
        src[static_cast<std::size_t>(o)] = s;
    }
    ArrayXd out(C * H * WO);
    for (Index c = 0; c < C; ++c) {
        const ConstRowMap in(x.value().data() + c * H * W, H, W);
        RowMap y(out.data() + c * H * WO, H, WO);
        for (Index o = 0; o < WO; ++o) y.col(o) = in.col(src[static_cast<std::size_t>(o)]);
    }
    Node* nx = x.node().get();
    return make_result({C, H, WO}, std::move(out), "pad_reflect_width", {x},
                       [=](const ArrayXd& g) {
                           ArrayXd gin = ArrayXd::Zero(C * H * W);
                           for (Index c = 0; c < C; ++c) {
                               const ConstRowMap gy(g.data() + c * H * WO, H, WO);
                               RowMap gx(gin.data() + c * H * W, H, W);
                               for (Index o = 0; o < WO; ++o)
                                   gx.col(src[static_cast<std::size_t>(o)]) += gy.col(o);
                           }
                           accumulate(*nx, gin);
                       });
}

Tensor crop_width(const Tensor& x, Index start, Index width)
{
    require(x.ndim() == 3, "crop_width: input must be [C,H,W], got " + to_string(x.shape()));
    const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
    require(start >= 0 && width >= 1 && start + width <= W, "crop_width: range outside input");
    ArrayXd out(C * H * width);
    for (Index c = 0; c < C; ++c)
        RowMap(out.data() + c * H * width, H, width) =
            ConstRowMap(x.value().data() + c * H * W, H, W).middleCols(start, width);
    Node* nx = x.node().get();
    return make_result({C, H, width}, std::move(out), "crop_width", {x}, [=](const ArrayXd& g) {
        ArrayXd gin = ArrayXd::Zero(C * H * W);
        for (Index c = 0; c < C; ++c)
            RowMap(gin.data() + c * H * W, H, W).middleCols(start, width) =
                ConstRowMap(g.data() + c * H * width, H, width);
        accumulate(*nx, gin);
    });
}

// ---- loss ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels, double prob_floor)
{
    require(logits.ndim() == 3, "cross_entropy: logits must be [K,H,W], got " + to_string(logits.shape()));
    const Index K = logits.dim(0);
    const Index P = logits.dim(1) * logits.dim(2);
    require(static_cast<Index>(labels.size()) == P,
            "cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                to_string(logits.shape()));
    for (auto l : labels)
        require(l < K, "cross_entropy: invalid class code " + std::to_string(l));

    const ConstRowMap z(logits.value().data(), K, P);
    const Eigen::RowVectorXd zmax = z.colwise().maxCoeff();
    RowMat prob = (z.rowwise() - zmax).array().exp().matrix();
    const Eigen::RowVectorXd denom = prob.colwise().sum();
    prob.array().rowwise() /= denom.array();

    const double log_floor = std::log(prob_floor);
    double loss = 0.0;
    std::vector<std::uint8_t> clamped(static_cast<std::size_t>(P), 0);
    for (Index p = 0; p < P; ++p) {
        const Index t = labels[static_cast<std::size_t>(p)];
        // log-softmax directly, for accuracy when the probability is near 1
        const double logp = z(t, p) - zmax[p] - std::log(denom[p]);
        if (logp < log_floor) {
            loss -= log_floor;
            clamped[static_cast<std::size_t>(p)] = 1;
        } else {
            loss -= logp;
        }
    }

    Node* nl = logits.node().get();
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return make_result({}, ArrayXd::Constant(1, loss), "cross_entropy", {logits},
                       [nl, K, P, prob = std::move(prob), lab = std::move(lab),
                        clamped = std::move(clamped)](const ArrayXd& g) {
                           ArrayXd d(K * P);
                           RowMap D(d.data(), K, P);
                           D = prob * g[0];
                           for (Index p = 0; p < P; ++p) {
                               if (clamped[static_cast<std::size_t>(p)]) {
                                   D.col(p).setZero();
                               } else {
                                   D(lab[static_cast<std::size_t>(p)], p) -= g[0];
                               }
                           }
                           accumulate(*nl, d);
                       });
}

}  // namespace modseg::ad
