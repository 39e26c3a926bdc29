#include "modseg/segnet.hpp"

#include <algorithm>
#include <cmath>

#include "modseg/error.hpp"
#include "modseg/rng.hpp"

namespace modseg {

using ad::Tensor;
using Eigen::ArrayXd;
using Eigen::Index;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

namespace {

struct FlatGeometry {
    Index C, F, H, W, HO, WO;
    int ky, kx, stride, dil, py, px;
};

FlatGeometry check_flat(const Tensor& input, const Tensor& beta, const Tensor& gamma, const Tensor& bias,
                        int stride, int dilation)
{
    ad::detail::require(input.ndim() == 3,
                        "flattened_conv: input must be [C,H,W], got " + ad::to_string(input.shape()));
    ad::detail::require(beta.ndim() == 3 && gamma.ndim() == 3 && bias.ndim() == 1,
                        "flattened_conv: beta/gamma must be [C,F,k] and bias [F], got " +
                            ad::to_string(beta.shape()) + ", " + ad::to_string(gamma.shape()) + ", " +
                            ad::to_string(bias.shape()));
    const Index C = input.dim(0);
    const Index F = beta.dim(1);
    ad::detail::require(beta.dim(0) == C && gamma.dim(0) == C && gamma.dim(1) == F && bias.dim(0) == F,
                        "flattened_conv: shape mismatch input " + ad::to_string(input.shape()) + " beta " +
                            ad::to_string(beta.shape()) + " gamma " + ad::to_string(gamma.shape()) +
                            " bias " + ad::to_string(bias.shape()));
    const int ky = static_cast<int>(beta.dim(2));
    const int kx = static_cast<int>(gamma.dim(2));
    ad::detail::require(ky % 2 == 1 && kx % 2 == 1, "flattened_conv: kernel sizes must be odd");
    ad::detail::require(stride >= 1 && dilation >= 1, "flattened_conv: stride and dilation must be >= 1");
    FlatGeometry g{C, F, input.dim(1), input.dim(2), 0, 0, ky, kx, stride, dilation,
                   ad::same_padding(ky, dilation), ad::same_padding(kx, dilation)};
    g.HO = ad::conv_output_length(g.H, ky, stride, dilation, g.py, g.py);
    g.WO = ad::conv_output_length(g.W, kx, stride, dilation, g.px, g.px);
    ad::detail::require(g.HO > 0 && g.WO > 0, "flattened_conv: empty output for " + ad::to_string(input.shape()));
    return g;
}

// Valid output columns [lo, lo + n) for horizontal tap t.
std::pair<Index, Index> tap_range(const FlatGeometry& g, int t)
{
    const Index off = static_cast<Index>(g.dil) * t - g.px;
    Index lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    Index hi = (g.W - 1 - off) >= 0 ? (g.W - 1 - off) / g.stride : -1;
    hi = std::min(hi, g.WO - 1);
    return {lo, std::max<Index>(0, hi - lo + 1)};
}

// Input row read by output row i through vertical tap j, or -1 when it falls in the padding.
Index source_row(const FlatGeometry& g, Index i, int j)
{
    const Index y = i * g.stride + static_cast<Index>(g.dil) * j - g.py;
    return (y < 0 || y >= g.H) ? -1 : y;
}

// y[q] += a * x[q * step], q < n
void axpy_strided(double a, const double* __restrict x, Index step, double* __restrict y, Index n)
{
    if (step == 1)
        for (Index q = 0; q < n; ++q) y[q] += a * x[q];
    else
        for (Index q = 0; q < n; ++q) y[q] += a * x[q * step];
}

// x[q * step] += a * y[q], q < n
void scatter_strided(double a, const double* __restrict y, double* __restrict x, Index step, Index n)
{
    if (step == 1)
        for (Index q = 0; q < n; ++q) x[q] += a * y[q];
    else
        for (Index q = 0; q < n; ++q) x[q * step] += a * y[q];
}

double dot_strided(const double* y, const double* x, Index step, Index n)
{
    using Vec = Eigen::Map<const Eigen::VectorXd>;
    if (step == 1) return Vec(y, n).dot(Vec(x, n));
    return Vec(y, n).dot(Eigen::Map<const Eigen::VectorXd, 0, Eigen::InnerStride<>>(x, n, Eigen::InnerStride<>(step)));
}

// Row i of conv_y(in, beta_row), length W.
void vertical_row(const FlatGeometry& g, const double* in, const double* beta_row, Index i, double* t_row)
{
    std::fill(t_row, t_row + g.W, 0.0);
    for (int j = 0; j < g.ky; ++j) {
        const Index y = source_row(g, i, j);
        if (y >= 0) axpy_strided(beta_row[g.ky - 1 - j], in + y * g.W, 1, t_row, g.W);
    }
}

// Output rows per cache tile: input halo for all channels plus the output
// (or gradient) rows for all filters should fit in about 1 MiB.
Index row_tile(const FlatGeometry& g)
{
    constexpr Index budget = (1 << 20) / static_cast<Index>(sizeof(double));
    const Index per_row = g.C * g.stride * g.W + g.F * g.WO;
    const Index halo = g.C * static_cast<Index>(g.dil) * (g.ky - 1) * g.W;
    return std::clamp<Index>((budget - halo) / std::max<Index>(per_row, 1), 1, g.HO);
}

}  // namespace

Tensor flattened_conv(const Tensor& input, const Tensor& beta, const Tensor& gamma, const Tensor& bias,
                      int stride, int dilation)
{
    const FlatGeometry g = check_flat(input, beta, gamma, bias, stride, dilation);
    const Index plane_in = g.H * g.W, plane_out = g.HO * g.WO;
    std::vector<std::pair<Index, Index>> taps(static_cast<std::size_t>(g.kx));
    std::vector<Index> tap_src(static_cast<std::size_t>(g.kx));
    for (int t = 0; t < g.kx; ++t) {
        taps[static_cast<std::size_t>(t)] = tap_range(g, t);
        tap_src[static_cast<std::size_t>(t)] =
            taps[static_cast<std::size_t>(t)].first * g.stride + static_cast<Index>(g.dil) * t - g.px;
    }

    // Output rows are processed in tiles small enough that the tile's input
    // rows and output rows stay in L2. Each intermediate row is produced and
    // consumed while in L1; every output element sums channels c = 0..C-1 in order.
    const Index tile = row_tile(g);
    ArrayXd out(g.F * plane_out);
    for (Index f = 0; f < g.F; ++f) out.segment(f * plane_out, plane_out).setConstant(bias.value()[f]);
    std::vector<double> t_row(static_cast<std::size_t>(g.W));
    for (Index i0 = 0; i0 < g.HO; i0 += tile)
    for (Index f = 0; f < g.F; ++f) {
        double* y = out.data() + f * plane_out;
        for (Index c = 0; c < g.C; ++c) {
            const double* in = input.value().data() + c * plane_in;
            const double* bet = beta.value().data() + (c * g.F + f) * g.ky;
            const double* gam = gamma.value().data() + (c * g.F + f) * g.kx;
            for (Index i = i0; i < std::min(i0 + tile, g.HO); ++i) {
                vertical_row(g, in, bet, i, t_row.data());
                for (int t = 0; t < g.kx; ++t) {
                    const auto [lo, n] = taps[static_cast<std::size_t>(t)];
                    if (n > 0)
                        axpy_strided(gam[g.kx - 1 - t], t_row.data() + tap_src[static_cast<std::size_t>(t)],
                                     g.stride, y + i * g.WO + lo, n);
                }
            }
        }
    }

    ad::Node* ni = input.node().get();
    ad::Node* nb = beta.node().get();
    ad::Node* ng = gamma.node().get();
    ad::Node* nbias = bias.node().get();
    return ad::detail::make_result(
        {g.F, g.HO, g.WO}, std::move(out), "flattened_conv", {input, beta, gamma, bias},
        [=](const ArrayXd& grad) {
            if (nbias->requires_grad) {
                ArrayXd db(g.F);
                for (Index f = 0; f < g.F; ++f) db[f] = grad.segment(f * plane_out, plane_out).sum();
                ad::detail::accumulate(*nbias, db);
            }
            const bool want_in = ni->requires_grad;
            const bool want_beta = nb->requires_grad;
            const bool want_gamma = ng->requires_grad;
            if (!want_in && !want_beta && !want_gamma) return;

            ArrayXd din = want_in ? ArrayXd::Zero(g.C * plane_in) : ArrayXd();
            ArrayXd dbeta = want_beta ? ArrayXd::Zero(g.C * g.F * g.ky) : ArrayXd();
            ArrayXd dgamma = want_gamma ? ArrayXd::Zero(g.C * g.F * g.kx) : ArrayXd();
            std::vector<double> t_row(static_cast<std::size_t>(g.W));
            std::vector<double> gt_row(static_cast<std::size_t>(g.W));
            for (Index i0 = 0; i0 < g.HO; i0 += tile)
            for (Index c = 0; c < g.C; ++c) {
                const double* in = ni->value.data() + c * plane_in;
                for (Index f = 0; f < g.F; ++f) {
                    const double* gy = grad.data() + f * plane_out;
                    const Index kb = (c * g.F + f) * g.ky;
                    const Index kg = (c * g.F + f) * g.kx;
                    const double* bet = nb->value.data() + kb;
                    const double* gam = ng->value.data() + kg;
                    for (Index i = i0; i < std::min(i0 + tile, g.HO); ++i) {
                        const double* g_row = gy + i * g.WO;
                        if (want_gamma) {
                            vertical_row(g, in, bet, i, t_row.data());
                            for (int t = 0; t < g.kx; ++t) {
                                const auto [lo, n] = taps[static_cast<std::size_t>(t)];
                                if (n > 0)
                                    dgamma[kg + g.kx - 1 - t] +=
                                        dot_strided(g_row + lo, t_row.data() + tap_src[static_cast<std::size_t>(t)],
                                                    g.stride, n);
                            }
                        }
                        if (!want_beta && !want_in) continue;
                        // Adjoint of the horizontal pass for this row.
                        std::fill(gt_row.begin(), gt_row.end(), 0.0);
                        for (int t = 0; t < g.kx; ++t) {
                            const auto [lo, n] = taps[static_cast<std::size_t>(t)];
                            if (n > 0)
                                scatter_strided(gam[g.kx - 1 - t], g_row + lo,
                                                gt_row.data() + tap_src[static_cast<std::size_t>(t)], g.stride, n);
                        }
                        for (int j = 0; j < g.ky; ++j) {
                            const Index y = source_row(g, i, j);
                            if (y < 0) continue;
                            if (want_beta) dbeta[kb + g.ky - 1 - j] += dot_strided(gt_row.data(), in + y * g.W, 1, g.W);
                            if (want_in)
                                scatter_strided(bet[g.ky - 1 - j], gt_row.data(), din.data() + c * plane_in + y * g.W,
                                                1, g.W);
                        }
                    }
                }
            }
            if (want_in) ad::detail::accumulate(*ni, din);
            if (want_beta) ad::detail::accumulate(*nb, dbeta);
            if (want_gamma) ad::detail::accumulate(*ng, dgamma);
        });
}

Tensor flattened_conv_composed(const Tensor& input, const Tensor& beta, const Tensor& gamma,
                               const Tensor& bias, int stride, int dilation)
{
    const FlatGeometry g = check_flat(input, beta, gamma, bias, stride, dilation);
    const Tensor b2 = ad::reshape(beta, {g.C * g.F, g.ky});
    const Tensor g2 = ad::reshape(gamma, {g.C * g.F, g.kx});
    const Tensor vert = ad::conv1d_along_axis(input, b2, 1, stride, dilation, g.py, g.py);
    const Tensor horiz = ad::conv1d_along_axis(vert, g2, 2, stride, dilation, g.px, g.px);
    const Tensor summed = ad::reduce_sum(ad::reshape(horiz, {g.C, g.F * g.HO * g.WO}), 0);
    return ad::add_channel_bias(ad::reshape(summed, {g.F, g.HO, g.WO}), bias);
}

Tensor pointwise_conv(const Tensor& input, const Tensor& weight, const Tensor& bias)
{
    ad::detail::require(input.ndim() == 3 && weight.ndim() == 2 && bias.ndim() == 1 &&
                            weight.dim(1) == input.dim(0) && bias.dim(0) == weight.dim(0),
                        "pointwise_conv: shape mismatch input " + ad::to_string(input.shape()) + " weight " +
                            ad::to_string(weight.shape()) + " bias " + ad::to_string(bias.shape()));
    const Index H = input.dim(1), W = input.dim(2);
    const Tensor flat = ad::reshape(input, {input.dim(0), H * W});
    const Tensor y = ad::matmul(weight, flat);
    return ad::add_channel_bias(ad::reshape(y, {weight.dim(0), H, W}), bias);
}

// ---- model --------------------------------------------------------------

namespace {

ArrayXd uniform_init(Index n, double variance, std::uint64_t key)
{
    CounterRng rng(key);
    const double a = std::sqrt(3.0 * variance);
    ArrayXd v(n);
    for (auto& x : v) x = a * (2.0 * rng.uniform() - 1.0);
    return v;
}

struct InitCounter {
    std::uint64_t seed;
    std::uint64_t next = 0;
    std::uint64_t key() { return derive_seed(seed, next++); }
};

FlatConvLayer make_flat(const std::string& name, Index cin, Index cout, int k, int stride, int dilation,
                        InitCounter& ic)
{
    const double var = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    FlatConvLayer l;
    l.name = name;
    l.beta = Tensor::parameter({cin, cout, k}, uniform_init(cin * cout * k, var, ic.key()));
    l.gamma = Tensor::parameter({cin, cout, k}, uniform_init(cin * cout * k, var, ic.key()));
    l.bias = Tensor::zeros({cout}, true);
    l.stride = stride;
    l.dilation = dilation;
    return l;
}

PointwiseLayer make_pointwise(const std::string& name, Index cin, Index cout, bool zero, InitCounter& ic)
{
    PointwiseLayer l;
    l.name = name;
    l.weight = zero ? Tensor::zeros({cout, cin}, true)
                    : Tensor::parameter({cout, cin}, uniform_init(cout * cin, 1.0 / static_cast<double>(cin), ic.key()));
    if (zero) ic.key();  // keep later layers' streams independent of this flag
    l.bias = Tensor::zeros({cout}, true);
    return l;
}

}  // namespace

SegNet::SegNet(const SegNetConfig& cfg) : cfg_(cfg)
{
    if (cfg.in_channels < 1) throw InvalidInput("SegNet: in_channels must be >= 1");
    InitCounter ic{cfg.seed};
    stem_ = make_flat("stem", cfg.in_channels, 16, 5, 2, 1, ic);
    enc1a_ = make_flat("enc1a", 16, 32, 3, 2, 1, ic);
    enc1b_ = make_flat("enc1b", 32, 32, 3, 1, 1, ic);
    enc2a_ = make_flat("enc2a", 32, 64, 3, 2, 1, ic);
    enc2b_ = make_flat("enc2b", 64, 64, 3, 1, 1, ic);
    aspp1_ = make_flat("aspp_d1", 64, 32, 3, 1, 1, ic);
    aspp2_ = make_flat("aspp_d2", 64, 32, 3, 1, 2, ic);
    aspp4_ = make_flat("aspp_d4", 64, 32, 3, 1, 4, ic);
    proj_ = make_pointwise("aspp_proj", 96, 64, false, ic);
    dec_ = make_flat("dec", 96, 32, 3, 1, 1, ic);
    head_ = make_pointwise("head", 32, kNumOutputClasses, cfg.zero_init_classifier, ic);

    for (const auto* l : {&stem_, &enc1a_, &enc1b_, &enc2a_, &enc2b_, &aspp1_, &aspp2_, &aspp4_}) {
        names_.push_back(l->name + ".beta");
        names_.push_back(l->name + ".gamma");
        names_.push_back(l->name + ".bias");
    }
    names_.push_back("aspp_proj.weight");
    names_.push_back("aspp_proj.bias");
    names_.push_back("dec.beta");
    names_.push_back("dec.gamma");
    names_.push_back("dec.bias");
    names_.push_back("head.weight");
    names_.push_back("head.bias");
}

std::vector<const Tensor*> SegNet::param_slots() const
{
    std::vector<const Tensor*> out;
    for (const auto* l : {&stem_, &enc1a_, &enc1b_, &enc2a_, &enc2b_, &aspp1_, &aspp2_, &aspp4_}) {
        out.push_back(&l->beta);
        out.push_back(&l->gamma);
        out.push_back(&l->bias);
    }
    out.push_back(&proj_.weight);
    out.push_back(&proj_.bias);
    out.push_back(&dec_.beta);
    out.push_back(&dec_.gamma);
    out.push_back(&dec_.bias);
    out.push_back(&head_.weight);
    out.push_back(&head_.bias);
    return out;
}

std::vector<Tensor*> SegNet::param_slots()
{
    std::vector<Tensor*> out;
    for (const Tensor* t : std::as_const(*this).param_slots()) out.push_back(const_cast<Tensor*>(t));
    return out;
}

std::vector<Tensor> SegNet::parameters() const
{
    std::vector<Tensor> out;
    for (const Tensor* t : param_slots()) out.push_back(*t);
    return out;
}

std::vector<std::string> SegNet::parameter_names() const { return names_; }

Index SegNet::parameter_count() const
{
    Index n = 0;
    for (const Tensor* t : param_slots()) n += t->numel();
    return n;
}

ArrayXd SegNet::flat_parameters() const
{
    ArrayXd theta(parameter_count());
    Index off = 0;
    for (const Tensor* t : param_slots()) {
        theta.segment(off, t->numel()) = t->value();
        off += t->numel();
    }
    return theta;
}

void SegNet::set_flat_parameters(const Eigen::Ref<const ArrayXd>& theta)
{
    if (theta.size() != parameter_count())
        throw InvalidInput("SegNet: expected " + std::to_string(parameter_count()) + " parameters, got " +
                           std::to_string(theta.size()));
    Index off = 0;
    for (Tensor* t : param_slots()) {
        t->mutable_value() = theta.segment(off, t->numel());
        off += t->numel();
    }
}

ArrayXd SegNet::flat_gradients() const
{
    ArrayXd g(parameter_count());
    Index off = 0;
    for (const Tensor* t : param_slots()) {
        g.segment(off, t->numel()) = t->grad();
        off += t->numel();
    }
    return g;
}

void SegNet::zero_grad()
{
    for (Tensor* t : param_slots()) t->zero_grad();
}

std::vector<NamedArray> SegNet::state() const
{
    std::vector<NamedArray> out;
    const auto slots = param_slots();
    for (std::size_t i = 0; i < slots.size(); ++i) out.push_back({names_[i], slots[i]->shape(), slots[i]->value()});
    return out;
}

void SegNet::load_state(const std::vector<NamedArray>& entries)
{
    auto slots = param_slots();
    if (entries.size() != slots.size())
        throw MalformedInput("checkpoint has " + std::to_string(entries.size()) + " tensors, model expects " +
                             std::to_string(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i)
        if (entries[i].name != names_[i] || entries[i].shape != slots[i]->shape())
            throw MalformedInput("checkpoint tensor " + entries[i].name + " " + ad::to_string(entries[i].shape) +
                                 " does not match model tensor " + names_[i] + " " +
                                 ad::to_string(slots[i]->shape()));
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i]->mutable_value() = entries[i].values;
}

SegNet SegNet::clone() const
{
    SegNet copy(cfg_);
    copy.set_flat_parameters(flat_parameters());
    return copy;
}

Tensor SegNet::forward(const Tensor& image) const
{
    if (image.ndim() != 3)
        throw InvalidInput("SegNet: image must be [C,H,W], got " + ad::to_string(image.shape()));
    if (image.dim(0) != cfg_.in_channels)
        throw InvalidInput("SegNet: model expects " + std::to_string(cfg_.in_channels) + " channels, image has " +
                           std::to_string(image.dim(0)));
    if (image.dim(1) % 8 != 0 || image.dim(1) < 8)
        throw InvalidInput("SegNet: image height must be a positive multiple of 8, got " +
                           std::to_string(image.dim(1)));
    if (image.dim(2) < 8) throw InvalidInput("SegNet: image width must be >= 8");
    if (!image.value().isFinite().all()) throw InvalidInput("SegNet: non-finite input");

    const Index W = image.dim(2);
    const int pad = static_cast<int>((8 - W % 8) % 8);
    Tensor x = pad ? ad::pad_reflect_width(image, pad / 2, pad - pad / 2) : image;

    x = ad::relu(stem_(x));
    x = ad::relu(enc1a_(x));
    const Tensor skip = ad::relu(enc1b_(x));
    x = ad::relu(enc2a_(skip));
    x = ad::relu(enc2b_(x));
    const std::vector<Tensor> branches{ad::relu(aspp1_(x)), ad::relu(aspp2_(x)), ad::relu(aspp4_(x))};
    x = ad::relu(proj_(ad::concat(branches)));
    const std::vector<Tensor> merged{ad::upsample_bilinear(x, 2), skip};
    x = ad::relu(dec_(ad::concat(merged)));
    // The classifier commutes with bilinear upsampling (weights sum to one),
    // so it runs at stride 4 and the logits are upsampled.
    x = ad::upsample_bilinear(head_(x), 4);
    return pad ? ad::crop_width(x, pad / 2, W) : x;
}

Tensor segmentation_loss(const Tensor& logits, std::span<const std::uint8_t> mask)
{
    return ad::cross_entropy(logits, mask, 1e-12);
}

std::vector<std::uint8_t> argmax_classes(const Tensor& logits)
{
    ad::detail::require(logits.ndim() == 3, "argmax_classes: logits must be [K,H,W]");
    const Index K = logits.dim(0);
    const Index P = logits.dim(1) * logits.dim(2);
    const ConstRowMap z(logits.value().data(), K, P);
    if (!z.allFinite()) throw InternalError("argmax_classes: non-finite logits");
    std::vector<std::uint8_t> out(static_cast<std::size_t>(std::max<Index>(P, 0)));
    for (Index p = 0; p < P; ++p) {
        Index best = 0;
        for (Index k = 1; k < K; ++k)
            if (z(k, p) > z(best, p)) best = k;
        out[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

void save_model(const std::filesystem::path& path, const SegNet& net) { save_checkpoint(path, net.state()); }

SegNet load_model(const std::filesystem::path& path)
{
    const auto entries = load_checkpoint(path);
    const auto it = std::find_if(entries.begin(), entries.end(), [](const NamedArray& e) { return e.name == "stem.beta"; });
    if (it == entries.end() || it->shape.size() != 3)
        throw MalformedInput(path.string() + ": not a segmentation model checkpoint (no stem.beta)");
    const auto channels = it->shape[0];
    if (channels < 1 || channels > 64) throw MalformedInput(path.string() + ": implausible input channel count");
    SegNetConfig cfg;
    cfg.in_channels = static_cast<int>(channels);
    SegNet net(cfg);
    net.load_state(entries);
    return net;
}

}  // namespace modseg
