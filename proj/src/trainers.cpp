#include "modseg/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "modseg/error.hpp"
#include "modseg/png_io.hpp"
#include "modseg/rng.hpp"

namespace modseg {

using Eigen::ArrayXd;
using Eigen::Index;

// ---- Adam -------------------------------------------------------------------

void adam_step(ArrayXd& params, const ArrayXd& grads, AdamState& state, double lr, const AdamConfig& cfg,
               std::span<const ParamBlock> layout)
{
    if (grads.size() != params.size())
        throw InvalidInput("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                           std::to_string(params.size()) + " parameters");
    if (!grads.isFinite().all()) {
        Index bad = 0;
        while (std::isfinite(grads[bad])) ++bad;
        std::string where = "parameter " + std::to_string(bad);
        for (const auto& b : layout)
            if (bad >= b.offset && bad < b.offset + b.size) where = "layer " + b.name;
        throw TrainingError("non-finite gradient in " + where);
    }
    if (state.m.size() != params.size()) {
        state.m = ArrayXd::Zero(params.size());
        state.v = ArrayXd::Zero(params.size());
        state.step = 0;
    }
    ++state.step;
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.square();
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    params -= lr * (state.m / c1) / ((state.v / c2).sqrt() + cfg.eps);
}

// ---- evaluation stats ---------------------------------------------------------

double EvalStats::pixel_accuracy() const
{
    std::uint64_t hit = 0, total = 0;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t p = 0; p < 5; ++p) {
            total += confusion[t][p];
            if (t == p) hit += confusion[t][p];
        }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// ---- samples ------------------------------------------------------------------

Sample8 to_sample8(const LabeledSample& s, int domain)
{
    if (!s.mask) throw InvalidInput("to_sample8: sample has no mask");
    return {s.image, *s.mask, domain};
}

std::vector<Sample8> load_split(const DatasetManifest& manifest, Split split, int domain, std::size_t limit)
{
    auto ids = manifest.ids(split);
    if (limit && ids.size() > limit) ids.resize(limit);
    std::vector<Sample8> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(to_sample8(load_sample(manifest, split, id), domain));
    return out;
}

// ---- SegNet objective -----------------------------------------------------------

SegObjective::SegObjective(SegNet& net, const std::vector<Sample8>& samples) : net_(net), samples_(samples) {}

std::vector<ParamBlock> SegObjective::layout() const
{
    std::vector<ParamBlock> out;
    const auto names = net_.parameter_names();
    const auto params = net_.parameters();
    Index off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back({names[i], off, params[i].numel()});
        off += params[i].numel();
    }
    return out;
}

namespace {

ad::Tensor image_tensor(const Sample8& s, int channels)
{
    return ad::Tensor::constant({channels, s.image.rows(), s.image.cols()}, image_to_tensor(s.image, channels));
}

std::span<const std::uint8_t> mask_span(const Sample8& s)
{
    return {s.mask.data(), static_cast<std::size_t>(s.mask.size())};
}

const Sample8& sample_at(const std::vector<Sample8>& samples, std::size_t i)
{
    if (i >= samples.size())
        throw InvalidInput("sample index " + std::to_string(i) + " out of range (" + std::to_string(samples.size()) +
                           " samples)");
    return samples[i];
}

}  // namespace

double SegObjective::loss_and_grad(const ArrayXd& theta, std::span<const std::size_t> batch, ArrayXd& grad)
{
    if (batch.empty()) throw InvalidInput("loss_and_grad: empty batch");
    net_.set_flat_parameters(theta);
    net_.zero_grad();
    double total = 0.0;
    for (auto i : batch) {
        const Sample8& s = sample_at(samples_, i);
        const double pixels = static_cast<double>(s.mask.size());
        const ad::Tensor loss = segmentation_loss(net_.forward(image_tensor(s, net_.in_channels())), mask_span(s));
        total += loss.item() / pixels;
        ad::backward(ad::scale(loss, 1.0 / (pixels * static_cast<double>(batch.size()))));
    }
    grad = net_.flat_gradients();
    return total / static_cast<double>(batch.size());
}

EvalStats SegObjective::evaluate(const ArrayXd& theta, std::span<const std::size_t> items)
{
    net_.set_flat_parameters(theta);
    ad::NoGradGuard no_grad;
    EvalStats st;
    if (items.empty()) return st;
    double total = 0.0;
    for (auto i : items) {
        const Sample8& s = sample_at(samples_, i);
        const ad::Tensor logits = net_.forward(image_tensor(s, net_.in_channels()));
        total += segmentation_loss(logits, mask_span(s)).item() / static_cast<double>(s.mask.size());
        const auto pred = argmax_classes(logits);
        const auto truth = mask_span(s);
        for (std::size_t p = 0; p < pred.size(); ++p) ++st.confusion[truth[p]][pred[p]];
    }
    st.loss = total / static_cast<double>(items.size());
    return st;
}

// ---- configuration ---------------------------------------------------------------

std::string_view to_string(Algorithm a) noexcept
{
    switch (a) {
    case Algorithm::ERM: return "erm";
    case Algorithm::SWAD: return "swad";
    case Algorithm::MLDG: return "mldg";
    }
    return "?";
}

Algorithm parse_algorithm(std::string_view s)
{
    if (s == "erm") return Algorithm::ERM;
    if (s == "swad") return Algorithm::SWAD;
    if (s == "mldg") return Algorithm::MLDG;
    throw InvalidInput("unknown algorithm '" + std::string(s) + "' (expected erm, swad or mldg)");
}

void TrainConfig::validate() const
{
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw InvalidInput("lr0 must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidInput("lr decay must be in (0, 1]");
    if (epochs < 1) throw InvalidInput("epochs must be >= 1");
    if (batch_size < 1) throw InvalidInput("batch size must be >= 1");
    if (patience < 0) throw InvalidInput("patience must be >= 0");
    if (!(swad_tolerance >= 1.0)) throw InvalidInput("SWAD tolerance r must be >= 1");
    if (!(swad_lr > 0.0)) throw InvalidInput("SWAD learning rate must be > 0");
    if (swad_val_items < 1) throw InvalidInput("SWAD validation items must be >= 1");
    if (swad_switch_epoch < 0) throw InvalidInput("SWAD switch epoch must be >= 0");
    if (mldg_alpha < 0.0) throw InvalidInput("MLDG alpha must be >= 0");
    if (!std::isfinite(mldg_beta)) throw InvalidInput("MLDG beta must be finite");
}

double TrainConfig::lr_at(int epoch) const { return lr0 * std::pow(lr_decay, epoch); }

// ---- shared training machinery ---------------------------------------------------

namespace {

std::vector<std::size_t> shuffled(std::span<const std::size_t> items, std::uint64_t key)
{
    std::vector<std::size_t> v(items.begin(), items.end());
    CounterRng rng(key);
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    return v;
}

struct Loop {
    Objective& obj;
    const TrainConfig& cfg;
    std::vector<ParamBlock> layout;
    ArrayXd theta;
    AdamState adam;
    std::int64_t iteration = 0;
    TrainResult result;
    ArrayXd grad;
    int stale_epochs = 0;

    Loop(Objective& o, const ArrayXd& theta0, const TrainConfig& c)
        : obj(o), cfg(c), layout(o.layout()), theta(theta0)
    {
        cfg.validate();
        if (theta0.size() != o.dim())
            throw InvalidInput("initial parameters have " + std::to_string(theta0.size()) + " entries, objective " +
                               std::to_string(o.dim()));
        result.params = theta0;
        result.best_val_loss = std::numeric_limits<double>::infinity();
    }

    double step(std::span<const std::size_t> batch, double lr)
    {
        const double loss = obj.loss_and_grad(theta, batch, grad);
        adam_step(theta, grad, adam, lr, {}, layout);
        ++iteration;
        return loss;
    }

    /// Logs the epoch; returns true when early stopping triggers.
    bool end_epoch(int epoch, double lr, double train_loss, std::span<const std::size_t> val, bool select = true)
    {
        EpochLog row{epoch, iteration, lr, train_loss, train_loss, 0.0};
        if (!val.empty()) {
            const EvalStats st = obj.evaluate(theta, val);
            row.val_loss = st.loss;
            row.val_pixel_acc = st.pixel_accuracy();
        }
        result.log.push_back(row);
        if (!select) return false;
        if (row.val_loss < result.best_val_loss) {
            result.best_val_loss = row.val_loss;
            result.best_epoch = epoch;
            result.params = theta;
            stale_epochs = 0;
        } else if (cfg.patience > 0 && ++stale_epochs >= cfg.patience) {
            result.warnings.push_back("early stop after epoch " + std::to_string(epoch) + ": no validation improvement in " +
                                      std::to_string(cfg.patience) + " epochs");
            return true;
        }
        return false;
    }
};

std::uint64_t epoch_key(std::uint64_t seed, int epoch) { return derive_seed(derive_seed(seed, 0x65706f6368), epoch); }

double run_erm_epoch(Loop& L, std::span<const std::size_t> train, int epoch, double lr, const StepHook& hook,
                     const std::function<void()>& after_step = {})
{
    const auto order = shuffled(train, epoch_key(L.cfg.seed, epoch));
    const std::size_t bs = static_cast<std::size_t>(L.cfg.batch_size);
    double sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
        const std::span<const std::size_t> batch(order.data() + b, std::min(bs, order.size() - b));
        sum += L.step(batch, lr) * static_cast<double>(batch.size());
        seen += batch.size();
        if (hook) hook(L.iteration, L.theta, batch);
        if (after_step) after_step();
    }
    return sum / static_cast<double>(seen);
}

}  // namespace

double erm_update(Objective& obj, ArrayXd& theta, AdamState& state, std::span<const std::size_t> batch, double lr,
                  std::span<const ParamBlock> layout)
{
    ArrayXd grad;
    const double loss = obj.loss_and_grad(theta, batch, grad);
    adam_step(theta, grad, state, lr, {}, layout);
    return loss;
}

TrainResult train_erm(Objective& obj, const ArrayXd& theta0, std::span<const std::size_t> train,
                      std::span<const std::size_t> val, const TrainConfig& cfg, const StepHook& hook)
{
    if (train.empty()) throw InvalidInput("train_erm: empty training split");
    Loop L(obj, theta0, cfg);
    for (int e = 0; e < cfg.epochs; ++e) {
        const double lr = cfg.lr_at(e);
        const double tl = run_erm_epoch(L, train, e, lr, hook);
        if (L.end_epoch(e, lr, tl, val)) break;
    }
    L.result.final_params = L.theta;
    return std::move(L.result);
}

// ---- SWAD ----------------------------------------------------------------------

SwadAverager::SwadAverager(double tolerance) : tolerance_(tolerance)
{
    if (!(tolerance >= 1.0)) throw InvalidInput("SWAD tolerance must be >= 1");
}

void SwadAverager::observe(std::int64_t index, double val_loss, const ArrayXd& snapshot)
{
    if (!std::isfinite(val_loss)) throw TrainingError("SWAD: non-finite validation loss");
    if (!have_best_ || val_loss < best_) {
        have_best_ = true;
        best_ = val_loss;
        closed_ = false;
        start_ = index;
        end_ = -1;
        count_ = 1;
        sum_ = snapshot.cast<long double>();
        return;
    }
    if (closed_) return;
    if (val_loss > tolerance_ * best_) {
        closed_ = true;
        end_ = index;
        return;
    }
    sum_ += snapshot.cast<long double>();
    ++count_;
}

ArrayXd SwadAverager::average() const
{
    if (count_ == 0) throw InvalidInput("SWAD: no snapshots collected");
    return (sum_ / static_cast<long double>(count_)).cast<double>();
}

SwadWindow SwadAverager::window() const
{
    SwadWindow w;
    w.start = start_;
    w.end = closed_ ? end_ : start_ + count_;
    w.count = count_;
    return w;
}

std::pair<std::size_t, std::size_t> swad_window(std::span<const double> losses, double tolerance)
{
    if (losses.empty()) throw InvalidInput("swad_window: empty trace");
    const std::size_t start =
        static_cast<std::size_t>(std::min_element(losses.begin(), losses.end()) - losses.begin());
    const double limit = tolerance * losses[start];
    std::size_t end = start + 1;
    while (end < losses.size() && !(losses[end] > limit)) ++end;
    return {start, end};
}

TrainResult train_swad(Objective& obj, const ArrayXd& theta0, std::span<const std::size_t> train,
                       std::span<const std::size_t> val, const TrainConfig& cfg, const StepHook& hook)
{
    if (train.empty()) throw InvalidInput("train_swad: empty training split");
    if (val.empty()) throw InvalidInput("train_swad: a validation split is required");
    if (cfg.epochs <= cfg.swad_switch_epoch)
        throw InvalidInput("train_swad: epochs (" + std::to_string(cfg.epochs) + ") must exceed the switch epoch (" +
                           std::to_string(cfg.swad_switch_epoch) + ")");
    Loop L(obj, theta0, cfg);
    for (int e = 0; e < cfg.swad_switch_epoch; ++e) {
        const double lr = cfg.lr_at(e);
        L.end_epoch(e, lr, run_erm_epoch(L, train, e, lr, hook), val, false);
    }

    const std::span<const std::size_t> probe = val.first(std::min<std::size_t>(val.size(), cfg.swad_val_items));
    SwadAverager avg(cfg.swad_tolerance);
    std::int64_t index = 0;
    Eigen::Array<long double, Eigen::Dynamic, 1> last_sum;
    std::int64_t last_count = 0;
    for (int e = cfg.swad_switch_epoch; e < cfg.epochs; ++e) {
        last_sum = Eigen::Array<long double, Eigen::Dynamic, 1>::Zero(L.theta.size());
        last_count = 0;
        const double tl = run_erm_epoch(L, train, e, cfg.swad_lr, hook, [&] {
            avg.observe(index++, obj.evaluate(L.theta, probe).loss, L.theta);
            last_sum += L.theta.cast<long double>();
            ++last_count;
        });
        L.end_epoch(e, cfg.swad_lr, tl, val, false);
    }

    SwadWindow w = avg.window();
    if (w.start == index - 1 && index > 1) {
        // The minimum sits on the final iteration: the loss was still falling
        // and no window formed, so average the last epoch instead.
        w.fallback = true;
        w.start = index - last_count;
        w.end = index;
        w.count = last_count;
        L.result.params = (last_sum / static_cast<long double>(last_count)).cast<double>();
        L.result.warnings.push_back("SWAD: validation loss still decreasing at the last iteration; averaged the final epoch");
    } else {
        L.result.params = avg.average();
    }
    L.result.swad = w;
    L.result.best_epoch = cfg.epochs - 1;
    L.result.best_val_loss = obj.evaluate(L.result.params, val).loss;
    L.result.final_params = L.theta;
    return std::move(L.result);
}

// ---- MLDG ------------------------------------------------------------------------

MetaGradient mldg_meta_gradient(const GradFn& train_fn, const GradFn& meta_fn, const ArrayXd& theta, double alpha,
                                double beta, bool first_order)
{
    MetaGradient out;
    out.loss = train_fn(theta, out.grad);
    if (beta == 0.0) return out;

    const ArrayXd inner = theta - alpha * out.grad;
    ArrayXd g2;
    const double meta_loss = meta_fn(inner, g2);
    out.loss += beta * meta_loss;
    if (first_order || alpha == 0.0) {
        out.grad += beta * g2;
        return out;
    }
    // d/dtheta L_meta(theta - alpha grad L_tr(theta)) = (I - alpha H_tr) g2.
    // H_tr g2 by a central difference of gradients; step of norm 0.01.
    const double norm = std::sqrt(g2.square().sum());
    ArrayXd hv = ArrayXd::Zero(theta.size());
    if (norm > 0.0) {
        const double eps = 0.01 / norm;
        ArrayXd gp, gm;
        train_fn(theta + eps * g2, gp);
        train_fn(theta - eps * g2, gm);
        hv = (gp - gm) / (2.0 * eps);
    }
    out.grad += beta * (g2 - alpha * hv);
    return out;
}

std::size_t mldg_held_out(std::uint64_t seed, std::int64_t episode, std::size_t n_domains)
{
    CounterRng rng(derive_seed(derive_seed(seed, 0x6d6c6467), static_cast<std::uint64_t>(episode)));
    return static_cast<std::size_t>(rng.below(n_domains));
}

TrainResult train_mldg(Objective& obj, const ArrayXd& theta0, const std::vector<std::vector<std::size_t>>& domains,
                       std::span<const std::size_t> val, const TrainConfig& cfg, const StepHook& hook)
{
    if (domains.size() < 2) throw InvalidInput("train_mldg: at least two training domains are required");
    std::size_t total = 0;
    for (std::size_t d = 0; d < domains.size(); ++d) {
        if (domains[d].empty()) throw InvalidInput("train_mldg: domain " + std::to_string(d) + " has no samples");
        total += domains[d].size();
    }
    Loop L(obj, theta0, cfg);
    L.result.held_out_counts.assign(domains.size(), 0);
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::int64_t episodes_per_epoch = static_cast<std::int64_t>((total + bs - 1) / bs);

    for (int e = 0; e < cfg.epochs; ++e) {
        const double lr = cfg.lr_at(e);
        const double alpha = cfg.mldg_alpha > 0.0 ? cfg.mldg_alpha : lr;
        double sum = 0.0;
        for (std::int64_t k = 0; k < episodes_per_epoch; ++k) {
            const std::int64_t episode = L.iteration;
            const std::size_t held = mldg_held_out(cfg.seed, episode, domains.size());
            ++L.result.held_out_counts[held];
            CounterRng rng(derive_seed(derive_seed(cfg.seed, 0x62617463), static_cast<std::uint64_t>(episode)));
            std::vector<std::size_t> pool;
            for (std::size_t d = 0; d < domains.size(); ++d)
                if (d != held) pool.insert(pool.end(), domains[d].begin(), domains[d].end());
            std::vector<std::size_t> meta_train(bs), meta_test(bs);
            for (auto& i : meta_train) i = pool[rng.below(pool.size())];
            for (auto& i : meta_test) i = domains[held][rng.below(domains[held].size())];

            const GradFn train_fn = [&](const ArrayXd& th, ArrayXd& g) { return obj.loss_and_grad(th, meta_train, g); };
            const GradFn meta_fn = [&](const ArrayXd& th, ArrayXd& g) { return obj.loss_and_grad(th, meta_test, g); };
            const MetaGradient mg =
                mldg_meta_gradient(train_fn, meta_fn, L.theta, alpha, cfg.mldg_beta, cfg.mldg_first_order);
            adam_step(L.theta, mg.grad, L.adam, lr, {}, L.layout);
            ++L.iteration;
            sum += mg.loss;
            if (hook) hook(L.iteration, L.theta, meta_train);
        }
        if (L.end_epoch(e, lr, sum / static_cast<double>(episodes_per_epoch), val)) break;
    }
    L.result.final_params = L.theta;
    return std::move(L.result);
}

// ---- logs ------------------------------------------------------------------------

void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log)
{
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << "epoch,iteration,lr,train_loss,val_loss,val_pixel_acc\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%d,%lld,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                      static_cast<long long>(r.iteration), r.lr, r.train_loss, r.val_loss, r.val_pixel_acc);
        f << buf;
    }
    if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace modseg
