#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modseg/dataset.hpp"
#include "modseg/segnet.hpp"

namespace modseg {

// ---- optimizer ------------------------------------------------------------

struct AdamState {
    Eigen::ArrayXd m, v;
    std::int64_t step = 0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Named contiguous slice of a flat parameter vector (used in error messages).
struct ParamBlock {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
};

/// One bias-corrected Adam update in place. Throws TrainingError naming the
/// block that holds the first non-finite gradient.
void adam_step(Eigen::ArrayXd& params, const Eigen::ArrayXd& grads, AdamState& state, double lr,
               const AdamConfig& cfg = {}, std::span<const ParamBlock> layout = {});

// ---- objectives -----------------------------------------------------------

struct EvalStats {
    double loss = 0.0;  // mean per-pixel loss
    std::array<std::array<std::uint64_t, 5>, 5> confusion{};  // [truth][prediction]
    double pixel_accuracy() const;
};

/**
 * A differentiable training objective over a flat parameter vector and a
 * set of examples addressed by index. Trainers only talk to this interface,
 * so the same algorithms run on the segmentation network and on toy models.
 */
class Objective {
public:
    virtual ~Objective() = default;
    virtual Eigen::Index dim() const = 0;
    virtual std::vector<ParamBlock> layout() const = 0;
    /// Mean loss over `batch` and its gradient.
    virtual double loss_and_grad(const Eigen::ArrayXd& theta, std::span<const std::size_t> batch,
                                 Eigen::ArrayXd& grad) = 0;
    virtual EvalStats evaluate(const Eigen::ArrayXd& theta, std::span<const std::size_t> items) = 0;
};

/// Compact in-memory example: 8-bit planes, expanded to doubles per step.
struct Sample8 {
    RgbImage image;
    Plane8 mask;
    int domain = 0;  // index into the trainer's domain list
};

std::vector<Sample8> load_split(const DatasetManifest& manifest, Split split, int domain = 0,
                                std::size_t limit = 0);
Sample8 to_sample8(const LabeledSample& s, int domain = 0);

/// Mean per-pixel cross-entropy of a SegNet over a sample list.
class SegObjective final : public Objective {
public:
    SegObjective(SegNet& net, const std::vector<Sample8>& samples);

    Eigen::Index dim() const override { return net_.parameter_count(); }
    std::vector<ParamBlock> layout() const override;
    double loss_and_grad(const Eigen::ArrayXd& theta, std::span<const std::size_t> batch,
                         Eigen::ArrayXd& grad) override;
    EvalStats evaluate(const Eigen::ArrayXd& theta, std::span<const std::size_t> items) override;

private:
    SegNet& net_;
    const std::vector<Sample8>& samples_;
};

// ---- training configuration ------------------------------------------------

enum class Algorithm { ERM, SWAD, MLDG };
std::string_view to_string(Algorithm a) noexcept;
Algorithm parse_algorithm(std::string_view s);

struct TrainConfig {
    Algorithm algorithm = Algorithm::ERM;
    double lr0 = 1e-3;
    double lr_decay = 0.8;
    int epochs = 20;
    int batch_size = 8;
    std::uint64_t seed = 0;
    int patience = 5;  // epochs without validation improvement before stopping; 0 disables
    // SWAD
    int swad_switch_epoch = 10;
    double swad_lr = 1e-3;
    double swad_tolerance = 1.1;
    int swad_val_items = 16;  // validation items scored after every phase-2 iteration
    // MLDG
    double mldg_alpha = 0.0;  // inner step; 0 means "current outer learning rate"
    double mldg_beta = 1.0;
    bool mldg_first_order = false;

    void validate() const;
    /// lr0 * decay^epoch
    double lr_at(int epoch) const;
};

struct EpochLog {
    int epoch = 0;
    std::int64_t iteration = 0;  // optimizer steps completed at the end of the epoch
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_pixel_acc = 0.0;
};

struct SwadWindow {
    std::int64_t start = -1;  // first index (phase-2 iteration) of the averaging window
    std::int64_t end = -1;    // exclusive
    std::int64_t count = 0;
    bool fallback = false;  // true when the final epoch was averaged instead
};

struct TrainResult {
    Eigen::ArrayXd params;  // selected (best-validation or SWAD-averaged) parameters
    Eigen::ArrayXd final_params;
    int best_epoch = -1;
    double best_val_loss = 0.0;
    std::vector<EpochLog> log;
    std::optional<SwadWindow> swad;
    std::vector<std::string> warnings;
    std::vector<int> held_out_counts;  // MLDG: episodes per held-out domain
};

/// Called after every optimizer step with the updated parameters and the
/// (meta-train) batch that produced the step.
using StepHook = std::function<void(std::int64_t iteration, const Eigen::ArrayXd& theta,
                                    std::span<const std::size_t> batch)>;

/// One plain ERM step: gradient of the batch loss, then Adam. Returns the batch loss.
double erm_update(Objective& obj, Eigen::ArrayXd& theta, AdamState& state, std::span<const std::size_t> batch,
                  double lr, std::span<const ParamBlock> layout = {});

TrainResult train_erm(Objective& obj, const Eigen::ArrayXd& theta0, std::span<const std::size_t> train,
                      std::span<const std::size_t> val, const TrainConfig& cfg, const StepHook& hook = {});

TrainResult train_swad(Objective& obj, const Eigen::ArrayXd& theta0, std::span<const std::size_t> train,
                       std::span<const std::size_t> val, const TrainConfig& cfg, const StepHook& hook = {});

/// `domains[i]` lists the training items of domain i (at least two domains).
TrainResult train_mldg(Objective& obj, const Eigen::ArrayXd& theta0,
                       const std::vector<std::vector<std::size_t>>& domains, std::span<const std::size_t> val,
                       const TrainConfig& cfg, const StepHook& hook = {});

// ---- algorithm pieces exposed for verification -----------------------------

/**
 * Online form of the SWAD window rule. The window starts at the first
 * index attaining the running minimum validation loss and ends (exclusive)
 * at the first later index whose loss exceeds tolerance * minimum; a new
 * minimum restarts the window. Snapshots inside the window are summed in
 * long double so small windows average exactly.
 */
class SwadAverager {
public:
    explicit SwadAverager(double tolerance);

    void observe(std::int64_t index, double val_loss, const Eigen::ArrayXd& snapshot);

    bool empty() const noexcept { return count_ == 0; }
    Eigen::ArrayXd average() const;
    SwadWindow window() const;

private:
    double tolerance_;
    double best_ = 0.0;
    bool have_best_ = false;
    bool closed_ = false;
    std::int64_t start_ = -1, end_ = -1, count_ = 0;
    Eigen::Array<long double, Eigen::Dynamic, 1> sum_;
};

/// Returns [start, end) of the averaging window for a full validation trace.
std::pair<std::size_t, std::size_t> swad_window(std::span<const double> val_losses, double tolerance);

/// Gradient of L_tr(theta) + beta * L_meta(theta - alpha * grad L_tr(theta)).
/// The Hessian-vector product uses a central difference of grad L_tr.
using GradFn = std::function<double(const Eigen::ArrayXd& theta, Eigen::ArrayXd& grad)>;

struct MetaGradient {
    double loss = 0.0;  // L_tr(theta) + beta * L_meta(theta')
    Eigen::ArrayXd grad;
};

MetaGradient mldg_meta_gradient(const GradFn& train_fn, const GradFn& meta_fn, const Eigen::ArrayXd& theta,
                                double alpha, double beta, bool first_order);

/// Held-out domain of an MLDG episode (uniform over domains).
std::size_t mldg_held_out(std::uint64_t seed, std::int64_t episode, std::size_t n_domains);

// ---- logs ----------------------------------------------------------------

void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace modseg
