// modseg: synthesize, train, evaluate and sweep OFDMA modulation segmenters.
//
// Exit codes
//   0  success
//   1  internal error
//   2  usage error (unknown flag, missing argument, bad value syntax)
//   3  invalid input (argument out of range, inconsistent options)
//   4  malformed input file
//   5  I/O failure
//   6  training failure (non-finite loss or gradient)

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "modseg/checkpoint.hpp"
#include "modseg/coexist.hpp"
#include "modseg/dataset.hpp"
#include "modseg/error.hpp"
#include "modseg/evalkit.hpp"
#include "modseg/png_io.hpp"
#include "modseg/rng.hpp"
#include "modseg/segnet.hpp"
#include "modseg/trainers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace modseg;

namespace {

constexpr const char* kVersion = "1.0.0";

enum Exit : int { kOk = 0, kInternal = 1, kUsage = 2, kInvalid = 3, kMalformed = 4, kIo = 5, kTraining = 6 };

std::string version_text()
{
    std::string s = std::string("modseg ") + kVersion + "\n";
    s += "dataset format " + std::to_string(kDatasetFormatVersion) + "\n";
    s += "checkpoint format " + std::to_string(kCheckpointVersion) + "\n";
    s += "evaluation report format " + std::to_string(kReportFormatVersion) + "\n";
    s += "train log csv: epoch,iteration,lr,train_loss,val_loss,val_pixel_acc\n";
    s += "sweep csv: domain,fft_size,cp_len,accuracy,pixel_accuracy,split,tag\n";
    s += "ber csv: snr_db,ber,ci_low,ci_high,errors,bits,tag\n";
    s += "iq: interleaved little-endian float32 I/Q";
    return s;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("failed writing " + path.string());
}

void prepare_out(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string quote_value(const std::string& v)
{
    std::string q = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') q += '\\';
        q += c;
    }
    return q + "\"";
}

/// Value of one option as config text: the parsed tokens when given, else
/// the captured default. Empty when there is nothing to record.
std::string option_value(const CLI::Option& opt)
{
    const bool flag = opt.get_expected_min() == 0;
    if (flag) return opt.count() > 0 ? "true" : "false";
    std::vector<std::string> vals;
    if (opt.count() > 0) {
        vals = opt.results();
    } else {
        std::string d = opt.get_default_str();
        if (d.empty()) return {};
        if (opt.get_expected_max() > 1 && d.size() >= 2 && d.front() == '[' && d.back() == ']') {
            std::stringstream ss(d.substr(1, d.size() - 2));
            for (std::string item; std::getline(ss, item, ',');) {
                const auto b = item.find_first_not_of(' ');
                if (b != std::string::npos) vals.push_back(item.substr(b));
            }
        } else {
            vals.push_back(d);
        }
    }
    if (opt.get_expected_max() <= 1 && vals.size() == 1) return quote_value(vals.front());
    std::string arr = "[";
    for (std::size_t i = 0; i < vals.size(); ++i) arr += (i ? ", " : "") + quote_value(vals[i]);
    return arr + "]";
}

/// Effective configuration of the run (defaults included). Rerunning
/// `modseg --config DIR/config.lock <subcommand>` reproduces the outputs.
void write_lock(const fs::path& dir, const CLI::App& app, const CLI::App& sub)
{
    std::string text = "# modseg " + std::string(kVersion) + " " + sub.get_name() + "\n";
    auto emit = [&](const CLI::App& a, const std::string& prefix) {
        for (const CLI::Option* opt : a.get_options()) {
            if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
            const std::string v = option_value(*opt);
            if (!v.empty()) text += prefix + opt->get_lnames().front() + "=" + v + "\n";
        }
    };
    emit(app, "");
    emit(sub, sub.get_name() + ".");
    write_text(dir / "config.lock", text);
}

std::vector<DomainSpec> parse_domains(const std::vector<std::string>& texts)
{
    std::vector<DomainSpec> out;
    for (const auto& t : texts) out.push_back(parse_domain(t));
    return out;
}

std::string join_tags(const std::vector<DomainSpec>& ds)
{
    std::string s;
    for (const auto& d : ds) s += (s.empty() ? "" : " ") + d.tag();
    return s;
}

// ---- options -----------------------------------------------------------------

struct Global {
    unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
};

struct SynthOpts {
    std::string domain = "64:8";
    std::uint64_t seed = 0;
    bool qam_only = false;
    double snr = 15.0;
    bool clean = false;
    std::string out;
};

struct DatasetOpts {
    std::size_t n_base = 1000;
    std::size_t n_extra = 0;
    std::string domain = "64:8";
    std::uint64_t seed = 0;
    double snr = 15.0;
    bool clean = false;
    std::string out;
};

struct TrainOpts {
    std::string algo = "erm";
    std::vector<std::string> domains{"64:8"};
    std::vector<std::string> data;
    std::size_t n_base = 100;
    std::size_t n_extra = 0;
    std::size_t max_train = 0;
    int channels = 3;
    double snr = 15.0;
    TrainConfig cfg;
    std::string out;
};

struct EvalOpts {
    std::string model, data, split = "test", out;
    std::size_t limit = 0;
};

struct SweepOpts {
    std::string model, experiment = "fft", tag, out;
    std::vector<std::string> domains, train_domains;
    std::size_t n_per_domain = 8;
    std::uint64_t seed = 0;
    double snr = 15.0;
};

struct InferOpts {
    std::string model, input, format = "auto", out;
    double sample_rate = 20e6;
};

struct CoexOpts {
    std::string scenario = "two-network", detector = "interference-aware", out;
    double snr_min = 0.0, snr_max = 12.0, snr_step = 1.0;
    double rotation_deg = -30.0, phase_deg = 0.0;
    std::int64_t n_symbols = 100000;
    std::uint64_t seed = 0;
};

// ---- subcommands -----------------------------------------------------------------

int run_synth(const SynthOpts& o, const CLI::App& app, const CLI::App& sub)
{
    GenerationOptions gen;
    gen.snr_db = o.snr;
    gen.impairments = !o.clean;
    const DomainSpec dom = parse_domain(o.domain);
    const GeneratedFrame frame = generate_frame(dom, o.qam_only, o.seed, gen);
    const LabeledSample s = generate_sample(dom, o.qam_only, o.seed, gen);

    const fs::path out(o.out);
    prepare_out(out);
    png::write_rgb(out / "image.png", s.image);
    png::write_gray(out / "mask.png", *s.mask);
    png::write_rgb(out / "overlay.png", render_overlay(s.image, *s.mask));
    write_text(out / "meta.json", sample_meta_json(s.meta));
    export_iq(out / "frame.iq", frame.signal);
    write_lock(out, app, sub);
    std::printf("wrote %s: %s, %zu blocks, scale %.6g\n", out.string().c_str(), dom.tag().c_str(),
                s.meta.allocations.size(), s.meta.scale);
    return kOk;
}

int run_dataset(const DatasetOpts& o, const Global& g, const CLI::App& app, const CLI::App& sub)
{
    GenerationOptions gen;
    gen.snr_db = o.snr;
    gen.impairments = !o.clean;
    const fs::path out(o.out);
    prepare_out(out);
    const auto m = build_dataset(o.n_base, o.n_extra, parse_domain(o.domain), o.seed, out, gen, g.jobs);
    write_lock(out, app, sub);
    std::printf("wrote %zu samples to %s (train %zu, validation %zu, test %zu)\n", m.size(), out.string().c_str(),
                m.ids(Split::Train).size(), m.ids(Split::Validation).size(), m.ids(Split::Test).size());
    return kOk;
}

int run_train(TrainOpts& o, const Global& g, const CLI::App& app, const CLI::App& sub)
{
    o.cfg.algorithm = parse_algorithm(o.algo);
    o.cfg.validate();
    const fs::path out(o.out);
    prepare_out(out);

    // One dataset per domain: given with --data, otherwise generated under out/data.
    std::vector<DatasetManifest> sets;
    if (!o.data.empty()) {
        for (const auto& d : o.data) sets.push_back(load_manifest(d));
    } else {
        const auto doms = parse_domains(o.domains);
        GenerationOptions gen;
        gen.snr_db = o.snr;
        for (std::size_t i = 0; i < doms.size(); ++i) {
            const fs::path dir = out / "data" / doms[i].tag();
            sets.push_back(build_dataset(o.n_base, o.n_extra, doms[i], derive_seed(o.cfg.seed, i), dir, gen, g.jobs));
        }
    }

    std::vector<Sample8> samples;
    std::vector<std::vector<std::size_t>> per_domain(sets.size());
    std::vector<std::size_t> train, val;
    std::vector<DomainSpec> doms;
    for (std::size_t d = 0; d < sets.size(); ++d) {
        doms.push_back(sets[d].config.domain);
        for (auto& s : load_split(sets[d], Split::Train, static_cast<int>(d), o.max_train)) {
            per_domain[d].push_back(samples.size());
            train.push_back(samples.size());
            samples.push_back(std::move(s));
        }
        for (auto& s : load_split(sets[d], Split::Validation, static_cast<int>(d))) {
            val.push_back(samples.size());
            samples.push_back(std::move(s));
        }
    }
    if (train.empty()) throw InvalidInput("train: no training samples");

    SegNetConfig ncfg;
    ncfg.in_channels = o.channels;
    ncfg.seed = derive_seed(o.cfg.seed, 0x6d6f64656c);
    SegNet net(ncfg);
    SegObjective obj(net, samples);
    const Eigen::ArrayXd theta0 = net.flat_parameters();

    std::fprintf(stderr, "training %s on %s: %zu train / %zu validation samples, %lld parameters\n",
                 o.algo.c_str(), join_tags(doms).c_str(), train.size(), val.size(),
                 static_cast<long long>(net.parameter_count()));
    const StepHook progress = [](std::int64_t it, const Eigen::ArrayXd&, std::span<const std::size_t>) {
        if (it % 50 == 0) std::fprintf(stderr, "  iteration %lld\n", static_cast<long long>(it));
    };

    TrainResult r;
    switch (o.cfg.algorithm) {
    case Algorithm::ERM: r = train_erm(obj, theta0, train, val, o.cfg, progress); break;
    case Algorithm::SWAD: r = train_swad(obj, theta0, train, val, o.cfg, progress); break;
    case Algorithm::MLDG:
        if (per_domain.size() < 2) throw InvalidInput("train: mldg needs at least two --domains");
        r = train_mldg(obj, theta0, per_domain, val, o.cfg, progress);
        break;
    }
    for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

    net.set_flat_parameters(r.params);
    save_model(out / "model.ckpt", net);
    write_train_log(out / "train_log.csv", r.log);

    json summary{{"algorithm", o.algo},
                 {"domains", json::array()},
                 {"train_samples", train.size()},
                 {"validation_samples", val.size()},
                 {"parameters", net.parameter_count()},
                 {"best_epoch", r.best_epoch},
                 {"best_val_loss", r.best_val_loss},
                 {"epochs_run", r.log.size()},
                 {"warnings", r.warnings}};
    for (const auto& d : doms) summary["domains"].push_back(d.tag());
    if (r.swad)
        summary["swad_window"] = {{"start", r.swad->start}, {"end", r.swad->end}, {"count", r.swad->count},
                                  {"fallback", r.swad->fallback}};
    if (!r.held_out_counts.empty()) summary["held_out_counts"] = r.held_out_counts;
    write_text(out / "summary.json", summary.dump(2));
    write_lock(out, app, sub);
    std::printf("wrote %s: best epoch %d, validation loss %.6g\n", (out / "model.ckpt").string().c_str(),
                r.best_epoch, r.best_val_loss);
    return kOk;
}

void print_report(const EvalReport& r)
{
    for (int k = 0; k < kNumClasses; ++k) {
        const auto name = to_string(static_cast<ModClass>(k));
        if (r.recall[k])
            std::printf("  %-8.*s %6.2f %%\n", static_cast<int>(name.size()), name.data(), 100.0 * *r.recall[k]);
        else
            std::printf("  %-8.*s    n/a\n", static_cast<int>(name.size()), name.data());
    }
    std::printf("  overall  %6.2f %%  (pixel accuracy %.2f %%)\n", 100.0 * r.overall, 100.0 * r.pixel_accuracy);
}

int run_eval(const EvalOpts& o, const Global& g, const CLI::App& app, const CLI::App& sub)
{
    const SegNet net = load_model(o.model);
    const auto manifest = load_manifest(o.data);
    const auto samples = load_split(manifest, parse_split(o.split), 0, o.limit);
    if (samples.empty()) throw InvalidInput("eval: split '" + o.split + "' of " + o.data + " is empty");
    const EvalReport r = evaluate_model(net, samples, g.jobs);
    const fs::path out(o.out);
    prepare_out(out);
    write_text(out / "report.json", report_to_json(r));
    write_lock(out, app, sub);
    std::printf("%zu %s samples from %s\n", samples.size(), o.split.c_str(), o.data.c_str());
    print_report(r);
    return kOk;
}

std::vector<Sample8> domain_samples(const DomainSpec& d, std::size_t n, std::uint64_t seed, double snr)
{
    GenerationOptions gen;
    gen.snr_db = snr;
    const std::uint64_t key = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(d.fft_size)),
                                          static_cast<std::uint64_t>(d.cp_len));
    std::vector<Sample8> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(to_sample8(generate_sample(d, false, derive_seed(key, i), gen)));
    return out;
}

int run_sweep(const SweepOpts& o, const Global& g, const CLI::App& app, const CLI::App& sub)
{
    const SegNet net = load_model(o.model);
    std::vector<DomainSpec> test, train;
    if (o.experiment == "fft") {
        test = fft_test_domains();
        train = fft_training_domains();
    } else if (o.experiment == "cp") {
        test = cp_test_domains();
        train = cp_training_domains();
    } else {
        throw InvalidInput("sweep: --experiment must be fft or cp");
    }
    if (!o.domains.empty()) test = parse_domains(o.domains);
    if (!o.train_domains.empty()) train = parse_domains(o.train_domains);
    if (o.n_per_domain == 0) throw InvalidInput("sweep: --n-per-domain must be > 0");

    std::vector<DomainTestSet> sets;
    for (const auto& d : test) sets.push_back({d, domain_samples(d, o.n_per_domain, o.seed, o.snr)});
    const SweepResult r = domain_sweep(net, test, sets, train, g.jobs);

    const fs::path out(o.out);
    prepare_out(out);
    write_sweep_csv(out / "sweep.csv", r, o.tag);
    write_lock(out, app, sub);
    std::printf("%zu domains, %zu samples each\n", r.rows.size(), o.n_per_domain);
    if (r.in_domain_mean) std::printf("  in-domain mean accuracy      %.4f\n", *r.in_domain_mean);
    if (r.out_domain_mean) std::printf("  out-of-domain mean accuracy  %.4f\n", *r.out_domain_mean);
    return kOk;
}

int run_infer(const InferOpts& o, const CLI::App& app, const CLI::App& sub)
{
    const SegNet net = load_model(o.model);
    std::string fmt = o.format;
    if (fmt == "auto") fmt = fs::path(o.input).extension() == ".png" ? "png" : "iq";
    RgbImage image;
    if (fmt == "png")
        image = png::read_rgb(o.input);
    else if (fmt == "iq")
        image = import_iq(o.input, o.sample_rate).image;
    else
        throw InvalidInput("infer: --format must be auto, png or iq");

    const Inference r = infer(net, image);
    const fs::path out(o.out);
    prepare_out(out);
    png::write_gray(out / "mask.png", r.mask);
    png::write_rgb(out / "overlay.png", r.overlay);

    std::array<std::uint64_t, kNumClasses> counts{};
    for (Eigen::Index i = 0; i < r.mask.size(); ++i) ++counts[r.mask.data()[i]];
    json j{{"rows", r.mask.rows()}, {"cols", r.mask.cols()}, {"pixels", json::object()}};
    for (int k = 0; k < kNumClasses; ++k) j["pixels"][std::string(to_string(static_cast<ModClass>(k)))] = counts[k];
    write_text(out / "classes.json", j.dump(2));
    write_lock(out, app, sub);
    std::printf("wrote %s (%lld x %lld)\n", (out / "mask.png").string().c_str(), static_cast<long long>(r.mask.rows()),
                static_cast<long long>(r.mask.cols()));
    return kOk;
}

int run_coexist(const CoexOpts& o, const Global& g, const CLI::App& app, const CLI::App& sub)
{
    if (o.scenario != "two-network") throw InvalidInput("coexist: only --scenario two-network is defined");
    if (!(o.snr_step > 0.0) || o.snr_max < o.snr_min) throw InvalidInput("coexist: bad SNR grid");
    const CoexScenario scn = CoexScenario::two_network();
    const CoexSinr s = sinr(scn);
    const double isr = ran1_interference_ratio_db(scn);

    std::printf("RAN1 SINR %.1f dB (standalone %.1f dB)\n", s.ran1.sinr_db, s.ran1.snr_db);
    std::printf("RAN2 SINR %.1f dB (standalone %.1f dB)\n", s.ran2.sinr_db, s.ran2.snr_db);
    std::printf("RAN1 receiver: signal %.2f dBm, interference %.2f dBm, noise %.2f dBm\n", s.ran1.signal_dbm,
                s.ran1.interference_dbm, s.ran1.noise_dbm);

    BerConfig cfg;
    for (int i = 0;; ++i) {
        const double v = o.snr_min + i * o.snr_step;
        if (v > o.snr_max + 1e-9) break;
        cfg.snr_db.push_back(v);
    }
    cfg.n_symbols = o.n_symbols;
    cfg.seed = o.seed;
    cfg.detector = parse_detector(o.detector);
    cfg.interferer = Interferer::bpsk_db(isr, o.phase_deg * std::numbers::pi / 180.0);
    cfg.jobs = g.jobs;
    const auto plain = ber_sim(cfg);
    cfg.rotation_rad = o.rotation_deg * std::numbers::pi / 180.0;
    const auto rotated = ber_sim(cfg);

    const fs::path out(o.out);
    prepare_out(out);
    char rot_tag[64];
    std::snprintf(rot_tag, sizeof rot_tag, "rotated%+gdeg", o.rotation_deg);
    write_ber_csv(out / "ber.csv", plain, "plain");
    write_ber_csv(out / "ber.csv", rotated, rot_tag, true);
    auto budget = [](const LinkBudget& b) {
        return json{{"signal_dbm", b.signal_dbm}, {"interference_dbm", b.interference_dbm}, {"noise_dbm", b.noise_dbm},
                    {"snr_db", b.snr_db},         {"sinr_db", b.sinr_db}};
    };
    write_text(out / "sinr.json",
               json{{"ran1", budget(s.ran1)}, {"ran2", budget(s.ran2)}, {"ran1_interference_to_signal_db", isr}}
                   .dump(2));
    write_lock(out, app, sub);

    std::printf("%8s %12s %12s\n", "snr_db", "plain", rot_tag);
    for (std::size_t i = 0; i < plain.size(); ++i)
        std::printf("%8.2f %12.4e %12.4e\n", plain[i].snr_db, plain[i].ber, rotated[i].ber);
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"OFDMA spectrogram modulation segmentation toolchain"};
    app.set_version_flag("--version", version_text());
    app.set_config("--config", "", "Load options from a key=value file (e.g. a config.lock)")->configurable(false);
    app.require_subcommand(1);
    app.get_formatter()->column_width(34);
    app.footer("Exit codes: 0 ok, 1 internal, 2 usage, 3 invalid input, 4 malformed file, 5 I/O, 6 training failure.\n"
               "Precedence: command-line flags > config file > MODSEG_* environment variables > defaults.");

    Global g;
    app.add_option("--jobs", g.jobs, "Worker threads")->capture_default_str()->envname("MODSEG_JOBS")->check(
        CLI::PositiveNumber);

    SynthOpts so;
    auto* synth = app.add_subcommand("synth", "Generate one labeled sample for inspection");
    synth->add_option("--domain", so.domain, "FFT size and CP as fft:cp")->capture_default_str();
    synth->add_option("--seed", so.seed)->capture_default_str()->envname("MODSEG_SEED");
    synth->add_flag("--qam-only", so.qam_only, "Only 16-QAM / 64-QAM blocks");
    synth->add_option("--snr", so.snr, "AWGN SNR in dB")->capture_default_str();
    synth->add_flag("--clean", so.clean, "Skip channel impairments");
    synth->add_option("--out", so.out, "Output directory")->required();

    DatasetOpts dso;
    auto* dataset = app.add_subcommand("dataset", "Build a dataset directory");
    dataset->add_option("--n-base", dso.n_base, "Samples with all modulations")->capture_default_str();
    dataset->add_option("--n-extra", dso.n_extra, "Additional QAM-only samples")->capture_default_str();
    dataset->add_option("--domain", dso.domain, "FFT size and CP as fft:cp")->capture_default_str();
    dataset->add_option("--seed", dso.seed)->capture_default_str()->envname("MODSEG_SEED");
    dataset->add_option("--snr", dso.snr, "AWGN SNR in dB")->capture_default_str();
    dataset->add_flag("--clean", dso.clean, "Skip channel impairments");
    dataset->add_option("--out", dso.out, "Output directory")->required();

    TrainOpts to;
    auto* train = app.add_subcommand("train", "Train a segmentation model");
    train->add_option("--algo", to.algo, "erm, swad or mldg")->capture_default_str();
    train->add_option("--domains", to.domains, "Training domains (fft:cp), generated under OUT/data")
        ->capture_default_str();
    train->add_option("--data", to.data, "Existing dataset directories, one per domain (replaces generation)");
    train->add_option("--n-base", to.n_base, "Generated samples per domain")->capture_default_str();
    train->add_option("--n-extra", to.n_extra, "Generated QAM-only samples per domain")->capture_default_str();
    train->add_option("--snr", to.snr, "AWGN SNR of generated data in dB")->capture_default_str();
    train->add_option("--max-train", to.max_train, "Cap on training samples per domain (0 = all)")
        ->capture_default_str();
    train->add_option("--channels", to.channels, "Input planes: 3 (Re, Im, |.|) or 2 (Re, Im)")
        ->capture_default_str()
        ->check(CLI::Range(2, 3));
    train->add_option("--seed", to.cfg.seed)->capture_default_str()->envname("MODSEG_SEED");
    train->add_option("--epochs", to.cfg.epochs)->capture_default_str();
    train->add_option("--batch", to.cfg.batch_size)->capture_default_str();
    train->add_option("--lr", to.cfg.lr0, "Initial learning rate")->capture_default_str();
    train->add_option("--lr-decay", to.cfg.lr_decay, "Per-epoch learning-rate factor")->capture_default_str();
    train->add_option("--patience", to.cfg.patience, "Early-stopping patience in epochs (0 = off)")
        ->capture_default_str();
    train->add_option("--swad-switch", to.cfg.swad_switch_epoch, "SWAD: epochs of plain training first")
        ->capture_default_str();
    train->add_option("--swad-lr", to.cfg.swad_lr)->capture_default_str();
    train->add_option("--swad-tolerance", to.cfg.swad_tolerance)->capture_default_str();
    train->add_option("--swad-val-items", to.cfg.swad_val_items, "SWAD: validation items per iteration")
        ->capture_default_str();
    train->add_option("--mldg-alpha", to.cfg.mldg_alpha, "MLDG inner step (0 = current lr)")->capture_default_str();
    train->add_option("--mldg-beta", to.cfg.mldg_beta)->capture_default_str();
    train->add_flag("--mldg-first-order", to.cfg.mldg_first_order, "MLDG: drop the Hessian term");
    train->add_option("--out", to.out, "Output directory")->required();

    EvalOpts eo;
    auto* eval = app.add_subcommand("eval", "Evaluate a model on a dataset split");
    eval->add_option("--model", eo.model, "Checkpoint")->required();
    eval->add_option("--data", eo.data, "Dataset directory")->required();
    eval->add_option("--split", eo.split, "train, validation or test")->capture_default_str();
    eval->add_option("--limit", eo.limit, "Evaluate at most this many samples (0 = all)")->capture_default_str();
    eval->add_option("--out", eo.out, "Output directory")->required();

    SweepOpts swo;
    auto* sweep = app.add_subcommand("sweep", "Accuracy per test domain");
    sweep->add_option("--model", swo.model, "Checkpoint")->required();
    sweep->add_option("--experiment", swo.experiment, "fft (FFT-size domains) or cp (CP-length domains)")
        ->capture_default_str();
    sweep->add_option("--domains", swo.domains, "Test domains (default: the experiment's full grid)");
    sweep->add_option("--train-domains", swo.train_domains, "Domains counted as in-domain");
    sweep->add_option("--n-per-domain", swo.n_per_domain)->capture_default_str();
    sweep->add_option("--seed", swo.seed)->capture_default_str()->envname("MODSEG_SEED");
    sweep->add_option("--snr", swo.snr)->capture_default_str();
    sweep->add_option("--tag", swo.tag, "Free-text tag written to every row")->capture_default_str();
    sweep->add_option("--out", swo.out, "Output directory")->required();

    InferOpts io;
    auto* inf = app.add_subcommand("infer", "Segment a spectrogram PNG or a raw I/Q capture");
    inf->add_option("--model", io.model, "Checkpoint")->required();
    inf->add_option("--input", io.input, "PNG image or float32 I/Q file")->required();
    inf->add_option("--format", io.format, "auto, png or iq")->capture_default_str();
    inf->add_option("--sample-rate", io.sample_rate, "I/Q sample rate in Hz")->capture_default_str();
    inf->add_option("--out", io.out, "Output directory")->required();

    CoexOpts co;
    auto* coex = app.add_subcommand("coexist", "Two-network SINR and BER study");
    coex->add_option("--scenario", co.scenario)->capture_default_str();
    coex->add_option("--snr-min", co.snr_min)->capture_default_str();
    coex->add_option("--snr-max", co.snr_max)->capture_default_str();
    coex->add_option("--snr-step", co.snr_step)->capture_default_str();
    coex->add_option("--rotation-deg", co.rotation_deg, "Phase rotation of the adapted constellation")
        ->capture_default_str();
    coex->add_option("--phase-deg", co.phase_deg, "Interferer phase relative to the I axis")->capture_default_str();
    coex->add_option("--detector", co.detector, "naive or interference-aware")->capture_default_str();
    coex->add_option("--n-symbols", co.n_symbols, "Symbols per SNR point")->capture_default_str();
    coex->add_option("--seed", co.seed)->capture_default_str()->envname("MODSEG_SEED");
    coex->add_option("--out", co.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) return run_synth(so, app, *synth);
        if (*dataset) return run_dataset(dso, g, app, *dataset);
        if (*train) return run_train(to, g, app, *train);
        if (*eval) return run_eval(eo, g, app, *eval);
        if (*sweep) return run_sweep(swo, g, app, *sweep);
        if (*inf) return run_infer(io, app, *inf);
        if (*coex) return run_coexist(co, g, app, *coex);
    } catch (const InvalidInput& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInvalid;
    } catch (const MalformedInput& e) {
        std::fprintf(stderr, "error: malformed input: %s\n", e.what());
        return kMalformed;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: I/O: %s\n", e.what());
        return kIo;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "error: training: %s\n", e.what());
        return kTraining;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return kInternal;
    }
    return kInternal;
}
