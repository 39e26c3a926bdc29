#include "modseg/coexist.hpp"

#include <bit>
#include <cmath>
#include <complex>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numbers>
#include <thread>

#include "modseg/error.hpp"
#include "modseg/rng.hpp"

namespace modseg {

namespace {

bool positive(double x) { return std::isfinite(x) && x > 0.0; }

}  // namespace

void CoexScenario::validate() const
{
    const std::pair<const char*, double> checks[] = {
        {"gamma", gamma},
        {"wavelength", wavelength},
        {"ran1_tx_mw", ran1_tx_mw},
        {"ran2_tx_mw", ran2_tx_mw},
        {"ran1_link_m", ran1_link_m},
        {"ran2_link_m", ran2_link_m},
        {"ran2_to_ran1_m", ran2_to_ran1_m},
        {"ran1_to_ran2_m", ran1_to_ran2_m},
    };
    for (const auto& [name, v] : checks)
        if (!positive(v)) throw InvalidInput(std::string("coexistence scenario: ") + name + " must be > 0");
    if (!std::isfinite(ran1_snr_db) || !std::isfinite(ran2_snr_db))
        throw InvalidInput("coexistence scenario: standalone SNRs must be finite");
}

double path_loss_db(double d, double gamma, double lambda)
{
    if (!positive(d) || !positive(lambda)) throw InvalidInput("path_loss_db: distance and wavelength must be > 0");
    if (!positive(gamma)) throw InvalidInput("path_loss_db: exponent must be > 0");
    return 10.0 * gamma * std::log10(4.0 * std::numbers::pi * d / lambda);
}

double mw_to_dbm(double mw) { return 10.0 * std::log10(mw); }
double dbm_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }

LinkBudget link_budget(double signal_mw, double interference_mw, double standalone_snr_db)
{
    if (!positive(signal_mw)) throw InvalidInput("link budget: signal power must be > 0");
    if (!std::isfinite(interference_mw) || interference_mw < 0.0)
        throw InvalidInput("link budget: interference power must be >= 0");
    if (!std::isfinite(standalone_snr_db)) throw InvalidInput("link budget: standalone SNR must be finite");
    LinkBudget b;
    b.signal_dbm = mw_to_dbm(signal_mw);
    b.interference_dbm = mw_to_dbm(interference_mw);
    b.snr_db = standalone_snr_db;
    b.noise_dbm = b.signal_dbm - standalone_snr_db;
    const double noise_mw = dbm_to_mw(b.noise_dbm);
    if (!positive(noise_mw)) throw InvalidInput("link budget: standalone SNR implies a non-positive noise power");
    b.sinr_db = interference_mw == 0.0 ? standalone_snr_db : mw_to_dbm(signal_mw / (interference_mw + noise_mw));
    return b;
}

CoexSinr sinr(const CoexScenario& scn)
{
    scn.validate();
    auto rx = [&](double tx_mw, double d) {
        return dbm_to_mw(mw_to_dbm(tx_mw) - path_loss_db(d, scn.gamma, scn.wavelength));
    };
    CoexSinr r;
    r.ran1 = link_budget(rx(scn.ran1_tx_mw, scn.ran1_link_m), rx(scn.ran2_tx_mw, scn.ran2_to_ran1_m), scn.ran1_snr_db);
    r.ran2 = link_budget(rx(scn.ran2_tx_mw, scn.ran2_link_m), rx(scn.ran1_tx_mw, scn.ran1_to_ran2_m), scn.ran2_snr_db);
    return r;
}

double ran1_interference_ratio_db(const CoexScenario& scn)
{
    const auto r = sinr(scn);
    return r.ran1.interference_dbm - r.ran1.signal_dbm;
}

// ---- BER ----------------------------------------------------------------------

std::string_view to_string(Detector d) noexcept
{
    return d == Detector::Naive ? "naive" : "interference-aware";
}

Detector parse_detector(std::string_view s)
{
    if (s == "naive") return Detector::Naive;
    if (s == "interference-aware" || s == "aware") return Detector::InterferenceAware;
    throw InvalidInput("unknown detector '" + std::string(s) + "' (expected naive or interference-aware)");
}

Interferer Interferer::bpsk_db(double power_db, double phase_rad)
{
    return {true, std::pow(10.0, power_db / 10.0), phase_rad};
}

void BerConfig::validate() const
{
    if (bits_per_symbol(modulation) == 0) throw InvalidInput("ber_sim: modulation must carry bits");
    if (n_symbols < 10000) throw InvalidInput("ber_sim: at least 10^4 symbols per point are required");
    if (snr_db.empty()) throw InvalidInput("ber_sim: empty SNR grid");
    for (double s : snr_db)
        if (!std::isfinite(s)) throw InvalidInput("ber_sim: SNR grid values must be finite");
    if (!std::isfinite(rotation_rad)) throw InvalidInput("ber_sim: rotation must be finite");
    if (interferer.enabled && (!std::isfinite(interferer.power_ratio) || interferer.power_ratio < 0.0 ||
                               !std::isfinite(interferer.phase_rad)))
        throw InvalidInput("ber_sim: interferer power must be >= 0 and phase finite");
}

WilsonInterval wilson_interval(std::uint64_t successes, std::uint64_t trials, double z)
{
    if (trials == 0) return {0.0, 1.0};
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2.0 * n)) / denom;
    const double half = z / denom * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

double qpsk_ber_awgn(double snr_db)
{
    const double snr = std::pow(10.0, snr_db / 10.0);
    return 0.5 * std::erfc(std::sqrt(snr / 2.0));
}

namespace {

struct Constellation {
    std::vector<std::complex<double>> points;  // index = bit pattern, first bit most significant
    int bps = 0;
};

Constellation rotated_constellation(ModClass mod, double rotation)
{
    Constellation c;
    c.bps = bits_per_symbol(mod);
    const int m = 1 << c.bps;
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(c.bps) * static_cast<std::size_t>(m));
    for (int s = 0; s < m; ++s)
        for (int b = 0; b < c.bps; ++b)
            bits[static_cast<std::size_t>(s * c.bps + b)] = static_cast<std::uint8_t>((s >> (c.bps - 1 - b)) & 1);
    const auto sym = map_bits_to_symbols<double>(bits, mod);
    const std::complex<double> rot = std::polar(1.0, rotation);
    for (int s = 0; s < m; ++s) c.points.push_back(sym[s] * rot);
    return c;
}

BerPoint simulate_point(const BerConfig& cfg, const Constellation& con, std::size_t index)
{
    const std::uint64_t key = derive_seed(cfg.seed, index);
    CounterRng sym_rng(derive_seed(key, 0)), intf_rng(derive_seed(key, 1)), noise_rng(derive_seed(key, 2));

    const double snr_db = cfg.snr_db[index];
    const double sigma = std::sqrt(0.5 * std::pow(10.0, -snr_db / 10.0));
    const bool with_intf = cfg.interferer.enabled;
    const std::complex<double> intf =
        with_intf ? std::polar(std::sqrt(cfg.interferer.power_ratio), cfg.interferer.phase_rad)
                  : std::complex<double>(0.0);

    const int m = static_cast<int>(con.points.size());
    const bool aware = cfg.detector == Detector::InterferenceAware && with_intf && cfg.interferer.power_ratio > 0.0;
    const double n0 = 2.0 * sigma * sigma;
    std::vector<double> metric(static_cast<std::size_t>(m));

    BerPoint p;
    p.snr_db = snr_db;
    for (std::int64_t n = 0; n < cfg.n_symbols; ++n) {
        const int s = static_cast<int>(sym_rng.below(static_cast<std::uint64_t>(m)));
        const double ib = intf_rng.bit() ? -1.0 : 1.0;
        const double nr = noise_rng.normal(), ni = noise_rng.normal();
        std::complex<double> y = con.points[static_cast<std::size_t>(s)];
        if (with_intf) y += ib * intf;
        y += std::complex<double>(sigma * nr, sigma * ni);

        // Naive: nearest constellation point. Aware: symbol likelihood summed
        // over both interferer symbols (log domain, larger is better).
        for (int t = 0; t < m; ++t) {
            const auto& c = con.points[static_cast<std::size_t>(t)];
            if (aware) {
                const double d1 = std::norm(y - c - intf), d2 = std::norm(y - c + intf);
                const double lo = std::min(d1, d2);
                metric[static_cast<std::size_t>(t)] = -lo / n0 + std::log1p(std::exp(-(std::max(d1, d2) - lo) / n0));
            } else {
                metric[static_cast<std::size_t>(t)] = -std::norm(y - c);
            }
        }
        int best = 0;
        for (int t = 1; t < m; ++t)
            if (metric[static_cast<std::size_t>(t)] > metric[static_cast<std::size_t>(best)]) best = t;
        p.errors += static_cast<std::uint64_t>(std::popcount(static_cast<unsigned>(s ^ best)));
    }
    p.bits = static_cast<std::uint64_t>(cfg.n_symbols) * static_cast<std::uint64_t>(con.bps);
    p.ber = static_cast<double>(p.errors) / static_cast<double>(p.bits);
    const auto ci = wilson_interval(p.errors, p.bits);
    p.ci_low = ci.low;
    p.ci_high = ci.high;
    return p;
}

}  // namespace

std::vector<BerPoint> ber_sim(const BerConfig& cfg)
{
    cfg.validate();
    const Constellation con = rotated_constellation(cfg.modulation, cfg.rotation_rad);
    const std::size_t n = cfg.snr_db.size();
    std::vector<BerPoint> out(n);
    const unsigned jobs = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(n)));
    std::vector<std::exception_ptr> errors(jobs);
    auto work = [&](unsigned w) {
        try {
            for (std::size_t i = w; i < n; i += jobs) out[i] = simulate_point(cfg, con, i);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (jobs == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < jobs; ++w) pool.emplace_back(work, w);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

void write_ber_csv(const std::filesystem::path& path, const std::vector<BerPoint>& points, const std::string& tag,
                   bool append)
{
    const bool header = !append || !std::filesystem::exists(path);
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    if (header) f << "snr_db,ber,ci_low,ci_high,errors,bits,tag\n";
    char buf[256];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%llu,%llu,", p.snr_db, p.ber, p.ci_low, p.ci_high,
                      static_cast<unsigned long long>(p.errors), static_cast<unsigned long long>(p.bits));
        f << buf << tag << "\n";
    }
    if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace modseg
