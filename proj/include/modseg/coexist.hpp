#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "modseg/waveform.hpp"

namespace modseg {

/// Two co-located radio access networks sharing a band. Distances in meters,
/// transmit powers in mW, standalone SNRs in dB.
struct CoexScenario {
    double gamma = 2.0;          // path-loss exponent
    double wavelength = 0.125;   // 2.4 GHz
    double ran1_tx_mw = 100.0;
    double ran2_tx_mw = 100.0;
    double ran1_link_m = 10.0;      // RAN1 tx -> RAN1 rx
    double ran2_link_m = 15.0;      // RAN2 tx -> RAN2 rx
    double ran2_to_ran1_m = 15.0;   // RAN2 tx -> RAN1 rx
    double ran1_to_ran2_m = 29.0;   // RAN1 tx -> RAN2 rx
    double ran1_snr_db = 8.0;
    double ran2_snr_db = 4.5;

    static CoexScenario two_network() { return {}; }
    void validate() const;
};

/// 10 * gamma * log10(4 pi d / lambda).
double path_loss_db(double d, double gamma, double lambda);

double mw_to_dbm(double mw);
double dbm_to_mw(double dbm);

struct LinkBudget {
    double signal_dbm = 0.0;
    double interference_dbm = 0.0;  // -inf when there is no interferer
    double noise_dbm = 0.0;
    double snr_db = 0.0;   // standalone
    double sinr_db = 0.0;  // under coexistence
};

/// Noise is solved from the standalone SNR; the result is
/// signal / (interference + noise) in dB. Zero interference returns snr_db.
LinkBudget link_budget(double signal_mw, double interference_mw, double standalone_snr_db);

struct CoexSinr {
    LinkBudget ran1;
    LinkBudget ran2;
};

CoexSinr sinr(const CoexScenario& scn);

// ---- BER simulation ---------------------------------------------------------

/// Naive: nearest point of the rotated constellation. InterferenceAware:
/// symbol maximizing the likelihood summed over both interferer symbols.
enum class Detector { Naive, InterferenceAware };
std::string_view to_string(Detector d) noexcept;
Detector parse_detector(std::string_view s);

/// BPSK interferer added on top of the signal. `power_ratio` is the linear
/// interference-to-signal power ratio; the phase is relative to the I axis.
struct Interferer {
    bool enabled = false;
    double power_ratio = 0.0;
    double phase_rad = 0.0;

    static Interferer bpsk_db(double power_db, double phase_rad = 0.0);
};

struct BerConfig {
    ModClass modulation = ModClass::QPSK;
    double rotation_rad = 0.0;
    Interferer interferer;
    std::vector<double> snr_db;  // Es/N0 of the wanted signal
    std::int64_t n_symbols = 100000;
    std::uint64_t seed = 0;
    Detector detector = Detector::Naive;
    unsigned jobs = 1;

    void validate() const;
};

struct BerPoint {
    double snr_db = 0.0;
    std::uint64_t errors = 0;
    std::uint64_t bits = 0;
    double ber = 0.0;
    double ci_low = 0.0;  // 95% Wilson interval
    double ci_high = 0.0;
};

/// Monte Carlo bit error rate per grid point. Point i draws from streams
/// derived from (seed, i), so results do not depend on `jobs`.
std::vector<BerPoint> ber_sim(const BerConfig& cfg);

struct WilsonInterval {
    double low = 0.0;
    double high = 0.0;
};
WilsonInterval wilson_interval(std::uint64_t successes, std::uint64_t trials, double z = 1.959964);

/// Gray QPSK in AWGN: Q(sqrt(Es/N0)).
double qpsk_ber_awgn(double snr_db);

/// Interference-to-signal ratio (dB) seen by the RAN1 receiver.
double ran1_interference_ratio_db(const CoexScenario& scn);

void write_ber_csv(const std::filesystem::path& path, const std::vector<BerPoint>& points,
                   const std::string& tag, bool append = false);

}  // namespace modseg
