#include "modseg/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <thread>

#include "modseg/error.hpp"

namespace modseg {

using json = nlohmann::json;

void accumulate_confusion(Confusion& c, std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth)
{
    if (pred.size() != truth.size())
        throw InvalidInput("confusion: " + std::to_string(pred.size()) + " predicted pixels vs " +
                           std::to_string(truth.size()) + " ground-truth pixels");
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= kNumClasses || truth[i] >= kNumClasses)
            throw InvalidInput("confusion: invalid class code at pixel " + std::to_string(i));
        ++c[truth[i]][pred[i]];
    }
}

EvalReport make_report(const Confusion& c)
{
    EvalReport r;
    r.confusion = c;
    std::uint64_t hit = 0;
    double recall_sum = 0.0;
    int present = 0;
    for (int t = 0; t < kNumClasses; ++t) {
        std::uint64_t row = 0;
        for (int p = 0; p < kNumClasses; ++p) row += c[t][p];
        r.pixels += row;
        hit += c[t][t];
        if (row > 0) {
            r.recall[t] = static_cast<double>(c[t][t]) / static_cast<double>(row);
            recall_sum += *r.recall[t];
            ++present;
        }
    }
    r.overall = present ? recall_sum / present : 0.0;
    r.pixel_accuracy = r.pixels ? static_cast<double>(hit) / static_cast<double>(r.pixels) : 0.0;
    return r;
}

EvalReport confusion(std::span<const Plane8> pred, std::span<const Plane8> truth)
{
    if (pred.size() != truth.size())
        throw InvalidInput("confusion: " + std::to_string(pred.size()) + " predictions for " +
                           std::to_string(truth.size()) + " masks");
    Confusion c{};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].rows() != truth[i].rows() || pred[i].cols() != truth[i].cols())
            throw InvalidInput("confusion: mask " + std::to_string(i) + " is " + std::to_string(pred[i].rows()) + "x" +
                               std::to_string(pred[i].cols()) + ", truth is " + std::to_string(truth[i].rows()) +
                               "x" + std::to_string(truth[i].cols()));
        accumulate_confusion(c, {pred[i].data(), static_cast<std::size_t>(pred[i].size())},
                             {truth[i].data(), static_cast<std::size_t>(truth[i].size())});
    }
    return make_report(c);
}

std::string report_to_json(const EvalReport& r)
{
    json j;
    j["format_version"] = kReportFormatVersion;
    j["confusion"] = r.confusion;
    json names = json::array(), recall = json::object();
    for (int k = 0; k < kNumClasses; ++k) {
        const std::string name(to_string(static_cast<ModClass>(k)));
        names.push_back(name);
        recall[name] = r.recall[k] ? json(*r.recall[k]) : json(nullptr);
    }
    j["classes"] = names;
    j["recall"] = recall;
    j["overall_accuracy"] = r.overall;
    j["overall_definition"] = "mean recall over classes present in the ground truth";
    j["pixel_accuracy"] = r.pixel_accuracy;
    j["pixels"] = r.pixels;
    return j.dump(2);
}

EvalReport report_from_json(const std::string& text)
{
    try {
        const json j = json::parse(text);
        if (j.value("format_version", kReportFormatVersion) != kReportFormatVersion)
            throw MalformedInput("evaluation report: unsupported format version");
        return make_report(j.at("confusion").get<Confusion>());
    } catch (const json::exception& e) {
        throw MalformedInput(std::string("evaluation report: ") + e.what());
    }
}

// ---- inference -------------------------------------------------------------

Plane8 predict_mask(const SegNet& net, const RgbImage& image)
{
    ad::NoGradGuard no_grad;
    const int ch = net.in_channels();
    const ad::Tensor x = ad::Tensor::constant({ch, image.rows(), image.cols()}, image_to_tensor(image, ch));
    const auto cls = argmax_classes(net.forward(x));
    Plane8 mask(image.rows(), image.cols());
    std::copy(cls.begin(), cls.end(), mask.data());
    return mask;
}

RgbImage render_overlay(const RgbImage& image, const Plane8& mask)
{
    if (mask.rows() != image.rows() || mask.cols() != image.cols())
        throw InvalidInput("overlay: mask and image dimensions differ");
    RgbImage out;
    Plane8* planes[3] = {&out.r, &out.g, &out.b};
    for (int c = 0; c < 3; ++c) {
        planes[c]->resize(image.rows(), image.cols());
        for (Eigen::Index i = 0; i < mask.size(); ++i) {
            const unsigned m = image.b.data()[i];
            const unsigned p = kPalette.at(mask.data()[i])[static_cast<std::size_t>(c)];
            planes[c]->data()[i] = static_cast<std::uint8_t>((m + p + 1) / 2);
        }
    }
    return out;
}

Inference infer(const SegNet& net, const RgbImage& image)
{
    if (image.rows() != kImageHeight || image.cols() < 8)
        throw InvalidInput("infer: image must be " + std::to_string(kImageHeight) + " x W with W >= 8, got " +
                           std::to_string(image.rows()) + " x " + std::to_string(image.cols()));
    Inference r;
    r.mask = predict_mask(net, image);
    r.overlay = render_overlay(image, r.mask);
    return r;
}

EvalReport evaluate_model(const SegNet& net, std::span<const Sample8> samples, unsigned jobs)
{
    jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(samples.size(), 1))));
    std::vector<Confusion> partial(jobs, Confusion{});
    std::vector<std::exception_ptr> errors(jobs);
    auto work = [&](unsigned w) {
        try {
            for (std::size_t i = w; i < samples.size(); i += jobs) {
                const Plane8 pred = predict_mask(net, samples[i].image);
                accumulate_confusion(partial[w], {pred.data(), static_cast<std::size_t>(pred.size())},
                                     {samples[i].mask.data(), static_cast<std::size_t>(samples[i].mask.size())});
            }
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
    Confusion total{};
    for (const auto& p : partial)
        for (int t = 0; t < kNumClasses; ++t)
            for (int q = 0; q < kNumClasses; ++q) total[t][q] += p[t][q];
    return make_report(total);
}

// ---- sweeps ----------------------------------------------------------------

void summarize_sweep(SweepResult& r)
{
    double in_sum = 0.0, out_sum = 0.0;
    int n_in = 0, n_out = 0;
    for (const auto& row : r.rows) {
        if (row.in_domain) {
            in_sum += row.accuracy;
            ++n_in;
        } else {
            out_sum += row.accuracy;
            ++n_out;
        }
    }
    r.in_domain_mean = n_in ? std::optional(in_sum / n_in) : std::nullopt;
    r.out_domain_mean = n_out ? std::optional(out_sum / n_out) : std::nullopt;
}

SweepResult domain_sweep(const SegNet& net, std::span<const DomainSpec> domains,
                         std::span<const DomainTestSet> test_sets, std::span<const DomainSpec> train_domains,
                         unsigned jobs)
{
    SweepResult r;
    for (const auto& d : domains) {
        const auto it = std::find_if(test_sets.begin(), test_sets.end(),
                                     [&](const DomainTestSet& s) { return s.domain == d; });
        if (it == test_sets.end() || it->samples.empty())
            throw InvalidInput("domain sweep: no test set for domain " + d.tag());
        const EvalReport rep = evaluate_model(net, it->samples, jobs);
        const bool in = std::find(train_domains.begin(), train_domains.end(), d) != train_domains.end();
        r.rows.push_back({d, rep.overall, rep.pixel_accuracy, in});
    }
    summarize_sweep(r);
    return r;
}

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r, const std::string& tag)
{
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << "domain,fft_size,cp_len,accuracy,pixel_accuracy,split,tag\n";
    char buf[256];
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%s,", row.domain.tag().c_str(), row.domain.fft_size,
                      row.domain.cp_len, row.accuracy, row.pixel_accuracy, row.in_domain ? "in" : "out");
        f << buf << tag << "\n";
    }
    if (!f) throw IoError("failed writing " + path.string());
}

SweepResult read_sweep_csv(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line) || line.rfind("domain,fft_size,cp_len,accuracy", 0) != 0)
        throw MalformedInput(path.string() + ": not a sweep CSV");
    SweepResult r;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 6) throw MalformedInput(path.string() + ":" + std::to_string(lineno) + ": too few columns");
        try {
            SweepRow row;
            row.domain.fft_size = std::stoi(cells[1]);
            row.domain.cp_len = std::stoi(cells[2]);
            row.accuracy = std::stod(cells[3]);
            row.pixel_accuracy = std::stod(cells[4]);
            if (cells[5] != "in" && cells[5] != "out") throw std::invalid_argument("split");
            row.in_domain = cells[5] == "in";
            r.rows.push_back(row);
        } catch (const std::exception&) {
            throw MalformedInput(path.string() + ":" + std::to_string(lineno) + ": bad value");
        }
    }
    summarize_sweep(r);
    return r;
}

std::vector<DomainSpec> fft_training_domains()
{
    std::vector<DomainSpec> d;
    for (int n : {8, 12, 16, 24, 32, 48, 64}) d.push_back({n, 8});
    return d;
}

std::vector<DomainSpec> fft_test_domains()
{
    std::vector<DomainSpec> d;
    for (int n = 8; n <= 128; ++n) d.push_back({n, 8});
    return d;
}

std::vector<DomainSpec> cp_training_domains()
{
    std::vector<DomainSpec> d;
    for (int cp = 0; cp <= 8; ++cp) d.push_back({32, cp});
    return d;
}

std::vector<DomainSpec> cp_test_domains()
{
    std::vector<DomainSpec> d;
    for (int cp = 0; cp <= 16; ++cp) d.push_back({32, cp});
    return d;
}

}  // namespace modseg
