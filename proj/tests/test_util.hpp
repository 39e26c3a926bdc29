#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "modseg/rng.hpp"

namespace testutil {

inline Eigen::ArrayXd random_array(Eigen::Index n, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    modseg::CounterRng rng(seed);
    Eigen::ArrayXd a(n);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = lo + (hi - lo) * rng.uniform();
    return a;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("modseg_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& p)
{
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// FNV-1a over the relative paths and bytes of every regular file under `root`
/// (sorted), skipping files named in `skip`.
inline std::uint64_t tree_hash(const std::filesystem::path& root, const std::vector<std::string>& skip = {})
{
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), root));
    std::sort(files.begin(), files.end());
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(p[i]);
            h *= 1099511628211ULL;
        }
    };
    for (const auto& rel : files) {
        if (std::find(skip.begin(), skip.end(), rel.filename().string()) != skip.end()) continue;
        const std::string name = rel.generic_string();
        mix(name.data(), name.size() + 1);
        const auto bytes = read_bytes(root / rel);
        mix(bytes.data(), bytes.size());
    }
    return h;
}

}  // namespace testutil
