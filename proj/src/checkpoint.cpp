#include "modseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "modseg/error.hpp"

namespace modseg {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v)
{
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    template <typename T>
    T get()
    {
        if (pos_ + sizeof(T) > bytes_.size()) throw MalformedInput("checkpoint truncated");
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string str(std::size_t n)
    {
        if (pos_ + n > bytes_.size()) throw MalformedInput("checkpoint truncated");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& entries)
{
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (ad::numel(e.shape) != e.values.size())
            throw InvalidInput("checkpoint entry " + e.name + ": shape " + ad::to_string(e.shape) +
                               " does not match " + std::to_string(e.values.size()) + " values");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) put<std::int64_t>(out, d);
    }
    for (const auto& e : entries)
        for (double v : e.values) put<double>(out, v);
    return out;
}

std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes)
{
    Reader r(bytes);
    if (r.str(8) != std::string(kMagic, 8)) throw MalformedInput("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw MalformedInput("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedArray> entries(count);
    for (auto& e : entries) {
        e.name = r.str(r.get<std::uint32_t>());
        const auto ndim = r.get<std::uint32_t>();
        if (ndim > 8) throw MalformedInput("checkpoint entry " + e.name + ": bad rank");
        for (std::uint32_t i = 0; i < ndim; ++i) {
            const auto d = r.get<std::int64_t>();
            if (d < 0) throw MalformedInput("checkpoint entry " + e.name + ": negative dimension");
            e.shape.push_back(d);
        }
    }
    for (auto& e : entries) {
        e.values.resize(ad::numel(e.shape));
        for (auto& v : e.values) v = r.get<double>();
    }
    if (!r.done()) throw MalformedInput("checkpoint has trailing bytes");
    return entries;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& entries)
{
    const auto bytes = encode_checkpoint(entries);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing " + path.string());
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace modseg
