#include "warpkit/tensor_io.hpp"

#include <cstring>
#include <fstream>

#include "warpkit/error.hpp"

namespace warpkit {

namespace {

constexpr char kMagic[4] = {'W', 'K', 'T', '1'};
constexpr std::uint32_t kMaxRank = 8;

// Everything is written little-endian; on a big-endian host these would need
// byte swaps, but the toolchains we target are all little-endian.
template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("truncated tensor file: " + path.string());
    return v;
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    if (t.rank() == 0 || t.rank() > kMaxRank)
        throw IoError("save_tensor: unsupported rank " + std::to_string(t.rank()));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape())
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
    if (t.dtype() == DType::F32) {
        for (std::size_t i = 0; i < t.numel(); ++i)
            write_pod<float>(os, static_cast<float>(t[i]));
    } else {
        for (std::size_t i = 0; i < t.numel(); ++i) write_pod<double>(os, t[i]);
    }
    if (!os) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open tensor file: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad magic in tensor file: " + path.string());
    auto rank = read_pod<std::uint32_t>(is, path);
    if (rank == 0 || rank > kMaxRank)
        throw IoError("bad rank " + std::to_string(rank) + " in " + path.string());
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
        d = read_pod<std::uint32_t>(is, path);
        if (d == 0) throw IoError("zero dim in tensor file: " + path.string());
    }
    auto dt_raw = read_pod<std::uint8_t>(is, path);
    if (dt_raw > 1)
        throw IoError("bad dtype tag " + std::to_string(dt_raw) + " in " + path.string());
    DType dt = static_cast<DType>(dt_raw);
    Tensor t(shape, dt);
    if (dt == DType::F32) {
        for (std::size_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<double>(read_pod<float>(is, path));
    } else {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = read_pod<double>(is, path);
    }
    // must be exactly at EOF now
    char extra;
    is.read(&extra, 1);
    if (is) throw IoError("trailing bytes in tensor file: " + path.string());
    t.seal();
    return t;
}

}  // namespace warpkit
