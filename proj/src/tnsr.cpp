#include "pcgen/tnsr.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pcgen::tnsr {

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<unsigned char>& b) : bytes_(b) {}

    std::uint64_t get(int width) {
        if (pos_ + static_cast<std::size_t>(width) > bytes_.size()) throw FormatError("TNSR: truncated header");
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::vector<unsigned char>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode(const Tensor& t) {
    std::vector<unsigned char> out{'T', 'N', 'S', 'R'};
    put_u32(out, kVersion);
    put_u32(out, kDtypeF32);
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    out.reserve(out.size() + 4 * t.numel());
    for (float f : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

Tensor decode(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "TNSR", 4) != 0) throw FormatError("TNSR: bad magic");
    Reader r(bytes);
    r.get(4);
    const auto version = r.get(4);
    if (version != kVersion) throw FormatError("TNSR: unsupported version " + std::to_string(version));
    const auto dtype = r.get(4);
    if (dtype != kDtypeF32) throw FormatError("TNSR: unsupported dtype code " + std::to_string(dtype));
    const auto ndim = r.get(4);
    if (ndim == 0 || ndim > 16) throw FormatError("TNSR: invalid rank " + std::to_string(ndim));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint64_t i = 0; i < ndim; ++i) {
        const auto d = r.get(8);
        if (d == 0 || d > (1ull << 40)) throw FormatError("TNSR: invalid dimension");
        shape.push_back(static_cast<std::int64_t>(d));
        n *= d;
    }
    if (bytes.size() - r.pos() != 4 * n) {
        throw FormatError("TNSR: payload has " + std::to_string(bytes.size() - r.pos()) + " bytes, expected " +
                          std::to_string(4 * n));
    }
    std::vector<float> data(static_cast<std::size_t>(n));
    for (auto& f : data) f = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4)));
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t) {
    auto bytes = encode(t);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

Tensor load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace pcgen::tnsr
