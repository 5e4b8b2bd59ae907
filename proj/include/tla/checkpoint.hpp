// Model serialization. Layout, all integers little-endian:
//   "TLA1"
//   u32 x 9: image_size patch_size channels depth dim heads mlp_ratio
//            num_classes pooling
//   then for every tensor in canonical for_each_tensor order:
//   u32 name_len, name bytes, u32 rows, u32 cols, rows*cols f64 values
// Values are stored as doubles whatever the in-memory precision, so an f32
// model round-trips bit-exactly and an f64 model loses nothing.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "tla/vit.hpp"

namespace tla {

namespace detail {

inline void io_fail(const std::string& path, std::uint64_t offset, const std::string& what) {
    throw std::runtime_error("checkpoint " + path + " @" + std::to_string(offset) + ": " + what);
}

class ByteReader {
public:
    ByteReader(std::istream& in, const std::string& path) : in_(in), path_(path) {}

    void read(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            io_fail(path_, offset_, "truncated (wanted " + std::to_string(n) + " bytes)");
        offset_ += n;
    }

    std::uint32_t u32() {
        unsigned char b[4];
        read(b, 4);
        return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
               std::uint32_t(b[3]) << 24;
    }

    double f64() {
        unsigned char b[8];
        read(b, 8);
        std::uint64_t u = 0;
        for (int i = 7; i >= 0; --i) u = (u << 8) | b[i];
        return std::bit_cast<double>(u);
    }

    std::uint64_t offset() const { return offset_; }
    bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::istream& in_;
    std::string path_;
    std::uint64_t offset_ = 0;
};

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    void u32(std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out_.write(reinterpret_cast<char*>(b), 4);
    }

    void f64(double v) {
        std::uint64_t u = std::bit_cast<std::uint64_t>(v);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
        out_.write(reinterpret_cast<char*>(b), 8);
    }

    void bytes(const void* src, std::size_t n) {
        out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    }

private:
    std::ostream& out_;
};

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'T', 'L', 'A', '1'};

template <typename T>
void save_checkpoint(const ModelParams<T>& p, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint " + path + ": cannot open for writing");
    detail::ByteWriter w(out);
    w.bytes(kCheckpointMagic, 4);
    w.u32(static_cast<std::uint32_t>(p.cfg.image_size));
    w.u32(static_cast<std::uint32_t>(p.cfg.patch_size));
    w.u32(static_cast<std::uint32_t>(p.cfg.channels));
    w.u32(static_cast<std::uint32_t>(p.cfg.depth));
    w.u32(static_cast<std::uint32_t>(p.cfg.dim));
    w.u32(static_cast<std::uint32_t>(p.cfg.heads));
    w.u32(static_cast<std::uint32_t>(p.cfg.mlp_ratio));
    w.u32(static_cast<std::uint32_t>(p.cfg.num_classes));
    w.u32(p.cfg.pooling == Pooling::class_token ? 0u : 1u);

    for_each_tensor(p, [&](const std::string& name, const Matrix<T>& m) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(static_cast<std::uint32_t>(m.rows()));
        w.u32(static_cast<std::uint32_t>(m.cols()));
        for (std::size_t i = 0; i < m.size(); ++i) w.f64(static_cast<double>(m.data()[i]));
    });
    if (!out) throw std::runtime_error("checkpoint " + path + ": write failed");
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint " + path + ": cannot open");
    detail::ByteReader r(in, path);

    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        detail::io_fail(path, 0, "bad magic (not a TLA1 checkpoint)");

    ModelConfig cfg;
    cfg.image_size = static_cast<int>(r.u32());
    cfg.patch_size = static_cast<int>(r.u32());
    cfg.channels = static_cast<int>(r.u32());
    cfg.depth = static_cast<int>(r.u32());
    cfg.dim = static_cast<int>(r.u32());
    cfg.heads = static_cast<int>(r.u32());
    cfg.mlp_ratio = static_cast<int>(r.u32());
    cfg.num_classes = static_cast<int>(r.u32());
    const std::uint32_t pooling = r.u32();
    if (pooling > 1) detail::io_fail(path, r.offset(), "bad pooling code " + std::to_string(pooling));
    cfg.pooling = pooling == 0 ? Pooling::class_token : Pooling::global_pool;
    cfg.validate();

    // Build the expected tree, then fill it in canonical order, verifying
    // names and shapes as we go.
    Rng throwaway(0);
    ModelParams<T> p = init_params<T>(cfg, throwaway);
    for_each_tensor(p, [&](const std::string& name, Matrix<T>& m) {
        const std::uint32_t len = r.u32();
        std::string got(len, '\0');
        r.read(got.data(), len);
        if (got != name)
            detail::io_fail(path, r.offset(), "expected tensor '" + name + "', found '" + got + "'");
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        if (rows != m.rows() || cols != m.cols())
            detail::io_fail(path, r.offset(),
                            "tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", config implies " + m.shape_str());
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(r.f64());
    });
    if (!r.at_eof()) detail::io_fail(path, r.offset(), "trailing bytes after final tensor");
    return p;
}

}  // namespace tla
