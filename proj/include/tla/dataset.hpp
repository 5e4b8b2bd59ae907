// Labeled image collections: the classic big-endian IDX pair (images +
// labels) and a deterministic synthetic texture set for machines where no
// real corpus is available.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "tla/image.hpp"
#include "tla/rng.hpp"

namespace tla {

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return images.size(); }

    void validate(const std::string& who) const {
        if (images.size() != labels.size())
            throw std::invalid_argument(who + ": " + std::to_string(images.size()) + " images vs " +
                                        std::to_string(labels.size()) + " labels");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] < 0 || labels[i] >= num_classes)
                throw std::invalid_argument(who + ": label " + std::to_string(labels[i]) +
                                            " of sample " + std::to_string(i) + " outside 0.." +
                                            std::to_string(num_classes - 1));
    }
};

// Zero-pad to a centered square canvas (e.g. 28 -> 32). Shrinking is refused.
inline Image pad_image(const Image& img, int target) {
    if (target < img.height || target < img.width)
        throw std::invalid_argument("pad_image: target " + std::to_string(target) +
                                    " smaller than image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width));
    if (target == img.height && target == img.width) return img;
    Image out(target, target, img.channels);
    const int oy = (target - img.height) / 2;
    const int ox = (target - img.width) / 2;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(oy + y, ox + x, c) = img.at(y, x, c);
    return out;
}

namespace detail {

class IdxReader {
public:
    IdxReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("idx " + path + ": cannot open");
    }

    std::uint32_t u32_be() {
        unsigned char b[4];
        read(b, 4);
        return std::uint32_t(b[0]) << 24 | std::uint32_t(b[1]) << 16 | std::uint32_t(b[2]) << 8 |
               std::uint32_t(b[3]);
    }

    void read(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw std::runtime_error("idx " + path_ + " @" + std::to_string(offset_) +
                                     ": truncated (wanted " + std::to_string(n) + " bytes)");
        offset_ += n;
    }

    std::uint64_t offset() const { return offset_; }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

inline void be32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // unsigned bytes, 3 dims
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // unsigned bytes, 1 dim

// Load an IDX image/label pair. Pixels are scaled to [0,1]; pad_to > 0 zero-
// pads each image onto a centered pad_to x pad_to canvas.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        int pad_to = 0) {
    detail::IdxReader imgs(images_path);
    const std::uint32_t magic = imgs.u32_be();
    if (magic != kIdxImagesMagic)
        throw std::runtime_error("idx " + images_path + " @0: bad magic " + std::to_string(magic) +
                                 ", expected " + std::to_string(kIdxImagesMagic));
    const std::uint32_t count = imgs.u32_be();
    const std::uint32_t rows = imgs.u32_be();
    const std::uint32_t cols = imgs.u32_be();
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
        throw std::runtime_error("idx " + images_path + ": implausible image size " +
                                 std::to_string(rows) + "x" + std::to_string(cols));

    detail::IdxReader labs(labels_path);
    const std::uint32_t lmagic = labs.u32_be();
    if (lmagic != kIdxLabelsMagic)
        throw std::runtime_error("idx " + labels_path + " @0: bad magic " + std::to_string(lmagic) +
                                 ", expected " + std::to_string(kIdxLabelsMagic));
    const std::uint32_t lcount = labs.u32_be();
    if (lcount != count)
        throw std::runtime_error("idx: " + images_path + " has " + std::to_string(count) +
                                 " images but " + labels_path + " has " + std::to_string(lcount) +
                                 " labels");

    Dataset ds;
    ds.images.reserve(count);
    ds.labels.reserve(count);
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    int max_label = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        imgs.read(buf.data(), buf.size());
        Image img(static_cast<int>(rows), static_cast<int>(cols), 1);
        for (std::size_t px = 0; px < buf.size(); ++px)
            img.pixels[px] = static_cast<float>(buf[px]) / 255.0f;
        ds.images.push_back(pad_to > 0 ? pad_image(img, pad_to) : std::move(img));
        unsigned char lab;
        labs.read(&lab, 1);
        ds.labels.push_back(static_cast<int>(lab));
        max_label = std::max(max_label, static_cast<int>(lab));
    }
    ds.num_classes = max_label + 1;
    return ds;
}

// Write the matching pair (first channel only, values quantized to bytes).
inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
    if (ds.images.empty()) throw std::invalid_argument("save_idx: empty dataset");
    const int rows = ds.images[0].height, cols = ds.images[0].width;
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("idx " + images_path + ": cannot open for writing");
    detail::be32(imgs, kIdxImagesMagic);
    detail::be32(imgs, static_cast<std::uint32_t>(ds.images.size()));
    detail::be32(imgs, static_cast<std::uint32_t>(rows));
    detail::be32(imgs, static_cast<std::uint32_t>(cols));
    for (const Image& img : ds.images) {
        img.require_shape(rows, cols, img.channels, "save_idx");
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < cols; ++x) {
                const float v = std::clamp(img.at(y, x, 0), 0.0f, 1.0f);
                imgs.put(static_cast<char>(std::lround(v * 255.0f)));
            }
    }

    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw std::runtime_error("idx " + labels_path + ": cannot open for writing");
    detail::be32(labs, kIdxLabelsMagic);
    detail::be32(labs, static_cast<std::uint32_t>(ds.labels.size()));
    for (int lab : ds.labels) labs.put(static_cast<char>(lab));
}

// Deterministic texture classes: eight stripe orientations followed by
// checkerboards of growing period. Patterns are fixed per class; per-sample
// variation is pixel noise only, so at noise 0 the classes are separated by
// construction.
inline Dataset synth_dataset(int num_classes, int per_class, int image_size, double noise,
                             std::uint64_t seed) {
    if (num_classes < 1 || num_classes > 16)
        throw std::invalid_argument("synth_dataset: class count must be 1..16");
    if (per_class < 1 || image_size < 4)
        throw std::invalid_argument("synth_dataset: need per_class >= 1 and image_size >= 4");

    auto base_value = [&](int cls, int y, int x) -> double {
        if (cls < 8) {
            const double theta = cls * std::numbers::pi / 8.0;
            const double u = x * std::cos(theta) + y * std::sin(theta);
            const double s = std::sin(2.0 * std::numbers::pi * u / 6.0);
            return s >= 0 ? 0.8 : 0.2;
        }
        const int period = 3 + (cls - 8);
        const bool even = ((y / period) + (x / period)) % 2 == 0;
        return even ? 0.8 : 0.2;
    };

    Dataset ds;
    ds.num_classes = num_classes;
    const int total = num_classes * per_class;
    ds.images.reserve(total);
    ds.labels.reserve(total);
    for (int i = 0; i < total; ++i) {
        const int cls = i % num_classes;
        Rng rng = Rng::derive(seed, 0x5D, static_cast<std::uint64_t>(i));
        Image img(image_size, image_size, 1);
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                double v = base_value(cls, y, x);
                if (noise > 0) v += noise * rng.normal();
                img.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        ds.images.push_back(std::move(img));
        ds.labels.push_back(cls);
    }
    return ds;
}

}  // namespace tla
