// Two-image mixing strategies and the per-token label map they induce.
// Conventions used throughout:
//   * the mask M is defined over pixels, 1 keeps image one, 0 takes image two;
//   * the crop is pasted FROM image two INTO image one;
//   * lambda is always recomputed from the final mask, never from the value
//     the sampler aimed for, so label mass and pixel mass agree exactly.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tla/image.hpp"
#include "tla/matrix.hpp"
#include "tla/rng.hpp"

namespace tla {

enum class MixStrategy { cutmix, mixup, random_patch, block_wise, none };

inline const char* to_string(MixStrategy s) {
    switch (s) {
        case MixStrategy::cutmix: return "cutmix";
        case MixStrategy::mixup: return "mixup";
        case MixStrategy::random_patch: return "random";
        case MixStrategy::block_wise: return "block";
        case MixStrategy::none: return "none";
    }
    return "?";
}

// Half-open pixel rectangle, already clipped to the image.
struct CropRect {
    int x = 0, y = 0, w = 0, h = 0;
    long long area() const { return static_cast<long long>(w) * h; }
};

struct MixSpec {
    MixStrategy strategy = MixStrategy::none;
    int class_a = 0;        // label of image one
    int class_b = 0;        // label of image two
    double lambda = 1.0;    // share of image one in the final pixels
    Matrix<double> mask;    // pixel mask, 1 = image one
    CropRect rect;          // meaningful for cutmix only
    int unit = 1;           // cell edge for the patch-level strategies
};

struct MixedSample {
    Image image;
    MixSpec spec;
};

namespace detail {

inline void check_pair(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw std::invalid_argument("mix: images disagree: " + std::to_string(a.height) + "x" +
                                    std::to_string(a.width) + "x" + std::to_string(a.channels) +
                                    " vs " + std::to_string(b.height) + "x" +
                                    std::to_string(b.width) + "x" + std::to_string(b.channels));
}

// Eq.-style composition M*x1 + (1-M)*x2, evaluated in double per pixel. For a
// binary mask this reduces to an exact select.
inline Image compose(const Image& x1, const Image& x2, const Matrix<double>& mask) {
    Image out(x1.height, x1.width, x1.channels);
    for (int y = 0; y < x1.height; ++y)
        for (int x = 0; x < x1.width; ++x) {
            const double m = mask(y, x);
            for (int c = 0; c < x1.channels; ++c)
                out.at(y, x, c) = static_cast<float>(m * static_cast<double>(x1.at(y, x, c)) +
                                                     (1.0 - m) * static_cast<double>(x2.at(y, x, c)));
        }
    return out;
}

// lambda from integer pixel counts; exact rational -> nearest double.
inline double lambda_from_counts(long long kept, long long total) {
    return static_cast<double>(kept) / static_cast<double>(total);
}

}  // namespace detail

// Deterministic cutmix core: paste the given (unclipped) rectangle of x2 into
// x1. The rectangle is clipped here; lambda comes from the clipped area.
inline MixedSample cutmix_with_rect(const Image& x1, const Image& x2, int class_a, int class_b,
                                    CropRect rect) {
    detail::check_pair(x1, x2);
    const int W = x1.width, H = x1.height;
    CropRect clipped;
    clipped.x = std::max(0, rect.x);
    clipped.y = std::max(0, rect.y);
    clipped.w = std::max(0, std::min(rect.x + rect.w, W) - clipped.x);
    clipped.h = std::max(0, std::min(rect.y + rect.h, H) - clipped.y);
    if (clipped.w == 0 || clipped.h == 0) clipped = CropRect{0, 0, 0, 0};

    MixSpec spec;
    spec.strategy = MixStrategy::cutmix;
    spec.class_a = class_a;
    spec.class_b = class_b;
    spec.rect = clipped;
    spec.mask = Matrix<double>(H, W, 1.0);
    for (int y = clipped.y; y < clipped.y + clipped.h; ++y)
        for (int x = clipped.x; x < clipped.x + clipped.w; ++x) spec.mask(y, x) = 0.0;
    spec.lambda = detail::lambda_from_counts(static_cast<long long>(W) * H - clipped.area(),
                                             static_cast<long long>(W) * H);
    return {detail::compose(x1, x2, spec.mask), std::move(spec)};
}

// Area-matched rectangle: lambda' ~ U(0,1), side lengths round(size*sqrt(1-lambda')),
// center uniform over the image, then clipped.
inline MixedSample cutmix(const Image& x1, const Image& x2, int class_a, int class_b, Rng& rng) {
    detail::check_pair(x1, x2);
    const int W = x1.width, H = x1.height;
    const double lam = rng.uniform();
    const double cut = std::sqrt(1.0 - lam);
    const int rw = static_cast<int>(std::lround(W * cut));
    const int rh = static_cast<int>(std::lround(H * cut));
    const int cx = static_cast<int>(rng.uniform_int(0, W - 1));
    const int cy = static_cast<int>(rng.uniform_int(0, H - 1));
    CropRect rect{cx - rw / 2, cy - rh / 2, rw, rh};
    return cutmix_with_rect(x1, x2, class_a, class_b, rect);
}

inline MixedSample mixup_with_lambda(const Image& x1, const Image& x2, int class_a, int class_b,
                                     double lambda) {
    detail::check_pair(x1, x2);
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("mixup: lambda " + std::to_string(lambda) + " outside [0,1]");
    MixSpec spec;
    spec.strategy = MixStrategy::mixup;
    spec.class_a = class_a;
    spec.class_b = class_b;
    spec.lambda = lambda;
    spec.mask = Matrix<double>(x1.height, x1.width, lambda);
    return {detail::compose(x1, x2, spec.mask), std::move(spec)};
}

inline MixedSample mixup(const Image& x1, const Image& x2, int class_a, int class_b, double alpha,
                         Rng& rng) {
    if (alpha <= 0.0) throw std::invalid_argument("mixup: alpha must be positive");
    return mixup_with_lambda(x1, x2, class_a, class_b, rng.beta(alpha, alpha));
}

namespace detail {

inline void check_grid(const Image& img, int unit) {
    if (unit <= 0) throw std::invalid_argument("mix: cell size must be positive");
    if (img.height % unit != 0 || img.width % unit != 0)
        throw std::invalid_argument("mix: image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + " not divisible by cell size " +
                                    std::to_string(unit));
}

// Build a mixed sample from an explicit set of swapped grid cells.
inline MixedSample patch_mix_from_cells(const Image& x1, const Image& x2, int class_a, int class_b,
                                        int unit, const std::vector<char>& from_x2,
                                        MixStrategy strategy) {
    check_pair(x1, x2);
    check_grid(x1, unit);
    const int gh = x1.height / unit, gw = x1.width / unit;
    if (from_x2.size() != static_cast<std::size_t>(gh) * gw)
        throw std::invalid_argument("mix: cell mask size mismatch");
    MixSpec spec;
    spec.strategy = strategy;
    spec.class_a = class_a;
    spec.class_b = class_b;
    spec.unit = unit;
    spec.mask = Matrix<double>(x1.height, x1.width, 1.0);
    long long swapped = 0;
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            if (!from_x2[static_cast<std::size_t>(gy) * gw + gx]) continue;
            ++swapped;
            for (int dy = 0; dy < unit; ++dy)
                for (int dx = 0; dx < unit; ++dx) spec.mask(gy * unit + dy, gx * unit + dx) = 0.0;
        }
    const long long total = static_cast<long long>(x1.height) * x1.width;
    spec.lambda = lambda_from_counts(total - swapped * unit * unit, total);
    return {compose(x1, x2, spec.mask), std::move(spec)};
}

}  // namespace detail

// Independent per-cell coin flips over the patch grid.
inline MixedSample random_patch_mix(const Image& x1, const Image& x2, int class_a, int class_b,
                                    int unit, double mix_prob, Rng& rng) {
    detail::check_grid(x1, unit);
    if (mix_prob < 0.0 || mix_prob > 1.0)
        throw std::invalid_argument("random_patch_mix: probability outside [0,1]");
    const int cells = (x1.height / unit) * (x1.width / unit);
    std::vector<char> from_x2(cells, 0);
    for (int i = 0; i < cells; ++i) from_x2[i] = rng.bernoulli(mix_prob) ? 1 : 0;
    return detail::patch_mix_from_cells(x1, x2, class_a, class_b, unit, from_x2,
                                        MixStrategy::random_patch);
}

// Contiguous rectangular blocks of cells are claimed until the swapped-cell
// budget is met. Block area is drawn from 16..25% of the remaining budget,
// aspect ratio log-uniform in [0.3, 1/0.3]; side lengths floor (never round
// up), so a block can overshoot the budget by at most its own area - 1.
inline MixedSample block_wise_mix(const Image& x1, const Image& x2, int class_a, int class_b,
                                  int unit, double budget, Rng& rng) {
    detail::check_grid(x1, unit);
    if (budget < 0.0 || budget > 1.0)
        throw std::invalid_argument("block_wise_mix: budget outside [0,1]");
    const int gh = x1.height / unit, gw = x1.width / unit;
    const int cells = gh * gw;
    const long long target = std::llround(budget * cells);
    std::vector<char> from_x2(cells, 0);
    long long swapped = 0;
    const double log_lo = std::log(0.3), log_hi = std::log(1.0 / 0.3);
    int attempts = 0;
    const int max_attempts = 4 * cells + 64;
    while (swapped < target && attempts++ < max_attempts) {
        const long long remaining = target - swapped;
        const long long amin = std::max<long long>(1, (remaining * 16 + 99) / 100);  // ceil(0.16 r)
        const long long amax = std::max<long long>(amin, remaining * 25 / 100);      // floor(0.25 r)
        const double area = static_cast<double>(rng.uniform_int(amin, amax));
        const double aspect = std::exp(rng.uniform(log_lo, log_hi));
        int bh = std::max(1, static_cast<int>(std::floor(std::sqrt(area * aspect))));
        int bw = std::max(1, static_cast<int>(std::floor(std::sqrt(area / aspect))));
        bh = std::min(bh, gh);
        bw = std::min(bw, gw);
        const int top = static_cast<int>(rng.uniform_int(0, gh - bh));
        const int left = static_cast<int>(rng.uniform_int(0, gw - bw));
        for (int gy = top; gy < top + bh; ++gy)
            for (int gx = left; gx < left + bw; ++gx) {
                char& cell = from_x2[static_cast<std::size_t>(gy) * gw + gx];
                if (!cell) {
                    cell = 1;
                    ++swapped;
                }
            }
    }
    return detail::patch_mix_from_cells(x1, x2, class_a, class_b, unit, from_x2,
                                        MixStrategy::block_wise);
}

// Pass-through "mix" used when mixing is disabled: lambda pinned to one.
inline MixedSample mix_none(const Image& x1, int class_a) {
    MixSpec spec;
    spec.strategy = MixStrategy::none;
    spec.class_a = class_a;
    spec.class_b = class_a;
    spec.lambda = 1.0;
    spec.mask = Matrix<double>(x1.height, x1.width, 1.0);
    return {x1, std::move(spec)};
}

// The plain mixed-label vector: lambda * e_a + (1-lambda) * e_b.
inline Matrix<double> original_target(const MixSpec& spec, int num_classes) {
    if (spec.class_a >= num_classes || spec.class_b >= num_classes || spec.class_a < 0 ||
        spec.class_b < 0)
        throw std::invalid_argument("original_target: class out of range");
    Matrix<double> y(1, num_classes);
    y(0, spec.class_a) += spec.lambda;
    y(0, spec.class_b) += 1.0 - spec.lambda;
    return y;
}

// Per-token label matrix, (N+1) x C, row 0 for the class token. Patch rows
// carry the mixing fraction of their own pixels; the complementary entry is
// written as 1 - f so each row sums to exactly 1 in floating point.
inline Matrix<double> init_label_map(const MixSpec& spec, int patch_size, int num_classes) {
    if (spec.class_a < 0 || spec.class_a >= num_classes || spec.class_b < 0 ||
        spec.class_b >= num_classes)
        throw std::invalid_argument("init_label_map: class id outside 0.." +
                                    std::to_string(num_classes - 1));
    const auto H = static_cast<int>(spec.mask.rows());
    const auto W = static_cast<int>(spec.mask.cols());
    if (patch_size <= 0 || H % patch_size != 0 || W % patch_size != 0)
        throw std::invalid_argument("init_label_map: mask " + spec.mask.shape_str() +
                                    " not divisible by patch size " + std::to_string(patch_size));
    const int side_y = H / patch_size, side_x = W / patch_size;
    const int n = side_y * side_x;
    Matrix<double> y0(n + 1, num_classes);

    auto set_row = [&](std::size_t row, double f) {
        y0(row, spec.class_a) += f;
        y0(row, spec.class_b) += 1.0 - f;
    };

    set_row(0, spec.lambda);
    if (spec.strategy == MixStrategy::mixup) {
        // constant mask: every token carries the global ratio
        for (int i = 0; i < n; ++i) set_row(1 + i, spec.lambda);
        return y0;
    }

    const long long per_patch = static_cast<long long>(patch_size) * patch_size;
    for (int py = 0; py < side_y; ++py)
        for (int px = 0; px < side_x; ++px) {
            long long kept = 0;
            double mass = 0.0;
            bool binary = true;
            for (int dy = 0; dy < patch_size; ++dy)
                for (int dx = 0; dx < patch_size; ++dx) {
                    const double m = spec.mask(py * patch_size + dy, px * patch_size + dx);
                    mass += m;
                    if (m == 1.0)
                        ++kept;
                    else if (m != 0.0)
                        binary = false;
                }
            const double f = binary ? static_cast<double>(kept) / static_cast<double>(per_patch)
                                    : mass / static_cast<double>(per_patch);
            set_row(1 + static_cast<std::size_t>(py) * side_x + px, f);
        }
    return y0;
}

// Debug artifact: the mixed picture as a binary PGM plus a sidecar text file
// describing the mix.
inline void dump_mixed_sample(const std::filesystem::path& dir, const std::string& stem,
                              const MixedSample& sample) {
    std::filesystem::create_directories(dir);
    const Image& img = sample.image;
    {
        std::ofstream pgm(dir / (stem + ".pgm"), std::ios::binary);
        pgm << "P5\n" << img.width << " " << img.height << "\n255\n";
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const float v = std::clamp(img.at(y, x, 0), 0.0f, 1.0f);
                pgm.put(static_cast<char>(std::lround(v * 255.0f)));
            }
    }
    std::ofstream txt(dir / (stem + ".txt"));
    txt << "strategy = " << to_string(sample.spec.strategy) << "\n"
        << "lambda = " << sample.spec.lambda << "\n"
        << "class_a = " << sample.spec.class_a << "\n"
        << "class_b = " << sample.spec.class_b << "\n";
    if (sample.spec.strategy == MixStrategy::cutmix)
        txt << "crop = " << sample.spec.rect.x << "," << sample.spec.rect.y << ","
            << sample.spec.rect.w << "x" << sample.spec.rect.h << "\n";
}

}  // namespace tla
