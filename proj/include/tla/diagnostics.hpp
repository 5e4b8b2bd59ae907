// Measurement helpers: how much each token survives a mixing step, how far
// the aligned labels drift from the plain mixed labels, and layer-by-layer
// mixing-ratio estimates for individual samples.
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tla/align.hpp"
#include "tla/matrix.hpp"
#include "tla/mixing.hpp"
#include "tla/vit.hpp"

namespace tla {

struct PresenceReport {
    std::vector<double> presence;  // one entry per input token
    double total = 0.0;            // sum of presences
    int grid_rows = 0, grid_cols = 0;
    std::vector<char> interior;    // set by the convolution path
};

// Presence of each input token in the output of the spatial map z_out = W z.
// The contribution of input i to output j is |W[j,i]| / sum_k |W[j,k]|, and
// presence is the sum over outputs. For row-stochastic nonnegative W (i.e.
// attention) this is just the i-th column sum. Rows of all zeros have no
// defined contribution split, so they are an error.
inline PresenceReport token_presence(const Matrix<double>& w) {
    if (w.rows() != w.cols())
        throw std::invalid_argument("token_presence: matrix must be square, got " + w.shape_str());
    PresenceReport rep;
    rep.presence.assign(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.rows(); ++j) {
        double mass = 0;
        for (std::size_t i = 0; i < w.cols(); ++i) mass += std::abs(w(j, i));
        if (mass == 0.0)
            throw std::invalid_argument("token_presence: output row " + std::to_string(j) +
                                        " has zero mass");
        for (std::size_t i = 0; i < w.cols(); ++i) rep.presence[i] += std::abs(w(j, i)) / mass;
    }
    for (double p : rep.presence) rep.total += p;
    return rep;
}

// Variant with a fixed normalizer shared by every output row. This is the
// translation-invariant reading used for convolutions, where each row of the
// ideal (unclipped) operator weighs the same kernel mass.
inline PresenceReport token_presence(const Matrix<double>& w, double row_mass) {
    if (w.rows() != w.cols())
        throw std::invalid_argument("token_presence: matrix must be square, got " + w.shape_str());
    if (!(row_mass > 0.0)) throw std::invalid_argument("token_presence: row mass must be positive");
    PresenceReport rep;
    rep.presence.assign(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.rows(); ++j)
        for (std::size_t i = 0; i < w.cols(); ++i) rep.presence[i] += std::abs(w(j, i)) / row_mass;
    for (double p : rep.presence) rep.total += p;
    return rep;
}

struct ConvDescriptor {
    int grid_rows = 0, grid_cols = 0;
    Matrix<double> kernel;  // odd square, e.g. 3x3

    void validate() const {
        if (grid_rows < 1 || grid_cols < 1)
            throw std::invalid_argument("ConvDescriptor: empty grid");
        if (kernel.rows() != kernel.cols() || kernel.rows() % 2 == 0)
            throw std::invalid_argument("ConvDescriptor: kernel must be odd square, got " +
                                        kernel.shape_str());
    }
    int radius() const { return static_cast<int>(kernel.rows()) / 2; }
};

// The N x N matrix of a stride-1 depthwise convolution over the token grid
// with zero padding: row j holds the kernel taps of output token j, columns
// indexed by input token, taps falling outside the grid dropped.
inline Matrix<double> conv_mixing_matrix(const ConvDescriptor& d) {
    d.validate();
    const int n = d.grid_rows * d.grid_cols;
    const int r = d.radius();
    Matrix<double> t(n, n);
    for (int oy = 0; oy < d.grid_rows; ++oy)
        for (int ox = 0; ox < d.grid_cols; ++ox)
            for (int ky = -r; ky <= r; ++ky)
                for (int kx = -r; kx <= r; ++kx) {
                    const int iy = oy + ky, ix = ox + kx;
                    if (iy < 0 || iy >= d.grid_rows || ix < 0 || ix >= d.grid_cols) continue;
                    t(static_cast<std::size_t>(oy) * d.grid_cols + ox,
                      static_cast<std::size_t>(iy) * d.grid_cols + ix) = d.kernel(ky + r, kx + r);
                }
    return t;
}

// Presence under the convolution, normalized by the full kernel mass (the row
// mass every output would have without border clipping). Interior tokens sit
// at least a kernel radius from every border; they are multiplied by each tap
// exactly once, so their presence is exactly 1, while border tokens lose the
// clipped taps and land strictly below 1.
inline PresenceReport conv_presence(const ConvDescriptor& d) {
    d.validate();
    double kernel_mass = 0;
    for (std::size_t i = 0; i < d.kernel.size(); ++i) kernel_mass += std::abs(d.kernel.data()[i]);
    if (kernel_mass == 0.0)
        throw std::invalid_argument("conv_presence: kernel has zero mass");
    PresenceReport rep = token_presence(conv_mixing_matrix(d), kernel_mass);
    rep.grid_rows = d.grid_rows;
    rep.grid_cols = d.grid_cols;
    rep.interior.assign(static_cast<std::size_t>(d.grid_rows) * d.grid_cols, 0);
    const int r = d.radius();
    for (int y = r; y < d.grid_rows - r; ++y)
        for (int x = r; x < d.grid_cols - r; ++x)
            rep.interior[static_cast<std::size_t>(y) * d.grid_cols + x] = 1;
    return rep;
}

// Root mean square difference over all classes between two label rows.
inline double target_rmse(const Matrix<double>& a, const Matrix<double>& b) {
    if (!a.same_shape(b) || a.rows() != 1)
        detail::shape_error("target_rmse", a.shape_str(), b.shape_str());
    double acc = 0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        const double d = a(0, j) - b(0, j);
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.cols()));
}

// Same, restricted to the one or two classes actually present in the mix.
inline double target_rmse_active(const Matrix<double>& a, const Matrix<double>& b, int class_a,
                                 int class_b) {
    if (!a.same_shape(b) || a.rows() != 1)
        detail::shape_error("target_rmse_active", a.shape_str(), b.shape_str());
    const double da = a(0, class_a) - b(0, class_a);
    if (class_a == class_b) return std::abs(da);
    const double db = a(0, class_b) - b(0, class_b);
    return std::sqrt((da * da + db * db) / 2.0);
}

namespace detail {

template <typename T>
double cosine(const Matrix<T>& a, std::size_t ra, const Matrix<T>& b, std::size_t rb) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        const double x = static_cast<double>(a(ra, j));
        const double y = static_cast<double>(b(rb, j));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <typename T>
double best_cosine(const Matrix<T>& probe, std::size_t row, const Matrix<T>& pool) {
    double best = -1.0;
    for (std::size_t i = 0; i < pool.rows(); ++i)
        best = std::max(best, cosine(probe, row, pool, i));
    return best;
}

}  // namespace detail

// Two-way softmax over the best-match similarities: how much a mixed token
// looks like it came from source one rather than source two.
inline double similarity_lambda(double s1, double s2) {
    const double m = std::max(s1, s2);
    const double e1 = std::exp(s1 - m), e2 = std::exp(s2 - m);
    return e1 / (e1 + e2);
}

struct RatioTrajectory {
    // one entry per layer snapshot, l = 0..L
    std::vector<double> lambda_align;       // class-a mass of the class-token label row
    std::vector<double> lambda_similarity;  // feature-space estimate for the same token
    double lambda_mix = 0.0;                // the constant pixel-level ratio
    int class_a = 0, class_b = 0;
};

// Layer-by-layer mixing-ratio estimates for one mixed sample. Needs the
// forward traces of the mixed image and of both sources (same model), plus
// the label propagation snapshots.
template <typename T>
RatioTrajectory ratio_trajectory(const ForwardTrace<T>& mixed, const ForwardTrace<T>& src1,
                                 const ForwardTrace<T>& src2, const AlignedTarget& aligned,
                                 const MixSpec& spec, std::size_t token = 0) {
    const std::size_t levels = aligned.per_layer.size();
    if (levels != mixed.layers.size() + 1)
        throw std::invalid_argument("ratio_trajectory: " + std::to_string(levels) +
                                    " label snapshots for " + std::to_string(mixed.layers.size()) +
                                    " blocks");
    RatioTrajectory out;
    out.lambda_mix = spec.lambda;
    out.class_a = spec.class_a;
    out.class_b = spec.class_b;
    out.lambda_align.reserve(levels);
    out.lambda_similarity.reserve(levels);
    for (std::size_t l = 0; l < levels; ++l) {
        out.lambda_align.push_back(aligned.per_layer[l](0, spec.class_a));
        const Matrix<T>& zm = mixed.tokens_at(l);
        const double s1 = detail::best_cosine(zm, token, src1.tokens_at(l));
        const double s2 = detail::best_cosine(zm, token, src2.tokens_at(l));
        out.lambda_similarity.push_back(similarity_lambda(s1, s2));
    }
    return out;
}

}  // namespace tla
