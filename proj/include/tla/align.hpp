// Label propagation through a transformer's recorded attention. The idea: a
// mixed image starts with a per-token label matrix (each row a distribution
// over classes), and every operation that moves token content around moves
// label mass the same way. Attention layers mix labels with the head-averaged
// attention map, residual adds re-average, channel-level maps leave labels
// alone. The class-token row at the end is the training target, and it is a
// constant as far as gradients are concerned: nothing here is differentiated.
//
// Label math runs in double precision regardless of the model's compute type;
// the attention maps are widened on entry.
#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tla/matrix.hpp"
#include "tla/vit.hpp"

namespace tla {

using LabelMatrix = Matrix<double>;

namespace detail {

inline void check_label_rows(const LabelMatrix& y, const char* who) {
    if (y.rows() == 0 || y.cols() == 0)
        throw std::invalid_argument(std::string(who) + ": empty label matrix " + y.shape_str());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < y.cols(); ++j) {
            if (y(i, j) < 0)
                throw std::invalid_argument(std::string(who) + ": negative label mass at row " +
                                            std::to_string(i));
            sum += y(i, j);
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw std::invalid_argument(std::string(who) + ": label row " + std::to_string(i) +
                                        " sums to " + std::to_string(sum) + ", expected 1");
    }
}

}  // namespace detail

// Head-averaged attention, (1/H) * sum_h A_h.
inline Matrix<double> mean_head(const std::vector<Matrix<double>>& heads) {
    if (heads.empty()) throw std::invalid_argument("mean_head: no heads");
    Matrix<double> m = heads[0];
    for (std::size_t h = 1; h < heads.size(); ++h) add_inplace(m, heads[h]);
    scale_inplace(m, 1.0 / static_cast<double>(heads.size()));
    return m;
}

// Attention sub-step: labels mix exactly like tokens, Yhat = mean_head * Y.
inline LabelMatrix align_spatial(const LabelMatrix& y, const std::vector<Matrix<double>>& heads) {
    Matrix<double> a = mean_head(heads);
    if (a.cols() != y.rows())
        detail::shape_error("align_spatial", a.shape_str(), y.shape_str());
    return matmul(a, y);
}

// One full block. Written as the four sub-steps of the block's update rule,
// with the channel-mixing line kept as an explicit no-op so the sub-step
// sequence matches the token path one for one.
inline LabelMatrix align_block(const LabelMatrix& y, const std::vector<Matrix<double>>& heads) {
    LabelMatrix y_hat = align_spatial(y, heads);        // attention mix
    LabelMatrix y_mid = row_normalize(add(y_hat, y));   // residual, re-averaged
    LabelMatrix y_hat2 = y_mid;                         // channel mixing: labels unchanged
    return row_normalize(add(y_hat2, y_mid));           // residual, re-averaged
}

// Token aggregation (e.g. patch merging): each group of spatial rows becomes
// one row, summed then rescaled to unit mass. Groups must partition the
// spatial rows exactly; the class-token row rides through untouched.
inline LabelMatrix align_aggregate(const LabelMatrix& y,
                                   const std::vector<std::vector<int>>& groups) {
    const std::size_t n = y.rows() - 1;
    std::vector<char> seen(n + 1, 0);
    std::size_t covered = 0;
    for (const auto& g : groups) {
        if (g.empty()) throw std::invalid_argument("align_aggregate: empty group");
        for (int idx : g) {
            if (idx < 1 || static_cast<std::size_t>(idx) > n)
                throw std::invalid_argument("align_aggregate: row " + std::to_string(idx) +
                                            " outside spatial range 1.." + std::to_string(n));
            if (seen[idx])
                throw std::invalid_argument("align_aggregate: row " + std::to_string(idx) +
                                            " appears in two groups");
            seen[idx] = 1;
            ++covered;
        }
    }
    if (covered != n)
        throw std::invalid_argument("align_aggregate: groups cover " + std::to_string(covered) +
                                    " of " + std::to_string(n) + " spatial rows");

    LabelMatrix out(groups.size() + 1, y.cols());
    for (std::size_t j = 0; j < y.cols(); ++j) out(0, j) = y(0, j);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (int idx : groups[g])
            for (std::size_t j = 0; j < y.cols(); ++j) out(g + 1, j) += y(idx, j);
    return row_normalize(out);
}

// Generalized per-operation alignment rules. A descriptor mirrors one token
// operation; residual wraps the descriptors of its inner branch g so the rule
// Y <- Norm(Y + g(Y)) can evaluate the branch on labels.
struct OpDescriptor {
    enum class Kind { spatial_mixing, channel_mixing, pointwise, residual, aggregation };
    Kind kind = Kind::pointwise;
    Matrix<double> weights;                // spatial_mixing: token mixing matrix
    std::vector<OpDescriptor> inner;       // residual: the wrapped branch
    std::vector<std::vector<int>> groups;  // aggregation
};

inline LabelMatrix align_generic(const LabelMatrix& y, const OpDescriptor& op) {
    switch (op.kind) {
        case OpDescriptor::Kind::spatial_mixing: {
            if (op.weights.cols() != y.rows())
                detail::shape_error("align_generic(spatial)", op.weights.shape_str(), y.shape_str());
            return matmul(row_normalize(op.weights), y);
        }
        case OpDescriptor::Kind::channel_mixing:
        case OpDescriptor::Kind::pointwise:
            return y;  // per-token channel maps cannot move mass between tokens
        case OpDescriptor::Kind::residual: {
            LabelMatrix branch = y;
            for (const auto& inner_op : op.inner) branch = align_generic(branch, inner_op);
            if (!branch.same_shape(y))
                throw std::invalid_argument(
                    "align_generic(residual): branch changed the token count, " + y.shape_str() +
                    " -> " + branch.shape_str());
            return row_normalize(add(y, branch));
        }
        case OpDescriptor::Kind::aggregation:
            return align_aggregate(y, op.groups);
    }
    throw std::logic_error("align_generic: unhandled kind");
}

// Optional token-count reductions between blocks, keyed by the block index
// after which they run. The plain ViT here never schedules any; hierarchical
// variants would.
struct AlignSchedule {
    std::map<int, std::vector<std::vector<int>>> aggregate_after;
};

struct AlignedTarget {
    LabelMatrix y_align;                  // 1 x C, the training target (a constant)
    std::vector<LabelMatrix> per_layer;   // snapshots Y^0 .. Y^L
    int class_a = 0;
    int class_b = 0;
};

// Walk the recorded attention stack, mixing label mass alongside the tokens,
// and pool the final label matrix the same way the model pools tokens.
template <typename T>
AlignedTarget align_forward(const LabelMatrix& y0, const AttentionTrace<T>& attn, Pooling pooling,
                            const AlignSchedule* schedule = nullptr) {
    detail::check_label_rows(y0, "align_forward");

    AlignedTarget out;
    out.per_layer.reserve(attn.depth() + 1);
    out.per_layer.push_back(y0);

    LabelMatrix y = y0;
    for (std::size_t l = 0; l < attn.depth(); ++l) {
        const auto& layer = attn.layers[l];
        if (layer.empty())
            throw std::invalid_argument("align_forward: layer " + std::to_string(l) + " has no heads");
        std::vector<Matrix<double>> heads;
        heads.reserve(layer.size());
        for (const auto& h : layer) {
            if (h.rows() != y.rows() || h.cols() != y.rows())
                throw std::invalid_argument("align_forward: layer " + std::to_string(l) +
                                            " attention is " + h.shape_str() + " but labels have " +
                                            std::to_string(y.rows()) + " rows");
            heads.push_back(h.template cast<double>());
        }
        y = align_block(y, heads);
        if (schedule) {
            auto it = schedule->aggregate_after.find(static_cast<int>(l));
            if (it != schedule->aggregate_after.end()) y = align_aggregate(y, it->second);
        }
        out.per_layer.push_back(y);
    }

    out.y_align = LabelMatrix(1, y.cols());
    if (pooling == Pooling::class_token) {
        for (std::size_t j = 0; j < y.cols(); ++j) out.y_align(0, j) = y(0, j);
    } else {
        const std::size_t n = y.rows() - 1;
        if (n == 0) throw std::invalid_argument("align_forward: global pool with no spatial rows");
        for (std::size_t i = 1; i < y.rows(); ++i)
            for (std::size_t j = 0; j < y.cols(); ++j) out.y_align(0, j) += y(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) out.y_align(0, j) /= static_cast<double>(n);
    }
    return out;
}

// The aligned label is used as a plain constant: treat it like data, not like
// a function of the parameters (the loss gradient never flows into it).
inline LabelMatrix final_target(const AlignedTarget& t) { return t.y_align; }

}  // namespace tla
