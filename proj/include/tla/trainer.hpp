// Training loop: soft-target cross entropy, SGD-momentum / AdamW steps with a
// cosine schedule, deterministic mixing streams, and the per-sample alignment
// pass that turns attention into the training target.
//
// Everything downstream of the forward pass treats the aligned target as a
// constant: gradients flow through the logits only, never through the label
// propagation. gradient_check and stop_gradient_check pin this down.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tla/align.hpp"
#include "tla/dataset.hpp"
#include "tla/diagnostics.hpp"
#include "tla/matrix.hpp"
#include "tla/mixing.hpp"
#include "tla/rng.hpp"
#include "tla/vit.hpp"

namespace tla {

enum class OptimizerKind { sgd_momentum, adamw };

inline const char* to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd_momentum ? "sgd" : "adamw";
}

struct TrainConfig {
    int epochs = 20;
    int batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double momentum = 0.9;
    OptimizerKind optimizer = OptimizerKind::adamw;

    MixStrategy mix = MixStrategy::cutmix;
    double mixup_alpha = 1.0;
    double random_mix_prob = 0.5;  // per-cell swap probability for MixStrategy::random_patch
    double block_budget = 0.25;    // swapped-area budget for MixStrategy::block_wise
    int mix_unit = 0;              // cell edge for the patch strategies; 0 = model patch size

    bool tl_align = true;  // train on the propagated target instead of the area-mix one
    double label_smoothing = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
        if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw std::invalid_argument("train: momentum must be in [0, 1)");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw std::invalid_argument("train: label_smoothing must be in [0, 1)");
        if (mix_unit < 0) throw std::invalid_argument("train: mix_unit must be >= 0");
    }
};

// Cross entropy against an arbitrary distribution, computed from a stable
// log-softmax. Returns the loss and d(loss)/d(logits) = softmax - target.
inline std::pair<double, Matrix<double>> soft_cross_entropy(const Matrix<double>& logits,
                                                            const Matrix<double>& target) {
    if (!logits.same_shape(target) || logits.rows() != 1)
        detail::shape_error("soft_cross_entropy", logits.shape_str(), target.shape_str());
    const std::size_t c = logits.cols();
    double tsum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        if (target(0, j) < -1e-12)
            throw std::invalid_argument("soft_cross_entropy: negative target mass " +
                                        std::to_string(target(0, j)));
        tsum += target(0, j);
    }
    if (std::abs(tsum - 1.0) > 1e-6)
        throw std::invalid_argument("soft_cross_entropy: target sums to " + std::to_string(tsum));

    double m = logits(0, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, logits(0, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits(0, j) - m);
    const double lse = m + std::log(z);

    double loss = 0.0;
    Matrix<double> dlogits(1, c);
    for (std::size_t j = 0; j < c; ++j) {
        loss += target(0, j) * (lse - logits(0, j));
        dlogits(0, j) = std::exp(logits(0, j) - lse) - target(0, j);
    }
    return {loss, dlogits};
}

inline Matrix<double> smooth_target(const Matrix<double>& t, double s) {
    if (s == 0.0) return t;
    Matrix<double> out = t;
    const double fill = s / static_cast<double>(t.cols());
    for (std::size_t j = 0; j < t.cols(); ++j) out(0, j) = (1.0 - s) * t(0, j) + fill;
    return out;
}

// Lowest index wins ties, so results do not depend on scan direction.
template <typename T>
std::size_t argmax_row(const Matrix<T>& m, std::size_t row = 0) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m.cols(); ++j)
        if (m(row, j) > m(row, best)) best = j;
    return best;
}

namespace detail {

// Stream tags so every random decision has its own child seed.
constexpr std::uint64_t kTagInit = 0x1A17;
constexpr std::uint64_t kTagShuffle = 0x5F0E;
constexpr std::uint64_t kTagPair = 0x9A12;
constexpr std::uint64_t kTagMix = 0x310C;

template <typename T>
std::vector<Matrix<T>*> tensor_list(ModelParams<T>& p) {
    std::vector<Matrix<T>*> out;
    for_each_tensor(p, [&](const std::string&, Matrix<T>& m) { out.push_back(&m); });
    return out;
}

template <typename T>
std::vector<const Matrix<T>*> tensor_list(const ModelParams<T>& p) {
    std::vector<const Matrix<T>*> out;
    for_each_tensor(p, [&](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
    return out;
}

template <typename T>
void accumulate_params(ModelParams<T>& acc, const ParamGrads<T>& g) {
    auto a = tensor_list(acc);
    auto b = tensor_list(g);
    for (std::size_t t = 0; t < a.size(); ++t) add_inplace(*a[t], *b[t]);
}

template <typename T>
void scale_params(ModelParams<T>& p, T alpha) {
    for_each_tensor(p, [&](const std::string&, Matrix<T>& m) { scale_inplace(m, alpha); });
}

inline std::vector<int> shuffled_indices(int n, Rng& rng) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(0, i)]);
    return idx;
}

}  // namespace detail

template <typename T>
struct OptimizerState {
    ModelParams<T> m;  // momentum / first moment
    ModelParams<T> v;  // second moment (adamw only)
    long step = 0;

    static OptimizerState init(const ModelParams<T>& p) {
        return {zeros_like(p), zeros_like(p), 0};
    }
};

inline double cosine_lr(double base, int epoch, int total_epochs) {
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

template <typename T>
void optimizer_step(ModelParams<T>& params, const ParamGrads<T>& grads, OptimizerState<T>& st,
                    const TrainConfig& tc, double lr_now) {
    auto p = detail::tensor_list(params);
    auto g = detail::tensor_list(grads);
    auto m = detail::tensor_list(st.m);
    auto v = detail::tensor_list(st.v);
    st.step += 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (std::size_t t = 0; t < p.size(); ++t) {
        T* pw = p[t]->data();
        const T* gw = g[t]->data();
        T* mw = m[t]->data();
        T* vw = v[t]->data();
        const std::size_t n = p[t]->size();
        if (tc.optimizer == OptimizerKind::sgd_momentum) {
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(gw[i]) + tc.weight_decay * pw[i];
                const double vel = tc.momentum * mw[i] + gi;
                mw[i] = static_cast<T>(vel);
                pw[i] = static_cast<T>(pw[i] - lr_now * vel);
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = gw[i];
                const double m1 = b1 * mw[i] + (1.0 - b1) * gi;
                const double m2 = b2 * vw[i] + (1.0 - b2) * gi * gi;
                mw[i] = static_cast<T>(m1);
                vw[i] = static_cast<T>(m2);
                const double update = (m1 / bc1) / (std::sqrt(m2 / bc2) + eps);
                pw[i] = static_cast<T>(pw[i] - lr_now * (update + tc.weight_decay * pw[i]));
            }
        }
    }
}

struct EpochMetrics {
    int epoch = 0;  // 1-based
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double rmse_mean = 0.0;         // aligned target vs area-mix target, all classes
    double rmse_active_mean = 0.0;  // same, restricted to the two mixed classes
    double wall_seconds = 0.0;      // console only; keep out of serialized artifacts
};

struct MixLogEntry {
    int epoch = 0;  // 1-based
    int slot = 0;   // position within the epoch
    int sample = 0;
    int partner = 0;
    MixStrategy strategy = MixStrategy::none;
    double lambda = 1.0;
    int class_a = 0;
    int class_b = 0;
    CropRect rect;
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;
    std::vector<EpochMetrics> metrics;
    std::vector<MixLogEntry> mix_log;
};

template <typename T>
double evaluate(const ModelParams<T>& p, const Dataset& ds) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    std::size_t correct = 0;
    ForwardTrace<T> trace;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Matrix<T> logits = model_forward(p, ds.images[i], trace);
        if (argmax_row(logits) == static_cast<std::size_t>(ds.labels[i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

inline MixedSample sample_mix(const Image& x1, int c1, const Image& x2, int c2,
                              const TrainConfig& tc, int unit, Rng& rng) {
    switch (tc.mix) {
        case MixStrategy::cutmix: return cutmix(x1, x2, c1, c2, rng);
        case MixStrategy::mixup: return mixup(x1, x2, c1, c2, tc.mixup_alpha, rng);
        case MixStrategy::random_patch:
            return random_patch_mix(x1, x2, c1, c2, unit, tc.random_mix_prob, rng);
        case MixStrategy::block_wise: return block_wise_mix(x1, x2, c1, c2, unit, tc.block_budget, rng);
        case MixStrategy::none: return mix_none(x1, c1);
    }
    throw std::logic_error("sample_mix: unhandled strategy");
}

}  // namespace detail

// Full run. Mixing, shuffling and pairing draw from child streams keyed by
// (seed, tag, epoch, position) only, so two runs that differ in tl_align see
// byte-identical mixed batches.
template <typename T>
TrainResult<T> train_model(const ModelConfig& mc, const TrainConfig& tc, const Dataset& train_set,
                           const Dataset& test_set, bool keep_mix_log = false,
                           const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    mc.validate();
    tc.validate();
    if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
    if (test_set.size() == 0) throw std::invalid_argument("train: empty test set");
    auto check_split = [&](const Dataset& ds, const char* who) {
        if (ds.images.size() != ds.labels.size())
            throw std::invalid_argument(std::string("train: ") + who + " split has " +
                                        std::to_string(ds.images.size()) + " images vs " +
                                        std::to_string(ds.labels.size()) + " labels");
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (ds.labels[i] < 0 || ds.labels[i] >= mc.num_classes)
                throw std::invalid_argument(std::string("train: ") + who + " label " +
                                            std::to_string(ds.labels[i]) + " of sample " +
                                            std::to_string(i) + " outside the model's " +
                                            std::to_string(mc.num_classes) + " classes");
            ds.images[i].require_shape(mc.image_size, mc.image_size, mc.channels, who);
        }
    };
    check_split(train_set, "train");
    check_split(test_set, "test");

    const int unit = tc.mix_unit > 0 ? tc.mix_unit : mc.patch_size;
    const int n = static_cast<int>(train_set.size());

    Rng init_rng = Rng::derive(tc.seed, detail::kTagInit);
    TrainResult<T> result;
    result.params = init_params<T>(mc, init_rng);
    auto opt = OptimizerState<T>::init(result.params);

    ForwardTrace<T> trace;
    for (int e = 0; e < tc.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr_now = cosine_lr(tc.lr, e, tc.epochs);

        Rng shuffle_rng = Rng::derive(tc.seed, detail::kTagShuffle, static_cast<std::uint64_t>(e));
        const std::vector<int> order = detail::shuffled_indices(n, shuffle_rng);

        double loss_sum = 0.0, rmse_sum = 0.0, rmse_active_sum = 0.0;
        std::size_t correct = 0;

        for (int b0 = 0; b0 < n; b0 += tc.batch_size) {
            const int bn = std::min(tc.batch_size, n - b0);
            Rng pair_rng = Rng::derive(tc.seed, detail::kTagPair, static_cast<std::uint64_t>(e),
                                       static_cast<std::uint64_t>(b0));
            const std::vector<int> pairing = detail::shuffled_indices(bn, pair_rng);

            ParamGrads<T> grad_sum = zeros_like(result.params);
            for (int j = 0; j < bn; ++j) {
                const int slot = b0 + j;
                const int ia = order[slot];
                const int ib = order[b0 + pairing[j]];
                Rng mix_rng = Rng::derive(tc.seed, detail::kTagMix, static_cast<std::uint64_t>(e),
                                          static_cast<std::uint64_t>(slot));
                MixedSample mixed =
                    detail::sample_mix(train_set.images[ia], train_set.labels[ia],
                                       train_set.images[ib], train_set.labels[ib], tc, unit, mix_rng);

                const Matrix<T> logits = model_forward(result.params, mixed.image, trace);
                const LabelMatrix y0 = init_label_map(mixed.spec, mc.patch_size, mc.num_classes);
                const AlignedTarget aligned = align_forward(y0, trace.attention, mc.pooling);
                const Matrix<double> y_mix = original_target(mixed.spec, mc.num_classes);
                const Matrix<double>& y_train = tc.tl_align ? aligned.y_align : y_mix;

                auto [loss, dlogits_d] =
                    soft_cross_entropy(logits.template cast<double>(),
                                       smooth_target(y_train, tc.label_smoothing));
                if (!std::isfinite(loss))
                    throw std::runtime_error("train: non-finite loss at epoch " +
                                             std::to_string(e + 1) + ", sample slot " +
                                             std::to_string(slot) + " (dataset index " +
                                             std::to_string(ia) + ")");

                loss_sum += loss;
                rmse_sum += target_rmse(aligned.y_align, y_mix);
                rmse_active_sum += target_rmse_active(aligned.y_align, y_mix, mixed.spec.class_a,
                                                      mixed.spec.class_b);
                if (argmax_row(logits) == argmax_row(y_mix)) ++correct;

                const ParamGrads<T> g =
                    model_backward(result.params, trace, dlogits_d.template cast<T>());
                detail::accumulate_params(grad_sum, g);

                if (keep_mix_log)
                    result.mix_log.push_back({e + 1, slot, ia, ib, mixed.spec.strategy,
                                              mixed.spec.lambda, mixed.spec.class_a,
                                              mixed.spec.class_b, mixed.spec.rect});
            }
            detail::scale_params(grad_sum, static_cast<T>(1.0 / bn));
            optimizer_step(result.params, grad_sum, opt, tc, lr_now);
        }

        EpochMetrics em;
        em.epoch = e + 1;
        em.lr = lr_now;
        em.train_loss = loss_sum / n;
        em.train_acc = static_cast<double>(correct) / n;
        em.test_acc = evaluate(result.params, test_set);
        em.rmse_mean = rmse_sum / n;
        em.rmse_active_mean = rmse_active_sum / n;
        em.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.metrics.push_back(em);
        if (on_epoch) on_epoch(em);
    }
    return result;
}

// ---- gradient checking ----------------------------------------------------

struct GradCheckReport {
    int probes = 0;
    double max_rel_error = 0.0;
    std::string worst_tensor;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central finite differences against the analytic gradient, target held
// fixed. Probes cover every tensor; entries are picked from a seeded stream.
inline GradCheckReport gradient_check(ModelParams<double>& params, const Image& img,
                                      const Matrix<double>& target, int min_probes = 60,
                                      double eps = 1e-5, std::uint64_t probe_seed = 17) {
    ForwardTrace<double> trace;
    const Matrix<double> logits = model_forward(params, img, trace);
    auto [loss0, dlogits] = soft_cross_entropy(logits, target);
    (void)loss0;
    const ParamGrads<double> analytic = model_backward(params, trace, dlogits);

    std::vector<std::string> names;
    std::vector<Matrix<double>*> tensors;
    for_each_tensor(params, [&](const std::string& nm, Matrix<double>& m) {
        names.push_back(nm);
        tensors.push_back(&m);
    });
    const auto grads = detail::tensor_list(analytic);

    const int per_tensor =
        std::max(1, (min_probes + static_cast<int>(tensors.size()) - 1) /
                        static_cast<int>(tensors.size()));

    GradCheckReport rep;
    ForwardTrace<double> scratch;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        Rng pick = Rng::derive(probe_seed, static_cast<std::uint64_t>(t));
        for (int k = 0; k < per_tensor; ++k) {
            const std::size_t i =
                static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(tensors[t]->size()) - 1));
            double* slot = tensors[t]->data() + i;
            const double saved = *slot;
            *slot = saved + eps;
            const double jp =
                soft_cross_entropy(model_forward(params, img, scratch), target).first;
            *slot = saved - eps;
            const double jm =
                soft_cross_entropy(model_forward(params, img, scratch), target).first;
            *slot = saved;

            const double numeric = (jp - jm) / (2.0 * eps);
            const double a = grads[t]->data()[i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++rep.probes;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_tensor = names[t];
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

struct StopGradReport {
    double frozen_max_rel = 0.0;     // finite differences with the target pinned
    double live_target_shift = 0.0;  // loss change from re-propagating the target at theta +/- eps
};

// Demonstrates the stop-gradient convention on the attention path: with the
// aligned target frozen the analytic gradient matches finite differences,
// while re-running the label propagation at the perturbed weights moves the
// loss, i.e. the target genuinely depends on the parameters being ignored.
inline StopGradReport stop_gradient_check(ModelParams<double>& params, const MixedSample& mixed,
                                          int probes = 8, double eps = 1e-5,
                                          std::uint64_t probe_seed = 23) {
    const ModelConfig& cfg = params.cfg;
    ForwardTrace<double> trace;
    const Matrix<double> logits = model_forward(params, mixed.image, trace);
    const LabelMatrix y0 = init_label_map(mixed.spec, cfg.patch_size, cfg.num_classes);
    const Matrix<double> frozen =
        final_target(align_forward(y0, trace.attention, cfg.pooling));
    auto [loss0, dlogits] = soft_cross_entropy(logits, frozen);
    (void)loss0;
    const ParamGrads<double> analytic = model_backward(params, trace, dlogits);

    auto loss_at = [&](bool live) {
        ForwardTrace<double> tr;
        const Matrix<double> lg = model_forward(params, mixed.image, tr);
        if (!live) return soft_cross_entropy(lg, frozen).first;
        const Matrix<double> tgt = final_target(align_forward(y0, tr.attention, cfg.pooling));
        return soft_cross_entropy(lg, tgt).first;
    };

    StopGradReport rep;
    Rng pick(probe_seed);
    Matrix<double>* probed[2] = {&params.layers[0].wq, &params.layers[0].wk};
    const Matrix<double>* agrads[2] = {&analytic.layers[0].wq, &analytic.layers[0].wk};
    for (int k = 0; k < probes; ++k) {
        const int which = k % 2;
        const std::size_t i =
            static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(probed[which]->size()) - 1));
        double* slot = probed[which]->data() + i;
        const double saved = *slot;

        *slot = saved + eps;
        const double jp_frozen = loss_at(false), jp_live = loss_at(true);
        *slot = saved - eps;
        const double jm_frozen = loss_at(false), jm_live = loss_at(true);
        *slot = saved;

        const double numeric = (jp_frozen - jm_frozen) / (2.0 * eps);
        const double a = agrads[which]->data()[i];
        rep.frozen_max_rel =
            std::max(rep.frozen_max_rel,
                     std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
        rep.live_target_shift = std::max(
            {rep.live_target_shift, std::abs(jp_live - jp_frozen), std::abs(jm_live - jm_frozen)});
    }
    return rep;
}

}  // namespace tla
