// Fast invariant battery behind `tla selftest`: a few hundred milliseconds of
// checks that catch a miscompiled or misported build before anyone trains
// with it. Each suite prints one line; the return value is the failure count.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tla/align.hpp"
#include "tla/checkpoint.hpp"
#include "tla/config.hpp"
#include "tla/diagnostics.hpp"
#include "tla/mixing.hpp"
#include "tla/trainer.hpp"
#include "tla/vit.hpp"

namespace tla {

namespace detail {

struct SelftestContext {
    int failures = 0;

    void suite(const char* name, const std::function<void(std::ostringstream&)>& body) {
        std::ostringstream err;
        bool threw = false;
        try {
            body(err);
        } catch (const std::exception& e) {
            threw = true;
            err << "exception: " << e.what();
        }
        const std::string msg = err.str();
        if (msg.empty() && !threw) {
            std::printf("ok   %s\n", name);
        } else {
            ++failures;
            std::printf("FAIL %s: %s\n", name, msg.c_str());
        }
    }
};

inline ModelConfig selftest_config() {
    ModelConfig mc;
    mc.image_size = 16;
    mc.patch_size = 8;
    mc.channels = 1;
    mc.depth = 2;
    mc.dim = 8;
    mc.heads = 2;
    mc.mlp_ratio = 2;
    mc.num_classes = 3;
    return mc;
}

inline Image selftest_image(std::uint64_t seed, int size = 16) {
    Rng rng(seed);
    Image img(size, size, 1);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

}  // namespace detail

inline int run_selftest() {
    detail::SelftestContext ctx;

    ctx.suite("numerics", [](std::ostringstream& err) {
        Matrix<double> a(3, 3);
        Rng rng(11);
        for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform(-2, 2);
        const Matrix<double> ai = matmul(a, Matrix<double>::identity(3));
        for (std::size_t i = 0; i < a.size(); ++i)
            if (ai.data()[i] != a.data()[i]) {
                err << "matmul by identity is not exact";
                return;
            }
        Matrix<double> logits(2, 4);
        for (std::size_t i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-30, 30);
        const Matrix<double> sm = softmax_rows(logits);
        for (std::size_t r = 0; r < sm.rows(); ++r) {
            double s = 0;
            for (std::size_t j = 0; j < sm.cols(); ++j) s += sm(r, j);
            if (std::abs(s - 1.0) > 1e-12) {
                err << "softmax row " << r << " sums to " << s;
                return;
            }
        }
        const Matrix<double> n1 = row_normalize(sm);
        const Matrix<double> n2 = row_normalize(n1);
        if (max_abs_diff(n1, n2) > 1e-15) err << "row_normalize is not idempotent";
    });

    ctx.suite("rng streams", [](std::ostringstream& err) {
        Rng a(42), b(42);
        for (int i = 0; i < 1000; ++i)
            if (a.next_u64() != b.next_u64()) {
                err << "same-seed streams diverge at draw " << i;
                return;
            }
        Rng c = Rng::derive(42, 1), d = Rng::derive(42, 2);
        if (c.next_u64() == d.next_u64()) err << "derived child streams collide";
        Rng e(7);
        for (int i = 0; i < 100; ++i) {
            const double v = e.beta(0.7, 0.7);
            if (!(v >= 0.0 && v <= 1.0)) {
                err << "beta draw " << v << " outside [0,1]";
                return;
            }
        }
    });

    ctx.suite("label maps", [](std::ostringstream& err) {
        const Image x1(16, 16, 1, 0.25f), x2(16, 16, 1, 0.75f);
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            const MixedSample s = cutmix(x1, x2, 0, 2, rng);
            const LabelMatrix y = init_label_map(s.spec, 8, 3);
            double mass_a = 0.0;
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double sum = 0;
                for (std::size_t j = 0; j < y.cols(); ++j) sum += y(r, j);
                if (sum != 1.0) {
                    err << "label row " << r << " sums to " << sum << " (want exactly 1)";
                    return;
                }
                if (r > 0) mass_a += y(r, 0);
            }
            if (std::abs(mass_a / (y.rows() - 1) - s.spec.lambda) > 1e-9) {
                err << "patch-mean class mass " << mass_a / (y.rows() - 1) << " vs lambda "
                    << s.spec.lambda;
                return;
            }
        }
    });

    ctx.suite("alignment", [](std::ostringstream& err) {
        // identity attention leaves the map bit-identical
        LabelMatrix y0(5, 3);
        Rng rng(9);
        for (std::size_t r = 0; r < 5; ++r) {
            const double f = rng.uniform();
            y0(r, 0) = f;
            y0(r, 2) = 1.0 - f;
        }
        AttentionTrace<float> ident;
        ident.layers.assign(2, std::vector<Matrix<float>>(2, Matrix<float>::identity(5)));
        const AlignedTarget t1 = align_forward(y0, ident, Pooling::class_token);
        for (std::size_t i = 0; i < y0.size(); ++i)
            if (t1.per_layer.back().data()[i] != y0.data()[i]) {
                err << "identity attention changed the label map";
                return;
            }
        // identical rows are a fixed point under any stochastic attention
        LabelMatrix yu(5, 3);
        for (std::size_t r = 0; r < 5; ++r) {
            yu(r, 0) = 0.3;
            yu(r, 1) = 0.7;
        }
        AttentionTrace<float> rnd;
        rnd.layers.resize(3);
        for (auto& layer : rnd.layers)
            for (int h = 0; h < 2; ++h) {
                Matrix<float> logits(5, 5);
                for (std::size_t i = 0; i < logits.size(); ++i)
                    logits.data()[i] = static_cast<float>(rng.uniform(-3, 3));
                layer.push_back(softmax_rows(logits));
            }
        const AlignedTarget t2 = align_forward(yu, rnd, Pooling::class_token);
        if (max_abs_diff(t2.per_layer.back(), yu) > 1e-9) {
            err << "uniform-row map moved by " << max_abs_diff(t2.per_layer.back(), yu);
            return;
        }
        // row sums stay 1 layer after layer
        const AlignedTarget t3 = align_forward(y0, rnd, Pooling::class_token);
        for (const LabelMatrix& y : t3.per_layer)
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double s = 0;
                for (std::size_t j = 0; j < y.cols(); ++j) s += y(r, j);
                if (std::abs(s - 1.0) > 1e-9) {
                    err << "propagated row sum " << s;
                    return;
                }
            }
    });

    ctx.suite("token presence", [](std::ostringstream& err) {
        Rng rng(13);
        Matrix<double> w(12, 12);
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
        const PresenceReport rep = token_presence(w);
        if (std::abs(rep.total - 12.0) > 1e-9) {
            err << "presence total " << rep.total << " (want 12)";
            return;
        }
        ConvDescriptor d;
        d.grid_rows = d.grid_cols = 5;
        d.kernel = Matrix<double>(3, 3);
        d.kernel.fill(1.0 / 9.0);
        const PresenceReport conv = conv_presence(d);
        for (std::size_t i = 0; i < conv.presence.size(); ++i) {
            // a sum of nine rounded quotients, so not exactly 1
            if (conv.interior[i] && std::abs(conv.presence[i] - 1.0) > 1e-12) {
                err << "interior token " << i << " presence " << conv.presence[i];
                return;
            }
            if (!conv.interior[i] && !(conv.presence[i] < 1.0)) {
                err << "edge token " << i << " presence " << conv.presence[i];
                return;
            }
        }
    });

    ctx.suite("model forward", [](std::ostringstream& err) {
        const ModelConfig mc = detail::selftest_config();
        Rng rng(3);
        const ModelParams<float> p = init_params<float>(mc, rng);
        const Image img = detail::selftest_image(21);
        ForwardTrace<float> tr1, tr2;
        const Matrix<float> l1 = model_forward(p, img, tr1);
        const Matrix<float> l2 = model_forward(p, img, tr2);
        for (std::size_t i = 0; i < l1.size(); ++i)
            if (l1.data()[i] != l2.data()[i]) {
                err << "forward pass is not deterministic";
                return;
            }
        if (!all_finite(l1)) {
            err << "non-finite logits";
            return;
        }
        for (const auto& layer : tr1.attention.layers)
            for (const auto& h : layer)
                for (std::size_t r = 0; r < h.rows(); ++r) {
                    double s = 0;
                    for (std::size_t j = 0; j < h.cols(); ++j) s += h(r, j);
                    if (std::abs(s - 1.0) > 1e-5) {
                        err << "attention row sum " << s;
                        return;
                    }
                }
    });

    ctx.suite("gradients", [](std::ostringstream& err) {
        const ModelConfig mc = detail::selftest_config();
        Rng rng(31);
        ModelParams<double> p = init_params<double>(mc, rng);
        Matrix<double> target(1, 3);
        target(0, 0) = 0.6;
        target(0, 2) = 0.4;
        const GradCheckReport rep =
            gradient_check(p, detail::selftest_image(77), target, 29, 1e-5);
        if (rep.max_rel_error > 1e-4)
            err << "worst " << rep.worst_tensor << " rel err " << rep.max_rel_error;
    });

    ctx.suite("checkpoint", [](std::ostringstream& err) {
        const ModelConfig mc = detail::selftest_config();
        Rng rng(8);
        const ModelParams<float> p = init_params<float>(mc, rng);
        const auto path =
            (std::filesystem::temp_directory_path() / "tla_selftest_ckpt.bin").string();
        save_checkpoint(p, path);
        const ModelParams<float> q = load_checkpoint<float>(path);
        std::filesystem::remove(path);
        double worst = 0;
        auto ta = detail::tensor_list(p);
        auto tb = detail::tensor_list(q);
        for (std::size_t t = 0; t < ta.size(); ++t)
            worst = std::max(worst, static_cast<double>(max_abs_diff(*ta[t], *tb[t])));
        if (worst != 0.0) err << "round trip drifted by " << worst;
    });

    ctx.suite("config", [](std::ostringstream& err) {
        RunConfig rc;
        rc.train.lr = 0.000123456789;
        rc.data.synth_noise = 0.3;
        const std::string s1 = serialize_run_config(rc);
        const RunConfig back = parse_run_config(s1);
        const std::string s2 = serialize_run_config(back);
        if (s1 != s2) {
            err << "serialize/parse round trip changed the config";
            return;
        }
        if (config_hash(rc) != config_hash(back)) err << "hash unstable across round trip";
    });

    if (ctx.failures == 0)
        std::printf("selftest: all suites passed\n");
    else
        std::printf("selftest: %d suite(s) FAILED\n", ctx.failures);
    return ctx.failures;
}

}  // namespace tla
