// Small pre-norm vision transformer with hand-written backprop. The forward
// pass records everything backprop or the label-propagation pass needs (all
// per-head attention maps in particular), so one forward serves training,
// alignment and diagnostics without re-running anything.
#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tla/image.hpp"
#include "tla/matrix.hpp"
#include "tla/rng.hpp"

namespace tla {

enum class Pooling { class_token, global_pool };

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int channels = 1;
    int depth = 4;       // transformer blocks
    int dim = 64;        // token width d
    int heads = 4;
    int mlp_ratio = 2;   // hidden width = mlp_ratio * dim
    int num_classes = 10;
    Pooling pooling = Pooling::class_token;

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int tokens() const { return num_patches() + 1; }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return dim / heads; }
    int mlp_dim() const { return mlp_ratio * dim; }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
        if (image_size <= 0 || patch_size <= 0 || channels <= 0) fail("sizes must be positive");
        if (image_size % patch_size != 0)
            fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                 std::to_string(patch_size));
        if (depth < 1) fail("depth must be >= 1");
        if (dim < 1 || heads < 1) fail("dim and heads must be >= 1");
        if (dim % heads != 0)
            fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
        if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
        if (num_classes < 2) fail("need at least two classes");
    }
};

constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct LayerParams {
    Matrix<T> wq, wk, wv, wo;              // dim x dim, no biases
    Matrix<T> ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x dim
    Matrix<T> w1, b1;                      // dim x mlp_dim, 1 x mlp_dim
    Matrix<T> w2, b2;                      // mlp_dim x dim, 1 x dim
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;
    Matrix<T> embed;   // patch_dim x dim
    Matrix<T> pos;     // tokens x dim, learned, added to every token row
    Matrix<T> cls;     // 1 x dim
    std::vector<LayerParams<T>> layers;
    Matrix<T> head_w;  // dim x num_classes
    Matrix<T> head_b;  // 1 x num_classes
};

// Gradients mirror the parameter tree tensor for tensor.
template <typename T>
using ParamGrads = ModelParams<T>;

// Canonical tensor walk: fixed order and names shared by the optimizer, the
// checkpoint format and the finite-difference harness.
template <typename T, typename Fn>
void for_each_tensor(ModelParams<T>& p, Fn&& fn) {
    fn("embed", p.embed);
    fn("pos", p.pos);
    fn("cls", p.cls);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        auto& lp = p.layers[l];
        fn(pre + "wq", lp.wq);
        fn(pre + "wk", lp.wk);
        fn(pre + "wv", lp.wv);
        fn(pre + "wo", lp.wo);
        fn(pre + "ln1_g", lp.ln1_g);
        fn(pre + "ln1_b", lp.ln1_b);
        fn(pre + "ln2_g", lp.ln2_g);
        fn(pre + "ln2_b", lp.ln2_b);
        fn(pre + "w1", lp.w1);
        fn(pre + "b1", lp.b1);
        fn(pre + "w2", lp.w2);
        fn(pre + "b2", lp.b2);
    }
    fn("head.w", p.head_w);
    fn("head.b", p.head_b);
}

template <typename T, typename Fn>
void for_each_tensor(const ModelParams<T>& p, Fn&& fn) {
    for_each_tensor(const_cast<ModelParams<T>&>(p),
                    [&](const std::string& name, Matrix<T>& m) { fn(name, std::as_const(m)); });
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
    ModelParams<T> z;
    z.cfg = p.cfg;
    z.embed = Matrix<T>(p.embed.rows(), p.embed.cols());
    z.pos = Matrix<T>(p.pos.rows(), p.pos.cols());
    z.cls = Matrix<T>(p.cls.rows(), p.cls.cols());
    z.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& s = p.layers[l];
        auto& d = z.layers[l];
        d.wq = Matrix<T>(s.wq.rows(), s.wq.cols());
        d.wk = Matrix<T>(s.wk.rows(), s.wk.cols());
        d.wv = Matrix<T>(s.wv.rows(), s.wv.cols());
        d.wo = Matrix<T>(s.wo.rows(), s.wo.cols());
        d.ln1_g = Matrix<T>(1, s.ln1_g.cols());
        d.ln1_b = Matrix<T>(1, s.ln1_b.cols());
        d.ln2_g = Matrix<T>(1, s.ln2_g.cols());
        d.ln2_b = Matrix<T>(1, s.ln2_b.cols());
        d.w1 = Matrix<T>(s.w1.rows(), s.w1.cols());
        d.b1 = Matrix<T>(1, s.b1.cols());
        d.w2 = Matrix<T>(s.w2.rows(), s.w2.cols());
        d.b2 = Matrix<T>(1, s.b2.cols());
    }
    z.head_w = Matrix<T>(p.head_w.rows(), p.head_w.cols());
    z.head_b = Matrix<T>(1, p.head_b.cols());
    return z;
}

// Weights: zero-mean uniform at scale 1/sqrt(fan_in). Position table and
// class token: Gaussian, sigma 0.02. Biases and LayerNorm offsets zero,
// LayerNorm gains one. Draw order is part of the reproducibility contract.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    auto uniform_fan = [&rng](Matrix<T>& m, int fan_in) {
        const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < m.size(); ++i)
            m.data()[i] = static_cast<T>(rng.uniform(-a, a));
    };
    auto gaussian = [&rng](Matrix<T>& m, double sigma) {
        for (std::size_t i = 0; i < m.size(); ++i)
            m.data()[i] = static_cast<T>(rng.normal(0.0, sigma));
    };

    ModelParams<T> p;
    p.cfg = cfg;
    p.embed = Matrix<T>(cfg.patch_dim(), cfg.dim);
    uniform_fan(p.embed, cfg.patch_dim());
    p.pos = Matrix<T>(cfg.tokens(), cfg.dim);
    gaussian(p.pos, 0.02);
    p.cls = Matrix<T>(1, cfg.dim);
    gaussian(p.cls, 0.02);

    p.layers.resize(cfg.depth);
    for (auto& lp : p.layers) {
        lp.wq = Matrix<T>(cfg.dim, cfg.dim);
        lp.wk = Matrix<T>(cfg.dim, cfg.dim);
        lp.wv = Matrix<T>(cfg.dim, cfg.dim);
        lp.wo = Matrix<T>(cfg.dim, cfg.dim);
        uniform_fan(lp.wq, cfg.dim);
        uniform_fan(lp.wk, cfg.dim);
        uniform_fan(lp.wv, cfg.dim);
        uniform_fan(lp.wo, cfg.dim);
        lp.ln1_g = Matrix<T>(1, cfg.dim, T{1});
        lp.ln1_b = Matrix<T>(1, cfg.dim);
        lp.ln2_g = Matrix<T>(1, cfg.dim, T{1});
        lp.ln2_b = Matrix<T>(1, cfg.dim);
        lp.w1 = Matrix<T>(cfg.dim, cfg.mlp_dim());
        uniform_fan(lp.w1, cfg.dim);
        lp.b1 = Matrix<T>(1, cfg.mlp_dim());
        lp.w2 = Matrix<T>(cfg.mlp_dim(), cfg.dim);
        uniform_fan(lp.w2, cfg.mlp_dim());
        lp.b2 = Matrix<T>(1, cfg.dim);
    }

    p.head_w = Matrix<T>(cfg.dim, cfg.num_classes);
    uniform_fan(p.head_w, cfg.dim);
    p.head_b = Matrix<T>(1, cfg.num_classes);
    return p;
}

// ---- activation -----------------------------------------------------------

// Exact GELU, x * Phi(x). The tanh approximation would poison the 1e-4
// finite-difference gate, so it is not used anywhere.
template <typename T>
T gelu(T x) {
    return static_cast<T>(0.5 * static_cast<double>(x) *
                          (1.0 + std::erf(static_cast<double>(x) * std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_grad(T x) {
    const double xd = static_cast<double>(x);
    const double phi = 0.5 * (1.0 + std::erf(xd * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * std::numbers::pi);
    return static_cast<T>(phi + xd * pdf);
}

// ---- traces ----------------------------------------------------------------

// Row-stochastic post-softmax maps, tokens x tokens, indexed [layer][head].
template <typename T>
struct AttentionTrace {
    std::vector<std::vector<Matrix<T>>> layers;

    std::size_t depth() const { return layers.size(); }
    std::size_t heads() const { return layers.empty() ? 0 : layers[0].size(); }
};

template <typename T>
struct LayerTrace {
    Matrix<T> x_in;                      // block input Z^{l-1}
    Matrix<T> ln1_xhat, ln1_out;         // normalized rows, then affine output
    Matrix<T> ln1_inv_std;               // tokens x 1
    Matrix<T> q, k, v;                   // tokens x dim
    Matrix<T> att_concat;                // heads' outputs side by side
    Matrix<T> msa_out;                   // att_concat * wo
    Matrix<T> z_mid;                     // msa_out + x_in
    Matrix<T> ln2_xhat, ln2_out;
    Matrix<T> ln2_inv_std;
    Matrix<T> mlp_pre, mlp_act, mlp_out;
    Matrix<T> x_out;                     // block output Z^l
};

template <typename T>
struct ForwardTrace {
    Matrix<T> patches;  // num_patches x patch_dim, raw pixels (embed gradient needs them)
    Matrix<T> z0;       // embedded tokens
    std::vector<LayerTrace<T>> layers;
    AttentionTrace<T> attention;
    Matrix<T> pooled;   // 1 x dim
    Matrix<T> logits;   // 1 x num_classes

    // Token snapshot after l blocks (l = 0 is the embedding).
    const Matrix<T>& tokens_at(std::size_t l) const {
        return l == 0 ? z0 : layers.at(l - 1).x_out;
    }
};

// ---- forward ----------------------------------------------------------------

// Patch rows in raster order; inside a patch, pixels in raster order with the
// channel index fastest. Must stay in lockstep with the label-map patch walk.
template <typename T>
Matrix<T> flatten_patches(const Image& img, const ModelConfig& cfg) {
    img.require_shape(cfg.image_size, cfg.image_size, cfg.channels, "flatten_patches");
    const int ps = cfg.patch_size, side = cfg.patches_per_side();
    Matrix<T> out(cfg.num_patches(), cfg.patch_dim());
    for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
            T* row = out.row(static_cast<std::size_t>(py) * side + px);
            std::size_t idx = 0;
            for (int dy = 0; dy < ps; ++dy)
                for (int dx = 0; dx < ps; ++dx)
                    for (int c = 0; c < cfg.channels; ++c)
                        row[idx++] = static_cast<T>(img.at(py * ps + dy, px * ps + dx, c));
        }
    return out;
}

template <typename T>
Matrix<T> embed_tokens(const ModelParams<T>& p, const Matrix<T>& patches) {
    const int n = p.cfg.num_patches();
    Matrix<T> z(p.cfg.tokens(), p.cfg.dim);
    Matrix<T> proj = matmul(patches, p.embed);  // n x dim
    for (int j = 0; j < p.cfg.dim; ++j) z(0, j) = p.cls(0, j);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p.cfg.dim; ++j) z(i + 1, j) = proj(i, j);
    add_inplace(z, p.pos);
    return z;
}

template <typename T>
Matrix<T> patch_embed(const ModelParams<T>& p, const Image& img) {
    return embed_tokens(p, flatten_patches<T>(img, p.cfg));
}

// Row-wise LayerNorm. Population variance, epsilon inside the square root.
// xhat / inv_std outputs feed the backward pass.
template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                          Matrix<T>* xhat_out = nullptr, Matrix<T>* inv_std_out = nullptr) {
    const std::size_t d = x.cols();
    if (gain.cols() != d || bias.cols() != d)
        detail::shape_error("layer_norm_rows", x.shape_str(), gain.shape_str());
    Matrix<T> out(x.rows(), d);
    if (xhat_out) *xhat_out = Matrix<T>(x.rows(), d);
    if (inv_std_out) *inv_std_out = Matrix<T>(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const T* src = x.row(i);
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += src[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T c = src[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv_std = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
        if (inv_std_out) (*inv_std_out)(i, 0) = inv_std;
        T* dst = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (src[j] - mean) * inv_std;
            if (xhat_out) (*xhat_out)(i, j) = xh;
            dst[j] = gain(0, j) * xh + bias(0, j);
        }
    }
    return out;
}

namespace detail {

template <typename T>
Matrix<T> col_slice(const Matrix<T>& m, std::size_t c0, std::size_t w) {
    Matrix<T> out(m.rows(), w);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = m(i, c0 + j);
    return out;
}

template <typename T>
void col_place(Matrix<T>& dst, const Matrix<T>& src, std::size_t c0) {
    for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::size_t j = 0; j < src.cols(); ++j) dst(i, c0 + j) = src(i, j);
}

}  // namespace detail

// Multi-head self-attention over already-normalized tokens. Returns the
// mixed tokens (before the residual add) and one row-stochastic map per head.
// Logits are scaled by 1/sqrt(dim/heads), the per-head width.
template <typename T>
Matrix<T> mhsa_forward(const Matrix<T>& x, const LayerParams<T>& lp, const ModelConfig& cfg,
                       std::vector<Matrix<T>>& heads_out,
                       Matrix<T>* q_out = nullptr, Matrix<T>* k_out = nullptr,
                       Matrix<T>* v_out = nullptr, Matrix<T>* concat_out = nullptr) {
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));

    Matrix<T> q = matmul(x, lp.wq);
    Matrix<T> k = matmul(x, lp.wk);
    Matrix<T> v = matmul(x, lp.wv);

    Matrix<T> concat(x.rows(), static_cast<std::size_t>(cfg.dim));
    heads_out.clear();
    heads_out.reserve(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
        const std::size_t c0 = h * dh;
        Matrix<T> qh = detail::col_slice(q, c0, dh);
        Matrix<T> kh = detail::col_slice(k, c0, dh);
        Matrix<T> vh = detail::col_slice(v, c0, dh);
        Matrix<T> scores = matmul_nt(qh, kh);
        scale_inplace(scores, scale);
        Matrix<T> attn = softmax_rows(scores);
        Matrix<T> mixed = matmul(attn, vh);
        detail::col_place(concat, mixed, c0);
        heads_out.push_back(std::move(attn));
    }

    Matrix<T> out = matmul(concat, lp.wo);
    if (q_out) *q_out = std::move(q);
    if (k_out) *k_out = std::move(k);
    if (v_out) *v_out = std::move(v);
    if (concat_out) *concat_out = std::move(concat);
    return out;
}

// One pre-norm block: x + MSA(LN1(x)), then + MLP(LN2(.)).
template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const LayerParams<T>& lp, const ModelConfig& cfg,
                        LayerTrace<T>& t, std::vector<Matrix<T>>& heads_out) {
    t.x_in = x;
    t.ln1_out = layer_norm_rows(x, lp.ln1_g, lp.ln1_b, &t.ln1_xhat, &t.ln1_inv_std);
    t.msa_out = mhsa_forward(t.ln1_out, lp, cfg, heads_out, &t.q, &t.k, &t.v, &t.att_concat);
    t.z_mid = add(t.msa_out, x);

    t.ln2_out = layer_norm_rows(t.z_mid, lp.ln2_g, lp.ln2_b, &t.ln2_xhat, &t.ln2_inv_std);
    t.mlp_pre = matmul(t.ln2_out, lp.w1);
    for (std::size_t i = 0; i < t.mlp_pre.rows(); ++i)
        for (std::size_t j = 0; j < t.mlp_pre.cols(); ++j) t.mlp_pre(i, j) += lp.b1(0, j);
    t.mlp_act = Matrix<T>(t.mlp_pre.rows(), t.mlp_pre.cols());
    for (std::size_t i = 0; i < t.mlp_pre.size(); ++i)
        t.mlp_act.data()[i] = gelu(t.mlp_pre.data()[i]);
    t.mlp_out = matmul(t.mlp_act, lp.w2);
    for (std::size_t i = 0; i < t.mlp_out.rows(); ++i)
        for (std::size_t j = 0; j < t.mlp_out.cols(); ++j) t.mlp_out(i, j) += lp.b2(0, j);

    t.x_out = add(t.mlp_out, t.z_mid);
    return t.x_out;
}

template <typename T>
Matrix<T> pool_tokens(const Matrix<T>& z, const ModelConfig& cfg) {
    Matrix<T> pooled(1, z.cols());
    if (cfg.pooling == Pooling::class_token) {
        for (std::size_t j = 0; j < z.cols(); ++j) pooled(0, j) = z(0, j);
    } else {
        const std::size_t n = z.rows() - 1;
        for (std::size_t i = 1; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j) pooled(0, j) += z(i, j);
        for (std::size_t j = 0; j < z.cols(); ++j) pooled(0, j) /= static_cast<T>(n);
    }
    return pooled;
}

template <typename T>
Matrix<T> model_forward(const ModelParams<T>& p, const Image& img, ForwardTrace<T>& trace) {
    trace = ForwardTrace<T>{};
    trace.patches = flatten_patches<T>(img, p.cfg);
    trace.z0 = embed_tokens(p, trace.patches);

    trace.layers.resize(p.cfg.depth);
    trace.attention.layers.resize(p.cfg.depth);
    Matrix<T> z = trace.z0;
    for (int l = 0; l < p.cfg.depth; ++l)
        z = block_forward(z, p.layers[l], p.cfg, trace.layers[l], trace.attention.layers[l]);

    trace.pooled = pool_tokens(z, p.cfg);
    trace.logits = matmul(trace.pooled, p.head_w);
    for (std::size_t j = 0; j < trace.logits.cols(); ++j) trace.logits(0, j) += p.head_b(0, j);
    return trace.logits;
}

// ---- backward ---------------------------------------------------------------

namespace detail {

// Standard LayerNorm backward from cached xhat and 1/std. Returns d(input);
// gain/bias grads are accumulated into dg/db.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat,
                              const Matrix<T>& inv_std, const Matrix<T>& gain,
                              Matrix<T>& dg, Matrix<T>& db) {
    const std::size_t d = dy.cols();
    Matrix<T> dx(dy.rows(), d);
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        const T* dyr = dy.row(i);
        const T* xhr = xhat.row(i);
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dg(0, j) += dyr[j] * xhr[j];
            db(0, j) += dyr[j];
            const T dxh = dyr[j] * gain(0, j);
            m1 += dxh;
            m2 += dxh * xhr[j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        const T r = inv_std(i, 0);
        T* dxr = dx.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const T dxh = dyr[j] * gain(0, j);
            dxr[j] = r * (dxh - m1 - xhr[j] * m2);
        }
    }
    return dx;
}

// dSoftmax for row-stochastic A: dS = A o (dA - rowsum(dA o A)).
template <typename T>
Matrix<T> softmax_backward_rows(const Matrix<T>& attn, const Matrix<T>& dattn) {
    Matrix<T> ds(attn.rows(), attn.cols());
    for (std::size_t i = 0; i < attn.rows(); ++i) {
        const T* a = attn.row(i);
        const T* da = dattn.row(i);
        T dot = 0;
        for (std::size_t j = 0; j < attn.cols(); ++j) dot += a[j] * da[j];
        T* out = ds.row(i);
        for (std::size_t j = 0; j < attn.cols(); ++j) out[j] = a[j] * (da[j] - dot);
    }
    return ds;
}

template <typename T>
void add_row_sums(const Matrix<T>& m, Matrix<T>& acc) {
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) acc(0, j) += m(i, j);
}

}  // namespace detail

// Full reverse pass. dlogits is d(loss)/d(logits); the returned tree holds
// d(loss)/d(every parameter). The label side of the loss is a constant here
// by construction: targets never enter this function.
template <typename T>
ParamGrads<T> model_backward(const ModelParams<T>& p, const ForwardTrace<T>& trace,
                             const Matrix<T>& dlogits) {
    const ModelConfig& cfg = p.cfg;
    if (dlogits.rows() != 1 || dlogits.cols() != static_cast<std::size_t>(cfg.num_classes))
        detail::shape_error("model_backward", dlogits.shape_str(),
                            "1x" + std::to_string(cfg.num_classes));
    ParamGrads<T> g = zeros_like(p);

    // classifier head
    g.head_w = matmul_tn(trace.pooled, dlogits);
    g.head_b = dlogits;
    Matrix<T> dpooled = matmul_nt(dlogits, p.head_w);

    // pooling
    Matrix<T> dz(static_cast<std::size_t>(cfg.tokens()), static_cast<std::size_t>(cfg.dim));
    if (cfg.pooling == Pooling::class_token) {
        for (std::size_t j = 0; j < dz.cols(); ++j) dz(0, j) = dpooled(0, j);
    } else {
        const T inv_n = T{1} / static_cast<T>(cfg.num_patches());
        for (std::size_t i = 1; i < dz.rows(); ++i)
            for (std::size_t j = 0; j < dz.cols(); ++j) dz(i, j) = dpooled(0, j) * inv_n;
    }

    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));

    for (int l = cfg.depth - 1; l >= 0; --l) {
        const LayerParams<T>& lp = p.layers[l];
        LayerParams<T>& lg = g.layers[l];
        const LayerTrace<T>& t = trace.layers[l];

        // x_out = mlp_out + z_mid
        const Matrix<T>& dxout = dz;
        Matrix<T> dmlp_out = dxout;       // into the MLP branch
        Matrix<T> dz_mid = dxout;         // residual path

        // mlp_out = mlp_act * w2 + b2
        detail::add_row_sums(dmlp_out, lg.b2);
        add_inplace(lg.w2, matmul_tn(t.mlp_act, dmlp_out));
        Matrix<T> dact = matmul_nt(dmlp_out, lp.w2);

        // act = gelu(pre)
        Matrix<T> dpre(dact.rows(), dact.cols());
        for (std::size_t i = 0; i < dact.size(); ++i)
            dpre.data()[i] = dact.data()[i] * gelu_grad(t.mlp_pre.data()[i]);

        // pre = ln2_out * w1 + b1
        detail::add_row_sums(dpre, lg.b1);
        add_inplace(lg.w1, matmul_tn(t.ln2_out, dpre));
        Matrix<T> dln2_out = matmul_nt(dpre, lp.w1);

        add_inplace(dz_mid, detail::layer_norm_backward(dln2_out, t.ln2_xhat, t.ln2_inv_std,
                                                        lp.ln2_g, lg.ln2_g, lg.ln2_b));

        // z_mid = msa_out + x_in
        Matrix<T> dmsa = dz_mid;
        Matrix<T> dx_in = dz_mid;  // residual path

        // msa_out = concat * wo
        add_inplace(lg.wo, matmul_tn(t.att_concat, dmsa));
        Matrix<T> dconcat = matmul_nt(dmsa, lp.wo);

        Matrix<T> dq(t.q.rows(), t.q.cols());
        Matrix<T> dk(t.k.rows(), t.k.cols());
        Matrix<T> dv(t.v.rows(), t.v.cols());
        for (int h = 0; h < cfg.heads; ++h) {
            const std::size_t c0 = h * dh;
            Matrix<T> qh = detail::col_slice(t.q, c0, dh);
            Matrix<T> kh = detail::col_slice(t.k, c0, dh);
            Matrix<T> vh = detail::col_slice(t.v, c0, dh);
            const Matrix<T>& attn = trace.attention.layers[l][h];

            Matrix<T> dmixed = detail::col_slice(dconcat, c0, dh);
            Matrix<T> dattn = matmul_nt(dmixed, vh);
            Matrix<T> dvh = matmul_tn(attn, dmixed);
            Matrix<T> dscores = detail::softmax_backward_rows(attn, dattn);
            scale_inplace(dscores, scale);
            Matrix<T> dqh = matmul(dscores, kh);
            Matrix<T> dkh = matmul_tn(dscores, qh);

            detail::col_place(dq, dqh, c0);
            detail::col_place(dk, dkh, c0);
            detail::col_place(dv, dvh, c0);
        }

        // q/k/v = ln1_out * w{q,k,v}
        add_inplace(lg.wq, matmul_tn(t.ln1_out, dq));
        add_inplace(lg.wk, matmul_tn(t.ln1_out, dk));
        add_inplace(lg.wv, matmul_tn(t.ln1_out, dv));
        Matrix<T> dln1_out = matmul_nt(dq, lp.wq);
        add_inplace(dln1_out, matmul_nt(dk, lp.wk));
        add_inplace(dln1_out, matmul_nt(dv, lp.wv));

        add_inplace(dx_in, detail::layer_norm_backward(dln1_out, t.ln1_xhat, t.ln1_inv_std,
                                                       lp.ln1_g, lg.ln1_g, lg.ln1_b));
        dz = std::move(dx_in);
    }

    // z0 = [cls; patches * embed] + pos
    g.pos = dz;
    for (std::size_t j = 0; j < dz.cols(); ++j) g.cls(0, j) = dz(0, j);
    Matrix<T> dpatch_rows(static_cast<std::size_t>(cfg.num_patches()),
                          static_cast<std::size_t>(cfg.dim));
    for (std::size_t i = 0; i < dpatch_rows.rows(); ++i)
        for (std::size_t j = 0; j < dpatch_rows.cols(); ++j) dpatch_rows(i, j) = dz(i + 1, j);
    g.embed = matmul_tn(trace.patches, dpatch_rows);

    return g;
}

}  // namespace tla
