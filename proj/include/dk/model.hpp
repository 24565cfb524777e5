#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dk/deform.hpp"
#include "dk/random.hpp"

namespace dk {

// Ordered layer stack for the desk-scale classifier: depthwise-separable
// blocks whose 3x3 depthwise convolutions can be swapped for the
// runtime-adaptive operators, followed by GAP and an FC head.

enum class OpKind { Rigid, DkGlobal, DkLocal, Dc, Dcdk, Relu, Gap, Fc };

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Rigid: return "rigid";
        case OpKind::DkGlobal: return "dk_global";
        case OpKind::DkLocal: return "dk_local";
        case OpKind::Dc: return "dc";
        case OpKind::Dcdk: return "dcdk";
        case OpKind::Relu: return "relu";
        case OpKind::Gap: return "gap";
        case OpKind::Fc: return "fc";
    }
    return "?";
}

template <typename T>
struct ParamRef {
    std::string name;
    std::vector<T>* value;
    std::vector<T>* grad;
    std::vector<T>* momentum;
    double lr_mult;
    bool decay;
    std::array<int, 4> dims;  // for checkpoint serialization
};

template <typename T>
struct Layer {
    OpKind kind = OpKind::Rigid;
    ConvSpec spec;

    KernelScope<T> scope;  // conv weights / DK scope / DC kernel
    OffsetGeneratorGlobal<T> gen_global;
    OffsetGeneratorLocal<T> gen_kernel;  // local kernel-offset generator
    OffsetGeneratorLocal<T> gen_data;    // data-offset generator (dc, dcdk)
    Matrix<T> fc_w;
    std::vector<T> fc_b;
    double gen_lr_mult = 1e-2;

    // gradient and momentum storage, parallel to the parameters
    KernelScope<T> g_scope;
    Matrix<T> g_gg_w, g_fc_w;
    std::vector<T> g_gg_b, g_fc_b, g_gk_b, g_gd_b;
    KernelScope<T> g_gk_conv, g_gd_conv;
    std::vector<T> m_scope, m_gg_w, m_gg_b, m_gk_conv, m_gk_b, m_gd_conv, m_gd_b,
        m_fc_w, m_fc_b;

    // caches from the last forward
    Tensor<T> in_cache, out_cache, offsets_cache;

    bool is_deformable() const {
        return kind == OpKind::DkGlobal || kind == OpKind::DkLocal ||
               kind == OpKind::Dc || kind == OpKind::Dcdk;
    }
    bool has_kernel_offsets() const {
        return kind == OpKind::DkGlobal || kind == OpKind::DkLocal ||
               kind == OpKind::Dcdk;
    }
};

template <typename T>
class Model {
public:
    std::vector<Layer<T>> layers;
    std::string arch = "rigid";

    Tensor<T> forward(const Tensor<T>& input) {
        Tensor<T> x = input;
        for (auto& l : layers) x = layer_forward(l, x);
        return x;  // (N, classes, 1, 1)
    }

    /// Forward through the first `count` layers only (ERF probing).
    Tensor<T> forward_prefix(const Tensor<T>& input, std::size_t count) {
        Tensor<T> x = input;
        for (std::size_t i = 0; i < count && i < layers.size(); ++i)
            x = layer_forward(layers[i], x);
        return x;
    }

    /// Backward through the first `count` layers, starting from `grad`.
    Tensor<T> backward_prefix(const Tensor<T>& grad, std::size_t count) {
        Tensor<T> g = grad;
        for (std::size_t i = std::min(count, layers.size()); i-- > 0;)
            g = layer_backward(layers[i], g);
        return g;
    }

    /// Backprop; parameter gradients accumulate into the g_* stores.
    Tensor<T> backward(const Tensor<T>& grad_logits) {
        Tensor<T> g = grad_logits;
        for (auto it = layers.rbegin(); it != layers.rend(); ++it)
            g = layer_backward(*it, g);
        return g;
    }

    void zero_grads() {
        for (auto& l : layers) {
            auto zero = [](std::vector<T>& v) { v.assign(v.size(), T(0)); };
            zero(l.g_scope.w);
            zero(l.g_gg_w.data);
            zero(l.g_gg_b);
            zero(l.g_gk_conv.w);
            zero(l.g_gk_b);
            zero(l.g_gd_conv.w);
            zero(l.g_gd_b);
            zero(l.g_fc_w.data);
            zero(l.g_fc_b);
        }
    }

    std::vector<ParamRef<T>> params() {
        std::vector<ParamRef<T>> out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            Layer<T>& l = layers[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            auto add = [&](const std::string& n, std::vector<T>& v, std::vector<T>& g,
                           std::vector<T>& m, double lr, bool decay,
                           std::array<int, 4> dims) {
                if (v.empty()) return;
                if (m.size() != v.size()) m.assign(v.size(), T(0));
                out.push_back({p + n, &v, &g, &m, lr, decay, dims});
            };
            if (!l.scope.w.empty())
                add("scope", l.scope.w, l.g_scope.w, l.m_scope, 1.0, true,
                    {l.scope.out_ch, l.scope.in_planes, l.scope.scope, l.scope.scope});
            if (l.kind == OpKind::DkGlobal) {
                add("gen.weight", l.gen_global.weight.data, l.g_gg_w.data, l.m_gg_w,
                    l.gen_lr_mult, true,
                    {l.gen_global.weight.rows, l.gen_global.weight.cols, 1, 1});
                add("gen.bias", l.gen_global.bias, l.g_gg_b, l.m_gg_b, l.gen_lr_mult,
                    false, {static_cast<int>(l.gen_global.bias.size()), 1, 1, 1});
            }
            if (l.kind == OpKind::DkLocal || l.kind == OpKind::Dcdk) {
                add("gen_k.conv", l.gen_kernel.conv.w, l.g_gk_conv.w, l.m_gk_conv,
                    l.gen_lr_mult, true,
                    {l.gen_kernel.conv.out_ch, l.gen_kernel.conv.in_planes,
                     l.gen_kernel.conv.scope, l.gen_kernel.conv.scope});
                add("gen_k.bias", l.gen_kernel.bias, l.g_gk_b, l.m_gk_b, l.gen_lr_mult,
                    false, {static_cast<int>(l.gen_kernel.bias.size()), 1, 1, 1});
            }
            if (l.kind == OpKind::Dc || l.kind == OpKind::Dcdk) {
                add("gen_d.conv", l.gen_data.conv.w, l.g_gd_conv.w, l.m_gd_conv,
                    l.gen_lr_mult, true,
                    {l.gen_data.conv.out_ch, l.gen_data.conv.in_planes,
                     l.gen_data.conv.scope, l.gen_data.conv.scope});
                add("gen_d.bias", l.gen_data.bias, l.g_gd_b, l.m_gd_b, l.gen_lr_mult,
                    false, {static_cast<int>(l.gen_data.bias.size()), 1, 1, 1});
            }
            if (l.kind == OpKind::Fc) {
                add("fc.weight", l.fc_w.data, l.g_fc_w.data, l.m_fc_w, 1.0, true,
                    {l.fc_w.rows, l.fc_w.cols, 1, 1});
                add("fc.bias", l.fc_b, l.g_fc_b, l.m_fc_b, 1.0, false,
                    {static_cast<int>(l.fc_b.size()), 1, 1, 1});
            }
        }
        return out;
    }

    /// Mean |offset| per batch item of the last layer with kernel offsets.
    std::vector<double> last_dk_offset_magnitudes() const {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
            if (!it->has_kernel_offsets() || it->offsets_cache.size() == 0) continue;
            const Tensor<T>& f = it->offsets_cache;
            std::vector<double> mags(f.n(), 0.0);
            const std::size_t per = f.size() / f.n();
            for (int n = 0; n < f.n(); ++n) {
                double acc = 0.0;
                for (int c = 0; c < f.c(); ++c)
                    for (int y = 0; y < f.h(); ++y)
                        for (int x = 0; x < f.w(); ++x)
                            acc += std::abs(static_cast<double>(f(n, c, y, x)));
                mags[n] = acc / static_cast<double>(per);
            }
            return mags;
        }
        return {};
    }

private:
    Tensor<T> layer_forward(Layer<T>& l, const Tensor<T>& x) {
        l.in_cache = x;
        switch (l.kind) {
            case OpKind::Rigid:
                l.out_cache = conv2d_rigid(x, l.scope, l.spec);
                break;
            case OpKind::DkGlobal: {
                auto r = dk_forward_global(x, l.scope, l.gen_global, l.spec);
                l.offsets_cache = std::move(r.offsets);
                l.out_cache = std::move(r.out);
                break;
            }
            case OpKind::DkLocal: {
                auto r = dk_forward_local(x, l.scope, l.gen_kernel, l.spec);
                l.offsets_cache = std::move(r.offsets);
                l.out_cache = std::move(r.out);
                break;
            }
            case OpKind::Dc: {
                const Tensor<T> field = l.gen_data.generate(x, l.spec);
                l.out_cache = dc_forward(x, l.scope, field, l.spec);
                break;
            }
            case OpKind::Dcdk: {
                const Tensor<T> kfield = l.gen_kernel.generate(x, l.spec);
                const Tensor<T> dfield = l.gen_data.generate(x, l.spec);
                auto r = dcdk_forward(x, l.scope, kfield, dfield, l.spec);
                l.offsets_cache = std::move(r.offsets);
                l.out_cache = std::move(r.out);
                break;
            }
            case OpKind::Relu:
                l.out_cache = relu(x);
                break;
            case OpKind::Gap:
                l.out_cache = global_avg_pool(x);
                break;
            case OpKind::Fc:
                l.out_cache = fully_connected(x, l.fc_w, l.fc_b);
                break;
        }
        return l.out_cache;
    }

    Tensor<T> layer_backward(Layer<T>& l, const Tensor<T>& g) {
        switch (l.kind) {
            case OpKind::Rigid: {
                auto [gin, gw] = conv2d_backward(l.in_cache, l.scope, l.spec, g);
                accumulate(l.g_scope.w, gw.w);
                return gin;
            }
            case OpKind::DkGlobal: {
                DkGlobalGrads<T> gr =
                    dk_backward_global(l.in_cache, l.scope, l.gen_global, l.spec, g);
                accumulate(l.g_scope.w, gr.scope.w);
                accumulate(l.g_gg_w.data, gr.gen_weight.data);
                accumulate(l.g_gg_b, gr.gen_bias);
                return gr.input;
            }
            case OpKind::DkLocal: {
                DkLocalGrads<T> gr =
                    dk_backward_local(l.in_cache, l.scope, l.gen_kernel, l.spec, g);
                accumulate(l.g_scope.w, gr.scope.w);
                accumulate(l.g_gk_conv.w, gr.gen_conv.w);
                accumulate(l.g_gk_b, gr.gen_bias);
                return gr.input;
            }
            case OpKind::Dc: {
                const ConvSpec gspec = l.gen_data.spec_for(l.spec);
                const Tensor<T> field = l.gen_data.generate(l.in_cache, l.spec);
                DcGrads<T> gr = dc_backward(l.in_cache, l.scope, field, l.spec, g);
                accumulate(l.g_scope.w, gr.kernel.w);
                auto [gin_gen, gconv] =
                    conv2d_backward(l.in_cache, l.gen_data.conv, gspec, gr.field);
                accumulate(l.g_gd_conv.w, gconv.w);
                accumulate_bias(l.g_gd_b, gr.field);
                accumulate(gr.input.data(), gin_gen.data());
                return gr.input;
            }
            case OpKind::Dcdk: {
                const ConvSpec kspec = l.gen_kernel.spec_for(l.spec);
                const ConvSpec dspec = l.gen_data.spec_for(l.spec);
                const Tensor<T> kfield = l.gen_kernel.generate(l.in_cache, l.spec);
                const Tensor<T> dfield = l.gen_data.generate(l.in_cache, l.spec);
                DcdkGrads<T> gr =
                    dcdk_backward(l.in_cache, l.scope, kfield, dfield, l.spec, g);
                accumulate(l.g_scope.w, gr.scope.w);
                auto [gin_k, gconv_k] = conv2d_backward(l.in_cache, l.gen_kernel.conv,
                                                        kspec, gr.kernel_field);
                auto [gin_d, gconv_d] =
                    conv2d_backward(l.in_cache, l.gen_data.conv, dspec, gr.data_field);
                accumulate(l.g_gk_conv.w, gconv_k.w);
                accumulate(l.g_gd_conv.w, gconv_d.w);
                accumulate_bias(l.g_gk_b, gr.kernel_field);
                accumulate_bias(l.g_gd_b, gr.data_field);
                accumulate(gr.input.data(), gin_k.data());
                accumulate(gr.input.data(), gin_d.data());
                return gr.input;
            }
            case OpKind::Relu: {
                Tensor<T> gin = g;
                for (std::size_t i = 0; i < gin.size(); ++i)
                    if (l.in_cache.data()[i] <= T(0)) gin.data()[i] = T(0);
                return gin;
            }
            case OpKind::Gap: {
                Tensor<T> gin(l.in_cache.n(), l.in_cache.c(), l.in_cache.h(),
                              l.in_cache.w());
                const T inv = T(1) / static_cast<T>(l.in_cache.h() * l.in_cache.w());
                for (int n = 0; n < gin.n(); ++n)
                    for (int c = 0; c < gin.c(); ++c) {
                        const T v = g(n, c, 0, 0) * inv;
                        for (int y = 0; y < gin.h(); ++y)
                            for (int x = 0; x < gin.w(); ++x) gin(n, c, y, x) = v;
                    }
                return gin;
            }
            case OpKind::Fc: {
                Tensor<T> gin(l.in_cache.n(), l.in_cache.c(), 1, 1);
                for (int n = 0; n < g.n(); ++n)
                    for (int m = 0; m < l.fc_w.rows; ++m) {
                        const T gv = g(n, m, 0, 0);
                        l.g_fc_b[m] += gv;
                        for (int c = 0; c < l.fc_w.cols; ++c) {
                            l.g_fc_w(m, c) += gv * l.in_cache(n, c, 0, 0);
                            gin(n, c, 0, 0) += gv * l.fc_w(m, c);
                        }
                    }
                return gin;
            }
        }
        throw std::logic_error("layer_backward: unreachable");
    }

    static void accumulate(std::vector<T>& into, const std::vector<T>& from) {
        for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
    }
    static void accumulate_bias(std::vector<T>& bias, const Tensor<T>& field) {
        for (int n = 0; n < field.n(); ++n)
            for (int c = 0; c < field.c(); ++c)
                for (int y = 0; y < field.h(); ++y)
                    for (int x = 0; x < field.w(); ++x) bias[c] += field(n, c, y, x);
    }
};

// ---------------------------------------------------------------------------
// Softmax cross-entropy head.
// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
    double loss;
    Tensor<T> grad_logits;
    int correct;
};

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                    const std::vector<int>& labels) {
    const int n = logits.n(), k = logits.c();
    LossResult<T> r{0.0, Tensor<T>(n, k, 1, 1), 0};
    for (int i = 0; i < n; ++i) {
        double max_logit = -1e300;
        int argmax = 0;
        for (int c = 0; c < k; ++c) {
            const double v = static_cast<double>(logits(i, c, 0, 0));
            if (v > max_logit) { max_logit = v; argmax = c; }
        }
        double z = 0.0;
        for (int c = 0; c < k; ++c)
            z += std::exp(static_cast<double>(logits(i, c, 0, 0)) - max_logit);
        const double logz = std::log(z) + max_logit;
        r.loss += (logz - static_cast<double>(logits(i, labels[i], 0, 0))) / n;
        if (argmax == labels[i]) ++r.correct;
        for (int c = 0; c < k; ++c) {
            const double p =
                std::exp(static_cast<double>(logits(i, c, 0, 0)) - logz);
            r.grad_logits(i, c, 0, 0) =
                static_cast<T>((p - (c == labels[i] ? 1.0 : 0.0)) / n);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Architecture builder: 4 depthwise-separable blocks, GAP, FC head.
// Deformable variants replace the depthwise 3x3 convs of blocks 3 and 4.
// ---------------------------------------------------------------------------

template <typename T>
Model<T> build_model(const std::string& arch, std::uint64_t seed, int classes = 4,
                     double gen_lr_mult = 1e-2, int scope_size = 4) {
    OpKind variant;
    if (arch == "rigid") variant = OpKind::Rigid;
    else if (arch == "dk-global") variant = OpKind::DkGlobal;
    else if (arch == "dk-local") variant = OpKind::DkLocal;
    else if (arch == "dc") variant = OpKind::Dc;
    else if (arch == "dcdk") variant = OpKind::Dcdk;
    else throw std::invalid_argument("build_model: unknown arch '" + arch + "'");

    Rng rng(seed);
    Model<T> m;
    m.arch = arch;
    auto he_init = [&](std::vector<T>& w, int fan_in) {
        const double std = std::sqrt(2.0 / fan_in);
        for (auto& v : w) v = static_cast<T>(std * rng.normal());
    };
    auto dw_block = [&](int ch, int stride, OpKind kind) {
        Layer<T> l;
        l.kind = kind;
        l.spec = {3, stride, 1, true, ch, ch};
        // deformable kernels draw from a larger scope; DC keeps a rigid grid
        const int k_scope =
            (kind == OpKind::DkGlobal || kind == OpKind::DkLocal || kind == OpKind::Dcdk)
                ? scope_size
                : 3;
        l.scope = KernelScope<T>(3, k_scope, ch, 1);
        he_init(l.scope.w, 9);
        l.gen_lr_mult = gen_lr_mult;
        if (kind == OpKind::DkGlobal) l.gen_global = OffsetGeneratorGlobal<T>(3, ch);
        if (kind == OpKind::DkLocal || kind == OpKind::Dcdk)
            l.gen_kernel = OffsetGeneratorLocal<T>(3, ch);
        if (kind == OpKind::Dc || kind == OpKind::Dcdk)
            l.gen_data = OffsetGeneratorLocal<T>(3, ch);
        // zero-initialized generators start every offset at zero
        l.g_scope = KernelScope<T>(3, k_scope, ch, 1);
        l.g_gg_w = Matrix<T>(l.gen_global.weight.rows, l.gen_global.weight.cols);
        l.g_gg_b.assign(l.gen_global.bias.size(), T(0));
        l.g_gk_conv = KernelScope<T>(l.gen_kernel.conv.taps, l.gen_kernel.conv.scope,
                                     std::max(1, l.gen_kernel.conv.out_ch),
                                     std::max(1, l.gen_kernel.conv.in_planes));
        if (l.gen_kernel.conv.w.empty()) l.g_gk_conv.w.clear();
        l.g_gk_b.assign(l.gen_kernel.bias.size(), T(0));
        l.g_gd_conv = KernelScope<T>(l.gen_data.conv.taps, l.gen_data.conv.scope,
                                     std::max(1, l.gen_data.conv.out_ch),
                                     std::max(1, l.gen_data.conv.in_planes));
        if (l.gen_data.conv.w.empty()) l.g_gd_conv.w.clear();
        l.g_gd_b.assign(l.gen_data.bias.size(), T(0));
        m.layers.push_back(std::move(l));
    };
    auto pw_block = [&](int in_ch, int out_ch) {
        Layer<T> l;
        l.kind = OpKind::Rigid;
        l.spec = {1, 1, 0, false, in_ch, out_ch};
        l.scope = KernelScope<T>(1, 1, out_ch, in_ch);
        he_init(l.scope.w, in_ch);
        l.g_scope = KernelScope<T>(1, 1, out_ch, in_ch);
        m.layers.push_back(std::move(l));
    };
    auto relu_layer = [&]() {
        Layer<T> l;
        l.kind = OpKind::Relu;
        m.layers.push_back(std::move(l));
    };

    const int chans[5] = {1, 16, 32, 64, 64};
    const int strides[4] = {2, 1, 2, 1};
    for (int b = 0; b < 4; ++b) {
        const OpKind kind = b >= 2 ? variant : OpKind::Rigid;
        dw_block(chans[b], strides[b], kind);
        pw_block(chans[b], chans[b + 1]);
        relu_layer();
    }
    Layer<T> gap;
    gap.kind = OpKind::Gap;
    m.layers.push_back(std::move(gap));
    Layer<T> fc;
    fc.kind = OpKind::Fc;
    fc.fc_w = Matrix<T>(classes, chans[4]);
    he_init(fc.fc_w.data, chans[4]);
    fc.fc_b.assign(classes, T(0));
    fc.g_fc_w = Matrix<T>(classes, chans[4]);
    fc.g_fc_b.assign(classes, T(0));
    m.layers.push_back(std::move(fc));
    return m;
}

}  // namespace dk
