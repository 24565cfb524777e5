#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dk/conv.hpp"
#include "dk/sampler.hpp"

namespace dk {

// Runtime-adaptive operators: global/local deformable kernels (kernel-space
// resampling), deformable convolution (data-space resampling), and their
// combination. Offsets are shared across channels within a layer.

// Pooling + affine map producing one 2K^2 offset vector per image.
template <typename T>
struct OffsetGeneratorGlobal {
    Matrix<T> weight;     // 2K^2 x C
    std::vector<T> bias;  // 2K^2

    OffsetGeneratorGlobal() = default;
    OffsetGeneratorGlobal(int k, int in_channels)
        : weight(2 * k * k, in_channels), bias(2 * k * k, T(0)) {}

    Tensor<T> generate(const Tensor<T>& input) const {
        return fully_connected(global_avg_pool(input), weight, bias);
    }
};

// Parallel convolution with the target kernel's configuration but 2K^2
// output channels; produces one offset vector per output location.
template <typename T>
struct OffsetGeneratorLocal {
    KernelScope<T> conv;  // (2K^2) x C x K x K
    std::vector<T> bias;  // 2K^2

    OffsetGeneratorLocal() = default;
    OffsetGeneratorLocal(int k, int in_channels)
        : conv(k, k, 2 * k * k, in_channels), bias(2 * k * k, T(0)) {}

    ConvSpec spec_for(const ConvSpec& target) const {
        ConvSpec s = target;
        s.depthwise = false;
        s.in_channels = target.in_channels;
        s.out_channels = 2 * target.kernel * target.kernel;
        return s;
    }

    Tensor<T> generate(const Tensor<T>& input, const ConvSpec& target) const {
        Tensor<T> field = conv2d_rigid(input, conv, spec_for(target));
        for (int n = 0; n < field.n(); ++n)
            for (int c = 0; c < field.c(); ++c)
                for (int y = 0; y < field.h(); ++y)
                    for (int x = 0; x < field.w(); ++x) field(n, c, y, x) += bias[c];
        return field;
    }
};

namespace detail {

// Bilinear read of an input plane at a fractional position; zero outside.
// The sampled value is cast to T before entering the accumulation so the
// zero-offset path reproduces the rigid convolution bitwise.
template <typename T>
T bilerp_zero(const Tensor<T>& t, int n, int c, double py, double px) {
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double fy = py - y0, fx = px - x0;
    double acc = 0.0;
    for (int a = 0; a < 2; ++a) {
        const double wy = a == 0 ? 1.0 - fy : fy;
        const int iy = y0 + a;
        if (wy == 0.0 || iy < 0 || iy >= t.h()) continue;
        for (int b = 0; b < 2; ++b) {
            const double wx = b == 0 ? 1.0 - fx : fx;
            const int ix = x0 + b;
            if (wx == 0.0 || ix < 0 || ix >= t.w()) continue;
            acc += wy * wx * static_cast<double>(t(n, c, iy, ix));
        }
    }
    return static_cast<T>(acc);
}

template <typename T>
void bilerp_scatter(Tensor<T>& g, int n, int c, double py, double px, double v) {
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double fy = py - y0, fx = px - x0;
    for (int a = 0; a < 2; ++a) {
        const double wy = a == 0 ? 1.0 - fy : fy;
        const int iy = y0 + a;
        if (wy == 0.0 || iy < 0 || iy >= g.h()) continue;
        for (int b = 0; b < 2; ++b) {
            const double wx = b == 0 ? 1.0 - fx : fx;
            const int ix = x0 + b;
            if (wx == 0.0 || ix < 0 || ix >= g.w()) continue;
            g(n, c, iy, ix) += static_cast<T>(wy * wx * v);
        }
    }
}

// d bilerp / d (py, px), same case-split convention as the kernel sampler:
// on an integer coordinate only the node underfoot contributes, branch -1.
template <typename T>
std::pair<double, double> bilerp_pos_grad(const Tensor<T>& t, int n, int c,
                                          double py, double px) {
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double fy = py - y0, fx = px - x0;
    auto read = [&](int iy, int ix) -> double {
        if (iy < 0 || iy >= t.h() || ix < 0 || ix >= t.w()) return 0.0;
        return static_cast<double>(t(n, c, iy, ix));
    };
    double ddy = 0.0, ddx = 0.0;
    for (int b = 0; b < 2; ++b) {  // y-direction: tent in y differentiated
        const double wx = b == 0 ? 1.0 - fx : fx;
        if (wx == 0.0) continue;
        ddy += wx * (-read(y0, x0 + b));
        if (fy > 0.0) ddy += wx * read(y0 + 1, x0 + b);
    }
    for (int a = 0; a < 2; ++a) {
        const double wy = a == 0 ? 1.0 - fy : fy;
        if (wy == 0.0) continue;
        ddx += wy * (-read(y0 + a, x0));
        if (fx > 0.0) ddx += wy * read(y0 + a, x0 + 1);
    }
    return {ddy, ddx};
}

template <typename T>
std::vector<T> offsets_at(const Tensor<T>& field, int n, int oy, int ox) {
    std::vector<T> o(field.c());
    for (int c = 0; c < field.c(); ++c) o[c] = field(n, c, oy, ox);
    return o;
}

}  // namespace detail

template <typename T>
struct DeformResult {
    Tensor<T> out;
    Tensor<T> offsets;  // clipped offsets actually used (per image or per location)
};

/// Global DK with directly injected per-image offsets (N, 2K^2, 1, 1).
template <typename T>
Tensor<T> dk_forward_global_fixed(const Tensor<T>& input, const KernelScope<T>& scope,
                                  const Tensor<T>& offsets, const ConvSpec& spec) {
    Tensor<T> out;
    for (int n = 0; n < input.n(); ++n) {
        std::vector<T> o = detail::offsets_at(offsets, n, 0, 0);
        o = clip_offsets(o, scope);
        const KernelScope<T> sampled = resample_kernel(scope, o);
        Tensor<T> one = conv2d_rigid(input.slice(n), sampled, spec);
        if (n == 0) out = Tensor<T>(input.n(), one.c(), one.h(), one.w());
        for (int c = 0; c < one.c(); ++c)
            for (int y = 0; y < one.h(); ++y)
                for (int x = 0; x < one.w(); ++x) out(n, c, y, x) = one(0, c, y, x);
    }
    return out;
}

/// Eq-style global DK: one offset set per image from the pooling generator.
template <typename T>
DeformResult<T> dk_forward_global(const Tensor<T>& input, const KernelScope<T>& scope,
                                  const OffsetGeneratorGlobal<T>& gen, const ConvSpec& spec) {
    Tensor<T> raw = gen.generate(input);
    Tensor<T> used(raw.n(), raw.c(), 1, 1);
    for (int n = 0; n < raw.n(); ++n) {
        auto clipped = clip_offsets(detail::offsets_at(raw, n, 0, 0), scope);
        for (int c = 0; c < raw.c(); ++c) used(n, c, 0, 0) = clipped[c];
    }
    return {dk_forward_global_fixed(input, scope, used, spec), std::move(used)};
}

/// Local DK with a fixed offset field (N, 2K^2, Ho, Wo); reference
/// per-location loop. Returns the clipped field actually used.
template <typename T>
DeformResult<T> dk_forward_local_fixed(const Tensor<T>& input, const KernelScope<T>& scope,
                                       const Tensor<T>& field, const ConvSpec& spec) {
    detail::check_conv_args(input, resample_kernel(scope, std::vector<T>(2 * scope.taps * scope.taps, T(0))), spec, true);
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w());
    if (field.n() != input.n() || field.c() != 2 * spec.kernel * spec.kernel ||
        field.h() != ho || field.w() != wo)
        throw std::invalid_argument("dk_forward_local: offset field shape mismatch");
    const int k = spec.kernel;
    Tensor<T> out(input.n(), spec.out_channels, ho, wo);
    Tensor<T> used = field;
    for (int n = 0; n < input.n(); ++n)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                auto o = clip_offsets(detail::offsets_at(field, n, oy, ox), scope);
                for (int c = 0; c < field.c(); ++c) used(n, c, oy, ox) = o[c];
                const KernelScope<T> sampled = resample_kernel(scope, o);
                for (int oc = 0; oc < spec.out_channels; ++oc) {
                    T acc = T(0);
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * spec.stride - spec.padding + ky;
                            if (iy < 0 || iy >= input.h()) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * spec.stride - spec.padding + kx;
                                if (ix < 0 || ix >= input.w()) continue;
                                acc += input(n, ic, iy, ix) * sampled.at(oc, ip, ky, kx);
                            }
                        }
                    }
                    out(n, oc, oy, ox) = acc;
                }
            }
    return {std::move(out), std::move(used)};
}

// Tiled local DK: reuses one sampled-kernel buffer across locations instead
// of allocating per location. Must match the reference loop bit for bit.
template <typename T>
DeformResult<T> dk_forward_local_tiled(const Tensor<T>& input, const KernelScope<T>& scope,
                                       const Tensor<T>& field, const ConvSpec& spec) {
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w());
    if (field.n() != input.n() || field.c() != 2 * spec.kernel * spec.kernel ||
        field.h() != ho || field.w() != wo)
        throw std::invalid_argument("dk_forward_local: offset field shape mismatch");
    const int k = spec.kernel;
    Tensor<T> out(input.n(), spec.out_channels, ho, wo);
    Tensor<T> used = field;
    KernelScope<T> sampled(scope.taps, scope.taps, scope.out_ch, scope.in_planes);
    std::vector<T> o(field.c());
    const auto base = scope.base_lattice();
    for (int n = 0; n < input.n(); ++n)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                for (int c = 0; c < field.c(); ++c) o[c] = field(n, c, oy, ox);
                const double b = scope.bound();
                for (std::size_t t = 0; t < base.size(); ++t) {
                    double ax = base[t].x + static_cast<double>(o[2 * t]);
                    double ay = base[t].y + static_cast<double>(o[2 * t + 1]);
                    if (ax > b) o[2 * t] = static_cast<T>(b - base[t].x);
                    if (ax < -b) o[2 * t] = static_cast<T>(-b - base[t].x);
                    if (ay > b) o[2 * t + 1] = static_cast<T>(b - base[t].y);
                    if (ay < -b) o[2 * t + 1] = static_cast<T>(-b - base[t].y);
                    const auto tx = detail::axis_taps(base[t].x + static_cast<double>(o[2 * t]), scope.scope);
                    const auto ty = detail::axis_taps(base[t].y + static_cast<double>(o[2 * t + 1]), scope.scope);
                    const int ky = static_cast<int>(t) / k, kx = static_cast<int>(t) % k;
                    for (int oc = 0; oc < scope.out_ch; ++oc)
                        for (int ip = 0; ip < scope.in_planes; ++ip) {
                            double acc = 0.0;
                            for (int a2 = 0; a2 < ty.count; ++a2)
                                for (int b2 = 0; b2 < tx.count; ++b2)
                                    acc += ty.weight[a2] * tx.weight[b2] *
                                           static_cast<double>(scope.at(oc, ip, ty.idx[a2], tx.idx[b2]));
                            sampled.at(oc, ip, ky, kx) = static_cast<T>(acc);
                        }
                }
                for (int c = 0; c < field.c(); ++c) used(n, c, oy, ox) = o[c];
                for (int oc = 0; oc < spec.out_channels; ++oc) {
                    T acc = T(0);
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * spec.stride - spec.padding + ky;
                            if (iy < 0 || iy >= input.h()) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * spec.stride - spec.padding + kx;
                                if (ix < 0 || ix >= input.w()) continue;
                                acc += input(n, ic, iy, ix) * sampled.at(oc, ip, ky, kx);
                            }
                        }
                    }
                    out(n, oc, oy, ox) = acc;
                }
            }
    return {std::move(out), std::move(used)};
}

/// Local DK driven by its parallel-convolution offset generator.
template <typename T>
DeformResult<T> dk_forward_local(const Tensor<T>& input, const KernelScope<T>& scope,
                                 const OffsetGeneratorLocal<T>& gen, const ConvSpec& spec) {
    return dk_forward_local_tiled(input, scope, gen.generate(input, spec), spec);
}

/// Deformable convolution: O_j = sum_k I_{j+k+dj} W_k, bilinear on the data
/// plane, zero outside the padded extent. field is (N, 2K^2, Ho, Wo).
template <typename T>
Tensor<T> dc_forward(const Tensor<T>& input, const KernelScope<T>& kernel,
                     const Tensor<T>& field, const ConvSpec& spec) {
    detail::check_conv_args(input, kernel, spec, true);
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w());
    if (field.n() != input.n() || field.c() != 2 * spec.kernel * spec.kernel ||
        field.h() != ho || field.w() != wo)
        throw std::invalid_argument("dc_forward: offset field shape mismatch");
    const int k = spec.kernel;
    Tensor<T> out(input.n(), spec.out_channels, ho, wo);
    for (int n = 0; n < input.n(); ++n)
        for (int oc = 0; oc < spec.out_channels; ++oc)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    T acc = T(0);
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int t = ky * k + kx;
                                const double py = oy * spec.stride - spec.padding + ky +
                                                  static_cast<double>(field(n, 2 * t + 1, oy, ox));
                                const double px = ox * spec.stride - spec.padding + kx +
                                                  static_cast<double>(field(n, 2 * t, oy, ox));
                                acc += detail::bilerp_zero(input, n, ic, py, px) *
                                       kernel.at(oc, ip, ky, kx);
                            }
                    }
                    out(n, oc, oy, ox) = acc;
                }
    return out;
}

/// Combined operator: O_j = sum_k I_{j+k+dj} W_{k+dk}. Both offset fields
/// are (N, 2K^2, Ho, Wo); kernel offsets are clipped to the scope.
template <typename T>
DeformResult<T> dcdk_forward(const Tensor<T>& input, const KernelScope<T>& scope,
                             const Tensor<T>& kernel_field, const Tensor<T>& data_field,
                             const ConvSpec& spec) {
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w());
    const int k = spec.kernel;
    if (kernel_field.c() != 2 * k * k || data_field.c() != 2 * k * k ||
        kernel_field.h() != ho || data_field.h() != ho ||
        kernel_field.w() != wo || data_field.w() != wo)
        throw std::invalid_argument("dcdk_forward: offset field shape mismatch");
    Tensor<T> out(input.n(), spec.out_channels, ho, wo);
    Tensor<T> used = kernel_field;
    for (int n = 0; n < input.n(); ++n)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                auto o = clip_offsets(detail::offsets_at(kernel_field, n, oy, ox), scope);
                for (int c = 0; c < kernel_field.c(); ++c) used(n, c, oy, ox) = o[c];
                const KernelScope<T> sampled = resample_kernel(scope, o);
                for (int oc = 0; oc < spec.out_channels; ++oc) {
                    T acc = T(0);
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int t = ky * k + kx;
                                const double py = oy * spec.stride - spec.padding + ky +
                                                  static_cast<double>(data_field(n, 2 * t + 1, oy, ox));
                                const double px = ox * spec.stride - spec.padding + kx +
                                                  static_cast<double>(data_field(n, 2 * t, oy, ox));
                                acc += detail::bilerp_zero(input, n, ic, py, px) *
                                       sampled.at(oc, ip, ky, kx);
                            }
                    }
                    out(n, oc, oy, ox) = acc;
                }
            }
    return {std::move(out), std::move(used)};
}

// ---------------------------------------------------------------------------
// Backward passes. Three gradient flows per deformable layer: to the data,
// to the stored kernel/scope, and to the offset source.
// ---------------------------------------------------------------------------

template <typename T>
struct DkGlobalGrads {
    Tensor<T> input;
    KernelScope<T> scope;
    Matrix<T> gen_weight;
    std::vector<T> gen_bias;
};

template <typename T>
DkGlobalGrads<T> dk_backward_global(const Tensor<T>& input, const KernelScope<T>& scope,
                                    const OffsetGeneratorGlobal<T>& gen, const ConvSpec& spec,
                                    const Tensor<T>& upstream) {
    const Tensor<T> pooled = global_avg_pool(input);
    const Tensor<T> raw = fully_connected(pooled, gen.weight, gen.bias);
    DkGlobalGrads<T> g{Tensor<T>(input.n(), input.c(), input.h(), input.w()),
                       KernelScope<T>(scope.taps, scope.scope, scope.out_ch, scope.in_planes),
                       Matrix<T>(gen.weight.rows, gen.weight.cols),
                       std::vector<T>(gen.bias.size(), T(0))};
    const double inv_hw = 1.0 / (static_cast<double>(input.h()) * input.w());
    for (int n = 0; n < input.n(); ++n) {
        const auto clipres = clip_offsets_masked(detail::offsets_at(raw, n, 0, 0), scope);
        const KernelScope<T> sampled = resample_kernel(scope, clipres.offsets);
        auto [gin_conv, gW] =
            conv2d_backward(input.slice(n), sampled, spec, upstream.slice(n));
        const SamplerGrads<T> sg =
            resample_backward(scope, clipres.offsets, gW, &clipres.clamped);
        for (std::size_t i = 0; i < g.scope.w.size(); ++i) g.scope.w[i] += sg.scope_grad.w[i];
        for (int r = 0; r < gen.weight.rows; ++r) {
            g.gen_bias[r] += sg.offset_grad[r];
            for (int c = 0; c < gen.weight.cols; ++c)
                g.gen_weight(r, c) += sg.offset_grad[r] * pooled(n, c, 0, 0);
        }
        for (int c = 0; c < input.c(); ++c) {
            double through_gen = 0.0;
            for (int r = 0; r < gen.weight.rows; ++r)
                through_gen += static_cast<double>(gen.weight(r, c)) *
                               static_cast<double>(sg.offset_grad[r]);
            const T per_pixel = static_cast<T>(through_gen * inv_hw);
            for (int y = 0; y < input.h(); ++y)
                for (int x = 0; x < input.w(); ++x)
                    g.input(n, c, y, x) = gin_conv(0, c, y, x) + per_pixel;
        }
    }
    return g;
}

template <typename T>
struct DkLocalGrads {
    Tensor<T> input;
    KernelScope<T> scope;
    KernelScope<T> gen_conv;
    std::vector<T> gen_bias;
};

template <typename T>
DkLocalGrads<T> dk_backward_local(const Tensor<T>& input, const KernelScope<T>& scope,
                                  const OffsetGeneratorLocal<T>& gen, const ConvSpec& spec,
                                  const Tensor<T>& upstream) {
    const ConvSpec gspec = gen.spec_for(spec);
    const Tensor<T> raw = gen.generate(input, spec);
    const int ho = raw.h(), wo = raw.w(), k = spec.kernel;
    DkLocalGrads<T> g{Tensor<T>(input.n(), input.c(), input.h(), input.w()),
                      KernelScope<T>(scope.taps, scope.scope, scope.out_ch, scope.in_planes),
                      KernelScope<T>(gen.conv.taps, gen.conv.scope, gen.conv.out_ch, gen.conv.in_planes),
                      std::vector<T>(gen.bias.size(), T(0))};
    Tensor<T> grad_field(raw.n(), raw.c(), ho, wo);
    for (int n = 0; n < input.n(); ++n)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                const auto clipres =
                    clip_offsets_masked(detail::offsets_at(raw, n, oy, ox), scope);
                const KernelScope<T> sampled = resample_kernel(scope, clipres.offsets);
                KernelScope<T> grad_sampled(k, k, scope.out_ch, scope.in_planes);
                for (int oc = 0; oc < spec.out_channels; ++oc) {
                    const T up = upstream(n, oc, oy, ox);
                    if (up == T(0)) continue;
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * spec.stride - spec.padding + ky;
                            if (iy < 0 || iy >= input.h()) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * spec.stride - spec.padding + kx;
                                if (ix < 0 || ix >= input.w()) continue;
                                g.input(n, ic, iy, ix) += up * sampled.at(oc, ip, ky, kx);
                                grad_sampled.at(oc, ip, ky, kx) += up * input(n, ic, iy, ix);
                            }
                        }
                    }
                }
                const SamplerGrads<T> sg =
                    resample_backward(scope, clipres.offsets, grad_sampled, &clipres.clamped);
                for (std::size_t i = 0; i < g.scope.w.size(); ++i)
                    g.scope.w[i] += sg.scope_grad.w[i];
                for (int c = 0; c < raw.c(); ++c) grad_field(n, c, oy, ox) = sg.offset_grad[c];
            }
    auto [gin_gen, g_conv] = conv2d_backward(input, gen.conv, gspec, grad_field);
    g.gen_conv = std::move(g_conv);
    for (int n = 0; n < input.n(); ++n)
        for (int c = 0; c < raw.c(); ++c)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) g.gen_bias[c] += grad_field(n, c, oy, ox);
    for (std::size_t i = 0; i < g.input.data().size(); ++i)
        g.input.data()[i] += gin_gen.data()[i];
    return g;
}

template <typename T>
struct DcGrads {
    Tensor<T> input;
    KernelScope<T> kernel;
    Tensor<T> field;  // d loss / d data offsets
};

template <typename T>
DcGrads<T> dc_backward(const Tensor<T>& input, const KernelScope<T>& kernel,
                       const Tensor<T>& field, const ConvSpec& spec,
                       const Tensor<T>& upstream) {
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w()), k = spec.kernel;
    DcGrads<T> g{Tensor<T>(input.n(), input.c(), input.h(), input.w()),
                 KernelScope<T>(kernel.taps, kernel.scope, kernel.out_ch, kernel.in_planes),
                 Tensor<T>(field.n(), field.c(), field.h(), field.w())};
    for (int n = 0; n < input.n(); ++n)
        for (int oc = 0; oc < spec.out_channels; ++oc)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const T up = upstream(n, oc, oy, ox);
                    if (up == T(0)) continue;
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int t = ky * k + kx;
                                const double py = oy * spec.stride - spec.padding + ky +
                                                  static_cast<double>(field(n, 2 * t + 1, oy, ox));
                                const double px = ox * spec.stride - spec.padding + kx +
                                                  static_cast<double>(field(n, 2 * t, oy, ox));
                                const double wv = static_cast<double>(kernel.at(oc, ip, ky, kx));
                                g.kernel.at(oc, ip, ky, kx) +=
                                    up * detail::bilerp_zero(input, n, ic, py, px);
                                detail::bilerp_scatter(g.input, n, ic, py, px,
                                                       static_cast<double>(up) * wv);
                                const auto [ddy, ddx] =
                                    detail::bilerp_pos_grad(input, n, ic, py, px);
                                g.field(n, 2 * t, oy, ox) +=
                                    static_cast<T>(static_cast<double>(up) * wv * ddx);
                                g.field(n, 2 * t + 1, oy, ox) +=
                                    static_cast<T>(static_cast<double>(up) * wv * ddy);
                            }
                    }
                }
    return g;
}

template <typename T>
struct DcdkGrads {
    Tensor<T> input;
    KernelScope<T> scope;
    Tensor<T> kernel_field;  // d loss / d kernel offsets
    Tensor<T> data_field;    // d loss / d data offsets
};

template <typename T>
DcdkGrads<T> dcdk_backward(const Tensor<T>& input, const KernelScope<T>& scope,
                           const Tensor<T>& kernel_field, const Tensor<T>& data_field,
                           const ConvSpec& spec, const Tensor<T>& upstream) {
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w()), k = spec.kernel;
    DcdkGrads<T> g{Tensor<T>(input.n(), input.c(), input.h(), input.w()),
                   KernelScope<T>(scope.taps, scope.scope, scope.out_ch, scope.in_planes),
                   Tensor<T>(kernel_field.n(), kernel_field.c(), ho, wo),
                   Tensor<T>(data_field.n(), data_field.c(), ho, wo)};
    for (int n = 0; n < input.n(); ++n)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                const auto clipres =
                    clip_offsets_masked(detail::offsets_at(kernel_field, n, oy, ox), scope);
                const KernelScope<T> sampled = resample_kernel(scope, clipres.offsets);
                KernelScope<T> grad_sampled(k, k, scope.out_ch, scope.in_planes);
                for (int oc = 0; oc < spec.out_channels; ++oc) {
                    const T up = upstream(n, oc, oy, ox);
                    if (up == T(0)) continue;
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int t = ky * k + kx;
                                const double py = oy * spec.stride - spec.padding + ky +
                                                  static_cast<double>(data_field(n, 2 * t + 1, oy, ox));
                                const double px = ox * spec.stride - spec.padding + kx +
                                                  static_cast<double>(data_field(n, 2 * t, oy, ox));
                                const double wv = static_cast<double>(sampled.at(oc, ip, ky, kx));
                                grad_sampled.at(oc, ip, ky, kx) +=
                                    up * detail::bilerp_zero(input, n, ic, py, px);
                                detail::bilerp_scatter(g.input, n, ic, py, px,
                                                       static_cast<double>(up) * wv);
                                const auto [ddy, ddx] =
                                    detail::bilerp_pos_grad(input, n, ic, py, px);
                                g.data_field(n, 2 * t, oy, ox) +=
                                    static_cast<T>(static_cast<double>(up) * wv * ddx);
                                g.data_field(n, 2 * t + 1, oy, ox) +=
                                    static_cast<T>(static_cast<double>(up) * wv * ddy);
                            }
                    }
                }
                const SamplerGrads<T> sg =
                    resample_backward(scope, clipres.offsets, grad_sampled, &clipres.clamped);
                for (std::size_t i = 0; i < g.scope.w.size(); ++i)
                    g.scope.w[i] += sg.scope_grad.w[i];
                for (int c = 0; c < kernel_field.c(); ++c)
                    g.kernel_field(n, c, oy, ox) = sg.offset_grad[c];
            }
    return g;
}

}  // namespace dk
